//! Gaussian random fields on the unit square with zero Dirichlet boundary.
//!
//! Fields are synthesised from the truncated Karhunen–Loève expansion over
//! `φ_ij(x, y) = 2 sin(iπx) sin(jπy)` with eigenvalues
//! `λ_ij = (π²(i² + j²) + τ²)^(−α)`, i.e. covariance `(−Δ + τ²)^(−α)`.
//! Samples live on the `grid_n × grid_n` interior nodes `x_k = k / (grid_n + 1)`,
//! stored row-major with the row index running along `y`.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::rng_from;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    /// Spectral decay exponent.
    pub alpha: f64,
    /// Inverse length scale.
    pub tau: f64,
    pub grid_n: usize,
    /// Sine modes kept per dimension.
    pub modes: usize,
    pub amplitude: f64,
}

impl GrfSpec {
    pub fn new(alpha: f64, tau: f64, grid_n: usize) -> Self {
        Self {
            alpha,
            tau,
            grid_n,
            modes: grid_n,
            amplitude: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.tau > 0.0) || self.modes == 0 || self.grid_n == 0 {
            return Err(Error::Usage(format!("invalid GRF spec {self:?}")));
        }
        Ok(())
    }

    /// KL eigenvalue of mode `(i, j)`, both 1-based.
    pub fn eigenvalue(&self, i: usize, j: usize) -> f64 {
        let k2 = PI * PI * ((i * i + j * j) as f64) + self.tau * self.tau;
        k2.powf(-self.alpha)
    }
}

/// Interior node coordinate `k / (n + 1)` for 0-based `k`.
pub fn node(k: usize, n: usize) -> f64 {
    (k + 1) as f64 / (n + 1) as f64
}

/// Draws one field of `grid_n²` values; a pure function of `(spec, seed)`.
pub fn sample_grf(spec: &GrfSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.grid_n;
    let m = spec.modes;
    let mut rng = rng_from(seed);
    // sines[i][k] = sin((i+1) π x_k)
    let sines: Vec<Vec<f64>> = (1..=m)
        .map(|i| (0..n).map(|k| (i as f64 * PI * node(k, n)).sin()).collect())
        .collect();

    let mut field = vec![0.0; n * n];
    // Partial sums over the x-mode first: row_coef[j][col] = Σ_i c_ij sin(iπx_col)
    for j in 0..m {
        let mut along_x = vec![0.0; n];
        for (i, sin_i) in sines.iter().enumerate() {
            let xi: f64 = StandardNormal.sample(&mut rng);
            let c = xi * spec.eigenvalue(i + 1, j + 1).sqrt();
            for (a, s) in along_x.iter_mut().zip(sin_i) {
                *a += c * s;
            }
        }
        for row in 0..n {
            let sy = 2.0 * sines[j][row];
            for col in 0..n {
                field[row * n + col] += along_x[col] * sy;
            }
        }
    }
    if spec.amplitude != 1.0 {
        field.iter_mut().for_each(|v| *v *= spec.amplitude);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kl_variance_at(spec: &GrfSpec, row: usize, col: usize) -> f64 {
        let n = spec.grid_n;
        let mut var = 0.0;
        for i in 1..=spec.modes {
            for j in 1..=spec.modes {
                let phi = 2.0 * (i as f64 * PI * node(col, n)).sin() * (j as f64 * PI * node(row, n)).sin();
                var += spec.eigenvalue(i, j) * phi * phi;
            }
        }
        var * spec.amplitude * spec.amplitude
    }

    #[test]
    fn zero_amplitude_gives_zero_field() {
        let mut spec = GrfSpec::new(2.0, 3.0, 9);
        spec.amplitude = 0.0;
        assert!(sample_grf(&spec, 5).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let spec = GrfSpec::new(2.0, 3.0, 9);
        assert_eq!(sample_grf(&spec, 1).unwrap(), sample_grf(&spec, 1).unwrap());
        assert_ne!(sample_grf(&spec, 1).unwrap(), sample_grf(&spec, 2).unwrap());
    }

    #[test]
    fn centre_variance_matches_kl_series() {
        let spec = GrfSpec::new(2.0, 3.0, 11);
        let centre = 5;
        let draws = 500;
        let samples: Vec<f64> = (0..draws)
            .map(|s| sample_grf(&spec, 1000 + s).unwrap()[centre * 11 + centre])
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (draws - 1) as f64;
        let analytic = kl_variance_at(&spec, centre, centre);
        assert!((var / analytic - 1.0).abs() < 0.10, "empirical {var} vs analytic {analytic}");
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(sample_grf(&GrfSpec::new(-1.0, 3.0, 4), 0).is_err());
        let mut s = GrfSpec::new(2.0, 3.0, 4);
        s.modes = 0;
        assert!(sample_grf(&s, 0).is_err());
    }

    #[test]
    fn field_vanishes_towards_boundary() {
        // Each basis function is O(h) on the first interior ring.
        let spec = GrfSpec::new(2.0, 3.0, 15);
        let (mut edge, mut mid) = (0.0, 0.0);
        for s in 0..40 {
            let f = sample_grf(&spec, s).unwrap();
            edge += (0..15).map(|c| f[c] * f[c]).sum::<f64>();
            mid += (0..15).map(|c| f[7 * 15 + c] * f[7 * 15 + c]).sum::<f64>();
        }
        assert!(edge < mid, "edge {edge} vs mid {mid}");
    }
}
