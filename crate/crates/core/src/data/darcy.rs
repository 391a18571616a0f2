//! Time-dependent Darcy flow `∂p/∂t = ∇·(b∇p) + g` on the unit square with
//! `p = 0` on the boundary.
//!
//! Space is discretised with the 5-point stencil on the interior nodes, using
//! harmonic means of `b` on cell faces (faces touching the boundary take the
//! interior value). Time stepping is implicit Euler,
//! `(I/Δt + A_h) p_{m+1} = p_m/Δt + g_{m+1}`, solved matrix-free with CG.

use serde::{Deserialize, Serialize};

use super::grf::{sample_grf, GrfSpec};
use super::{derive_seed, Hidden, Trajectory};
use crate::error::{Error, Result};

/// Relative residual the CG solve must reach.
pub const SOLVER_TOLERANCE: f64 = 1e-10;

/// Amplitude factor of the time-modulated OOD forcing.
pub const OOD_FORCING_SCALE: f64 = 200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarcyConfig {
    /// Interior nodes per side; the state has `grid_n²` entries.
    pub grid_n: usize,
    pub dt: f64,
    /// Implicit steps per profile; trajectories hold `steps + 1` states.
    pub steps: usize,
    pub micro_spec: GrfSpec,
    pub forcing_spec: GrfSpec,
    pub b_high: f64,
    pub b_low: f64,
    pub profiles: usize,
}

impl DarcyConfig {
    pub fn with_grid(grid_n: usize, steps: usize, profiles: usize) -> Self {
        Self {
            grid_n,
            dt: 5e-5,
            steps,
            micro_spec: GrfSpec::new(4.0, 5.0, grid_n),
            forcing_spec: GrfSpec::new(2.0, 3.0, grid_n),
            b_high: 12.0,
            b_low: 3.0,
            profiles,
        }
    }

    /// 20 profiles of 40 steps on an 8×8 grid.
    pub fn desk() -> Self {
        Self::with_grid(8, 40, 20)
    }

    /// 100 profiles of 100 steps on a 21×21 grid.
    pub fn full() -> Self {
        Self::with_grid(21, 100, 100)
    }

    /// Spacing of the interior grid, `1 / (grid_n + 1)`.
    pub fn dx(&self) -> f64 {
        1.0 / (self.grid_n + 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_high > self.b_low && self.b_low > 0.0) {
            return Err(Error::Usage("need b_high > b_low > 0".into()));
        }
        if !(self.dt > 0.0) || self.grid_n < 3 || self.steps == 0 {
            return Err(Error::Usage(format!(
                "invalid Darcy config: dt={}, grid_n={}, steps={}",
                self.dt, self.grid_n, self.steps
            )));
        }
        if self.micro_spec.grid_n != self.grid_n || self.forcing_spec.grid_n != self.grid_n {
            return Err(Error::Usage("GRF grid sizes must match grid_n".into()));
        }
        Ok(())
    }

    /// Microstructure spec of the OOD-b set (`α_χ = 7`, `τ_χ = 6`).
    pub fn ood_micro_spec(&self) -> GrfSpec {
        GrfSpec {
            alpha: 7.0,
            tau: 6.0,
            ..self.micro_spec
        }
    }
}

/// Thresholds a GRF at zero: `b_high` where the field is `≥ 0`, else `b_low`.
pub fn make_microstructure(spec: &GrfSpec, b_high: f64, b_low: f64, seed: u64) -> Result<Vec<f64>> {
    if !(b_high > b_low && b_low > 0.0) {
        return Err(Error::Usage("need b_high > b_low > 0".into()));
    }
    Ok(threshold(&sample_grf(spec, seed)?, b_high, b_low))
}

pub fn threshold(field: &[f64], b_high: f64, b_low: f64) -> Vec<f64> {
    field
        .iter()
        .map(|&v| if v >= 0.0 { b_high } else { b_low })
        .collect()
}

/// Number of nodes with a 4-neighbour in the other phase.
pub fn phase_boundary_count(b: &[f64], n: usize) -> usize {
    let mut count = 0;
    for r in 0..n {
        for c in 0..n {
            let v = b[r * n + c];
            let differs = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dr, dc)| {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                rr >= 0 && cc >= 0 && rr < n as i64 && cc < n as i64 && b[rr as usize * n + cc as usize] != v
            });
            count += usize::from(differs);
        }
    }
    count
}

/// Matrix-free `A_h = −∇·(b∇·)` on the interior nodes.
#[derive(Clone, Debug)]
pub struct DarcyStencil {
    n: usize,
    /// Face coefficient to the east neighbour (or boundary), scaled by `1/dx²`.
    east: Vec<f64>,
    west: Vec<f64>,
    north: Vec<f64>,
    south: Vec<f64>,
}

impl DarcyStencil {
    pub fn new(b: &[f64], n: usize) -> Result<Self> {
        if b.len() != n * n {
            return Err(Error::dim("DarcyStencil", format!("b has {} entries for n={n}", b.len())));
        }
        if b.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Usage("permeability must be strictly positive".into()));
        }
        let inv_dx2 = ((n + 1) as f64).powi(2);
        let harmonic = |a: f64, c: f64| 2.0 * a * c / (a + c);
        let mut east = vec![0.0; n * n];
        let mut west = vec![0.0; n * n];
        let mut north = vec![0.0; n * n];
        let mut south = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let k = r * n + c;
                let bk = b[k];
                east[k] = inv_dx2 * if c + 1 < n { harmonic(bk, b[k + 1]) } else { bk };
                west[k] = inv_dx2 * if c > 0 { harmonic(bk, b[k - 1]) } else { bk };
                north[k] = inv_dx2 * if r + 1 < n { harmonic(bk, b[k + n]) } else { bk };
                south[k] = inv_dx2 * if r > 0 { harmonic(bk, b[k - n]) } else { bk };
            }
        }
        Ok(Self {
            n,
            east,
            west,
            north,
            south,
        })
    }

    pub fn size(&self) -> usize {
        self.n * self.n
    }

    /// `out = A_h p`.
    pub fn apply(&self, p: &[f64], out: &mut [f64]) {
        let n = self.n;
        for r in 0..n {
            for c in 0..n {
                let k = r * n + c;
                let diag = self.east[k] + self.west[k] + self.north[k] + self.south[k];
                let mut v = diag * p[k];
                if c + 1 < n {
                    v -= self.east[k] * p[k + 1];
                }
                if c > 0 {
                    v -= self.west[k] * p[k - 1];
                }
                if r + 1 < n {
                    v -= self.north[k] * p[k + n];
                }
                if r > 0 {
                    v -= self.south[k] * p[k - n];
                }
                out[k] = v;
            }
        }
    }

    /// Solves `(shift·I + A_h) x = rhs` by conjugate gradients from `x`'s initial value.
    pub fn solve_shifted(&self, shift: f64, rhs: &[f64], x: &mut [f64]) -> Result<usize> {
        let size = self.size();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let rhs_norm = dot(rhs, rhs).sqrt();
        if rhs_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(0);
        }
        let mut ap = vec![0.0; size];
        self.apply(x, &mut ap);
        let mut r: Vec<f64> = (0..size).map(|i| rhs[i] - shift * x[i] - ap[i]).collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let max_iter = 20 * size + 100;
        for it in 0..max_iter {
            if rr.sqrt() <= SOLVER_TOLERANCE * rhs_norm {
                return Ok(it);
            }
            self.apply(&p, &mut ap);
            for i in 0..size {
                ap[i] += shift * p[i];
            }
            let alpha = rr / dot(&p, &ap);
            for i in 0..size {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..size {
                p[i] = r[i] + beta * p[i];
            }
        }
        Err(Error::Generation(format!(
            "CG did not reach residual {SOLVER_TOLERANCE:e} in {max_iter} iterations"
        )))
    }
}

/// Advances a Darcy profile from zero pressure under `forcings[0..=steps]`.
pub fn gen_darcy_trajectory(cfg: &DarcyConfig, b: &[f64], forcings: &[Vec<f64>], hidden: Hidden, profile_id: u64) -> Result<Trajectory> {
    let zero = vec![0.0; cfg.grid_n * cfg.grid_n];
    gen_darcy_trajectory_from(cfg, b, forcings, &zero, hidden, profile_id)
}

/// As [`gen_darcy_trajectory`] from an arbitrary initial pressure `p0`.
pub fn gen_darcy_trajectory_from(
    cfg: &DarcyConfig,
    b: &[f64],
    forcings: &[Vec<f64>],
    p0: &[f64],
    hidden: Hidden,
    profile_id: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    let size = cfg.grid_n * cfg.grid_n;
    if forcings.len() != cfg.steps + 1 || forcings.iter().any(|f| f.len() != size) || p0.len() != size {
        return Err(Error::dim(
            "gen_darcy_trajectory",
            format!("need {} forcings and states of size {size}", cfg.steps + 1),
        ));
    }
    let stencil = DarcyStencil::new(b, cfg.grid_n)?;
    let inv_dt = 1.0 / cfg.dt;
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(p0.to_vec());
    for m in 0..cfg.steps {
        let prev = &states[m];
        let rhs: Vec<f64> = prev
            .iter()
            .zip(&forcings[m + 1])
            .map(|(p, g)| p * inv_dt + g)
            .collect();
        let mut next = prev.clone();
        stencil.solve_shifted(inv_dt, &rhs, &mut next)?;
        states.push(next);
    }
    Trajectory::new(states, forcings.to_vec(), hidden, profile_id)
}

/// Which Darcy distribution to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DarcyVariant {
    /// Time-constant GRF forcing, training microstructures.
    InDistribution,
    /// Forcing `200 · g̃(x) · sin(qΔt)`.
    OodForcing,
    /// Microstructures from the rougher `(α_χ, τ_χ) = (7, 6)` field.
    OodMicrostructure,
}

const MICRO_STREAM: u64 = 1;
const FORCING_STREAM: u64 = 2;

/// Forcing sequence of `steps + 1` snapshots for one profile.
pub fn forcing_sequence(cfg: &DarcyConfig, variant: DarcyVariant, seed: u64, profile: u64) -> Result<Vec<Vec<f64>>> {
    let g = sample_grf(&cfg.forcing_spec, derive_seed(seed, &[profile, FORCING_STREAM]))?;
    Ok((0..=cfg.steps)
        .map(|q| match variant {
            DarcyVariant::OodForcing => {
                let s = OOD_FORCING_SCALE * (q as f64 * cfg.dt).sin();
                g.iter().map(|v| v * s).collect()
            }
            _ => g.clone(),
        })
        .collect())
}

/// Generates `cfg.profiles` trajectories of one variant; profile ids are `0..profiles`.
pub fn generate(cfg: &DarcyConfig, variant: DarcyVariant, seed: u64) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let spec = match variant {
        DarcyVariant::OodMicrostructure => cfg.ood_micro_spec(),
        _ => cfg.micro_spec,
    };
    (0..cfg.profiles as u64)
        .map(|p| {
            let b = make_microstructure(&spec, cfg.b_high, cfg.b_low, derive_seed(seed, &[p, MICRO_STREAM]))?;
            let forcings = forcing_sequence(cfg, variant, seed, p)?;
            let hidden = Hidden::Microstructure {
                b: b.clone(),
                alpha: spec.alpha,
                tau: spec.tau,
            };
            gen_darcy_trajectory(cfg, &b, &forcings, hidden, p)
        })
        .collect()
}

pub fn make_ood_f(cfg: &DarcyConfig, seed: u64) -> Result<Vec<Trajectory>> {
    generate(cfg, DarcyVariant::OodForcing, seed)
}

pub fn make_ood_b(cfg: &DarcyConfig, seed: u64) -> Result<Vec<Trajectory>> {
    generate(cfg, DarcyVariant::OodMicrostructure, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small(n: usize, steps: usize) -> DarcyConfig {
        DarcyConfig::with_grid(n, steps, 2)
    }

    #[test]
    fn zero_forcing_keeps_zero_state() {
        let cfg = small(6, 5);
        let b = vec![3.0; 36];
        let f = vec![vec![0.0; 36]; 6];
        let t = gen_darcy_trajectory(&cfg, &b, &f, Hidden::None, 0).unwrap();
        assert!(t.states.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn sine_mode_decays_at_discrete_rate() {
        let n = 9;
        let mut cfg = small(n, 10);
        cfg.dt = 1e-3;
        let bval = 2.0;
        let b = vec![bval; n * n];
        let h = cfg.dx();
        let p0: Vec<f64> = (0..n * n)
            .map(|k| (PI * (k % n + 1) as f64 * h).sin() * (PI * (k / n + 1) as f64 * h).sin())
            .collect();
        let f = vec![vec![0.0; n * n]; 11];
        let t = gen_darcy_trajectory_from(&cfg, &b, &f, &p0, Hidden::None, 0).unwrap();
        let lambda = bval * 2.0 * (4.0 / (h * h)) * (PI * h / 2.0).sin().powi(2);
        let factor = 1.0 / (1.0 + cfg.dt * lambda);
        for m in 1..t.len() {
            let ratio = t.states[m][40] / t.states[m - 1][40];
            assert!((ratio / factor - 1.0).abs() < 0.01, "step {m}: {ratio} vs {factor}");
        }
    }

    #[test]
    fn constant_coefficient_stencil_is_textbook() {
        let s = DarcyStencil::new(&[1.0; 9], 3).unwrap();
        let mut e = vec![0.0; 9];
        e[4] = 1.0;
        let mut out = vec![0.0; 9];
        s.apply(&e, &mut out);
        assert_eq!(out, vec![0.0, -16.0, 0.0, -16.0, 64.0, -16.0, 0.0, -16.0, 0.0]);
    }

    #[test]
    fn nonnegative_forcing_keeps_pressure_nonnegative() {
        let cfg = small(8, 20);
        let b = make_microstructure(&cfg.micro_spec, 12.0, 3.0, 4).unwrap();
        let g: Vec<f64> = sample_grf(&cfg.forcing_spec, 9).unwrap().iter().map(|v| v.abs()).collect();
        let t = gen_darcy_trajectory(&cfg, &b, &vec![g; 21], Hidden::None, 0).unwrap();
        assert!(t.states.iter().flatten().all(|&v| v >= -1e-12));
    }

    #[test]
    fn steady_forcing_approaches_stationary_solution() {
        let mut cfg = small(6, 60);
        cfg.dt = 2e-3;
        let b = make_microstructure(&cfg.micro_spec, 12.0, 3.0, 2).unwrap();
        let g = sample_grf(&cfg.forcing_spec, 3).unwrap();
        let t = gen_darcy_trajectory(&cfg, &b, &vec![g.clone(); 61], Hidden::None, 0).unwrap();
        let s = DarcyStencil::new(&b, 6).unwrap();
        let residual = |p: &[f64]| {
            let mut ap = vec![0.0; 36];
            s.apply(p, &mut ap);
            ap.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let res: Vec<f64> = (1..=60).step_by(10).map(|m| residual(&t.states[m])).collect();
        for w in res.windows(2) {
            assert!(w[1] < w[0], "residuals not decreasing: {res:?}");
        }
    }

    #[test]
    fn microstructure_of_positive_field_is_uniform_high() {
        assert_eq!(threshold(&[0.3, 0.0, 2.0], 12.0, 3.0), vec![12.0; 3]);
        assert!(make_microstructure(&GrfSpec::new(4.0, 5.0, 4), 3.0, 12.0, 0).is_err());
    }

    #[test]
    fn phase_fractions_are_balanced_on_average() {
        let spec = GrfSpec::new(4.0, 5.0, 21);
        let mut frac = 0.0;
        for s in 0..200 {
            let b = make_microstructure(&spec, 12.0, 3.0, s).unwrap();
            frac += b.iter().filter(|&&v| v == 12.0).count() as f64 / b.len() as f64;
        }
        frac /= 200.0;
        assert!((0.35..=0.65).contains(&frac), "high-phase fraction {frac}");
    }

    #[test]
    fn ood_microstructure_shifts_phase_boundary_density() {
        // With covariance (−Δ + τ²)^(−α) the (7, 6) field is smoother than (4, 5),
        // so the shift shows up as fewer phase-boundary nodes.
        let cfg = DarcyConfig::with_grid(21, 1, 1);
        let (mut train, mut ood) = (0usize, 0usize);
        for s in 0..100 {
            train += phase_boundary_count(&make_microstructure(&cfg.micro_spec, 12.0, 3.0, s).unwrap(), 21);
            ood += phase_boundary_count(&make_microstructure(&cfg.ood_micro_spec(), 12.0, 3.0, s).unwrap(), 21);
        }
        let ratio = ood as f64 / train as f64;
        assert!(ratio < 0.8, "ood {ood} vs train {train}");
    }

    #[test]
    fn ood_forcing_is_sine_modulated() {
        let cfg = small(5, 10);
        let base = forcing_sequence(&cfg, DarcyVariant::InDistribution, 3, 0).unwrap();
        let ood = forcing_sequence(&cfg, DarcyVariant::OodForcing, 3, 0).unwrap();
        assert!(ood[0].iter().all(|&v| v == 0.0));
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for q in 1..=10 {
            let expected = 200.0 * (q as f64 * cfg.dt).sin();
            assert!((norm(&ood[q]) / norm(&base[q]) - expected).abs() < 1e-9 * expected);
        }
    }

    #[test]
    fn ood_b_keeps_forcing_and_records_spec() {
        let cfg = small(6, 6);
        let base = generate(&cfg, DarcyVariant::InDistribution, 8).unwrap();
        let ood = make_ood_b(&cfg, 8).unwrap();
        for (a, b) in base.iter().zip(&ood) {
            assert_eq!(a.forcings, b.forcings);
            b.validate().unwrap();
            match &b.hidden {
                Hidden::Microstructure { alpha, tau, .. } => assert_eq!((*alpha, *tau), (7.0, 6.0)),
                h => panic!("unexpected hidden {h:?}"),
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = small(5, 4);
        assert_eq!(generate(&cfg, DarcyVariant::InDistribution, 1).unwrap(), generate(&cfg, DarcyVariant::InDistribution, 1).unwrap());
    }
}
