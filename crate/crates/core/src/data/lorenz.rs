//! Forced Lorenz system integrated with classical RK4:
//! `ẋ = σ(y − x) + g₁`, `ẏ = x(ρ − z) − y + g₂`, `ż = xy − βz + g₃`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, rng_from, Hidden, Trajectory};
use crate::error::{Error, Result};

/// Any component beyond this magnitude aborts generation.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// `g(t) = amplitude · sin(frequency · t + phase)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LorenzForcing {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl LorenzForcing {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (self.frequency * t + self.phase).sin()
    }

    /// `a ∈ [0,5]`, `ω ∈ [0.5,5]`, `φ ∈ [0,2π)`.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            amplitude: rng.random_range(0.0..=5.0),
            frequency: rng.random_range(0.5..=5.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub forcing_params: [LorenzForcing; 3],
    pub x0: [f64; 3],
    pub dt: f64,
    /// Recorded states, including `x0`.
    pub steps: usize,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            forcing_params: [LorenzForcing::default(); 3],
            x0: [0.0, 1.0, 0.0],
            dt: 0.01,
            steps: 1000,
        }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.beta > 0.0) || self.steps == 0 {
            return Err(Error::Usage(format!(
                "invalid Lorenz config: dt={}, beta={}, steps={}",
                self.dt, self.beta, self.steps
            )));
        }
        Ok(())
    }

    fn forcing(&self, t: f64) -> [f64; 3] {
        let f = &self.forcing_params;
        [f[0].eval(t), f[1].eval(t), f[2].eval(t)]
    }

    fn rhs(&self, t: f64, s: [f64; 3]) -> [f64; 3] {
        let g = self.forcing(t);
        [
            self.sigma * (s[1] - s[0]) + g[0],
            s[0] * (self.rho - s[2]) - s[1] + g[1],
            s[0] * s[1] - self.beta * s[2] + g[2],
        ]
    }

    /// One RK4 step of size `h` from time `t`.
    pub fn rk4_step(&self, t: f64, s: [f64; 3], h: f64) -> [f64; 3] {
        let axpy = |a: [f64; 3], k: [f64; 3], c: f64| [a[0] + c * k[0], a[1] + c * k[1], a[2] + c * k[2]];
        let k1 = self.rhs(t, s);
        let k2 = self.rhs(t + 0.5 * h, axpy(s, k1, 0.5 * h));
        let k3 = self.rhs(t + 0.5 * h, axpy(s, k2, 0.5 * h));
        let k4 = self.rhs(t + h, axpy(s, k3, h));
        std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }
}

/// Integrates one profile. The result is a pure function of `cfg`; `profile_id` only labels it.
pub fn gen_lorenz_trajectory(cfg: &LorenzConfig, profile_id: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let mut states = Vec::with_capacity(cfg.steps);
    let mut forcings = Vec::with_capacity(cfg.steps);
    let mut s = cfg.x0;
    for m in 0..cfg.steps {
        let t = m as f64 * cfg.dt;
        if s.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::Generation(format!("Lorenz trajectory diverged at step {m}: {s:?}")));
        }
        states.push(s.to_vec());
        forcings.push(cfg.forcing(t).to_vec());
        s = cfg.rk4_step(t, s, cfg.dt);
    }
    let hidden = Hidden::Lorenz {
        sigma: cfg.sigma,
        rho: cfg.rho,
        beta: cfg.beta,
        forcing: cfg.forcing_params,
    };
    Trajectory::new(states, forcings, hidden, profile_id)
}

/// Draws `σ ∈ [9,11]`, `ρ ∈ [26,30]`, `β ∈ [2.3,3.0]` and three forcings.
pub fn sample_config(base: &LorenzConfig, seed: u64) -> LorenzConfig {
    let mut rng = rng_from(seed);
    LorenzConfig {
        sigma: rng.random_range(9.0..=11.0),
        rho: rng.random_range(26.0..=30.0),
        beta: rng.random_range(2.3..=3.0),
        forcing_params: std::array::from_fn(|_| LorenzForcing::sample(&mut rng)),
        ..base.clone()
    }
}

/// `coefficients × loadings` profiles; profile id `c · loadings + l`.
pub fn generate(base: &LorenzConfig, coefficients: usize, loadings: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(coefficients * loadings);
    for c in 0..coefficients as u64 {
        let coef = sample_config(base, derive_seed(seed, &[c, 1]));
        for l in 0..loadings as u64 {
            let load = sample_config(base, derive_seed(seed, &[l, 2]));
            let cfg = LorenzConfig {
                forcing_params: load.forcing_params,
                ..coef.clone()
            };
            out.push(gen_lorenz_trajectory(&cfg, c * loadings as u64 + l)?);
        }
    }
    Ok(out)
}
