//! Backward differentiation formulas and the analytic objects derived from them.
//!
//! An order-`n` scheme reads
//! `Σ_{k=1..n} α_k X_{m−k+1} + X_{m+1} = Δt β F_{m+1}`,
//! split into the explicit extrapolation `X̃_{m+1} = −Σ α_k X_{m−k+1}` and the
//! implicit correction `X_{m+1} = X̃_{m+1} + Δt β F_{m+1}`.
//! Histories are always ordered oldest first.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{rng_from, Hidden, Trajectory};
use crate::error::{Error, Result};
use crate::kernel::{KernelEstimate, Provenance};
use crate::tensor::Tensor;

pub const MAX_ORDER: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdfScheme {
    pub order: usize,
    /// `α_1..α_n`; `α_k` multiplies `X_{m−k+1}`.
    pub alphas: Vec<f64>,
    pub beta: f64,
}

fn binomial(n: i64, k: i64) -> i64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Standard BDF coefficients for orders 1 through 6.
pub fn bdf_coefficients(order: usize) -> Result<BdfScheme> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::Usage(format!("BDF order must be in 1..={MAX_ORDER}, got {order}")));
    }
    let n = order as i64;
    // Integer numerators over lcm(1..n) so every coefficient is a single rounding.
    let lcm = (1..=n).fold(1, |l, j| l / gcd(l, j) * j);
    let denom: i64 = (1..=n).map(|j| lcm / j).sum();
    let alphas = (1..=n)
        .map(|k| {
            let sign = if k % 2 == 0 { 1 } else { -1 };
            let num: i64 = (k..=n).map(|j| sign * binomial(j, k) * (lcm / j)).sum();
            num as f64 / denom as f64
        })
        .collect();
    Ok(BdfScheme {
        order,
        alphas,
        beta: lcm as f64 / denom as f64,
    })
}

impl BdfScheme {
    /// `−α_k`, the weight on `X_{m−k+1}` in the extrapolation.
    pub fn explicit_weights(&self) -> Vec<f64> {
        self.alphas.iter().map(|a| -a).collect()
    }

    /// The explicit weights laid out to match an oldest-first history.
    pub fn history_weights(&self) -> Vec<f64> {
        let mut w = self.explicit_weights();
        w.reverse();
        w
    }
}

fn check_history(scheme: &BdfScheme, history: &[Vec<f64>], op: &'static str) -> Result<usize> {
    if history.len() != scheme.order {
        return Err(Error::dim(op, format!("history of {} for order {}", history.len(), scheme.order)));
    }
    let dim = history[0].len();
    if history.iter().any(|h| h.len() != dim) {
        return Err(Error::dim(op, "ragged history"));
    }
    Ok(dim)
}

/// `X̃_{m+1} = −Σ α_k X_{m−k+1}` for `history = X_{m−n+1..m}`.
pub fn explicit_extrapolate(scheme: &BdfScheme, history: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = check_history(scheme, history, "explicit_extrapolate")?;
    let mut out = vec![0.0; dim];
    for (h, w) in history.iter().zip(scheme.history_weights()) {
        for (o, v) in out.iter_mut().zip(h) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `Σ α_k X_{m−k+1} + X_{m+1} − Δt β F_{m+1}`.
pub fn residual(scheme: &BdfScheme, history: &[Vec<f64>], next: &[f64], f_next: &[f64], dt: f64) -> Result<Vec<f64>> {
    let extrap = explicit_extrapolate(scheme, history)?;
    if next.len() != extrap.len() || f_next.len() != extrap.len() {
        return Err(Error::dim("residual", "next state or forcing has the wrong size"));
    }
    Ok((0..extrap.len())
        .map(|i| next[i] - extrap[i] - dt * scheme.beta * f_next[i])
        .collect())
}

/// Dense `A = −∇·(b∇·)` on the interior nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DarcyOperator {
    pub a: Tensor,
    pub grid_n: usize,
    pub dx: f64,
}

/// 5-point stencil with harmonic-mean face coefficients, scaled by `1/dx²`.
pub fn assemble_darcy_operator(b: &[f64], grid_n: usize) -> Result<DarcyOperator> {
    let n = grid_n;
    let size = n * n;
    if b.len() != size || n == 0 {
        return Err(Error::dim("assemble_darcy_operator", format!("b has {} entries for grid {n}", b.len())));
    }
    if b.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Usage("permeability must be strictly positive".into()));
    }
    let dx = 1.0 / (n + 1) as f64;
    let mut a = Tensor::zeros(&[size, size]);
    for r in 0..n {
        for c in 0..n {
            let k = r * n + c;
            let neighbours = [
                (c + 1 < n).then(|| k + 1),
                (c > 0).then(|| k - 1),
                (r + 1 < n).then(|| k + n),
                (r > 0).then(|| k - n),
            ];
            for nb in neighbours {
                let face = match nb {
                    Some(j) => 2.0 * b[k] * b[j] / (b[k] + b[j]),
                    None => b[k],
                } / (dx * dx);
                a.set2(k, k, a.get2(k, k) + face);
                if let Some(j) = nb {
                    a.set2(k, j, a.get2(k, j) - face);
                }
            }
        }
    }
    Ok(DarcyOperator { a, grid_n, dx })
}

/// Sign attached to the forcing in the implicit solve.
///
/// `Negated`: `dX/dt = −AX − g`, giving `K_true = −c(I + cA)⁻¹`.
/// `Implicit`: `dX/dt = −AX + g`, giving `K_true = +c(I + cA)⁻¹`.
/// Here `c = β Δt` of BDF5.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    #[default]
    Negated,
    Implicit,
}

impl SignConvention {
    pub fn forcing_sign(self) -> f64 {
        match self {
            SignConvention::Negated => -1.0,
            SignConvention::Implicit => 1.0,
        }
    }
}

fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2("to_dmatrix")?;
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("non-empty matrix")
}

fn shifted(a: &Tensor, c: f64) -> Result<DMatrix<f64>> {
    let (r, cols) = a.dims2("shifted")?;
    if r != cols {
        return Err(Error::dim("shifted", "operator must be square"));
    }
    Ok(DMatrix::identity(r, r) + to_dmatrix(a)? * c)
}

/// `K_true = s·c·(I + cA)⁻¹` with `c = (60/137)Δt` and `s` from the convention.
pub fn true_kernel(a: &Tensor, dt: f64, convention: SignConvention) -> Result<KernelEstimate> {
    let scheme = bdf_coefficients(5)?;
    let c = scheme.beta * dt;
    let inv = shifted(a, c)?
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Solver("I + cA is singular".into()))?;
    KernelEstimate::new(from_dmatrix(&(inv * (convention.forcing_sign() * c))), Provenance::Analytic)
}

/// States that satisfy the BDF5 relation with `F = −AX + s·g` exactly.
///
/// The first five states are `init_history`; `forcings[j]` is `g` at state `j`,
/// so `forcings.len()` fixes the trajectory length.
pub fn gen_bdf5_exact_trajectory(
    a: &Tensor,
    forcings: &[Vec<f64>],
    dt: f64,
    init_history: &[Vec<f64>],
    convention: SignConvention,
    profile_id: u64,
) -> Result<Trajectory> {
    let scheme = bdf_coefficients(5)?;
    let dim = check_history(&scheme, init_history, "gen_bdf5_exact_trajectory")?;
    if forcings.len() <= 5 || forcings.iter().any(|f| f.len() != dim) || a.shape() != [dim, dim] {
        return Err(Error::dim("gen_bdf5_exact_trajectory", "forcings or operator do not match the history"));
    }
    let c = scheme.beta * dt;
    let s = convention.forcing_sign();
    let lu = shifted(a, c)?.lu();
    let mut states = init_history.to_vec();
    for g in &forcings[5..] {
        let extrap = explicit_extrapolate(&scheme, &states[states.len() - 5..])?;
        let rhs = nalgebra::DVector::from_iterator(dim, extrap.iter().zip(g).map(|(x, g)| x + s * c * g));
        let x = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Solver("I + cA is singular".into()))?;
        states.push(x.iter().copied().collect());
    }
    Trajectory::new(states, forcings.to_vec(), Hidden::None, profile_id)
}

/// `F = −AX + s·g` at every state of a trajectory produced with `a`.
pub fn state_derivative(a: &Tensor, traj: &Trajectory, convention: SignConvention) -> Result<Vec<Vec<f64>>> {
    let s = convention.forcing_sign();
    traj.states
        .iter()
        .zip(&traj.forcings)
        .map(|(x, g)| {
            let ax = a.matmul(&Tensor::new(vec![x.len(), 1], x.clone())?)?;
            Ok(ax.data().iter().zip(g).map(|(ax, g)| -ax + s * g).collect())
        })
        .collect()
}

/// Unforced BDF5 sequence from a standard-normal initial history; `X̃_{m+1} = X_{m+1}` exactly.
pub fn gen_homogeneous_trajectory(dim: usize, len: usize, seed: u64, profile_id: u64) -> Result<Trajectory> {
    if len <= 5 || dim == 0 {
        return Err(Error::Usage(format!("homogeneous trajectory needs more than 5 states, got {len}")));
    }
    let scheme = bdf_coefficients(5)?;
    let mut rng = rng_from(seed);
    let mut states: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    while states.len() < len {
        let next = explicit_extrapolate(&scheme, &states[states.len() - 5..])?;
        states.push(next);
    }
    Trajectory::new(states, vec![vec![0.0; dim]; len], Hidden::None, profile_id)
}
