//! Nonlocal attention operator.
//!
//! The state `J` stacks `d` latent snapshots over `d` forcing snapshots
//! (`2d × N`). Each of `T` steps applies
//! `J ← J + σ(J W_Q W_Kᵀ Jᵀ / √d_k) J` with `W_Q, W_K : N × d_k`. The kernel
//! map then forms
//! `K = W_{P,h} σ(Jᵀ W_Q W_Kᵀ J / √d_k) + W_{P,f} σ(F̃ᵀ W_Q W_Kᵀ J / √d_k)`
//! with `W_Q, W_K : 2d × d_k` and `F̃` the forcing block padded with zero latent rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::kernel::{KernelEstimate, Provenance};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Linear,
    /// Row-wise softmax over the last axis.
    Softmax,
}

/// How the forcing rows evolve through the attention steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForcingBlock {
    /// Every row of `J` is updated.
    #[default]
    Updated,
    /// Forcing rows keep their initial values.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaoConfig {
    /// Attention steps `T`.
    pub steps: usize,
    /// Snapshots per block.
    pub d: usize,
    pub n_points: usize,
    pub d_k: usize,
    pub activation: Activation,
    pub forcing_block: ForcingBlock,
    /// Quadrature weight `w` in `X = K F w`.
    pub weight: f64,
}

impl NaoConfig {
    pub fn new(d: usize, n_points: usize, weight: f64) -> Self {
        Self {
            steps: 1,
            d,
            n_points,
            d_k: 16,
            activation: Activation::Linear,
            forcing_block: ForcingBlock::Updated,
            weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.d == 0 || self.d_k == 0 || self.n_points == 0 || !(self.weight > 0.0) {
            return Err(Error::Usage(format!("invalid NAO config {self:?}")));
        }
        Ok(())
    }
}

/// `J_0 = [H; F]`, latent rows first.
pub fn init_state(h: &Tensor, f: &Tensor) -> Result<Tensor> {
    let (dh, nh) = h.dims2("init_state")?;
    let (df, nf) = f.dims2("init_state")?;
    if dh != df || nh != nf {
        return Err(Error::dim("init_state", format!("H is {dh}x{nh} but F is {df}x{nf}")));
    }
    Tensor::concat_rows(&[h, f])
}

#[derive(Clone, Debug)]
pub struct Nao {
    pub cfg: NaoConfig,
    step_q: Vec<ParamId>,
    step_k: Vec<ParamId>,
    map_q: ParamId,
    map_k: ParamId,
    proj_h: ParamId,
    proj_f: ParamId,
}

impl Nao {
    pub fn new<R: Rng>(cfg: NaoConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (n, dk, d2) = (cfg.n_points, cfg.d_k, 2 * cfg.d);
        let mut add = |name: String, t: Tensor| store.add(format!("{prefix}{name}"), t);
        let step_std = 0.1 / (n as f64).sqrt();
        let mut step_q = Vec::new();
        let mut step_k = Vec::new();
        for t in 1..=cfg.steps {
            step_q.push(add(format!("step{t}.W_Q"), Tensor::randn(&[n, dk], step_std, rng)));
            step_k.push(add(format!("step{t}.W_K"), Tensor::randn(&[n, dk], step_std, rng)));
        }
        let map_std = 1.0 / (d2 as f64).sqrt();
        let map_q = add("map.W_Q".into(), Tensor::randn(&[d2, dk], map_std, rng));
        let map_k = add("map.W_K".into(), Tensor::randn(&[d2, dk], map_std, rng));
        let proj_std = 1.0 / n as f64;
        let proj_h = add("W_Ph".into(), Tensor::randn(&[n, n], proj_std, rng));
        let proj_f = add("W_Pf".into(), Tensor::randn(&[n, n], proj_std, rng));
        Ok(Self {
            cfg,
            step_q,
            step_k,
            map_q,
            map_k,
            proj_h,
            proj_f,
        })
    }

    pub fn step_params(&self, t: usize) -> (ParamId, ParamId) {
        (self.step_q[t], self.step_k[t])
    }

    pub fn map_params(&self) -> (ParamId, ParamId) {
        (self.map_q, self.map_k)
    }

    pub fn projections(&self) -> (ParamId, ParamId) {
        (self.proj_h, self.proj_f)
    }

    fn activate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.cfg.activation {
            Activation::Linear => Ok(x),
            Activation::Softmax => g.softmax(x, 1),
        }
    }

    fn check_state(&self, g: &Graph, j: Var) -> Result<()> {
        let want = [2 * self.cfg.d, self.cfg.n_points];
        if g.value(j).shape() != want {
            return Err(Error::dim("nao", format!("state shape {:?}, expected {want:?}", g.value(j).shape())));
        }
        Ok(())
    }

    /// One residual attention step with the weights of step `t` (0-based).
    pub fn attention_step(&self, g: &mut Graph, store: &ParamStore, j: Var, t: usize) -> Result<Var> {
        self.check_state(g, j)?;
        let wq = g.param(store, self.step_q[t])?;
        let wk = g.param(store, self.step_k[t])?;
        let q = g.matmul(j, wq)?;
        let k = g.matmul(j, wk)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (self.cfg.d_k as f64).sqrt())?;
        let a = self.activate(g, logits)?;
        let mixed = g.matmul(a, j)?;
        let updated = g.add(j, mixed)?;
        let out = match self.cfg.forcing_block {
            ForcingBlock::Updated => updated,
            ForcingBlock::Frozen => {
                let h = g.slice_rows(updated, 0, self.cfg.d)?;
                let f = g.slice_rows(j, self.cfg.d, self.cfg.d)?;
                g.concat_rows(&[h, f])?
            }
        };
        if !g.value(out).all_finite() {
            return Err(Error::NonFinite { op: "attention_step" });
        }
        Ok(out)
    }

    /// `J_T` after all attention steps.
    pub fn evolve(&self, g: &mut Graph, store: &ParamStore, j0: Var) -> Result<Var> {
        (0..self.cfg.steps).try_fold(j0, |j, t| self.attention_step(g, store, j, t))
    }

    /// Materialised `N × N` kernel from `J_T`.
    pub fn kernel_map(&self, g: &mut Graph, store: &ParamStore, jt: Var) -> Result<Var> {
        self.check_state(g, jt)?;
        let d = self.cfg.d;
        let s = 1.0 / (self.cfg.d_k as f64).sqrt();
        let wq = g.param(store, self.map_q)?;
        let wk = g.param(store, self.map_k)?;
        let jt_t = g.transpose(jt)?;
        let a = g.matmul(jt_t, wq)?;
        let b = g.matmul(jt_t, wk)?;
        let bt = g.transpose(b)?;
        let inner_h = g.matmul(a, bt)?;
        let inner_h = g.scale(inner_h, s)?;
        // F̃ᵀ W_Q only sees the forcing rows of W_Q.
        let f_rows = g.slice_rows(jt, d, d)?;
        let f_t = g.transpose(f_rows)?;
        let wq_f = g.slice_rows(wq, d, d)?;
        let af = g.matmul(f_t, wq_f)?;
        let inner_f = g.matmul(af, bt)?;
        let inner_f = g.scale(inner_f, s)?;
        let sh = self.activate(g, inner_h)?;
        let sf = self.activate(g, inner_f)?;
        let ph = g.param(store, self.proj_h)?;
        let pf = g.param(store, self.proj_f)?;
        let kh = g.matmul(ph, sh)?;
        let kf = g.matmul(pf, sf)?;
        g.add(kh, kf)
    }

    /// `X = K F w` as a `1 × N` row, for a `1 × N` forcing row.
    ///
    /// With a linear activation the kernel is never materialised.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, jt: Var, forcing: Var) -> Result<Var> {
        if g.value(forcing).shape() != [1, self.cfg.n_points] {
            return Err(Error::dim("nao.apply", format!("forcing shape {:?}", g.value(forcing).shape())));
        }
        let f_col = g.transpose(forcing)?;
        let x_col = match self.cfg.activation {
            Activation::Softmax => {
                let k = self.kernel_map(g, store, jt)?;
                g.matmul(k, f_col)?
            }
            Activation::Linear => {
                self.check_state(g, jt)?;
                let d = self.cfg.d;
                let s = 1.0 / (self.cfg.d_k as f64).sqrt();
                let wq = g.param(store, self.map_q)?;
                let wk = g.param(store, self.map_k)?;
                // u = W_Kᵀ J f   (d_k × 1)
                let jf = g.matmul(jt, f_col)?;
                let wk_t = g.transpose(wk)?;
                let u = g.matmul(wk_t, jf)?;
                let qu = g.matmul(wq, u)?;
                let jt_t = g.transpose(jt)?;
                let ah = g.matmul(jt_t, qu)?;
                let f_rows = g.slice_rows(jt, d, d)?;
                let f_t = g.transpose(f_rows)?;
                let qu_f = g.slice_rows(qu, d, d)?;
                let af = g.matmul(f_t, qu_f)?;
                let ph = g.param(store, self.proj_h)?;
                let pf = g.param(store, self.proj_f)?;
                let xh = g.matmul(ph, ah)?;
                let xf = g.matmul(pf, af)?;
                let x = g.add(xh, xf)?;
                g.scale(x, s)?
            }
        };
        let x = g.scale(x_col, self.cfg.weight)?;
        g.transpose(x)
    }

    /// Full operator on plain tensors: evolve `[H; F]` and apply to `forcing`.
    pub fn forward(&self, store: &ParamStore, h: &Tensor, f: &Tensor, forcing: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let j0 = g.constant(init_state(h, f)?)?;
        let jt = self.evolve(&mut g, store, j0)?;
        let fv = g.constant(Tensor::row(forcing))?;
        let x = self.apply(&mut g, store, jt, fv)?;
        Ok(g.value(x).data().to_vec())
    }

    /// The learned kernel for one context, without the quadrature weight.
    pub fn kernel(&self, store: &ParamStore, h: &Tensor, f: &Tensor) -> Result<KernelEstimate> {
        let mut g = Graph::new();
        let j0 = g.constant(init_state(h, f)?)?;
        let jt = self.evolve(&mut g, store, j0)?;
        let k = self.kernel_map(&mut g, store, jt)?;
        KernelEstimate::new(g.value(k).clone(), Provenance::Learned)
    }
}

/// `X = K F w` on plain values.
pub fn apply_kernel(k: &KernelEstimate, forcing: &[f64], weight: f64) -> Result<Vec<f64>> {
    if forcing.len() != k.size() {
        return Err(Error::dim("apply_kernel", format!("kernel {} vs forcing {}", k.size(), forcing.len())));
    }
    let x = k.k.matmul(&Tensor::new(vec![forcing.len(), 1], forcing.to_vec())?)?;
    Ok(x.data().iter().map(|v| v * weight).collect())
}

/// `Σ_s ‖X̂_s − X_s‖²`.
pub fn nao_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check_pairs(predictions, targets, "nao_loss")?;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum())
}

/// Mean over systems of `‖X̂_s − X_s‖ / ‖X_s‖`.
pub fn nao_relative_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check_pairs(predictions, targets, "nao_relative_loss")?;
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        total += crate::metrics::relative_l2(p, t)?;
    }
    Ok(total / predictions.len() as f64)
}

fn check_pairs(p: &[Vec<f64>], t: &[Vec<f64>], op: &'static str) -> Result<()> {
    if p.len() != t.len() || p.is_empty() || p.iter().zip(t).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::dim(op, "predictions and targets do not match"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng_from;

    fn setup(cfg: NaoConfig, seed: u64) -> (Nao, ParamStore) {
        let mut store = ParamStore::new();
        let nao = Nao::new(cfg, &mut store, "nao.", &mut rng_from(seed)).unwrap();
        (nao, store)
    }

    fn context(d: usize, n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = rng_from(seed);
        (Tensor::randn(&[d, n], 1.0, &mut rng), Tensor::randn(&[d, n], 1.0, &mut rng))
    }

    #[test]
    fn init_state_layout() {
        let h = Tensor::row(&[1.0, 2.0]);
        let f = Tensor::row(&[3.0, 4.0]);
        let j = init_state(&h, &f).unwrap();
        assert_eq!(j.shape(), &[2, 2]);
        assert_eq!(j.row_slice(0), &[1.0, 2.0]);
        assert_eq!(j.row_slice(1), &[3.0, 4.0]);
        assert!(init_state(&h, &Tensor::row(&[1.0])).is_err());
    }

    #[test]
    fn zero_query_weights_leave_state_unchanged() {
        let (nao, mut store) = setup(NaoConfig { steps: 3, ..NaoConfig::new(2, 4, 1.0) }, 1);
        for t in 0..3 {
            store.set_value(nao.step_params(t).0, Tensor::zeros(&[4, 16])).unwrap();
        }
        let (h, f) = context(2, 4, 2);
        let j0 = init_state(&h, &f).unwrap();
        let mut g = Graph::new();
        let jv = g.constant(j0.clone()).unwrap();
        let jt = nao.evolve(&mut g, &store, jv).unwrap();
        assert_eq!(g.value(jt), &j0);
    }

    #[test]
    fn single_row_step_matches_hand_computation() {
        // J = [h; f] with d = 1 is 2×3; check the 1-row identity on the H row when F = 0.
        let cfg = NaoConfig { d_k: 1, ..NaoConfig::new(1, 3, 1.0) };
        let (nao, mut store) = setup(cfg, 0);
        let (wq, wk) = nao.step_params(0);
        store.set_value(wq, Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        store.set_value(wk, Tensor::new(vec![3, 1], vec![0.0, 2.0, 0.0]).unwrap()).unwrap();
        let j = [1.0, 2.0, 3.0];
        let mut g = Graph::new();
        let jv = g.constant(Tensor::from_rows(&[j.to_vec(), vec![0.0; 3]]).unwrap()).unwrap();
        let out = nao.attention_step(&mut g, &store, jv, 0).unwrap();
        // s = (j·wq)(j·wk) = 1 · 4 = 4; J₁ = s·J + J = 5J
        assert_eq!(g.value(out).row_slice(0), &[5.0, 10.0, 15.0]);
        assert_eq!(g.value(out).row_slice(1), &[0.0; 3]);
    }

    #[test]
    fn zero_projections_give_zero_kernel() {
        let (nao, mut store) = setup(NaoConfig::new(2, 5, 1.0), 3);
        let (ph, pf) = nao.projections();
        store.set_value(ph, Tensor::zeros(&[5, 5])).unwrap();
        store.set_value(pf, Tensor::zeros(&[5, 5])).unwrap();
        let (h, f) = context(2, 5, 4);
        assert!(nao.kernel(&store, &h, &f).unwrap().k.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reassociated_apply_matches_materialised_kernel() {
        let (nao, store) = setup(NaoConfig { steps: 2, ..NaoConfig::new(3, 6, 0.5) }, 5);
        let (h, f) = context(3, 6, 6);
        let forcing: Vec<f64> = (0..6).map(|i| (i as f64).cos()).collect();
        let direct = nao.forward(&store, &h, &f, &forcing).unwrap();
        let k = nao.kernel(&store, &h, &f).unwrap();
        let via_k = apply_kernel(&k, &forcing, 0.5).unwrap();
        for (a, b) in direct.iter().zip(&via_k) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn kernel_map_inner_matrix_is_a_gram_matrix() {
        // W_Q = W_K = [I; 0] with T bypassed: inner = Hᵀ H / √d_k for orthonormal H rows.
        let (d, n) = (2, 4);
        let (nao, mut store) = setup(NaoConfig { d_k: d, ..NaoConfig::new(d, n, 1.0) }, 0);
        let sel = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (wq, wk) = nao.map_params();
        store.set_value(wq, sel.clone()).unwrap();
        store.set_value(wk, sel).unwrap();
        let (ph, pf) = nao.projections();
        store.set_value(ph, Tensor::eye(n)).unwrap();
        store.set_value(pf, Tensor::zeros(&[n, n])).unwrap();
        let s = 0.5f64.sqrt();
        let h = Tensor::from_rows(&[vec![s, s, 0.0, 0.0], vec![0.0, 0.0, s, -s]]).unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 0.0, 1.0]]).unwrap();
        let j0 = init_state(&h, &f).unwrap();
        let mut g = Graph::new();
        let jv = g.constant(j0).unwrap();
        let k = nao.kernel_map(&mut g, &store, jv).unwrap();
        let gram = h.t_matmul(&h).unwrap().scale(1.0 / (d as f64).sqrt());
        assert!(g.value(k).sub(&gram).unwrap().norm() < 1e-14);
    }

    #[test]
    fn kernel_is_lipschitz_in_state() {
        let (nao, store) = setup(NaoConfig::new(2, 5, 1.0), 7);
        let (h, f) = context(2, 5, 8);
        let base = nao.kernel(&store, &h, &f).unwrap().k;
        let mut rng = rng_from(9);
        for _ in 0..10 {
            let dir = Tensor::randn(&[2, 5], 1.0, &mut rng);
            let dir = dir.scale(1.0 / dir.norm());
            let slopes: Vec<f64> = [1e-4, 1e-5]
                .iter()
                .map(|&eps| {
                    let k = nao.kernel(&store, &h.add(&dir.scale(eps)).unwrap(), &f).unwrap().k;
                    k.sub(&base).unwrap().norm() / eps
                })
                .collect();
            assert!((slopes[0] - slopes[1]).abs() < 1e-2 * slopes[1].max(1.0), "{slopes:?}");
        }
    }

    #[test]
    fn row_permutation_invariance_with_row_constant_projections() {
        let cfg = NaoConfig::new(3, 4, 1.0);
        let (nao, mut store) = setup(cfg, 11);
        let (ph, pf) = nao.projections();
        let rc = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.5, 0.1]; 4]).unwrap();
        store.set_value(ph, rc.clone()).unwrap();
        store.set_value(pf, rc).unwrap();
        // Row-symmetric maps: identical weights for every snapshot row within a block.
        let (wq, wk) = nao.map_params();
        let sym = |a: f64, b: f64| Tensor::from_rows(&[vec![a; 16], vec![a; 16], vec![a; 16], vec![b; 16], vec![b; 16], vec![b; 16]]).unwrap();
        store.set_value(wq, sym(0.2, -0.1)).unwrap();
        store.set_value(wk, sym(0.05, 0.3)).unwrap();
        let (h, f) = context(3, 4, 12);
        let perm = [2usize, 0, 1];
        let ph_rows: Vec<Vec<f64>> = perm.iter().map(|&i| h.row_slice(i).to_vec()).collect();
        let pf_rows: Vec<Vec<f64>> = perm.iter().map(|&i| f.row_slice(i).to_vec()).collect();
        let mut g = Graph::new();
        let a = g.constant(init_state(&h, &f).unwrap()).unwrap();
        let b = g.constant(init_state(&Tensor::from_rows(&ph_rows).unwrap(), &Tensor::from_rows(&pf_rows).unwrap()).unwrap()).unwrap();
        let ka = nao.kernel_map(&mut g, &store, a).unwrap();
        let kb = nao.kernel_map(&mut g, &store, b).unwrap();
        assert!(g.value(ka).sub(g.value(kb)).unwrap().norm() < 1e-12);
    }

    #[test]
    fn apply_kernel_identities() {
        let k = KernelEstimate::new(Tensor::eye(3).scale(1.0 / 0.25), Provenance::Analytic).unwrap();
        let x = apply_kernel(&k, &[1.0, -2.0, 0.5], 0.25).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 0.5]);
        assert_eq!(apply_kernel(&k, &[0.0; 3], 0.25).unwrap(), vec![0.0; 3]);
        assert!(apply_kernel(&k, &[0.0; 2], 0.25).is_err());
    }

    #[test]
    fn loss_values() {
        let p = vec![vec![1.0, 2.0]];
        assert_eq!(nao_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(nao_loss(&[vec![2.0]], &[vec![0.0]]).unwrap(), 4.0);
        let mut rng = rng_from(2);
        let a: Vec<Vec<f64>> = (0..3).map(|_| Tensor::randn(&[4], 1.0, &mut rng).into_data()).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|_| Tensor::randn(&[4], 1.0, &mut rng).into_data()).collect();
        let mut brute = 0.0;
        for s in 0..3 {
            for i in 0..4 {
                brute += (a[s][i] - b[s][i]).powi(2);
            }
        }
        assert!((nao_loss(&a, &b).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn frozen_forcing_rows_are_kept() {
        let cfg = NaoConfig { forcing_block: ForcingBlock::Frozen, steps: 2, ..NaoConfig::new(2, 4, 1.0) };
        let (nao, store) = setup(cfg, 13);
        let (h, f) = context(2, 4, 14);
        let mut g = Graph::new();
        let j0 = g.constant(init_state(&h, &f).unwrap()).unwrap();
        let jt = nao.evolve(&mut g, &store, j0).unwrap();
        assert_eq!(g.value(jt).slice_rows(2, 2).unwrap(), f);
        assert_ne!(g.value(jt).slice_rows(0, 2).unwrap(), h);
    }

    #[test]
    fn softmax_kernel_rows_before_projection_are_simplices() {
        let cfg = NaoConfig { activation: Activation::Softmax, ..NaoConfig::new(2, 4, 1.0) };
        let (nao, mut store) = setup(cfg, 15);
        let (ph, pf) = nao.projections();
        store.set_value(ph, Tensor::eye(4)).unwrap();
        store.set_value(pf, Tensor::zeros(&[4, 4])).unwrap();
        let (h, f) = context(2, 4, 16);
        let k = nao.kernel(&store, &h, &f).unwrap().k;
        for r in 0..4 {
            assert!((k.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
