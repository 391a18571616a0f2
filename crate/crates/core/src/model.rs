//! The composite predictor and its two ablations.
//!
//! All three variants share the windowed interface: the latent head maps the
//! normalised history to `H_{m+1}`, and unless the variant is encoder-only the
//! NAO receives `J_0 = [X_{m−d+2..m}, H_{m+1}; F_{m−d+2..m+1}]` and adds
//! `K F_{m+1} w` to the latent.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::bdf::bdf_coefficients;
use crate::data::format::Container;
use crate::data::{rng_from, ForcingAlignment, Trajectory, WindowSample};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::kernel::{KernelEstimate, Provenance};
use crate::nao::{Nao, NaoConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Transformer latent followed by the NAO.
    Asno,
    /// Transformer latent used directly as the prediction.
    TeOnly,
    /// `H = Σ w_k X_{m−k+1}` followed by the NAO.
    LinearNao,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearMode {
    /// One scalar per history slot.
    #[default]
    Scalar,
    /// One diagonal map per history slot.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n: usize,
    pub state_dim: usize,
    pub encoder: EncoderConfig,
    pub nao: NaoConfig,
    pub linear_mode: LinearMode,
    /// Predict `H + K F w` instead of `K F w`.
    pub latent_skip: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Defaults for a history of `n` states of size `state_dim` and quadrature weight `weight`.
    pub fn new(variant: Variant, n: usize, state_dim: usize, weight: f64) -> Self {
        Self {
            variant,
            n,
            state_dim,
            encoder: EncoderConfig::new(n, state_dim),
            nao: NaoConfig::new(n, state_dim, weight),
            linear_mode: LinearMode::Scalar,
            latent_skip: true,
            init_seed: 0,
        }
    }

    /// Square grid of `grid_n²` interior nodes with `w = dx²`.
    pub fn for_grid(variant: Variant, grid_n: usize) -> Self {
        let dx = 1.0 / (grid_n + 1) as f64;
        Self::new(variant, 5, grid_n * grid_n, dx * dx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.state_dim == 0 {
            return Err(Error::Usage("history length and state size must be positive".into()));
        }
        if self.variant != Variant::LinearNao && (self.encoder.n != self.n || self.encoder.d_in != self.state_dim || self.encoder.d_latent != self.state_dim) {
            return Err(Error::Usage("encoder shape does not match the state".into()));
        }
        if self.variant != Variant::TeOnly && (self.nao.n_points != self.state_dim || self.nao.d == 0 || self.nao.d > self.n + 1) {
            return Err(Error::Usage(format!(
                "NAO needs n_points = {} and 1 <= d <= n + 1",
                self.state_dim
            )));
        }
        Ok(())
    }
}

/// Per-channel z-score statistics of states and forcings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: f64,
    pub x_std: f64,
    pub f_mean: f64,
    pub f_std: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            x_mean: 0.0,
            x_std: 1.0,
            f_mean: 0.0,
            f_std: 1.0,
        }
    }
}

fn mean_std<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for &v in values {
        n += 1.0;
        let delta = v - mean;
        mean += delta / n;
        m2 += delta * (v - mean);
    }
    let std = if n > 1.0 { (m2 / n).sqrt() } else { 0.0 };
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl Normalizer {
    /// Statistics over every state and forcing that a window touches.
    pub fn fit(samples: &[WindowSample]) -> Self {
        let (x_mean, x_std) = mean_std(samples.iter().flat_map(|s| s.history.iter().flatten().chain(&s.target)));
        let (f_mean, f_std) = mean_std(samples.iter().flat_map(|s| s.history_forcings.iter().flatten().chain(&s.forcing)));
        Self {
            x_mean,
            x_std,
            f_mean,
            f_std,
        }
    }

    pub fn state(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.x_mean) / self.x_std).collect()
    }

    pub fn state_inv(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.x_std + self.x_mean).collect()
    }

    pub fn forcing(&self, f: &[f64]) -> Vec<f64> {
        f.iter().map(|v| (v - self.f_mean) / self.f_std).collect()
    }
}

/// Anything that maps a window to the next state.
pub trait Predictor {
    fn predict(&self, window: &WindowSample) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
enum LatentHead {
    Transformer(Encoder),
    Linear(ParamId),
}

/// A trainable model: configuration, parameters and normalisation.
#[derive(Clone, Debug)]
pub struct AsnoModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub norm: Normalizer,
    head: LatentHead,
    nao: Option<Nao>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Normalised prediction, `1 × N`.
    pub prediction: Var,
    /// Normalised latent `H_{m+1}`, `1 × N`.
    pub latent: Var,
}

impl AsnoModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(cfg.init_seed);
        let mut store = ParamStore::new();
        let head = match cfg.variant {
            Variant::Asno | Variant::TeOnly => LatentHead::Transformer(Encoder::new(cfg.encoder.clone(), &mut store, "enc.", &mut rng)?),
            Variant::LinearNao => {
                let shape = match cfg.linear_mode {
                    LinearMode::Scalar => vec![1, cfg.n],
                    LinearMode::Diagonal => vec![cfg.n, cfg.state_dim],
                };
                // Start from "repeat the last state".
                let mut w = Tensor::zeros(&shape);
                let last = cfg.n - 1;
                match cfg.linear_mode {
                    LinearMode::Scalar => w.data_mut()[last] = 1.0,
                    LinearMode::Diagonal => w.data_mut()[last * cfg.state_dim..].iter_mut().for_each(|v| *v = 1.0),
                }
                LatentHead::Linear(store.add("linear.w", w))
            }
        };
        let nao = match cfg.variant {
            Variant::TeOnly => None,
            _ => Some(Nao::new(cfg.nao.clone(), &mut store, "nao.", &mut rng)?),
        };
        Ok(Self {
            cfg,
            store,
            norm: Normalizer::default(),
            head,
            nao,
        })
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.head {
            LatentHead::Transformer(e) => Some(e),
            LatentHead::Linear(_) => None,
        }
    }

    pub fn nao(&self) -> Option<&Nao> {
        self.nao.as_ref()
    }

    pub fn linear_weights_id(&self) -> Option<ParamId> {
        match self.head {
            LatentHead::Linear(id) => Some(id),
            LatentHead::Transformer(_) => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets the linear latent head to the BDF5 extrapolation weights.
    pub fn set_bdf_latent(&mut self, trainable: bool) -> Result<()> {
        let id = self
            .linear_weights_id()
            .ok_or_else(|| Error::Usage("only the linear latent head can be hard-wired".into()))?;
        if self.cfg.n != 5 {
            return Err(Error::Usage("BDF5 weights need a history of 5".into()));
        }
        let w = bdf_coefficients(5)?.history_weights();
        let t = match self.cfg.linear_mode {
            LinearMode::Scalar => Tensor::row(&w),
            LinearMode::Diagonal => {
                let rows: Vec<Vec<f64>> = w.iter().map(|&v| vec![v; self.cfg.state_dim]).collect();
                Tensor::from_rows(&rows)?
            }
        };
        self.store.set_value(id, t)?;
        self.store.get_mut(id).trainable = trainable;
        Ok(())
    }

    /// Learned linear weights ordered `w_1..w_n`, i.e. newest state first.
    pub fn linear_weights(&self) -> Option<Vec<f64>> {
        let id = self.linear_weights_id()?;
        let t = self.store.value(id);
        let per_slot: Vec<f64> = match self.cfg.linear_mode {
            LinearMode::Scalar => t.data().to_vec(),
            LinearMode::Diagonal => (0..self.cfg.n)
                .map(|i| t.row_slice(i).iter().sum::<f64>() / self.cfg.state_dim as f64)
                .collect(),
        };
        Some(per_slot.into_iter().rev().collect())
    }

    fn check_window(&self, w: &WindowSample) -> Result<()> {
        let n = self.cfg.n;
        let dim = self.cfg.state_dim;
        let ok = w.history.len() == n
            && w.history_forcings.len() == n
            && w.history.iter().chain(&w.history_forcings).all(|r| r.len() == dim)
            && w.forcing.len() == dim;
        if ok {
            Ok(())
        } else {
            Err(Error::dim("forward", format!("window does not match history {n} and state size {dim}")))
        }
    }

    /// Builds the forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph, w: &WindowSample) -> Result<ForwardVars> {
        self.check_window(w)?;
        let hist: Vec<Vec<f64>> = w.history.iter().map(|x| self.norm.state(x)).collect();
        let hist = g.constant(Tensor::from_rows(&hist)?)?;
        let latent = match &self.head {
            LatentHead::Transformer(enc) => enc.latent(g, &self.store, hist)?,
            LatentHead::Linear(id) => {
                let wv = g.param(&self.store, *id)?;
                match self.cfg.linear_mode {
                    LinearMode::Scalar => g.matmul(wv, hist)?,
                    LinearMode::Diagonal => {
                        let prod = g.mul(wv, hist)?;
                        let ones = g.constant(Tensor::ones(&[1, self.cfg.n]))?;
                        g.matmul(ones, prod)?
                    }
                }
            }
        };
        let Some(nao) = &self.nao else {
            return Ok(ForwardVars {
                prediction: latent,
                latent,
            });
        };
        let d = nao.cfg.d;
        let n = self.cfg.n;
        let mut h_rows = Vec::with_capacity(d);
        if d > 1 {
            h_rows.push(g.slice_rows(hist, n + 1 - d, d - 1)?);
        }
        h_rows.push(latent);
        let h_block = g.concat_rows(&h_rows)?;
        let mut f_rows: Vec<Vec<f64>> = w.history_forcings[n + 1 - d..].iter().map(|f| self.norm.forcing(f)).collect();
        let target_forcing = self.norm.forcing(&w.forcing);
        f_rows.push(target_forcing.clone());
        let f_block = g.constant(Tensor::from_rows(&f_rows)?)?;
        let j0 = g.concat_rows(&[h_block, f_block])?;
        let jt = nao.evolve(g, &self.store, j0)?;
        let fv = g.constant(Tensor::row(&target_forcing))?;
        let correction = nao.apply(g, &self.store, jt, fv)?;
        let prediction = if self.cfg.latent_skip {
            g.add(latent, correction)?
        } else {
            correction
        };
        Ok(ForwardVars { prediction, latent })
    }

    /// Normalised training loss `‖X̂ − X‖²` of one window on `g`.
    pub fn loss_graph(&self, g: &mut Graph, w: &WindowSample) -> Result<Var> {
        let out = self.forward_graph(g, w)?;
        let target = g.constant(Tensor::row(&self.norm.state(&w.target)))?;
        g.squared_error(out.prediction, target)
    }

    /// Physical-space latent `H_{m+1}`.
    pub fn latent(&self, w: &WindowSample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, w)?;
        Ok(self.norm.state_inv(g.value(out.latent).data()))
    }

    /// Learned kernel for the window's context, including the quadrature weight
    /// and the normalisation scale, so that `X − H ≈ K F` in physical units.
    pub fn effective_kernel(&self, w: &WindowSample) -> Result<KernelEstimate> {
        let nao = self
            .nao
            .as_ref()
            .ok_or_else(|| Error::Usage("encoder-only model has no kernel".into()))?;
        let mut g = Graph::new();
        let jt = self.context_state(&mut g, w)?;
        let k = nao.kernel_map(&mut g, &self.store, jt)?;
        let scale = nao.cfg.weight * self.norm.x_std / self.norm.f_std;
        KernelEstimate::new(g.value(k).scale(scale), Provenance::Learned)
    }

    fn context_state(&self, g: &mut Graph, w: &WindowSample) -> Result<Var> {
        let nao = self.nao.as_ref().expect("checked by caller");
        let out = self.forward_graph(g, w)?;
        let d = nao.cfg.d;
        let n = self.cfg.n;
        let mut rows: Vec<Vec<f64>> = w.history[n + 1 - d..].iter().map(|x| self.norm.state(x)).collect();
        rows.push(g.value(out.latent).data().to_vec());
        rows.extend(w.history_forcings[n + 1 - d..].iter().map(|f| self.norm.forcing(f)));
        rows.push(self.norm.forcing(&w.forcing));
        let j0 = g.constant(Tensor::from_rows(&rows)?)?;
        nao.evolve(g, &self.store, j0)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "model": self.cfg,
            "normalizer": self.norm,
            "trainable": self.store.iter().map(|p| p.trainable).collect::<Vec<_>>(),
        });
        Ok(Container {
            meta,
            tensors: self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(c.meta["model"].clone())?;
        let norm: Normalizer = serde_json::from_value(c.meta["normalizer"].clone())?;
        let trainable: Vec<bool> = serde_json::from_value(c.meta["trainable"].clone())?;
        let mut m = Self::new(cfg)?;
        m.norm = norm;
        if c.tensors.len() != m.store.len() || trainable.len() != m.store.len() {
            return Err(Error::Usage("checkpoint does not match the model layout".into()));
        }
        for (id, (name, t)) in c.tensors.iter().enumerate() {
            if m.store.get(id).name != *name {
                return Err(Error::Usage(format!("checkpoint tensor {name} out of order")));
            }
            m.store.set_value(id, t.clone())?;
            m.store.get_mut(id).trainable = trainable[id];
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl Predictor for AsnoModel {
    fn predict(&self, w: &WindowSample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, w)?;
        let pred = self.norm.state_inv(g.value(out.prediction).data());
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(pred)
    }
}

/// Autoregressive prediction record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub predictions: Vec<Vec<f64>>,
    /// `e_t = ‖X_t^true − X_t^pred‖₂`.
    pub errors: Vec<f64>,
    /// `E_t = Σ_{s ≤ t} e_s`.
    pub cumulative: Vec<f64>,
    /// First step whose prediction was non-finite, if any.
    pub failed_at: Option<usize>,
}

impl RolloutResult {
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// `t,e_t,E_t` rows with a header, `t` starting at 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,e_t,E_t\n");
        for (i, (e, c)) in self.errors.iter().zip(&self.cumulative).enumerate() {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", i + 1, e, c));
        }
        s
    }
}

/// Feeds predictions back as history, starting from `traj.states[start..start + n]`.
///
/// Forcings are read from the trajectory; errors are measured against its states.
pub fn rollout<P: Predictor>(
    model: &P,
    traj: &Trajectory,
    n: usize,
    start: usize,
    steps: usize,
    alignment: ForcingAlignment,
) -> Result<RolloutResult> {
    if steps == 0 || start + n + steps > traj.len() {
        return Err(Error::Usage(format!(
            "rollout of {steps} steps from {start} needs {} states, trajectory has {}",
            start + n + steps,
            traj.len()
        )));
    }
    let mut history: Vec<Vec<f64>> = traj.states[start..start + n].to_vec();
    let mut out = RolloutResult {
        predictions: Vec::with_capacity(steps),
        errors: Vec::with_capacity(steps),
        cumulative: Vec::with_capacity(steps),
        failed_at: None,
    };
    let mut total = 0.0;
    for t in 0..steps {
        let idx = start + n + t;
        let forcing_index = match alignment {
            ForcingAlignment::Target => idx,
            ForcingAlignment::Current => idx - 1,
        };
        let window = WindowSample {
            history: history.clone(),
            history_forcings: traj.forcings[idx - n..idx].to_vec(),
            forcing: traj.forcings[forcing_index].clone(),
            target: traj.states[idx].clone(),
            profile_id: traj.profile_id,
            target_index: idx,
        };
        let pred = match model.predict(&window) {
            Ok(p) if p.iter().all(|v| v.is_finite()) => p,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                out.failed_at = Some(t + 1);
                break;
            }
            Err(e) => return Err(e),
        };
        let e = pred
            .iter()
            .zip(&traj.states[idx])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += e;
        out.errors.push(e);
        out.cumulative.push(total);
        history.remove(0);
        history.push(pred.clone());
        out.predictions.push(pred);
    }
    Ok(out)
}

/// Predicts with the BDF5 extrapolation alone.
pub struct BdfExtrapolator;

impl Predictor for BdfExtrapolator {
    fn predict(&self, w: &WindowSample) -> Result<Vec<f64>> {
        crate::bdf::explicit_extrapolate(&bdf_coefficients(w.history.len())?, &w.history)
    }
}
