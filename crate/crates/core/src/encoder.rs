//! Transformer encoder over the `n` most recent states.
//!
//! `E = X W_E + P`, then per layer
//! `x ← x + MHA(LN₁(x); x)` and `x ← x + FF(LN₂(x))`, where queries and keys
//! are read from the normalised stream and values from the raw stream. The
//! latent is the last position projected by `W_H`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n: usize,
    pub d_in: usize,
    pub d_embed: usize,
    /// Query/key/value width per head.
    pub d_t: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub d_latent: usize,
}

impl EncoderConfig {
    /// Desk defaults: 2 layers, 4 heads, `d_embed = 64`, `d_ff = 128`, latent of size `d_in`.
    pub fn new(n: usize, d_in: usize) -> Self {
        Self {
            n,
            d_in,
            d_embed: 64,
            d_t: 16,
            heads: 4,
            layers: 2,
            d_ff: 128,
            d_latent: d_in,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_in == 0 || self.d_latent == 0 || self.heads == 0 || self.d_t == 0 || self.d_ff == 0 {
            return Err(Error::Usage(format!("invalid encoder config {self:?}")));
        }
        if !self.d_embed.is_multiple_of(self.heads) {
            return Err(Error::Usage(format!(
                "d_embed {} is not divisible by {} heads",
                self.d_embed, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of one encoder inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    w_e: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    w_h: ParamId,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let de = cfg.d_embed;
        let glorot = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut add = |name: String, t: Tensor| store.add(format!("{prefix}{name}"), t);
        let w_e = add("W_E".into(), Tensor::randn(&[cfg.d_in, de], glorot(cfg.d_in), rng));
        let pos = add("P".into(), Tensor::randn(&[cfg.n, de], 0.1, rng));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let ln1_g = add(p("ln1.gamma"), Tensor::ones(&[1, de]));
            let ln1_b = add(p("ln1.beta"), Tensor::zeros(&[1, de]));
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for h in 0..cfg.heads {
                wq.push(add(p(&format!("head{h}.W_Tq")), Tensor::randn(&[de, cfg.d_t], glorot(de), rng)));
                wk.push(add(p(&format!("head{h}.W_Tk")), Tensor::randn(&[de, cfg.d_t], glorot(de), rng)));
                wv.push(add(p(&format!("head{h}.W_Tv")), Tensor::randn(&[de, cfg.d_t], glorot(de), rng)));
            }
            let wo = add(p("W_O"), Tensor::randn(&[cfg.heads * cfg.d_t, de], glorot(cfg.heads * cfg.d_t), rng));
            let ln2_g = add(p("ln2.gamma"), Tensor::ones(&[1, de]));
            let ln2_b = add(p("ln2.beta"), Tensor::zeros(&[1, de]));
            let w1 = add(p("ff.W1"), Tensor::randn(&[de, cfg.d_ff], glorot(de), rng));
            let b1 = add(p("ff.b1"), Tensor::zeros(&[1, cfg.d_ff]));
            let w2 = add(p("ff.W2"), Tensor::randn(&[cfg.d_ff, de], glorot(cfg.d_ff), rng));
            let b2 = add(p("ff.b2"), Tensor::zeros(&[1, de]));
            layers.push(LayerIds {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let w_h = add("W_H".into(), Tensor::randn(&[de, cfg.d_latent], glorot(de), rng));
        Ok(Self {
            cfg,
            w_e,
            pos,
            layers,
            w_h,
        })
    }

    pub fn latent_head(&self) -> ParamId {
        self.w_h
    }

    pub fn positional(&self) -> ParamId {
        self.pos
    }

    fn check_history(&self, g: &Graph, history: Var) -> Result<()> {
        let shape = g.value(history).shape();
        if shape != [self.cfg.n, self.cfg.d_in] {
            return Err(Error::dim(
                "encoder",
                format!("history shape {shape:?}, expected [{}, {}]", self.cfg.n, self.cfg.d_in),
            ));
        }
        Ok(())
    }

    /// `E = X W_E + P` for an `n × d_in` history.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, history: Var) -> Result<Var> {
        self.check_history(g, history)?;
        let w_e = g.param(store, self.w_e)?;
        let p = g.param(store, self.pos)?;
        let xe = g.matmul(history, w_e)?;
        g.add(xe, p)
    }

    fn layer(&self, g: &mut Graph, store: &ParamStore, x: Var, l: &LayerIds) -> Result<Var> {
        let scale = 1.0 / (self.cfg.d_t as f64).sqrt();
        let (g1, b1) = (g.param(store, l.ln1_g)?, g.param(store, l.ln1_b)?);
        let xn = g.layer_norm(x, g1, b1)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let wq = g.param(store, l.wq[h])?;
            let wk = g.param(store, l.wk[h])?;
            let wv = g.param(store, l.wv[h])?;
            let q = g.matmul(xn, wq)?;
            let k = g.matmul(xn, wk)?;
            let v = g.matmul(x, wv)?;
            let kt = g.transpose(k)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, scale)?;
            let a = g.softmax(logits, 1)?;
            heads.push(g.matmul(a, v)?);
        }
        let cat = g.concat_cols(&heads)?;
        let wo = g.param(store, l.wo)?;
        let att = g.matmul(cat, wo)?;
        let x = g.add(x, att)?;

        let (g2, b2) = (g.param(store, l.ln2_g)?, g.param(store, l.ln2_b)?);
        let xn2 = g.layer_norm(x, g2, b2)?;
        let (w1, bb1) = (g.param(store, l.w1)?, g.param(store, l.b1)?);
        let (w2, bb2) = (g.param(store, l.w2)?, g.param(store, l.b2)?);
        let h1 = g.matmul(xn2, w1)?;
        let h1 = g.add_row(h1, bb1)?;
        let h1 = g.relu(h1)?;
        let h2 = g.matmul(h1, w2)?;
        let h2 = g.add_row(h2, bb2)?;
        g.add(x, h2)
    }

    /// Final residual stream, `n × d_embed`.
    pub fn stream(&self, g: &mut Graph, store: &ParamStore, history: Var) -> Result<Var> {
        let mut x = self.embed(g, store, history)?;
        for l in &self.layers {
            x = self.layer(g, store, x, l)?;
        }
        Ok(x)
    }

    /// `H_{m+1}` as a `1 × d_latent` row.
    pub fn latent(&self, g: &mut Graph, store: &ParamStore, history: Var) -> Result<Var> {
        let x = self.stream(g, store, history)?;
        let last = g.slice_rows(x, self.cfg.n - 1, 1)?;
        let w_h = g.param(store, self.w_h)?;
        g.matmul(last, w_h)
    }

    /// Evaluates the latent for one history on a fresh tape.
    pub fn encode_latent(&self, store: &ParamStore, history: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(history)?)?;
        let out = self.latent(&mut g, store, h)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn encode_batch(&self, store: &ParamStore, histories: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
        histories.iter().map(|h| self.encode_latent(store, h)).collect()
    }

    /// Per-head attention rows of the last position in every layer, `[layer][head][i]`.
    pub fn last_position_attention(&self, store: &ParamStore, history: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(history)?)?;
        let mut x = self.embed(&mut g, store, h)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (g1, b1) = (g.param(store, l.ln1_g)?, g.param(store, l.ln1_b)?);
            let xn = g.layer_norm(x, g1, b1)?;
            let xn = g.value(xn).clone();
            let rows = (0..self.cfg.heads)
                .map(|hd| {
                    let q = xn.matmul(store.value(l.wq[hd]))?;
                    let k = xn.matmul(store.value(l.wk[hd]))?;
                    attention_weights(q.row_slice(self.cfg.n - 1), &k)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(rows);
            x = self.layer(&mut g, store, x, l)?;
        }
        Ok(out)
    }
}

/// `softmax_i(q · k_i / √d_t)` over the rows of `keys`.
pub fn attention_weights(query: &[f64], keys: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = keys.dims2("attention_weights")?;
    if query.len() != d {
        return Err(Error::dim("attention_weights", format!("query width {} vs key width {d}", query.len())));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = (0..n)
        .map(|i| keys.row_slice(i).iter().zip(query).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    Ok(Tensor::row(&logits).softmax(1)?.into_data())
}
