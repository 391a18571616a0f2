//! Mini-batch Adam training with per-epoch evaluation and best-test retention.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::data::{derive_seed, rng_from, WindowSample};
use crate::error::{Error, Result};
use crate::metrics::{mean_relative_l2, squared_l2};
use crate::model::{AsnoModel, Normalizer, Predictor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
    pub seed: u64,
    /// Evaluate every `eval_every` epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Epochs fitting the latent alone to the target before joint training.
    pub pretrain_epochs: usize,
    /// Refit the normaliser on the training split before the first step.
    pub fit_normalizer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            seed: 0,
            eval_every: 1,
            pretrain_epochs: 0,
            fit_normalizer: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Usage(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Usage("batch size and eval cadence must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) || self.clip < 0.0 {
            return Err(Error::Usage("invalid optimizer moments".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    cfg: TrainConfig,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            cfg: cfg.clone(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clips the accumulated gradient and applies one update to every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore) {
        let norm = store.grad_norm();
        let clip = if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            self.cfg.clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((x, &g), (mi, vi)) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g * clip;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *x -= self.cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Held-out sets evaluated after each epoch.
#[derive(Clone, Debug, Default)]
pub struct EvalSets<'a> {
    pub test: &'a [WindowSample],
    pub ood_f: Option<&'a [WindowSample]>,
    pub ood_b: Option<&'a [WindowSample]>,
}

/// One evaluated epoch. Losses are mean relative L2 in physical units;
/// objectives are summed squared errors in normalised units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub ood_f_loss: Option<f64>,
    pub ood_b_loss: Option<f64>,
    pub train_objective: f64,
    pub test_objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_loss: f64,
    pub optimizer_steps: u64,
}

impl TrainReport {
    /// `epoch,train_loss,test_loss,ood_f_loss,ood_b_loss`; absent OOD sets are left empty.
    pub fn metrics_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,test_loss,ood_f_loss,ood_b_loss\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{},{}\n",
                r.epoch,
                r.train_loss,
                r.test_loss,
                opt(r.ood_f_loss),
                opt(r.ood_b_loss)
            ));
        }
        s
    }

    /// `epoch,train_objective,test_objective`.
    pub fn objective_csv(&self) -> String {
        let mut s = String::from("epoch,train_objective,test_objective\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", r.epoch, r.train_objective, r.test_objective));
        }
        s
    }

    pub fn initial(&self) -> Option<&EpochRecord> {
        self.records.first()
    }
}

/// Mean relative L2 of physical predictions and summed normalised squared error.
pub fn evaluate(model: &AsnoModel, windows: &[WindowSample]) -> Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(windows.len());
    let mut objective = 0.0;
    let s2 = model.norm.x_std * model.norm.x_std;
    for w in windows {
        let p = model.predict(w)?;
        objective += squared_l2(&p, &w.target)? / s2;
        preds.push(p);
    }
    let targets: Vec<Vec<f64>> = windows.iter().map(|w| w.target.clone()).collect();
    Ok((mean_relative_l2(&preds, &targets)?, objective))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn record(model: &AsnoModel, train: &[WindowSample], sets: &EvalSets, epoch: usize) -> Result<EpochRecord> {
    let (train_loss, train_objective) = evaluate(model, train)?;
    let (test_loss, test_objective) = evaluate(model, sets.test)?;
    let ood = |s: Option<&[WindowSample]>| -> Result<Option<f64>> { s.map(|w| evaluate(model, w).map(|r| r.0)).transpose() };
    let r = EpochRecord {
        epoch,
        train_loss,
        test_loss,
        ood_f_loss: ood(sets.ood_f)?,
        ood_b_loss: ood(sets.ood_b)?,
        train_objective,
        test_objective,
    };
    if !(r.train_loss.is_finite() && r.test_loss.is_finite()) {
        return Err(Error::Diverged {
            epoch,
            detail: format!("train {} test {}", r.train_loss, r.test_loss),
        });
    }
    Ok(r)
}

/// One pass over `train` in shuffled mini-batches. Returns the summed objective.
fn run_epoch(model: &mut AsnoModel, opt: &mut Adam, train: &[WindowSample], cfg: &TrainConfig, epoch: usize, latent_only: bool) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_from(derive_seed(cfg.seed, &[epoch as u64, u64::from(latent_only)])));
    let mut objective = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        model.store.zero_grad();
        for &i in batch {
            let w = &train[i];
            let mut g = Graph::new();
            let loss = if latent_only {
                let out = model.forward_graph(&mut g, w)?;
                let t = g.constant(Tensor::row(&model.norm.state(&w.target)))?;
                g.squared_error(out.latent, t)?
            } else {
                model.loss_graph(&mut g, w)?
            };
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {l}"),
                });
            }
            objective += l;
            let avg = g.scale(loss, 1.0 / batch.len() as f64)?;
            g.backward(avg)?.accumulate(&mut model.store)?;
        }
        opt.step(&mut model.store);
    }
    Ok(objective)
}

/// Trains `model` in place, leaving it at the best test-loss checkpoint.
///
/// Epoch 0 is the untrained model. Evaluation is single-threaded, so two runs
/// with the same inputs produce bit-identical records.
pub fn train(model: &mut AsnoModel, train_set: &[WindowSample], sets: &EvalSets, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || sets.test.is_empty() {
        return Err(Error::Usage("training needs nonempty train and test sets".into()));
    }
    if cfg.fit_normalizer {
        model.norm = Normalizer::fit(train_set);
    }
    let mut opt = Adam::new(&model.store, cfg);
    if cfg.pretrain_epochs > 0 && model.nao().is_some() {
        for p in 0..cfg.pretrain_epochs {
            run_epoch(model, &mut opt, train_set, cfg, p, true).map_err(|e| diverged(0, e))?;
        }
    }
    let first = record(model, train_set, sets, 0).map_err(|e| diverged(0, e))?;
    let mut best = (0, first.test_loss, model.store.clone());
    let mut records = vec![first];
    for epoch in 1..=cfg.epochs {
        let objective = run_epoch(model, &mut opt, train_set, cfg, epoch, false).map_err(|e| diverged(epoch, e))?;
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let mut r = record(model, train_set, sets, epoch).map_err(|e| diverged(epoch, e))?;
        r.train_objective = objective;
        if r.test_loss < best.1 {
            best = (epoch, r.test_loss, model.store.clone());
        }
        records.push(r);
    }
    model.store = best.2;
    Ok(TrainReport {
        records,
        best_epoch: best.0,
        best_test_loss: best.1,
        optimizer_steps: opt.steps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bdf::gen_homogeneous_trajectory;
    use crate::data::{build_windows, ForcingAlignment};
    use crate::encoder::EncoderConfig;
    use crate::model::{ModelConfig, Variant};

    fn tiny() -> AsnoModel {
        let mut cfg = ModelConfig::new(Variant::Asno, 5, 4, 1.0);
        cfg.encoder = EncoderConfig {
            d_embed: 8,
            d_t: 4,
            heads: 2,
            layers: 1,
            d_ff: 8,
            ..EncoderConfig::new(5, 4)
        };
        cfg.nao.d_k = 4;
        AsnoModel::new(cfg).unwrap()
    }

    fn windows(seed: u64) -> Vec<WindowSample> {
        let mut t = gen_homogeneous_trajectory(4, 14, seed, seed).unwrap();
        let mut rng = rng_from(seed + 100);
        for f in &mut t.forcings {
            *f = Tensor::randn(&[4], 1.0, &mut rng).into_data();
        }
        build_windows(&t, 5, ForcingAlignment::Target).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut m = tiny();
        let before = m.store.clone();
        let (tr, te) = (windows(1), windows(2));
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            batch_size: 3,
            ..Default::default()
        };
        train(&mut m, &tr, &EvalSets { test: &te, ..Default::default() }, &cfg).unwrap();
        for (a, b) in before.iter().zip(m.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[1.0, -2.0]));
        store.get_mut(id).grad = Tensor::row(&[0.3, -4.0]);
        let cfg = TrainConfig { clip: 0.0, ..Default::default() };
        Adam::new(&store, &cfg).step(&mut store);
        let v = store.value(id).data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-10 && (v[1] - (-2.0 + 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn clipping_bounds_the_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[0.0]));
        store.get_mut(id).grad = Tensor::row(&[50.0]);
        let cfg = TrainConfig {
            clip: 1.0,
            lr: 1.0,
            eps: 1000.0,
            ..Default::default()
        };
        // A large epsilon exposes the gradient magnitude that Adam otherwise normalises away.
        Adam::new(&store, &cfg).step(&mut store);
        assert!((store.value(id).data()[0] + 1.0 / 1001.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut m = tiny();
        m.store.get_mut(0).trainable = false;
        let before = m.store.value(0).clone();
        let (tr, te) = (windows(1), windows(2));
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        train(&mut m, &tr, &EvalSets { test: &te, ..Default::default() }, &cfg).unwrap();
        assert_eq!(&before, m.store.value(0));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (tr, te) = (windows(3), windows(4));
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let run = || {
            let mut m = tiny();
            let r = train(&mut m, &tr, &EvalSets { test: &te, ..Default::default() }, &cfg).unwrap();
            (r.metrics_csv(), r.objective_csv())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn report_keeps_best_checkpoint() {
        let (tr, te) = (windows(5), windows(6));
        let mut m = tiny();
        let cfg = TrainConfig {
            epochs: 4,
            lr: 1e-2,
            ..Default::default()
        };
        let r = train(&mut m, &tr, &EvalSets { test: &te, ..Default::default() }, &cfg).unwrap();
        assert_eq!(r.records.len(), 5);
        assert_eq!(r.records[0].epoch, 0);
        let best = r.records.iter().map(|x| x.test_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(best, r.best_test_loss);
        let (now, _) = evaluate(&m, &te).unwrap();
        assert!((now - best).abs() < 1e-12);
        assert!(r.metrics_csv().starts_with("epoch,train_loss,test_loss,ood_f_loss,ood_b_loss\n"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let mut m = tiny();
        assert!(train(&mut m, &[], &EvalSets { test: &windows(1), ..Default::default() }, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let mut m = tiny();
        let mut tr = windows(1);
        tr[0].target[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            fit_normalizer: false,
            ..Default::default()
        };
        let err = train(&mut m, &tr, &EvalSets { test: &windows(2), ..Default::default() }, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
