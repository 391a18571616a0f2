//! Run-directory pipeline behind the `asno` binary.
//!
//! Every subcommand reads its inputs from the run directory and writes its
//! outputs back into it:
//!
//! | subcommand       | reads                        | writes                                        |
//! |------------------|------------------------------|-----------------------------------------------|
//! | `gen-data`       | config                       | `data/*.asno`, `data/manifest.json`           |
//! | `train`          | datasets                     | `checkpoint.asnc`, `metrics.csv`, `objective.csv`, `train.json` |
//! | `eval`           | datasets, checkpoint         | `eval.json`                                   |
//! | `rollout`        | datasets, checkpoint         | `rollout.csv`, `rollout.json`                 |
//! | `kernel-compare` | datasets, checkpoint         | `kernel.asnc`, `kernel_*.csv`, `kernel.json`  |
//! | `report`         | all of the above             | `report.json`, `report.csv`                   |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bdf::{assemble_darcy_operator, gen_bdf5_exact_trajectory, true_kernel, SignConvention};
use crate::data::darcy::{self, DarcyConfig, DarcyVariant};
use crate::data::format::{read_dataset, read_json, write_dataset, write_json, write_matrix_csv, write_text, Container};
use crate::data::lorenz::{self, LorenzConfig};
use crate::data::{derive_seed, make_microstructure, rng_from, sample_grf, split_profiles, DatasetSplit, ForcingAlignment, GrfSpec, Hidden, Trajectory, WindowSample};
use crate::error::{Error, Result};
use crate::metrics::{kernel_recovery_error, latent_bdf_alignment, mape, MAPE_FLOOR};
use crate::model::{rollout, AsnoModel, ModelConfig, Variant};
use crate::tensor::Tensor;
use crate::train::{evaluate, train, EvalSets, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    #[default]
    Darcy,
    Lorenz,
    Bdf5Exact,
    ExternalFile,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzSetup {
    pub base: LorenzConfig,
    pub coefficients: usize,
    pub loadings: usize,
}

impl Default for LorenzSetup {
    fn default() -> Self {
        Self {
            base: LorenzConfig {
                steps: 200,
                ..Default::default()
            },
            coefficients: 4,
            loadings: 5,
        }
    }
}

/// Trajectories that satisfy the BDF5 relation with the Darcy operator exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bdf5Setup {
    pub grid_n: usize,
    pub dt: f64,
    /// States per trajectory, including the five initial ones.
    pub steps: usize,
    pub profiles: usize,
    pub convention: SignConvention,
    /// Draw a fresh forcing field at every step instead of one per profile.
    pub forcing_per_step: bool,
    /// Use one microstructure for every profile.
    pub shared_microstructure: bool,
    /// Zero forcing everywhere.
    pub homogeneous: bool,
    /// Standard deviation of the random initial history.
    pub init_scale: f64,
    pub micro_spec: GrfSpec,
    pub forcing_spec: GrfSpec,
    pub b_high: f64,
    pub b_low: f64,
}

impl Default for Bdf5Setup {
    fn default() -> Self {
        let d = DarcyConfig::desk();
        Self {
            grid_n: d.grid_n,
            dt: d.dt,
            steps: d.steps + 1,
            profiles: d.profiles,
            convention: SignConvention::Negated,
            forcing_per_step: true,
            shared_microstructure: true,
            homogeneous: false,
            init_scale: 1.0,
            micro_spec: d.micro_spec,
            forcing_spec: d.forcing_spec,
            b_high: d.b_high,
            b_low: d.b_low,
        }
    }
}

impl Bdf5Setup {
    pub fn generate(&self, seed: u64) -> Result<Vec<Trajectory>> {
        let size = self.grid_n * self.grid_n;
        let shared = make_microstructure(&self.micro_spec, self.b_high, self.b_low, derive_seed(seed, &[0, 1]))?;
        (0..self.profiles as u64)
            .map(|p| {
                let b = if self.shared_microstructure {
                    shared.clone()
                } else {
                    make_microstructure(&self.micro_spec, self.b_high, self.b_low, derive_seed(seed, &[p, 1]))?
                };
                let op = assemble_darcy_operator(&b, self.grid_n)?;
                let forcings: Vec<Vec<f64>> = if self.homogeneous {
                    vec![vec![0.0; size]; self.steps]
                } else if self.forcing_per_step {
                    (0..self.steps as u64)
                        .map(|q| sample_grf(&self.forcing_spec, derive_seed(seed, &[p, 2, q])))
                        .collect::<Result<_>>()?
                } else {
                    vec![sample_grf(&self.forcing_spec, derive_seed(seed, &[p, 2]))?; self.steps]
                };
                let mut rng = rng_from(derive_seed(seed, &[p, 3]));
                let init: Vec<Vec<f64>> = (0..5)
                    .map(|_| Tensor::randn(&[size], self.init_scale, &mut rng).into_data())
                    .collect();
                let mut t = gen_bdf5_exact_trajectory(&op.a, &forcings, self.dt, &init, self.convention, p)?;
                t.hidden = Hidden::Microstructure {
                    b,
                    alpha: self.micro_spec.alpha,
                    tau: self.micro_spec.tau,
                };
                Ok(t)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSetup {
    /// Index into the held-out profiles.
    pub profile: usize,
    pub start: usize,
    /// Upper bound on the number of autoregressive steps.
    pub steps: usize,
}

impl Default for RolloutSetup {
    fn default() -> Self {
        Self {
            profile: 0,
            start: 0,
            steps: 30,
        }
    }
}

/// Everything a run needs, stored as `config.json` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub scale: Scale,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub darcy: Option<DarcyConfig>,
    pub lorenz: LorenzSetup,
    pub bdf5: Bdf5Setup,
    /// Dataset read by `external-file` runs.
    pub external_path: Option<PathBuf>,
    pub train_fraction: f64,
    pub history: usize,
    pub alignment: ForcingAlignment,
    pub variant: Variant,
    /// Full model configuration; derived from the data when absent.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub rollout: RolloutSetup,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Darcy,
            scale: Scale::Desk,
            seed: 0,
            out_dir: PathBuf::from("run"),
            darcy: None,
            lorenz: LorenzSetup::default(),
            bdf5: Bdf5Setup::default(),
            external_path: None,
            train_fraction: 0.8,
            history: 5,
            alignment: ForcingAlignment::Target,
            variant: Variant::Asno,
            model: None,
            train: TrainConfig {
                epochs: 20,
                ..Default::default()
            },
            rollout: RolloutSetup::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn darcy_config(&self) -> DarcyConfig {
        self.darcy.clone().unwrap_or_else(|| match self.scale {
            Scale::Desk => DarcyConfig::desk(),
            Scale::Full => DarcyConfig::full(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Usage(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.history == 0 {
            return Err(Error::Usage("history must be at least 1".into()));
        }
        self.train.validate()?;
        match self.problem {
            Problem::Darcy => self.darcy_config().validate(),
            Problem::Lorenz => self.lorenz.base.validate(),
            Problem::Bdf5Exact if self.bdf5.steps <= 5 || self.bdf5.grid_n == 0 => {
                Err(Error::Usage("bdf5 runs need more than 5 states on a nonempty grid".into()))
            }
            Problem::ExternalFile => match &self.external_path {
                Some(p) if p.exists() => Ok(()),
                Some(p) => Err(Error::MissingArtifact(p.clone())),
                None => Err(Error::Usage("external-file runs need external_path".into())),
            },
            _ => Ok(()),
        }
    }

    /// Prints a note to stderr when the run is expensive.
    pub fn cost_warning(&self) -> Option<String> {
        (self.scale == Scale::Full).then(|| {
            "warning: full scale generates large datasets and trains for a long time on CPU".to_string()
        })
    }

    pub fn run_dir(&self) -> RunDir {
        RunDir::new(&self.out_dir)
    }
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.json")
    }

    pub fn dataset(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.asno"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path("checkpoint.asnc")
    }
}

/// Exclusive lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &RunDir) -> Result<Self> {
        fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
        let path = dir.path(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub file: PathBuf,
    pub sha256: String,
    pub profiles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid_n: usize,
    pub datasets: Vec<DatasetEntry>,
}

/// Named trajectory sets for one problem.
fn generate_sets(cfg: &ExperimentConfig) -> Result<(usize, Vec<(&'static str, Vec<Trajectory>)>)> {
    Ok(match cfg.problem {
        Problem::Darcy => {
            let d = cfg.darcy_config();
            (
                d.grid_n,
                vec![
                    ("dataset", darcy::generate(&d, DarcyVariant::InDistribution, cfg.seed)?),
                    ("ood_f", darcy::make_ood_f(&d, cfg.seed)?),
                    ("ood_b", darcy::make_ood_b(&d, cfg.seed)?),
                ],
            )
        }
        Problem::Lorenz => (
            0,
            vec![("dataset", lorenz::generate(&cfg.lorenz.base, cfg.lorenz.coefficients, cfg.lorenz.loadings, cfg.seed)?)],
        ),
        Problem::Bdf5Exact => (cfg.bdf5.grid_n, vec![("dataset", cfg.bdf5.generate(cfg.seed)?)]),
        Problem::ExternalFile => {
            let path = cfg.external_path.as_ref().ok_or_else(|| Error::Usage("missing external_path".into()))?;
            let (grid_n, trajs) = read_dataset(path)?;
            (grid_n, vec![("dataset", trajs)])
        }
    })
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Manifest> {
    let dir = cfg.run_dir();
    let (grid_n, sets) = generate_sets(cfg)?;
    let mut datasets = Vec::new();
    for (name, trajs) in sets {
        let file = dir.dataset(name);
        write_dataset(&file, &trajs, grid_n)?;
        datasets.push(DatasetEntry {
            name: name.to_string(),
            sha256: sha256_file(&file)?,
            file: PathBuf::from("data").join(format!("{name}.asno")),
            profiles: trajs.len(),
        });
    }
    let manifest = Manifest { grid_n, datasets };
    write_json(&dir.path("data/manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Windows of the run, split by profile.
pub struct Loaded {
    pub grid_n: usize,
    pub train_trajs: Vec<Trajectory>,
    pub test_trajs: Vec<Trajectory>,
    pub split: DatasetSplit,
    pub ood_f: Option<Vec<WindowSample>>,
    pub ood_b: Option<Vec<WindowSample>>,
    pub dataset_hash: String,
}

fn windows_of(trajs: &[Trajectory], n: usize, a: ForcingAlignment) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for t in trajs {
        out.extend(crate::data::build_windows(t, n, a)?);
    }
    Ok(out)
}

pub fn load(cfg: &ExperimentConfig) -> Result<Loaded> {
    let dir = cfg.run_dir();
    let main = dir.dataset("dataset");
    let (grid_n, trajs) = read_dataset(&main)?;
    let dataset_hash = sha256_file(&main)?;
    let (train_trajs, test_trajs) = split_profiles(trajs, cfg.train_fraction, cfg.seed);
    let split = DatasetSplit::from_trajectories(&train_trajs, &test_trajs, cfg.history, cfg.alignment)?;
    let optional = |name: &str| -> Result<Option<Vec<WindowSample>>> {
        let p = dir.dataset(name);
        if cfg.problem != Problem::Darcy || !p.exists() {
            return Ok(None);
        }
        Ok(Some(windows_of(&read_dataset(&p)?.1, cfg.history, cfg.alignment)?))
    };
    Ok(Loaded {
        grid_n,
        ood_f: optional("ood_f")?,
        ood_b: optional("ood_b")?,
        train_trajs,
        test_trajs,
        split,
        dataset_hash,
    })
}

/// Model configuration for the loaded data.
pub fn model_config(cfg: &ExperimentConfig, data: &Loaded) -> Result<ModelConfig> {
    if let Some(m) = &cfg.model {
        return Ok(m.clone());
    }
    let dim = data
        .train_trajs
        .first()
        .map(|t| t.state_dim())
        .ok_or_else(|| Error::Usage("empty training split".into()))?;
    let weight = if data.grid_n > 0 && data.grid_n * data.grid_n == dim {
        let dx = 1.0 / (data.grid_n + 1) as f64;
        dx * dx
    } else {
        1.0
    };
    let mut m = ModelConfig::new(cfg.variant, cfg.history, dim, weight);
    m.init_seed = derive_seed(cfg.seed, &[0x1417]);
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_test_loss: f64,
    pub initial_test_loss: f64,
    pub optimizer_steps: u64,
    pub parameters: usize,
    pub trainable_parameters: usize,
    pub dataset_sha256: String,
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let dir = cfg.run_dir();
    let data = load(cfg)?;
    let mut model = AsnoModel::new(model_config(cfg, &data)?)?;
    let sets = EvalSets {
        test: &data.split.test,
        ood_f: data.ood_f.as_deref(),
        ood_b: data.ood_b.as_deref(),
    };
    let report = train(&mut model, &data.split.train, &sets, &cfg.train)?;
    model.save(&dir.checkpoint())?;
    write_text(&dir.path("metrics.csv"), &report.metrics_csv())?;
    write_text(&dir.path("objective.csv"), &report.objective_csv())?;
    let summary = TrainSummary {
        best_epoch: report.best_epoch,
        best_test_loss: report.best_test_loss,
        initial_test_loss: report.records[0].test_loss,
        optimizer_steps: report.optimizer_steps,
        parameters: model.parameter_count(),
        trainable_parameters: model.store.trainable_count(),
        dataset_sha256: data.dataset_hash,
    };
    write_json(&dir.path("train.json"), &summary)?;
    Ok(summary)
}

fn load_model(dir: &RunDir) -> Result<AsnoModel> {
    AsnoModel::load(&dir.checkpoint())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean of `‖X̂ − X‖²` over held-out windows.
    pub test_abs_l2: f64,
    pub test_rel_l2: f64,
    pub ood_f_rel_l2: Option<f64>,
    pub ood_b_rel_l2: Option<f64>,
    pub mape_percent: f64,
    pub mape_excluded: usize,
    /// Present when the held-out forcings are identically zero.
    pub latent_bdf_alignment: Option<f64>,
}

pub fn run_eval(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let dir = cfg.run_dir();
    let data = load(cfg)?;
    let model = load_model(&dir)?;
    let test = &data.split.test;
    let mut abs = 0.0;
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    for w in test {
        let p = crate::model::Predictor::predict(&model, w)?;
        abs += crate::metrics::squared_l2(&p, &w.target)?;
        preds.extend_from_slice(&p);
        truth.extend_from_slice(&w.target);
    }
    let (rel, _) = evaluate(&model, test)?;
    let m = mape(&preds, &truth, MAPE_FLOOR)?;
    let ood = |s: &Option<Vec<WindowSample>>| -> Result<Option<f64>> { s.as_ref().map(|w| evaluate(&model, w).map(|r| r.0)).transpose() };
    let homogeneous = test.iter().all(|w| w.forcing.iter().chain(w.history_forcings.iter().flatten()).all(|&v| v == 0.0));
    let summary = EvalSummary {
        test_abs_l2: abs / test.len() as f64,
        test_rel_l2: rel,
        ood_f_rel_l2: ood(&data.ood_f)?,
        ood_b_rel_l2: ood(&data.ood_b)?,
        mape_percent: m.percent,
        mape_excluded: m.excluded,
        latent_bdf_alignment: if homogeneous && cfg.history == 5 {
            Some(latent_bdf_alignment(&model, test)?)
        } else {
            None
        },
    };
    write_json(&dir.path("eval.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub profile_id: u64,
    pub steps: usize,
    pub total: f64,
    pub failed_at: Option<usize>,
}

pub fn run_rollout(cfg: &ExperimentConfig) -> Result<RolloutSummary> {
    let dir = cfg.run_dir();
    let data = load(cfg)?;
    let model = load_model(&dir)?;
    let traj = data
        .test_trajs
        .get(cfg.rollout.profile)
        .ok_or_else(|| Error::Usage(format!("no held-out profile {}", cfg.rollout.profile)))?;
    let available = traj.len().saturating_sub(cfg.rollout.start + cfg.history);
    let steps = cfg.rollout.steps.min(available);
    let r = rollout(&model, traj, cfg.history, cfg.rollout.start, steps, cfg.alignment)?;
    write_text(&dir.path("rollout.csv"), &r.to_csv())?;
    let summary = RolloutSummary {
        profile_id: traj.profile_id,
        steps: r.errors.len(),
        total: r.total(),
        failed_at: r.failed_at,
    };
    write_json(&dir.path("rollout.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub profile_id: u64,
    pub target_index: usize,
    pub convention: SignConvention,
    pub recovery_error: f64,
}

/// Sign convention and time step under which the run's data relate forcing to state.
fn analytic_setup(cfg: &ExperimentConfig) -> Result<(f64, SignConvention)> {
    match cfg.problem {
        Problem::Darcy => Ok((cfg.darcy_config().dt, SignConvention::Implicit)),
        Problem::Bdf5Exact => Ok((cfg.bdf5.dt, cfg.bdf5.convention)),
        _ => Err(Error::Usage("kernel comparison needs a Darcy-type problem".into())),
    }
}

/// Compares the learned kernel on the first held-out window with the analytic one.
pub fn run_kernel_compare(cfg: &ExperimentConfig) -> Result<KernelSummary> {
    let dir = cfg.run_dir();
    let (dt, convention) = analytic_setup(cfg)?;
    let data = load(cfg)?;
    let model = load_model(&dir)?;
    let w = data.split.test.first().ok_or_else(|| Error::Usage("empty test split".into()))?;
    let traj = data
        .test_trajs
        .iter()
        .find(|t| t.profile_id == w.profile_id)
        .expect("window comes from a held-out profile");
    let b = traj
        .hidden
        .permeability()
        .ok_or_else(|| Error::Usage("dataset carries no microstructure".into()))?;
    let a = assemble_darcy_operator(b, data.grid_n)?.a;
    let analytic = true_kernel(&a, dt, convention)?;
    let learned = model.effective_kernel(w)?;
    let err = kernel_recovery_error(&learned, &analytic)?;
    Container {
        meta: serde_json::json!({"profile_id": w.profile_id, "target_index": w.target_index}),
        tensors: vec![("learned".into(), learned.k.clone()), ("analytic".into(), analytic.k.clone())],
    }
    .save(&dir.path("kernel.asnc"))?;
    write_matrix_csv(&dir.path("kernel_learned.csv"), &learned.k)?;
    write_matrix_csv(&dir.path("kernel_true.csv"), &analytic.k)?;
    let summary = KernelSummary {
        profile_id: w.profile_id,
        target_index: w.target_index,
        convention,
        recovery_error: err,
    };
    write_json(&dir.path("kernel.json"), &summary)?;
    Ok(summary)
}

/// Aggregated run metrics, tagged with the checkpoint and dataset they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_sha256: String,
    pub checkpoint_sha256: String,
    pub best_epoch: usize,
    pub test_abs_l2: f64,
    pub test_rel_l2: f64,
    pub ood_f_rel_l2: Option<f64>,
    pub ood_b_rel_l2: Option<f64>,
    pub mape_percent: f64,
    pub latent_bdf_alignment: Option<f64>,
    pub rollout_steps: Option<usize>,
    pub rollout_total: Option<f64>,
    pub kernel_recovery_error: Option<f64>,
}

const REPORT_FIELDS: [&str; 12] = [
    "dataset_sha256",
    "checkpoint_sha256",
    "best_epoch",
    "test_abs_l2",
    "test_rel_l2",
    "ood_f_rel_l2",
    "ood_b_rel_l2",
    "mape_percent",
    "latent_bdf_alignment",
    "rollout_steps",
    "rollout_total",
    "kernel_recovery_error",
];

impl MetricsReport {
    /// `metric,value` rows; absent metrics have an empty value.
    pub fn to_csv(&self) -> String {
        let f = |v: f64| format!("{v:.17e}");
        let of = |v: Option<f64>| v.map(f).unwrap_or_default();
        let values = [
            self.dataset_sha256.clone(),
            self.checkpoint_sha256.clone(),
            self.best_epoch.to_string(),
            f(self.test_abs_l2),
            f(self.test_rel_l2),
            of(self.ood_f_rel_l2),
            of(self.ood_b_rel_l2),
            f(self.mape_percent),
            of(self.latent_bdf_alignment),
            self.rollout_steps.map(|v| v.to_string()).unwrap_or_default(),
            of(self.rollout_total),
            of(self.kernel_recovery_error),
        ];
        let mut s = String::from("metric,value\n");
        for (k, v) in REPORT_FIELDS.iter().zip(values) {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Format {
            path: PathBuf::from("report.csv"),
            detail: d,
        };
        let mut lines = text.lines();
        if lines.next() != Some("metric,value") {
            return Err(bad("missing header".into()));
        }
        let mut map = std::collections::BTreeMap::new();
        for line in lines {
            let (k, v) = line.split_once(',').ok_or_else(|| bad(format!("malformed row {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad number for {k}"))) };
        let opt = |k: &str| -> Result<Option<f64>> {
            let v = get(k)?;
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(format!("bad number for {k}")))
            }
        };
        let steps = get("rollout_steps")?;
        Ok(Self {
            dataset_sha256: get("dataset_sha256")?,
            checkpoint_sha256: get("checkpoint_sha256")?,
            best_epoch: get("best_epoch")?.parse().map_err(|_| bad("bad best_epoch".into()))?,
            test_abs_l2: num("test_abs_l2")?,
            test_rel_l2: num("test_rel_l2")?,
            ood_f_rel_l2: opt("ood_f_rel_l2")?,
            ood_b_rel_l2: opt("ood_b_rel_l2")?,
            mape_percent: num("mape_percent")?,
            latent_bdf_alignment: opt("latent_bdf_alignment")?,
            rollout_steps: if steps.is_empty() {
                None
            } else {
                Some(steps.parse().map_err(|_| bad("bad rollout_steps".into()))?)
            },
            rollout_total: opt("rollout_total")?,
            kernel_recovery_error: opt("kernel_recovery_error")?,
        })
    }

    pub fn all_finite(&self) -> bool {
        [self.test_abs_l2, self.test_rel_l2, self.mape_percent]
            .into_iter()
            .chain(self.ood_f_rel_l2)
            .chain(self.ood_b_rel_l2)
            .chain(self.latent_bdf_alignment)
            .chain(self.rollout_total)
            .chain(self.kernel_recovery_error)
            .all(f64::is_finite)
    }
}

/// Parses `t,e_t,E_t` and checks that `E_t` is the running sum of `e_t`.
pub fn parse_rollout_csv(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let bad = |d: String| Error::Format {
        path: PathBuf::from("rollout.csv"),
        detail: d,
    };
    let mut lines = text.lines();
    if lines.next() != Some("t,e_t,E_t") {
        return Err(bad("missing header".into()));
    }
    let mut rows = Vec::new();
    let mut sum = 0.0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad(format!("malformed row {line:?}")));
        }
        let t: usize = cols[0].parse().map_err(|_| bad(format!("bad step {}", cols[0])))?;
        let e: f64 = cols[1].parse().map_err(|_| bad(format!("bad e_t {}", cols[1])))?;
        let c: f64 = cols[2].parse().map_err(|_| bad(format!("bad E_t {}", cols[2])))?;
        sum += e;
        if (sum - c).abs() > 1e-10 * sum.abs().max(1.0) {
            return Err(bad(format!("E_t at step {t} is {c}, running sum is {sum}")));
        }
        rows.push((t, e, c));
    }
    Ok(rows)
}

pub fn run_report(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let dir = cfg.run_dir();
    let train: TrainSummary = read_json(&dir.path("train.json"))?;
    let eval: EvalSummary = read_json(&dir.path("eval.json"))?;
    let dataset_sha256 = sha256_file(&dir.dataset("dataset"))?;
    if dataset_sha256 != train.dataset_sha256 {
        return Err(Error::Usage("dataset changed since training".into()));
    }
    let rollout_path = dir.path("rollout.csv");
    let rollout_rows = if rollout_path.exists() {
        let text = fs::read_to_string(&rollout_path).map_err(|e| Error::io(&rollout_path, e))?;
        Some(parse_rollout_csv(&text)?)
    } else {
        None
    };
    let kernel_path = dir.path("kernel.json");
    let kernel: Option<KernelSummary> = if kernel_path.exists() { Some(read_json(&kernel_path)?) } else { None };
    let report = MetricsReport {
        dataset_sha256,
        checkpoint_sha256: sha256_file(&dir.checkpoint())?,
        best_epoch: train.best_epoch,
        test_abs_l2: eval.test_abs_l2,
        test_rel_l2: eval.test_rel_l2,
        ood_f_rel_l2: eval.ood_f_rel_l2,
        ood_b_rel_l2: eval.ood_b_rel_l2,
        mape_percent: eval.mape_percent,
        latent_bdf_alignment: eval.latent_bdf_alignment,
        rollout_steps: rollout_rows.as_ref().map(|r| r.len()),
        rollout_total: rollout_rows.as_ref().map(|r| r.last().map(|x| x.2).unwrap_or(0.0)),
        kernel_recovery_error: kernel.map(|k| k.recovery_error),
    };
    if !report.all_finite() {
        return Err(Error::UndefinedMetric("report contains a non-finite metric".into()));
    }
    write_json(&dir.path("report.json"), &report)?;
    write_text(&dir.path("report.csv"), &report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    GenData,
    Train,
    Eval,
    Rollout,
    KernelCompare,
    Report,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::GenData => "gen-data",
            Subcommand::Train => "train",
            Subcommand::Eval => "eval",
            Subcommand::Rollout => "rollout",
            Subcommand::KernelCompare => "kernel-compare",
            Subcommand::Report => "report",
        }
    }
}

/// Runs one subcommand under the directory lock and returns a one-line summary.
///
/// The resolved configuration is written to `config.json` before any work. On
/// failure a `PARTIAL` marker naming the subcommand and error is left behind.
pub fn run(sub: Subcommand, cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    let _lock = RunLock::acquire(&dir)?;
    write_json(&dir.config(), cfg)?;
    let partial = dir.path("PARTIAL");
    let result = match sub {
        Subcommand::GenData => gen_data(cfg).map(|m| format!("wrote {} datasets", m.datasets.len())),
        Subcommand::Train => run_train(cfg).map(|s| {
            format!(
                "best test loss {:.4e} at epoch {} (epoch 0: {:.4e})",
                s.best_test_loss, s.best_epoch, s.initial_test_loss
            )
        }),
        Subcommand::Eval => run_eval(cfg).map(|s| format!("test relative L2 {:.4e}", s.test_rel_l2)),
        Subcommand::Rollout => run_rollout(cfg).map(|s| format!("E_T = {:.4e} over {} steps", s.total, s.steps)),
        Subcommand::KernelCompare => run_kernel_compare(cfg).map(|s| format!("kernel recovery error {:.4}", s.recovery_error)),
        Subcommand::Report => run_report(cfg).map(|r| format!("report for checkpoint {}", &r.checkpoint_sha256[..12])),
    };
    match &result {
        Ok(_) if partial.exists() => fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?,
        Ok(_) => {}
        Err(e) => {
            let _ = write_text(&partial, &format!("{}: {e}\n", sub.name()));
        }
    }
    result
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingArtifact(_) => 3,
        Error::Usage(_) => 2,
        _ => 1,
    }
}
