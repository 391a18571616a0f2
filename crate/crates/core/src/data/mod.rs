//! Synthetic datasets: random fields, Darcy and Lorenz trajectories, sliding
//! windows, augmentation, and the on-disk dataset format.

pub mod darcy;
pub mod format;
pub mod grf;
pub mod lorenz;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use darcy::{gen_darcy_trajectory, make_microstructure, DarcyConfig, DarcyVariant};
pub use grf::{sample_grf, GrfSpec};
pub use lorenz::{gen_lorenz_trajectory, LorenzConfig, LorenzForcing};

/// Derives an independent stream seed from a base seed and a tag path.
///
/// SplitMix64 finaliser over the folded inputs; stable across platforms.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters that generated a trajectory but are not observed by the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Hidden {
    None,
    /// Permeability field `b` and the GRF hyperparameters it was thresholded from.
    Microstructure { b: Vec<f64>, alpha: f64, tau: f64 },
    Lorenz {
        sigma: f64,
        rho: f64,
        beta: f64,
        forcing: [LorenzForcing; 3],
    },
}

impl Hidden {
    pub fn kind_code(&self) -> u32 {
        match self {
            Hidden::None => 0,
            Hidden::Microstructure { .. } => 1,
            Hidden::Lorenz { .. } => 2,
        }
    }

    pub fn to_values(&self) -> Vec<f64> {
        match self {
            Hidden::None => vec![],
            Hidden::Microstructure { b, alpha, tau } => {
                let mut v = b.clone();
                v.push(*alpha);
                v.push(*tau);
                v
            }
            Hidden::Lorenz {
                sigma,
                rho,
                beta,
                forcing,
            } => {
                let mut v = vec![*sigma, *rho, *beta];
                for f in forcing {
                    v.extend([f.amplitude, f.frequency, f.phase]);
                }
                v
            }
        }
    }

    pub fn from_values(kind: u32, v: &[f64]) -> Result<Self> {
        let bad = |d: String| Error::Usage(format!("hidden record: {d}"));
        match kind {
            0 if v.is_empty() => Ok(Hidden::None),
            1 if v.len() >= 3 => {
                let n = v.len() - 2;
                Ok(Hidden::Microstructure {
                    b: v[..n].to_vec(),
                    alpha: v[n],
                    tau: v[n + 1],
                })
            }
            2 if v.len() == 12 => {
                let f = |i: usize| LorenzForcing {
                    amplitude: v[3 + 3 * i],
                    frequency: v[4 + 3 * i],
                    phase: v[5 + 3 * i],
                };
                Ok(Hidden::Lorenz {
                    sigma: v[0],
                    rho: v[1],
                    beta: v[2],
                    forcing: [f(0), f(1), f(2)],
                })
            }
            k => Err(bad(format!("kind {k} with {} values", v.len()))),
        }
    }

    pub fn permeability(&self) -> Option<&[f64]> {
        match self {
            Hidden::Microstructure { b, .. } => Some(b),
            _ => None,
        }
    }
}

/// One simulated system: states `X_m` and forcings `F_m` on the same time index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub forcings: Vec<Vec<f64>>,
    pub hidden: Hidden,
    pub profile_id: u64,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, forcings: Vec<Vec<f64>>, hidden: Hidden, profile_id: u64) -> Result<Self> {
        let t = Self {
            states,
            forcings,
            hidden,
            profile_id,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.forcings.len() {
            return Err(Error::Generation(format!(
                "{} states but {} forcings",
                self.states.len(),
                self.forcings.len()
            )));
        }
        let dim = self.state_dim();
        for (s, f) in self.states.iter().zip(&self.forcings) {
            if s.len() != dim || f.len() != dim {
                return Err(Error::Generation("ragged state or forcing".into()));
            }
            if s.iter().chain(f).any(|v| !v.is_finite()) {
                return Err(Error::Generation("non-finite value in trajectory".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map(|s| s.len()).unwrap_or(0)
    }
}

/// Which forcing snapshot is paired with a window's prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForcingAlignment {
    /// `F_{m+1}`, the step being predicted.
    #[default]
    Target,
    /// `F_m`, the last observed step.
    Current,
}

/// One supervised item. `history` holds `X_{m-n+1..m}` oldest first and
/// `history_forcings` the forcings on the same steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub history: Vec<Vec<f64>>,
    pub history_forcings: Vec<Vec<f64>>,
    pub forcing: Vec<f64>,
    pub target: Vec<f64>,
    pub profile_id: u64,
    /// Index of the target state in the source trajectory.
    pub target_index: usize,
}

/// Stride-1 windows of `n` states; yields `len − n` samples.
pub fn build_windows(traj: &Trajectory, n: usize, alignment: ForcingAlignment) -> Result<Vec<WindowSample>> {
    if n == 0 || traj.len() <= n {
        return Err(Error::Usage(format!(
            "trajectory of {} states is too short for windows of {n}",
            traj.len()
        )));
    }
    Ok((n..traj.len())
        .map(|t| {
            let forcing_index = match alignment {
                ForcingAlignment::Target => t,
                ForcingAlignment::Current => t - 1,
            };
            WindowSample {
                history: traj.states[t - n..t].to_vec(),
                history_forcings: traj.forcings[t - n..t].to_vec(),
                forcing: traj.forcings[forcing_index].clone(),
                target: traj.states[t].clone(),
                profile_id: traj.profile_id,
                target_index: t,
            }
        })
        .collect())
}

/// Concatenates `k` independent random orderings of `samples`; windows are moved, never altered.
///
/// `k = 1` with seed 0 keeps the input order.
pub fn permute_augment(samples: &[WindowSample], k: usize, seed: u64) -> Result<Vec<WindowSample>> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot augment an empty sample list".into()));
    }
    let mut out = Vec::with_capacity(samples.len() * k);
    for rep in 0..k {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if !(k == 1 && seed == 0) {
            order.shuffle(&mut rng_from(derive_seed(seed, &[rep as u64])));
        }
        out.extend(order.into_iter().map(|i| samples[i].clone()));
    }
    Ok(out)
}

/// Train/test windows partitioned by profile id.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl DatasetSplit {
    /// True when no profile id occurs on both sides.
    pub fn is_disjoint(&self) -> bool {
        let train: std::collections::BTreeSet<u64> = self.train.iter().map(|s| s.profile_id).collect();
        self.test.iter().all(|s| !train.contains(&s.profile_id))
    }

    pub fn from_trajectories(train: &[Trajectory], test: &[Trajectory], n: usize, alignment: ForcingAlignment) -> Result<Self> {
        let windows = |ts: &[Trajectory]| -> Result<Vec<WindowSample>> {
            let mut out = Vec::new();
            for t in ts {
                out.extend(build_windows(t, n, alignment)?);
            }
            Ok(out)
        };
        let split = Self {
            train: windows(train)?,
            test: windows(test)?,
        };
        if !split.is_disjoint() {
            return Err(Error::Usage("train and test share a profile id".into()));
        }
        Ok(split)
    }
}

/// Randomly permutes profiles and splits them `train_fraction : rest`.
pub fn split_profiles(trajs: Vec<Trajectory>, train_fraction: f64, seed: u64) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, &[0x5911])));
    let n_train = ((trajs.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(usize::from(!trajs.is_empty()), trajs.len().saturating_sub(1).max(1));
    let mut slots: Vec<Option<Trajectory>> = trajs.into_iter().map(Some).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (rank, idx) in order.into_iter().enumerate() {
        let t = slots[idx].take().expect("each index visited once");
        if rank < n_train {
            train.push(t);
        } else {
            test.push(t);
        }
    }
    (train, test)
}
