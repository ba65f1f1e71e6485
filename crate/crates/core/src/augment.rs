//! Source-data generators for the no-pre-collected-source setting:
//! pseudo-transition-model sampling and next-state noising. Both copy
//! (s, a, r) from sampled target transitions and replace only s'.

use ndarray::Array2;
use thiserror::Error;

use crate::dataset::{self, DatasetError, DomainTag, NormStats, OfflineDataset};
use crate::density::{normalize_rows, CvaeModel, CvaeTrainConfig, DensityError};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("requested output size must be >= 1")]
    BadOutputSize,
    #[error("source dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Pseudo transition model s' ~ T~(.|s,a): a single CVAE, possibly
/// trained on a deliberately short budget to dial in model mismatch.
#[derive(Debug, Clone)]
pub struct PseudoModel {
    pub model: CvaeModel,
    pub stats: NormStats,
    pub train_iters: usize,
}

impl PseudoModel {
    /// Fit on the target dataset; `iters` is the sub-optimality dial.
    pub fn fit(
        d_target: &OfflineDataset,
        cfg: &CvaeTrainConfig,
        iters: usize,
        seed: u64,
    ) -> Result<Self, AugmentError> {
        if d_target.is_empty() {
            return Err(AugmentError::EmptyDataset);
        }
        let (cond, y) = transition_pairs(d_target);
        let cfg = CvaeTrainConfig { iters, ..cfg.clone() };
        let (model, _) = crate::density::train_cvae(&cond, &y, &cfg, seed, "pseudo-model")?;
        Ok(PseudoModel {
            model,
            stats: d_target.stats.clone(),
            train_iters: iters,
        })
    }

    /// Sample raw-space next states for raw (s, a) rows.
    pub fn sample_next(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
    ) -> Result<Array2<f64>, AugmentError> {
        let s = normalize_rows(states, &self.stats);
        let cond = ndarray::concatenate(ndarray::Axis(1), &[s.view(), actions.view()]).unwrap();
        let y = self.model.sample(&cond, rng)?;
        let mut out = y;
        for mut row in out.rows_mut() {
            for (d, x) in row.iter_mut().enumerate() {
                *x = *x * self.stats.std[d] + self.stats.mean[d];
            }
        }
        Ok(out)
    }
}

/// Componentwise uniform next-state noise of amplitude `s`:
/// each component gets 2 * (u - 0.5) * s, u ~ U(0,1).
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub amplitude: f64,
}

impl NoiseSpec {
    pub fn new(amplitude: f64) -> Self {
        assert!(amplitude >= 0.0, "noise amplitude must be >= 0");
        NoiseSpec { amplitude }
    }
}

fn transition_pairs(d: &OfflineDataset) -> (Array2<f64>, Array2<f64>) {
    let n = d.len();
    let sd = d.state_dim();
    let ad = d.action_dim();
    let mut cond = Array2::zeros((n, sd + ad));
    let mut y = Array2::zeros((n, sd));
    for (i, t) in d.transitions.iter().enumerate() {
        let ns = d.stats.normalize(&t.state);
        for (j, &v) in ns.iter().chain(&t.action).enumerate() {
            cond[[i, j]] = v;
        }
        let nn = d.stats.normalize(&t.next_state);
        for (j, &v) in nn.iter().enumerate() {
            y[[i, j]] = v;
        }
    }
    (cond, y)
}

fn generated_dataset(
    parent: &OfflineDataset,
    transitions: Vec<crate::dataset::Transition>,
    provenance: String,
) -> OfflineDataset {
    let mut out = OfflineDataset {
        transitions,
        meta: crate::dataset::DatasetMeta {
            env_spec: parent.meta.env_spec.clone(),
            behavior: parent.meta.behavior.clone(),
            seed: parent.meta.seed,
            provenance,
        },
        stats: parent.stats.clone(),
    };
    out.transitions.iter_mut().for_each(|t| t.tag = DomainTag::Generated);
    out
}

/// Sample `n_out` target transitions and replace each next state with a
/// pseudo-model draw. (s, a, r) and done flags are copied unchanged.
pub fn model_augment(
    d_target: &OfflineDataset,
    model: &PseudoModel,
    n_out: usize,
    rng: &mut Stream,
) -> Result<OfflineDataset, AugmentError> {
    if n_out == 0 {
        return Err(AugmentError::BadOutputSize);
    }
    if d_target.is_empty() {
        return Err(AugmentError::EmptyDataset);
    }
    let idx: Vec<usize> = (0..n_out).map(|_| rng.index(d_target.len())).collect();
    let batch = d_target.gather(&idx, false);
    let next = model.sample_next(&batch.states, &batch.actions, rng)?;
    let mut transitions = Vec::with_capacity(n_out);
    for (row, &i) in idx.iter().enumerate() {
        let mut t = d_target.transitions[i].clone();
        t.next_state = next.row(row).to_vec();
        transitions.push(t);
    }
    let hash = dataset::content_hash(d_target);
    Ok(generated_dataset(
        d_target,
        transitions,
        format!("model-augment iters={} parent={hash}", model.train_iters),
    ))
}

/// Sample `n_out` target transitions and perturb each next-state
/// component by uniform noise in [-s, +s].
pub fn noise_augment(
    d_target: &OfflineDataset,
    spec: NoiseSpec,
    n_out: usize,
    rng: &mut Stream,
) -> Result<OfflineDataset, AugmentError> {
    if n_out == 0 {
        return Err(AugmentError::BadOutputSize);
    }
    if d_target.is_empty() {
        return Err(AugmentError::EmptyDataset);
    }
    let mut transitions = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        let mut t = d_target.transitions[rng.index(d_target.len())].clone();
        for x in &mut t.next_state {
            *x += 2.0 * (rng.uniform() - 0.5) * spec.amplitude;
        }
        transitions.push(t);
    }
    let hash = dataset::content_hash(d_target);
    Ok(generated_dataset(
        d_target,
        transitions,
        format!("noise-augment amplitude={} parent={hash}", spec.amplitude),
    ))
}
