//! Offline transition datasets: collection, episode-granular subsampling,
//! cross-domain mixing, normalization, and file I/O.
//!
//! File format: one JSON header line (dims, provenance, normalization stats)
//! followed by a binary block of little-endian f64 transitions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::envs::{self, BehaviorSpec, EnvSpec, Quality};
use crate::rng::Stream;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("datasets are dimensionally incompatible: {0}")]
    Incompatible(String),
    #[error("cannot sample from an empty dataset")]
    Empty,
    #[error("batch size must be >= 1")]
    BadBatchSize,
    #[error("n_transitions must be >= 1")]
    BadCount,
    #[error("malformed dataset file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Env(#[from] envs::EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Target,
    Source,
    Generated,
}

impl DomainTag {
    fn to_f64(self) -> f64 {
        match self {
            DomainTag::Target => 0.0,
            DomainTag::Source => 1.0,
            DomainTag::Generated => 2.0,
        }
    }

    fn from_f64(x: f64) -> Result<Self, DatasetError> {
        match x as i64 {
            0 => Ok(DomainTag::Target),
            1 => Ok(DomainTag::Source),
            2 => Ok(DomainTag::Generated),
            other => Err(DatasetError::BadFile(format!("bad domain tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub tag: DomainTag,
}

/// Per-dimension state normalization statistics (std floored at 1e-6).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Compensated (Kahan) summation over all states and next-states.
    pub fn compute(transitions: &[Transition], state_dim: usize) -> NormStats {
        let mut mean = vec![0.0f64; state_dim];
        let mut comp = vec![0.0f64; state_dim];
        let n = (transitions.len() * 2) as f64;
        if transitions.is_empty() {
            return NormStats {
                mean: vec![0.0; state_dim],
                std: vec![1.0; state_dim],
            };
        }
        for t in transitions {
            for sv in [&t.state, &t.next_state] {
                for (d, &x) in sv.iter().enumerate() {
                    let y = x - comp[d];
                    let s = mean[d] + y;
                    comp[d] = (s - mean[d]) - y;
                    mean[d] = s;
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0f64; state_dim];
        let mut vcomp = vec![0.0f64; state_dim];
        for t in transitions {
            for sv in [&t.state, &t.next_state] {
                for (d, &x) in sv.iter().enumerate() {
                    let dx = (x - mean[d]) * (x - mean[d]);
                    let y = dx - vcomp[d];
                    let s = var[d] + y;
                    vcomp[d] = (s - var[d]) - y;
                    var[d] = s;
                }
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
        NormStats { mean, std }
    }

    pub fn normalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &sd))| (x - m) / sd)
            .collect()
    }

    pub fn denormalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &sd))| x * sd + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_spec: EnvSpec,
    pub behavior: Option<BehaviorSpec>,
    pub seed: u64,
    pub provenance: String,
}

#[derive(Debug, Clone)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
    pub stats: NormStats,
}

/// Dense column-major views of a sampled batch.
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
    pub tags: Vec<DomainTag>,
    pub indices: Vec<usize>,
}

impl OfflineDataset {
    pub fn state_dim(&self) -> usize {
        self.meta.env_spec.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.meta.env_spec.action_dim
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn recompute_stats(&mut self) {
        self.stats = NormStats::compute(&self.transitions, self.state_dim());
    }

    /// Split transition indices into whole episodes using done flags.
    pub fn episodes(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.done {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.transitions.len() {
            out.push(start..self.transitions.len());
        }
        out
    }

    pub fn sample_indices(&self, batch_size: usize, rng: &mut Stream) -> Result<Vec<usize>, DatasetError> {
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        if batch_size == 0 {
            return Err(DatasetError::BadBatchSize);
        }
        Ok((0..batch_size).map(|_| rng.index(self.len())).collect())
    }

    /// Uniform-with-replacement batch. `normalized` applies the dataset's
    /// state stats to states and next-states.
    pub fn sample_batch(
        &self,
        batch_size: usize,
        rng: &mut Stream,
        normalized: bool,
    ) -> Result<Batch, DatasetError> {
        let idx = self.sample_indices(batch_size, rng)?;
        Ok(self.gather(&idx, normalized))
    }

    pub fn gather(&self, indices: &[usize], normalized: bool) -> Batch {
        let sd = self.state_dim();
        let ad = self.action_dim();
        let b = indices.len();
        let mut states = Array2::zeros((b, sd));
        let mut actions = Array2::zeros((b, ad));
        let mut next_states = Array2::zeros((b, sd));
        let mut rewards = Vec::with_capacity(b);
        let mut dones = Vec::with_capacity(b);
        let mut tags = Vec::with_capacity(b);
        for (row, &i) in indices.iter().enumerate() {
            let t = &self.transitions[i];
            let s = if normalized {
                self.stats.normalize(&t.state)
            } else {
                t.state.clone()
            };
            let ns = if normalized {
                self.stats.normalize(&t.next_state)
            } else {
                t.next_state.clone()
            };
            for d in 0..sd {
                states[[row, d]] = s[d];
                next_states[[row, d]] = ns[d];
            }
            for d in 0..ad {
                actions[[row, d]] = t.action[d];
            }
            rewards.push(t.reward);
            dones.push(t.done);
            tags.push(t.tag);
        }
        Batch {
            states,
            actions,
            rewards,
            next_states,
            dones,
            tags,
            indices: indices.to_vec(),
        }
    }
}

/// Collect `n_transitions` of scripted experience from full episodes
/// (the last episode may be truncated).
pub fn collect(
    spec: &EnvSpec,
    behavior: &BehaviorSpec,
    n_transitions: usize,
    tag: DomainTag,
    seed: u64,
) -> Result<OfflineDataset, DatasetError> {
    if n_transitions == 0 {
        return Err(DatasetError::BadCount);
    }
    spec.validate()?;
    let mut rng = Stream::derive(seed, "collect");
    let mut transitions = Vec::with_capacity(n_transitions);
    let approx_episodes = n_transitions.div_ceil(spec.horizon).max(2);
    let mut episode = 0usize;
    'outer: loop {
        // episode-level schedule for replay / mixture tiers
        let eff = effective_behavior(behavior, episode, approx_episodes);
        let mut state = envs::reset(spec, &mut rng);
        loop {
            let action = envs::scripted_policy(spec, &eff, &state, &mut rng);
            let (next, reward, done) = envs::step(spec, &state, &action, &mut rng)?;
            transitions.push(Transition {
                state: state.vec.clone(),
                action,
                reward,
                next_state: next.vec.clone(),
                done,
                tag,
            });
            state = next;
            if transitions.len() == n_transitions {
                break 'outer;
            }
            if done {
                break;
            }
        }
        episode += 1;
    }
    let stats = NormStats::compute(&transitions, spec.state_dim);
    Ok(OfflineDataset {
        transitions,
        meta: DatasetMeta {
            env_spec: spec.clone(),
            behavior: Some(behavior.clone()),
            seed,
            provenance: format!("collect:{}:{}", spec.family.name(), behavior.quality.name()),
        },
        stats,
    })
}

fn effective_behavior(behavior: &BehaviorSpec, episode: usize, total: usize) -> BehaviorSpec {
    match behavior.quality {
        Quality::MediumReplay => {
            // anneal from near-random (high noise, strong attenuation comes
            // from the medium policy itself) toward medium
            let t = episode as f64 / (total.max(2) - 1) as f64;
            let t = t.min(1.0);
            BehaviorSpec {
                quality: Quality::Medium,
                noise_std: 1.2 * (1.0 - t) + behavior.noise_std * t,
            }
        }
        Quality::MediumExpert => {
            if episode % 2 == 0 {
                BehaviorSpec {
                    quality: Quality::Medium,
                    noise_std: behavior.noise_std,
                }
            } else {
                BehaviorSpec {
                    quality: Quality::Expert,
                    noise_std: 0.0,
                }
            }
        }
        _ => behavior.clone(),
    }
}

/// Trajectory-level subsampling: whole episodes are kept until roughly
/// `fraction` of the transitions are reached. Stats are recomputed.
pub fn subsample(
    data: &OfflineDataset,
    fraction: f64,
    seed: u64,
) -> Result<OfflineDataset, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::BadFraction(fraction));
    }
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let mut rng = Stream::derive(seed, "subsample");
    let mut episodes = data.episodes();
    // Fisher-Yates shuffle of episode order
    for i in (1..episodes.len()).rev() {
        episodes.swap(i, rng.index(i + 1));
    }
    let budget = (fraction * data.len() as f64).round() as usize;
    let mut transitions = Vec::new();
    for ep in episodes {
        if transitions.len() >= budget {
            break;
        }
        transitions.extend(data.transitions[ep].iter().cloned());
    }
    let mut out = OfflineDataset {
        transitions,
        meta: DatasetMeta {
            provenance: format!("{}|subsample:{fraction}", data.meta.provenance),
            seed,
            ..data.meta.clone()
        },
        stats: data.stats.clone(),
    };
    out.recompute_stats();
    Ok(out)
}

/// D_mix = D_target u D_source: concatenation preserving per-transition tags,
/// with joint normalization stats over the union.
pub fn mix(target: &OfflineDataset, source: &OfflineDataset) -> Result<OfflineDataset, DatasetError> {
    if target.state_dim() != source.state_dim() || target.action_dim() != source.action_dim() {
        return Err(DatasetError::Incompatible(format!(
            "dims {}x{} vs {}x{}",
            target.state_dim(),
            target.action_dim(),
            source.state_dim(),
            source.action_dim()
        )));
    }
    if target.meta.env_spec.reward_id != source.meta.env_spec.reward_id {
        return Err(DatasetError::Incompatible(format!(
            "reward definitions differ: {} vs {}",
            target.meta.env_spec.reward_id, source.meta.env_spec.reward_id
        )));
    }
    let mut transitions = target.transitions.clone();
    transitions.extend(source.transitions.iter().cloned());
    let stats = NormStats::compute(&transitions, target.state_dim());
    Ok(OfflineDataset {
        transitions,
        meta: DatasetMeta {
            env_spec: target.meta.env_spec.clone(),
            behavior: None,
            seed: target.meta.seed,
            provenance: format!("mix({};{})", target.meta.provenance, source.meta.provenance),
        },
        stats,
    })
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    version: u32,
    n: usize,
    state_dim: usize,
    action_dim: usize,
    meta: DatasetMeta,
    stats: NormStats,
}

pub fn write_file(path: &Path, data: &OfflineDataset) -> Result<(), DatasetError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(f, data)
}

/// Hex SHA-256 of the serialized dataset, used as a provenance/cache key.
pub fn content_hash(data: &OfflineDataset) -> String {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    write_to(&mut buf, data).expect("in-memory write cannot fail");
    hex::encode(Sha256::digest(&buf))
}

pub fn write_to<W: Write>(mut f: W, data: &OfflineDataset) -> Result<(), DatasetError> {
    let header = FileHeader {
        version: 1,
        n: data.len(),
        state_dim: data.state_dim(),
        action_dim: data.action_dim(),
        meta: data.meta.clone(),
        stats: data.stats.clone(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    f.write_all(line.as_bytes())?;
    let mut buf = Vec::new();
    for t in &data.transitions {
        for &x in t.state.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for &x in t.action.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&t.reward.to_le_bytes());
        for &x in t.next_state.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&(if t.done { 1.0f64 } else { 0.0 }).to_le_bytes());
        buf.extend_from_slice(&t.tag.to_f64().to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<OfflineDataset, DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DatasetError::BadFile("missing header line".into()))?;
    let header: FileHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| DatasetError::BadFile(e.to_string()))?;
    let body = &bytes[nl + 1..];
    let rec = 2 * header.state_dim + header.action_dim + 3;
    if body.len() != header.n * rec * 8 {
        return Err(DatasetError::BadFile(format!(
            "expected {} payload bytes, found {}",
            header.n * rec * 8,
            body.len()
        )));
    }
    let mut vals = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut transitions = Vec::with_capacity(header.n);
    for _ in 0..header.n {
        let state: Vec<f64> = (&mut vals).take(header.state_dim).collect();
        let action: Vec<f64> = (&mut vals).take(header.action_dim).collect();
        let reward = vals.next().unwrap();
        let next_state: Vec<f64> = (&mut vals).take(header.state_dim).collect();
        let done = vals.next().unwrap() != 0.0;
        let tag = DomainTag::from_f64(vals.next().unwrap())?;
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            done,
            tag,
        });
    }
    Ok(OfflineDataset {
        transitions,
        meta: header.meta,
        stats: header.stats,
    })
}
