//! Experiment orchestration: a single TOML config drives dataset
//! generation, density fitting, per-(variant x seed) agent training,
//! evaluation, and report emission, with content-hash caching at every
//! stage so reruns and sweeps share artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{self, ActorCriticState, BosaConfig, Variant};
use crate::dataset::{self, DomainTag, OfflineDataset};
use crate::density::{
    self, BehaviorDensity, CvaeTrainConfig, DensityEnsemble, TransitionDensity,
};
use crate::envs::{BehaviorSpec, EnvSpec, Family, Quality};
use crate::metrics::{self, EvalResult};
use crate::rng::Stream;

const SCHEMA_VERSION: u32 = 1;
const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
const CHECKPOINT_EVERY: u64 = 10_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("stage {stage} failed (inputs {inputs}): {source}")]
    Stage {
        stage: &'static str,
        inputs: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("ablation suite requires the full variant in the run list")]
    MissingFullVariant,
}

fn stage<T, E>(name: &'static str, inputs: &str, r: Result<T, E>) -> Result<T, HarnessError>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.map_err(|e| HarnessError::Stage {
        stage: name,
        inputs: inputs.to_string(),
        source: Box::new(e),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSection {
    pub family: String,
    pub source_mass_scale: f64,
    pub source_joint_noise: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            family: "point-mass".into(),
            source_mass_scale: 0.5,
            source_joint_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub target_size: usize,
    pub source_size: usize,
    pub target_tier: String,
    pub source_tier: String,
    pub target_fraction: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            target_size: 100_000,
            source_size: 100_000,
            target_tier: "medium".into(),
            source_tier: "medium-expert".into(),
            target_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DensitySection {
    #[serde(flatten)]
    pub cvae: CvaeTrainConfig,
    pub ensemble_k: usize,
    pub seed: u64,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection {
            cvae: CvaeTrainConfig::default(),
            ensemble_k: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    /// Also train the full variant on 10%-target-only and 100%-target
    /// datasets, enabling deltas.csv.
    pub include_references: bool,
    /// Worker pool size for (variant x seed) runs; 0 = library default.
    pub jobs: usize,
    /// Diagnostics CSV row interval.
    pub log_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            variants: vec!["full".into()],
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: "out".into(),
            include_references: false,
            jobs: 0,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub env: EnvSection,
    pub data: DataSection,
    pub density: DensitySection,
    pub agent: BosaConfig,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        if cfg.schema_version == 0 {
            cfg.schema_version = SCHEMA_VERSION;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::BadConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::BadConfig(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if !(self.data.target_fraction > 0.0 && self.data.target_fraction <= 1.0) {
            return Err(HarnessError::BadConfig(
                "target fraction must lie in (0, 1]".into(),
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(HarnessError::BadConfig("seed list must be non-empty".into()));
        }
        self.family()?;
        self.target_tier()?;
        self.source_tier()?;
        for v in &self.run.variants {
            if Variant::parse(v).is_none() {
                return Err(HarnessError::BadConfig(format!("unknown variant {v}")));
            }
        }
        self.agent
            .validate()
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        Ok(())
    }

    pub fn family(&self) -> Result<Family, HarnessError> {
        Family::parse(&self.env.family).map_err(|e| HarnessError::BadConfig(e.to_string()))
    }

    fn target_tier(&self) -> Result<Quality, HarnessError> {
        Quality::parse(&self.data.target_tier).map_err(|e| HarnessError::BadConfig(e.to_string()))
    }

    fn source_tier(&self) -> Result<Quality, HarnessError> {
        Quality::parse(&self.data.source_tier).map_err(|e| HarnessError::BadConfig(e.to_string()))
    }

    pub fn target_spec(&self) -> Result<EnvSpec, HarnessError> {
        Ok(EnvSpec::target(self.family()?))
    }

    pub fn source_spec(&self) -> Result<EnvSpec, HarnessError> {
        EnvSpec::new(
            self.family()?,
            self.env.source_mass_scale,
            self.env.source_joint_noise,
        )
        .map_err(|e| HarnessError::BadConfig(e.to_string()))
    }
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn stamp_path(artifact: &Path) -> PathBuf {
    let mut p = artifact.as_os_str().to_owned();
    p.push(".stamp");
    PathBuf::from(p)
}

fn cache_hit(artifact: &Path, key: &str) -> bool {
    artifact.exists()
        && fs::read_to_string(stamp_path(artifact))
            .map(|s| s == key)
            .unwrap_or(false)
}

fn write_stamp(artifact: &Path, key: &str) -> std::io::Result<()> {
    fs::write(stamp_path(artifact), key)
}

/// The three dataset regimes a run can train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Subsampled target plus all source data.
    Mix,
    /// Subsampled target only.
    TargetOnly,
    /// Full target data (the 100% reference).
    TargetFull,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mix => "mix",
            DatasetKind::TargetOnly => "target10",
            DatasetKind::TargetFull => "target100",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub dataset: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaRow {
    pub task: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub deltas: Vec<DeltaRow>,
    pub results: Vec<EvalResult>,
    pub out_dir: PathBuf,
}

struct Artifacts {
    d_target_full: OfflineDataset,
    d_target: OfflineDataset,
    d_mix: Option<OfflineDataset>,
}

fn load_or_collect(
    path: &Path,
    key: &str,
    build: impl FnOnce() -> Result<OfflineDataset, dataset::DatasetError>,
) -> Result<OfflineDataset, HarnessError> {
    if cache_hit(path, key) {
        return stage("dataset-load", key, dataset::read_file(path));
    }
    let d = stage("dataset-build", key, build())?;
    stage("dataset-write", key, dataset::write_file(path, &d))?;
    stage("dataset-stamp", key, write_stamp(path, key))?;
    Ok(d)
}

fn prepare_datasets(cfg: &ExperimentConfig, dir: &Path) -> Result<Artifacts, HarnessError> {
    let ds_dir = dir.join("datasets");
    stage("mkdir", "datasets", fs::create_dir_all(&ds_dir))?;
    let env_json = serde_json::to_string(&cfg.env).unwrap();
    let data_json = serde_json::to_string(&cfg.data).unwrap();
    let base = [CODE_VERSION, &env_json, &data_json];

    let target_spec = cfg.target_spec()?;
    let source_spec = cfg.source_spec()?;
    let target_tier = cfg.target_tier()?;
    let source_tier = cfg.source_tier()?;

    let key = hash_parts(&[&base[..], &["target-full"]].concat());
    let d_target_full = load_or_collect(&ds_dir.join("target_full.ds"), &key, || {
        dataset::collect(
            &target_spec,
            &BehaviorSpec::tier(target_tier),
            cfg.data.target_size,
            DomainTag::Target,
            cfg.data.seed,
        )
    })?;

    let key = hash_parts(&[&base[..], &["target-sub"]].concat());
    let d_target = load_or_collect(&ds_dir.join("target_sub.ds"), &key, || {
        dataset::subsample(&d_target_full, cfg.data.target_fraction, cfg.data.seed)
    })?;

    let d_mix = if cfg.data.source_size > 0 {
        let key = hash_parts(&[&base[..], &["source"]].concat());
        let d_source = load_or_collect(&ds_dir.join("source.ds"), &key, || {
            dataset::collect(
                &source_spec,
                &BehaviorSpec::tier(source_tier),
                cfg.data.source_size,
                DomainTag::Source,
                cfg.data.seed.wrapping_add(1),
            )
        })?;
        let key = hash_parts(&[&base[..], &["mix"]].concat());
        Some(load_or_collect(&ds_dir.join("mix.ds"), &key, || {
            dataset::mix(&d_target, &d_source)
        })?)
    } else {
        None
    };

    Ok(Artifacts {
        d_target_full,
        d_target,
        d_mix,
    })
}

fn load_or_train_behavior(
    dir: &Path,
    key: &str,
    d_mix: &OfflineDataset,
    cvae: &CvaeTrainConfig,
    seed: u64,
) -> Result<BehaviorDensity, HarnessError> {
    if cache_hit(dir, key) {
        let (model, dataset_hash, stats) = stage("behavior-load", key, density::load_cvae(dir))?;
        return Ok(BehaviorDensity {
            model,
            stats,
            dataset_hash,
        });
    }
    let bd = stage(
        "behavior-train",
        key,
        density::train_behavior_density(d_mix, cvae, seed),
    )?;
    stage("mkdir", "behavior", fs::create_dir_all(dir))?;
    stage(
        "behavior-save",
        key,
        density::save_cvae(dir, &bd.model, 0, &bd.dataset_hash, &bd.stats, seed),
    )?;
    stage("behavior-stamp", key, write_stamp(dir, key))?;
    Ok(bd)
}

fn load_or_train_transition(
    dir: &Path,
    key: &str,
    d_target: &OfflineDataset,
    k: usize,
    cvae: &CvaeTrainConfig,
    seed: u64,
) -> Result<TransitionDensity, HarnessError> {
    if cache_hit(dir, key) {
        let mut members = Vec::with_capacity(k);
        let mut hash = String::new();
        let mut stats = None;
        for i in 0..k {
            let (m, h, st) = stage(
                "transition-load",
                key,
                density::load_cvae(&dir.join(format!("member{i}"))),
            )?;
            members.push(m);
            hash = h;
            stats = Some(st);
        }
        return Ok(TransitionDensity {
            ensemble: stage("transition-load", key, DensityEnsemble::new(members))?,
            stats: stats.unwrap(),
            dataset_hash: hash,
        });
    }
    let td = stage(
        "transition-train",
        key,
        density::train_transition_ensemble(d_target, k, cvae, seed),
    )?;
    for (i, m) in td.ensemble.members.iter().enumerate() {
        let mdir = dir.join(format!("member{i}"));
        stage("mkdir", "transition", fs::create_dir_all(&mdir))?;
        stage(
            "transition-save",
            key,
            density::save_cvae(&mdir, m, i, &td.dataset_hash, &td.stats, seed),
        )?;
    }
    stage("transition-stamp", key, write_stamp(dir, key))?;
    Ok(td)
}

/// One agent run: train for cfg.steps on the given data, streaming
/// diagnostics to CSV and checkpointing, then evaluate on the target env.
#[allow(clippy::too_many_arguments)]
pub fn train_and_eval_run(
    run_dir: &Path,
    agent_cfg: &BosaConfig,
    d_train: &OfflineDataset,
    d_target: &OfflineDataset,
    behavior: Option<&BehaviorDensity>,
    trans: Option<&TransitionDensity>,
    target_spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    log_every: usize,
) -> Result<(EvalResult, ActorCriticState), HarnessError> {
    stage("mkdir", "run", fs::create_dir_all(run_dir))?;
    let mut init_rng = Stream::derive(seed, &format!("agent-init/{}", agent_cfg.variant.name()));
    let mut ac = stage(
        "agent-init",
        agent_cfg.variant.name(),
        ActorCriticState::new(d_train.state_dim(), d_train.action_dim(), agent_cfg, &mut init_rng),
    )?;
    let mut rng = Stream::derive(seed, &format!("agent-train/{}", agent_cfg.variant.name()));

    let diag_path = run_dir.join("diagnostics.csv");
    let mut diag = stage("diag-open", "diagnostics.csv", fs::File::create(&diag_path))?;
    stage(
        "diag-header",
        "diagnostics.csv",
        writeln!(
            diag,
            "step,critic_loss,actor_loss,lambda,gap,pass_rate,mean_q_source,mean_q_target"
        ),
    )?;
    for step in 0..agent_cfg.steps {
        let d = stage(
            "train-step",
            agent_cfg.variant.name(),
            agent::train_step(&mut ac, agent_cfg, d_train, d_target, behavior, trans, &mut rng),
        )?;
        if log_every > 0 && step % log_every == 0 {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            stage(
                "diag-row",
                "diagnostics.csv",
                writeln!(
                    diag,
                    "{},{},{},{},{},{},{},{}",
                    d.step,
                    d.critic_loss,
                    opt(d.actor_loss),
                    d.lambda,
                    opt(d.constraint_gap),
                    d.pass_rate,
                    d.mean_q_source,
                    d.mean_q_target
                ),
            )?;
        }
        if ac.step % CHECKPOINT_EVERY == 0 || step + 1 == agent_cfg.steps {
            stage(
                "checkpoint",
                "actor.ckpt",
                crate::params::save_checkpoint(
                    &run_dir.join("actor.ckpt"),
                    &ac.actor_params,
                    &[d_train.state_dim(), d_train.action_dim()],
                    seed,
                ),
            )?;
        }
    }

    let eval_rng = Stream::derive(seed, "eval");
    let result = stage(
        "evaluate",
        agent_cfg.variant.name(),
        metrics::evaluate(&ac, target_spec, episodes, &eval_rng),
    )?;
    Ok((result, ac))
}

struct RunSpec {
    variant: Variant,
    kind: DatasetKind,
    seed: u64,
}

fn planned_runs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut runs = Vec::new();
    for v in &cfg.run.variants {
        let variant = Variant::parse(v).expect("validated");
        for &seed in &cfg.run.seeds {
            runs.push(RunSpec {
                variant,
                kind: DatasetKind::Mix,
                seed,
            });
        }
    }
    if cfg.run.include_references {
        for &seed in &cfg.run.seeds {
            runs.push(RunSpec {
                variant: Variant::Full,
                kind: DatasetKind::TargetOnly,
                seed,
            });
            runs.push(RunSpec {
                variant: Variant::Full,
                kind: DatasetKind::TargetFull,
                seed,
            });
        }
    }
    runs
}

/// Full pipeline: data -> densities -> (variant x seed) training ->
/// evaluation -> report files. Every stage is cached by content hash.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let dir = PathBuf::from(&cfg.run.out_dir);
    stage("mkdir", "out", fs::create_dir_all(&dir))?;
    let resolved = toml::to_string_pretty(cfg).expect("config serializes");
    stage("config-copy", "config.toml", fs::write(dir.join("config.toml"), &resolved))?;

    let arts = prepare_datasets(cfg, &dir)?;
    let runs = planned_runs(cfg);

    // Density models per dataset kind actually used by some run.
    // Algorithm 1: behavior on the run's D_mix, transitions on its D_target.
    let cvae_json = serde_json::to_string(&cfg.density).unwrap();
    let mut densities: Vec<(DatasetKind, BehaviorDensity, TransitionDensity)> = Vec::new();
    for kind in [DatasetKind::Mix, DatasetKind::TargetOnly, DatasetKind::TargetFull] {
        if !runs.iter().any(|r| r.kind == kind && needs_density(r.variant)) {
            continue;
        }
        let (d_train, d_tgt) = datasets_for(kind, &arts)?;
        let key = hash_parts(&[
            CODE_VERSION,
            &cvae_json,
            kind.name(),
            &dataset::content_hash(d_train),
            &dataset::content_hash(d_tgt),
        ]);
        let base = dir.join("density").join(kind.name());
        let behavior = load_or_train_behavior(
            &base.join("behavior"),
            &key,
            d_train,
            &cfg.density.cvae,
            cfg.density.seed,
        )?;
        let trans = load_or_train_transition(
            &base.join("transition"),
            &key,
            d_tgt,
            cfg.density.ensemble_k,
            &cfg.density.cvae,
            cfg.density.seed,
        )?;
        densities.push((kind, behavior, trans));
    }

    let agent_json = serde_json::to_string(&cfg.agent).unwrap();
    let target_spec = cfg.target_spec()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.jobs)
        .build()
        .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    let results: Result<Vec<EvalResult>, HarnessError> = pool.install(|| {
        use rayon::prelude::*;
        runs.par_iter()
            .map(|run| -> Result<EvalResult, HarnessError> {
                let (d_train, d_tgt) = datasets_for(run.kind, &arts)?;
                let dens = densities.iter().find(|(k, _, _)| *k == run.kind);
                let run_dir = dir
                    .join("runs")
                    .join(run.kind.name())
                    .join(run.variant.name())
                    .join(format!("seed{}", run.seed));
                let key = hash_parts(&[
                    CODE_VERSION,
                    &agent_json,
                    run.variant.name(),
                    run.kind.name(),
                    &run.seed.to_string(),
                    &dataset::content_hash(d_train),
                    &dens.map(|(_, b, t)| format!("{}|{}", b.dataset_hash, t.dataset_hash))
                        .unwrap_or_default(),
                    &cfg.eval.episodes.to_string(),
                ]);
                let result_path = run_dir.join("result.json");
                if cache_hit(&result_path, &key) {
                    let text = stage("result-load", &key, fs::read_to_string(&result_path))?;
                    return stage(
                        "result-parse",
                        &key,
                        serde_json::from_str::<EvalResult>(&text),
                    );
                }
                let mut agent_cfg = cfg.agent.clone();
                agent_cfg.variant = run.variant;
                let (behavior, trans) = match dens {
                    Some((_, b, t)) => (Some(b), Some(t)),
                    None => (None, None),
                };
                let (mut result, _) = train_and_eval_run(
                    &run_dir,
                    &agent_cfg,
                    d_train,
                    d_tgt,
                    behavior,
                    trans,
                    &target_spec,
                    cfg.eval.episodes,
                    run.seed,
                    cfg.run.log_every,
                )?;
                result.seed = run.seed;
                result.variant = run.variant.name().to_string();
                result.dataset = run.kind.name().to_string();
                let text = serde_json::to_string_pretty(&result).unwrap();
                stage("result-write", &key, fs::write(&result_path, text))?;
                stage("result-stamp", &key, write_stamp(&result_path, &key))?;
                Ok(result)
            })
            .collect()
    });
    let mut results = results?;
    results.sort_by(|a, b| {
        (&a.dataset, &a.variant, a.seed).cmp(&(&b.dataset, &b.variant, b.seed))
    });

    let report = build_report(cfg, &dir, results)?;
    write_report_files(&report)?;
    Ok(report)
}

fn needs_density(v: Variant) -> bool {
    v.uses_filter() || v.uses_policy_constraint()
}

fn datasets_for<'a>(
    kind: DatasetKind,
    arts: &'a Artifacts,
) -> Result<(&'a OfflineDataset, &'a OfflineDataset), HarnessError> {
    match kind {
        DatasetKind::Mix => {
            let m = arts.d_mix.as_ref().ok_or_else(|| {
                HarnessError::BadConfig("mix runs require source_size > 0".into())
            })?;
            Ok((m, &arts.d_target))
        }
        DatasetKind::TargetOnly => Ok((&arts.d_target, &arts.d_target)),
        DatasetKind::TargetFull => Ok((&arts.d_target_full, &arts.d_target_full)),
    }
}

fn build_report(
    cfg: &ExperimentConfig,
    dir: &Path,
    results: Vec<EvalResult>,
) -> Result<ExperimentReport, HarnessError> {
    let mut rows = Vec::new();
    let mut groups: Vec<(String, String)> = results
        .iter()
        .map(|r| (r.variant.clone(), r.dataset.clone()))
        .collect();
    groups.dedup();
    for (variant, ds) in groups {
        let group: Vec<EvalResult> = results
            .iter()
            .filter(|r| r.variant == variant && r.dataset == ds)
            .cloned()
            .collect();
        let (mean, std) = stage("aggregate", &variant, metrics::aggregate(&group))?;
        rows.push(ReportRow {
            variant,
            dataset: ds,
            mean,
            std,
            seeds: group.len(),
        });
    }

    let mut deltas = Vec::new();
    if cfg.run.include_references {
        let mean_of = |variant: &str, ds: &str| {
            rows.iter()
                .find(|r| r.variant == variant && r.dataset == ds)
                .map(|r| r.mean)
        };
        let best_100 = rows
            .iter()
            .filter(|r| r.dataset == DatasetKind::TargetFull.name())
            .map(|r| r.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        if let (Some(score_10), Some(score_cross)) = (
            mean_of("full", DatasetKind::TargetOnly.name()),
            mean_of("full", DatasetKind::Mix.name()),
        ) {
            if best_100.is_finite() && best_100 != 0.0 {
                let d = stage(
                    "deltas",
                    "report",
                    metrics::transfer_deltas(score_10, score_cross, best_100),
                )?;
                deltas.push(DeltaRow {
                    task: cfg.env.family.clone(),
                    x: d.x,
                    y: d.y,
                });
            }
        }
    }

    Ok(ExperimentReport {
        rows,
        deltas,
        results,
        out_dir: dir.to_path_buf(),
    })
}

/// Emit report.csv, deltas.csv, and the transfer-delta SVG scatter.
pub fn write_report_files(report: &ExperimentReport) -> Result<(), HarnessError> {
    let mut csv = String::from("variant,dataset,seeds,score_mean,score_std\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{:.4},{:.4}\n",
            r.variant, r.dataset, r.seeds, r.mean, r.std
        ));
    }
    stage(
        "report-write",
        "report.csv",
        fs::write(report.out_dir.join("report.csv"), csv),
    )?;

    if !report.deltas.is_empty() {
        let mut csv = String::from("task,x,y\n");
        for d in &report.deltas {
            csv.push_str(&format!("{},{:.4},{:.4}\n", d.task, d.x, d.y));
        }
        stage(
            "deltas-write",
            "deltas.csv",
            fs::write(report.out_dir.join("deltas.csv"), csv),
        )?;
        stage(
            "scatter-write",
            "deltas.svg",
            fs::write(report.out_dir.join("deltas.svg"), delta_scatter_svg(&report.deltas)),
        )?;
    }
    Ok(())
}

/// Minimal scatter of (x, y) transfer deltas with a y = x guide line.
fn delta_scatter_svg(deltas: &[DeltaRow]) -> String {
    let (w, h, pad) = (480.0, 480.0, 50.0);
    let lim = deltas
        .iter()
        .flat_map(|d| [d.x.abs(), d.y.abs()])
        .fold(0.5_f64, f64::max)
        * 1.2;
    let sx = |v: f64| pad + (v + lim) / (2.0 * lim) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - (v + lim) / (2.0 * lim) * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\"/>\n",
        sx(-lim), sy(0.0), sx(lim), sy(0.0)
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\"/>\n",
        sx(0.0), sy(-lim), sx(0.0), sy(lim)
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ccc\" stroke-dasharray=\"4\"/>\n",
        sx(-lim), sy(-lim), sx(lim), sy(lim)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">relative drop, 10% target</text>\n",
        w / 2.0 - 70.0, h - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\">relative drop, cross-domain</text>\n",
        h / 2.0 + 70.0, h / 2.0 + 70.0
    ));
    for d in deltas {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#1f77b4\"/>\n",
            sx(d.x), sy(d.y)
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>\n",
            sx(d.x) + 6.0, sy(d.y) - 6.0, d.task
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// Percentage change of the ablated variant vs full, on the mix runs.
    pub pct_change: f64,
}

/// Run the pipeline and express every non-full variant as a percentage
/// change against the full variant's mean score.
pub fn run_ablation_suite(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Vec<AblationRow>), HarnessError> {
    if !cfg.run.variants.iter().any(|v| v == "full") {
        return Err(HarnessError::MissingFullVariant);
    }
    let report = run_pipeline(cfg)?;
    let mix = DatasetKind::Mix.name();
    let full_mean = report
        .rows
        .iter()
        .find(|r| r.variant == "full" && r.dataset == mix)
        .map(|r| r.mean)
        .ok_or(HarnessError::MissingFullVariant)?;
    let mut table = Vec::new();
    for r in &report.rows {
        if r.dataset != mix {
            continue;
        }
        table.push(AblationRow {
            variant: r.variant.clone(),
            pct_change: 100.0 * (r.mean - full_mean) / full_mean.abs().max(1e-9),
        });
    }
    let mut csv = String::from("variant,pct_change_vs_full\n");
    for row in &table {
        csv.push_str(&format!("{},{:.2}\n", row.variant, row.pct_change));
    }
    stage(
        "ablation-write",
        "ablations.csv",
        fs::write(report.out_dir.join("ablations.csv"), csv),
    )?;
    Ok((report, table))
}
