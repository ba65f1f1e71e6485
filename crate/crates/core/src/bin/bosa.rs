use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bosa_core::agent::Variant;
use bosa_core::augment::{self, NoiseSpec, PseudoModel};
use bosa_core::dataset::{self, DomainTag};
use bosa_core::density::{self, CvaeTrainConfig};
use bosa_core::envs::{BehaviorSpec, EnvSpec, Family, Quality};
use bosa_core::harness::{self, DeltaRow, ExperimentConfig, ExperimentReport, ReportRow};
use bosa_core::metrics::{self, EvalResult};
use bosa_core::rng::Stream;

#[derive(Parser)]
#[command(name = "bosa", about = "Cross-domain offline RL: datasets, densities, agents, reports")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect an offline dataset from a scripted behavior tier.
    GenData(GenData),
    /// Fit a behavior or transition density on a dataset file.
    TrainDensity(TrainDensity),
    /// Train one agent variant for one seed from an experiment config.
    Train(Train),
    /// Generate pseudo-source data by model sampling or next-state noising.
    Augment(Augment),
    /// Aggregate finished runs into report.csv / deltas.csv / deltas.svg.
    Report(Report),
    /// Execute a full experiment pipeline from a config file.
    Run(Run),
}

#[derive(Args)]
struct GenData {
    /// Environment family: point-mass | pendulum
    #[arg(long)]
    env: String,
    /// Dynamics shift, e.g. "mass=0.5" or "mass=0.5,noise=0.05"
    #[arg(long, default_value = "")]
    shift: String,
    /// Behavior tier: random | medium | medium-replay | medium-expert | expert
    #[arg(long, default_value = "medium")]
    tier: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDensity {
    /// behavior | transition
    #[arg(long)]
    role: String,
    #[arg(long)]
    data: PathBuf,
    /// Ensemble size (transition role only)
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 96)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 4000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    kl_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    /// full | no-policy-reg | no-filter | no-conservation |
    /// target-data-bellman | naive-mix-baseline | behavior-clone
    #[arg(long)]
    variant: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Augment {
    /// model | noise
    #[arg(long)]
    mode: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    n: usize,
    /// Noise amplitude (noise mode)
    #[arg(long, default_value_t = 0.1)]
    amplitude: f64,
    /// Pseudo-model training iterations (model mode)
    #[arg(long, default_value_t = 500)]
    model_budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Report {
    /// Directory scanned recursively for result.json files
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Run {
    #[arg(long)]
    config: PathBuf,
    /// Reuse cached stage artifacts from a previous run
    #[arg(long)]
    resume: bool,
    /// Worker pool size for (variant x seed) runs
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainDensity(a) => train_density(a),
        Cmd::Train(a) => train(a),
        Cmd::Augment(a) => augment_cmd(a),
        Cmd::Report(a) => report(a),
        Cmd::Run(a) => run_pipeline(a),
    }
}

fn parse_shift(s: &str) -> Result<(f64, f64), String> {
    let (mut mass, mut noise) = (1.0, 0.0);
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (key, val) = part
            .split_once('=')
            .ok_or_else(|| format!("bad shift term {part:?}, expected key=value"))?;
        let v: f64 = val.parse().map_err(|_| format!("bad shift value {val:?}"))?;
        match key.trim() {
            "mass" => mass = v,
            "noise" => noise = v,
            other => return Err(format!("unknown shift key {other:?}")),
        }
    }
    Ok((mass, noise))
}

fn gen_data(a: GenData) -> Result<(), Box<dyn std::error::Error>> {
    let family = Family::parse(&a.env)?;
    let (mass, noise) = parse_shift(&a.shift)?;
    let spec = EnvSpec::new(family, mass, noise)?;
    let tier = Quality::parse(&a.tier)?;
    let tag = if mass == 1.0 && noise == 0.0 {
        DomainTag::Target
    } else {
        DomainTag::Source
    };
    let d = dataset::collect(&spec, &BehaviorSpec::tier(tier), a.n, tag, a.seed)?;
    dataset::write_file(&a.out, &d)?;
    println!(
        "wrote {} transitions ({}, {:?}) to {}",
        d.len(),
        family.name(),
        tag,
        a.out.display()
    );
    Ok(())
}

fn train_density(a: TrainDensity) -> Result<(), Box<dyn std::error::Error>> {
    let d = dataset::read_file(&a.data)?;
    let cfg = CvaeTrainConfig {
        hidden_dim: a.hidden,
        depth: a.depth,
        iters: a.iters,
        lr: a.lr,
        kl_weight: a.kl_weight,
        ..Default::default()
    };
    fs::create_dir_all(&a.out)?;
    match a.role.as_str() {
        "behavior" => {
            let bd = density::train_behavior_density(&d, &cfg, a.seed)?;
            density::save_cvae(&a.out, &bd.model, 0, &bd.dataset_hash, &bd.stats, a.seed)?;
            println!("behavior density saved to {}", a.out.display());
        }
        "transition" => {
            let td = density::train_transition_ensemble(&d, a.k, &cfg, a.seed)?;
            for (i, m) in td.ensemble.members.iter().enumerate() {
                let dir = a.out.join(format!("member{i}"));
                fs::create_dir_all(&dir)?;
                density::save_cvae(&dir, m, i, &td.dataset_hash, &td.stats, a.seed)?;
            }
            println!(
                "transition ensemble (k={}) saved to {}",
                a.k,
                a.out.display()
            );
        }
        other => return Err(format!("unknown role {other:?}, expected behavior|transition").into()),
    }
    Ok(())
}

fn train(a: Train) -> Result<(), Box<dyn std::error::Error>> {
    let variant =
        Variant::parse(&a.variant).ok_or_else(|| format!("unknown variant {:?}", a.variant))?;
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    cfg.run.variants = vec![variant.name().to_string()];
    cfg.run.seeds = vec![a.seed];
    cfg.run.include_references = false;
    cfg.run.out_dir = a.out.display().to_string();
    let report = harness::run_pipeline(&cfg)?;
    let r = &report.results[0];
    println!(
        "{} seed {}: normalized score {:.2}",
        r.variant, r.seed, r.normalized_score
    );
    Ok(())
}

fn augment_cmd(a: Augment) -> Result<(), Box<dyn std::error::Error>> {
    let d = dataset::read_file(&a.data)?;
    let mut rng = Stream::derive(a.seed, "augment-cli");
    let out = match a.mode.as_str() {
        "noise" => augment::noise_augment(&d, NoiseSpec::new(a.amplitude), a.n, &mut rng)?,
        "model" => {
            let model = PseudoModel::fit(&d, &CvaeTrainConfig::default(), a.model_budget, a.seed)?;
            augment::model_augment(&d, &model, a.n, &mut rng)?
        }
        other => return Err(format!("unknown mode {other:?}, expected model|noise").into()),
    };
    dataset::write_file(&a.out, &out)?;
    println!(
        "wrote {} generated transitions to {}",
        out.len(),
        a.out.display()
    );
    Ok(())
}

fn collect_results(dir: &Path, out: &mut Vec<EvalResult>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_results(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "result.json") {
            if let Ok(r) = serde_json::from_str(&fs::read_to_string(&path)?) {
                out.push(r);
            }
        }
    }
    Ok(())
}

fn report(a: Report) -> Result<(), Box<dyn std::error::Error>> {
    let mut results = Vec::new();
    collect_results(&a.runs, &mut results)?;
    if results.is_empty() {
        return Err(format!("no result.json files under {}", a.runs.display()).into());
    }
    results.sort_by(|x, y| (&x.dataset, &x.variant, x.seed).cmp(&(&y.dataset, &y.variant, y.seed)));

    let mut rows: Vec<ReportRow> = Vec::new();
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
        let (mean, std) = metrics::aggregate(&group)?;
        rows.push(ReportRow {
            variant,
            dataset: ds,
            mean,
            std,
            seeds: group.len(),
        });
    }

    let mut deltas: Vec<DeltaRow> = Vec::new();
    let mean_of = |variant: &str, ds: &str| {
        rows.iter()
            .find(|r| r.variant == variant && r.dataset == ds)
            .map(|r| r.mean)
    };
    let best_100 = rows
        .iter()
        .filter(|r| r.dataset == "target100")
        .map(|r| r.mean)
        .fold(f64::NEG_INFINITY, f64::max);
    if let (Some(s10), Some(sx)) = (mean_of("full", "target10"), mean_of("full", "mix")) {
        if best_100.is_finite() && best_100 != 0.0 {
            let d = metrics::transfer_deltas(s10, sx, best_100)?;
            deltas.push(DeltaRow {
                task: "task".into(),
                x: d.x,
                y: d.y,
            });
        }
    }

    fs::create_dir_all(&a.out)?;
    let report = ExperimentReport {
        rows,
        deltas,
        results,
        out_dir: a.out.clone(),
    };
    harness::write_report_files(&report)?;
    println!("report written to {}", a.out.display());
    Ok(())
}

fn run_pipeline(a: Run) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    if a.jobs > 0 {
        cfg.run.jobs = a.jobs;
    }
    if !a.resume {
        // fresh run: drop stage stamps so every artifact is rebuilt
        let out = PathBuf::from(&cfg.run.out_dir);
        if out.exists() {
            drop_stamps(&out)?;
        }
    }
    let report = harness::run_pipeline(&cfg)?;
    for r in &report.rows {
        println!(
            "{:<22} {:<10} mean {:>8.2}  std {:>7.2}  ({} seeds)",
            r.variant, r.dataset, r.mean, r.std, r.seeds
        );
    }
    println!("artifacts in {}", report.out_dir.display());
    Ok(())
}

fn drop_stamps(dir: &Path) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            drop_stamps(&path)?;
        } else if path.extension().is_some_and(|e| e == "stamp") {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}
