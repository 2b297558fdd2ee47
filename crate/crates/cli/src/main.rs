use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use styledg::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint};
use styledg::data::{
    dataset_root, default_domain_specs, generate_dataset, load_manifest, save_manifest,
    stats_report, write_stats, GeneratorConfig, ImageSet,
};
use styledg::train::{
    ablate, component_rows, evaluate, resolve_normalization, write_report, AblationConfig,
    AblationRow, Precision, TrainConfig, Trainer,
};
use styledg::verify::{gradient_battery, BATTERY_TOL};
use styledg::Scalar;

#[derive(Parser)]
#[command(
    name = "styledg",
    version,
    about = "Style-randomized domain generalization on synthetic multi-label images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-domain dataset and its manifest.
    GenerateData(GenerateArgs),
    /// Train a model and write a checkpoint, step log and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint per domain.
    Eval(EvalArgs),
    /// Run the component ablation over several seeds with paired t-tests.
    Ablate(AblateArgs),
    /// Per-image intensity statistics and domain separability.
    Stats(StatsArgs),
    /// Central-difference gradient checks; exits nonzero on any failure.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory; receives `manifest.jsonl` and `images/`.
    #[arg(long)]
    out: PathBuf,
    /// Generator config JSON; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    per_domain: Option<usize>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Training config JSON (fields mirror `TrainConfig`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set lr=0.001 --set toggles.use_srm_fl=false`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Expand each seed into k stratified folds of the training domains.
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated row names to keep (default: every component row).
    #[arg(long, value_delimiter = ',')]
    rows: Vec<String>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also write the outcomes as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Sets a dotted path inside a JSON object. The value is parsed as JSON
/// and falls back to a plain string.
fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not PATH=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().with_context(|| {
            format!(
                "override {path:?}: {:?} is not an object",
                keys[..i].join(".")
            )
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

fn load_train_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut doc = match &args.config {
        Some(p) => read_json(p)?,
        None => serde_json::to_value(TrainConfig::default())?,
    };
    for o in &args.overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: TrainConfig = serde_json::from_value(doc).context("invalid training config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_images(manifest: &Path, resize_to: usize) -> Result<ImageSet> {
    let m = load_manifest(manifest)?;
    Ok(ImageSet::load(&m, &dataset_root(manifest), resize_to)?)
}

fn training_subset(all: &ImageSet, cfg: &TrainConfig) -> ImageSet {
    match &cfg.train_domains {
        Some(d) => all.filter_domains(d),
        None => all.clone(),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_value(read_json(p)?)?,
        None => GeneratorConfig {
            domains: default_domain_specs(),
            ..Default::default()
        },
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.image_size {
        cfg.image_size = s;
    }
    if let Some(n) = args.per_domain {
        cfg.per_domain_count = n;
        cfg.domains.iter_mut().for_each(|d| d.count = None);
    }
    fs::create_dir_all(&args.out)?;
    let manifest = generate_dataset(&cfg, &args.out)?;
    save_manifest(&manifest, &args.out.join("manifest.jsonl"))?;
    write_json(&args.out.join("generator_config.json"), &cfg)?;
    log::info!("wrote {} images to {}", manifest.len(), args.out.display());
    Ok(())
}

fn train_with<T: Scalar>(cfg: TrainConfig, train: &ImageSet, out: &Path) -> Result<()> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let outcome = trainer.fit(train);
    let step_log: String = trainer
        .log
        .iter()
        .map(|l| serde_json::to_string(l).map(|s| s + "\n"))
        .collect::<serde_json::Result<_>>()?;
    fs::write(out.join("train_log.jsonl"), step_log)?;
    write_json(&out.join("epoch_losses.json"), &trainer.epoch_means())?;
    let ckpt = Checkpoint {
        model: trainer.state.clone(),
        nets: trainer.nets.clone(),
        train_config: Some(serde_json::to_value(&trainer.cfg)?),
    };
    match outcome {
        Ok(()) => {
            save_checkpoint(&ckpt, &out.join("model.ckpt"))?;
            log::info!("saved {}", out.join("model.ckpt").display());
            Ok(())
        }
        Err(e) => {
            let path = out.join("last_good.ckpt");
            save_checkpoint(&ckpt, &path)?;
            bail!(
                "training aborted at step {}: {e}; last good state in {}",
                trainer.state.step,
                path.display()
            )
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_train_config(&args.config)?;
    let all = load_images(&args.manifest, cfg.preprocess.resize_to)?;
    let data = training_subset(&all, &cfg);
    resolve_normalization(&mut cfg, &data)?;
    if cfg.train_domains.is_none() {
        cfg.train_domains = Some(data.domains());
    }
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    log::info!("training on {} images, config {}", data.len(), cfg.hash());
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, &data, &args.out),
        Precision::F64 => train_with::<f64>(cfg, &data, &args.out),
    }
}

fn eval_with<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let ckpt: Checkpoint<T> = load_checkpoint(&args.checkpoint)?;
    let cfg: TrainConfig = serde_json::from_value(
        ckpt.train_config
            .clone()
            .context("checkpoint carries no training config")?,
    )?;
    let data = load_images(&args.manifest, cfg.preprocess.resize_to)?;
    let train_domains = cfg.train_domains.clone().unwrap_or_default();
    let mut report = evaluate(
        &ckpt.model.ema_snapshot(),
        &data,
        &cfg.preprocess,
        &train_domains,
    )?;
    report.config_hash = cfg.hash();
    report.seed = cfg.seed;
    write_report(&report, &args.out)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    for m in &report.per_domain {
        println!(
            "domain {} ({:?}): macro AUC {}",
            m.domain.map_or("all".into(), |d| d.to_string()),
            m.role,
            m.macro_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    match checkpoint_dtype(&args.checkpoint)?.as_str() {
        "f32" => eval_with::<f32>(&args),
        "f64" => eval_with::<f64>(&args),
        other => bail!("unsupported checkpoint dtype {other}"),
    }
}

fn run_ablation(args: AblateArgs) -> Result<()> {
    let mut base = load_train_config(&args.config)?;
    let all = load_images(&args.manifest, base.preprocess.resize_to)?;
    let train = training_subset(&all, &base);
    resolve_normalization(&mut base, &train)?;
    base.train_domains = Some(train.domains());
    let mut rows: Vec<AblationRow> = component_rows();
    if !args.rows.is_empty() {
        for name in &args.rows {
            if !rows.iter().any(|r| &r.name == name) {
                bail!("unknown ablation row {name:?}");
            }
        }
        rows.retain(|r| args.rows.contains(&r.name));
    }
    let cfg = AblationConfig {
        base,
        rows,
        seeds: args.seeds,
        folds: args.folds,
    };
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    let report = match cfg.base.precision {
        Precision::F32 => ablate::<f32>(&cfg, &train, &all)?,
        Precision::F64 => ablate::<f64>(&cfg, &train, &all)?,
    };
    write_json(&args.out.join("ablation.json"), &report)?;
    let table = report.to_markdown();
    fs::write(args.out.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let report = stats_report(&manifest, &dataset_root(&args.manifest))?;
    write_stats(&report, &args.out)?;
    let s = &report.summary;
    println!(
        "{} images, {} domains; min centroid distance {:.3}, mean within-domain spread {:.3}, nearest-centroid accuracy {:.3}",
        report.rows.len(),
        s.domains.len(),
        s.min_pairwise_distance,
        s.mean_within_spread,
        s.nearest_centroid_accuracy
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let outcomes = gradient_battery()?;
    for c in &outcomes {
        println!(
            "{} {:<48} max rel err {:.2e} over {} coords",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.coordinates
        );
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {failed} failed (tolerance {BATTERY_TOL:e})",
        outcomes.len()
    );
    if let Some(p) = &args.json {
        write_json(p, &outcomes)?;
    }
    Ok(failed == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(a) => generate(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Ablate(a) => run_ablation(a).map(|_| true),
        Command::Stats(a) => stats(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
