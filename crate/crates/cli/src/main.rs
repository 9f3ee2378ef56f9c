use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use scalodeck::autonn::{load_archive, save_archive, ArchiveTensor, FreezePolicy, Init, ProjectionKind, TensorArchive};
use scalodeck::evalstats::{Protocol, SAP_FOLDS};
use scalodeck::experiment::{
    run_ablation, run_cell, CellResult, Dataset, ModelKind, PreparedTask, RunConfig, Task, WeightSource,
    CODE_VERSION, FULL_IMAGE_SIZE, RESULT_SCHEMA,
};
use scalodeck::preproc::{EpochSet, FilterSpec, WindowKind};
use scalodeck::report::{build_report, folds_csv, load_results};
use scalodeck::synthgen::{generate_dataset, ContinuousRecording, ParadigmConfig};
use scalodeck::tfr::{CwtCache, MorletParams};

const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Parser)]
#[command(name = "scalodeck", version, about = "Image-based MEG decoding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of continuous recordings.
    Synth(SynthArgs),
    /// Filter raw recordings and cut labelled epochs.
    Preprocess(PreprocessArgs),
    /// Compute baseline-normalized Morlet scalograms of an epoch set.
    Tfr(TfrArgs),
    /// Run one task x window x protocol x model cell.
    Run(RunArgs),
    /// Run the eight ResNet-18 transfer variants under both protocols.
    Ablate(AblateArgs),
    /// Aggregate result JSON files into tables and statistics.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Generate synthetic data in memory.
    #[arg(long, conflicts_with = "data")]
    synth: bool,
    /// Directory written by `scalodeck synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the full-study dimensions (21 subjects, 248 sensors, 10 SAP folds, 224 px images).
    #[arg(long)]
    paper_scale: bool,
    /// Override the number of synthetic subjects.
    #[arg(long)]
    subjects: Option<usize>,
    /// Override the number of synthetic sensors.
    #[arg(long)]
    sensors: Option<usize>,
    /// Keep every Silence epoch instead of matching the ISP count per subject.
    #[arg(long)]
    no_match_silence: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    sensors: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory written by `scalodeck synth`.
    #[arg(long)]
    data: PathBuf,
    /// pre-cue, post-cue or full; all three when omitted.
    #[arg(long)]
    window: Option<WindowKind>,
    #[arg(long)]
    no_match_silence: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TfrArgs {
    /// Epoch archive written by `scalodeck preprocess` (its .json sidecar must sit next to it).
    #[arg(long)]
    epochs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// conv or pca3
    #[arg(long, default_value = "conv")]
    projection: ProjectionKind,
    /// pretrained or random-init
    #[arg(long, default_value = "pretrained")]
    init: Init,
    /// partial-ft or full-ft
    #[arg(long, default_value = "partial-ft")]
    freeze: FreezePolicy,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    lr_unfrozen: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    sap_folds: Option<usize>,
    /// Pretrained backbone archive (.fta).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    n_perm: Option<usize>,
    #[arg(long)]
    n_boot: Option<usize>,
    #[arg(long)]
    cov_shrinkage: Option<f64>,
    #[arg(long)]
    lda_shrinkage: Option<f64>,
    #[arg(long)]
    logreg_lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// isp-vs-silence, isp-vs-sr or vowel3
    #[arg(long)]
    task: Task,
    /// pre-cue, post-cue or full
    #[arg(long)]
    window: WindowKind,
    /// sap or loso
    #[arg(long)]
    protocol: Protocol,
    /// resnet18, shallow-cnn, eegnet, lda or riemannian
    #[arg(long)]
    model: ModelKind,
    #[command(flatten)]
    variant: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    task: Task,
    #[arg(long, default_value = "full")]
    window: WindowKind,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for result*.json.
    #[arg(long)]
    results: PathBuf,
    /// Where to write report files; defaults to the results directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| dispatch(cli.command)) {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SCALODECK_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SCALODECK_THREADS must be a positive integer, got `{}`", v))?;
        if n == 0 {
            bail!("SCALODECK_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Tfr(a) => cmd_tfr(a),
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn paradigm(seed: u64, paper_scale: bool, subjects: Option<usize>, sensors: Option<usize>) -> ParadigmConfig {
    let mut c = if paper_scale {
        ParadigmConfig::paper_scale(seed)
    } else {
        ParadigmConfig::desk_scale(seed)
    };
    if let Some(n) = subjects {
        c.n_subjects = n;
    }
    if let Some(n) = sensors {
        c.n_sensors = n;
    }
    c
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let config = paradigm(a.seed, a.paper_scale, a.subjects, a.sensors);
    let recordings = generate_dataset(&config)?;
    fs::create_dir_all(&a.out)?;
    let mut files = Vec::new();
    for r in &recordings {
        let stem = format!("subject_{:02}", r.subject_id);
        save_archive(&r.to_archive(), a.out.join(format!("{}.fta", stem)))?;
        write_json(&a.out.join(format!("{}.json", stem)), &r.manifest())?;
        files.push(stem);
    }
    let digest = scalodeck::synthgen::dataset_digest(&recordings);
    write_json(
        &a.out.join(DATASET_MANIFEST),
        &serde_json::json!({
            "schema": RESULT_SCHEMA,
            "code_version": CODE_VERSION,
            "config": config,
            "config_digest": config.digest(),
            "dataset_digest": digest,
            "recordings": files,
        }),
    )?;
    println!("wrote {} recordings to {} (digest {})", recordings.len(), a.out.display(), &digest[..16]);
    Ok(())
}

fn load_raw(dir: &Path) -> Result<Vec<ContinuousRecording>> {
    let manifest = read_json(&dir.join(DATASET_MANIFEST))?;
    let stems: Vec<String> = serde_json::from_value(
        manifest
            .get("recordings")
            .cloned()
            .context("dataset manifest lacks `recordings`")?,
    )?;
    stems
        .iter()
        .map(|stem| {
            let archive = load_archive(dir.join(format!("{}.fta", stem)))?;
            let side = read_json(&dir.join(format!("{}.json", stem)))?;
            Ok(ContinuousRecording::from_parts(&archive, &side)?)
        })
        .collect()
}

fn load_dataset(d: &DataArgs, seed: u64) -> Result<Dataset> {
    let mut data = match (&d.data, d.synth) {
        (Some(dir), _) => Dataset::from_raw(load_raw(dir)?, &FilterSpec::default())?,
        (None, true) => Dataset::synthesize(&paradigm(seed, d.paper_scale, d.subjects, d.sensors))?,
        (None, false) => bail!("no dataset: pass --data DIR or --synth"),
    };
    data.epoch_options.match_silence = !d.no_match_silence;
    Ok(data)
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let mut data = Dataset::from_raw(load_raw(&a.data)?, &FilterSpec::default())?;
    data.epoch_options.match_silence = !a.no_match_silence;
    fs::create_dir_all(&a.out)?;
    let windows = a.window.map_or(WindowKind::ALL.to_vec(), |w| vec![w]);
    for w in windows {
        let set = data.epochs(w)?;
        let stem = format!("epochs_{}", w);
        save_archive(&set.to_archive()?, a.out.join(format!("{}.fta", stem)))?;
        write_json(&a.out.join(format!("{}.json", stem)), &set.manifest())?;
        println!(
            "{}: {} epochs kept, {} rejected",
            w,
            set.epochs.len(),
            set.rejection_log.len()
        );
    }
    Ok(())
}

fn cmd_tfr(a: TfrArgs) -> Result<()> {
    let archive = load_archive(&a.epochs)?;
    let side = read_json(&a.epochs.with_extension("json"))?;
    let set = EpochSet::from_parts(&archive, &side)?;
    let params = MorletParams::default();
    let cache = CwtCache::build(&set, &params)?;
    let mut data = Vec::new();
    let mut shape = None;
    for i in 0..cache.len() {
        let s = cache.scalogram(i, 0)?;
        shape.get_or_insert_with(|| s.values.shape().to_vec());
        data.extend_from_slice(s.values.data());
    }
    let mut out = TensorArchive::new();
    if let Some(shape) = shape {
        let mut full = vec![cache.len()];
        full.extend(shape);
        out.insert("scalograms", ArchiveTensor::f32(&full, data));
    }
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    save_archive(&out, &a.out)?;
    write_json(
        &a.out.with_extension("json"),
        &serde_json::json!({
            "params": params,
            "params_digest": params.digest(),
            "frequencies": params.frequencies(),
            "sample_rate": cache.sample_rate,
            "epochs": cache.metas().collect::<Vec<_>>(),
        }),
    )?;
    println!("wrote {} scalograms to {}", cache.len(), a.out.display());
    Ok(())
}

fn base_config(task: Task, window: WindowKind, protocol: Protocol, model: ModelKind, d: &DataArgs, t: &TrainArgs) -> RunConfig {
    let mut c = RunConfig::new(task, window, protocol, model);
    if d.paper_scale {
        c.sap_folds = SAP_FOLDS;
        c.image_size = FULL_IMAGE_SIZE;
    }
    c.seed = t.seed;
    c.optim.seed = t.seed;
    macro_rules! set {
        ($field:expr, $opt:expr) => {
            if let Some(v) = $opt {
                $field = v;
            }
        };
    }
    set!(c.optim.epochs, t.epochs);
    set!(c.optim.batch_size, t.batch_size);
    set!(c.optim.lr_head, t.lr_head);
    set!(c.optim.lr_unfrozen, t.lr_unfrozen);
    set!(c.optim.weight_decay, t.weight_decay);
    set!(c.image_size, t.image_size);
    set!(c.sap_folds, t.sap_folds);
    set!(c.n_perm, t.n_perm);
    set!(c.n_boot, t.n_boot);
    set!(c.cov_shrinkage, t.cov_shrinkage);
    set!(c.lda_shrinkage, t.lda_shrinkage);
    set!(c.logreg_lambda, t.logreg_lambda);
    if t.no_augment {
        c.augment.enabled = false;
    }
    c
}

/// Writes `result.json`, `manifest.json` and `run.log` into `<out>/<cell_id>/`.
fn write_cell(out: &Path, r: &CellResult) -> Result<PathBuf> {
    let dir = out.join(r.config.cell_id());
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("result.json"), r)?;
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "schema": r.schema,
            "code_version": r.code_version,
            "cell_id": r.config.cell_id(),
            "config_digest": r.config_digest,
            "dataset_digest": r.dataset_digest,
            "seed": r.seed,
            "metrics_digest": r.metrics_digest,
        }),
    )?;
    let mut log = fs::File::create(dir.join("run.log"))?;
    writeln!(log, "cell {}", r.config.cell_id())?;
    writeln!(log, "config digest {}", r.config_digest)?;
    writeln!(log, "dataset digest {}", r.dataset_digest)?;
    writeln!(log, "samples {}  classes {}  init {}", r.n_samples, r.n_classes, r.effective_init)?;
    for (f, run) in r.folds.iter().zip(r.train_runs.iter().map(Some).chain(std::iter::repeat(None))) {
        write!(log, "fold {}: balanced accuracy {:.4}", f.fold, f.balanced_accuracy)?;
        if let Some(run) = run {
            let losses: Vec<String> = run.epoch_losses.iter().map(|l| format!("{:.4}", l)).collect();
            write!(log, "  losses [{}]", losses.join(", "))?;
        }
        writeln!(log)?;
    }
    writeln!(
        log,
        "mean {:.4}  CI [{:.4}, {:.4}] over {}  pooled {:.4}  permutation p {:.5}",
        r.mean, r.ci.0, r.ci.1, r.ci_unit, r.pooled_balanced_accuracy, r.permutation.p_raw
    )?;
    for n in &r.notes {
        writeln!(log, "note: {}", n)?;
    }
    Ok(dir)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut config = base_config(a.task, a.window, a.protocol, a.model, &a.data, &a.train);
    config.projection = a.variant.projection;
    config.init = a.variant.init;
    config.freeze = a.variant.freeze;
    let weights = WeightSource::new(a.train.weights.clone());
    weights.check()?;
    let data = load_dataset(&a.data, config.seed)?;
    let set = data.epochs(config.window)?;
    let prepared = PreparedTask::new(&set, config.task)?;
    info!("{}: {} epochs", config.cell_id(), prepared.len());
    let dir = a.train.out.join(config.cell_id());
    fs::create_dir_all(&dir)?;
    let r = run_cell(&config, &prepared, &data.digest, &weights, &mut |fold, archive| {
        save_archive(archive, dir.join(format!("fold_{:02}.fta", fold)))?;
        Ok(())
    })?;
    write_cell(&a.train.out, &r)?;
    // Training records sit next to the fold checkpoints; train_runs follow fold order.
    for (f, run) in r.folds.iter().zip(&r.train_runs) {
        write_json(&dir.join(format!("fold_{:02}.json", f.fold)), run)?;
    }
    let report = build_report(std::slice::from_ref(&r))?;
    print!("{}", report.render_text());
    println!("results in {}", dir.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = base_config(a.task, a.window, Protocol::Sap, ModelKind::ResNet18, &a.data, &a.train);
    let weights = WeightSource::new(a.train.weights.clone());
    weights.check()?;
    let data = load_dataset(&a.data, base.seed)?;
    let set = data.epochs(base.window)?;
    let prepared = PreparedTask::new(&set, base.task)?;
    let out = a.train.out.clone();
    let table = run_ablation(&base, &prepared, &data.digest, &weights, &mut |r| {
        write_cell(&out, r)
            .map(|_| ())
            .map_err(|e| scalodeck::Error::Io(std::io::Error::other(format!("{:#}", e))))
    })?;
    fs::create_dir_all(&out)?;
    let text = table.render_text();
    fs::write(out.join("ablation.txt"), &text)?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    write_json(&out.join("ablation.json"), &table)?;
    print!("{}", text);
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let loaded = load_results(&a.results)?;
    for w in &loaded.warnings {
        warn!("skipped {}", w);
    }
    if loaded.results.is_empty() {
        bail!("no result JSON under {}", a.results.display());
    }
    let report = build_report(&loaded.results)?;
    let out = a.out.unwrap_or(a.results);
    fs::create_dir_all(&out)?;
    let text = report.render_text();
    fs::write(out.join("report.txt"), &text)?;
    fs::write(out.join("report.csv"), report.cells_csv())?;
    fs::write(out.join("folds.csv"), folds_csv(&loaded.results))?;
    write_json(&out.join("report.json"), &report)?;
    print!("{}", text);
    Ok(())
}
