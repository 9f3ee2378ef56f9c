//! Experiment orchestration: task selection, per-fold fitting and
//! evaluation of every model family, result records, and the
//! projection x initialization x fine-tuning ablation grid.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use log::{info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autonn::{
    install_pca, load_archive, Architecture, FreezePolicy, HeadKind, Init, ModelSpec, ParamStore, ProjectionKind,
    StandardizeOrder, TensorArchive,
};
use crate::baselines::{
    epoch_covariance, fit_lda, fit_logreg_l2, TangentSpace, COV_SHRINKAGE, LDA_SHRINKAGE, LOGREG_LAMBDA,
};
use crate::error::{Error, Result};
use crate::evalstats::{
    balanced_accuracy, bootstrap_ci, permutation_test_vs_chance, split_loso, split_sap, FoldResult, PredictionRecord,
    Protocol, SampleKey, SplitPlan, StatTestResult, N_BOOT, N_PERM,
};
use crate::imagerep::{resize_bilinear, standardize_image, PcaAccumulator, PcaProjection};
use crate::preproc::{
    extract_epochs, preprocess_recording, reject_artifacts, EpochMeta, EpochOptions, EpochSet, FilterSpec,
    WindowKind,
};
use crate::synthgen::{dataset_digest, generate_dataset, Condition, ContinuousRecording, ParadigmConfig};
use crate::tfr::{CwtCache, MorletParams};
use crate::trainkit::{
    class_weights, decide, predict_logits, train, AugmentSpec, BatchSource, OptimConfig, RawEpochSource, ScalogramSource,
    TrainRun,
};

pub const RESULT_SCHEMA: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// SAP fold count used at desk scale.
pub const DESK_SAP_FOLDS: usize = 5;
/// Image side length used at desk scale.
pub const DESK_IMAGE_SIZE: usize = 32;
/// Image side length of the ImageNet backbone input.
pub const FULL_IMAGE_SIZE: usize = 224;
pub const CI_LEVEL: f64 = 0.95;

macro_rules! text_enum {
    ($t:ident { $($v:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($t::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($t::$v),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($t), other, [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    IspVsSilence,
    IspVsSr,
    Vowel3,
}

text_enum!(Task { IspVsSilence => "isp-vs-silence", IspVsSr => "isp-vs-sr", Vowel3 => "vowel3" });

impl Task {
    pub const ALL: [Task; 3] = [Task::IspVsSilence, Task::IspVsSr, Task::Vowel3];

    pub fn n_classes(self) -> usize {
        match self {
            Task::Vowel3 => 3,
            _ => 2,
        }
    }

    pub fn chance(self) -> f64 {
        1.0 / self.n_classes() as f64
    }

    /// Class of an epoch under this task, or `None` when the epoch is not
    /// part of it.
    pub fn label(self, meta: &EpochMeta) -> Option<usize> {
        match (self, meta.condition) {
            (Task::IspVsSilence, Condition::Silence) | (Task::IspVsSr, Condition::Sr) => Some(0),
            (Task::IspVsSilence, Condition::Isp) | (Task::IspVsSr, Condition::Isp) => Some(1),
            (Task::Vowel3, Condition::Isp) => meta.vowel.map(|v| v.index()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(rename = "resnet18")]
    ResNet18,
    ShallowCnn,
    #[serde(rename = "eegnet")]
    EegNet,
    Lda,
    Riemannian,
}

text_enum!(ModelKind {
    ResNet18 => "resnet18",
    ShallowCnn => "shallow-cnn",
    EegNet => "eegnet",
    Lda => "lda",
    Riemannian => "riemannian",
});

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::ResNet18,
        ModelKind::ShallowCnn,
        ModelKind::EegNet,
        ModelKind::Lda,
        ModelKind::Riemannian,
    ];

    pub fn is_neural(self) -> bool {
        matches!(self, ModelKind::ResNet18 | ModelKind::ShallowCnn | ModelKind::EegNet)
    }

    fn architecture(self) -> Option<Architecture> {
        match self {
            ModelKind::ResNet18 => Some(Architecture::ResNet18),
            ModelKind::ShallowCnn => Some(Architecture::ShallowCnn),
            ModelKind::EegNet => Some(Architecture::EegNet),
            _ => None,
        }
    }
}

/// One cell of the experimental grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub window: WindowKind,
    pub protocol: Protocol,
    pub model: ModelKind,
    pub projection: ProjectionKind,
    pub init: Init,
    pub freeze: FreezePolicy,
    pub standardize: StandardizeOrder,
    pub image_size: usize,
    pub sap_folds: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub augment: AugmentSpec,
    pub n_boot: usize,
    pub n_perm: usize,
    pub cov_shrinkage: f64,
    pub lda_shrinkage: f64,
    pub logreg_lambda: f64,
}

impl RunConfig {
    /// Desk-scale defaults with the baseline transfer variant
    /// (convolutional projection, pretrained, partial fine-tuning).
    pub fn new(task: Task, window: WindowKind, protocol: Protocol, model: ModelKind) -> Self {
        RunConfig {
            task,
            window,
            protocol,
            model,
            projection: ProjectionKind::Conv,
            init: Init::Pretrained,
            freeze: FreezePolicy::PartialFt,
            standardize: StandardizeOrder::AfterResize,
            image_size: DESK_IMAGE_SIZE,
            sap_folds: DESK_SAP_FOLDS,
            seed: 0,
            optim: OptimConfig::default(),
            augment: AugmentSpec::default(),
            n_boot: N_BOOT,
            n_perm: N_PERM,
            cov_shrinkage: COV_SHRINKAGE,
            lda_shrinkage: LDA_SHRINKAGE,
            logreg_lambda: LOGREG_LAMBDA,
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Directory-safe identifier of the cell.
    pub fn cell_id(&self) -> String {
        let mut id = format!("{}_{}_{}_{}", self.task, self.window, self.protocol, self.model);
        if self.model == ModelKind::ResNet18 {
            id.push_str(&format!("_{}_{}_{}", self.projection, self.init, self.freeze));
        }
        id.push_str(&format!("_s{}", self.seed));
        id
    }
}

/// Pretrained backbone archive, loaded lazily. Every load is counted so
/// callers can verify which cells touched it.
pub struct WeightSource {
    path: Option<PathBuf>,
    loaded: Mutex<Option<Arc<TensorArchive>>>,
    reads: AtomicUsize,
}

impl WeightSource {
    pub fn new(path: Option<PathBuf>) -> Self {
        WeightSource {
            path,
            loaded: Mutex::new(None),
            reads: AtomicUsize::new(0),
        }
    }

    pub fn none() -> Self {
        Self::new(None)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn is_configured(&self) -> bool {
        self.path.is_some()
    }

    /// Errors when a path is configured but does not exist.
    pub fn check(&self) -> Result<()> {
        match &self.path {
            Some(p) if !p.exists() => Err(Error::MissingWeights { path: p.clone() }),
            _ => Ok(()),
        }
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn load(&self) -> Result<Arc<TensorArchive>> {
        let path = self
            .path
            .as_ref()
            .ok_or_else(|| Error::Config("pretrained initialization needs a weight archive path".into()))?;
        self.check()?;
        self.reads.fetch_add(1, Ordering::SeqCst);
        let mut slot = self.loaded.lock().expect("weight cache lock");
        if let Some(a) = slot.as_ref() {
            return Ok(a.clone());
        }
        let a = Arc::new(load_archive(path)?);
        *slot = Some(a.clone());
        Ok(a)
    }
}

/// Preprocessed recordings of all subjects.
pub struct Dataset {
    pub recordings: Vec<ContinuousRecording>,
    /// Digest of the raw recordings.
    pub digest: String,
    pub epoch_options: EpochOptions,
}

impl Dataset {
    pub fn synthesize(config: &ParadigmConfig) -> Result<Self> {
        Self::from_raw(generate_dataset(config)?, &FilterSpec::default())
    }

    pub fn from_raw(raw: Vec<ContinuousRecording>, filter: &FilterSpec) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InsufficientData("dataset has no recordings".into()));
        }
        let digest = dataset_digest(&raw);
        let recordings = raw
            .iter()
            .map(|r| preprocess_recording(r, filter))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            recordings,
            digest,
            epoch_options: EpochOptions::default(),
        })
    }

    /// Epochs of every subject for `window`, after peak-to-peak rejection.
    pub fn epochs(&self, window: WindowKind) -> Result<EpochSet> {
        let sets = self
            .recordings
            .iter()
            .map(|r| extract_epochs(r, window, &self.epoch_options))
            .collect::<Result<Vec<_>>>()?;
        let set = EpochSet::merge(sets)?;
        let threshold = set.default_ptp_threshold();
        reject_artifacts(set, threshold)
    }
}

/// Epochs of one task and window with their labels and split keys. The
/// CWT cache and covariances are built on first use and shared by every
/// cell run on this task.
pub struct PreparedTask {
    pub task: Task,
    pub window: WindowKind,
    pub set: EpochSet,
    pub labels: Vec<usize>,
    pub keys: Vec<SampleKey>,
    cache: OnceLock<CwtCache>,
    covariances: OnceLock<(f64, Vec<DMatrix<f64>>)>,
}

impl PreparedTask {
    pub fn new(set: &EpochSet, task: Task) -> Result<Self> {
        let mut epochs = Vec::new();
        let mut labels = Vec::new();
        for e in &set.epochs {
            if let Some(l) = task.label(&e.meta) {
                epochs.push(e.clone());
                labels.push(l);
            }
        }
        let window = epochs
            .first()
            .map(|e| e.meta.window)
            .ok_or_else(|| Error::InsufficientData(format!("no epochs for task {}", task)))?;
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        if present.len() < task.n_classes() {
            return Err(Error::InsufficientData(format!(
                "task {} needs {} classes, found {:?}",
                task,
                task.n_classes(),
                present
            )));
        }
        let keys = epochs
            .iter()
            .zip(&labels)
            .map(|(e, &label)| SampleKey {
                subject_id: e.meta.subject_id,
                trial_id: e.meta.trial_id,
                label,
            })
            .collect();
        Ok(PreparedTask {
            task,
            window,
            set: EpochSet {
                epochs,
                sample_rate: set.sample_rate,
                rejection_log: set.rejection_log.clone(),
                warnings: set.warnings.clone(),
            },
            labels,
            keys,
            cache: OnceLock::new(),
            covariances: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cache(&self) -> Result<&CwtCache> {
        if let Some(c) = self.cache.get() {
            return Ok(c);
        }
        let c = CwtCache::build(&self.set, &MorletParams::default())?;
        info!("CWT cache for {} ({}): {} MB", self.task, self.window, c.memory_bytes() / 1_000_000);
        Ok(self.cache.get_or_init(|| c))
    }

    fn covariances(&self, gamma: f64) -> Result<&[DMatrix<f64>]> {
        if let Some((g, c)) = self.covariances.get() {
            if *g == gamma {
                return Ok(c);
            }
            return Err(Error::Config(format!("covariances already built with shrinkage {}", g)));
        }
        let covs = self
            .set
            .epochs
            .par_iter()
            .map(|e| epoch_covariance(&e.core(0)?, gamma))
            .collect::<Result<Vec<_>>>()?;
        Ok(&self.covariances.get_or_init(|| (gamma, covs)).1)
    }

    /// Digest identifying the epochs at `indices` (order-insensitive).
    pub fn index_digest(&self, indices: &[usize]) -> String {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        let mut h = Sha256::new();
        for i in sorted {
            let m = &self.set.epochs[i].meta;
            h.update(format!("{}:{}:{:?}:{:?};", m.subject_id, m.trial_id, m.condition, m.vowel).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn plan(&self, protocol: Protocol, sap_folds: usize, seed: u64) -> Result<SplitPlan> {
        let plan = match protocol {
            Protocol::Sap => split_sap(&self.keys, sap_folds, seed)?,
            Protocol::Loso => split_loso(&self.keys)?,
        };
        plan.audit(&self.keys)?;
        Ok(plan)
    }
}

/// Provenance of everything fitted inside one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub train_digest: String,
    pub test_digest: String,
    pub class_weights: Vec<f64>,
    /// Digest of the epochs the class weights were counted on.
    pub class_weight_digest: String,
    /// Fit digest of the PCA-3 projection, when one was fitted.
    pub projection_digest: Option<String>,
    /// Fit digest of the linear classifier, for the classical baselines.
    pub model_fit_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub schema: u32,
    pub code_version: String,
    pub config: RunConfig,
    pub config_digest: String,
    pub dataset_digest: String,
    pub seed: u64,
    pub n_samples: usize,
    pub n_classes: usize,
    pub chance: f64,
    /// Initialization actually used (pretrained falls back to random
    /// when no archive is configured).
    pub effective_init: Init,
    pub folds: Vec<FoldResult>,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    pub ci: (f64, f64),
    /// Resampling unit of the bootstrap.
    pub ci_unit: String,
    pub pooled_balanced_accuracy: f64,
    pub permutation: StatTestResult,
    pub audits: Vec<FoldAudit>,
    pub train_runs: Vec<TrainRun>,
    /// Weight-archive loads made by this cell.
    pub archive_reads: usize,
    /// Top-level parameter groups left trainable.
    pub trainable_groups: Vec<String>,
    /// Frozen parameters are bit-identical before and after training.
    pub frozen_unchanged: bool,
    pub notes: Vec<String>,
    pub metrics_digest: String,
}

impl CellResult {
    fn compute_metrics_digest(&self) -> String {
        let v = serde_json::json!({
            "folds": self.folds,
            "mean": self.mean,
            "ci": self.ci,
            "pooled": self.pooled_balanced_accuracy,
            "permutation": self.permutation,
            "checkpoints": self.train_runs.iter().map(|r| &r.checkpoint_digest).collect::<Vec<_>>(),
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("metrics serialize")))
    }

    /// Mean plus or minus the larger CI half-width, e.g. `0.912 ± 0.031`.
    pub fn cell_text(&self) -> String {
        let half = (self.mean - self.ci.0).max(self.ci.1 - self.mean);
        format!("{:.3} ± {:.3}", self.mean, half)
    }
}

fn derive_seed(seed: u64, fold: usize, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((fold as u64 + 1) << 8) | purpose);
    rng.gen()
}

fn frozen_digest(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (name, p) in store.iter().filter(|(_, p)| !p.trainable) {
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn top_level_groups(store: &ParamStore<f32>) -> BTreeSet<String> {
    store
        .trainable_names()
        .iter()
        .map(|n| n.split('.').next().unwrap_or(n).to_string())
        .collect()
}

fn fit_fold_pca(cache: &CwtCache, train_idx: &[usize], digest: &str) -> Result<PcaProjection> {
    let mut acc = PcaAccumulator::new();
    for &i in train_idx {
        acc.push(&cache.scalogram(i, 0)?.values)?;
    }
    acc.finish(digest)
}

struct FoldOutcome {
    predictions: Vec<usize>,
    audit: FoldAudit,
    run: Option<TrainRun>,
    checkpoint: TensorArchive,
}

struct NeuralTrack {
    groups: BTreeSet<String>,
    frozen_unchanged: bool,
}

/// Runs one cell end to end. `on_checkpoint` receives each fold's final
/// parameters.
pub fn run_cell(
    config: &RunConfig,
    prepared: &PreparedTask,
    dataset_digest: &str,
    weights: &WeightSource,
    on_checkpoint: &mut dyn FnMut(usize, &TensorArchive) -> Result<()>,
) -> Result<CellResult> {
    if prepared.task != config.task || prepared.window != config.window {
        return Err(Error::Config(format!(
            "prepared data is {} / {} but the config asks for {} / {}",
            prepared.task, prepared.window, config.task, config.window
        )));
    }
    let mut notes = Vec::new();
    let mut effective_init = config.init;
    if config.model == ModelKind::ResNet18 && config.init == Init::Pretrained {
        weights.check()?;
        if !weights.is_configured() {
            effective_init = Init::RandomInit;
            notes.push("no weight archive configured; pretrained initialization replaced by random".into());
            warn!("{}: no weight archive, using random initialization", config.cell_id());
        }
    }
    let reads_before = weights.reads();
    let plan = prepared.plan(config.protocol, config.sap_folds, config.seed)?;
    let n_classes = config.task.n_classes();
    let mut track = NeuralTrack {
        groups: BTreeSet::new(),
        frozen_unchanged: true,
    };
    let mut folds = Vec::with_capacity(plan.folds.len());
    let mut audits = Vec::with_capacity(plan.folds.len());
    let mut runs = Vec::new();
    for fold in &plan.folds {
        let train_digest = prepared.index_digest(&fold.train);
        let test_digest = prepared.index_digest(&fold.test);
        let train_labels: Vec<usize> = fold.train.iter().map(|&i| prepared.labels[i]).collect();
        let weights_vec = class_weights(&train_labels, n_classes)?;
        let audit = FoldAudit {
            fold: fold.id,
            train_digest: train_digest.clone(),
            test_digest,
            class_weights: weights_vec,
            class_weight_digest: train_digest,
            projection_digest: None,
            model_fit_digest: None,
        };
        let outcome = match config.model {
            ModelKind::Lda => lda_fold(config, prepared, &fold.train, &fold.test, audit)?,
            ModelKind::Riemannian => riemannian_fold(config, prepared, &fold.train, &fold.test, audit)?,
            _ => neural_fold(config, effective_init, prepared, fold.id, &fold.train, &fold.test, audit, weights, &mut track)?,
        };
        on_checkpoint(fold.id, &outcome.checkpoint)?;
        let records = fold
            .test
            .iter()
            .zip(&outcome.predictions)
            .map(|(&i, &p)| PredictionRecord {
                epoch: i,
                subject_id: prepared.keys[i].subject_id,
                trial_id: prepared.keys[i].trial_id,
                truth: prepared.labels[i],
                predicted: p,
            })
            .collect();
        let fr = FoldResult::new(fold.id, n_classes, records)?;
        info!("{} fold {}: balanced accuracy {:.3}", config.cell_id(), fold.id, fr.balanced_accuracy);
        folds.push(fr);
        audits.push(outcome.audit);
        runs.extend(outcome.run);
    }
    let fold_scores: Vec<f64> = folds.iter().map(|f| f.balanced_accuracy).collect();
    let mean = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
    let ci = bootstrap_ci(&fold_scores, config.n_boot, CI_LEVEL, config.seed)?;
    let all: Vec<&PredictionRecord> = folds.iter().flat_map(|f| &f.predictions).collect();
    let preds: Vec<usize> = all.iter().map(|r| r.predicted).collect();
    let truths: Vec<usize> = all.iter().map(|r| r.truth).collect();
    let subjects: Vec<usize> = all.iter().map(|r| r.subject_id).collect();
    let pooled = balanced_accuracy(&preds, &truths, n_classes)?;
    let permutation = permutation_test_vs_chance(&preds, &truths, &subjects, n_classes, config.n_perm, config.seed)?;
    let mut result = CellResult {
        schema: RESULT_SCHEMA,
        code_version: CODE_VERSION.to_string(),
        config: config.clone(),
        config_digest: config.digest(),
        dataset_digest: dataset_digest.to_string(),
        seed: config.seed,
        n_samples: prepared.len(),
        n_classes,
        chance: config.task.chance(),
        effective_init,
        folds,
        fold_scores,
        mean,
        ci,
        ci_unit: match config.protocol {
            Protocol::Sap => "fold".into(),
            Protocol::Loso => "subject".into(),
        },
        pooled_balanced_accuracy: pooled,
        permutation,
        audits,
        train_runs: runs,
        archive_reads: weights.reads() - reads_before,
        trainable_groups: track.groups.into_iter().collect(),
        frozen_unchanged: track.frozen_unchanged,
        notes,
        metrics_digest: String::new(),
    };
    result.metrics_digest = result.compute_metrics_digest();
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn neural_fold(
    config: &RunConfig,
    init: Init,
    prepared: &PreparedTask,
    fold_id: usize,
    train_idx: &[usize],
    test_idx: &[usize],
    mut audit: FoldAudit,
    weights: &WeightSource,
    track: &mut NeuralTrack,
) -> Result<FoldOutcome> {
    let arch = config.model.architecture().expect("neural model");
    let head = HeadKind::for_classes(config.task.n_classes())?;
    let n_sensors = prepared.set.n_sensors();
    let core_len = prepared.set.epochs[0].layout.core_len;
    let mut spec = ModelSpec::new(arch, head, n_sensors, core_len);
    spec.image_size = config.image_size;
    spec.standardize = config.standardize;
    if arch == Architecture::ResNet18 {
        spec.projection = config.projection;
        spec.init = init;
        spec.freeze = config.freeze;
    }
    let archive = if spec.init == Init::Pretrained { Some(weights.load()?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, fold_id, 0));
    let mut store: ParamStore<f32> = spec.build_params(&mut rng, archive.as_deref())?;
    let scal;
    let raw;
    let source: &dyn BatchSource = if arch == Architecture::EegNet {
        raw = RawEpochSource { set: &prepared.set };
        &raw
    } else {
        let cache = prepared.cache()?;
        if spec.projection == ProjectionKind::Pca3 {
            let pca = fit_fold_pca(cache, train_idx, &audit.train_digest)?;
            install_pca(&mut store, &pca)?;
            audit.projection_digest = Some(pca.fit_digest.clone());
        }
        scal = ScalogramSource { cache };
        &scal
    };
    let before = frozen_digest(&store);
    let optim = OptimConfig {
        seed: derive_seed(config.seed, fold_id, 1),
        ..config.optim.clone()
    };
    let run = train(&spec, &mut store, source, &prepared.labels, train_idx, &optim, &config.augment)?;
    track.frozen_unchanged &= frozen_digest(&store) == before;
    track.groups.extend(top_level_groups(&store));
    let logits = predict_logits(&spec, &store, source, test_idx, config.optim.batch_size)?;
    Ok(FoldOutcome {
        predictions: decide(&logits),
        audit,
        run: Some(run),
        checkpoint: store.to_archive(),
    })
}

/// Flattened PCA-3 images: project, resize to `size`, standardize.
fn image_features(cache: &CwtCache, pca: &PcaProjection, indices: &[usize], size: usize) -> Result<crate::autonn::Array<f64>> {
    let rows = indices
        .par_iter()
        .map(|&i| {
            let sc = cache.scalogram(i, 0)?.values.cast::<f64>();
            let img = resize_bilinear(&pca.apply(&sc)?, size, size)?;
            Ok(standardize_image(&img)?.0.into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let d = rows.first().map_or(0, |r| r.len());
    crate::autonn::Array::from_vec(&[indices.len(), d], rows.concat())
}

fn lda_fold(
    config: &RunConfig,
    prepared: &PreparedTask,
    train_idx: &[usize],
    test_idx: &[usize],
    mut audit: FoldAudit,
) -> Result<FoldOutcome> {
    let cache = prepared.cache()?;
    let pca = fit_fold_pca(cache, train_idx, &audit.train_digest)?;
    let xtr = image_features(cache, &pca, train_idx, config.image_size)?;
    let xte = image_features(cache, &pca, test_idx, config.image_size)?;
    let labels: Vec<usize> = train_idx.iter().map(|&i| prepared.labels[i]).collect();
    let model = fit_lda(&xtr, &labels, config.task.n_classes(), config.lda_shrinkage)?;
    audit.projection_digest = Some(pca.fit_digest.clone());
    audit.model_fit_digest = Some(model.fit_digest.clone());
    Ok(FoldOutcome {
        predictions: model.predict(&xte)?,
        audit,
        run: None,
        checkpoint: model.to_archive(),
    })
}

fn riemannian_fold(
    config: &RunConfig,
    prepared: &PreparedTask,
    train_idx: &[usize],
    test_idx: &[usize],
    mut audit: FoldAudit,
) -> Result<FoldOutcome> {
    let covs = prepared.covariances(config.cov_shrinkage)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| covs[i].clone()).collect::<Vec<_>>();
    let (ctr, cte) = (pick(train_idx), pick(test_idx));
    let ts = TangentSpace::fit(&ctr)?;
    let xtr = ts.map_all(&ctr)?;
    let xte = ts.map_all(&cte)?;
    let labels: Vec<usize> = train_idx.iter().map(|&i| prepared.labels[i]).collect();
    let model = fit_logreg_l2(&xtr, &labels, config.task.n_classes(), config.logreg_lambda)?;
    audit.model_fit_digest = Some(model.fit_digest.clone());
    let mut checkpoint = model.to_archive();
    checkpoint.metadata.insert("reference_digest".into(), ts.reference_digest.clone());
    Ok(FoldOutcome {
        predictions: model.predict(&xte)?,
        audit,
        run: None,
        checkpoint,
    })
}

/// One projection x initialization x fine-tuning combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub projection: ProjectionKind,
    pub init: Init,
    pub freeze: FreezePolicy,
}

impl AblationVariant {
    pub fn label(&self) -> String {
        let p = match self.projection {
            ProjectionKind::Conv => "Convolutional projection",
            ProjectionKind::Pca3 => "PCA-3",
        };
        let i = match self.init {
            Init::Pretrained => "Pretrained",
            Init::RandomInit => "RandomInit",
        };
        let f = match self.freeze {
            FreezePolicy::PartialFt => "partial FT",
            FreezePolicy::FullFt => "full FT",
        };
        format!("{} + {} + {}", p, i, f)
    }
}

/// All eight variants, baseline first.
pub fn ablation_variants() -> Vec<AblationVariant> {
    let mut v = Vec::with_capacity(8);
    for projection in [ProjectionKind::Conv, ProjectionKind::Pca3] {
        for init in [Init::Pretrained, Init::RandomInit] {
            for freeze in [FreezePolicy::PartialFt, FreezePolicy::FullFt] {
                v.push(AblationVariant { projection, init, freeze });
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub protocol: Protocol,
    pub mean: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p_perm: Option<f64>,
    pub archive_reads: usize,
    pub trainable_groups: Vec<String>,
    pub frozen_unchanged: bool,
    pub metrics_digest: Option<String>,
    /// Reason the cell was not run.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: AblationVariant,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema: u32,
    pub task: Task,
    pub window: WindowKind,
    pub protocols: Vec<Protocol>,
    pub rows: Vec<AblationRow>,
    pub notices: Vec<String>,
}

impl AblationTable {
    pub fn render_text(&self) -> String {
        let mut header = vec!["Variant".to_string()];
        header.extend(self.protocols.iter().map(|p| p.to_string().to_uppercase()));
        let mut rows = vec![header];
        for r in &self.rows {
            let mut line = vec![r.label.clone()];
            for c in &r.cells {
                line.push(match (c.mean, c.ci) {
                    (Some(m), Some((lo, hi))) => format!("{:.3} ± {:.3}", m, (m - lo).max(hi - m)),
                    _ => "skipped".into(),
                });
            }
            rows.push(line);
        }
        let mut out = format!("Ablation: {} / {} window\n", self.task, self.window);
        out.push_str(&align(&rows));
        for n in &self.notices {
            out.push_str(&format!("note: {}\n", n));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,protocol,mean,ci_low,ci_high,p_perm,skipped\n");
        for r in &self.rows {
            for c in &r.cells {
                let (lo, hi) = c.ci.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
                out.push_str(&format!(
                    "\"{}\",{},{},{},{},{},{}\n",
                    r.label,
                    c.protocol,
                    c.mean.map_or(String::new(), |m| m.to_string()),
                    lo,
                    hi,
                    c.p_perm.map_or(String::new(), |p| p.to_string()),
                    c.skipped.is_some()
                ));
            }
        }
        out
    }
}

/// Left-aligned columns separated by two spaces.
pub fn align(rows: &[Vec<String>]) -> String {
    let n = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..n)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, c)| format!("{}{}", c, " ".repeat(widths[j] - c.chars().count())))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Runs every ablation variant of ResNet-18 under both protocols through
/// [`run_cell`]. Pretrained rows are skipped with a notice when no archive
/// is configured; a configured but missing archive is an error.
pub fn run_ablation(
    base: &RunConfig,
    prepared: &PreparedTask,
    dataset_digest: &str,
    weights: &WeightSource,
    on_result: &mut dyn FnMut(&CellResult) -> Result<()>,
) -> Result<AblationTable> {
    weights.check()?;
    let protocols = vec![Protocol::Sap, Protocol::Loso];
    let mut notices = Vec::new();
    if !weights.is_configured() {
        notices.push("no weight archive configured; Pretrained variants skipped".to_string());
    }
    let mut rows = Vec::new();
    for variant in ablation_variants() {
        let mut cells = Vec::new();
        for &protocol in &protocols {
            if variant.init == Init::Pretrained && !weights.is_configured() {
                cells.push(AblationCell {
                    protocol,
                    mean: None,
                    ci: None,
                    p_perm: None,
                    archive_reads: 0,
                    trainable_groups: Vec::new(),
                    frozen_unchanged: true,
                    metrics_digest: None,
                    skipped: Some("weight archive not configured".into()),
                });
                continue;
            }
            let config = RunConfig {
                model: ModelKind::ResNet18,
                protocol,
                projection: variant.projection,
                init: variant.init,
                freeze: variant.freeze,
                ..base.clone()
            };
            let r = run_cell(&config, prepared, dataset_digest, weights, &mut |_, _| Ok(()))?;
            on_result(&r)?;
            cells.push(AblationCell {
                protocol,
                mean: Some(r.mean),
                ci: Some(r.ci),
                p_perm: Some(r.permutation.p_raw),
                archive_reads: r.archive_reads,
                trainable_groups: r.trainable_groups.clone(),
                frozen_unchanged: r.frozen_unchanged,
                metrics_digest: Some(r.metrics_digest.clone()),
                skipped: None,
            });
        }
        rows.push(AblationRow {
            label: variant.label(),
            variant,
            cells,
        });
    }
    Ok(AblationTable {
        schema: RESULT_SCHEMA,
        task: base.task,
        window: base.window,
        protocols,
        rows,
        notices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::Vowel;

    fn meta(condition: Condition, vowel: Option<Vowel>) -> EpochMeta {
        EpochMeta {
            subject_id: 0,
            trial_id: 1,
            condition,
            vowel,
            window: WindowKind::Full,
        }
    }

    #[test]
    fn task_labels() {
        assert_eq!(Task::IspVsSilence.label(&meta(Condition::Isp, Some(Vowel::A))), Some(1));
        assert_eq!(Task::IspVsSilence.label(&meta(Condition::Silence, None)), Some(0));
        assert_eq!(Task::IspVsSilence.label(&meta(Condition::Sr, Some(Vowel::A))), None);
        assert_eq!(Task::IspVsSr.label(&meta(Condition::Sr, Some(Vowel::E))), Some(0));
        assert_eq!(Task::Vowel3.label(&meta(Condition::Isp, Some(Vowel::I))), Some(2));
        assert_eq!(Task::Vowel3.label(&meta(Condition::Sr, Some(Vowel::I))), None);
        assert_eq!(Task::Vowel3.chance(), 1.0 / 3.0);
        assert_eq!(Task::IspVsSr.chance(), 0.5);
    }

    #[test]
    fn names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
        for m in ModelKind::ALL {
            assert_eq!(m.to_string().parse::<ModelKind>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m));
        }
        assert!("vit".parse::<ModelKind>().is_err());
    }

    #[test]
    fn ablation_grid_shape() {
        let v = ablation_variants();
        assert_eq!(v.len(), 8);
        assert_eq!(v[0].label(), "Convolutional projection + Pretrained + partial FT");
        let labels: BTreeSet<String> = v.iter().map(|x| x.label()).collect();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn missing_archive_is_named() {
        let w = WeightSource::new(Some(PathBuf::from("/nonexistent/resnet18.fta")));
        let e = w.check().unwrap_err().to_string();
        assert!(e.contains("/nonexistent/resnet18.fta"));
        assert!(WeightSource::none().check().is_ok());
        assert!(WeightSource::none().load().is_err());
    }

    #[test]
    fn alignment_pads_columns() {
        let t = align(&[vec!["a".into(), "bb".into()], vec!["ccc".into(), "d".into()]]);
        assert_eq!(t, "a    bb\nccc  d\n");
    }
}
