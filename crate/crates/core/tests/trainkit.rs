use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalodeck::autonn::{Architecture, HeadKind, ModelSpec, ParamStore};
use scalodeck::evalstats::balanced_accuracy;
use scalodeck::preproc::{extract_epochs, preprocess_recording, EpochOptions, WindowKind};
use scalodeck::synthgen::{generate_recording, ParadigmConfig};
use scalodeck::tfr::{CwtCache, MorletParams};
use scalodeck::trainkit::{
    decide, predict_logits, train, AugmentDraw, AugmentSpec, BatchSource, OptimConfig, RawEpochSource, ScalogramSource,
};

/// Class 1 carries a bright patch in the low-frequency rows.
struct Blobs {
    data: Vec<Vec<f32>>,
}

const S: usize = 2;
const F: usize = 8;
const T: usize = 12;

impl Blobs {
    fn new(n: usize, seed: u64) -> (Self, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let v: Vec<f32> = (0..S * F * T)
                .map(|k| {
                    let f = (k / T) % F;
                    let bump = if label == 1 && f < 3 { 2.0 } else { 0.0 };
                    bump + rng.gen_range(-0.5..0.5)
                })
                .collect();
            data.push(v);
            labels.push(label);
        }
        (Blobs { data }, labels)
    }
}

impl BatchSource for Blobs {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![S, F, T]
    }

    fn sample(&self, i: usize, _aug: &AugmentDraw) -> scalodeck::Result<Vec<f32>> {
        Ok(self.data[i].clone())
    }

    fn draw(&self, _spec: &AugmentSpec, _rng: &mut ChaCha8Rng) -> scalodeck::Result<AugmentDraw> {
        Ok(AugmentDraw::IDENTITY)
    }
}

fn shallow_spec() -> ModelSpec {
    let mut spec = ModelSpec::new(Architecture::ShallowCnn, HeadKind::BinarySigmoid, S, T);
    spec.image_size = 16;
    spec
}

fn quick_optim(seed: u64) -> OptimConfig {
    OptimConfig {
        lr_head: 3e-3,
        epochs: 12,
        batch_size: 8,
        seed,
        ..Default::default()
    }
}

#[test]
fn shallow_cnn_learns_separable_toy() {
    let (src, labels) = Blobs::new(64, 1);
    let spec = shallow_spec();
    let mut store: ParamStore<f32> = spec.build_params(&mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
    let train_idx: Vec<usize> = (0..48).collect();
    let run = train(&spec, &mut store, &src, &labels, &train_idx, &quick_optim(3), &AugmentSpec::disabled()).unwrap();
    assert!(run.epoch_losses.last().unwrap() < &run.epoch_losses[0]);
    assert_eq!(run.lr_trace.len(), 12 * 6);
    let test_idx: Vec<usize> = (48..64).collect();
    let logits = predict_logits(&spec, &store, &src, &test_idx, 8).unwrap();
    let pred = decide(&logits);
    let truth: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    let ba = balanced_accuracy(&pred, &truth, 2).unwrap();
    assert!(ba >= 0.95, "balanced accuracy {}", ba);
}

#[test]
fn training_is_deterministic_per_seed() {
    let (src, labels) = Blobs::new(24, 2);
    let spec = shallow_spec();
    let idx: Vec<usize> = (0..24).collect();
    let run_with = |seed: u64| {
        let mut store: ParamStore<f32> = spec.build_params(&mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        let mut o = quick_optim(seed);
        o.epochs = 2;
        train(&spec, &mut store, &src, &labels, &idx, &o, &AugmentSpec::disabled()).unwrap()
    };
    let a = run_with(5);
    let b = run_with(5);
    let c = run_with(6);
    assert_eq!(a, b);
    assert_ne!(a.checkpoint_digest, c.checkpoint_digest);
}

#[test]
fn cosine_trace_decays_to_zero() {
    let (src, labels) = Blobs::new(16, 3);
    let spec = shallow_spec();
    let mut store: ParamStore<f32> = spec.build_params(&mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
    let mut o = quick_optim(0);
    o.epochs = 3;
    let run = train(&spec, &mut store, &src, &labels, &(0..16).collect::<Vec<_>>(), &o, &AugmentSpec::disabled()).unwrap();
    assert_eq!(run.lr_trace[0], o.lr_head);
    assert!(run.lr_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(*run.lr_trace.last().unwrap() > 0.0);
}

#[test]
fn real_sources_feed_both_model_families() {
    let config = ParadigmConfig::desk_scale(4);
    let rec = preprocess_recording(&generate_recording(&config, 0).unwrap(), &Default::default()).unwrap();
    let mut set = extract_epochs(&rec, WindowKind::PostCue, &EpochOptions::default()).unwrap();
    set.epochs.truncate(12);
    let labels: Vec<usize> = set.epochs.iter().map(|e| usize::from(e.meta.condition == scalodeck::synthgen::Condition::Isp)).collect();
    let idx: Vec<usize> = (0..set.len()).collect();
    let optim = OptimConfig {
        epochs: 1,
        batch_size: 6,
        ..Default::default()
    };

    let cache = CwtCache::build(&set, &MorletParams::default()).unwrap();
    let scal = ScalogramSource { cache: &cache };
    assert_eq!(scal.sample_shape(), vec![set.n_sensors(), 96, 250]);
    let mut spec = ModelSpec::new(Architecture::ShallowCnn, HeadKind::BinarySigmoid, set.n_sensors(), 250);
    spec.image_size = 32;
    let mut store: ParamStore<f32> = spec.build_params(&mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
    let run = train(&spec, &mut store, &scal, &labels, &idx, &optim, &AugmentSpec::default()).unwrap();
    assert!(run.epoch_losses[0].is_finite());

    let raw = RawEpochSource { set: &set };
    assert_eq!(raw.sample_shape(), vec![1, set.n_sensors(), 250]);
    let spec = ModelSpec::new(Architecture::EegNet, HeadKind::BinarySigmoid, set.n_sensors(), 250);
    let mut store: ParamStore<f32> = spec.build_params(&mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
    let run = train(&spec, &mut store, &raw, &labels, &idx, &optim, &AugmentSpec::default()).unwrap();
    assert!(run.epoch_losses[0].is_finite());
}

#[test]
fn empty_fold_and_bad_labels_are_rejected() {
    let (src, labels) = Blobs::new(8, 4);
    let spec = shallow_spec();
    let mut store: ParamStore<f32> = spec.build_params(&mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
    assert!(train(&spec, &mut store, &src, &labels, &[], &quick_optim(0), &AugmentSpec::disabled()).is_err());
    let bad = vec![5; 8];
    assert!(train(&spec, &mut store, &src, &bad, &[0, 1], &quick_optim(0), &AugmentSpec::disabled()).is_err());
}
