//! ResNet-18 with torchvision tensor names and inference-mode batch norm.

use rand::Rng;

use super::array::{Array, Scalar};
use super::conv::ConvGeom;
use super::graph::{Graph, Var};
use super::params::{fan_in_bound, kaiming_normal_fan_out, uniform, ParamKind, ParamStore};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const FEATURE_DIM: usize = 512;
pub const IMAGENET_CLASSES: usize = 1000;
const WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Name prefixes frozen by partial fine-tuning: stem and stages 1-3.
pub const PARTIAL_FT_FROZEN: [&str; 5] = ["conv1.", "bn1.", "layer1.", "layer2.", "layer3."];

/// One entry of the canonical tensor list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

fn push(m: &mut Vec<ManifestEntry>, name: String, shape: &[usize], kind: ParamKind) {
    m.push(ManifestEntry {
        name,
        shape: shape.to_vec(),
        kind,
    });
}

fn push_bn(m: &mut Vec<ManifestEntry>, prefix: &str, c: usize) {
    push(m, format!("{}.weight", prefix), &[c], ParamKind::NormAffine);
    push(m, format!("{}.bias", prefix), &[c], ParamKind::NormAffine);
    push(m, format!("{}.running_mean", prefix), &[c], ParamKind::Buffer);
    push(m, format!("{}.running_var", prefix), &[c], ParamKind::Buffer);
}

/// Backbone tensors in canonical order, without the classification layer.
pub fn backbone_manifest() -> Vec<ManifestEntry> {
    let mut m = Vec::new();
    push(&mut m, "conv1.weight".into(), &[64, 3, 7, 7], ParamKind::Weight);
    push_bn(&mut m, "bn1", 64);
    let mut c_in = 64;
    for (s, &c) in WIDTHS.iter().enumerate() {
        for b in 0..2 {
            let p = format!("layer{}.{}", s + 1, b);
            let block_in = if b == 0 { c_in } else { c };
            push(&mut m, format!("{}.conv1.weight", p), &[c, block_in, 3, 3], ParamKind::Weight);
            push_bn(&mut m, &format!("{}.bn1", p), c);
            push(&mut m, format!("{}.conv2.weight", p), &[c, c, 3, 3], ParamKind::Weight);
            push_bn(&mut m, &format!("{}.bn2", p), c);
            if b == 0 && s > 0 {
                push(&mut m, format!("{}.downsample.0.weight", p), &[c, block_in, 1, 1], ParamKind::Weight);
                push_bn(&mut m, &format!("{}.downsample.1", p), c);
            }
        }
        c_in = c;
    }
    m
}

/// Full tensor list with an `n_outputs`-way `fc` layer.
pub fn manifest(n_outputs: usize) -> Vec<ManifestEntry> {
    let mut m = backbone_manifest();
    push(&mut m, "fc.weight".into(), &[n_outputs, FEATURE_DIM], ParamKind::Weight);
    push(&mut m, "fc.bias".into(), &[n_outputs], ParamKind::Bias);
    m
}

/// Learnable element count of a manifest (buffers excluded).
pub fn parameter_count(m: &[ManifestEntry]) -> usize {
    m.iter()
        .filter(|e| e.kind != ParamKind::Buffer)
        .map(|e| e.shape.iter().product::<usize>())
        .sum()
}

/// Random initialization: He-normal convs, unit batch-norm, fan-in uniform
/// classifier. The second batch norm of every residual block starts at zero
/// scale, so each block is the identity map at initialization.
pub fn init_params<T: Scalar>(n_outputs: usize, rng: &mut impl Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for e in manifest(n_outputs) {
        let value = match (e.kind, e.name.as_str()) {
            (ParamKind::Weight, n) if n.starts_with("fc.") => uniform(&e.shape, fan_in_bound(&e.shape), rng),
            (ParamKind::Weight, _) => kaiming_normal_fan_out(&e.shape, rng),
            (ParamKind::Bias, _) => uniform(&e.shape, fan_in_bound(&[n_outputs, FEATURE_DIM]), rng),
            (ParamKind::NormAffine, n) if n.ends_with(".bn2.weight") => Array::zeros(&e.shape),
            (ParamKind::NormAffine, n) if n.ends_with(".weight") => Array::full(&e.shape, T::one()),
            (ParamKind::NormAffine, _) => Array::zeros(&e.shape),
            (ParamKind::Buffer, n) if n.ends_with("running_var") => Array::full(&e.shape, T::one()),
            (ParamKind::Buffer, _) => Array::zeros(&e.shape),
        };
        store.insert(e.name, value, e.kind);
    }
    store
}

pub(crate) fn conv<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = g.param(store, &format!("{}.weight", name))?;
    let bias_name = format!("{}.bias", name);
    let b = match store.get(&bias_name) {
        Some(_) => Some(g.param(store, &bias_name)?),
        None => None,
    };
    g.conv2d(x, w, b, geom)
}

pub(crate) fn batch_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{}.weight", prefix))?;
    let beta = g.param(store, &format!("{}.bias", prefix))?;
    let mean = g.param(store, &format!("{}.running_mean", prefix))?;
    let var = g.param(store, &format!("{}.running_var", prefix))?;
    g.batch_norm(x, gamma, beta, mean, var, BN_EPS)
}

fn basic_block<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &str, x: Var, stride: usize, downsample: bool) -> Result<Var> {
    let h = conv(g, store, &format!("{}.conv1", p), x, ConvGeom::new(stride, 1))?;
    let h = batch_norm(g, store, &format!("{}.bn1", p), h)?;
    let h = g.relu(h);
    let h = conv(g, store, &format!("{}.conv2", p), h, ConvGeom::new(1, 1))?;
    let h = batch_norm(g, store, &format!("{}.bn2", p), h)?;
    let skip = if downsample {
        let s = conv(g, store, &format!("{}.downsample.0", p), x, ConvGeom::new(stride, 0))?;
        batch_norm(g, store, &format!("{}.downsample.1", p), s)?
    } else {
        x
    };
    let y = g.add(h, skip)?;
    Ok(g.relu(y))
}

/// Stem through stage 3: [N, 3, H, W] -> [N, 256, H/16, W/16].
pub fn forward_stem_to_stage3<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = conv(g, store, "conv1", x, ConvGeom::new(2, 3))?;
    let h = batch_norm(g, store, "bn1", h)?;
    let h = g.relu(h);
    let mut h = g.max_pool2d(h, 3, 2, 1)?;
    for s in 1..=3 {
        h = forward_stage(g, store, s, h)?;
    }
    Ok(h)
}

pub fn forward_stage<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, stage: usize, x: Var) -> Result<Var> {
    let stride = if stage == 1 { 1 } else { 2 };
    let h = basic_block(g, store, &format!("layer{}.0", stage), x, stride, stage > 1)?;
    basic_block(g, store, &format!("layer{}.1", stage), h, 1, false)
}

/// Stage 4, global pooling and the `fc` layer: [N, 256, h, w] -> [N, n_outputs].
pub fn forward_stage4_head<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = forward_stage(g, store, 4, x)?;
    let h = g.global_avg_pool(h)?;
    let w = g.param(store, "fc.weight")?;
    let b = g.param(store, "fc.bias")?;
    g.linear(h, w, Some(b))
}

/// [N, 3, H, W] -> [N, n_outputs] logits.
pub fn forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = forward_stem_to_stage3(g, store, x)?;
    forward_stage4_head(g, store, h)
}

/// [N, 3, H, W] -> [N, 512] pooled features.
pub fn features<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = forward_stem_to_stage3(g, store, x)?;
    let h = forward_stage(g, store, 4, h)?;
    g.global_avg_pool(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn imagenet_head_parameter_count() {
        assert_eq!(parameter_count(&manifest(IMAGENET_CLASSES)), 11_689_512);
    }

    #[test]
    fn manifest_names_are_unique() {
        let m = manifest(IMAGENET_CLASSES);
        let mut names: Vec<_> = m.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), m.len());
        assert_eq!(m.iter().filter(|e| e.name.contains("downsample")).count(), 3 * 5);
    }

    #[test]
    fn feature_vector_has_512_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = init_params::<f32>(2, &mut rng);
        let mut g = Graph::new(false, 0);
        let x = g.input(Array::zeros(&[1, 3, 224, 224]), false);
        let f = features(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(f), &[1, 512]);
    }
}
