//! EEGNet-8,2 over raw epochs shaped [N, 1, sensors, T].

use rand::Rng;

use super::array::{Array, Scalar};
use super::conv::ConvGeom;
use super::graph::{Graph, Var};
use super::params::{fan_in_bound, uniform, ParamKind, ParamStore};
use super::resnet::{batch_norm, conv};
use crate::error::{Error, Result};

pub const F1: usize = 8;
pub const DEPTH: usize = 2;
pub const F2: usize = 16;
pub const TEMPORAL_KERNEL: usize = 64;
pub const SEPARABLE_KERNEL: usize = 16;
pub const DROPOUT: f64 = 0.25;
pub const ELU_ALPHA: f64 = 1.0;
/// Per-filter L2 bound on the depthwise spatial weights.
pub const SPATIAL_MAX_NORM: f64 = 1.0;

pub fn feature_len(n_times: usize) -> usize {
    F2 * (n_times / 4 / 8)
}

fn bn_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert(format!("{}.weight", prefix), Array::full(&[c], T::one()), ParamKind::NormAffine);
    store.insert(format!("{}.bias", prefix), Array::zeros(&[c]), ParamKind::NormAffine);
    store.insert(format!("{}.running_mean", prefix), Array::zeros(&[c]), ParamKind::Buffer);
    store.insert(format!("{}.running_var", prefix), Array::full(&[c], T::one()), ParamKind::Buffer);
}

pub fn init_params<T: Scalar>(n_sensors: usize, n_times: usize, n_outputs: usize, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    if n_times < TEMPORAL_KERNEL {
        return Err(Error::Config(format!(
            "EEGNet temporal kernel {} is longer than the {}-sample signal",
            TEMPORAL_KERNEL, n_times
        )));
    }
    if n_sensors == 0 || feature_len(n_times) == 0 {
        return Err(Error::Config(format!("EEGNet needs sensors and T >= 32, got {}x{}", n_sensors, n_times)));
    }
    let mut store = ParamStore::new();
    let mut weight = |store: &mut ParamStore<T>, name: &str, shape: &[usize]| {
        let v = uniform::<T>(shape, fan_in_bound(shape), rng);
        store.insert(name, v, ParamKind::Weight);
    };
    weight(&mut store, "temporal.weight", &[F1, 1, 1, TEMPORAL_KERNEL]);
    bn_params(&mut store, "bn1", F1);
    weight(&mut store, "spatial.weight", &[F1 * DEPTH, 1, n_sensors, 1]);
    bn_params(&mut store, "bn2", F1 * DEPTH);
    weight(&mut store, "separable_depth.weight", &[F1 * DEPTH, 1, 1, SEPARABLE_KERNEL]);
    weight(&mut store, "separable_point.weight", &[F2, F1 * DEPTH, 1, 1]);
    bn_params(&mut store, "bn3", F2);
    weight(&mut store, "fc.weight", &[n_outputs, feature_len(n_times)]);
    let bound = fan_in_bound(&[n_outputs, feature_len(n_times)]);
    store.insert("fc.bias", uniform::<T>(&[n_outputs], bound, rng), ParamKind::Bias);
    store
        .get_mut("spatial.weight")
        .expect("inserted above")
        .max_norm = Some(SPATIAL_MAX_NORM);
    Ok(store)
}

/// [N, 1, S, T] -> [N, n_outputs] logits.
pub fn forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let t = g.shape(x).get(3).copied().unwrap_or(0);
    if t < TEMPORAL_KERNEL {
        return Err(Error::shape("eegnet", format!("input {:?} shorter than the temporal kernel", g.shape(x))));
    }
    let h = conv(g, store, "temporal", x, ConvGeom::same(1, TEMPORAL_KERNEL))?;
    let h = batch_norm(g, store, "bn1", h)?;
    let h = depthwise_separable(g, store, h)?;
    let n = g.shape(h)[0];
    let flat: usize = g.shape(h)[1..].iter().product();
    let h = g.reshape(h, &[n, flat])?;
    let w = g.param(store, "fc.weight")?;
    let b = g.param(store, "fc.bias")?;
    g.linear(h, w, Some(b))
}

/// Depthwise spatial conv through the second pooling: [N, F1, S, T] -> [N, F2, 1, T/32].
pub fn depthwise_separable<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = conv(g, store, "spatial", x, ConvGeom::new(1, 0).with_groups(F1))?;
    let h = batch_norm(g, store, "bn2", h)?;
    let h = g.elu(h, ELU_ALPHA);
    let h = g.avg_pool2d(h, 1, 4)?;
    let h = g.dropout(h, DROPOUT);
    let h = conv(g, store, "separable_depth", h, ConvGeom::same(1, SEPARABLE_KERNEL).with_groups(F1 * DEPTH))?;
    let h = conv(g, store, "separable_point", h, ConvGeom::new(1, 0))?;
    let h = batch_norm(g, store, "bn3", h)?;
    let h = g.elu(h, ELU_ALPHA);
    let h = g.avg_pool2d(h, 1, 8)?;
    Ok(g.dropout(h, DROPOUT))
}
