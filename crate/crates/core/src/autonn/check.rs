//! Central-difference gradient checking against the reverse-mode engine.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Step used by the central differences.
pub const FD_STEP: f64 = 1e-6;

/// Vector relative error `|a - n| / max(|a|, |n|)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = l2(analytic).max(l2(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reduces a possibly non-scalar output to a scalar with fixed random weights.
fn scalarize(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).len() == 1 && g.shape(out).is_empty() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = g.value(out).len();
    let coeffs = Array::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    g.dot(out, Arc::new(coeffs))
}

fn eval(store: &ParamStore<f64>, x: &Array<f64>, seed: u64, build: &impl Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new(false, seed);
    let xv = g.input(x.clone(), false);
    let out = build(&mut g, store, xv)?;
    let loss = scalarize(&mut g, out, seed)?;
    Ok(g.value(loss).data()[0])
}

/// Relative error between the analytic gradient and central differences,
/// taken jointly over the input `x` and the trainable parameters of `store`.
///
/// `build` maps an input variable to an output; non-scalar outputs are
/// contracted with seeded random weights.
pub fn gradcheck(
    store: &ParamStore<f64>,
    x: &Array<f64>,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    gradcheck_sampled(store, x, seed, usize::MAX, build)
}

/// As [`gradcheck`], but differencing at most `per_tensor` seeded random
/// coordinates of the input and of each trainable tensor.
pub fn gradcheck_sampled(
    store: &ParamStore<f64>,
    x: &Array<f64>,
    seed: u64,
    per_tensor: usize,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut pick = |n: usize| -> Vec<usize> {
        if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut pick_rng, n, per_tensor).into_vec()
        }
    };
    let mut g = Graph::new(false, seed);
    let xv = g.input(x.clone(), true);
    let out = build(&mut g, store, xv)?;
    let loss = scalarize(&mut g, out, seed)?;
    let grads = g.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let zeros = Array::zeros(x.shape());
    let gx = grads.input(xv).unwrap_or(&zeros).data();
    for i in pick(x.len()) {
        analytic.push(gx[i]);
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let fp = eval(store, &xp, seed, &build)?;
        xp.data_mut()[i] -= 2.0 * FD_STEP;
        let fm = eval(store, &xp, seed, &build)?;
        numeric.push((fp - fm) / (2.0 * FD_STEP));
    }
    for name in store.trainable_names() {
        let value = store.value(&name)?.clone();
        let zeros = Array::zeros(value.shape());
        let gp = grads.param(&name).unwrap_or(&zeros).data();
        let mut local = store.clone();
        for i in pick(value.len()) {
            analytic.push(gp[i]);
            let mut perturbed = (*value).clone();
            perturbed.data_mut()[i] += FD_STEP;
            set(&mut local, &name, perturbed.clone())?;
            let fp = eval(&local, x, seed, &build)?;
            perturbed.data_mut()[i] -= 2.0 * FD_STEP;
            set(&mut local, &name, perturbed)?;
            let fm = eval(&local, x, seed, &build)?;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn set(store: &mut ParamStore<f64>, name: &str, value: Array<f64>) -> Result<()> {
    let p = store
        .get_mut(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    p.value = Arc::new(value);
    Ok(())
}
