//! Three conv/pool stages and a linear classifier over image tensors.

use rand::Rng;

use super::array::Scalar;
use super::conv::ConvGeom;
use super::graph::{Graph, Var};
use super::params::{fan_in_bound, uniform, ParamKind, ParamStore};
use super::resnet::conv;
use crate::error::{Error, Result};

pub const WIDTHS: [usize; 3] = [32, 64, 128];
pub const DROPOUT: f64 = 0.3;

/// Spatial size after the three 2x2 pools.
fn pooled(image_size: usize) -> usize {
    image_size / 8
}

pub fn init_params<T: Scalar>(image_size: usize, n_outputs: usize, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    if pooled(image_size) == 0 {
        return Err(Error::Config(format!("image size {} too small for three 2x2 pools", image_size)));
    }
    let mut store = ParamStore::new();
    let mut c_in = 3;
    for (i, &c) in WIDTHS.iter().enumerate() {
        let shape = [c, c_in, 3, 3];
        let bound = fan_in_bound(&shape);
        store.insert(format!("conv{}.weight", i + 1), uniform::<T>(&shape, bound, rng), ParamKind::Weight);
        store.insert(format!("conv{}.bias", i + 1), uniform::<T>(&[c], bound, rng), ParamKind::Bias);
        c_in = c;
    }
    let p = pooled(image_size);
    let shape = [n_outputs, WIDTHS[2] * p * p];
    let bound = fan_in_bound(&shape);
    store.insert("fc.weight", uniform::<T>(&shape, bound, rng), ParamKind::Weight);
    store.insert("fc.bias", uniform::<T>(&[n_outputs], bound, rng), ParamKind::Bias);
    Ok(store)
}

/// [N, 3, H, W] -> [N, n_outputs] logits.
pub fn forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 1..=WIDTHS.len() {
        h = conv(g, store, &format!("conv{}", i), h, ConvGeom::new(1, 1))?;
        h = g.relu(h);
        h = g.max_pool2d(h, 2, 2, 0)?;
    }
    let h = g.dropout(h, DROPOUT);
    let n = g.shape(h)[0];
    let flat: usize = g.shape(h)[1..].iter().product();
    let h = g.reshape(h, &[n, flat])?;
    let w = g.param(store, "fc.weight")?;
    let b = g.param(store, "fc.bias")?;
    g.linear(h, w, Some(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonn::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_width_follows_task() {
        for n_out in [1, 3] {
            let store = init_params::<f32>(32, n_out, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let mut g = Graph::new(false, 0);
            let x = g.input(Array::full(&[2, 3, 32, 32], 0.5), false);
            let y = forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[2, n_out]);
        }
    }

    #[test]
    fn every_parameter_is_trainable() {
        let store = init_params::<f32>(32, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(store.trainable_names().len(), store.len());
    }

    #[test]
    fn evaluation_passes_are_identical() {
        let store = init_params::<f32>(16, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let run = |seed| {
            let mut g = Graph::new(false, seed);
            let x = g.input(Array::full(&[1, 3, 16, 16], 0.25), false);
            let y = forward(&mut g, &store, x).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(1), run(2));
    }
}
