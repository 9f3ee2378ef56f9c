//! Finite-difference checks of every differentiable primitive and of the
//! composed image path, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalodeck::autonn::check::{gradcheck, gradcheck_sampled};
use scalodeck::autonn::{eegnet, resnet, Architecture, Array, ConvGeom, Graph, HeadKind, ModelSpec, ParamKind, ParamStore, Var};
use scalodeck::Result;

const TOL: f64 = 1e-4;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn store_with(rng: &mut ChaCha8Rng, entries: &[(&str, &[usize], ParamKind)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape, kind) in entries {
        let mut v = rand_array(rng, shape);
        if name.ends_with("running_var") {
            v = v.map(|x| 0.5 + x.abs());
        }
        s.insert(*name, v, *kind);
    }
    s
}

fn assert_grad(
    store: &ParamStore<f64>,
    x: &Array<f64>,
    what: &str,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>,
) {
    let err = gradcheck(store, x, 11, build).unwrap();
    assert!(err < TOL, "{}: relative error {:.3e}", what, err);
}

#[test]
fn conv2d_strided_padded_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = store_with(&mut rng, &[("w", &[4, 3, 3, 3], ParamKind::Weight), ("b", &[4], ParamKind::Bias)]);
    let x = rand_array(&mut rng, &[2, 3, 7, 6]);
    assert_grad(&store, &x, "conv2d", |g, s, x| {
        let w = g.param(s, "w")?;
        let b = g.param(s, "b")?;
        g.conv2d(x, w, Some(b), ConvGeom::new(2, 1))
    });
}

#[test]
fn conv2d_even_kernel_same_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = store_with(&mut rng, &[("w", &[2, 2, 1, 4], ParamKind::Weight)]);
    let x = rand_array(&mut rng, &[1, 2, 3, 9]);
    assert_grad(&store, &x, "conv2d same", |g, s, x| {
        let w = g.param(s, "w")?;
        g.conv2d(x, w, None, ConvGeom::same(1, 4))
    });
}

#[test]
fn depthwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = store_with(&mut rng, &[("w", &[6, 1, 3, 1], ParamKind::Weight)]);
    let x = rand_array(&mut rng, &[2, 3, 3, 5]);
    assert_grad(&store, &x, "depthwise conv", |g, s, x| {
        let w = g.param(s, "w")?;
        g.conv2d(x, w, None, ConvGeom::new(1, 0).with_groups(3))
    });
}

#[test]
fn linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = store_with(&mut rng, &[("w", &[3, 5], ParamKind::Weight), ("b", &[3], ParamKind::Bias)]);
    let x = rand_array(&mut rng, &[4, 5]);
    assert_grad(&store, &x, "linear", |g, s, x| {
        let w = g.param(s, "w")?;
        let b = g.param(s, "b")?;
        g.linear(x, w, Some(b))
    });
}

#[test]
fn channel_mix_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = store_with(&mut rng, &[("proj.weight", &[3, 5], ParamKind::Weight), ("proj.bias", &[3], ParamKind::Bias)]);
    let x = rand_array(&mut rng, &[2, 5, 4, 3]);
    assert_grad(&store, &x, "channel_mix", |g, s, x| {
        let w = g.param(s, "proj.weight")?;
        let b = g.param(s, "proj.bias")?;
        g.channel_mix(x, w, Some(b))
    });
}

#[test]
fn batch_norm_inference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let store = store_with(
        &mut rng,
        &[
            ("bn.weight", &[3], ParamKind::NormAffine),
            ("bn.bias", &[3], ParamKind::NormAffine),
            ("bn.running_mean", &[3], ParamKind::Buffer),
            ("bn.running_var", &[3], ParamKind::Buffer),
        ],
    );
    let x = rand_array(&mut rng, &[2, 3, 2, 2]);
    assert_grad(&store, &x, "batch_norm", |g, s, x| {
        let gamma = g.param(s, "bn.weight")?;
        let beta = g.param(s, "bn.bias")?;
        let m = g.param(s, "bn.running_mean")?;
        let v = g.param(s, "bn.running_var")?;
        g.batch_norm(x, gamma, beta, m, v, 1e-5)
    });
}

#[test]
fn elementwise_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = ParamStore::new();
    // Keep inputs away from the kink at zero.
    let x = rand_array(&mut rng, &[3, 7]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    assert_grad(&store, &x, "relu", |g, _, x| Ok(g.relu(x)));
    assert_grad(&store, &x, "elu", |g, _, x| Ok(g.elu(x, 1.0)));
}

#[test]
fn pooling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let store = ParamStore::new();
    let x = rand_array(&mut rng, &[2, 2, 6, 7]);
    assert_grad(&store, &x, "max_pool2d", |g, _, x| g.max_pool2d(x, 3, 2, 1));
    assert_grad(&store, &x, "avg_pool2d", |g, _, x| g.avg_pool2d(x, 2, 3));
    assert_grad(&store, &x, "global_avg_pool", |g, _, x| g.global_avg_pool(x));
}

#[test]
fn residual_add_and_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let store = store_with(&mut rng, &[("w", &[2, 2, 1, 1], ParamKind::Weight)]);
    let x = rand_array(&mut rng, &[1, 2, 3, 3]);
    assert_grad(&store, &x, "add", |g, s, x| {
        let w = g.param(s, "w")?;
        let h = g.conv2d(x, w, None, ConvGeom::new(1, 0))?;
        let y = g.add(h, x)?;
        g.reshape(y, &[1, 18])
    });
}

#[test]
fn dropout_in_training_mode_is_a_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let store = ParamStore::new();
    let x = rand_array(&mut rng, &[4, 6]);
    // gradcheck evaluates in inference mode, where dropout is the identity.
    assert_grad(&store, &x, "dropout-off", |g, _, x| Ok(g.dropout(x, 0.5)));
    // In training mode the same seed reproduces the mask and the gradient is the mask.
    let mut g = Graph::new(true, 5);
    let xv = g.input(x.clone(), true);
    let y = g.dropout(xv, 0.5);
    let coeffs = std::sync::Arc::new(Array::full(&[4, 6], 1.0));
    let loss = g.dot(y, coeffs).unwrap();
    let grads = g.backward(loss).unwrap();
    let gx = grads.input(xv).unwrap();
    for (gi, (yi, xi)) in gx.data().iter().zip(g.value(y).data().iter().zip(x.data())) {
        assert!((gi * xi - yi).abs() < 1e-12);
    }
}

#[test]
fn resize_and_standardize() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let store = ParamStore::new();
    let x = rand_array(&mut rng, &[2, 3, 5, 4]);
    assert_grad(&store, &x, "resize up", |g, _, x| g.resize_bilinear(x, 9, 11));
    assert_grad(&store, &x, "resize down", |g, _, x| g.resize_bilinear(x, 3, 2));
    assert_grad(&store, &x, "standardize", |g, _, x| g.standardize(x));
}

#[test]
fn weighted_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let store = ParamStore::new();
    let z3 = rand_array(&mut rng, &[5, 3]).map(|v| 3.0 * v);
    assert_grad(&store, &z3, "softmax_ce", |g, _, x| {
        g.softmax_cross_entropy(x, &[0, 2, 1, 1, 0], &[0.7, 1.9, 0.4])
    });
    let z1 = rand_array(&mut rng, &[6, 1]).map(|v| 4.0 * v);
    assert_grad(&store, &z1, "sigmoid_bce", |g, _, x| g.sigmoid_bce(x, &[0, 1, 1, 0, 1, 0], &[1.3, 0.7]));
}

#[test]
fn single_linear_layer_squared_loss_closed_form() {
    // L = 0.5 * |W x - t|^2  =>  dL/dW = (W x - t) x^T.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = rand_array(&mut rng, &[2, 3]);
    let x = rand_array(&mut rng, &[1, 3]);
    let t = [0.3, -0.8];
    let mut store = ParamStore::new();
    store.insert("w", w.clone(), ParamKind::Weight);
    let mut g = Graph::new(false, 0);
    let xv = g.input(x.clone(), false);
    let wv = g.param(&store, "w").unwrap();
    let y = g.linear(xv, wv, None).unwrap();
    // 0.5|y - t|^2 has gradient (y - t); feed it through a dot probe.
    let resid: Vec<f64> = g.value(y).data().iter().zip(t).map(|(a, b)| a - b).collect();
    let probe = std::sync::Arc::new(Array::from_vec(&[1, 2], resid.clone()).unwrap());
    let loss = g.dot(y, probe).unwrap();
    let grads = g.backward(loss).unwrap();
    let gw = grads.param("w").unwrap();
    for i in 0..2 {
        for j in 0..3 {
            let want = resid[i] * x.data()[j];
            assert!((gw.data()[i * 3 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn eegnet_depthwise_separable_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let store = eegnet::init_params::<f64>(3, 64, 1, &mut rng).unwrap();
    let x = rand_array(&mut rng, &[1, eegnet::F1, 3, 64]);
    let mut local = ParamStore::new();
    for (name, p) in store.iter() {
        if !name.starts_with("temporal") && !name.starts_with("bn1") && !name.starts_with("fc") {
            local.insert(name.clone(), (*p.value).clone(), p.kind);
        }
    }
    assert_grad(&local, &x, "eegnet depthwise+separable", |g, s, x| eegnet::depthwise_separable(g, s, x));
}

fn randomize_block_scales(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    // Non-trivial residual-branch scales so every branch carries gradient.
    let names: Vec<String> = store.names().filter(|n| n.ends_with("bn2.weight")).cloned().collect();
    for name in names {
        let shape = store.value(&name).unwrap().shape().to_vec();
        store.get_mut(&name).unwrap().value = std::sync::Arc::new(rand_array(rng, &shape));
    }
}

#[test]
fn resnet_stage4_and_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = resnet::init_params::<f64>(3, &mut rng);
    randomize_block_scales(&mut store, &mut rng);
    store.apply_freeze(&resnet::PARTIAL_FT_FROZEN);
    let x = rand_array(&mut rng, &[1, 256, 2, 2]);
    let err = gradcheck_sampled(&store, &x, 3, 6, |g, s, x| resnet::forward_stage4_head(g, s, x)).unwrap();
    assert!(err < TOL, "relative error {:.3e}", err);
}

#[test]
fn composed_projection_resize_standardize_resnet() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut spec = ModelSpec::new(Architecture::ResNet18, HeadKind::Softmax3, 4, 0);
    spec.image_size = 16;
    let mut store = spec.build_params::<f64>(&mut rng, None).unwrap();
    randomize_block_scales(&mut store, &mut rng);
    let x = rand_array(&mut rng, &[1, 4, 6, 8]);
    let err = gradcheck_sampled(&store, &x, 5, 4, |g, s, x| spec.forward(g, s, x)).unwrap();
    assert!(err < TOL, "relative error {:.3e}", err);
}
