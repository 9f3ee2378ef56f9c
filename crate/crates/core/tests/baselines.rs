use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use scalodeck::autonn::Array;
use scalodeck::baselines::{
    epoch_covariance, fit_lda, fit_logreg_l2, logreg_objective, riemannian_mean, tangent_map, upper_vec, TangentSpace,
    COV_SHRINKAGE, LDA_SHRINKAGE,
};
use scalodeck::preproc::{extract_epochs, preprocess_recording, EpochOptions, WindowKind};
use scalodeck::synthgen::{generate_recording, ParadigmConfig};

/// Cyclic Jacobi eigendecomposition: (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut r = DMatrix::<f64>::identity(n, n);
                r[(p, p)] = c;
                r[(q, q)] = c;
                r[(p, q)] = s;
                r[(q, p)] = -s;
                a = r.transpose() * &a * &r;
                v = &v * &r;
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

fn jacobi_log(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = jacobi_eigen(a);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|v| v.ln())));
    &vecs * d * vecs.transpose()
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n + 3, |_, _| StandardNormal.sample(rng));
    &g * g.transpose() / (n as f64 + 3.0) + DMatrix::identity(n, n) * 0.1
}

#[test]
fn tangent_at_identity_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 4, 6] {
        let c = random_spd(n, &mut rng);
        let got = tangent_map(&c, &DMatrix::identity(n, n)).unwrap();
        let log = jacobi_log(&c);
        let mut want = Vec::new();
        for i in 0..n {
            for j in i..n {
                want.push(if i == j { log[(i, j)] } else { std::f64::consts::SQRT_2 * log[(i, j)] });
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
        let fro = log.norm();
        let vnorm = got.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((fro - vnorm).abs() < 1e-9);
    }
}

#[test]
fn commuting_diagonal_mean_is_geometric() {
    let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0]));
    let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0]));
    let m = riemannian_mean(&[a, b]).unwrap();
    let want = DMatrix::identity(2, 2) * 2.0;
    assert!((m - want).norm() < 1e-6);
}

#[test]
fn tangent_vectors_at_the_mean_average_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let covs: Vec<_> = (0..12).map(|_| random_spd(4, &mut rng)).collect();
    let ts = TangentSpace::fit(&covs).unwrap();
    let v = ts.map_all(&covs).unwrap();
    for j in 0..10 {
        let m: f64 = v.data().iter().skip(j).step_by(10).sum::<f64>() / 12.0;
        assert!(m.abs() < 1e-6);
    }
    assert!(ts.map(&ts.reference).unwrap().iter().all(|x| x.abs() < 1e-10));
}

#[test]
fn karcher_mean_is_congruence_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let covs: Vec<_> = (0..8).map(|_| random_spd(4, &mut rng)).collect();
    let g = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.5 } else { 0.0 } + rng.gen_range(-0.5..0.5));
    let moved: Vec<_> = covs.iter().map(|c| &g * c * g.transpose()).collect();
    let m = riemannian_mean(&covs).unwrap();
    let mg = riemannian_mean(&moved).unwrap();
    let gi = g.clone().try_inverse().unwrap();
    let back = &gi * mg * gi.transpose();
    assert!((&back - &m).norm() < 1e-6 * m.norm().max(1.0));
}

#[test]
fn synthetic_epoch_covariances_are_spd() {
    let config = ParadigmConfig::desk_scale(9);
    let rec = preprocess_recording(&generate_recording(&config, 1).unwrap(), &Default::default()).unwrap();
    let set = extract_epochs(&rec, WindowKind::Full, &EpochOptions::default()).unwrap();
    for e in &set.epochs {
        let c = epoch_covariance(&e.core(0).unwrap(), COV_SHRINKAGE).unwrap();
        let min = nalgebra::SymmetricEigen::new(c).eigenvalues.min();
        assert!(min > 0.0);
    }
}

#[test]
fn lda_separates_far_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (60, 200);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let k = i % 3;
        for j in 0..d {
            let centre = if j % 3 == k { 6.0 } else { 0.0 };
            data.push(centre + Distribution::<f64>::sample(&StandardNormal, &mut rng));
        }
        labels.push(k);
    }
    let x = Array::from_vec(&[n, d], data).unwrap();
    let m = fit_lda(&x, &labels, 3, LDA_SHRINKAGE).unwrap();
    assert_eq!(m.predict(&x).unwrap(), labels);
    let bin: Vec<usize> = labels.iter().map(|&l| usize::from(l == 1)).collect();
    let m2 = fit_lda(&x, &bin, 2, LDA_SHRINKAGE).unwrap();
    assert_eq!(m2.predict(&x).unwrap(), bin);
}

/// Newton's method on the same objective: independent second-order oracle.
fn newton_logreg(x: &Array<f64>, labels: &[usize], lambda: f64) -> Vec<f64> {
    let d = x.shape()[1];
    let mut theta = vec![0.0; d + 1];
    for _ in 0..100 {
        let (_, g) = logreg_objective(x, labels, 2, lambda, &theta);
        let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
        let n = x.shape()[0] as f64;
        for row in x.data().chunks(d) {
            let z: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() + theta[d];
            let p = 1.0 / (1.0 + (-z).exp());
            let xa: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..=d {
                for j in 0..=d {
                    h[(i, j)] += p * (1.0 - p) * xa[i] * xa[j] / n;
                }
            }
        }
        for i in 0..d {
            h[(i, i)] += lambda;
        }
        let step = h.lu().solve(&nalgebra::DVector::from_vec(g)).unwrap();
        theta.iter_mut().zip(step.iter()).for_each(|(t, s)| *t -= s);
    }
    theta
}

#[test]
fn logreg_matches_newton_on_two_points() {
    let x = Array::from_vec(&[2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
    let labels = [1, 0];
    let m = fit_logreg_l2(&x, &labels, 2, 1.0).unwrap();
    let oracle = newton_logreg(&x, &labels, 1.0);
    let got: Vec<f64> = m.weights.iter().chain(&m.bias).copied().collect();
    for (a, b) in got.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-5, "{:?} vs {:?}", got, oracle);
    }
}

#[test]
fn logreg_matches_newton_on_random_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Array::from_vec(&[40, 3], (0..120).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
    let labels: Vec<usize> = x.data().chunks(3).map(|r| usize::from(r[0] - r[2] + 0.3 > 0.0)).collect();
    let m = fit_logreg_l2(&x, &labels, 2, 0.05).unwrap();
    let oracle = newton_logreg(&x, &labels, 0.05);
    let got: Vec<f64> = m.weights.iter().chain(&m.bias).copied().collect();
    for (a, b) in got.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn upper_vec_preserves_frobenius_norm(vals in prop::collection::vec(-3.0f64..3.0, 15)) {
        let mut s = DMatrix::<f64>::zeros(5, 5);
        let mut it = vals.iter();
        for i in 0..5 {
            for j in i..5 {
                let v = *it.next().unwrap();
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        let v = upper_vec(&s);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - s.norm()).abs() < 1e-12);
    }

    #[test]
    fn covariances_are_symmetric_positive(seed in 0u64..500, gamma in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array::from_vec(&[4, 6], (0..24).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let c = epoch_covariance(&x, gamma).unwrap();
        prop_assert!((&c - c.transpose()).norm() <= 1e-10);
        prop_assert!(nalgebra::SymmetricEigen::new(c).eigenvalues.min() > 0.0);
    }
}
