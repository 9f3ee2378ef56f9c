//! Classical decoders: shrinkage LDA on flattened time-frequency features and
//! the Riemannian tangent-space pipeline with L2 logistic regression.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autonn::{Array, ArchiveTensor, TensorArchive};
use crate::error::{Error, Result};

pub const COV_SHRINKAGE: f64 = 0.1;
pub const LDA_SHRINKAGE: f64 = 0.5;
pub const LOGREG_LAMBDA: f64 = 1.0;
pub const KARCHER_TOL: f64 = 1e-6;
pub const KARCHER_MAX_ITER: usize = 50;
pub const LOGREG_TOL: f64 = 1e-6;
pub const LOGREG_MAX_ITER: usize = 100_000;

/// Hex SHA-256 of a row-major f64 matrix and its shape.
pub fn matrix_digest(rows: usize, cols: usize, data: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update((rows as u64).to_le_bytes());
    h.update((cols as u64).to_le_bytes());
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// `(1 - gamma) * C + gamma * (tr(C) / n) * I` for the sample covariance `C`
/// of a `[sensors, T]` epoch.
pub fn epoch_covariance(epoch: &Array<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let s = epoch.shape();
    if s.len() != 2 {
        return Err(Error::shape("epoch_covariance", format!("expected [sensors, T], got {:?}", s)));
    }
    let (n, t) = (s[0], s[1]);
    if t < 2 {
        return Err(Error::InvalidInput(format!("covariance needs T > 1, got {}", t)));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("shrinkage {} outside [0, 1]", gamma)));
    }
    let mut x = DMatrix::from_row_slice(n, t, epoch.data());
    for mut row in x.row_iter_mut() {
        let m = row.mean();
        row.add_scalar_mut(-m);
    }
    let c = (&x * x.transpose()) / (t as f64 - 1.0);
    let target = c.trace() / n as f64;
    let mut out = c * (1.0 - gamma);
    for i in 0..n {
        out[(i, i)] += gamma * target;
    }
    symmetrize(&mut out);
    check_spd(&out, "epoch_covariance")?;
    Ok(out)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn check_spd(m: &DMatrix<f64>, site: &str) -> Result<()> {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{}: matrix is not square and finite", site)));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if (m - m.transpose()).iter().any(|v| v.abs() > 1e-10 * scale.max(1.0)) {
        return Err(Error::InvalidInput(format!("{}: matrix is not symmetric", site)));
    }
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::Singular(format!("{}: minimum eigenvalue {:.3e}", site, min)));
    }
    Ok(())
}

/// `V f(L) V^T` for a symmetric matrix with eigenpairs `(L, V)`.
pub fn spd_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vf = eig.eigenvectors.clone();
    for (j, mut col) in vf.column_iter_mut().enumerate() {
        col *= f(eig.eigenvalues[j]);
    }
    let mut out = vf * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

pub fn spd_log(m: &DMatrix<f64>) -> DMatrix<f64> {
    spd_map(m, f64::ln)
}

pub fn spd_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    spd_map(m, f64::exp)
}

pub fn spd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    spd_map(m, f64::sqrt)
}

pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    spd_map(m, |v| 1.0 / v.sqrt())
}

fn congruence(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a * c * a.transpose();
    symmetrize(&mut out);
    out
}

/// Affine-invariant Karcher mean by fixed-point iteration from the
/// arithmetic mean.
pub fn riemannian_mean(covs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = covs
        .first()
        .ok_or_else(|| Error::InsufficientData("Riemannian mean of an empty set".into()))?;
    let n = first.nrows();
    for c in covs {
        if c.nrows() != n {
            return Err(Error::shape("riemannian_mean", format!("{}x{} vs {}x{}", c.nrows(), c.ncols(), n, n)));
        }
        check_spd(c, "riemannian_mean")?;
    }
    let mut m = covs.iter().fold(DMatrix::zeros(n, n), |acc, c| acc + c) / covs.len() as f64;
    let mut residual = f64::INFINITY;
    for _ in 0..KARCHER_MAX_ITER {
        let half = spd_sqrt(&m);
        let ihalf = spd_inv_sqrt(&m);
        let t = covs
            .par_iter()
            .map(|c| spd_log(&congruence(&ihalf, c)))
            .reduce(|| DMatrix::zeros(n, n), |a, b| a + b)
            / covs.len() as f64;
        residual = t.norm();
        if residual < KARCHER_TOL {
            return Ok(m);
        }
        m = congruence(&half, &spd_exp(&t));
    }
    Err(Error::NonConvergence {
        iterations: KARCHER_MAX_ITER,
        residual,
    })
}

/// Upper triangle of a symmetric matrix, row by row, with off-diagonal
/// entries scaled by sqrt(2).
pub fn upper_vec(s: &DMatrix<f64>) -> Vec<f64> {
    let n = s.nrows();
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        v.push(s[(i, i)]);
        for j in i + 1..n {
            v.push(std::f64::consts::SQRT_2 * s[(i, j)]);
        }
    }
    v
}

pub fn tangent_dim(n_sensors: usize) -> usize {
    n_sensors * (n_sensors + 1) / 2
}

/// Tangent space at a reference SPD matrix.
#[derive(Debug, Clone)]
pub struct TangentSpace {
    pub reference: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    pub reference_digest: String,
}

impl TangentSpace {
    pub fn new(reference: DMatrix<f64>) -> Result<Self> {
        check_spd(&reference, "tangent reference")?;
        let inv_sqrt = spd_inv_sqrt(&reference);
        let reference_digest = matrix_digest(reference.nrows(), reference.ncols(), reference.as_slice());
        Ok(TangentSpace {
            reference,
            inv_sqrt,
            reference_digest,
        })
    }

    pub fn fit(covs: &[DMatrix<f64>]) -> Result<Self> {
        TangentSpace::new(riemannian_mean(covs)?)
    }

    /// `upper_vec(log(M^-1/2 C M^-1/2))`.
    pub fn map(&self, cov: &DMatrix<f64>) -> Result<Vec<f64>> {
        if cov.nrows() != self.reference.nrows() {
            return Err(Error::shape("tangent_map", format!("{} vs {} sensors", cov.nrows(), self.reference.nrows())));
        }
        check_spd(cov, "tangent_map")?;
        Ok(upper_vec(&spd_log(&congruence(&self.inv_sqrt, cov))))
    }

    /// Row-major `[N, n(n+1)/2]` tangent vectors.
    pub fn map_all(&self, covs: &[DMatrix<f64>]) -> Result<Array<f64>> {
        let rows = covs.par_iter().map(|c| self.map(c)).collect::<Result<Vec<_>>>()?;
        Array::from_vec(&[covs.len(), tangent_dim(self.reference.nrows())], rows.concat())
    }
}

pub fn tangent_map(cov: &DMatrix<f64>, mean: &DMatrix<f64>) -> Result<Vec<f64>> {
    TangentSpace::new(mean.clone())?.map(cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearKind {
    Lda,
    L2LogReg,
}

/// Affine scorer. Binary models hold one row (score > 0 means class 1);
/// multi-class models hold one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: LinearKind,
    pub n_classes: usize,
    /// [rows, n_features] row-major
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub regularization: f64,
    pub fit_digest: String,
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.weights.len() / self.bias.len().max(1)
    }

    /// `[N, rows]` decision values.
    pub fn decision_function(&self, x: &Array<f64>) -> Result<Array<f64>> {
        let d = self.n_features();
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(Error::shape("LinearModel::decision_function", format!("{:?} vs {} features", x.shape(), d)));
        }
        let (n, r) = (x.shape()[0], self.bias.len());
        let mut out = Vec::with_capacity(n * r);
        for row in x.data().chunks(d) {
            for (w, b) in self.weights.chunks(d).zip(&self.bias) {
                out.push(w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + b);
            }
        }
        Array::from_vec(&[n, r], out)
    }

    pub fn predict(&self, x: &Array<f64>) -> Result<Vec<usize>> {
        let s = self.decision_function(x)?;
        Ok(if self.bias.len() == 1 {
            s.data().iter().map(|&v| usize::from(v > 0.0)).collect()
        } else {
            s.argmax_rows()
        })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        let r = self.bias.len();
        a.insert("weight", ArchiveTensor::f64(&[r, self.n_features()], self.weights.clone()));
        a.insert("bias", ArchiveTensor::f64(&[r], self.bias.clone()));
        a.metadata.insert(
            "hyperparameters".into(),
            serde_json::json!({
                "kind": self.kind,
                "n_classes": self.n_classes,
                "regularization": self.regularization,
                "fit_digest": self.fit_digest,
            })
            .to_string(),
        );
        a
    }
}

fn check_xy(x: &Array<f64>, labels: &[usize], n_classes: usize, site: &'static str) -> Result<(usize, usize)> {
    if x.ndim() != 2 || x.shape()[0] != labels.len() {
        return Err(Error::shape(site, format!("features {:?} vs {} labels", x.shape(), labels.len())));
    }
    if n_classes < 2 {
        return Err(Error::Config(format!("{} needs at least 2 classes, got {}", site, n_classes)));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidInput(format!("{}: label {} outside {} classes", site, l, n_classes)));
    }
    let present = (0..n_classes).filter(|&k| labels.contains(&k)).count();
    if present < 2 {
        return Err(Error::InsufficientData(format!("{}: {} class(es) present in training data", site, present)));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite {
            site: site.into(),
            detail: "features".into(),
        });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Shrinkage LDA with equal class priors. The pooled within-class
/// covariance `S` is blended as `(1 - gamma) S + gamma (tr(S)/d) I` and
/// inverted through the Woodbury identity, so cost is quadratic in the
/// number of samples and linear in the feature count.
pub fn fit_lda(x: &Array<f64>, labels: &[usize], n_classes: usize, gamma: f64) -> Result<LinearModel> {
    let (n, d) = check_xy(x, labels, n_classes, "fit_lda")?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("LDA shrinkage {} outside (0, 1]", gamma)));
    }
    let present: Vec<usize> = (0..n_classes).filter(|&k| labels.contains(&k)).collect();
    let mut means = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in x.data().chunks(d).zip(labels) {
        counts[l] += 1;
        means[l].iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    // Within-class centred rows.
    let mut xc = DMatrix::<f64>::zeros(n, d);
    for (i, (row, &l)) in x.data().chunks(d).zip(labels).enumerate() {
        for j in 0..d {
            xc[(i, j)] = row[j] - means[l][j];
        }
    }
    let dof = (n.saturating_sub(present.len())).max(1) as f64;
    let trace = xc.iter().map(|v| v * v).sum::<f64>() / dof;
    let alpha = gamma * trace / d as f64;
    let beta = (1.0 - gamma) / dof;
    if !(alpha > 0.0) {
        return Err(Error::Singular("fit_lda: within-class scatter is zero".into()));
    }
    // (alpha I + beta Xc^T Xc)^-1 v = (v - beta Xc^T (alpha I + beta Xc Xc^T)^-1 Xc v) / alpha
    let gram = &xc * xc.transpose() * beta + DMatrix::identity(n, n) * alpha;
    let chol = Cholesky::new(gram).ok_or_else(|| Error::Singular("fit_lda: Woodbury system".into()))?;
    let solve = |v: &DVector<f64>| -> DVector<f64> {
        let inner = chol.solve(&(&xc * v));
        (v - xc.transpose() * inner * beta) / alpha
    };
    let mu: Vec<DVector<f64>> = means.iter().map(|m| DVector::from_column_slice(m)).collect();
    let (weights, bias) = if n_classes == 2 {
        let w = solve(&(&mu[1] - &mu[0]));
        let b = -0.5 * w.dot(&(&mu[0] + &mu[1]));
        (w.as_slice().to_vec(), vec![b])
    } else {
        let mut ws = Vec::with_capacity(n_classes * d);
        let mut bs = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            if counts[k] == 0 {
                ws.extend(std::iter::repeat(0.0).take(d));
                bs.push(f64::NEG_INFINITY);
                continue;
            }
            let w = solve(&mu[k]);
            bs.push(-0.5 * w.dot(&mu[k]));
            ws.extend_from_slice(w.as_slice());
        }
        (ws, bs)
    };
    Ok(LinearModel {
        kind: LinearKind::Lda,
        n_classes,
        weights,
        bias,
        regularization: gamma,
        fit_digest: matrix_digest(n, d, x.data()),
    })
}

/// Objective and gradient of mean log-loss plus `(lambda / 2) ||W||^2`
/// (biases unpenalized). Parameters are `[W (rows x d) | b (rows)]`.
pub fn logreg_objective(x: &Array<f64>, labels: &[usize], n_classes: usize, lambda: f64, theta: &[f64]) -> (f64, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let rows = if n_classes == 2 { 1 } else { n_classes };
    let (w, b) = theta.split_at(rows * d);
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; rows];
    for (row, &l) in x.data().chunks(d).zip(labels) {
        for (r, zr) in z.iter_mut().enumerate() {
            *zr = w[r * d..(r + 1) * d].iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + b[r];
        }
        // Residuals dL/dz.
        let resid: Vec<f64> = if rows == 1 {
            let y = (l == 1) as u8 as f64;
            let zz = z[0];
            // log(1 + e^z) - y z, stably.
            loss += zz.max(0.0) + (-zz.abs()).exp().ln_1p() - y * zz;
            vec![1.0 / (1.0 + (-zz).exp()) - y]
        } else {
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[l];
            z.iter().enumerate().map(|(k, v)| (v - lse).exp() - (k == l) as u8 as f64).collect()
        };
        for (r, e) in resid.iter().enumerate() {
            for (g, xv) in grad[r * d..(r + 1) * d].iter_mut().zip(row) {
                *g += e * xv;
            }
            grad[rows * d + r] += e;
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    grad.iter_mut().for_each(|g| *g *= inv);
    loss += 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    for (g, v) in grad.iter_mut().zip(w) {
        *g += lambda * v;
    }
    (loss, grad)
}

/// L2 logistic regression by full-batch gradient descent with Armijo
/// backtracking. Steps follow the gradient scaled by a fixed diagonal
/// bound on the curvature of each coordinate (penalty plus the log-loss
/// Hessian bound), and the trial step doubles after each accepted step.
pub fn fit_logreg_l2(x: &Array<f64>, labels: &[usize], n_classes: usize, lambda: f64) -> Result<LinearModel> {
    let (n, d) = check_xy(x, labels, n_classes, "fit_logreg_l2")?;
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("L2 penalty must be positive, got {}", lambda)));
    }
    let rows = if n_classes == 2 { 1 } else { n_classes };
    let bound = if rows == 1 { 0.25 } else { 0.5 };
    let mut second = vec![0.0; d];
    for row in x.data().chunks(d) {
        second.iter_mut().zip(row).for_each(|(s, v)| *s += v * v / n as f64);
    }
    let mut scale: Vec<f64> = Vec::with_capacity(rows * (d + 1));
    for _ in 0..rows {
        scale.extend(second.iter().map(|s| 1.0 / (lambda + bound * s)));
    }
    scale.extend(std::iter::repeat(1.0 / bound).take(rows));

    let mut theta = vec![0.0; rows * (d + 1)];
    let (mut f, mut g) = logreg_objective(x, labels, n_classes, lambda, &theta);
    let mut step = 1.0;
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut gnorm = norm(&g);
    let mut iter = 0;
    while gnorm >= LOGREG_TOL {
        if iter == LOGREG_MAX_ITER {
            return Err(Error::NonConvergence {
                iterations: iter,
                residual: gnorm,
            });
        }
        iter += 1;
        let dir: Vec<f64> = g.iter().zip(&scale).map(|(gi, s)| gi * s).collect();
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        loop {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, di)| t - step * di).collect();
            let (ft, gt) = logreg_objective(x, labels, n_classes, lambda, &trial);
            if ft <= f - 0.5 * step * slope {
                theta = trial;
                f = ft;
                g = gt;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                return Err(Error::NonConvergence {
                    iterations: iter,
                    residual: gnorm,
                });
            }
        }
        step *= 2.0;
        gnorm = norm(&g);
    }
    let bias = theta.split_off(rows * d);
    Ok(LinearModel {
        kind: LinearKind::L2LogReg,
        n_classes,
        weights: theta,
        bias,
        regularization: lambda,
        fit_digest: matrix_digest(n, d, x.data()),
    })
}
