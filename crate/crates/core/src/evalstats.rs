//! Cross-validation plans, balanced accuracy, bootstrap intervals and the
//! hypothesis tests used to compare decoders.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const SAP_FOLDS: usize = 10;
pub const N_BOOT: usize = 10_000;
pub const N_PERM: usize = 10_000;
/// Largest number of nonzero differences for the exact Wilcoxon null.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Sap,
    Loso,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Sap => "sap",
            Protocol::Loso => "loso",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sap" => Ok(Protocol::Sap),
            "loso" => Ok(Protocol::Loso),
            other => Err(Error::Config(format!("unknown protocol `{}` (expected sap, loso)", other))),
        }
    }
}

/// Grouping and stratification keys of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleKey {
    pub subject_id: usize,
    pub trial_id: u64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    /// SAP: no trial id on both sides of a fold. LOSO: no subject on both
    /// sides. Both: test sets partition the samples.
    pub fn audit(&self, keys: &[SampleKey]) -> Result<()> {
        let mut seen = vec![false; keys.len()];
        for fold in &self.folds {
            let group = |i: usize| match self.protocol {
                Protocol::Sap => keys[i].trial_id,
                Protocol::Loso => keys[i].subject_id as u64,
            };
            let test: BTreeSet<u64> = fold.test.iter().map(|&i| group(i)).collect();
            if let Some(&i) = fold.train.iter().find(|&&i| test.contains(&group(i))) {
                return Err(Error::Leakage(format!(
                    "{} fold {}: group {} of sample {} is in train and test",
                    self.protocol,
                    fold.id,
                    group(i),
                    i
                )));
            }
            for &i in &fold.test {
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Leakage(format!("sample {} tested in more than one fold", i)));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("sample {} is never tested", i)));
        }
        Ok(())
    }
}

fn folds_from_assignment(keys: &[SampleKey], n_folds: usize, fold_of: impl Fn(&SampleKey) -> usize) -> Vec<Fold> {
    let mut folds: Vec<Fold> = (0..n_folds)
        .map(|id| Fold {
            id,
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for (i, k) in keys.iter().enumerate() {
        let f = fold_of(k);
        for (j, fold) in folds.iter_mut().enumerate() {
            if j == f {
                fold.test.push(i);
            } else {
                fold.train.push(i);
            }
        }
    }
    folds
}

/// Stratified k-fold over trials. Each trial is labelled by the majority
/// label of its epochs (ties to the smaller label); trials of each label
/// are shuffled and dealt round-robin, the dealing position carrying over
/// between labels.
pub fn split_sap(keys: &[SampleKey], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("SAP needs at least 2 folds, got {}", k)));
    }
    let mut votes: BTreeMap<u64, BTreeMap<usize, usize>> = BTreeMap::new();
    for key in keys {
        *votes.entry(key.trial_id).or_default().entry(key.label).or_default() += 1;
    }
    if votes.len() < k {
        return Err(Error::InsufficientData(format!("{} trials for {} folds", votes.len(), k)));
    }
    let mut strata: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (trial, v) in &votes {
        let best = v.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(l, _)| *l).unwrap_or(0);
        strata.entry(best).or_default().push(*trial);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of_trial = BTreeMap::new();
    let mut pos = 0usize;
    for trials in strata.values_mut() {
        trials.shuffle(&mut rng);
        for &t in trials.iter() {
            fold_of_trial.insert(t, pos % k);
            pos += 1;
        }
    }
    let plan = SplitPlan {
        protocol: Protocol::Sap,
        folds: folds_from_assignment(keys, k, |key| fold_of_trial[&key.trial_id]),
    };
    plan.audit(keys)?;
    Ok(plan)
}

/// One fold per subject, in ascending subject order.
pub fn split_loso(keys: &[SampleKey]) -> Result<SplitPlan> {
    let subjects: Vec<usize> = keys.iter().map(|k| k.subject_id).collect::<BTreeSet<_>>().into_iter().collect();
    if subjects.len() < 2 {
        return Err(Error::InsufficientData(format!("LOSO needs at least 2 subjects, got {}", subjects.len())));
    }
    let index: BTreeMap<usize, usize> = subjects.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let plan = SplitPlan {
        protocol: Protocol::Loso,
        folds: folds_from_assignment(keys, subjects.len(), |key| index[&key.subject_id]),
    };
    plan.audit(keys)?;
    Ok(plan)
}

pub fn split(protocol: Protocol, keys: &[SampleKey], seed: u64) -> Result<SplitPlan> {
    match protocol {
        Protocol::Sap => split_sap(keys, SAP_FOLDS, seed),
        Protocol::Loso => split_loso(keys),
    }
}

fn check_labels(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::InsufficientData("no predictions".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if let Some(&l) = predictions.iter().chain(truths).find(|&&l| l >= n_classes) {
        return Err(Error::InvalidInput(format!("label {} outside {} classes", l, n_classes)));
    }
    Ok(())
}

/// Recall of each class; `None` for classes absent from `truths`.
pub fn class_recalls(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<Vec<Option<f64>>> {
    check_labels(predictions, truths, n_classes)?;
    let mut hit = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        total[t] += 1;
        hit[t] += usize::from(p == t);
    }
    Ok(hit.iter().zip(&total).map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64)).collect())
}

fn mean_recall(recalls: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Mean per-class recall over classes present in `truths`.
pub fn balanced_accuracy(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<f64> {
    let recalls = class_recalls(predictions, truths, n_classes)?;
    let absent: Vec<usize> = (0..n_classes).filter(|&k| recalls[k].is_none()).collect();
    if !absent.is_empty() {
        warn!("balanced accuracy: classes {:?} absent from truths are excluded", absent);
    }
    Ok(mean_recall(&recalls))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub epoch: usize,
    pub subject_id: usize,
    pub trial_id: u64,
    pub truth: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub recalls: Vec<Option<f64>>,
    pub balanced_accuracy: f64,
    pub predictions: Vec<PredictionRecord>,
}

impl FoldResult {
    pub fn new(fold: usize, n_classes: usize, predictions: Vec<PredictionRecord>) -> Result<Self> {
        let p: Vec<usize> = predictions.iter().map(|r| r.predicted).collect();
        let t: Vec<usize> = predictions.iter().map(|r| r.truth).collect();
        let recalls = class_recalls(&p, &t, n_classes)?;
        Ok(FoldResult {
            fold,
            balanced_accuracy: mean_recall(&recalls),
            recalls,
            predictions,
        })
    }
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval of `n_boot` resampled means.
pub fn bootstrap_ci(scores: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if scores.len() < 2 {
        return Err(Error::InsufficientData(format!("bootstrap needs at least 2 scores, got {}", scores.len())));
    }
    if n_boot < 100 {
        return Err(Error::Config(format!("bootstrap needs at least 100 resamples, got {}", n_boot)));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {} outside (0, 1)", level)));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            site: "bootstrap_ci".into(),
            detail: "scores".into(),
        });
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Means are accumulated about a pivot so constant data stay exact.
    let pivot = scores[0];
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| pivot + (0..n).map(|_| scores[rng.gen_range(0..n)] - pivot).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&means, a), quantile_sorted(&means, 1.0 - a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    Wilcoxon,
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub n: usize,
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for at most [`WILCOXON_EXACT_MAX`] nonzero differences.
    Auto,
    Exact,
    Normal,
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test of `a - b` (zero differences dropped).
/// The statistic is the positive-rank sum.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<StatTestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            site: "wilcoxon".into(),
            detail: "differences".into(),
        });
    }
    let n = d.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!("{} nonzero differences (need at least 5)", n)));
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_MAX,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let (p, notes) = if exact {
        (wilcoxon_exact_p(&ranks, w_plus), format!("exact null over 2^{} sign patterns", n))
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = BTreeMap::new();
        for r in &ranks {
            *ties.entry((r * 2.0) as u64).or_insert(0usize) += 1;
        }
        let tie_term: f64 = ties.values().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
        ((erfc(z / std::f64::consts::SQRT_2)).min(1.0), "normal approximation with continuity correction".to_string())
    };
    Ok(StatTestResult {
        kind: TestKind::Wilcoxon,
        statistic: w_plus,
        p_raw: p,
        p_adjusted: p,
        n,
        notes,
    })
}

/// `min(1, 2 min(P(W+ <= w), P(W+ >= w)))` under the sign-flip null, by
/// dynamic programming over doubled (integer) rank sums.
fn wilcoxon_exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let norm = 2f64.powi(ranks.len() as i32);
    let w = (w_plus * 2.0).round() as usize;
    let lower: f64 = counts[..=w].iter().sum::<f64>() / norm;
    let upper: f64 = counts[w..].iter().sum::<f64>() / norm;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Balanced accuracy against a null that permutes truths within each
/// subject. Iteration `i` draws from its own stream of `seed`.
pub fn permutation_test_vs_chance(
    predictions: &[usize],
    truths: &[usize],
    subjects: &[usize],
    n_classes: usize,
    n_perm: usize,
    seed: u64,
) -> Result<StatTestResult> {
    if n_perm == 0 {
        return Err(Error::Config("permutation count must be positive".into()));
    }
    if subjects.len() != truths.len() {
        return Err(Error::InvalidInput(format!("{} subjects for {} truths", subjects.len(), truths.len())));
    }
    let observed = balanced_accuracy(predictions, truths, n_classes)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in subjects.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let exceed = (0..n_perm)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut permuted = truths.to_vec();
            for g in &groups {
                let mut vals: Vec<usize> = g.iter().map(|&j| truths[j]).collect();
                vals.shuffle(&mut rng);
                for (&j, v) in g.iter().zip(vals) {
                    permuted[j] = v;
                }
            }
            let recalls = class_recalls(predictions, &permuted, n_classes).expect("labels validated");
            usize::from(mean_recall(&recalls) >= observed)
        })
        .sum::<usize>();
    let p = (1 + exceed) as f64 / (1 + n_perm) as f64;
    Ok(StatTestResult {
        kind: TestKind::Permutation,
        statistic: observed,
        p_raw: p,
        p_adjusted: p,
        n: predictions.len(),
        notes: format!("{} within-subject label permutations", n_perm),
    })
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_bonferroni(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("p-value {} outside [0, 1]", v)));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    Ok(out)
}

/// Holm-adjusts `p_adjusted` across a family of results.
pub fn adjust_family(results: &mut [StatTestResult]) -> Result<()> {
    let raw: Vec<f64> = results.iter().map(|r| r.p_raw).collect();
    for (r, a) in results.iter_mut().zip(holm_bonferroni(&raw)?) {
        r.p_adjusted = a;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n_subjects: usize, trials: usize) -> Vec<SampleKey> {
        let mut out = Vec::new();
        for s in 0..n_subjects {
            for t in 0..trials {
                for label in 0..2 {
                    out.push(SampleKey {
                        subject_id: s,
                        trial_id: (s * 1000 + t) as u64,
                        label,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn binary_confusion_example() {
        // TP=3 FN=1 FP=2 TN=4 with class 1 positive.
        let truths = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let preds = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
        let ba = balanced_accuracy(&preds, &truths, 2).unwrap();
        assert!((ba - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert_eq!(balanced_accuracy(&truths, &truths, 2).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0; 10], &truths, 2).unwrap(), 0.5);
        assert!(balanced_accuracy(&[], &[], 2).is_err());
        assert!(balanced_accuracy(&[2], &[0], 2).is_err());
    }

    #[test]
    fn absent_class_is_excluded() {
        assert_eq!(balanced_accuracy(&[0, 2, 0], &[0, 0, 0], 3).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn sap_fold_sizes() {
        let ks: Vec<SampleKey> = (0..100)
            .map(|t| SampleKey {
                subject_id: t % 4,
                trial_id: t as u64,
                label: t % 3,
            })
            .collect();
        let plan = split_sap(&ks, 10, 7).unwrap();
        assert_eq!(plan.folds.len(), 10);
        assert!(plan.folds.iter().all(|f| f.test.len() == 10));
        assert!(split_sap(&ks[..5], 10, 7).is_err());
    }

    #[test]
    fn loso_folds_are_subjects() {
        let ks = keys(5, 3);
        let plan = split_loso(&ks).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            assert!(f.test.iter().all(|&i| ks[i].subject_id == f.id));
            assert!(f.train.iter().all(|&i| ks[i].subject_id != f.id));
        }
        assert!(split_loso(&keys(1, 3)).is_err());
    }

    #[test]
    fn audit_detects_leakage() {
        let ks = keys(2, 10);
        let mut plan = split_sap(&ks, 5, 1).unwrap();
        let moved = plan.folds[0].test.pop().unwrap();
        plan.folds[0].train.push(moved);
        assert!(plan.audit(&ks).is_err());
    }

    #[test]
    fn wilcoxon_all_positive_five() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert!((r.p_raw - 0.0625).abs() < 1e-15);
        let s = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(s.p_raw, r.p_raw);
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn holm_examples() {
        let adj = holm_bonferroni(&[0.01, 0.04, 0.03]).unwrap();
        for (a, b) in adj.iter().zip([0.03, 0.06, 0.06]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(holm_bonferroni(&[0.2]).unwrap(), vec![0.2]);
        assert!(holm_bonferroni(&[1.2]).is_err());
    }

    #[test]
    fn permutation_floor() {
        let truths: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let subjects: Vec<usize> = (0..40).map(|i| i / 10).collect();
        let r = permutation_test_vs_chance(&truths, &truths, &subjects, 2, 200, 3).unwrap();
        assert!(r.p_raw >= 1.0 / 201.0 && r.p_raw < 0.05);
        let again = permutation_test_vs_chance(&truths, &truths, &subjects, 2, 200, 3).unwrap();
        assert_eq!(r, again);
        assert!(permutation_test_vs_chance(&truths, &truths, &subjects, 2, 0, 3).is_err());
    }

    #[test]
    fn bootstrap_constant_scores() {
        assert_eq!(bootstrap_ci(&[0.7; 6], 1000, 0.95, 1).unwrap(), (0.7, 0.7));
        assert!(bootstrap_ci(&[0.7; 6], 99, 0.95, 1).is_err());
        assert!(bootstrap_ci(&[0.7], 1000, 0.95, 1).is_err());
    }
}
