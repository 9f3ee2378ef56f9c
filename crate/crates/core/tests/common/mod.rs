//! Independent oracles shared by integration test targets.
#![allow(dead_code)]

/// Two-sided Wilcoxon p by enumerating all 2^n sign patterns of the
/// nonzero differences, with average ranks for tied magnitudes.
pub fn wilcoxon_brute_force(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = mags
        .iter()
        .map(|m| {
            let less = mags.iter().filter(|x| *x < m).count() as f64;
            let equal = mags.iter().filter(|x| *x == m).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / total).min(1.0)
}

/// Holm adjustment written directly from the step-down definition:
/// adjusted_(i) = max_{j <= i} min(1, (m - j + 1) p_(j)).
pub fn holm_by_definition(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
    let mut out = vec![0.0; m];
    for (i, &k) in idx.iter().enumerate() {
        out[k] = (0..=i)
            .map(|j| ((m - j) as f64 * p[idx[j]]).min(1.0))
            .fold(0.0, f64::max);
    }
    out
}

/// Balanced accuracy from a confusion table `table[truth][pred]`.
pub fn balanced_from_confusion(table: &[Vec<usize>]) -> f64 {
    let recalls: Vec<f64> = table
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().sum::<usize>() > 0)
        .map(|(k, row)| row[k] as f64 / row.iter().sum::<usize>() as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Expands a confusion table into (predictions, truths).
pub fn confusion_to_labels(table: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for (truth, row) in table.iter().enumerate() {
        for (pred, &c) in row.iter().enumerate() {
            for _ in 0..c {
                p.push(pred);
                t.push(truth);
            }
        }
    }
    (p, t)
}
