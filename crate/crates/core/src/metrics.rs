//! Imputation and ranking metrics: MAE, MRE, AUROC and average precision.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_pairs<S>(a: &[S], b: &[S]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(Error::Degenerate("metric over zero pairs".into()));
    }
    Ok(())
}

/// Mean of `|truth - estimate|`.
pub fn mae<S: Scalar>(truths: &[S], estimates: &[S]) -> Result<S> {
    check_pairs(truths, estimates)?;
    let total: S = truths
        .iter()
        .zip(estimates)
        .map(|(&t, &e)| (t - e).abs())
        .sum();
    Ok(total / S::from_usize(truths.len()).unwrap())
}

/// `Σ|truth - estimate| / Σ|truth|`; exactly 1 for all-zero estimates.
pub fn mre<S: Scalar>(truths: &[S], estimates: &[S]) -> Result<S> {
    check_pairs(truths, estimates)?;
    let denom: S = truths.iter().map(|t| t.abs()).sum();
    if !(denom > S::zero()) {
        return Err(Error::UndefinedMetric("MRE with all-zero truths".into()));
    }
    let num: S = truths
        .iter()
        .zip(estimates)
        .map(|(&t, &e)| (t - e).abs())
        .sum();
    Ok(num / denom)
}

fn check_ranking<S: Scalar>(labels: &[u8], scores: &[S]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::Dimension {
            op: "ranking metric",
            lhs: vec![labels.len()],
            rhs: vec![scores.len()],
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Domain {
            op: "ranking metric",
            index: i,
            value: f64::NAN,
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by score, then grouped into runs of equal score.
fn tie_groups<S: Scalar>(scores: &[S], descending: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `(#ordered pos/neg pairs + ½ #ties) / (#pos · #neg)`.
pub fn auroc<S: Scalar>(labels: &[u8], scores: &[S]) -> Result<f64> {
    let (pos, neg) = check_ranking(labels, scores)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    // Sweep ascending; each positive beats every negative strictly below it.
    let mut negs_below = 0usize;
    let mut twice_wins = 0u128;
    for group in tie_groups(scores, false) {
        let p = group.iter().filter(|&&i| labels[i] == 1).count();
        let n = group.len() - p;
        twice_wins += (2 * p * negs_below + p * n) as u128;
        negs_below += n;
    }
    Ok(twice_wins as f64 / (2 * pos * neg) as f64)
}

/// Average precision `Σ (R_n − R_{n−1}) · P_n` over descending score
/// thresholds, with tied scores entering as one group.
pub fn auprc<S: Scalar>(labels: &[u8], scores: &[S]) -> Result<f64> {
    let (pos, _) = check_ranking(labels, scores)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs a positive label".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for group in tie_groups(scores, true) {
        let p = group.iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        seen += group.len();
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman<S: Scalar>(a: &[S], b: &[S]) -> Result<f64> {
    check_pairs(a, b)?;
    let rank = |x: &[S]| -> Vec<f64> {
        let mut r = vec![0.0; x.len()];
        let mut start = 0;
        for g in tie_groups(x, false) {
            let avg = start as f64 + (g.len() as f64 - 1.0) / 2.0;
            for i in &g {
                r[*i] = avg;
            }
            start += g.len();
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedMetric("rank correlation of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pair-enumeration oracle.
    fn auroc_pairs(labels: &[u8], scores: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    /// Threshold-sweep oracle: classify `score >= th` at each distinct score.
    fn ap_thresholds(labels: &[u8], scores: &[f64]) -> f64 {
        let mut th: Vec<f64> = scores.to_vec();
        th.sort_by(|a, b| b.partial_cmp(a).unwrap());
        th.dedup();
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let (mut ap, mut prev_r) = (0.0, 0.0);
        for t in th {
            let (mut tp, mut fp) = (0.0, 0.0);
            for (l, s) in labels.iter().zip(scores) {
                if *s >= t {
                    if *l == 1 {
                        tp += 1.0
                    } else {
                        fp += 1.0
                    }
                }
            }
            let r = tp / pos;
            ap += (r - prev_r) * (tp / (tp + fp));
            prev_r = r;
        }
        ap
    }

    #[test]
    fn mae_and_mre_examples() {
        assert_eq!(mae(&[2.0, 4.0], &[2.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mae(&[2.0, 4.0], &[1.0, 5.0]).unwrap(), 1.0);
        assert!((mre(&[2.0f64, 4.0], &[1.0, 5.0]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(mre(&[2.0, 4.0], &[2.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mre(&[-0.3, 1.7, 2.2], &[0.0; 3]).unwrap(), 1.0);
        assert!(matches!(mae::<f64>(&[], &[]), Err(Error::Degenerate(_))));
        assert!(matches!(mre(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mae_matches_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let e: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut acc = 0.0;
        for i in 0..100 {
            acc += (t[i] - e[i]).abs();
        }
        assert!((mae(&t, &e).unwrap() - acc / 100.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_examples() {
        let labels = [1, 0, 1, 0];
        let scores = [0.9, 0.8, 0.7, 0.1];
        assert!((auroc(&labels, &scores).unwrap() - 0.75).abs() < 1e-12);
        assert!((auprc(&labels, &scores).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(auroc(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auroc(&[0, 1, 0, 1], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auprc(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert!((auprc(&[0, 0, 0, 0, 1], &[0.9, 0.8, 0.7, 0.6, 0.1]).unwrap() - 0.2).abs() < 1e-15);
        assert!(auroc(&[1, 1], &[0.1, 0.2]).is_err());
        assert!(auprc(&[0, 0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    fn ranking_case() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
        (2usize..=20).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..=1, n),
                proptest::collection::vec((0u8..6).prop_map(|k| k as f64 / 5.0), n),
            )
        })
    }

    proptest! {
        #[test]
        fn ranking_metrics_match_oracles((labels, scores) in ranking_case()) {
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos > 0 && pos < labels.len() {
                prop_assert!((auroc(&labels, &scores).unwrap() - auroc_pairs(&labels, &scores)).abs() <= 1e-12);
            }
            if pos > 0 {
                prop_assert!((auprc(&labels, &scores).unwrap() - ap_thresholds(&labels, &scores)).abs() <= 1e-12);
            }
        }

        #[test]
        fn auroc_monotone_invariance((labels, scores) in ranking_case()) {
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
            prop_assert_eq!(auroc(&labels, &scores).unwrap(), auroc(&labels, &moved).unwrap());
        }

        #[test]
        fn auroc_of_negated_scores_complements(labels in proptest::collection::vec(0u8..=1, 2..20)) {
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let scores: Vec<f64> = (0..labels.len()).map(|i| (i * 7 % 13) as f64 + i as f64 * 0.01).collect();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = auroc(&labels, &scores).unwrap() + auroc(&labels, &neg).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn mre_of_zero_estimates_is_one(t in proptest::collection::vec(-10.0f64..10.0, 1..50)) {
            prop_assume!(t.iter().any(|x| *x != 0.0));
            prop_assert_eq!(mre(&t, &vec![0.0; t.len()]).unwrap(), 1.0);
        }
    }
}
