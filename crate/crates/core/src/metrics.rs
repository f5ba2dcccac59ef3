//! AUC and logloss, plus a pairwise AUC oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped into `[LOGLOSS_CLAMP, 1 − LOGLOSS_CLAMP]` for reporting.
pub const LOGLOSS_CLAMP: f64 = 1e-7;

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Mann–Whitney AUC: tied scores share their average rank, so a
/// positive/negative tie counts one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_block = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        pos_rank_sum += avg_rank * pos_in_block as f64;
        start = end;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Pairwise definition of AUC, `O(n_pos · n_neg)`.
pub fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut wins = 0.0;
    for (p, _) in labels.iter().enumerate().filter(|(_, &y)| y == 1) {
        for (n, _) in labels.iter().enumerate().filter(|(_, &y)| y == 0) {
            if scores[p] > scores[n] {
                wins += 1.0;
            } else if scores[p] == scores[n] {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Mean binary cross-entropy of probabilities, clamped by [`LOGLOSS_CLAMP`].
pub fn logloss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Contract("logloss of an empty set".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} probabilities against {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
        }
        let p = p.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub logloss: f64,
    pub n_samples: usize,
    pub n_pos: usize,
}

impl EvalResult {
    pub fn compute(probs: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(Self {
            auc: auc(probs, labels)?,
            logloss: logloss(probs, labels)?,
            n_samples: probs.len(),
            n_pos: labels.iter().filter(|&&y| y == 1).count(),
        })
    }
}

/// One JSON metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub split: String,
    pub epoch: Option<usize>,
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
}

impl MetricLine {
    pub fn new(split: &str, epoch: Option<usize>, r: &EvalResult) -> Self {
        Self {
            split: split.to_string(),
            epoch,
            auc: r.auc,
            logloss: r.logloss,
            n: r.n_samples,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.7, 0.6, 0.5], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc_bruteforce(&[0.8, 0.7, 0.6, 0.5], &[1, 0, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc_bruteforce(&[0.1], &[0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn bruteforce_symmetries() {
        let s = [0.3, 0.1, 0.7, 0.7, 0.2];
        let y = [1, 0, 0, 1, 1];
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let a = auc_bruteforce(&s, &y).unwrap();
        assert!((auc_bruteforce(&s, &flipped).unwrap() - (1.0 - a)).abs() < 1e-15);
        assert_eq!(auc_bruteforce(&[0.4; 5], &y).unwrap(), 0.5);
    }

    #[test]
    fn logloss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((logloss(&[0.5; 4], &[1, 0, 0, 1]).unwrap() - ln2).abs() < 1e-15);
        let sat = logloss(&[1.0], &[1]).unwrap();
        assert!(sat.is_finite() && sat > 0.0 && sat < 2e-7, "{sat}");
        assert!(logloss(&[0.0], &[1]).unwrap().is_finite());
        assert!(matches!(logloss(&[], &[]), Err(Error::Contract(_))));
        assert!(logloss(&[1.5], &[1]).is_err());
    }

    #[test]
    fn metric_line_json_shape() {
        let r = EvalResult { auc: 0.75, logloss: 0.5, n_samples: 4, n_pos: 2 };
        assert_eq!(
            MetricLine::new("val", Some(3), &r).to_json(),
            r#"{"split":"val","epoch":3,"auc":0.75,"logloss":0.5,"n":4}"#
        );
    }

    fn instance(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        // coarse grid so ties are common
        let scores = (0..n).map(|_| (rng.random_range(0..20) as f64) / 10.0 - 1.0).collect();
        (scores, labels)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rank_auc_equals_bruteforce(seed in any::<u64>(), n in 2usize..300) {
            let (s, y) = instance(seed, n);
            prop_assert!((auc(&s, &y).unwrap() - auc_bruteforce(&s, &y).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn auc_invariant_under_increasing_maps(seed in any::<u64>(), n in 2usize..200) {
            let (s, y) = instance(seed, n);
            let base = auc(&s, &y).unwrap();
            let affine: Vec<f64> = s.iter().map(|x| 2.0 * x + 1.0).collect();
            let squashed: Vec<f64> = s.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
            prop_assert!((auc(&affine, &y).unwrap() - base).abs() < 1e-12);
            prop_assert!((auc(&squashed, &y).unwrap() - base).abs() < 1e-12);
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((auc(&neg, &y).unwrap() + base - 1.0).abs() < 1e-12);
        }

        #[test]
        fn logloss_nonnegative_and_constant_half(seed in any::<u64>(), n in 1usize..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
            prop_assert!(logloss(&p, &y).unwrap() >= 0.0);
            prop_assert!((logloss(&vec![0.5; n], &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
