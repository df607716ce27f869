//! Youden's-J threshold selection on distance scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    /// Distances strictly above `tau` are flagged.
    pub tau: f64,
    /// `TPR - FPR` at `tau`.
    pub youden_j: f64,
}

/// Picks the cut point maximizing `TPR - FPR`, where `flagged == true` marks
/// the class expected to score high. Candidates are `-inf`, the midpoints
/// between adjacent distinct scores, and `+inf`; ties go to the smallest
/// threshold.
pub fn calibrate_threshold(scores: &[(f64, bool)]) -> Result<ThresholdFit> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Calibration("NaN score".into()));
    }
    let pos = scores.iter().filter(|s| s.1).count() as i128;
    let neg = scores.len() as i128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Calibration(
            "threshold calibration needs both faithful and flagged scores".into(),
        ));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // J * pos * neg = tp * neg - fp * pos, compared exactly in integers.
    let numer = |tp: i128, fp: i128| tp * neg - fp * pos;
    // threshold -inf flags everything
    let (mut tp, mut fp) = (pos, neg);
    let mut best = (numer(tp, fp), f64::NEG_INFINITY);
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == value {
            if sorted[i].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let cut = if i < sorted.len() {
            midpoint(value, sorted[i].0)
        } else {
            f64::INFINITY
        };
        let j = numer(tp, fp);
        if j > best.0 {
            best = (j, cut);
        }
    }
    Ok(ThresholdFit {
        tau: best.1,
        youden_j: best.0 as f64 / (pos * neg) as f64,
    })
}

fn midpoint(a: f64, b: f64) -> f64 {
    a + (b - a) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_separation() {
        let s = [(1.0, false), (2.0, false), (3.0, true), (4.0, true)];
        let fit = calibrate_threshold(&s).unwrap();
        assert_eq!(fit.tau, 2.5);
        assert_eq!(fit.youden_j, 1.0);
    }

    #[test]
    fn interleaved_identical_distributions_pick_smallest_candidate() {
        let s = [(1.0, false), (1.0, true), (2.0, false), (2.0, true), (3.0, true), (3.0, false)];
        let fit = calibrate_threshold(&s).unwrap();
        assert_eq!(fit.youden_j, 0.0);
        assert_eq!(fit.tau, f64::NEG_INFINITY);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(
            calibrate_threshold(&[(1.0, true), (2.0, true)]),
            Err(Error::Calibration(_))
        ));
        assert!(matches!(calibrate_threshold(&[]), Err(Error::Calibration(_))));
    }

    /// O(n^2) oracle: evaluate J at every candidate by direct counting.
    fn brute_force(scores: &[(f64, bool)]) -> (f64, i128) {
        let mut values: Vec<f64> = scores.iter().map(|s| s.0).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let mut candidates = vec![f64::NEG_INFINITY];
        candidates.extend(values.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        candidates.push(f64::INFINITY);
        let pos = scores.iter().filter(|s| s.1).count() as i128;
        let neg = scores.len() as i128 - pos;
        let mut best: Option<(f64, i128)> = None;
        for &t in &candidates {
            let tp = scores.iter().filter(|s| s.1 && s.0 > t).count() as i128;
            let fp = scores.iter().filter(|s| !s.1 && s.0 > t).count() as i128;
            let j = tp * neg - fp * pos;
            if best.is_none_or(|b| j > b.1) {
                best = Some((t, j));
            }
        }
        best.unwrap()
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let s: Vec<(f64, bool)> = (0..20)
                .map(|i| {
                    let flagged = i % 2 == 0 || rng.random_bool(0.3);
                    let base: f64 = rng.random_range(0.0..5.0);
                    // coarse grid produces ties
                    ((base * 4.0).round() / 4.0 + if flagged { 0.7 } else { 0.0 }, flagged)
                })
                .collect();
            let fit = calibrate_threshold(&s).unwrap();
            let (tau, _) = brute_force(&s);
            assert_eq!(fit.tau, tau);
            assert!(fit.youden_j >= 0.0);
        }
    }
}
