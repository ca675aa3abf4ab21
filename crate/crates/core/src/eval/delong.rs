use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{check, midranks, EvalError};

/// Paired comparison of two correlated AUCs on the same windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    /// Variance of `auc_a - auc_b`.
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
    /// Zero variance with a nonzero difference; `p_value` is then 0.
    pub degenerate: bool,
}

/// Placement values of each positive (`v10`) and negative (`v01`) window.
fn placements(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    let (n1, n0) = (pos.len() as f64, neg.len() as f64);
    let combined: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let tz = midranks(&combined);
    let tx = midranks(&pos);
    let ty = midranks(&neg);
    let v10 = (0..pos.len()).map(|i| (tz[i] - tx[i]) / n0).collect();
    let v01 = (0..neg.len())
        .map(|j| 1.0 - (tz[pos.len() + j] - ty[j]) / n1)
        .collect();
    (v10, v01)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (a.len() as f64 - 1.0)
}

/// Two-sided DeLong test for `AUC_a = AUC_b`.
pub fn delong_test(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
) -> Result<DeLong, EvalError> {
    check(scores_a, labels, "delong model a")?;
    check(scores_b, labels, "delong model b")?;
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 < 2 || n0 < 2 {
        return Err(EvalError::SingleClass);
    }
    let (a10, a01) = placements(scores_a, labels);
    let (b10, b01) = placements(scores_b, labels);
    let auc_a = mean(&a10);
    let auc_b = mean(&b10);
    let s10 = covariance(&a10, &a10) + covariance(&b10, &b10) - 2.0 * covariance(&a10, &b10);
    let s01 = covariance(&a01, &a01) + covariance(&b01, &b01) - 2.0 * covariance(&a01, &b01);
    let variance = (s10 / n1 as f64 + s01 / n0 as f64).max(0.0);
    let diff = auc_a - auc_b;
    let z = if variance > 0.0 {
        diff / variance.sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    let p_value = erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(DeLong {
        auc_a,
        auc_b,
        variance,
        z,
        p_value,
        degenerate: variance == 0.0 && diff != 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::roc_auc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn psi(x: f64, y: f64) -> f64 {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    }

    /// Structural components built pair by pair.
    fn direct_variance(a: &[f64], b: &[f64], labels: &[bool]) -> f64 {
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
        let comp = |s: &[f64]| {
            let v10: Vec<f64> = pos
                .iter()
                .map(|&i| neg.iter().map(|&j| psi(s[i], s[j])).sum::<f64>() / neg.len() as f64)
                .collect();
            let v01: Vec<f64> = neg
                .iter()
                .map(|&j| pos.iter().map(|&i| psi(s[i], s[j])).sum::<f64>() / pos.len() as f64)
                .collect();
            (v10, v01)
        };
        let (a10, a01) = comp(a);
        let (b10, b01) = comp(b);
        let d10: Vec<f64> = a10.iter().zip(&b10).map(|(x, y)| x - y).collect();
        let d01: Vec<f64> = a01.iter().zip(&b01).map(|(x, y)| x - y).collect();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
        };
        var(&d10) / pos.len() as f64 + var(&d01) / neg.len() as f64
    }

    #[test]
    fn hand_fixture_variance() {
        let labels = [true, true, true, false, false, false, false, true];
        let a = [0.9, 0.8, 0.4, 0.3, 0.5, 0.1, 0.4, 0.7];
        let b = [0.6, 0.9, 0.2, 0.3, 0.1, 0.5, 0.8, 0.4];
        let r = delong_test(&a, &b, &labels).unwrap();
        assert!((r.variance - direct_variance(&a, &b, &labels)).abs() < 1e-12);
        assert!((r.auc_a - roc_auc(&a, &labels).unwrap()).abs() < 1e-12);
        assert!((r.auc_b - roc_auc(&b, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_models() {
        let labels = [true, false, true, false, false];
        let s = [0.2, 0.4, 0.9, 0.1, 0.3];
        let r = delong_test(&s, &s, &labels).unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn symmetric_in_model_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<bool> = (0..60).map(|_| rng.random_bool(0.3)).collect();
        let a: Vec<f64> = labels
            .iter()
            .map(|&l| f64::from(u8::from(l)) + rng.random::<f64>())
            .collect();
        let b: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let ab = delong_test(&a, &b, &labels).unwrap();
        let ba = delong_test(&b, &a, &labels).unwrap();
        assert_eq!(ab.z, -ba.z);
        assert_eq!(ab.p_value, ba.p_value);
        assert!((ab.variance - direct_variance(&a, &b, &labels)).abs() < 1e-12);
    }

    #[test]
    fn perfect_versus_random_is_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let random: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let r = delong_test(&perfect, &random, &labels).unwrap();
        assert!(r.p_value < 0.05, "{r:?}");
        assert!(r.z > 0.0);

        // Stratified bootstrap of the AUC difference on the same windows.
        let pos: Vec<usize> = (0..200).filter(|&i| labels[i]).collect();
        let neg: Vec<usize> = (0..200).filter(|&i| !labels[i]).collect();
        let diffs: Vec<f64> = (0..400)
            .map(|_| {
                let mut idx: Vec<usize> = (0..pos.len())
                    .map(|_| pos[rng.random_range(0..pos.len())])
                    .collect();
                idx.extend((0..neg.len()).map(|_| neg[rng.random_range(0..neg.len())]));
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                let a: Vec<f64> = idx.iter().map(|&i| perfect[i]).collect();
                let b: Vec<f64> = idx.iter().map(|&i| random[i]).collect();
                roc_auc(&a, &l).unwrap() - roc_auc(&b, &l).unwrap()
            })
            .collect();
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd =
            (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
        let boot_p = erfc((m / sd).abs() / std::f64::consts::SQRT_2);
        assert!(boot_p < 0.05);
        assert!(
            (sd / r.variance.sqrt() - 1.0).abs() < 0.25,
            "{sd} vs {}",
            r.variance.sqrt()
        );
    }

    #[test]
    fn zero_variance_difference_is_flagged() {
        let labels = [true, true, false, false];
        let perfect = [1.0, 0.9, 0.2, 0.1];
        let flat = [0.5; 4];
        let r = delong_test(&perfect, &flat, &labels).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
        assert!(!delong_test(&flat, &flat, &labels).unwrap().degenerate);
    }
}
