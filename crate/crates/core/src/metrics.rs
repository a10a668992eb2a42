//! Agreement metrics and significance testing.
//!
//! All moments are population (1/n) moments. CCC with a vanishing
//! denominator scores 0 rather than failing, so constant predictions during
//! training or head selection yield a neutral score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators below this are treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

fn check_pair(x: &[f64], y: &[f64], what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "{what}: length mismatch ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{what}: need at least 2 values, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what}: non-finite value")));
    }
    Ok(())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population moments of a paired sample: (mean_x, mean_y, var_x, var_y, cov).
fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    (mx, my, vx / n, vy / n, cxy / n)
}

/// Lin's concordance correlation coefficient.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "ccc")?;
    Ok(ccc_unchecked(x, y))
}

/// CCC without input validation; callers guarantee equal length ≥ 2.
pub(crate) fn ccc_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my, vx, vy, cxy) = moments(x, y);
    let gap = mx - my;
    let denom = vx + vy + gap * gap;
    if denom < DEGENERATE_EPS {
        0.0
    } else {
        2.0 * cxy / denom
    }
}

/// Gradient of [`ccc`] with respect to the prediction vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CccGradient {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Set when either input is constant (so CCC is pinned at 0) or the
    /// denominator vanished; `gradient` is then all zeros.
    pub degenerate: bool,
}

/// Exact ∂CCC(predictions, targets)/∂predictions.
pub fn ccc_gradient(predictions: &[f64], targets: &[f64]) -> Result<CccGradient> {
    check_pair(predictions, targets, "ccc_gradient")?;
    Ok(ccc_gradient_unchecked(predictions, targets))
}

pub(crate) fn ccc_gradient_unchecked(predictions: &[f64], targets: &[f64]) -> CccGradient {
    let n = predictions.len() as f64;
    let (mx, my, vx, vy, cxy) = moments(predictions, targets);
    let gap = mx - my;
    let denom = vx + vy + gap * gap;
    // A constant side pins CCC at 0; treat it like a vanishing denominator.
    if denom < DEGENERATE_EPS || vx < DEGENERATE_EPS || vy < DEGENERATE_EPS {
        return CccGradient {
            value: 0.0,
            gradient: vec![0.0; predictions.len()],
            degenerate: true,
        };
    }
    let numer = 2.0 * cxy;
    let inv_d2 = 1.0 / (denom * denom);
    let gradient = predictions
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let d_numer = 2.0 * (y - my) / n;
            let d_denom = 2.0 * (x - mx) / n + 2.0 * gap / n;
            (d_numer * denom - numer * d_denom) * inv_d2
        })
        .collect();
    CccGradient {
        value: numer / denom,
        gradient,
        degenerate: false,
    }
}

/// Pearson correlation. Constant input is reported as [`Error::Degenerate`].
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "pcc")?;
    let (_, _, vx, vy, cxy) = moments(x, y);
    if vx < DEGENERATE_EPS || vy < DEGENERATE_EPS {
        return Err(Error::Degenerate("pcc: constant input".into()));
    }
    Ok((cxy / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// Population-wide min-max scaling parameters for one label dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub raw_min: f64,
    pub raw_max: f64,
}

impl ScalingParams {
    pub fn new(raw_min: f64, raw_max: f64) -> Result<Self> {
        if !(raw_min.is_finite() && raw_max.is_finite()) || raw_max <= raw_min {
            return Err(Error::InvalidInput(format!(
                "scaling range [{raw_min}, {raw_max}] is empty"
            )));
        }
        Ok(Self { raw_min, raw_max })
    }

    /// Maps `raw` into [-1, 1], clamping values outside the fitted range.
    pub fn apply(&self, raw: f64) -> f64 {
        (2.0 * (raw - self.raw_min) / (self.raw_max - self.raw_min) - 1.0).clamp(-1.0, 1.0)
    }
}

pub fn fit_scaling(raw_labels: &[f64]) -> Result<ScalingParams> {
    if raw_labels.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("fit_scaling: non-finite label".into()));
    }
    let lo = raw_labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw_labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw_labels.len() < 2 || hi <= lo {
        return Err(Error::InvalidInput(
            "fit_scaling: need at least two distinct values".into(),
        ));
    }
    ScalingParams::new(lo, hi)
}

pub fn apply_scaling(params: &ScalingParams, raw: f64) -> Result<f64> {
    ScalingParams::new(params.raw_min, params.raw_max).map(|p| p.apply(raw))
}

/// Shannon entropy in bits of the normalized count distribution.
pub fn entropy_log2<K>(counts: &BTreeMap<K, usize>) -> Result<f64> {
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::InvalidInput("entropy: all counts are zero".into()));
    }
    let total = total as f64;
    let h = counts
        .values()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub significant_at_95: bool,
    pub mean_difference: f64,
}

/// Two-sided paired t-test on `a - b`, sample (n-1) standard deviation.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    check_pair(a, b, "paired_t_test")?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let ss: f64 = d.iter().map(|v| (v - md) * (v - md)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    if sd < DEGENERATE_EPS {
        return Err(Error::Degenerate(
            "paired_t_test: differences have zero variance".into(),
        ));
    }
    let t = md / (sd / n.sqrt());
    let df = d.len() - 1;
    let p_value = student_t_two_sided(t, df as f64);
    Ok(PairedTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value,
        significant_at_95: p_value < 0.05,
        mean_difference: md,
    })
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, 0.5 * df, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// I_x(a, b) via the continued fraction, evaluated on whichever side
/// converges fastest.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

// Modified Lentz evaluation.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Sample mean and sample standard deviation (n-1). `sd` is 0 for n < 2.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (m, (ss / (values.len() as f64 - 1.0)).sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ccc_hand_examples() {
        let x = [0.1, 0.5, -0.3];
        assert_eq!(ccc(&x, &x).unwrap(), 1.0);
        assert_eq!(ccc(&[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert!((ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ccc_rejects_bad_shapes() {
        assert!(matches!(ccc(&[1.0], &[1.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(ccc(&[1.0, 2.0], &[1.0]), Err(Error::InvalidInput(_))));
        assert!(ccc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ccc_gradient_degenerate_flag() {
        let g = ccc_gradient(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.gradient, vec![0.0; 3]);
    }

    #[test]
    fn ccc_gradient_constant_side_is_degenerate() {
        let g = ccc_gradient(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.gradient, vec![0.0; 3]);
        assert_eq!(g.value, 0.0);
        let g = ccc_gradient(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn pcc_examples() {
        assert!((pcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pcc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn scaling_examples() {
        let p = fit_scaling(&[1.0, 4.0, 7.0]).unwrap();
        assert_eq!(p, ScalingParams { raw_min: 1.0, raw_max: 7.0 });
        assert_eq!(
            fit_scaling(&[-2.0, 0.0, 2.0]).unwrap(),
            ScalingParams { raw_min: -2.0, raw_max: 2.0 }
        );
        assert!(fit_scaling(&[3.0]).is_err());
        assert!(fit_scaling(&[3.0, 3.0]).is_err());
        assert_eq!(p.apply(4.0), 0.0);
        assert_eq!(p.apply(1.0), -1.0);
        assert_eq!(p.apply(7.0), 1.0);
        assert_eq!(p.apply(9.0), 1.0);
        assert_eq!(p.apply(-3.0), -1.0);
        let bad = ScalingParams { raw_min: 2.0, raw_max: 1.0 };
        assert!(apply_scaling(&bad, 1.5).is_err());
    }

    #[test]
    fn entropy_examples() {
        let uniform30: BTreeMap<usize, usize> = (0..30).map(|i| (i, 1)).collect();
        assert!((entropy_log2(&uniform30).unwrap() - 4.9069).abs() < 1e-3);
        let single: BTreeMap<&str, usize> = [("a", 30)].into_iter().collect();
        assert_eq!(entropy_log2(&single).unwrap(), 0.0);
        let two: BTreeMap<&str, usize> = [("a", 15), ("b", 15)].into_iter().collect();
        assert!((entropy_log2(&two).unwrap() - 1.0).abs() < 1e-15);
        let zero: BTreeMap<&str, usize> = [("a", 0)].into_iter().collect();
        assert!(entropy_log2(&zero).is_err());
    }

    #[test]
    fn paired_t_examples() {
        let b = [0.0; 5];
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &b).unwrap();
        assert!((r.t_statistic - 4.242_640_687).abs() < 1e-8);
        assert_eq!(r.degrees_of_freedom, 4);
        // t-table: two-sided p for t = 3√2 with 4 df
        assert!((r.p_value - 0.013_24).abs() < 1e-4);
        assert!(r.significant_at_95);

        let a = [0.3, 0.1, 0.7];
        assert!(matches!(paired_t_test(&a, &a), Err(Error::Degenerate(_))));

        let r = paired_t_test(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        assert!(!r.significant_at_95);
    }

    #[test]
    fn incomplete_beta_known_values() {
        // I_x(1,1) = x; I_x(a,1) = x^a
        assert!((regularized_incomplete_beta(0.3, 1.0, 1.0) - 0.3).abs() < 1e-12);
        assert!((regularized_incomplete_beta(0.5, 3.0, 1.0) - 0.125).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    fn vec_pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2..max).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0..3.0f64, n),
                prop::collection::vec(-3.0..3.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ccc_symmetric_and_bounded((x, y) in vec_pair(40)) {
            let a = ccc(&x, &y).unwrap();
            let b = ccc(&y, &x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a.abs() <= 1.0 + 1e-12);
            if let Ok(r) = pcc(&x, &y) {
                prop_assert!(a.abs() <= r.abs() + 1e-12);
            }
        }

        #[test]
        fn ccc_self_is_one(x in prop::collection::vec(-3.0..3.0f64, 2..40)) {
            let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - x.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-6);
            prop_assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ccc_equals_pcc_when_moments_match(x in prop::collection::vec(-3.0..3.0f64, 3..30), perm_seed in 0usize..1000) {
            // A permutation of x has identical mean and variance.
            let mut y = x.clone();
            let n = y.len();
            y.rotate_left(perm_seed % n);
            if let Ok(r) = pcc(&x, &y) {
                prop_assert!((ccc(&x, &y).unwrap() - r).abs() < 1e-9);
            }
        }

        #[test]
        fn t_statistic_antisymmetric((a, b) in vec_pair(30)) {
            if let (Ok(ab), Ok(ba)) = (paired_t_test(&a, &b), paired_t_test(&b, &a)) {
                prop_assert!((ab.t_statistic + ba.t_statistic).abs() < 1e-9);
                prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            }
        }

        #[test]
        fn scaling_affine_order_preserving(lo in -10.0..0.0f64, width in 0.1..20.0f64, u in 0.0..1.0f64, v in 0.0..1.0f64) {
            let p = ScalingParams::new(lo, lo + width).unwrap();
            let (a, b) = (lo + u * width, lo + v * width);
            if a < b { prop_assert!(p.apply(a) <= p.apply(b)); }
            prop_assert_eq!(p.apply(lo), -1.0);
            prop_assert!((p.apply(lo + width) - 1.0).abs() < 1e-12);
            let mid = p.apply(0.5 * (a + b));
            prop_assert!((mid - 0.5 * (p.apply(a) + p.apply(b))).abs() < 1e-12);
        }

        #[test]
        fn entropy_uniform_is_log2k(k in 1usize..60, c in 1usize..20) {
            let counts: BTreeMap<usize, usize> = (0..k).map(|i| (i, c)).collect();
            prop_assert!((entropy_log2(&counts).unwrap() - (k as f64).log2()).abs() < 1e-12);
        }

        #[test]
        fn entropy_below_uniform(counts in prop::collection::vec(1usize..10, 1..20)) {
            let k = counts.len();
            let m: BTreeMap<usize, usize> = counts.into_iter().enumerate().collect();
            prop_assert!(entropy_log2(&m).unwrap() <= (k as f64).log2() + 1e-12);
        }
    }
}
