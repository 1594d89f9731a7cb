//! Evaluation metrics: per-domain macro-F1, the stream average, the
//! normalised relative gain, paired bootstrap intervals and the
//! gain-versus-shift correlation.

use rayon::prelude::*;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("supervised and source-only scores coincide; relative gain is undefined")]
    DegenerateDenominator,
    #[error("input is constant; correlation is undefined")]
    ConstantInput,
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("at least one resample is required")]
    NoResamples,
}

/// Macro-averaged F1 over the label space `0..num_classes`.
///
/// Classes that occur in neither `preds` nor `golds` are left out of the
/// mean. Any other class with no true positive contributes 0.
pub fn macro_f1(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<f64, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gold_count = vec![0usize; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        for label in [p, g] {
            if label >= num_classes {
                return Err(MetricsError::LabelOutOfRange { label, num_classes });
            }
        }
        pred_count[p] += 1;
        gold_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if pred_count[c] == 0 && gold_count[c] == 0 {
            continue;
        }
        present += 1;
        sum += 2.0 * tp[c] as f64 / (pred_count[c] + gold_count[c]) as f64;
    }
    Ok(sum / present as f64)
}

/// Mean of the per-domain scores.
pub fn f_avg(per_domain_f: &[f64]) -> Result<f64, MetricsError> {
    if per_domain_f.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(per_domain_f.iter().sum::<f64>() / per_domain_f.len() as f64)
}

/// `(method - src_only) / (supervised - src_only)`.
pub fn relative_gain(f_method: f64, f_src_only: f64, f_supervised: f64) -> Result<f64, MetricsError> {
    let denom = f_supervised - f_src_only;
    if denom == 0.0 {
        return Err(MetricsError::DegenerateDenominator);
    }
    Ok((f_method - f_src_only) / denom)
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::Empty);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Aligned test-set predictions of two methods on one domain.
#[derive(Debug, Clone, Copy)]
pub struct PairedDomain<'a> {
    pub preds_a: &'a [usize],
    pub preds_b: &'a [usize],
    pub golds: &'a [usize],
}

impl PairedDomain<'_> {
    fn check(&self) -> Result<(), MetricsError> {
        if self.preds_a.len() != self.golds.len() {
            return Err(MetricsError::LengthMismatch(self.preds_a.len(), self.golds.len()));
        }
        if self.preds_b.len() != self.golds.len() {
            return Err(MetricsError::LengthMismatch(self.preds_b.len(), self.golds.len()));
        }
        if self.golds.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Resample each domain's test set separately, score each domain, average.
    #[default]
    PerDomain,
    /// Resample the concatenated test sets and score them as one set.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub diff_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn percentile_interval(mut values: Vec<f64>, level: f64) -> BootstrapResult {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    // A heavily skewed resample distribution can put its mean outside the
    // percentile band; widen so the reported interval always contains it.
    BootstrapResult {
        diff_mean: mean,
        ci_low: quantile(&values, alpha).min(mean),
        ci_high: quantile(&values, 1.0 - alpha).max(mean),
        n_resamples: n,
    }
}

fn check_bootstrap_args(n: usize, level: f64) -> Result<(), MetricsError> {
    if n == 0 {
        return Err(MetricsError::NoResamples);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::InvalidLevel(level));
    }
    Ok(())
}

fn resampled_f1(preds: &[usize], golds: &[usize], idx: &[usize], num_classes: usize) -> f64 {
    let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
    let g: Vec<usize> = idx.iter().map(|&i| golds[i]).collect();
    macro_f1(&p, &g, num_classes).expect("validated")
}

fn draw(rng: &mut crate::seed::Rng, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..len)).collect()
}

/// Paired bootstrap of the macro-F1 difference `A - B` across target
/// domains.
///
/// Resample `r` draws from its own RNG stream derived from `(seed, r)`, so
/// the result does not depend on thread scheduling.
pub fn paired_bootstrap(
    domains: &[PairedDomain<'_>],
    num_classes: usize,
    n: usize,
    level: f64,
    seed: u64,
    resampling: Resampling,
) -> Result<BootstrapResult, MetricsError> {
    check_bootstrap_args(n, level)?;
    if domains.is_empty() {
        return Err(MetricsError::Empty);
    }
    for d in domains {
        d.check()?;
    }
    let pooled = match resampling {
        Resampling::Pooled => {
            let cat = |pick: fn(&PairedDomain<'_>) -> Vec<usize>| domains.iter().flat_map(pick).collect::<Vec<_>>();
            Some((cat(|d| d.preds_a.to_vec()), cat(|d| d.preds_b.to_vec()), cat(|d| d.golds.to_vec())))
        }
        Resampling::PerDomain => None,
    };
    let stats: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(seed, "paired-bootstrap", r as u64);
            match &pooled {
                Some((a, b, g)) => {
                    let idx = draw(&mut rng, g.len());
                    resampled_f1(a, g, &idx, num_classes) - resampled_f1(b, g, &idx, num_classes)
                }
                None => {
                    let total: f64 = domains
                        .iter()
                        .map(|d| {
                            let idx = draw(&mut rng, d.golds.len());
                            resampled_f1(d.preds_a, d.golds, &idx, num_classes)
                                - resampled_f1(d.preds_b, d.golds, &idx, num_classes)
                        })
                        .sum();
                    total / domains.len() as f64
                }
            }
        })
        .collect();
    Ok(percentile_interval(stats, level))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub t: usize,
    pub mmd: f64,
    pub delta_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainShift {
    pub points: Vec<ScatterPoint>,
    /// `None` when either coordinate is constant.
    pub pearson_r: Option<f64>,
}

fn relative_improvements(method_f: &[f64], src_only_f: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if method_f.len() != src_only_f.len() {
        return Err(MetricsError::LengthMismatch(method_f.len(), src_only_f.len()));
    }
    method_f
        .iter()
        .zip(src_only_f)
        .map(|(&m, &s)| if s == 0.0 { Err(MetricsError::DegenerateDenominator) } else { Ok((m - s) / s) })
        .collect()
}

/// Relative per-domain improvement over the source-only baseline paired
/// with each target domain's discrepancy from the source.
///
/// `method_f`, `src_only_f` and `mmd_to_source` are indexed by target
/// domain, `t = 1..=T`.
pub fn gain_vs_shift(method_f: &[f64], src_only_f: &[f64], mmd_to_source: &[f64]) -> Result<GainShift, MetricsError> {
    let deltas = relative_improvements(method_f, src_only_f)?;
    if deltas.len() != mmd_to_source.len() {
        return Err(MetricsError::LengthMismatch(deltas.len(), mmd_to_source.len()));
    }
    let pearson_r = match pearson_r(mmd_to_source, &deltas) {
        Ok(r) => Some(r),
        Err(MetricsError::ConstantInput) => None,
        Err(e) => return Err(e),
    };
    let points = deltas
        .iter()
        .zip(mmd_to_source)
        .enumerate()
        .map(|(i, (&delta_f, &mmd))| ScatterPoint { t: i + 1, mmd, delta_f })
        .collect();
    Ok(GainShift { points, pearson_r })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationInterval {
    pub pearson_r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Resamples on which the correlation was defined.
    pub n_valid: usize,
}

/// Bootstrap interval for the gain-versus-shift correlation. Each resample
/// redraws every domain's test set, recomputes the relative improvements of
/// A over B and correlates them with the fixed discrepancy vector.
pub fn gain_shift_bootstrap(
    domains: &[PairedDomain<'_>],
    mmd_to_source: &[f64],
    num_classes: usize,
    n: usize,
    level: f64,
    seed: u64,
) -> Result<CorrelationInterval, MetricsError> {
    check_bootstrap_args(n, level)?;
    if domains.len() != mmd_to_source.len() {
        return Err(MetricsError::LengthMismatch(domains.len(), mmd_to_source.len()));
    }
    for d in domains {
        d.check()?;
    }
    let full = |d: &PairedDomain<'_>| {
        (
            macro_f1(d.preds_a, d.golds, num_classes).expect("validated"),
            macro_f1(d.preds_b, d.golds, num_classes).expect("validated"),
        )
    };
    let (fa, fb): (Vec<f64>, Vec<f64>) = domains.iter().map(full).unzip();
    let r = gain_vs_shift(&fa, &fb, mmd_to_source)?.pearson_r.ok_or(MetricsError::ConstantInput)?;
    let stats: Vec<f64> = (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = rng_for(seed, "gain-shift-bootstrap", i as u64);
            let (fa, fb): (Vec<f64>, Vec<f64>) = domains
                .iter()
                .map(|d| {
                    let idx = draw(&mut rng, d.golds.len());
                    (
                        resampled_f1(d.preds_a, d.golds, &idx, num_classes),
                        resampled_f1(d.preds_b, d.golds, &idx, num_classes),
                    )
                })
                .unzip();
            let deltas = relative_improvements(&fa, &fb).ok()?;
            pearson_r(mmd_to_source, &deltas).ok()
        })
        .collect();
    if stats.is_empty() {
        return Err(MetricsError::ConstantInput);
    }
    let n_valid = stats.len();
    let mut sorted = stats;
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(CorrelationInterval {
        pearson_r: r,
        ci_low: quantile(&sorted, alpha),
        ci_high: quantile(&sorted, 1.0 - alpha),
        n_valid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson_r: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
}

/// Summary of one method on one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_domain_f: Vec<f64>,
    pub f_avg: f64,
    pub delta_avg_norm: Option<f64>,
    pub bootstrap: Option<BootstrapResult>,
    pub correlation: Option<Correlation>,
}

impl EvalReport {
    pub fn new(per_domain_f: Vec<f64>) -> Result<Self, MetricsError> {
        let f_avg = f_avg(&per_domain_f)?;
        Ok(EvalReport { per_domain_f, f_avg, delta_avg_norm: None, bootstrap: None, correlation: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn macro_f1_hand_examples() {
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        // Confusion: class 0 tp=1 fp=1 fn=1, class 1 likewise.
        assert_abs_diff_eq!(macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(macro_f1(&[1, 1], &[0, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn macro_f1_skips_classes_absent_on_both_sides() {
        // Class 2 never appears, so the mean runs over classes 0 and 1 only.
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
        // Class 2 appears only in the predictions: it counts with F1 = 0.
        assert_abs_diff_eq!(macro_f1(&[0, 2], &[0, 1], 3).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn macro_f1_errors() {
        assert_eq!(macro_f1(&[0], &[0, 1], 2), Err(MetricsError::LengthMismatch(1, 2)));
        assert_eq!(macro_f1(&[], &[], 2), Err(MetricsError::Empty));
        assert_eq!(macro_f1(&[2], &[0], 2), Err(MetricsError::LabelOutOfRange { label: 2, num_classes: 2 }));
    }

    #[test]
    fn f_avg_examples() {
        assert_abs_diff_eq!(f_avg(&[0.5, 0.7]).unwrap(), 0.6, epsilon = 1e-12);
        assert_eq!(f_avg(&[0.25; 7]).unwrap(), 0.25);
        assert_eq!(f_avg(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn relative_gain_examples() {
        assert_eq!(relative_gain(0.509, 0.509, 0.713).unwrap(), 0.0);
        assert_eq!(relative_gain(0.713, 0.509, 0.713).unwrap(), 1.0);
        assert_abs_diff_eq!(relative_gain(0.611, 0.509, 0.713).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(relative_gain(0.6, 0.5, 0.5), Err(MetricsError::DegenerateDenominator));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert_abs_diff_eq!(pearson_r(&x, &y).unwrap(), 1.0, epsilon = 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson_r(&x, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(pearson_r(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::ConstantInput));
    }

    #[test]
    fn bootstrap_of_identical_methods_is_zero() {
        let preds = [0, 1, 1, 0, 1];
        let golds = [0, 1, 0, 0, 1];
        let d = PairedDomain { preds_a: &preds, preds_b: &preds, golds: &golds };
        let res = paired_bootstrap(&[d], 2, 200, 0.95, 1, Resampling::PerDomain).unwrap();
        assert_eq!((res.diff_mean, res.ci_low, res.ci_high), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bootstrap_detects_dominance() {
        let golds: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let good = golds.clone();
        let bad: Vec<usize> = golds.iter().enumerate().map(|(i, &g)| if i % 3 == 0 { 1 - g } else { g }).collect();
        let d = PairedDomain { preds_a: &good, preds_b: &bad, golds: &golds };
        for mode in [Resampling::PerDomain, Resampling::Pooled] {
            let res = paired_bootstrap(&[d], 2, 1000, 0.95, 3, mode).unwrap();
            assert!(res.ci_low > 0.0, "{res:?}");
        }
    }

    #[test]
    fn single_resample_gives_degenerate_interval() {
        let golds = [0, 1, 1, 0];
        let a = [0, 1, 0, 0];
        let b = [1, 1, 0, 0];
        let d = PairedDomain { preds_a: &a, preds_b: &b, golds: &golds };
        let res = paired_bootstrap(&[d], 2, 1, 0.95, 9, Resampling::PerDomain).unwrap();
        assert_eq!(res.ci_low, res.diff_mean);
        assert_eq!(res.ci_high, res.diff_mean);
        assert_eq!(res.n_resamples, 1);
    }

    #[test]
    fn bootstrap_is_deterministic_per_seed() {
        let golds: Vec<usize> = (0..50).map(|i| (i * 7) % 3).collect();
        let a: Vec<usize> = (0..50).map(|i| (i * 5) % 3).collect();
        let d = PairedDomain { preds_a: &a, preds_b: &golds, golds: &golds };
        let r1 = paired_bootstrap(&[d, d], 3, 300, 0.9, 5, Resampling::PerDomain).unwrap();
        let r2 = paired_bootstrap(&[d, d], 3, 300, 0.9, 5, Resampling::PerDomain).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.ci_low <= r1.diff_mean && r1.diff_mean <= r1.ci_high);
    }

    #[test]
    fn bootstrap_argument_checks() {
        let g = [0usize];
        let d = PairedDomain { preds_a: &g, preds_b: &g, golds: &g };
        assert_eq!(paired_bootstrap(&[d], 2, 0, 0.95, 0, Resampling::PerDomain), Err(MetricsError::NoResamples));
        assert_eq!(
            paired_bootstrap(&[d], 2, 10, 1.0, 0, Resampling::PerDomain),
            Err(MetricsError::InvalidLevel(1.0))
        );
        let short = [0usize, 1];
        let bad = PairedDomain { preds_a: &short, preds_b: &g, golds: &g };
        assert!(paired_bootstrap(&[bad], 2, 10, 0.95, 0, Resampling::PerDomain).is_err());
    }

    #[test]
    fn gain_vs_shift_identical_methods_has_no_correlation() {
        let f = [0.8, 0.7, 0.6];
        let res = gain_vs_shift(&f, &f, &[0.1, 0.2, 0.3]).unwrap();
        assert!(res.points.iter().all(|p| p.delta_f == 0.0));
        assert_eq!(res.pearson_r, None);
        assert_eq!(res.points[2].t, 3);
    }

    #[test]
    fn gain_vs_shift_monotone_case() {
        let mmd = [0.01, 0.02, 0.05, 0.08, 0.12];
        let src = [0.9, 0.85, 0.8, 0.7, 0.6];
        let method = [0.91, 0.88, 0.86, 0.8, 0.75];
        let res = gain_vs_shift(&method, &src, &mmd).unwrap();
        assert!(res.pearson_r.unwrap() > 0.9);
        assert_eq!(gain_vs_shift(&[0.5], &[0.0], &[0.1]), Err(MetricsError::DegenerateDenominator));
    }

    #[test]
    fn eval_report_average() {
        let r = EvalReport::new(vec![0.5, 0.7, 0.9]).unwrap();
        assert_abs_diff_eq!(r.f_avg, 0.7, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn macro_f1_bounded_and_permutation_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            perm in Just([2usize, 0, 3, 1]),
        ) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let f = macro_f1(&p, &g, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let gg: Vec<usize> = g.iter().map(|&c| perm[c]).collect();
            prop_assert!((macro_f1(&pp, &gg, 4).unwrap() - f).abs() < 1e-12);
        }

        #[test]
        fn f_avg_is_linear(v in prop::collection::vec(0.0f64..1.0, 1..20), a in -3.0f64..3.0) {
            let scaled: Vec<f64> = v.iter().map(|x| a * x).collect();
            prop_assert!((f_avg(&scaled).unwrap() - a * f_avg(&v).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn relative_gain_shift_invariant(m in 0.0f64..1.0, s in 0.0f64..0.4, sup in 0.6f64..1.0, c in -1.0f64..1.0) {
            let base = relative_gain(m, s, sup).unwrap();
            let shifted = relative_gain(m + c, s + c, sup + c).unwrap();
            prop_assert!((base - shifted).abs() < 1e-9);
        }

        #[test]
        fn pearson_bounded_and_affine_invariant(
            xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            scale in 0.1f64..5.0,
            shift in -5.0f64..5.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
            if let Ok(r) = pearson_r(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                let xs: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
                let r2 = pearson_r(&xs, &y).unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }
    }
}
