//! Paired t-test, one-way ANOVA, KS uniformity test, fold summaries and
//! bootstrap confidence intervals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::stats::special::{f_sf, kolmogorov_q, t_two_sided_p};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// `(df, 0)` for t, `(df_between, df_within)` for F.
    pub df: (f64, f64),
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TestOutcome {
    Computed(TestResult),
    Degenerate { reason: String },
}

impl TestOutcome {
    pub fn result(&self) -> Option<&TestResult> {
        match self {
            TestOutcome::Computed(r) => Some(r),
            TestOutcome::Degenerate { .. } => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, TestOutcome::Degenerate { .. })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided paired t-test on `x − y` with `n − 1` degrees of freedom.
pub fn paired_ttest(x: &[f64], y: &[f64]) -> Result<TestOutcome> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("paired samples differ in length ({} vs {})", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least 2 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in paired samples"));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let m = mean(&d);
    let ss: f64 = d.iter().map(|v| (v - m) * (v - m)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    let scale = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if sd <= 1e-14 * scale.max(f64::MIN_POSITIVE) || sd == 0.0 {
        return Ok(TestOutcome::Degenerate {
            reason: "differences have zero variance".into(),
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    Ok(TestOutcome::Computed(TestResult {
        statistic: t,
        df: (df, 0.0),
        p: t_two_sided_p(t, df),
    }))
}

/// One-way ANOVA F-test across groups.
pub fn oneway_anova(groups: &[Vec<f64>]) -> Result<TestOutcome> {
    if groups.len() < 2 {
        return Err(Error::invalid("ANOVA needs at least 2 groups"));
    }
    if let Some(i) = groups.iter().position(|g| g.len() < 2) {
        return Err(Error::invalid(format!("ANOVA group {i} has fewer than 2 values")));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in ANOVA groups"));
    }
    let k = groups.len();
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = mean(g);
        ss_between += g.len() as f64 * (m - grand) * (m - grand);
        ss_within += g.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let df1 = (k - 1) as f64;
    let df2 = (n - k) as f64;
    let scale = groups.iter().flatten().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if ss_within <= 1e-28 * scale {
        return Ok(TestOutcome::Degenerate {
            reason: if ss_between <= 1e-28 * scale {
                "all values identical".into()
            } else {
                "zero within-group variance".into()
            },
        });
    }
    let f = (ss_between / df1) / (ss_within / df2);
    Ok(TestOutcome::Computed(TestResult {
        statistic: f,
        df: (df1, df2),
        p: f_sf(f, df1, df2),
    }))
}

/// One-sample Kolmogorov–Smirnov test against U(0, 1), asymptotic p-value
/// with Stephens' small-sample correction. Returns `(D, p)`.
pub fn ks_uniform(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("KS test needs at least one value"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        d = d.max((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n);
    }
    let sn = n.sqrt();
    Ok((d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation (divides by N).
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize zero values"));
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    Ok(Summary {
        mean: m,
        std: var.sqrt(),
        n: values.len(),
    })
}

/// Linear-interpolation quantile of sorted data (the "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap CI of the mean of `values`.
///
/// Resample `b` draws `n` indices uniformly with replacement from the stream
/// `rng::stream(seed, &[b])`, each via `random_range(0..n)`.
pub fn bootstrap_ci(values: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 fold values"));
    }
    if n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("bootstrap needs n_boot >= 1 and 0 < level < 1"));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..n_boot)
        .map(|b| {
            let mut rng = stream(seed, &[b as u64]);
            (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let lo = quantile_sorted(&means, alpha / 2.0);
    let hi = quantile_sorted(&means, 1.0 - alpha / 2.0);
    // clamp guards float rounding when all resample means coincide
    let m = mean(values);
    Ok((lo.min(m), hi.max(m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const X: [f64; 16] = [0.21, 0.18, 0.25, 0.19, 0.22, 0.17, 0.24, 0.2, 0.16, 0.23, 0.19, 0.21, 0.18, 0.26, 0.2, 0.15];
    const Y: [f64; 16] = [0.24, 0.2, 0.23, 0.25, 0.27, 0.18, 0.26, 0.24, 0.21, 0.22, 0.25, 0.2, 0.23, 0.27, 0.24, 0.19];

    #[test]
    fn ttest_fixture() {
        // frozen from scipy.stats.ttest_rel
        let r = *paired_ttest(&X, &Y).unwrap().result().unwrap();
        assert!((r.statistic - -4.281744192888377).abs() < 1e-9);
        assert!((r.p - 0.0006554461873166054).abs() < 1e-6);
        assert_eq!(r.df.0, 15.0);
        let s = *paired_ttest(&Y, &X).unwrap().result().unwrap();
        assert_eq!(s.statistic, -r.statistic);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn ttest_degenerate() {
        let y: Vec<f64> = X.iter().map(|v| v + 0.5).collect();
        assert!(paired_ttest(&X, &y).unwrap().is_degenerate());
        assert!(paired_ttest(&X[..1], &Y[..1]).is_err());
        assert!(paired_ttest(&X, &Y[..3]).is_err());
    }

    #[test]
    fn anova_fixture() {
        let g = vec![vec![0.12, 0.18, 0.15], vec![0.22, 0.25, 0.2, 0.27], vec![0.14, 0.11]];
        let r = *oneway_anova(&g).unwrap().result().unwrap();
        assert!((r.statistic - 12.119741100323612).abs() < 1e-9);
        assert!((r.p - 0.0078114327845633935).abs() < 1e-6);
        assert_eq!(r.df, (2.0, 6.0));
        let relabeled = vec![g[2].clone(), g[0].clone(), g[1].clone()];
        let r2 = *oneway_anova(&relabeled).unwrap().result().unwrap();
        assert!((r.statistic - r2.statistic).abs() < 1e-12);
    }

    #[test]
    fn anova_edge_cases() {
        let same = oneway_anova(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert!(same.result().unwrap().statistic.abs() < 1e-15);
        assert!(oneway_anova(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap().is_degenerate());
        assert!(oneway_anova(&[vec![2.0, 2.0]]).is_err());
        assert!(oneway_anova(&[vec![2.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn ks_behaviour() {
        let (d, p) = ks_uniform(&[0.1, 0.35, 0.5, 0.62, 0.9]).unwrap();
        assert!((d - 0.18).abs() < 1e-12);
        assert!(p > 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        assert!(ks_uniform(&u).unwrap().1 > 0.01);
        let skewed: Vec<f64> = u.iter().map(|v| v * v).collect();
        assert!(ks_uniform(&skewed).unwrap().1 < 1e-6);
    }

    #[test]
    fn bootstrap_properties() {
        assert_eq!(bootstrap_ci(&[0.4; 5], 1000, 0.95, 1).unwrap(), (0.4, 0.4));
        let v = [0.08, 0.12, 0.1, 0.09, 0.13, 0.11];
        let (lo, hi) = bootstrap_ci(&v, 10_000, 0.95, 7).unwrap();
        let m = v.iter().sum::<f64>() / 6.0;
        assert!(lo <= m && m <= hi && lo < hi);
        assert_eq!(bootstrap_ci(&v, 10_000, 0.95, 7).unwrap(), (lo, hi));
        assert!(bootstrap_ci(&[0.1], 100, 0.95, 0).is_err());
    }

    #[test]
    fn bootstrap_matches_reference_resampler() {
        // independent re-implementation of the documented resampling contract
        let v = [0.3, 0.1, 0.7, 0.2, 0.5];
        let mut means = Vec::new();
        for b in 0..2000u64 {
            let mut rng = stream(42, &[b]);
            let mut s = 0.0;
            for _ in 0..v.len() {
                s += v[rng.random_range(0..v.len())];
            }
            means.push(s / v.len() as f64);
        }
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = |q: f64| {
            let h = 1999.0 * q;
            let (l, u) = (h.floor() as usize, h.ceil() as usize);
            means[l] + (h - l as f64) * (means[u] - means[l])
        };
        assert_eq!(bootstrap_ci(&v, 2000, 0.9, 42).unwrap(), (pos(0.05), pos(0.95)));
    }

    #[test]
    fn population_std() {
        let s = summarize(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 2));
    }
}
