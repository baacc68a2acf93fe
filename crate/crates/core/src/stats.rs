//! Statistics over replica samples: normality tests, power-law fits and
//! covariance estimates with jackknife errors. Everything here runs in `f64`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};

/// Outcome of a Kolmogorov–Smirnov normality test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianityResult {
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Mean and unbiased standard deviation.
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of the standardized samples against `N(0, 1)`,
/// p-value from Stephens' finite-sample correction
/// `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn gaussianity_test(samples: &[f64], significance: f64) -> Result<GaussianityResult> {
    let n = samples.len();
    if n < 50 {
        return Err(invalid(format!("normality test needs at least 50 samples, got {n}")));
    }
    if !(0.0..1.0).contains(&significance) {
        return Err(invalid("significance must lie in (0, 1)"));
    }
    let (mean, sd) = mean_sd(samples);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Degenerate("samples have zero variance".into()));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mut z: Vec<f64> = samples.iter().map(|v| (v - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in z.iter().enumerate() {
        let cdf = std.cdf(v);
        d = d.max((i as f64 + 1.0) / nf - cdf).max(cdf - i as f64 / nf);
    }
    let root = nf.sqrt();
    let p_value = kolmogorov_q((root + 0.12 + 0.11 / root) * d);
    Ok(GaussianityResult { n, statistic: d, p_value, reject: p_value < significance })
}

/// Least-squares line through `(log N, log error)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn rate_fit(n_values: &[f64], errors: &[f64]) -> Result<RateFit> {
    if n_values.len() != errors.len() {
        return Err(Error::DimensionMismatch { expected: n_values.len(), got: errors.len() });
    }
    if n_values.len() < 3 {
        return Err(invalid("rate fit needs at least three widths"));
    }
    if errors.iter().chain(n_values).any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(invalid("rate fit needs positive finite widths and errors"));
    }
    let x: Vec<f64> = n_values.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("rate fit needs at least two distinct widths"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(RateFit { slope, intercept, r2 })
}

/// Unbiased covariance of `k` variables with jackknife standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub k: usize,
    pub replicas: usize,
    /// Row-major `k × k`.
    pub cov: Vec<f64>,
    pub se: Vec<f64>,
}

impl CovarianceEstimate {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.cov[a * self.k + b]
    }

    pub fn se(&self, a: usize, b: usize) -> f64 {
        self.se[a * self.k + b]
    }
}

/// `rows[r][i]` is variable `i` in replica `r`.
pub fn covariance_with_jackknife(rows: &[Vec<f64>]) -> Result<CovarianceEstimate> {
    let r = rows.len();
    if r < 3 {
        return Err(invalid("covariance needs at least three replicas"));
    }
    let k = rows[0].len();
    if let Some(bad) = rows.iter().find(|row| row.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, got: bad.len() });
    }
    let rf = r as f64;
    let mean: Vec<f64> = (0..k).map(|i| rows.iter().map(|row| row[i]).sum::<f64>() / rf).collect();
    let dev: Vec<Vec<f64>> = rows.iter().map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut s = vec![0.0; k * k];
    for d in &dev {
        for a in 0..k {
            for b in 0..k {
                s[a * k + b] += d[a] * d[b];
            }
        }
    }
    let cov: Vec<f64> = s.iter().map(|v| v / (rf - 1.0)).collect();
    // Leave-one-out: S^{(i)} = S − R/(R−1) d_i d_iᵀ, estimate S^{(i)}/(R−2).
    let shrink = rf / (rf - 1.0);
    let mut se = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let loo: Vec<f64> = dev.iter().map(|d| (s[a * k + b] - shrink * d[a] * d[b]) / (rf - 2.0)).collect();
            let m = loo.iter().sum::<f64>() / rf;
            let var = loo.iter().map(|v| (v - m).powi(2)).sum::<f64>() * (rf - 1.0) / rf;
            se[a * k + b] = var.sqrt();
        }
    }
    Ok(CovarianceEstimate { k, replicas: r, cov, se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = stream(seed, Purpose::Synthetic, 0, 0);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // Classical critical values of the limiting distribution.
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 2e-4);
        assert!((kolmogorov_q(1.6276) - 0.01).abs() < 1e-4);
        assert!((kolmogorov_q(1.2238) - 0.10).abs() < 2e-4);
    }

    #[test]
    fn calibrated_under_the_null() {
        let rejections = (0..100)
            .filter(|&s| gaussianity_test(&normals(1000 + s, 1000), 0.01).unwrap().reject)
            .count();
        assert!(rejections <= 2, "{rejections} rejections");
    }

    #[test]
    fn rejects_uniform_samples() {
        let mut rng = stream(7, Purpose::Synthetic, 0, 1);
        let u: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let res = gaussianity_test(&u, 0.01).unwrap();
        assert!(res.reject, "p = {}", res.p_value);
    }

    #[test]
    fn degenerate_and_small_inputs() {
        assert!(matches!(gaussianity_test(&[2.0; 60], 0.01), Err(Error::Degenerate(_))));
        assert!(gaussianity_test(&normals(1, 49), 0.01).is_err());
    }

    #[test]
    fn exact_power_laws() {
        let n = [250.0, 1000.0, 4000.0, 16000.0];
        let e: Vec<f64> = n.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        let f = rate_fit(&n, &e).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let e1: Vec<f64> = n.iter().map(|v| 0.2 / v).collect();
        assert!((rate_fit(&n, &e1).unwrap().slope + 1.0).abs() < 1e-12);
        assert!(rate_fit(&n, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(rate_fit(&n[..2], &e[..2]).is_err());
    }

    #[test]
    fn covariance_of_zero_and_independent_columns() {
        let zero = vec![vec![0.0; 3]; 40];
        let est = covariance_with_jackknife(&zero).unwrap();
        assert!(est.cov.iter().all(|&v| v == 0.0));
        let r = 400;
        let cols: Vec<Vec<f64>> = (0..3).map(|j| normals(50 + j, r)).collect();
        let rows: Vec<Vec<f64>> = (0..r).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let est = covariance_with_jackknife(&rows).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert!(est.get(a, b).abs() < 3.0 / (r as f64).sqrt());
                    assert_eq!(est.get(a, b), est.get(b, a));
                }
            }
            assert!((est.get(a, a) - 1.0).abs() < 4.0 * est.se(a, a));
        }
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let x = normals(3, 30);
        let y: Vec<f64> = normals(4, 30).iter().zip(&x).map(|(a, b)| a + 0.5 * b).collect();
        let rows: Vec<Vec<f64>> = x.iter().zip(&y).map(|(a, b)| vec![*a, *b]).collect();
        let est = covariance_with_jackknife(&rows).unwrap();
        let cov = |rs: &[Vec<f64>]| {
            let n = rs.len() as f64;
            let mx = rs.iter().map(|r| r[0]).sum::<f64>() / n;
            let my = rs.iter().map(|r| r[1]).sum::<f64>() / n;
            rs.iter().map(|r| (r[0] - mx) * (r[1] - my)).sum::<f64>() / (n - 1.0)
        };
        assert!((est.get(0, 1) - cov(&rows)).abs() < 1e-13);
        let loo: Vec<f64> = (0..30)
            .map(|i| {
                let mut rs = rows.clone();
                rs.remove(i);
                cov(&rs)
            })
            .collect();
        let m = loo.iter().sum::<f64>() / 30.0;
        let se = (loo.iter().map(|v| (v - m).powi(2)).sum::<f64>() * 29.0 / 30.0).sqrt();
        assert!((est.se(0, 1) - se).abs() < 1e-12);
    }
}
