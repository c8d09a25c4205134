//! Shared machinery for stochastic-ascent conditional MLE fits.
//!
//! Both selected-normal-means and lasso fits run the same outer loop: a
//! Robbins-Monro ascent with step sizes γ_i = a/√i (divergent sum, summable
//! squares), a tail average of the iterates as the returned estimate, and an
//! empirical-pivot confidence interval built from post-convergence draws.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};

/// Tuning knobs for the ascent loop and the post-convergence sampling pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentOptions {
    /// Number of ascent steps I.
    pub n_steps: usize,
    /// Gibbs cycles per ascent step T.
    pub gibbs_cycles_per_step: usize,
    /// Base step scale a; the fit divides it by a problem-dependent
    /// curvature bound before forming γ_i = a/√i.
    pub step_scale: f64,
    /// Post-convergence draws N used for pivot quantiles.
    pub quantile_samples: usize,
    /// Cycles discarded before collecting the N draws.
    pub burn_in: usize,
    /// Cycles between kept draws.
    pub thin: usize,
    /// Confidence level 1−α for the intervals stored on the fit.
    pub ci_level: f64,
    /// Maximum full restarts when the score residual at the returned
    /// estimate fails its Monte-Carlo root check (chain trapped in a
    /// low-probability sign assignment).
    pub max_attempts: usize,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            n_steps: 1000,
            gibbs_cycles_per_step: 1,
            step_scale: 1.0,
            quantile_samples: 2000,
            burn_in: 200,
            thin: 2,
            ci_level: 0.95,
            max_attempts: 3,
        }
    }
}

impl AscentOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "n_steps",
                value: 0.0,
                reason: "at least one ascent step is required",
            });
        }
        if self.gibbs_cycles_per_step == 0 {
            return Err(Error::InvalidParameter {
                name: "gibbs_cycles_per_step",
                value: 0.0,
                reason: "at least one cycle per step is required",
            });
        }
        if !(self.step_scale.is_finite() && self.step_scale > 0.0) {
            return Err(Error::InvalidParameter {
                name: "step_scale",
                value: self.step_scale,
                reason: "step scale must be positive and finite",
            });
        }
        if self.quantile_samples == 0 {
            return Err(Error::InvalidParameter {
                name: "quantile_samples",
                value: 0.0,
                reason: "at least one quantile sample is required",
            });
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter {
                name: "thin",
                value: 0.0,
                reason: "thinning interval must be at least 1",
            });
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidParameter {
                name: "ci_level",
                value: self.ci_level,
                reason: "confidence level must lie in (0, 1)",
            });
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidParameter {
                name: "max_attempts",
                value: 0.0,
                reason: "at least one fitting attempt is required",
            });
        }
        Ok(())
    }
}

/// Step size γ_i = a/√i for the i-th step (1-based).
pub fn step_size(a: f64, i: usize) -> f64 {
    debug_assert!(i >= 1);
    a / (i as f64).sqrt()
}

/// Number of trailing iterates averaged into the returned estimate.
pub fn tail_len(n_steps: usize) -> usize {
    (n_steps as f64 * 0.2).ceil() as usize
}

/// Mean of the last `tail_len(history.len())` iterates.
pub fn tail_average(history: &[DVector<f64>]) -> DVector<f64> {
    let keep = tail_len(history.len()).min(history.len()).max(1);
    let dim = history.last().expect("nonempty history").len();
    let mut acc = DVector::zeros(dim);
    for it in &history[history.len() - keep..] {
        acc += it;
    }
    acc / keep as f64
}

/// Batch-means standard error of the tail average of `history` after mapping
/// each iterate through `map` into statistic scale. This is the estimate's
/// own contribution to the Monte-Carlo error of a score residual evaluated at
/// the tail average; the collection pass's `stat_stderr` covers only the
/// sampling half. Returns zeros when the tail window is too short to batch.
pub fn tail_average_stderr(history: &[DVector<f64>], map: &DMatrix<f64>) -> DVector<f64> {
    let m = map.nrows();
    let keep = tail_len(history.len()).min(history.len()).max(1);
    if keep < 4 {
        return DVector::zeros(m);
    }
    let mapped: Vec<DVector<f64>> = history[history.len() - keep..]
        .iter()
        .map(|b| map * b)
        .collect();
    DVector::from_iterator(
        m,
        (0..m).map(|j| {
            let col: Vec<f64> = mapped.iter().map(|v| v[j]).collect();
            batch_means_stderr(&col, MC_BATCHES.min(keep / 2).max(2))
        }),
    )
}

/// Linear-interpolation empirical quantile of `values` at probability `p`
/// (the convention used by most statistics packages by default).
pub fn empirical_quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    }
}

/// Batch-means standard error of the mean of a (possibly autocorrelated)
/// scalar sequence, using `n_batches` equal batches.
pub fn batch_means_stderr(values: &[f64], n_batches: usize) -> f64 {
    assert!(n_batches >= 2);
    assert!(values.len() >= n_batches);
    let bs = values.len() / n_batches;
    let mut means = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut acc = 0.0;
        for r in 0..bs {
            acc += values[b * bs + r];
        }
        means.push(acc / bs as f64);
    }
    let grand: f64 = means.iter().sum::<f64>() / n_batches as f64;
    let var: f64 = means
        .iter()
        .map(|m| (m - grand) * (m - grand))
        .sum::<f64>()
        / (n_batches - 1) as f64;
    (var / n_batches as f64).sqrt()
}

/// Default batch count for Monte-Carlo standard errors.
pub const MC_BATCHES: usize = 20;

/// Summary of the post-convergence sampling pass shared by both fits.
#[derive(Debug, Clone)]
pub struct PivotSummary {
    /// N×m matrix of pivot draws V̂⁻¹(u_t − ū).
    pub pivot_draws: DMatrix<f64>,
    /// Mean ū of the raw statistic draws.
    pub stat_mean: DVector<f64>,
    /// Batch-means standard error of each coordinate of ū.
    pub stat_stderr: DVector<f64>,
}

/// Center the raw statistic draws (rows of `stats`, one per kept sample),
/// estimate their covariance V̂, and map each through V̂⁻¹.
pub fn summarize_pivots(stats: &DMatrix<f64>) -> Result<PivotSummary> {
    let n = stats.nrows();
    let m = stats.ncols();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = DVector::from_iterator(m, (0..m).map(|j| stats.column(j).sum() / n as f64));
    let mut cov = DMatrix::zeros(m, m);
    for t in 0..n {
        for i in 0..m {
            let di = stats[(t, i)] - mean[i];
            for j in i..m {
                cov[(i, j)] += di * (stats[(t, j)] - mean[j]);
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let chol = Cholesky::new(cov).ok_or(Error::SingularCovariance { cond: f64::INFINITY })?;
    let mut pivots = DMatrix::zeros(n, m);
    for t in 0..n {
        let d = DVector::from_iterator(m, (0..m).map(|j| stats[(t, j)] - mean[j]));
        let p = chol.solve(&d);
        pivots.row_mut(t).copy_from(&p.transpose());
    }
    let stderr = DVector::from_iterator(
        m,
        (0..m).map(|j| {
            let col: Vec<f64> = (0..n).map(|t| stats[(t, j)]).collect();
            batch_means_stderr(&col, MC_BATCHES.min(n / 2).max(2))
        }),
    );
    Ok(PivotSummary {
        pivot_draws: pivots,
        stat_mean: mean,
        stat_stderr: stderr,
    })
}

/// Empirical-pivot confidence intervals: coordinate j gets
/// (est_j − q_{1−α/2,j}, est_j − q_{α/2,j}) from pivot-draw quantiles.
///
/// Errors with `InsufficientSamples` when fewer than 100/α draws are
/// available, since the extreme quantiles would rest on a handful of points.
pub fn pivot_intervals(
    estimate: &DVector<f64>,
    pivot_draws: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            reason: "miscoverage level must lie in (0, 1)",
        });
    }
    let n = pivot_draws.nrows();
    let needed = (100.0 / alpha).ceil() as usize;
    if n < needed {
        return Err(Error::InsufficientSamples { needed, got: n });
    }
    let m = pivot_draws.ncols();
    assert_eq!(estimate.len(), m);
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    for j in 0..m {
        let col: Vec<f64> = (0..n).map(|t| pivot_draws[(t, j)]).collect();
        let q_hi = empirical_quantile(&col, 1.0 - alpha / 2.0);
        let q_lo = empirical_quantile(&col, alpha / 2.0);
        lower[j] = estimate[j] - q_hi;
        upper[j] = estimate[j] - q_lo;
    }
    Ok((lower, upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn test_step_sizes_are_admissible() {
        // Σ γ_i diverges and Σ γ_i² converges for γ_i = a/√i: the partial
        // sums bracket 2(√(n+1)−1) and the squares bracket 1 + ln n
        let a = 0.7;
        let n = 100_000;
        let sum: f64 = (1..=n).map(|i| step_size(a, i)).sum();
        let sum_sq: f64 = (1..=n).map(|i| step_size(a, i).powi(2)).sum();
        assert!(sum > a * 2.0 * ((n as f64 + 1.0).sqrt() - 1.0) - a);
        assert!(sum_sq < a * a * (1.0 + (n as f64).ln()));
        // divergence: doubling the horizon keeps growing the sum
        let sum2: f64 = (1..=2 * n).map(|i| step_size(a, i)).sum();
        assert!(sum2 > sum + a * 0.8 * (2.0f64.sqrt() - 1.0) * (n as f64).sqrt());
    }

    #[test]
    fn test_tail_average_takes_last_fifth() {
        let history: Vec<DVector<f64>> = (0..10)
            .map(|i| DVector::from_vec(vec![i as f64]))
            .collect();
        let avg = tail_average(&history);
        assert_relative_eq!(avg[0], 8.5, max_relative = 1e-14); // mean of {8, 9}
    }

    #[test]
    fn test_empirical_quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(empirical_quantile(&v, 0.0), 1.0);
        assert_relative_eq!(empirical_quantile(&v, 1.0), 4.0);
        assert_relative_eq!(empirical_quantile(&v, 0.5), 2.5);
        assert_relative_eq!(empirical_quantile(&v, 1.0 / 3.0), 2.0);
    }

    #[test]
    fn test_batch_means_on_iid_matches_naive() {
        let mut rng = crate::rng::seed_rng(3);
        let vals: Vec<f64> = (0..4000).map(|_| rng.gen::<f64>() - 0.5).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let naive = (var / n).sqrt();
        let bm = batch_means_stderr(&vals, 20);
        // iid data: the two estimators agree up to batch noise
        assert!((bm - naive).abs() < naive, "bm {bm} naive {naive}");
    }

    #[test]
    fn test_pivot_intervals_recover_gaussian_wald() {
        // iid N(0, V) statistic draws: the pivot is N(0, V^{-1}) and the
        // interval half-width approaches z_{.975} sqrt((V^{-1})_{jj})
        let mut rng = crate::rng::seed_rng(21);
        let n = 40_000;
        let sd = 2.0;
        let mut stats = DMatrix::zeros(n, 1);
        for t in 0..n {
            // Box-Muller from two uniforms keeps this test self-contained
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            stats[(t, 0)] = sd * z;
        }
        let summary = summarize_pivots(&stats).unwrap();
        let est = DVector::from_vec(vec![0.0]);
        let (lo, hi) = pivot_intervals(&est, &summary.pivot_draws, 0.05).unwrap();
        // V = 4, pivot variance 1/4, so half-width ≈ 1.96/2 = 0.98
        assert!((hi[0] - lo[0]) / 2.0 > 0.9 && (hi[0] - lo[0]) / 2.0 < 1.06);
        assert!(summary.stat_mean[0].abs() < 4.0 * summary.stat_stderr[0]);
    }

    #[test]
    fn test_pivot_intervals_need_enough_draws() {
        let draws = DMatrix::zeros(500, 1);
        let est = DVector::zeros(1);
        assert!(matches!(
            pivot_intervals(&est, &draws, 0.05),
            Err(Error::InsufficientSamples { needed: 2000, .. })
        ));
    }

    #[test]
    fn test_options_validation() {
        assert!(AscentOptions::default().validate().is_ok());
        let mut bad = AscentOptions::default();
        bad.ci_level = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = AscentOptions::default();
        bad.thin = 0;
        assert!(bad.validate().is_err());
    }
}
