//! Replicated simulation harness: synthetic sparse-regression data,
//! per-replicate fits under each requested method, and aggregation of
//! estimation, prediction, and interval metrics.
//!
//! The inferential target throughout is the projected truth
//! β₀(y) = (X_M^T X_M)⁻¹ X_M^T μ of the selected model, not the sparse
//! generating coefficients: intervals are judged on the coefficients of
//! the model the selection procedure actually chose.

use crate::ascent::AscentOptions;
use crate::error::{Error, Result};
use crate::event::{eta_xi, selection_event};
use crate::lasso::{cv_lambda, default_lambda_grid, fit_lasso, Dataset, LambdaRule};
use crate::lasso_mle::{fit_lasso_mle, refitted_wald_ci, ImputationStrategy};
use crate::rng::{stream_rng, Phase};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

/// Version stamp written into every emitted table.
pub const SCHEMA_VERSION: u32 = 1;

/// Folds used for penalty cross-validation inside replicates.
pub const CV_FOLDS: usize = 10;

/// Estimation/inference methods a simulation can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lasso,
    Refitted,
    Conditional,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lasso => "lasso",
            Method::Refitted => "refitted",
            Method::Conditional => "conditional",
        }
    }
}

/// Full description of one simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    /// Number of nonzero generating coefficients.
    pub k: usize,
    /// AR(1) design correlation.
    pub rho: f64,
    pub snr: f64,
    pub reps: u64,
    pub seed: u64,
    pub lambda_rule: LambdaRule,
    pub ci_level: f64,
    pub methods: Vec<Method>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p == 0 {
            return Err(Error::InvalidParameter {
                name: "n",
                value: self.n as f64,
                reason: "need at least two observations and one column",
            });
        }
        if self.k > self.p {
            return Err(Error::InvalidParameter {
                name: "k",
                value: self.k as f64,
                reason: "cannot exceed the number of columns",
            });
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidParameter {
                name: "rho",
                value: self.rho,
                reason: "design correlation must lie in [0, 1)",
            });
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "snr",
                value: self.snr,
                reason: "signal-to-noise ratio must be positive and finite",
            });
        }
        if self.reps == 0 {
            return Err(Error::InvalidParameter {
                name: "reps",
                value: 0.0,
                reason: "at least one replicate is required",
            });
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidParameter {
                name: "ci_level",
                value: self.ci_level,
                reason: "confidence level must lie in (0, 1)",
            });
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter {
                name: "methods",
                value: 0.0,
                reason: "at least one method is required",
            });
        }
        Ok(())
    }

    fn wants(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

/// Rows i.i.d. N_p(0, Σ) with Σ_{ij} = ρ^{|i−j|}, built by the AR(1)
/// recursion x_j = ρ x_{j−1} + sqrt(1 − ρ²) z_j along each row.
pub fn gen_design<R: Rng + ?Sized>(n: usize, p: usize, rho: f64, rng: &mut R) -> DMatrix<f64> {
    let scale = (1.0 - rho * rho).sqrt();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut prev: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        x[(i, 0)] = prev;
        for j in 1..p {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            prev = rho * prev + scale * z;
            x[(i, j)] = prev;
        }
    }
    x
}

fn laplace_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // exponential magnitude with a random sign; u < 1 so the log is finite
    let u: f64 = rng.gen();
    let mag = -(1.0 - u).ln();
    if rng.gen::<bool>() {
        mag
    } else {
        -mag
    }
}

/// Sparse coefficient vector: k uniformly chosen coordinates receive
/// i.i.d. Laplace(1) draws, the rest are zero.
pub fn gen_coefs<R: Rng + ?Sized>(p: usize, k: usize, rng: &mut R) -> DVector<f64> {
    assert!(k <= p, "support size exceeds dimension");
    let mut order: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut support: Vec<usize> = order.into_iter().take(k).collect();
    support.sort_unstable();
    let mut beta = DVector::zeros(p);
    for idx in support {
        beta[idx] = laplace_unit(rng);
    }
    beta
}

/// Response draw y = Xβ + ε with the noise level chosen so that
/// sample-variance(Xβ)/σ² equals the requested signal-to-noise ratio.
#[derive(Debug, Clone)]
pub struct Response {
    pub y: DVector<f64>,
    pub sigma2: f64,
    /// Set when Var(Xβ) = 0 (e.g. k = 0); σ² falls back to 1.
    pub zero_signal: bool,
}

pub fn gen_response<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    snr: f64,
    rng: &mut R,
) -> Result<Response> {
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "snr",
            value: snr,
            reason: "signal-to-noise ratio must be positive and finite",
        });
    }
    let n = x.nrows();
    let mu = x * beta;
    let mean = mu.sum() / n as f64;
    let var = mu.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let (sigma2, zero_signal) = if var > 0.0 { (var / snr, false) } else { (1.0, true) };
    let sd = sigma2.sqrt();
    let y = DVector::from_fn(n, |i, _| {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        mu[i] + sd * z
    });
    Ok(Response {
        y,
        sigma2,
        zero_signal,
    })
}

/// Per-replicate metrics for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRep {
    /// Mean over selected coordinates of
    /// log₂((β̂_j − β₀_j)²) − log₂((β̂_lasso,j − β₀_j)²).
    pub rel_mse: f64,
    /// log₂‖Xβ̂ − μ‖² − log₂‖Xβ̂_lasso − μ‖².
    pub rel_pred: f64,
    /// Per-coordinate indicators: CI_j covers β₀(y)_j.
    pub coverage: Vec<u8>,
    /// Per-coordinate CI lengths (+∞ allowed as a sentinel).
    pub lengths: Vec<f64>,
}

/// Outcome of one simulation replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub rep_id: u64,
    pub selected_size: usize,
    /// The lasso selected nothing; metric fields are absent.
    pub null_selection: bool,
    pub zero_signal: bool,
    pub lambda: f64,
    pub wall_time_ms: f64,
    pub lasso: Option<MethodRep>,
    pub refitted: Option<MethodRep>,
    pub conditional: Option<MethodRep>,
}

fn coverage_indicator(lo: f64, hi: f64, target: f64) -> u8 {
    u8::from(lo <= target && target <= hi)
}

fn log2_sq(d: f64) -> f64 {
    (d * d).log2()
}

fn eq33(estimate: &DVector<f64>, baseline: &DVector<f64>, target: &DVector<f64>) -> f64 {
    let m = estimate.len();
    (0..m)
        .map(|j| log2_sq(estimate[j] - target[j]) - log2_sq(baseline[j] - target[j]))
        .sum::<f64>()
        / m as f64
}

fn embed(estimate: &DVector<f64>, active: &[usize], p: usize) -> DVector<f64> {
    let mut full = DVector::zeros(p);
    for (k, &j) in active.iter().enumerate() {
        full[j] = estimate[k];
    }
    full
}

fn sampler_options(config: &SimConfig) -> AscentOptions {
    let alpha = 1.0 - config.ci_level;
    let needed = (100.0 / alpha).ceil() as usize + 1;
    let defaults = AscentOptions::default();
    AscentOptions {
        ci_level: config.ci_level,
        quantile_samples: defaults.quantile_samples.max(needed),
        ..defaults
    }
}

/// Generate data for replicate `rep_id` of `config`, fit every requested
/// method, and score them against the projected truth of the selected model.
pub fn run_replicate(config: &SimConfig, rep_id: u64) -> Result<RepResult> {
    config.validate()?;
    let start = Instant::now();
    let x = {
        let mut rng = stream_rng(config.seed, rep_id, Phase::Design);
        gen_design(config.n, config.p, config.rho, &mut rng)
    };
    let beta_true = {
        let mut rng = stream_rng(config.seed, rep_id, Phase::Coefs);
        gen_coefs(config.p, config.k, &mut rng)
    };
    let resp = {
        let mut rng = stream_rng(config.seed, rep_id, Phase::Noise);
        gen_response(&x, &beta_true, config.snr, &mut rng)?
    };
    let mu = &x * &beta_true;
    let sigma2 = resp.sigma2;
    let data = Dataset::new(x, resp.y)?;
    let grid = default_lambda_grid(&data);
    let lambda = cv_lambda(
        &data,
        CV_FOLDS,
        &grid,
        config.lambda_rule,
        config.seed,
        rep_id,
    )?;
    let fit = fit_lasso(&data, lambda)?;
    if fit.active.is_empty() {
        return Ok(RepResult {
            rep_id,
            selected_size: 0,
            null_selection: true,
            zero_signal: resp.zero_signal,
            lambda,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            lasso: None,
            refitted: None,
            conditional: None,
        });
    }

    let event = selection_event(&data.x, &fit.active, &fit.signs, lambda)?;
    let stats = eta_xi(&data.x, &data.y, &event, sigma2)?;
    // projected truth of the selected model
    let xm = data.x.select_columns(&fit.active);
    let target = &event.xtx_m_inv * (xm.transpose() * &mu);
    let lasso_m = DVector::from_iterator(
        fit.active.len(),
        fit.active.iter().map(|&j| fit.beta[j]),
    );
    let pred_lasso = (&data.x * &fit.beta - &mu).norm_squared().log2();
    let alpha = 1.0 - config.ci_level;

    let lasso_rep = config.wants(Method::Lasso).then(|| MethodRep {
        rel_mse: eq33(&lasso_m, &lasso_m, &target),
        rel_pred: 0.0,
        coverage: Vec::new(),
        lengths: Vec::new(),
    });

    let refitted_rep = if config.wants(Method::Refitted) {
        let (lo, hi) = refitted_wald_ci(&event, &stats.eta, sigma2, alpha)?;
        let pred = (&data.x * embed(&stats.eta, &fit.active, config.p) - &mu)
            .norm_squared()
            .log2();
        Some(MethodRep {
            rel_mse: eq33(&stats.eta, &lasso_m, &target),
            rel_pred: pred - pred_lasso,
            coverage: (0..target.len())
                .map(|j| coverage_indicator(lo[j], hi[j], target[j]))
                .collect(),
            lengths: (0..target.len()).map(|j| hi[j] - lo[j]).collect(),
        })
    } else {
        None
    };

    let conditional_rep = if config.wants(Method::Conditional) {
        let opts = sampler_options(config);
        let mut rng = stream_rng(config.seed, rep_id, Phase::Sampler);
        let out = fit_lasso_mle(
            &data,
            lambda,
            sigma2,
            &ImputationStrategy::Zero,
            &opts,
            &mut rng,
        )?;
        let pred = (&data.x * embed(&out.estimate, &fit.active, config.p) - &mu)
            .norm_squared()
            .log2();
        Some(MethodRep {
            rel_mse: eq33(&out.estimate, &lasso_m, &target),
            rel_pred: pred - pred_lasso,
            coverage: (0..target.len())
                .map(|j| coverage_indicator(out.ci_lower[j], out.ci_upper[j], target[j]))
                .collect(),
            lengths: (0..target.len())
                .map(|j| out.ci_upper[j] - out.ci_lower[j])
                .collect(),
        })
    } else {
        None
    };

    Ok(RepResult {
        rep_id,
        selected_size: fit.active.len(),
        null_selection: false,
        zero_signal: resp.zero_signal,
        lambda,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        lasso: lasso_rep,
        refitted: refitted_rep,
        conditional: conditional_rep,
    })
}

/// Median with total ordering; +∞ sentinels sort last. None on empty input.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregated metrics for one method across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub rel_mse_mean: f64,
    pub rel_mse_stderr: f64,
    pub rel_pred_mean: f64,
    pub rel_pred_stderr: f64,
    /// Pooled coverage rate over all (replicate, coordinate) indicators.
    pub coverage: Option<f64>,
    /// Median over replicates of the per-replicate median CI length.
    pub median_ci_length: Option<f64>,
}

/// Scenario-level summary, a pure function of the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema_version: u32,
    pub config: SimConfig,
    pub completed_reps: u64,
    pub null_selections: u64,
    pub zero_signal_reps: u64,
    pub methods: BTreeMap<String, MethodSummary>,
    /// log₂ of conditional over refitted median-of-medians CI length.
    pub ci_length_log2_ratio: Option<f64>,
    /// Bootstrap standard error of the length ratio (seeded, 200 resamples).
    pub ci_length_log2_ratio_stderr: Option<f64>,
}

fn summarize_method<F>(results: &[&RepResult], get: F) -> Option<MethodSummary>
where
    F: Fn(&RepResult) -> Option<&MethodRep>,
{
    let reps: Vec<&MethodRep> = results.iter().filter_map(|r| get(r)).collect();
    if reps.is_empty() {
        return None;
    }
    let mses: Vec<f64> = reps.iter().map(|m| m.rel_mse).collect();
    let preds: Vec<f64> = reps.iter().map(|m| m.rel_pred).collect();
    let (rel_mse_mean, rel_mse_stderr) = mean_stderr(&mses);
    let (rel_pred_mean, rel_pred_stderr) = mean_stderr(&preds);
    let indicators: Vec<f64> = reps
        .iter()
        .flat_map(|m| m.coverage.iter().map(|&c| c as f64))
        .collect();
    let coverage = if indicators.is_empty() {
        None
    } else {
        Some(indicators.iter().sum::<f64>() / indicators.len() as f64)
    };
    let rep_medians: Vec<f64> = reps
        .iter()
        .filter_map(|m| median(&m.lengths))
        .collect();
    Some(MethodSummary {
        rel_mse_mean,
        rel_mse_stderr,
        rel_pred_mean,
        rel_pred_stderr,
        coverage,
        median_ci_length: median(&rep_medians),
    })
}

/// Reduce replicate results to scenario metrics. Internally sorts by
/// replicate id, so the reduction is independent of input order. Null
/// selections are counted but contribute to no metric.
pub fn aggregate(config: &SimConfig, results: &[RepResult]) -> Result<Aggregate> {
    if results.is_empty() {
        return Err(Error::InvalidParameter {
            name: "results",
            value: 0.0,
            reason: "cannot aggregate zero replicates",
        });
    }
    let mut ordered: Vec<&RepResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.rep_id);
    let null_selections = ordered.iter().filter(|r| r.null_selection).count() as u64;
    let zero_signal_reps = ordered.iter().filter(|r| r.zero_signal).count() as u64;
    let scored: Vec<&RepResult> = ordered
        .iter()
        .copied()
        .filter(|r| !r.null_selection)
        .collect();
    let mut methods = BTreeMap::new();
    if let Some(s) = summarize_method(&scored, |r| r.lasso.as_ref()) {
        methods.insert(Method::Lasso.name().to_string(), s);
    }
    if let Some(s) = summarize_method(&scored, |r| r.refitted.as_ref()) {
        methods.insert(Method::Refitted.name().to_string(), s);
    }
    if let Some(s) = summarize_method(&scored, |r| r.conditional.as_ref()) {
        methods.insert(Method::Conditional.name().to_string(), s);
    }
    let ci_length_log2_ratio = match (
        methods
            .get(Method::Conditional.name())
            .and_then(|s| s.median_ci_length),
        methods
            .get(Method::Refitted.name())
            .and_then(|s| s.median_ci_length),
    ) {
        (Some(c), Some(w)) if w > 0.0 => Some((c / w).log2()),
        _ => None,
    };
    let ci_length_log2_ratio_stderr = ci_length_log2_ratio
        .and_then(|_| length_ratio_bootstrap_stderr(&scored, config.seed));
    Ok(Aggregate {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        completed_reps: ordered.len() as u64,
        null_selections,
        zero_signal_reps,
        methods,
        ci_length_log2_ratio,
        ci_length_log2_ratio_stderr,
    })
}

/// Paired bootstrap over replicates of the log₂ median-of-medians length
/// ratio. Pairing keeps the two medians on the same resample, which is what
/// the ratio's sampling variation actually sees.
fn length_ratio_bootstrap_stderr(scored: &[&RepResult], seed: u64) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = scored
        .iter()
        .filter_map(|r| {
            let c = r.conditional.as_ref().and_then(|m| median(&m.lengths))?;
            let w = r.refitted.as_ref().and_then(|m| median(&m.lengths))?;
            Some((c, w))
        })
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    const RESAMPLES: usize = 200;
    let mut rng = stream_rng(seed, 0, Phase::Bootstrap);
    let mut ratios = Vec::with_capacity(RESAMPLES);
    for _ in 0..RESAMPLES {
        let mut cond = Vec::with_capacity(pairs.len());
        let mut refit = Vec::with_capacity(pairs.len());
        for _ in 0..pairs.len() {
            let (c, w) = pairs[rng.gen_range(0..pairs.len())];
            cond.push(c);
            refit.push(w);
        }
        let (c, w) = (median(&cond)?, median(&refit)?);
        if w > 0.0 && c > 0.0 {
            ratios.push((c / w).log2());
        }
    }
    if ratios.len() < 2 {
        return None;
    }
    let (_, se) = mean_stderr(&ratios);
    Some(se * (ratios.len() as f64).sqrt())
}

/// Run every replicate of the scenario, in parallel up to `workers`
/// threads (library default when None), and aggregate.
pub fn run_simulation(
    config: &SimConfig,
    workers: Option<usize>,
) -> Result<(Vec<RepResult>, Aggregate)> {
    config.validate()?;
    let run_all = || -> Result<Vec<RepResult>> {
        use rayon::prelude::*;
        (0..config.reps)
            .into_par_iter()
            .map(|rep_id| {
                run_replicate(config, rep_id).map_err(|e| Error::Replicate {
                    rep_id,
                    source: Box::new(e),
                })
            })
            .collect()
    };
    let mut results = match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|_| Error::InvalidParameter {
                    name: "workers",
                    value: w as f64,
                    reason: "thread pool construction failed",
                })?;
            pool.install(run_all)?
        }
        None => run_all()?,
    };
    results.sort_by_key(|r| r.rep_id);
    let agg = aggregate(config, &results)?;
    Ok((results, agg))
}

// wall time stays out of the row: outputs must be byte-identical across
// reruns of the same config
#[derive(Serialize)]
struct CsvRow {
    rep_id: u64,
    selected_size: usize,
    null_selection: bool,
    zero_signal: bool,
    lambda: f64,
    lasso_rel_mse: Option<f64>,
    lasso_rel_pred: Option<f64>,
    refitted_rel_mse: Option<f64>,
    refitted_rel_pred: Option<f64>,
    refitted_coverage: Option<f64>,
    refitted_median_ci_length: Option<f64>,
    conditional_rel_mse: Option<f64>,
    conditional_rel_pred: Option<f64>,
    conditional_coverage: Option<f64>,
    conditional_median_ci_length: Option<f64>,
}

fn mean_indicator(m: &MethodRep) -> Option<f64> {
    if m.coverage.is_empty() {
        return None;
    }
    Some(m.coverage.iter().map(|&c| c as f64).sum::<f64>() / m.coverage.len() as f64)
}

/// One CSV row per replicate; metric columns are empty for disabled
/// methods and null selections.
pub fn write_replicates_csv<W: Write>(results: &[RepResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        let row = CsvRow {
            rep_id: r.rep_id,
            selected_size: r.selected_size,
            null_selection: r.null_selection,
            zero_signal: r.zero_signal,
            lambda: r.lambda,
            lasso_rel_mse: r.lasso.as_ref().map(|m| m.rel_mse),
            lasso_rel_pred: r.lasso.as_ref().map(|m| m.rel_pred),
            refitted_rel_mse: r.refitted.as_ref().map(|m| m.rel_mse),
            refitted_rel_pred: r.refitted.as_ref().map(|m| m.rel_pred),
            refitted_coverage: r.refitted.as_ref().and_then(mean_indicator),
            refitted_median_ci_length: r
                .refitted
                .as_ref()
                .and_then(|m| median(&m.lengths)),
            conditional_rel_mse: r.conditional.as_ref().map(|m| m.rel_mse),
            conditional_rel_pred: r.conditional.as_ref().map(|m| m.rel_pred),
            conditional_coverage: r.conditional.as_ref().and_then(mean_indicator),
            conditional_median_ci_length: r
                .conditional
                .as_ref()
                .and_then(|m| median(&m.lengths)),
        };
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed aggregate JSON with the schema version stamped in.
pub fn write_aggregate_json<W: Write>(agg: &Aggregate, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, agg).map_err(|e| Error::Io(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_config() -> SimConfig {
        SimConfig {
            n: 60,
            p: 12,
            k: 2,
            rho: 0.5,
            snr: 0.8,
            reps: 6,
            seed: 3,
            lambda_rule: LambdaRule::Min,
            ci_level: 0.9,
            methods: vec![Method::Lasso, Method::Refitted, Method::Conditional],
        }
    }

    #[test]
    fn test_design_identity_covariance_when_uncorrelated() {
        let mut rng = stream_rng(1, 0, Phase::Design);
        let n = 10_000;
        let x = gen_design(n, 3, 0.0, &mut rng);
        let tol = 4.0 / (n as f64).sqrt();
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += x[(i, a)] * x[(i, b)];
                }
                let want = if a == b { 1.0 } else { 0.0 };
                // fourth-moment inflation on the diagonal: stderr ≈ √2/√n
                let slack = if a == b { 2.0f64.sqrt() * tol } else { tol };
                assert!(
                    (acc / n as f64 - want).abs() < slack,
                    "cov[{a},{b}] = {}",
                    acc / n as f64
                );
            }
        }
    }

    #[test]
    fn test_design_ar1_correlation_structure() {
        let mut rng = stream_rng(2, 0, Phase::Design);
        let n = 10_000;
        let rho: f64 = 0.5;
        let x = gen_design(n, 4, rho, &mut rng);
        // lag-1 and lag-2 sample correlations track ρ^lag
        for (a, b, lag) in [(0usize, 1usize, 1i32), (1, 2, 1), (0, 2, 2)] {
            let mut acc = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for i in 0..n {
                acc += x[(i, a)] * x[(i, b)];
                va += x[(i, a)] * x[(i, a)];
                vb += x[(i, b)] * x[(i, b)];
            }
            let corr = acc / (va.sqrt() * vb.sqrt());
            let want = rho.powi(lag);
            let se = (1.0 - want * want) / (n as f64).sqrt();
            assert!(
                (corr - want).abs() < 4.0 * se,
                "corr[{a},{b}] = {corr}, want {want}"
            );
        }
    }

    #[test]
    fn test_design_single_column_is_standard_normal() {
        let mut rng = stream_rng(3, 0, Phase::Design);
        let n = 10_000;
        let x = gen_design(n, 1, 0.7, &mut rng);
        let mean = x.column(0).sum() / n as f64;
        let var = x.column(0).iter().map(|v| v * v).sum::<f64>() / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * 2.0f64.sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn test_coefs_support_size_and_laplace_variance() {
        let mut rng = stream_rng(4, 0, Phase::Coefs);
        assert_eq!(gen_coefs(7, 0, &mut rng), DVector::zeros(7));
        let full = gen_coefs(9, 9, &mut rng);
        assert!(full.iter().all(|&v| v != 0.0));
        let sparse = gen_coefs(50, 12, &mut rng);
        assert_eq!(sparse.iter().filter(|&&v| v != 0.0).count(), 12);

        let p = 100_000;
        let draws = gen_coefs(p, p, &mut rng);
        let mean = draws.sum() / p as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        // Var(X²) = E X⁴ − (E X²)² = 24 − 4 = 20 for Laplace(1)
        let se = (20.0 / p as f64).sqrt();
        assert!((var - 2.0).abs() < 4.0 * se, "variance {var}");
        assert!(mean.abs() < 4.0 * (2.0 / p as f64).sqrt());
    }

    #[test]
    fn test_response_noise_matches_signal_ratio() {
        let mut rng = stream_rng(5, 0, Phase::Design);
        let x = gen_design(50, 6, 0.3, &mut rng);
        let mut beta = DVector::zeros(6);
        beta[1] = 2.0;
        beta[4] = -1.0;
        let mu = &x * &beta;
        let m = mu.sum() / 50.0;
        let var = mu.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 49.0;
        let mut nrng = stream_rng(5, 0, Phase::Noise);
        let resp = gen_response(&x, &beta, 0.2, &mut nrng).unwrap();
        assert!(!resp.zero_signal);
        assert_relative_eq!(resp.sigma2, var / 0.2, max_relative = 1e-12);

        // zero signal: unit noise and a flag
        let mut zrng = stream_rng(5, 1, Phase::Noise);
        let zresp = gen_response(&x, &DVector::zeros(6), 0.2, &mut zrng).unwrap();
        assert!(zresp.zero_signal);
        assert_relative_eq!(zresp.sigma2, 1.0);

        // bit-identical reproduction under the same stream
        let mut r1 = stream_rng(6, 2, Phase::Noise);
        let mut r2 = stream_rng(6, 2, Phase::Noise);
        let a = gen_response(&x, &beta, 0.5, &mut r1).unwrap();
        let b = gen_response(&x, &beta, 0.5, &mut r2).unwrap();
        assert_eq!(a.y, b.y);
    }

    // Regression: on this replicate the chain's first attempt wanders into a
    // sign assignment whose weight collapses as the ascent sharpens the mean
    // (two coordinates stop visiting their fitted signs and the score stays
    // biased), which used to surface as a singular pivot covariance. The fit
    // must detect the trap, restart, and come back with a certified root.
    #[test]
    fn test_trapped_chain_recovers_by_restarting() {
        let config = small_config();
        let x = {
            let mut rng = stream_rng(config.seed, 0, Phase::Design);
            gen_design(config.n, config.p, config.rho, &mut rng)
        };
        let beta_true = {
            let mut rng = stream_rng(config.seed, 0, Phase::Coefs);
            gen_coefs(config.p, config.k, &mut rng)
        };
        let resp = {
            let mut rng = stream_rng(config.seed, 0, Phase::Noise);
            gen_response(&x, &beta_true, config.snr, &mut rng).unwrap()
        };
        let data = Dataset::new(x, resp.y).unwrap();
        let grid = default_lambda_grid(&data);
        let lambda =
            cv_lambda(&data, CV_FOLDS, &grid, config.lambda_rule, config.seed, 0).unwrap();
        let mut rng = stream_rng(config.seed, 0, Phase::Sampler);
        let fit = fit_lasso_mle(
            &data,
            lambda,
            resp.sigma2,
            &ImputationStrategy::Zero,
            &sampler_options(&config),
            &mut rng,
        )
        .unwrap();
        assert!(fit.score_ok, "score root check failed: {:?}", fit.score_residual);
        for j in 0..fit.estimate.len() {
            assert!(fit.estimate[j].is_finite());
            assert!(fit.ci_lower[j] < fit.ci_upper[j]);
        }
    }

    #[test]
    fn test_replicate_determinism_and_fast_path() {
        let mut config = small_config();
        config.reps = 1;
        let r1 = run_replicate(&config, 0).unwrap();
        let r2 = run_replicate(&config, 0).unwrap();
        let strip = |mut r: RepResult| {
            r.wall_time_ms = 0.0;
            r
        };
        assert_eq!(strip(r1.clone()), strip(r2));

        // lasso-only config: no sampler output, same data and selection
        let mut fast = config.clone();
        fast.methods = vec![Method::Lasso];
        let rf = run_replicate(&fast, 0).unwrap();
        assert_eq!(rf.selected_size, r1.selected_size);
        assert_eq!(rf.lambda, r1.lambda);
        assert!(rf.conditional.is_none() && rf.refitted.is_none());
        assert!(rf.lasso.is_some());
        if let Some(l) = &rf.lasso {
            assert_eq!(l.rel_mse, 0.0);
            assert_eq!(l.rel_pred, 0.0);
        }
    }

    #[test]
    fn test_simulation_end_to_end_and_order_independence() {
        let config = small_config();
        let (results, agg) = run_simulation(&config, None).unwrap();
        assert_eq!(results.len(), 6);
        assert_eq!(agg.completed_reps, 6);
        assert!(agg.null_selections <= 6);
        let scored = results.iter().filter(|r| !r.null_selection).count();
        if scored > 0 {
            let cond = agg.methods.get("conditional").expect("conditional summary");
            let refit = agg.methods.get("refitted").expect("refitted summary");
            assert!(cond.rel_mse_mean.is_finite());
            assert!(refit.coverage.unwrap() >= 0.0 && refit.coverage.unwrap() <= 1.0);
            assert!(cond.median_ci_length.unwrap() > 0.0);
            assert!(agg.ci_length_log2_ratio.is_some());
            let lasso = agg.methods.get("lasso").expect("lasso summary");
            assert_eq!(lasso.rel_mse_mean, 0.0);
            assert_eq!(lasso.rel_pred_mean, 0.0);
        }

        // aggregation is independent of result order
        let mut shuffled = results.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let agg2 = aggregate(&config, &shuffled).unwrap();
        assert_eq!(
            serde_json::to_string(&agg).unwrap(),
            serde_json::to_string(&agg2).unwrap()
        );

        // a worker cap does not change the outcome
        let (_, agg3) = run_simulation(&config, Some(2)).unwrap();
        assert_eq!(
            serde_json::to_string(&agg).unwrap(),
            serde_json::to_string(&agg3).unwrap()
        );
    }

    fn synthetic_rep(rep_id: u64, rel: f64, cov: &[u8], lens: &[f64]) -> RepResult {
        let m = MethodRep {
            rel_mse: rel,
            rel_pred: -rel,
            coverage: cov.to_vec(),
            lengths: lens.to_vec(),
        };
        RepResult {
            rep_id,
            selected_size: cov.len(),
            null_selection: false,
            zero_signal: false,
            lambda: 0.5,
            wall_time_ms: 1.0,
            lasso: None,
            refitted: Some(m.clone()),
            conditional: Some(m),
        }
    }

    #[test]
    fn test_aggregate_pooling_and_infinite_length_sentinel() {
        let config = small_config();
        let reps = vec![
            synthetic_rep(0, 1.0, &[1, 1], &[1.0, 3.0]),
            synthetic_rep(1, -1.0, &[0], &[f64::INFINITY]),
            synthetic_rep(2, 0.0, &[1], &[2.0]),
        ];
        let agg = aggregate(&config, &reps).unwrap();
        let s = agg.methods.get("refitted").unwrap();
        assert_relative_eq!(s.rel_mse_mean, 0.0, epsilon = 1e-15);
        assert_relative_eq!(s.rel_mse_stderr, (1.0f64 / 3.0).sqrt(), max_relative = 1e-12);
        // pooled over 4 indicators: 3 hits
        assert_relative_eq!(s.coverage.unwrap(), 0.75);
        // per-rep medians are 2, inf, 2 → median 2
        assert_relative_eq!(s.median_ci_length.unwrap(), 2.0);
        // ratio of equal summaries is exactly zero
        assert_relative_eq!(agg.ci_length_log2_ratio.unwrap(), 0.0);

        // a null-selection replicate is counted but not scored
        let mut with_null = reps;
        with_null.push(RepResult {
            rep_id: 3,
            selected_size: 0,
            null_selection: true,
            zero_signal: false,
            lambda: 9.0,
            wall_time_ms: 1.0,
            lasso: None,
            refitted: None,
            conditional: None,
        });
        let agg2 = aggregate(&config, &with_null).unwrap();
        assert_eq!(agg2.null_selections, 1);
        assert_eq!(agg2.completed_reps, 4);
        assert_eq!(
            agg2.methods.get("refitted").unwrap().coverage,
            agg.methods.get("refitted").unwrap().coverage
        );
    }

    #[test]
    fn test_coverage_indicator_definition() {
        assert_eq!(coverage_indicator(-1.0, 1.0, 0.0), 1);
        assert_eq!(coverage_indicator(-1.0, 1.0, 1.0), 1);
        assert_eq!(coverage_indicator(-1.0, 1.0, 1.0001), 0);
        assert_eq!(
            coverage_indicator(f64::NEG_INFINITY, f64::INFINITY, 1e300),
            1
        );
    }

    #[test]
    fn test_csv_and_json_emission() {
        let config = small_config();
        let reps = vec![
            synthetic_rep(0, 0.5, &[1], &[2.0]),
            synthetic_rep(1, -0.5, &[0], &[f64::INFINITY]),
        ];
        let mut buf = Vec::new();
        write_replicates_csv(&reps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("rep_id,selected_size,null_selection"));
        assert!(header.contains("conditional_median_ci_length"));
        assert_eq!(lines.clone().count(), 2);
        assert!(text.contains("inf"));
        // lasso columns are empty when the method is off
        let first = lines.next().unwrap();
        assert!(first.contains(",,"));

        let agg = aggregate(&config, &reps).unwrap();
        let mut jbuf = Vec::new();
        write_aggregate_json(&agg, &mut jbuf).unwrap();
        let parsed: serde_json::Value = serde_json::from_slice(&jbuf).unwrap();
        assert_eq!(parsed["schema_version"], 1);
        assert_eq!(parsed["config"]["n"], 60);
        assert!(parsed["methods"]["refitted"]["rel_mse_mean"].is_number());
    }

    #[test]
    fn test_config_validation() {
        let mut c = small_config();
        c.k = 13;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.reps = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.rho = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.snr = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.methods.clear();
        assert!(c.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn test_median_handles_sentinels() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[5.0]), Some(5.0));
        assert_eq!(median(&[1.0, 2.0]), Some(1.5));
        assert_eq!(median(&[f64::INFINITY, 1.0, 2.0]), Some(2.0));
        assert_eq!(
            median(&[f64::INFINITY, f64::INFINITY, 1.0]),
            Some(f64::INFINITY)
        );
    }
}
