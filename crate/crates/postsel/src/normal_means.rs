//! Conditional inference for threshold-selected normal means.
//!
//! Observing y ~ N(mu, sigma) with known covariance, coordinate j is reported
//! when y_j leaves the interval (l_j, u_j). Inference then targets mu under
//! the law of y given that exact selection outcome: selected coordinates stay
//! outside their intervals, unselected ones stay inside. The conditional MLE
//! plugs in y_j for unselected coordinates and ascends the conditional score
//! in the selected block, with the intractable conditional expectation
//! replaced by Gibbs draws from the truncated law.

use crate::ascent::{
    pivot_intervals, step_size, summarize_pivots, tail_average, tail_average_stderr,
    AscentOptions,
};
use crate::error::{Error, Result};
use crate::normal::std_quantile;
use crate::tmvn::{gibbs_cycle, precompute_conditionals, GibbsStats, TmvnSpec};
use crate::trunc::{trunc_moments, TruncRegion};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

/// Observed vector, known covariance, and per-coordinate thresholds.
#[derive(Debug, Clone)]
pub struct NormalMeansProblem {
    pub y: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl NormalMeansProblem {
    /// Thresholds may satisfy l_j == u_j, which makes coordinate j selected
    /// for every y (its outside region is the whole line).
    pub fn new(
        y: DVector<f64>,
        sigma: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let p = y.len();
        if sigma.nrows() != p || sigma.ncols() != p {
            return Err(Error::DimensionMismatch {
                what: "sigma",
                expected: p,
                got: sigma.nrows(),
            });
        }
        for (name, v) in [("lower", &lower), ("upper", &upper)] {
            if v.len() != p {
                return Err(Error::DimensionMismatch {
                    what: name,
                    expected: p,
                    got: v.len(),
                });
            }
        }
        for j in 0..p {
            if !(lower[j] <= upper[j]) {
                return Err(Error::InvalidRegion {
                    lower: lower[j],
                    upper: upper[j],
                });
            }
        }
        Ok(NormalMeansProblem {
            y,
            sigma,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }
}

/// The set of reported coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub selected: Vec<usize>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }
}

/// Coordinates with y_j ≤ l_j or y_j ≥ u_j; boundary equality selects.
pub fn select(problem: &NormalMeansProblem) -> Selection {
    Selection {
        selected: (0..problem.dim())
            .filter(|&j| problem.y[j] <= problem.lower[j] || problem.y[j] >= problem.upper[j])
            .collect(),
    }
}

/// Result of the stochastic-ascent conditional MLE.
#[derive(Debug, Clone)]
pub struct ConditionalFit {
    /// Full-length estimate; unselected coordinates hold y_j exactly.
    pub estimate: DVector<f64>,
    /// Indices the estimate was optimized over.
    pub selected: Vec<usize>,
    /// Interval bounds over the selected coordinates at the fit's ci_level.
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
    /// N×|M| pivot draws backing the interval quantiles.
    pub pivot_draws: DMatrix<f64>,
    /// Monte-Carlo conditional score at the estimate, restricted to M.
    pub score_residual: DVector<f64>,
    /// Batch-means standard error of each score coordinate.
    pub score_stderr: DVector<f64>,
    /// Ascent steps taken.
    pub n_steps: usize,
    /// Coordinate updates skipped for underflowed region mass.
    pub degenerate_skips: usize,
    /// Effective step scale a after curvature normalization.
    pub step_scale_used: f64,
}

fn selection_regions(problem: &NormalMeansProblem, selected: &[usize]) -> Result<Vec<TruncRegion>> {
    let mut in_selected = vec![false; problem.dim()];
    for &j in selected {
        in_selected[j] = true;
    }
    (0..problem.dim())
        .map(|j| {
            if in_selected[j] {
                TruncRegion::outside(problem.lower[j], problem.upper[j])
            } else {
                TruncRegion::inside(problem.lower[j], problem.upper[j])
            }
        })
        .collect()
}

/// Stochastic-ascent conditional MLE with plug-in unselected coordinates.
///
/// Each step runs `gibbs_cycles_per_step` cycles of the truncated-normal
/// chain at the current mean (warm-started), then moves the selected block
/// along the estimated conditional score with step a/√i. The returned
/// estimate averages the last fifth of the iterates. A final sampling pass at
/// the estimate collects `quantile_samples` states for the score diagnostic
/// and the pivot-based intervals.
pub fn fit_conditional_mle<R: Rng + ?Sized>(
    problem: &NormalMeansProblem,
    opts: &AscentOptions,
    rng: &mut R,
) -> Result<ConditionalFit> {
    opts.validate()?;
    let selection = select(problem);
    if selection.is_empty() {
        return Err(Error::NoSelection);
    }
    let sel = &selection.selected;
    let p = problem.dim();
    let regions = selection_regions(problem, sel)?;
    let coeffs = precompute_conditionals(&problem.sigma)?;
    let prec = Cholesky::new(problem.sigma.clone())
        .ok_or(Error::SingularCovariance { cond: f64::INFINITY })?
        .inverse();
    let max_prec_diag = (0..p).map(|j| prec[(j, j)]).fold(f64::NEG_INFINITY, f64::max);
    let a = opts.step_scale / max_prec_diag;

    let mut spec = TmvnSpec::new(problem.y.clone(), problem.sigma.clone(), regions)?;
    debug_assert!(spec.satisfies(&problem.y).is_none());
    let mut state = problem.y.clone();
    let mut stats = GibbsStats::default();
    let mut history: Vec<DVector<f64>> = Vec::with_capacity(opts.n_steps);

    for i in 1..=opts.n_steps {
        for _ in 0..opts.gibbs_cycles_per_step {
            gibbs_cycle(&mut state, &spec, &coeffs, rng, &mut stats)?;
        }
        let score = &prec * (&problem.y - &state);
        let gamma = step_size(a, i);
        for &j in sel {
            spec.mean[j] += gamma * score[j];
        }
        history.push(DVector::from_iterator(
            sel.len(),
            sel.iter().map(|&j| spec.mean[j]),
        ));
    }

    let est_m = tail_average(&history);
    let mut estimate = problem.y.clone();
    for (k, &j) in sel.iter().enumerate() {
        estimate[j] = est_m[k];
    }
    for &j in sel {
        spec.mean[j] = estimate[j];
    }

    // post-convergence pass: collect [prec·y*]_M draws at the final mean
    let n = opts.quantile_samples;
    for _ in 0..opts.burn_in {
        gibbs_cycle(&mut state, &spec, &coeffs, rng, &mut stats)?;
    }
    let mut stat_draws = DMatrix::zeros(n, sel.len());
    for t in 0..n {
        for _ in 0..opts.thin {
            gibbs_cycle(&mut state, &spec, &coeffs, rng, &mut stats)?;
        }
        let u = &prec * &state;
        for (k, &j) in sel.iter().enumerate() {
            stat_draws[(t, k)] = u[j];
        }
    }
    let summary = summarize_pivots(&stat_draws)?;
    let prec_y = &prec * &problem.y;
    let score_residual = DVector::from_iterator(
        sel.len(),
        sel.iter()
            .enumerate()
            .map(|(k, &j)| prec_y[j] - summary.stat_mean[k]),
    );
    // the residual's total Monte-Carlo error combines the collection pass's
    // noise with the tail average's own; the selected block of the precision
    // maps iterate movement into statistic scale
    let prec_mm = DMatrix::from_fn(sel.len(), sel.len(), |r, c| prec[(sel[r], sel[c])]);
    let est_se = tail_average_stderr(&history, &prec_mm);
    let score_stderr = summary
        .stat_stderr
        .zip_map(&est_se, |s, e| (s * s + e * e).sqrt());

    let alpha = 1.0 - opts.ci_level;
    let (ci_lower, ci_upper) = pivot_intervals(&est_m, &summary.pivot_draws, alpha)?;

    Ok(ConditionalFit {
        estimate,
        selected: sel.clone(),
        ci_lower,
        ci_upper,
        pivot_draws: summary.pivot_draws,
        score_residual,
        score_stderr,
        n_steps: opts.n_steps,
        degenerate_skips: stats.degenerate_skips,
        step_scale_used: a,
    })
}

/// Recompute the fit's intervals at a different miscoverage level from the
/// stored pivot draws.
pub fn conditional_ci(
    fit: &ConditionalFit,
    problem: &NormalMeansProblem,
    alpha: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let selection = select(problem);
    if selection.selected != fit.selected {
        return Err(Error::DimensionMismatch {
            what: "selection",
            expected: fit.selected.len(),
            got: selection.selected.len(),
        });
    }
    let est_m = DVector::from_iterator(
        fit.selected.len(),
        fit.selected.iter().map(|&j| fit.estimate[j]),
    );
    pivot_intervals(&est_m, &fit.pivot_draws, alpha)
}

/// Unadjusted Wald intervals y_j ± z_{1−α/2}·√sigma_jj over the selection.
pub fn naive_ci(
    problem: &NormalMeansProblem,
    alpha: f64,
) -> Result<(Vec<usize>, DVector<f64>, DVector<f64>)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            reason: "miscoverage level must lie in (0, 1]",
        });
    }
    let selection = select(problem);
    let z = if alpha == 1.0 {
        0.0
    } else {
        std_quantile(1.0 - alpha / 2.0)
    };
    let m = selection.len();
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    for (k, &j) in selection.selected.iter().enumerate() {
        let half = z * problem.sigma[(j, j)].sqrt();
        lower[k] = problem.y[j] - half;
        upper[k] = problem.y[j] + half;
    }
    Ok((selection.selected, lower, upper))
}

/// Which side of the threshold triggers reporting in the scalar problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Selected when |y| ≥ c; conditioning region is Outside(−c, c).
    TwoSided,
    /// Selected when y ≥ c; conditioning region is Inside(c, ∞).
    OneSided,
}

/// Root of the univariate bracket used by `univariate_conditional_mle`.
const UNIVARIATE_BRACKET_LO: f64 = -50.0;

/// Scalar conditional MLE for unit-variance y given selection at threshold c.
///
/// Solves y = E_mu(y | region) by bisection on mu; the conditional mean is
/// increasing in mu, so the score y − E_mu is decreasing and the root is
/// unique. The bracket is [−50, y+50]. A one-sided root escaping below −50
/// (which happens for y just above c, where the estimator diverges) is
/// reported as −∞ rather than an error; any other bracket escape fails.
pub fn univariate_conditional_mle(y: f64, c: f64, side: Side) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "c",
            value: c,
            reason: "threshold must be positive and finite",
        });
    }
    let region = match side {
        Side::TwoSided => {
            if y.abs() < c {
                return Err(Error::NotSelected {
                    value: y,
                    threshold: c,
                });
            }
            TruncRegion::outside(-c, c)?
        }
        Side::OneSided => {
            if y < c {
                return Err(Error::NotSelected {
                    value: y,
                    threshold: c,
                });
            }
            TruncRegion::inside(c, f64::INFINITY)?
        }
    };
    let score = |mu: f64| -> Result<f64> {
        let (mean, _) = trunc_moments(mu, 1.0, &region)?;
        Ok(y - mean)
    };
    let lo = UNIVARIATE_BRACKET_LO;
    let hi = y + 50.0;
    let f_lo = score(lo)?;
    if f_lo < 0.0 {
        // decreasing score already negative at the left edge: root below −50
        return match side {
            Side::OneSided => Ok(f64::NEG_INFINITY),
            Side::TwoSided => Err(Error::BracketFailure { lo, hi }),
        };
    }
    let f_hi = score(hi)?;
    if f_hi > 0.0 {
        return Err(Error::BracketFailure { lo, hi });
    }
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = score(mid)?;
        if f_mid >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
