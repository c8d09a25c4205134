//! Conditional maximum likelihood for lasso-selected coefficients.
//!
//! The post-selection law of the refitted coefficients η is a multivariate
//! normal restricted to a union of sign orthants with sign-dependent
//! thresholds, tied to the inactive statistic ξ through a sign-dependent
//! box. A delayed-rejection Metropolis-within-Gibbs sweep moves η across
//! orthants: within-orthant coordinate updates are exact full-conditional
//! draws (accepted with probability 1), and a proposed sign flip either
//! lands in the flipped orthant directly or triggers a second-stage
//! proposal for the remaining coordinates whose acceptance ratio is
//! computed in log space. Stochastic gradient ascent on the conditional
//! score, driven by this sampler, yields the conditional MLE; empirical
//! pivots at the optimum give confidence intervals.

use crate::ascent::{
    batch_means_stderr, pivot_intervals, step_size, summarize_pivots, tail_average,
    tail_average_stderr, AscentOptions, MC_BATCHES,
};
use crate::error::{Error, Result};
use crate::event::{eta_xi, selection_event, EtaXi, SelectionEvent};
use crate::lasso::{fit_lasso, Dataset};
use crate::normal::{ln_phi, ln_std_cdf, ln_std_sf, log_add_exp, LN_SQRT_2PI};
use crate::quadrature::{grid_then_golden, ln_event_probability, nelder_mead_2d};
use crate::rng::{stream_rng, Phase, StreamRng};
use crate::tmvn::{precompute_conditionals, ConditionalCoeffs};
use crate::trunc::{ln_interval_mass, sample_region, RegionKind, TruncRegion};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::Serialize;

/// How the unknown mean of the inactive statistic ξ is filled in when
/// conditioning on the box constraints.
#[derive(Debug, Clone)]
pub enum ImputationStrategy {
    /// E(ξ) ≈ 0, the default: the projected inactive mean is typically tiny.
    Zero,
    /// Use the observed ξ as its own expectation.
    Plugin,
    /// Drop the box constraints entirely (treat their probability as 1).
    None,
    /// Supply E(ξ) directly (length p − |M|).
    Truth(DVector<f64>),
}

impl ImputationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            ImputationStrategy::Zero => "zero",
            ImputationStrategy::Plugin => "plugin",
            ImputationStrategy::None => "none",
            ImputationStrategy::Truth(_) => "truth",
        }
    }
}

/// Counters for one or more sampler sweeps. Sign-preserving proposals are
/// exact conditional draws, so only flips can be rejected.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SweepStats {
    /// Coordinate proposals made.
    pub proposals: u64,
    /// Proposals that kept the coordinate's sign (always accepted).
    pub no_flip: u64,
    /// Sign flips accepted directly because the proposal already satisfied
    /// the flipped-sign constraints.
    pub flip_immediate: u64,
    /// Sign flips accepted through the second-stage proposal.
    pub flip_stage2_accept: u64,
    /// Second-stage proposals rejected by the acceptance ratio or an
    /// impossible forward draw.
    pub flip_stage2_reject: u64,
    /// Flips rejected because ξ violates the flipped-sign box.
    pub flip_xi_reject: u64,
    /// Flips rejected because the reverse first-stage point satisfies the
    /// original constraints (the reverse path would have stopped early).
    pub flip_reverse_reject: u64,
    /// Moves rejected because the log acceptance ratio was NaN.
    pub numerical_reject: u64,
    /// Conditional draws skipped for vanishing region mass.
    pub degenerate_skips: u64,
}

impl SweepStats {
    pub fn merge(&mut self, other: &SweepStats) {
        self.proposals += other.proposals;
        self.no_flip += other.no_flip;
        self.flip_immediate += other.flip_immediate;
        self.flip_stage2_accept += other.flip_stage2_accept;
        self.flip_stage2_reject += other.flip_stage2_reject;
        self.flip_xi_reject += other.flip_xi_reject;
        self.flip_reverse_reject += other.flip_reverse_reject;
        self.numerical_reject += other.numerical_reject;
        self.degenerate_skips += other.degenerate_skips;
    }

    /// Fraction of proposals that moved the chain.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            return 0.0;
        }
        (self.no_flip + self.flip_immediate + self.flip_stage2_accept) as f64
            / self.proposals as f64
    }
}

/// Sampler state: the active statistic, the inactive statistic, and the
/// sign orthant η currently occupies (the implied lasso coefficient signs,
/// i.e. which side of its sign-dependent threshold interval each η_j is on).
#[derive(Debug, Clone)]
pub struct MhState {
    pub eta: DVector<f64>,
    pub xi: DVector<f64>,
    pub signs: DVector<f64>,
}

/// Everything fixed across sweeps: the event algebra, the current mean of
/// η's untruncated law, and the precomputed conditional decompositions.
#[derive(Debug, Clone)]
pub struct MhSpec {
    pub event: SelectionEvent,
    /// Mean of η's untruncated normal law (the ascent iterate).
    pub beta: DVector<f64>,
    pub sigma2: f64,
    /// Imputed E(ξ).
    pub xi_mean: DVector<f64>,
    /// Under the no-conditioning strategy ξ is drawn untruncated and sign
    /// flips skip the box check.
    pub skip_xi_gate: bool,
    /// Gibbs cycles used to refresh ξ each sweep.
    pub xi_cycles: usize,
    /// σ² K⁻¹.
    pub cov_eta: DMatrix<f64>,
    coeffs_eta: ConditionalCoeffs,
    coeffs_xi: Option<ConditionalCoeffs>,
    chol_xi: Option<Cholesky<f64, Dyn>>,
    /// K / σ², the precision of η.
    prec_eta: DMatrix<f64>,
}

impl MhSpec {
    pub fn new(
        event: SelectionEvent,
        stats: &EtaXi,
        sigma2: f64,
        strategy: &ImputationStrategy,
    ) -> Result<Self> {
        let d = event.inactive.len();
        let xi_mean = match strategy {
            ImputationStrategy::Zero | ImputationStrategy::None => DVector::zeros(d),
            ImputationStrategy::Plugin => stats.xi.clone(),
            ImputationStrategy::Truth(v) => {
                if v.len() != d {
                    return Err(Error::DimensionMismatch {
                        what: "imputed xi mean",
                        expected: d,
                        got: v.len(),
                    });
                }
                v.clone()
            }
        };
        let skip_xi_gate = matches!(strategy, ImputationStrategy::None);
        let coeffs_eta = precompute_conditionals(&stats.cov_eta)?;
        let (coeffs_xi, chol_xi) = if d == 0 {
            (None, None)
        } else if skip_xi_gate {
            let chol = Cholesky::new(stats.cov_xi.clone())
                .ok_or(Error::SingularCovariance { cond: f64::INFINITY })?;
            (None, Some(chol))
        } else {
            (Some(precompute_conditionals(&stats.cov_xi)?), None)
        };
        let prec_eta = &event.xtx_m / sigma2;
        Ok(MhSpec {
            cov_eta: stats.cov_eta.clone(),
            beta: stats.eta.clone(),
            sigma2,
            xi_mean,
            skip_xi_gate,
            xi_cycles: 2,
            coeffs_eta,
            coeffs_xi,
            chol_xi,
            prec_eta,
            event,
        })
    }
}

/// Threshold interval for coordinate j of η given the OTHER coordinates'
/// signs: η_j must lie outside (l_j, u_j), and which side determines the
/// implied sign of coefficient j. The interval has positive width
/// 2λ(K⁻¹)_jj and does not depend on signs[j] itself.
pub fn sign_thresholds(event: &SelectionEvent, j: usize, signs: &DVector<f64>) -> (f64, f64) {
    let m = signs.len();
    let mut base = 0.0;
    for k in 0..m {
        if k != j {
            base += event.xtx_m_inv[(j, k)] * signs[k];
        }
    }
    base *= event.lambda;
    let off = event.lambda * event.xtx_m_inv[(j, j)];
    (base - off, base + off)
}

/// Whether η lies strictly inside the sign orthant for `signs`: each η_j
/// beyond its threshold on the side signs[j] indicates.
pub fn in_a1(event: &SelectionEvent, eta: &DVector<f64>, signs: &DVector<f64>) -> bool {
    for j in 0..eta.len() {
        let (l, u) = sign_thresholds(event, j, signs);
        let ok = if signs[j] > 0.0 { eta[j] > u } else { eta[j] < l };
        if !ok {
            return false;
        }
    }
    true
}

fn ln_region_mass(mu: f64, sigma2: f64, region: &TruncRegion) -> f64 {
    let sd = sigma2.sqrt();
    let zl = if region.lower() == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        (region.lower() - mu) / sd
    };
    let zu = if region.upper() == f64::INFINITY {
        f64::INFINITY
    } else {
        (region.upper() - mu) / sd
    };
    match region.kind() {
        RegionKind::Inside => ln_interval_mass(zl, zu),
        RegionKind::Outside => log_add_exp(ln_std_cdf(zl), ln_std_sf(zu)),
    }
}

/// The tail a same-sign second-stage proposal is drawn from: the sign side
/// of the recomputed threshold interval.
fn tail_region(sign: f64, l: f64, u: f64) -> Result<TruncRegion> {
    if sign > 0.0 {
        TruncRegion::inside(u, f64::INFINITY)
    } else {
        TruncRegion::inside(f64::NEG_INFINITY, l)
    }
}

/// Refresh ξ given the current signs. Under the truncating strategies this
/// advances a short Gibbs chain on the box (warm-started at the current ξ,
/// which the sweep keeps inside the box); under the no-conditioning
/// strategy it is one untruncated draw. Returns the new ξ and the number
/// of degenerate coordinate skips.
pub fn sample_xi<R: Rng + ?Sized>(
    spec: &MhSpec,
    signs: &DVector<f64>,
    current: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, u64)> {
    let d = spec.event.inactive.len();
    if d == 0 {
        return Ok((DVector::zeros(0), 0));
    }
    if spec.skip_xi_gate {
        let chol = spec.chol_xi.as_ref().expect("factor exists when gate is off");
        let z = DVector::from_fn(d, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        });
        return Ok((&spec.xi_mean + chol.l() * z, 0));
    }
    let coeffs = spec.coeffs_xi.as_ref().expect("coefficients exist when gate is on");
    let (l0, u0) = spec.event.inactive_bounds_for(signs);
    let regions: Vec<TruncRegion> = (0..d)
        .map(|k| TruncRegion::inside(l0[k], u0[k]))
        .collect::<Result<_>>()?;
    let mut xi = current.clone();
    let mut skips = 0u64;
    for _ in 0..spec.xi_cycles {
        for k in 0..d {
            let cm = coeffs.cond_mean(k, &spec.xi_mean, &xi);
            match sample_region(rng, cm, coeffs.cond_var(k), &regions[k]) {
                Ok(v) => xi[k] = v,
                Err(Error::DegenerateMass { .. }) => skips += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((xi, skips))
}

/// Log of the second-stage acceptance ratio for moving from `x` (signs `s`)
/// to `y` (signs `s_new`, differing at coordinate j only; y[j] is the
/// first-stage draw and the remaining coordinates are second-stage draws).
///
/// Gaussian density ratio plus the first-stage full-conditional densities
/// evaluated in both directions plus the second-stage tail-mass
/// corrections; the symmetric second-stage normal kernels cancel exactly.
pub fn log_accept_ratio(
    spec: &MhSpec,
    x: &DVector<f64>,
    y: &DVector<f64>,
    j: usize,
    s: &DVector<f64>,
    s_new: &DVector<f64>,
) -> Result<f64> {
    let m = x.len();
    let dx = x - &spec.beta;
    let dy = y - &spec.beta;
    let mut lr = -0.5 * (dy.dot(&(&spec.prec_eta * &dy)) - dx.dot(&(&spec.prec_eta * &dx)));

    // first-stage full conditionals; coordinate j's thresholds depend only
    // on the other signs, which s and s_new share
    let (l_j, u_j) = sign_thresholds(&spec.event, j, s);
    let outside = TruncRegion::outside(l_j, u_j)?;
    let v_j = spec.coeffs_eta.cond_var(j);
    let sd_j = v_j.sqrt();
    let cm_x = spec.coeffs_eta.cond_mean(j, &spec.beta, x);
    let cm_y = spec.coeffs_eta.cond_mean(j, &spec.beta, y);
    let ln_f_fwd = ln_phi((y[j] - cm_x) / sd_j) - sd_j.ln() - ln_region_mass(cm_x, v_j, &outside);
    let ln_f_rev = ln_phi((x[j] - cm_y) / sd_j) - sd_j.ln() - ln_region_mass(cm_y, v_j, &outside);
    lr += ln_f_rev - ln_f_fwd;

    for k in 0..m {
        if k == j {
            continue;
        }
        let v_k = spec.coeffs_eta.cond_var(k);
        let (l_new, u_new) = sign_thresholds(&spec.event, k, s_new);
        let (l_old, u_old) = sign_thresholds(&spec.event, k, s);
        let fwd = tail_region(s[k], l_new, u_new)?;
        let rev = tail_region(s[k], l_old, u_old)?;
        lr += ln_region_mass(x[k], v_k, &fwd) - ln_region_mass(y[k], v_k, &rev);
    }
    Ok(lr)
}

/// min(1, exp(log ratio)); a NaN ratio counts as zero (reject).
pub fn acceptance_prob(
    spec: &MhSpec,
    x: &DVector<f64>,
    y: &DVector<f64>,
    j: usize,
    s: &DVector<f64>,
    s_new: &DVector<f64>,
) -> Result<f64> {
    let lr = log_accept_ratio(spec, x, y, j, s, s_new)?;
    if lr.is_nan() {
        return Ok(0.0);
    }
    Ok(lr.min(0.0).exp())
}

/// One outer sweep: refresh ξ, then update every coordinate of η in order.
///
/// A same-sign proposal is an exact full-conditional draw (accepted with
/// probability 1). A sign flip passes through three gates: ξ must satisfy
/// the flipped box, the flipped point is accepted outright if it satisfies
/// the flipped-sign constraints, and otherwise a second-stage proposal
/// redraws the other coordinates from their same-sign tails and is accepted
/// by the delayed-rejection ratio.
pub fn mh_sweep<R: Rng + ?Sized>(
    state: &mut MhState,
    spec: &MhSpec,
    rng: &mut R,
) -> Result<SweepStats> {
    let mut stats = SweepStats::default();
    let (xi, skips) = sample_xi(spec, &state.signs, &state.xi, rng)?;
    state.xi = xi;
    stats.degenerate_skips += skips;
    let m = state.eta.len();
    for j in 0..m {
        stats.proposals += 1;
        let (l_j, u_j) = sign_thresholds(&spec.event, j, &state.signs);
        let outside = TruncRegion::outside(l_j, u_j)?;
        let cm = spec.coeffs_eta.cond_mean(j, &spec.beta, &state.eta);
        let r_j = match sample_region(rng, cm, spec.coeffs_eta.cond_var(j), &outside) {
            Ok(v) => v,
            Err(Error::DegenerateMass { .. }) => {
                stats.degenerate_skips += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let s_j_new = if r_j >= u_j { 1.0 } else { -1.0 };
        if s_j_new == state.signs[j] {
            state.eta[j] = r_j;
            stats.no_flip += 1;
            continue;
        }

        let mut signs_new = state.signs.clone();
        signs_new[j] = s_j_new;
        if !spec.skip_xi_gate && !state.xi.is_empty() {
            let (l0, u0) = spec.event.inactive_bounds_for(&signs_new);
            let violates =
                (0..state.xi.len()).any(|k| !(l0[k] < state.xi[k] && state.xi[k] < u0[k]));
            if violates {
                stats.flip_xi_reject += 1;
                continue;
            }
        }

        let mut proposal = state.eta.clone();
        proposal[j] = r_j;
        if in_a1(&spec.event, &proposal, &signs_new) {
            state.eta[j] = r_j;
            state.signs[j] = s_j_new;
            stats.flip_immediate += 1;
            continue;
        }

        // second stage: redraw the other coordinates from their same-sign
        // tails under the flipped thresholds
        let mut feasible = true;
        for k in 0..m {
            if k == j {
                continue;
            }
            let (l_k, u_k) = sign_thresholds(&spec.event, k, &signs_new);
            let tail = tail_region(state.signs[k], l_k, u_k)?;
            match sample_region(rng, state.eta[k], spec.coeffs_eta.cond_var(k), &tail) {
                Ok(v) => proposal[k] = v,
                Err(Error::DegenerateMass { .. }) => {
                    stats.degenerate_skips += 1;
                    feasible = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if !feasible {
            stats.flip_stage2_reject += 1;
            continue;
        }

        // if the reverse first-stage point satisfies the original
        // constraints, the reverse path would accept early and the
        // delayed-rejection ratio is zero
        let mut reverse = proposal.clone();
        reverse[j] = state.eta[j];
        if in_a1(&spec.event, &reverse, &state.signs) {
            stats.flip_reverse_reject += 1;
            continue;
        }

        let lr = log_accept_ratio(spec, &state.eta, &proposal, j, &state.signs, &signs_new)?;
        if lr.is_nan() {
            stats.numerical_reject += 1;
            continue;
        }
        let accept = lr >= 0.0 || rng.gen::<f64>() < lr.exp();
        if accept {
            state.eta = proposal;
            state.signs = signs_new;
            stats.flip_stage2_accept += 1;
        } else {
            stats.flip_stage2_reject += 1;
        }
    }
    Ok(stats)
}

/// One Gibbs pass over η with the sign assignment held fixed: coordinate j is
/// redrawn exactly from its full conditional restricted to the tail its
/// current sign occupies. Leaves the sampler's stationary distribution
/// unchanged (it is a Gibbs update of η given the signs) while guaranteeing
/// within-tail movement even when the two-sided conditional places almost all
/// of its mass on the flip side, which would otherwise freeze the coordinate
/// whenever sign flips are being rejected.
///
/// Returns the number of coordinates skipped because the current tail's mass
/// underflowed.
pub fn gibbs_refresh<R: Rng + ?Sized>(
    state: &mut MhState,
    spec: &MhSpec,
    rng: &mut R,
) -> Result<u64> {
    let mut skips = 0u64;
    for j in 0..state.eta.len() {
        let (l_j, u_j) = sign_thresholds(&spec.event, j, &state.signs);
        let tail = tail_region(state.signs[j], l_j, u_j)?;
        let cm = spec.coeffs_eta.cond_mean(j, &spec.beta, &state.eta);
        match sample_region(rng, cm, spec.coeffs_eta.cond_var(j), &tail) {
            Ok(v) => state.eta[j] = v,
            Err(Error::DegenerateMass { .. }) => skips += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(skips)
}

/// Output of the conditional-MLE ascent for a lasso selection.
#[derive(Debug, Clone)]
pub struct LassoConditionalFit {
    /// Conditional MLE of the selected coefficients (tail-averaged iterate).
    pub estimate: DVector<f64>,
    /// Selected column indices, ascending.
    pub active: Vec<usize>,
    /// Fitted lasso signs over the active set.
    pub signs: Vec<f64>,
    pub lambda: f64,
    pub sigma2: f64,
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
    /// N×|M| matrix of σ²-scaled empirical pivots collected at the optimum.
    pub pivot_draws: DMatrix<f64>,
    /// X_M^T y − mean of the sampled X_M^T y*; near zero at a true optimum.
    pub score_residual: DVector<f64>,
    /// Batch-means standard error of the sampled score mean, per coordinate.
    pub score_stderr: DVector<f64>,
    /// Refitted least-squares coefficients η (the ascent start).
    pub refit: DVector<f64>,
    /// Lasso coefficients on the active set.
    pub lasso_beta: DVector<f64>,
    /// Coordinates clamped by the sign constraint across all steps.
    pub sign_projection_count: u64,
    pub stats: SweepStats,
    pub n_steps: usize,
    /// The realized step-size numerator a in γ_i = a/√i.
    pub step_scale_used: f64,
    /// Whether the score residual passed its 4-standard-error root check.
    pub score_ok: bool,
    /// Fitting attempts consumed (restarts happen when the root check fails).
    pub attempts: u32,
}

fn project_signs(beta: &mut DVector<f64>, reference: &DVector<f64>, count: &mut u64) {
    for j in 0..beta.len() {
        let s = reference[j];
        let clamped = s * (s * beta[j]).max(0.0);
        if clamped != beta[j] {
            beta[j] = clamped;
            *count += 1;
        }
    }
}

struct CoreOutput {
    estimate: DVector<f64>,
    samples: DMatrix<f64>,
    stats: SweepStats,
    projections: u64,
    /// Statistic-scale standard error of the tail-averaged estimate.
    estimate_stderr: DVector<f64>,
    /// Collection sweeps, per coordinate, whose sign matched the lasso's.
    observed_sign_visits: Vec<u64>,
}

fn fit_mle_core<R: Rng + ?Sized>(
    spec: &mut MhSpec,
    stats_exi: &EtaXi,
    xty: &DVector<f64>,
    opts: &AscentOptions,
    rng: &mut R,
) -> Result<CoreOutput> {
    let refit = stats_exi.eta.clone();
    let mut state = MhState {
        eta: refit.clone(),
        xi: stats_exi.xi.clone(),
        signs: spec.event.signs.clone(),
    };
    let k = &spec.event.xtx_m;
    let spectral = spec
        .event
        .xtx_m
        .clone()
        .symmetric_eigenvalues()
        .amax();
    let a = opts.step_scale / spectral;
    let sign_ref = refit.map(f64::signum);
    let mut beta_hat = refit.clone();
    let mut agg = SweepStats::default();
    let mut projections = 0u64;
    let mut history: Vec<DVector<f64>> = Vec::with_capacity(opts.n_steps);
    for i in 1..=opts.n_steps {
        spec.beta = beta_hat.clone();
        for _ in 0..opts.gibbs_cycles_per_step {
            agg.merge(&mh_sweep(&mut state, spec, rng)?);
            agg.degenerate_skips += gibbs_refresh(&mut state, spec, rng)?;
        }
        let grad = xty - k * &state.eta;
        beta_hat += step_size(a, i) * grad;
        project_signs(&mut beta_hat, &sign_ref, &mut projections);
        history.push(beta_hat.clone());
    }
    let estimate = tail_average(&history);
    let estimate_stderr = tail_average_stderr(&history, k);

    spec.beta = estimate.clone();
    for _ in 0..opts.burn_in {
        agg.merge(&mh_sweep(&mut state, spec, rng)?);
        agg.degenerate_skips += gibbs_refresh(&mut state, spec, rng)?;
    }
    let m = refit.len();
    let mut samples = DMatrix::zeros(opts.quantile_samples, m);
    let mut observed_sign_visits = vec![0u64; m];
    for t in 0..opts.quantile_samples {
        for _ in 0..opts.thin {
            agg.merge(&mh_sweep(&mut state, spec, rng)?);
            agg.degenerate_skips += gibbs_refresh(&mut state, spec, rng)?;
        }
        for j in 0..m {
            if state.signs[j] == spec.event.signs[j] {
                observed_sign_visits[j] += 1;
            }
        }
        let u = k * &state.eta;
        samples.row_mut(t).copy_from(&u.transpose());
    }
    Ok(CoreOutput {
        estimate,
        samples,
        stats: agg,
        projections,
        estimate_stderr,
        observed_sign_visits,
    })
}

/// Score-root tolerance in Monte-Carlo standard errors: an attempt whose
/// worst coordinate exceeds this is treated as a trapped chain and retried.
const SCORE_ROOT_TOL: f64 = 4.0;

/// Worst coordinatewise |score| in standard-error units; non-finite entries
/// (zero stderr from a frozen coordinate) count as infinitely bad.
fn score_root_ratio(score: &DVector<f64>, stderr: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..score.len() {
        let r = score[j].abs() / stderr[j];
        if !r.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(r);
    }
    worst
}

/// Conditional MLE of the coefficients the lasso selects at `lambda`, with
/// empirical-pivot confidence intervals at the optimum.
///
/// The sign-flip moves can trap the chain in a sign assignment whose weight
/// collapses as the ascent sharpens the mean; the fit detects this through
/// the score-root check and restarts (continuing the same RNG stream, with
/// the ascent length doubled each time) up to `opts.max_attempts` times,
/// returning the best attempt with `score_ok` recording whether the check
/// ultimately passed.
pub fn fit_lasso_mle<R: Rng + ?Sized>(
    data: &Dataset,
    lambda: f64,
    sigma2: f64,
    strategy: &ImputationStrategy,
    opts: &AscentOptions,
    rng: &mut R,
) -> Result<LassoConditionalFit> {
    opts.validate()?;
    let fit = fit_lasso(data, lambda)?;
    if fit.active.is_empty() {
        return Err(Error::NoSelection);
    }
    let event = selection_event(&data.x, &fit.active, &fit.signs, lambda)?;
    let stats_exi = eta_xi(&data.x, &data.y, &event, sigma2)?;
    let xm = data.x.select_columns(&fit.active);
    let xty = xm.transpose() * &data.y;
    let lasso_beta = DVector::from_iterator(
        fit.active.len(),
        fit.active.iter().map(|&j| fit.beta[j]),
    );
    let mut spec = MhSpec::new(event, &stats_exi, sigma2, strategy)?;
    let a_used = opts.step_scale / spec.event.xtx_m.clone().symmetric_eigenvalues().amax();
    let alpha = 1.0 - opts.ci_level;

    let mut best: Option<(bool, f64, LassoConditionalFit)> = None;
    let mut last_err = None;
    // each restart doubles the ascent length: a failed root check usually
    // means the averaged iterate has not settled yet, not that the chain
    // was unlucky, so rerunning at the same length rarely helps
    let mut n_steps = opts.n_steps;
    for attempt in 1..=opts.max_attempts as u32 {
        let attempt_opts = AscentOptions {
            n_steps,
            ..opts.clone()
        };
        let outcome = fit_mle_core(&mut spec, &stats_exi, &xty, &attempt_opts, rng)
            .and_then(|core| {
                let summary = summarize_pivots(&core.samples)?;
                let pivots = sigma2 * &summary.pivot_draws;
                let (ci_lower, ci_upper) = pivot_intervals(&core.estimate, &pivots, alpha)?;
                let score_residual = &xty - &summary.stat_mean;
                // a coordinate that never once visits the sign the data
                // produced, while its score stays biased well beyond the
                // sampling noise, marks a chain stuck in a sign assignment
                // whose weight collapsed during the ascent
                let trapped = (0..score_residual.len()).any(|j| {
                    core.observed_sign_visits[j] == 0
                        && score_residual[j].abs() > SCORE_ROOT_TOL * summary.stat_stderr[j]
                });
                let score_stderr = summary
                    .stat_stderr
                    .zip_map(&core.estimate_stderr, |s, e| (s * s + e * e).sqrt());
                Ok((
                    trapped,
                    LassoConditionalFit {
                        estimate: core.estimate,
                        active: fit.active.clone(),
                        signs: fit.signs.clone(),
                        lambda,
                        sigma2,
                        ci_lower,
                        ci_upper,
                        pivot_draws: pivots,
                        score_residual,
                        score_stderr,
                        refit: stats_exi.eta.clone(),
                        lasso_beta: lasso_beta.clone(),
                        sign_projection_count: core.projections,
                        stats: core.stats,
                        n_steps,
                        step_scale_used: a_used,
                        score_ok: false,
                        attempts: attempt,
                    },
                ))
            });
        match outcome {
            Ok((trapped, mut cand)) => {
                let ratio = score_root_ratio(&cand.score_residual, &cand.score_stderr);
                if !trapped && ratio <= SCORE_ROOT_TOL {
                    cand.score_ok = true;
                    return Ok(cand);
                }
                let better = match &best {
                    None => true,
                    Some((bt, br, _)) => (trapped, ratio) < (*bt, *br),
                };
                if better {
                    best = Some((trapped, ratio, cand));
                }
            }
            Err(e @ (Error::SingularCovariance { .. } | Error::DegenerateMass { .. })) => {
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
        n_steps = n_steps.saturating_mul(2);
    }
    if let Some((_, _, mut cand)) = best {
        cand.attempts = opts.max_attempts as u32;
        return Ok(cand);
    }
    Err(last_err.expect("no attempt outcome recorded"))
}

/// Re-derives intervals at a different level from the stored pivots.
pub fn lasso_conditional_ci(
    fit: &LassoConditionalFit,
    alpha: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    pivot_intervals(&fit.estimate, &fit.pivot_draws, alpha)
}

/// Refitted-Wald intervals that ignore selection: β̂_j ± z_{1−α/2}·σ√(K⁻¹)_jj
/// around the refitted least-squares estimate.
pub fn refitted_wald_ci(
    event: &SelectionEvent,
    refit: &DVector<f64>,
    sigma2: f64,
    alpha: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            value: alpha,
            reason: "miscoverage level must lie in (0, 1)",
        });
    }
    let z = crate::normal::std_quantile(1.0 - alpha / 2.0);
    let m = refit.len();
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    for j in 0..m {
        let half = z * (sigma2 * event.xtx_m_inv[(j, j)]).sqrt();
        lower[j] = refit[j] - half;
        upper[j] = refit[j] + half;
    }
    Ok((lower, upper))
}

/// A log-likelihood surface over the selected coefficients (|M| ≤ 2 only).
#[derive(Debug, Clone, Serialize)]
pub struct LoglikSurface {
    pub axis1: Vec<f64>,
    /// Empty for a one-dimensional surface.
    pub axis2: Vec<f64>,
    /// Row-major: values[i1 * max(1, axis2.len()) + i2].
    pub values: Vec<f64>,
}

/// Result of evaluating one imputation strategy.
#[derive(Debug, Clone)]
pub struct ImputationComparison {
    pub strategy: String,
    /// Stochastic-ascent conditional MLE.
    pub mle: DVector<f64>,
    /// Deterministic maximizer of the likelihood proxy for |M| ≤ 2;
    /// falls back to `mle` above that.
    pub argmax: DVector<f64>,
    /// Proxy log-likelihood at `argmax` (|M| ≤ 2 only).
    pub max_loglik: Option<f64>,
    pub surface: Option<LoglikSurface>,
}

fn ln_gauss_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let m = y.len();
    let chol = Cholesky::new(cov.clone())
        .ok_or(Error::SingularCovariance { cond: f64::INFINITY })?;
    let d = y - mean;
    let solved = chol.solve(&d);
    let q = d.dot(&solved);
    let ln_det: f64 = (0..m).map(|i| chol.l()[(i, i)].ln()).sum();
    Ok(-(m as f64) * LN_SQRT_2PI - ln_det - 0.5 * q)
}

fn mask_signs(mask: usize, m: usize) -> DVector<f64> {
    DVector::from_fn(m, |j, _| if mask & (1 << j) != 0 { -1.0 } else { 1.0 })
}

fn orthant_regions(event: &SelectionEvent, signs: &DVector<f64>) -> Result<Vec<TruncRegion>> {
    (0..signs.len())
        .map(|j| {
            let (l, u) = sign_thresholds(event, j, signs);
            if signs[j] > 0.0 {
                TruncRegion::inside(u, f64::INFINITY)
            } else {
                TruncRegion::inside(f64::NEG_INFINITY, l)
            }
        })
        .collect()
}

/// Conditional log-likelihood proxy at mean `b`: the Gaussian log density
/// of the observed η minus the log of the sign-orthant probabilities
/// weighted by the box probabilities of ξ under the imputed mean.
pub fn imputation_loglik(
    event: &SelectionEvent,
    eta_obs: &DVector<f64>,
    cov_eta: &DMatrix<f64>,
    weights: &[f64],
    b: &DVector<f64>,
) -> Result<f64> {
    let m = eta_obs.len();
    let mut ln_norm = f64::NEG_INFINITY;
    for (mask, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let signs = mask_signs(mask, m);
        let regions = orthant_regions(event, &signs)?;
        let ln_p = ln_event_probability(b, cov_eta, &regions)?;
        ln_norm = log_add_exp(ln_norm, w.ln() + ln_p);
    }
    if ln_norm == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter {
            name: "weights",
            value: 0.0,
            reason: "all sign-orthant weights vanished",
        });
    }
    Ok(ln_gauss_density(eta_obs, b, cov_eta)? - ln_norm)
}

/// Monte-Carlo box probabilities P(ξ ∈ box(s)) for every sign assignment,
/// indexed by bitmask (bit j set ⇔ s_j = −1), from `n_draws` shared draws
/// of ξ ~ N(xi_mean, cov_xi).
fn orthant_weights(
    event: &SelectionEvent,
    cov_xi: &DMatrix<f64>,
    xi_mean: &DVector<f64>,
    n_draws: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let m = event.active.len();
    let d = event.inactive.len();
    let n_masks = 1usize << m;
    if d == 0 {
        return Ok(vec![1.0; n_masks]);
    }
    let chol = Cholesky::new(cov_xi.clone())
        .ok_or(Error::SingularCovariance { cond: f64::INFINITY })?;
    let mut counts = vec![0usize; n_masks];
    let bounds: Vec<(DVector<f64>, DVector<f64>)> = (0..n_masks)
        .map(|mask| event.inactive_bounds_for(&mask_signs(mask, m)))
        .collect();
    for _ in 0..n_draws {
        let z = DVector::from_fn(d, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        });
        let xi = xi_mean + chol.l() * z;
        for (mask, (l0, u0)) in bounds.iter().enumerate() {
            if (0..d).all(|k| l0[k] < xi[k] && xi[k] < u0[k]) {
                counts[mask] += 1;
            }
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / n_draws as f64).collect())
}

/// Fits the conditional MLE under each strategy with identical RNG streams
/// (so strategies with identical inputs produce identical output), and for
/// |M| ≤ 2 also maximizes a deterministic likelihood proxy, optionally
/// tabulating it on a grid.
pub fn compare_imputations(
    data: &Dataset,
    lambda: f64,
    sigma2: f64,
    strategies: &[ImputationStrategy],
    opts: &AscentOptions,
    seed: u64,
    emit_surface: bool,
) -> Result<Vec<ImputationComparison>> {
    let fit = fit_lasso(data, lambda)?;
    if fit.active.is_empty() {
        return Err(Error::NoSelection);
    }
    let event = selection_event(&data.x, &fit.active, &fit.signs, lambda)?;
    let stats_exi = eta_xi(&data.x, &data.y, &event, sigma2)?;
    let m = fit.active.len();
    let mut out = Vec::with_capacity(strategies.len());
    for strategy in strategies {
        let mut rng = stream_rng(seed, 0, Phase::Sampler);
        let mle = fit_lasso_mle(data, lambda, sigma2, strategy, opts, &mut rng)?;
        let (argmax, max_loglik, surface) = if m <= 2 {
            let spec_mean = match strategy {
                ImputationStrategy::Zero | ImputationStrategy::None => {
                    DVector::zeros(event.inactive.len())
                }
                ImputationStrategy::Plugin => stats_exi.xi.clone(),
                ImputationStrategy::Truth(v) => v.clone(),
            };
            let weights = if matches!(strategy, ImputationStrategy::None) {
                vec![1.0; 1 << m]
            } else {
                let mut wrng = stream_rng(seed, 1, Phase::Sampler);
                orthant_weights(&event, &stats_exi.cov_xi, &spec_mean, 4096, &mut wrng)?
            };
            let value = |b: &DVector<f64>| -> f64 {
                imputation_loglik(&event, &stats_exi.eta, &stats_exi.cov_eta, &weights, b)
                    .unwrap_or(f64::NEG_INFINITY)
            };
            let sd: Vec<f64> = (0..m).map(|j| stats_exi.cov_eta[(j, j)].sqrt()).collect();
            let (argmax, best) = if m == 1 {
                let lo = stats_exi.eta[0].min(mle.estimate[0]).min(0.0) - 4.0 * sd[0];
                let hi = stats_exi.eta[0].max(mle.estimate[0]).max(0.0) + 4.0 * sd[0];
                let f1 = |v: f64| value(&DVector::from_vec(vec![v]));
                let x = grid_then_golden(&f1, lo, hi, (hi - lo) / 200.0);
                (DVector::from_vec(vec![x]), f1(x))
            } else {
                let f2 = |u: f64, v: f64| value(&DVector::from_vec(vec![u, v]));
                let starts = [
                    (stats_exi.eta[0], stats_exi.eta[1]),
                    (mle.estimate[0], mle.estimate[1]),
                    (0.0, 0.0),
                ];
                let mut best = (f64::NEG_INFINITY, (0.0, 0.0));
                for s in starts {
                    let (x, y, v) = nelder_mead_2d(&f2, s);
                    if v > best.0 {
                        best = (v, (x, y));
                    }
                }
                (DVector::from_vec(vec![best.1 .0, best.1 .1]), best.0)
            };
            let surface = if emit_surface {
                let grid_n = 41usize;
                let mut axes: Vec<Vec<f64>> = Vec::new();
                for j in 0..m {
                    let center = argmax[j];
                    let half = 3.0 * sd[j] + (stats_exi.eta[j] - center).abs();
                    axes.push(
                        (0..grid_n)
                            .map(|i| {
                                center - half
                                    + 2.0 * half * i as f64 / (grid_n - 1) as f64
                            })
                            .collect(),
                    );
                }
                let mut values = Vec::new();
                if m == 1 {
                    for &v in &axes[0] {
                        values.push(value(&DVector::from_vec(vec![v])));
                    }
                    LoglikSurface {
                        axis1: axes[0].clone(),
                        axis2: Vec::new(),
                        values,
                    }
                } else {
                    for &v1 in &axes[0] {
                        for &v2 in &axes[1] {
                            values.push(value(&DVector::from_vec(vec![v1, v2])));
                        }
                    }
                    LoglikSurface {
                        axis1: axes[0].clone(),
                        axis2: axes[1].clone(),
                        values,
                    }
                }
                .into()
            } else {
                None
            };
            (argmax, Some(best), surface)
        } else {
            (mle.estimate.clone(), None, None)
        };
        out.push(ImputationComparison {
            strategy: strategy.name().to_string(),
            mle: mle.estimate,
            argmax,
            max_loglik,
            surface,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Phase};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn ar1_design(n: usize, p: usize, rho: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 0, Phase::Design);
        let mut x = DMatrix::zeros(n, p);
        let scale = (1.0 - rho * rho).sqrt();
        for i in 0..n {
            let mut prev: f64 = StandardNormal.sample(&mut rng);
            x[(i, 0)] = prev;
            for j in 1..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                prev = rho * prev + scale * z;
                x[(i, j)] = prev;
            }
        }
        x
    }

    fn selected_instance(
        n: usize,
        p: usize,
        rho: f64,
        signal: f64,
        frac: f64,
        seed: u64,
    ) -> Option<(Dataset, f64, crate::lasso::LassoFit)> {
        let x = ar1_design(n, p, rho, seed);
        let mut rng = stream_rng(seed, 0, Phase::Noise);
        let mut beta = DVector::zeros(p);
        beta[0] = signal;
        if p > 2 {
            beta[2] = -signal;
        }
        let noise = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let y = &x * beta + noise;
        let data = Dataset::new(x, y).ok()?;
        let lambda = frac * (data.x.transpose() * &data.y).amax();
        let fit = fit_lasso(&data, lambda).ok()?;
        if fit.active.is_empty() {
            return None;
        }
        Some((data, lambda, fit))
    }

    fn spec_for(
        data: &Dataset,
        lambda: f64,
        fit: &crate::lasso::LassoFit,
        sigma2: f64,
        strategy: &ImputationStrategy,
    ) -> (MhSpec, MhState, EtaXi) {
        let event = selection_event(&data.x, &fit.active, &fit.signs, lambda).unwrap();
        let stats = eta_xi(&data.x, &data.y, &event, sigma2).unwrap();
        let state = MhState {
            eta: stats.eta.clone(),
            xi: stats.xi.clone(),
            signs: event.signs.clone(),
        };
        let spec = MhSpec::new(event, &stats, sigma2, strategy).unwrap();
        (spec, state, stats)
    }

    #[test]
    fn test_threshold_interval_width_and_membership() {
        let (data, lambda, fit) =
            selected_instance(40, 6, 0.4, 1.5, 0.35, 21).expect("selection");
        let (spec, state, _) = spec_for(&data, lambda, &fit, 1.0, &ImputationStrategy::Zero);
        let m = fit.active.len();
        for j in 0..m {
            let (l, u) = sign_thresholds(&spec.event, j, &state.signs);
            assert_relative_eq!(
                u - l,
                2.0 * lambda * spec.event.xtx_m_inv[(j, j)],
                max_relative = 1e-12
            );
            // observed refit lies on its fitted-sign side
            if state.signs[j] > 0.0 {
                assert!(state.eta[j] > u - 1e-9);
            } else {
                assert!(state.eta[j] < l + 1e-9);
            }
        }
        assert!(in_a1(&spec.event, &state.eta, &state.signs));
    }

    #[test]
    fn test_acceptance_ratio_matches_frozen_reference() {
        // 2-coordinate configuration with every density evaluated through an
        // independent 60-digit computation of the same ratio; constants
        // frozen from that run
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.5]);
        let sigma2 = 1.3;
        let lambda = 0.8;
        // build a design whose Gram matrix is exactly k via its Cholesky
        let lchol = Cholesky::new(k.clone()).unwrap();
        let x = lchol.l().transpose();
        let event = selection_event(&x, &[0, 1], &[1.0, 1.0], lambda).unwrap();
        let stats = EtaXi {
            eta: DVector::from_vec(vec![0.9, 0.5]),
            xi: DVector::zeros(0),
            cov_eta: sigma2 * &event.xtx_m_inv,
            cov_xi: DMatrix::zeros(0, 0),
        };
        let mut spec = MhSpec::new(event, &stats, sigma2, &ImputationStrategy::Zero).unwrap();
        spec.beta = DVector::from_vec(vec![0.4, 0.3]);

        let s = DVector::from_vec(vec![1.0, 1.0]);
        let sp = DVector::from_vec(vec![-1.0, 1.0]);
        let xcur = DVector::from_vec(vec![0.9, 0.5]);
        let yprop = DVector::from_vec(vec![-0.8, 1.0]);
        let lr = log_accept_ratio(&spec, &xcur, &yprop, 0, &s, &sp).unwrap();
        assert_relative_eq!(lr, -0.7337649076535720, max_relative = 1e-12);
        let lr_rev = log_accept_ratio(&spec, &yprop, &xcur, 0, &sp, &s).unwrap();
        assert_relative_eq!(lr + lr_rev, 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            acceptance_prob(&spec, &xcur, &yprop, 0, &s, &sp).unwrap(),
            (-0.7337649076535720f64).exp(),
            max_relative = 1e-12
        );

        let s2 = DVector::from_vec(vec![1.0, -1.0]);
        let sp2 = DVector::from_vec(vec![1.0, 1.0]);
        let x2 = DVector::from_vec(vec![0.95, -1.2]);
        let y2 = DVector::from_vec(vec![0.75, 0.9]);
        let lr2 = log_accept_ratio(&spec, &x2, &y2, 1, &s2, &sp2).unwrap();
        assert_relative_eq!(lr2, 0.4143876603917811, max_relative = 1e-12);
    }

    #[test]
    fn test_identical_proposal_accepts() {
        let (data, lambda, fit) =
            selected_instance(40, 6, 0.4, 1.5, 0.35, 22).expect("selection");
        let (spec, state, _) = spec_for(&data, lambda, &fit, 1.0, &ImputationStrategy::Zero);
        let j = 0;
        let s = state.signs.clone();
        let p = acceptance_prob(&spec, &state.eta, &state.eta, j, &s, &s).unwrap();
        assert_relative_eq!(p, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn test_single_selected_coordinate_reduces_to_exact_draws() {
        // p = |M| = 1: the sweep is an exact truncated draw, flips are
        // always immediate, and nothing is ever rejected
        let mut rng = stream_rng(5, 0, Phase::Design);
        let x = DMatrix::from_fn(20, 1, |_, _| StandardNormal.sample(&mut rng));
        let y = x.column(0) * 0.9
            + DVector::from_fn(20, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            });
        let data = Dataset::new(x, y).unwrap();
        let lambda = 0.3 * (data.x.transpose() * &data.y).amax();
        let fit = fit_lasso(&data, lambda).unwrap();
        assert_eq!(fit.active, vec![0]);
        let (mut spec, mut state, _) =
            spec_for(&data, lambda, &fit, 0.25, &ImputationStrategy::Zero);
        spec.beta = DVector::from_vec(vec![0.05]);
        let (l, u) = sign_thresholds(&spec.event, 0, &state.signs);
        let mut chain = Vec::new();
        let mut agg = SweepStats::default();
        let mut srng = stream_rng(6, 0, Phase::Sampler);
        for _ in 0..30_000 {
            agg.merge(&mh_sweep(&mut state, &spec, &mut srng).unwrap());
            chain.push(state.eta[0]);
        }
        assert_eq!(agg.flip_stage2_accept + agg.flip_stage2_reject, 0);
        assert_eq!(agg.flip_xi_reject + agg.flip_reverse_reject, 0);
        assert_eq!(agg.no_flip + agg.flip_immediate, agg.proposals);
        // iid draws from the two-tail law: moments match the direct formula
        let region = TruncRegion::outside(l, u).unwrap();
        let (mean_ref, var_ref) =
            crate::trunc::trunc_moments(0.05, spec.cov_eta[(0, 0)], &region).unwrap();
        let mean: f64 = chain.iter().sum::<f64>() / chain.len() as f64;
        let var: f64 =
            chain.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chain.len() as f64;
        let se = (var_ref / chain.len() as f64).sqrt();
        assert!((mean - mean_ref).abs() < 4.0 * se, "mean {mean} vs {mean_ref}");
        assert_relative_eq!(var, var_ref, max_relative = 0.1);
    }

    #[test]
    fn test_sweeps_preserve_event_membership() {
        let (data, lambda, fit) =
            selected_instance(30, 4, 0.5, 0.6, 0.25, 23).expect("selection");
        let sigma2 = 1.0;
        let (mut spec, mut state, stats) =
            spec_for(&data, lambda, &fit, sigma2, &ImputationStrategy::Zero);
        spec.beta = stats.eta.clone();
        let mut rng = stream_rng(7, 0, Phase::Sampler);
        let mut straddle_checked = 0;
        for _ in 0..2000 {
            mh_sweep(&mut state, &spec, &mut rng).unwrap();
            let (a_ok, i_ok) = spec.event.in_event(&state.eta, &state.xi, &state.signs);
            assert!(a_ok && i_ok);
            // when every threshold interval straddles zero, the orthant side
            // coincides with the literal sign of eta
            let all_straddle = (0..state.eta.len()).all(|j| {
                let (l, u) = sign_thresholds(&spec.event, j, &state.signs);
                l < 0.0 && u > 0.0
            });
            if all_straddle {
                straddle_checked += 1;
                for j in 0..state.eta.len() {
                    assert_eq!(state.eta[j].signum(), state.signs[j]);
                }
            }
        }
        assert!(straddle_checked > 0, "no straddling configurations seen");
    }

    #[test]
    fn test_chain_matches_rejection_sampling_oracle() {
        // small instance where the raw selection probability is large
        // enough for rejection sampling to serve as an oracle
        let sigma2 = 1.0;
        let mut picked = None;
        for seed in 29..70u64 {
            if let Some((data, lambda, fit)) = selected_instance(30, 4, 0.5, 0.8, 0.3, seed) {
                if fit.active.len() == 2 {
                    picked = Some((data, lambda, fit));
                    break;
                }
            }
        }
        let (data, lambda, fit) = picked.expect("no two-coordinate selection found");
        let m = fit.active.len();
        let (mut spec, mut state, stats) =
            spec_for(&data, lambda, &fit, sigma2, &ImputationStrategy::Zero);
        let beta_mean = stats.eta.clone();
        spec.beta = beta_mean.clone();

        // oracle: unconstrained (η, ξ) pairs kept when some sign assignment
        // puts them in the event
        let chol_eta = Cholesky::new(stats.cov_eta.clone()).unwrap();
        let chol_xi = Cholesky::new(stats.cov_xi.clone()).unwrap();
        let d = spec.event.inactive.len();
        let mut orng = stream_rng(41, 0, Phase::Sampler);
        let masks: Vec<DVector<f64>> = (0..(1usize << m)).map(|k| mask_signs(k, m)).collect();
        let mut kept: Vec<DVector<f64>> = Vec::new();
        let mut tries = 0u64;
        while kept.len() < 40_000 && tries < 4_000_000 {
            tries += 1;
            let ze = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut orng));
            let eta = &beta_mean + chol_eta.l() * ze;
            let zx = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut orng));
            let xi = chol_xi.l() * zx; // zero imputed mean
            for s in &masks {
                if in_a1(&spec.event, &eta, s) {
                    let (l0, u0) = spec.event.inactive_bounds_for(s);
                    if (0..d).all(|k| l0[k] < xi[k] && xi[k] < u0[k]) {
                        kept.push(eta);
                    }
                    break;
                }
            }
        }
        let rate = kept.len() as f64 / tries as f64;
        assert!(rate > 0.05, "event probability too small for oracle: {rate}");
        assert!(kept.len() >= 40_000);

        let mut rng = stream_rng(42, 0, Phase::Sampler);
        for _ in 0..500 {
            mh_sweep(&mut state, &spec, &mut rng).unwrap();
        }
        let n_chain = 60_000;
        let mut chain = DMatrix::zeros(n_chain, m);
        for t in 0..n_chain {
            mh_sweep(&mut state, &spec, &mut rng).unwrap();
            chain.row_mut(t).copy_from(&state.eta.transpose());
        }
        for j in 0..m {
            let col: Vec<f64> = (0..n_chain).map(|t| chain[(t, j)]).collect();
            let chain_mean = col.iter().sum::<f64>() / n_chain as f64;
            let se_chain = batch_means_stderr(&col, MC_BATCHES);
            let oracle: Vec<f64> = kept.iter().map(|v| v[j]).collect();
            let o_mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
            let o_var = oracle
                .iter()
                .map(|v| (v - o_mean) * (v - o_mean))
                .sum::<f64>()
                / (oracle.len() - 1) as f64;
            let se_oracle = (o_var / oracle.len() as f64).sqrt();
            let tol = 4.0 * (se_chain * se_chain + se_oracle * se_oracle).sqrt();
            assert!(
                (chain_mean - o_mean).abs() < tol,
                "coordinate {j}: chain {chain_mean} oracle {o_mean} tol {tol}"
            );
            // marginal variances agree as well
            let c_var = col
                .iter()
                .map(|v| (v - chain_mean) * (v - chain_mean))
                .sum::<f64>()
                / (n_chain - 1) as f64;
            assert_relative_eq!(c_var, o_var, max_relative = 0.1);
        }
    }

    #[test]
    fn test_xi_draws_respect_box_and_match_marginals() {
        // orthonormal design, manual selection of two columns: the inactive
        // statistic has diagonal covariance and the box is (−1, 1) per
        // coordinate, so chain marginals must match direct truncated moments
        let raw = ar1_design(24, 4, 0.0, 31);
        let q = raw.qr().q().columns(0, 4).into_owned();
        let lambda = 0.6;
        let sigma2 = 0.9;
        let event = selection_event(&q, &[0, 1], &[1.0, 1.0], lambda).unwrap();
        let y = DVector::from_fn(24, |i, _| (i as f64 * 0.7).sin());
        let stats = eta_xi(&q, &y, &event, sigma2).unwrap();
        let truth = DVector::from_vec(vec![0.3, 0.3]);
        let spec = MhSpec::new(
            event,
            &stats,
            sigma2,
            &ImputationStrategy::Truth(truth.clone()),
        )
        .unwrap();
        assert!(spec.event.cross.amax() < 1e-10);
        for k in 0..2 {
            assert_relative_eq!(spec.event.l0[k], -1.0, epsilon = 1e-10);
            assert_relative_eq!(spec.event.u0[k], 1.0, epsilon = 1e-10);
        }
        let var = sigma2 / (lambda * lambda);
        let signs = spec.event.signs.clone();
        let mut rng = stream_rng(8, 0, Phase::Sampler);
        let mut xi = DVector::zeros(2);
        let n = 20_000;
        let mut draws = vec![Vec::with_capacity(n), Vec::with_capacity(n)];
        for _ in 0..n {
            let (next, skips) = sample_xi(&spec, &signs, &xi, &mut rng).unwrap();
            assert_eq!(skips, 0);
            xi = next;
            for k in 0..2 {
                assert!(xi[k] > -1.0 && xi[k] < 1.0);
                draws[k].push(xi[k]);
            }
        }
        let region = TruncRegion::inside(-1.0, 1.0).unwrap();
        let (mean_ref, var_ref) = crate::trunc::trunc_moments(0.3, var, &region).unwrap();
        for k in 0..2 {
            let mean = draws[k].iter().sum::<f64>() / n as f64;
            let se = batch_means_stderr(&draws[k], MC_BATCHES);
            assert!(
                (mean - mean_ref).abs() < 4.0 * se.max((var_ref / n as f64).sqrt()),
                "coordinate {k}: {mean} vs {mean_ref}"
            );
        }
    }

    #[test]
    fn test_unconditioned_strategy_draws_untruncated() {
        let (data, lambda, fit) =
            selected_instance(30, 5, 0.3, 1.0, 0.35, 37).expect("selection");
        let (spec, state, stats) =
            spec_for(&data, lambda, &fit, 1.0, &ImputationStrategy::None);
        assert!(spec.skip_xi_gate);
        let mut rng = stream_rng(9, 0, Phase::Sampler);
        let d = spec.event.inactive.len();
        let n = 10_000;
        let mut sums = DVector::zeros(d);
        for _ in 0..n {
            let (draw, _) = sample_xi(&spec, &state.signs, &state.xi, &mut rng).unwrap();
            sums += draw;
        }
        for k in 0..d {
            let mean = sums[k] / n as f64;
            let se = (stats.cov_xi[(k, k)] / n as f64).sqrt();
            assert!(
                mean.abs() < 3.0 * se,
                "coordinate {k}: mean {mean}, se {se}"
            );
        }
    }

    #[test]
    fn test_lasso_coefficients_tie_to_event_algebra() {
        // the fitted lasso coefficients must equal η − λK⁻¹s on the active set
        let (data, lambda, fit) =
            selected_instance(50, 8, 0.4, 1.2, 0.3, 43).expect("selection");
        let event = selection_event(&data.x, &fit.active, &fit.signs, lambda).unwrap();
        let stats = eta_xi(&data.x, &data.y, &event, 1.0).unwrap();
        let shrunk = &stats.eta - lambda * (&event.xtx_m_inv * &event.signs);
        for (k, &j) in fit.active.iter().enumerate() {
            assert_relative_eq!(fit.beta[j], shrunk[k], epsilon = 1e-7);
        }
    }

    #[test]
    fn test_strong_signal_estimate_stays_near_refit() {
        // thresholds far below the signal mean the constraint barely binds
        let x = ar1_design(80, 4, 0.2, 51);
        let mut rng = stream_rng(51, 0, Phase::Noise);
        let mut beta = DVector::zeros(4);
        beta[0] = 3.0;
        beta[2] = -3.0;
        let y = &x * beta
            + DVector::from_fn(80, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.7 * z
            });
        let data = Dataset::new(x, y).unwrap();
        let lambda = 0.08 * (data.x.transpose() * &data.y).amax();
        let fit = fit_lasso(&data, lambda).unwrap();
        assert!(fit.active.contains(&0) && fit.active.contains(&2));
        let sigma2 = 0.49;
        let opts = AscentOptions {
            n_steps: 4000,
            ..AscentOptions::default()
        };
        let mut srng = stream_rng(52, 0, Phase::Sampler);
        let out = fit_lasso_mle(
            &data,
            lambda,
            sigma2,
            &ImputationStrategy::Zero,
            &opts,
            &mut srng,
        )
        .unwrap();
        let event = selection_event(&data.x, &fit.active, &fit.signs, lambda).unwrap();
        for j in 0..out.estimate.len() {
            let marginal_sd = (sigma2 * event.xtx_m_inv[(j, j)]).sqrt();
            assert!(
                (out.estimate[j] - out.refit[j]).abs() < 0.12 * marginal_sd.max(0.05),
                "coordinate {j}: estimate {} refit {}",
                out.estimate[j],
                out.refit[j]
            );
        }
        // near-unconstrained: conditional intervals close to refitted-Wald
        let (wl, wu) = refitted_wald_ci(&event, &out.refit, sigma2, 0.05).unwrap();
        for j in 0..out.estimate.len() {
            let len_c = out.ci_upper[j] - out.ci_lower[j];
            let len_w = wu[j] - wl[j];
            assert!(
                (len_c / len_w - 1.0).abs() < 0.15,
                "coordinate {j}: conditional {len_c} vs wald {len_w}"
            );
        }
        // score root condition at the output
        for j in 0..out.estimate.len() {
            assert!(
                out.score_residual[j].abs() < 4.0 * out.score_stderr[j],
                "score coordinate {j}: {} vs stderr {}",
                out.score_residual[j],
                out.score_stderr[j]
            );
        }
    }

    #[test]
    fn test_sign_constraint_and_shrinkage_direction() {
        let mut ratios = Vec::new();
        for seed in 0..12u64 {
            let Some((data, lambda, _fit)) = selected_instance(40, 8, 0.3, 0.45, 0.4, 60 + seed)
            else {
                continue;
            };
            let sigma2 = 1.0;
            let mut rng = stream_rng(70 + seed, 0, Phase::Sampler);
            let opts = AscentOptions {
                n_steps: 600,
                quantile_samples: 600,
                ci_level: 0.8,
                ..AscentOptions::default()
            };
            let Ok(out) = fit_lasso_mle(
                &data,
                lambda,
                sigma2,
                &ImputationStrategy::Zero,
                &opts,
                &mut rng,
            ) else {
                continue;
            };
            for j in 0..out.estimate.len() {
                // no coordinate may oppose the refit sign
                assert!(out.estimate[j] * out.refit[j] >= 0.0);
                let denom = out.refit[j] - out.lasso_beta[j];
                if denom.abs() > 1e-9 {
                    ratios.push((out.estimate[j] - out.lasso_beta[j]) / denom);
                }
            }
        }
        assert!(ratios.len() >= 10, "not enough fitted coordinates");
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[ratios.len() / 2];
        assert!(
            (-0.05..=1.05).contains(&median),
            "median shrinkage position {median}"
        );
    }

    #[test]
    fn test_stage_two_branch_is_live_with_three_coordinates() {
        // strongly correlated 3-coordinate Gram matrix and a mean at the
        // origin: sign flips are frequent and the flipped thresholds move
        // enough that some flips can only land through the second stage
        let k = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.6, 0.36, 0.6, 1.0, 0.6, 0.36, 0.6, 1.0],
        );
        let lchol = Cholesky::new(k.clone()).unwrap();
        let x = lchol.l().transpose();
        let lambda = 0.9;
        let event = selection_event(&x, &[0, 1, 2], &[1.0, 1.0, 1.0], lambda).unwrap();
        let sigma2 = 1.0;
        let stats = EtaXi {
            eta: DVector::from_element(3, 0.0),
            xi: DVector::zeros(0),
            cov_eta: sigma2 * &event.xtx_m_inv,
            cov_xi: DMatrix::zeros(0, 0),
        };
        let signs = DVector::from_element(3, 1.0);
        let mut eta = DVector::zeros(3);
        for j in 0..3 {
            let (_, u) = sign_thresholds(&event, j, &signs);
            eta[j] = u + 0.4;
        }
        assert!(in_a1(&event, &eta, &signs));
        let mut spec = MhSpec::new(event, &stats, sigma2, &ImputationStrategy::Zero).unwrap();
        spec.beta = DVector::zeros(3);
        let mut state = MhState {
            eta,
            xi: DVector::zeros(0),
            signs,
        };
        let mut rng = stream_rng(17, 0, Phase::Sampler);
        let mut agg = SweepStats::default();
        for _ in 0..30_000 {
            agg.merge(&mh_sweep(&mut state, &spec, &mut rng).unwrap());
            assert!(in_a1(&spec.event, &state.eta, &state.signs));
        }
        assert!(
            agg.flip_stage2_accept > 0,
            "second stage never accepted: {agg:?}"
        );
        assert!(agg.flip_stage2_reject + agg.flip_reverse_reject > 0);
        assert!(agg.flip_immediate > 0);
    }

    #[test]
    fn test_numerical_rejects_are_rare() {
        let (data, lambda, fit) =
            selected_instance(30, 4, 0.5, 0.6, 0.25, 23).expect("selection");
        let (mut spec, mut state, stats) =
            spec_for(&data, lambda, &fit, 1.0, &ImputationStrategy::Zero);
        spec.beta = stats.eta.clone();
        let mut rng = stream_rng(11, 0, Phase::Sampler);
        let mut agg = SweepStats::default();
        for _ in 0..20_000 {
            agg.merge(&mh_sweep(&mut state, &spec, &mut rng).unwrap());
        }
        assert!(agg.proposals > 0);
        assert!(
            (agg.numerical_reject as f64) < 0.001 * agg.proposals as f64,
            "numerical rejects {} of {}",
            agg.numerical_reject,
            agg.proposals
        );
    }

    #[test]
    fn test_fit_deterministic_given_stream() {
        let (data, lambda, _) = selected_instance(30, 5, 0.3, 1.0, 0.35, 37).expect("selection");
        let opts = AscentOptions {
            n_steps: 200,
            quantile_samples: 200,
            ci_level: 0.5,
            ..AscentOptions::default()
        };
        let run = || {
            let mut rng = stream_rng(13, 0, Phase::Sampler);
            fit_lasso_mle(
                &data,
                lambda,
                1.0,
                &ImputationStrategy::Zero,
                &opts,
                &mut rng,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.ci_lower, b.ci_lower);
        assert_eq!(a.sign_projection_count, b.sign_projection_count);
    }

    #[test]
    fn test_truth_at_zero_matches_zero_strategy() {
        let (data, lambda, fit) =
            selected_instance(30, 5, 0.3, 1.0, 0.35, 37).expect("selection");
        let d = data.p() - fit.active.len();
        let opts = AscentOptions {
            n_steps: 150,
            quantile_samples: 200,
            ci_level: 0.5,
            ..AscentOptions::default()
        };
        let strategies = vec![
            ImputationStrategy::Zero,
            ImputationStrategy::Truth(DVector::zeros(d)),
        ];
        let out = compare_imputations(&data, lambda, 1.0, &strategies, &opts, 77, false).unwrap();
        assert_eq!(out[0].mle, out[1].mle);
        assert_eq!(out[0].argmax, out[1].argmax);
        assert_eq!(out[0].max_loglik, out[1].max_loglik);
    }

    #[test]
    fn test_imputation_argmaxes_agree_on_easy_instance() {
        // single-coordinate selection: the proxy maximizers under all
        // strategies should nearly coincide
        let mut found = None;
        for seed in 80..120u64 {
            if let Some((data, lambda, fit)) = selected_instance(40, 4, 0.3, 0.8, 0.5, seed) {
                if fit.active.len() == 1 {
                    found = Some((data, lambda));
                    break;
                }
            }
        }
        let (data, lambda) = found.expect("no single-selection instance");
        let opts = AscentOptions {
            n_steps: 400,
            quantile_samples: 300,
            ci_level: 0.5,
            ..AscentOptions::default()
        };
        let strategies = vec![
            ImputationStrategy::Zero,
            ImputationStrategy::None,
            ImputationStrategy::Plugin,
        ];
        let out = compare_imputations(&data, lambda, 1.0, &strategies, &opts, 99, false).unwrap();
        // dropping the box constraints barely moves the maximizer on an
        // instance where the box mass is near one
        assert!(
            (out[0].argmax[0] - out[1].argmax[0]).abs() < 0.05,
            "{} {} vs {} {}",
            out[0].strategy,
            out[0].argmax[0],
            out[1].strategy,
            out[1].argmax[0]
        );
        assert!(out[2].argmax[0].is_finite());
        // the stochastic MLE should land near the deterministic maximizer
        assert!(
            (out[0].mle[0] - out[0].argmax[0]).abs() < 0.25,
            "ascent {} vs quadrature {}",
            out[0].mle[0],
            out[0].argmax[0]
        );
    }
}
