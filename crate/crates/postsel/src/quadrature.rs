//! Deterministic low-dimensional diagnostics for the selected-means model.
//!
//! For one or two coordinates the probability of a coordinatewise selection
//! event reduces to closed-form tail masses, or to a one-dimensional integral
//! of (normal density) x (conditional tail mass), which Simpson's rule
//! resolves to near machine precision. On top of that sit exact conditional
//! log-likelihoods and grid/simplex maximizers used to cross-check the
//! stochastic-ascent fits. Everything here is deterministic.

use crate::error::{Error, Result};
use crate::normal::{ln_phi, log_add_exp, LN_SQRT_2PI};
use crate::normal_means::{select, NormalMeansProblem};
use crate::trunc::{ln_interval_mass, RegionKind, TruncRegion};
use nalgebra::{DMatrix, DVector};

const MAX_DIM: usize = 2;

fn check_dim(p: usize) -> Result<()> {
    if p == 0 || p > MAX_DIM {
        return Err(Error::InvalidParameter {
            name: "dim",
            value: p as f64,
            reason: "exact quadrature supports one or two coordinates",
        });
    }
    Ok(())
}

fn z_of(x: f64, mu: f64, sd: f64) -> f64 {
    if x.is_infinite() {
        x
    } else {
        (x - mu) / sd
    }
}

/// Log tail mass of N(mu, sigma2) over the region.
fn ln_region_mass(mu: f64, sigma2: f64, region: &TruncRegion) -> f64 {
    let sd = sigma2.sqrt();
    let zl = z_of(region.lower(), mu, sd);
    let zu = z_of(region.upper(), mu, sd);
    match region.kind() {
        RegionKind::Inside => ln_interval_mass(zl, zu),
        RegionKind::Outside => {
            if region.is_unconstrained() {
                return 0.0;
            }
            let left = ln_interval_mass(f64::NEG_INFINITY, zl);
            let right = ln_interval_mass(zu, f64::INFINITY);
            log_add_exp(left, right)
        }
    }
}

/// Integration windows covering region ∩ [mu − span·sd, mu + span·sd].
fn region_windows(region: &TruncRegion, mu: f64, sd: f64, span: f64) -> Vec<(f64, f64)> {
    let lo = mu - span * sd;
    let hi = mu + span * sd;
    let clip = |a: f64, b: f64| -> Option<(f64, f64)> {
        let l = a.max(lo);
        let u = b.min(hi);
        (l < u).then_some((l, u))
    };
    match region.kind() {
        RegionKind::Inside => clip(region.lower(), region.upper()).into_iter().collect(),
        RegionKind::Outside => {
            if region.is_unconstrained() {
                return clip(f64::NEG_INFINITY, f64::INFINITY).into_iter().collect();
            }
            let mut w = Vec::new();
            if let Some(piece) = clip(f64::NEG_INFINITY, region.lower()) {
                w.push(piece);
            }
            if let Some(piece) = clip(region.upper(), f64::INFINITY) {
                w.push(piece);
            }
            w
        }
    }
}

/// log ∫ exp(ln_f) over [a, b] by composite Simpson with n panels.
fn ln_simpson<F: Fn(f64) -> f64>(ln_f: &F, a: f64, b: f64, n: usize) -> f64 {
    debug_assert!(n >= 2 && n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut lns = Vec::with_capacity(n + 1);
    let mut max_ln = f64::NEG_INFINITY;
    for i in 0..=n {
        let v = ln_f(a + h * i as f64);
        max_ln = max_ln.max(v);
        lns.push(v);
    }
    if max_ln == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    for (i, &lv) in lns.iter().enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (lv - max_ln).exp();
    }
    max_ln + (acc * h / 3.0).ln()
}

/// Number of Simpson panels per integration window.
const PANELS: usize = 2000;
/// Half-width, in outer standard deviations, of the integration range.
const SPAN: f64 = 38.0;

/// Log probability that y ~ N(mean, cov) lands in every region (p ≤ 2).
///
/// The two-coordinate case integrates over the first coordinate's region
/// pieces, with the second coordinate's conditional tail mass in closed form;
/// log-space summation keeps events with probability far below the smallest
/// positive double representable.
pub fn ln_event_probability(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    regions: &[TruncRegion],
) -> Result<f64> {
    let p = mean.len();
    check_dim(p)?;
    if cov.nrows() != p || cov.ncols() != p {
        return Err(Error::DimensionMismatch {
            what: "cov",
            expected: p,
            got: cov.nrows(),
        });
    }
    if regions.len() != p {
        return Err(Error::DimensionMismatch {
            what: "regions",
            expected: p,
            got: regions.len(),
        });
    }
    if p == 1 {
        if !(cov[(0, 0)] > 0.0) {
            return Err(Error::SingularCovariance { cond: f64::INFINITY });
        }
        return Ok(ln_region_mass(mean[0], cov[(0, 0)], &regions[0]));
    }
    let v0 = cov[(0, 0)];
    let v1 = cov[(1, 1)];
    let c01 = cov[(0, 1)];
    let det = v0 * v1 - c01 * c01;
    if !(v0 > 0.0 && det > 0.0) {
        return Err(Error::SingularCovariance { cond: f64::INFINITY });
    }
    let sd0 = v0.sqrt();
    let cond_var = det / v0; // var of y2 | y1
    let slope = c01 / v0;
    let ln_f = |t: f64| -> f64 {
        let cm = mean[1] + slope * (t - mean[0]);
        ln_phi((t - mean[0]) / sd0) - sd0.ln() + ln_region_mass(cm, cond_var, &regions[1])
    };
    let mut ln_total = f64::NEG_INFINITY;
    for (a, b) in region_windows(&regions[0], mean[0], sd0, SPAN) {
        ln_total = log_add_exp(ln_total, ln_simpson(&ln_f, a, b, PANELS));
    }
    Ok(ln_total)
}

/// Event probability in linear scale; underflows to 0 for very deep events.
pub fn event_probability(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    regions: &[TruncRegion],
) -> Result<f64> {
    Ok(ln_event_probability(mean, cov, regions)?.exp())
}

fn ln_mvn_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let p = y.len();
    if p == 1 {
        let sd = cov[(0, 0)].sqrt();
        return Ok(ln_phi((y[0] - mean[0]) / sd) - sd.ln());
    }
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) {
        return Err(Error::SingularCovariance { cond: f64::INFINITY });
    }
    let d0 = y[0] - mean[0];
    let d1 = y[1] - mean[1];
    let q = (cov[(1, 1)] * d0 * d0 - 2.0 * cov[(0, 1)] * d0 * d1 + cov[(0, 0)] * d1 * d1) / det;
    Ok(-2.0 * LN_SQRT_2PI - 0.5 * det.ln() - 0.5 * q)
}

/// Exact conditional log-likelihood of `mean` at observation `y` given the
/// selection event: log density minus log event probability (p ≤ 2).
pub fn conditional_loglik(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    regions: &[TruncRegion],
) -> Result<f64> {
    check_dim(y.len())?;
    Ok(ln_mvn_density(y, mean, cov)? - ln_event_probability(mean, cov, regions)?)
}

fn problem_regions(problem: &NormalMeansProblem, selected: &[usize]) -> Result<Vec<TruncRegion>> {
    let sel: std::collections::HashSet<usize> = selected.iter().copied().collect();
    (0..problem.dim())
        .map(|j| {
            if sel.contains(&j) {
                TruncRegion::outside(problem.lower[j], problem.upper[j])
            } else {
                TruncRegion::inside(problem.lower[j], problem.upper[j])
            }
        })
        .collect()
}

/// Golden-section refinement of a 1-D maximizer inside [a, b].
pub(crate) fn golden_max<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = 0.618_033_988_749_894_8;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() < 1e-10 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Grid search then golden-section polish of a 1-D objective.
pub(crate) fn grid_then_golden<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, step: f64) -> f64 {
    let n = ((hi - lo) / step).ceil() as usize;
    let mut best_x = lo;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..=n {
        let x = lo + step * i as f64;
        let v = f(x);
        if v > best_v {
            best_v = v;
            best_x = x;
        }
    }
    golden_max(f, best_x - step, best_x + step)
}

/// Nelder-Mead maximization in two dimensions from one start.
pub(crate) fn nelder_mead_2d<F: Fn(f64, f64) -> f64>(f: &F, start: (f64, f64)) -> (f64, f64, f64) {
    let mut simplex = [
        (start.0, start.1),
        (start.0 + 0.5, start.1),
        (start.0, start.1 + 0.5),
    ];
    let mut vals = [
        f(simplex[0].0, simplex[0].1),
        f(simplex[1].0, simplex[1].1),
        f(simplex[2].0, simplex[2].1),
    ];
    for _ in 0..500 {
        // order descending by value (maximization)
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
        let (best, mid, worst) = (idx[0], idx[1], idx[2]);
        let spread = (vals[best] - vals[worst]).abs();
        let size = ((simplex[best].0 - simplex[worst].0).abs())
            .max((simplex[best].1 - simplex[worst].1).abs());
        if spread < 1e-13 && size < 1e-9 {
            break;
        }
        let cx = 0.5 * (simplex[best].0 + simplex[mid].0);
        let cy = 0.5 * (simplex[best].1 + simplex[mid].1);
        let rx = 2.0 * cx - simplex[worst].0;
        let ry = 2.0 * cy - simplex[worst].1;
        let fr = f(rx, ry);
        if fr > vals[best] {
            let ex = cx + 2.0 * (rx - cx);
            let ey = cy + 2.0 * (ry - cy);
            let fe = f(ex, ey);
            if fe > fr {
                simplex[worst] = (ex, ey);
                vals[worst] = fe;
            } else {
                simplex[worst] = (rx, ry);
                vals[worst] = fr;
            }
        } else if fr > vals[mid] {
            simplex[worst] = (rx, ry);
            vals[worst] = fr;
        } else {
            // contract: outside toward the reflection when it beat the worst
            // vertex, inside toward the worst vertex otherwise
            let (kx, ky, floor) = if fr > vals[worst] {
                (cx + 0.5 * (rx - cx), cy + 0.5 * (ry - cy), fr)
            } else {
                (
                    cx + 0.5 * (simplex[worst].0 - cx),
                    cy + 0.5 * (simplex[worst].1 - cy),
                    vals[worst],
                )
            };
            let fk = f(kx, ky);
            if fk >= floor {
                simplex[worst] = (kx, ky);
                vals[worst] = fk;
            } else {
                // shrink toward the best vertex
                for i in 0..3 {
                    if i == best {
                        continue;
                    }
                    simplex[i] = (
                        simplex[best].0 + 0.5 * (simplex[i].0 - simplex[best].0),
                        simplex[best].1 + 0.5 * (simplex[i].1 - simplex[best].1),
                    );
                    vals[i] = f(simplex[i].0, simplex[i].1);
                }
            }
        }
    }
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    (simplex[idx[0]].0, simplex[idx[0]].1, vals[idx[0]])
}

/// Exact plug-in conditional MLE by quadrature (p ≤ 2): unselected
/// coordinates stay at y, selected ones maximize the conditional
/// log-likelihood by grid search plus golden-section refinement.
pub fn plugin_mle_quadrature(problem: &NormalMeansProblem) -> Result<DVector<f64>> {
    check_dim(problem.dim())?;
    let selection = select(problem);
    if selection.is_empty() {
        return Err(Error::NoSelection);
    }
    let regions = problem_regions(problem, &selection.selected)?;
    let mut estimate = problem.y.clone();
    if selection.len() == problem.dim() {
        return maximize_all(problem, &regions);
    }
    // exactly one selected coordinate in a bivariate problem, or p = 1
    let j = selection.selected[0];
    let f = |x: f64| -> f64 {
        let mut mu = problem.y.clone();
        mu[j] = x;
        conditional_loglik(&problem.y, &mu, &problem.sigma, &regions)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let center = problem.y[j];
    estimate[j] = grid_then_golden(&f, center - 25.0, center + 25.0, 0.05);
    Ok(estimate)
}

fn maximize_all(
    problem: &NormalMeansProblem,
    regions: &[TruncRegion],
) -> Result<DVector<f64>> {
    if problem.dim() == 1 {
        let f = |x: f64| -> f64 {
            let mu = DVector::from_vec(vec![x]);
            conditional_loglik(&problem.y, &mu, &problem.sigma, regions)
                .unwrap_or(f64::NEG_INFINITY)
        };
        let c = problem.y[0];
        return Ok(DVector::from_vec(vec![grid_then_golden(
            &f,
            c - 25.0,
            c + 25.0,
            0.05,
        )]));
    }
    let f = |x: f64, y: f64| -> f64 {
        let mu = DVector::from_vec(vec![x, y]);
        conditional_loglik(&problem.y, &mu, &problem.sigma, regions)
            .unwrap_or(f64::NEG_INFINITY)
    };
    // coarse grid seed plus fixed multi-starts
    let mut best_seed = (problem.y[0], problem.y[1]);
    let mut best_val = f64::NEG_INFINITY;
    for i in -20..=20 {
        for k in -20..=20 {
            let x = problem.y[0] + 0.5 * i as f64;
            let y = problem.y[1] + 0.5 * k as f64;
            let v = f(x, y);
            if v > best_val {
                best_val = v;
                best_seed = (x, y);
            }
        }
    }
    let starts = [best_seed, (problem.y[0], problem.y[1]), (0.0, 0.0)];
    let mut best = (best_seed.0, best_seed.1, best_val);
    for s in starts {
        let r = nelder_mead_2d(&f, s);
        if r.2 > best.2 {
            best = r;
        }
    }
    Ok(DVector::from_vec(vec![best.0, best.1]))
}

/// Exact full conditional MLE by quadrature (p ≤ 2): every coordinate is
/// free, including unselected ones.
pub fn full_mle_quadrature(problem: &NormalMeansProblem) -> Result<DVector<f64>> {
    check_dim(problem.dim())?;
    let selection = select(problem);
    if selection.is_empty() {
        return Err(Error::NoSelection);
    }
    let regions = problem_regions(problem, &selection.selected)?;
    maximize_all(problem, &regions)
}
