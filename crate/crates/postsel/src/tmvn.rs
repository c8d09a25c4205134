//! Gibbs sampling for a multivariate normal restricted coordinatewise.
//!
//! The target is N(mean, cov) conditioned on every coordinate lying in its
//! own `TruncRegion`. Each Gibbs update draws coordinate j from its full
//! conditional, a univariate normal with
//!
//!   mean_j(state) = mu_j + cov_{j,-j} cov_{-j,-j}^{-1} (state_{-j} - mu_{-j})
//!   var_j         = cov_{jj} - cov_{j,-j} cov_{-j,-j}^{-1} cov_{-j,j}
//!
//! truncated to region j. The weight rows and conditional variances depend
//! only on the covariance, so they are computed once and reused across
//! cycles and across mean updates.

use crate::error::{Error, Result};
use crate::trunc::{sample_region, TruncRegion};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

/// Largest acceptable condition number for a covariance matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// A coordinatewise-truncated multivariate normal.
#[derive(Debug, Clone)]
pub struct TmvnSpec {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub regions: Vec<TruncRegion>,
}

impl TmvnSpec {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, regions: Vec<TruncRegion>) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::DimensionMismatch {
                what: "covariance",
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
        Ok(TmvnSpec { mean, cov, regions })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn satisfies(&self, state: &DVector<f64>) -> Option<usize> {
        (0..self.dim()).find(|&j| !self.regions[j].contains(state[j]))
    }
}

/// Per-coordinate full-conditional weights and variances.
#[derive(Debug, Clone)]
pub struct ConditionalCoeffs {
    // row j holds cov_{j,-j} cov_{-j,-j}^{-1}, indexed by the remaining
    // coordinates in their original order
    weights: Vec<DVector<f64>>,
    cond_var: Vec<f64>,
}

impl ConditionalCoeffs {
    pub fn dim(&self) -> usize {
        self.cond_var.len()
    }

    pub fn cond_var(&self, j: usize) -> f64 {
        self.cond_var[j]
    }

    pub fn weights(&self, j: usize) -> &DVector<f64> {
        &self.weights[j]
    }

    /// Full-conditional mean of coordinate j given the others.
    pub fn cond_mean(&self, j: usize, mean: &DVector<f64>, state: &DVector<f64>) -> f64 {
        let w = &self.weights[j];
        let mut acc = 0.0;
        for k in 0..state.len() {
            if k < j {
                acc += w[k] * (state[k] - mean[k]);
            } else if k > j {
                acc += w[k - 1] * (state[k] - mean[k]);
            }
        }
        mean[j] + acc
    }
}

fn check_symmetric(cov: &DMatrix<f64>) -> Result<()> {
    let p = cov.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let scale = 1.0f64.max(cov[(i, j)].abs());
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::InvalidParameter {
                    name: "cov",
                    value: cov[(i, j)] - cov[(j, i)],
                    reason: "covariance must be symmetric",
                });
            }
        }
    }
    Ok(())
}

/// Condition-number estimate from the symmetric eigendecomposition.
fn condition_number(cov: &DMatrix<f64>) -> f64 {
    let eig = cov.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Precompute full-conditional weights and variances for every coordinate.
///
/// Each row solves cov_{-j,-j} w = cov_{-j,j} directly; no global inverse is
/// formed. Fails with `SingularCovariance` when the covariance is asymmetric
/// beyond tolerance, has condition number above `MAX_CONDITION`, or a leading
/// minor loses positive definiteness.
pub fn precompute_conditionals(cov: &DMatrix<f64>) -> Result<ConditionalCoeffs> {
    let p = cov.nrows();
    if p == 0 {
        return Ok(ConditionalCoeffs {
            weights: vec![],
            cond_var: vec![],
        });
    }
    check_symmetric(cov)?;
    let cond = condition_number(cov);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::SingularCovariance { cond });
    }
    if p == 1 {
        return Ok(ConditionalCoeffs {
            weights: vec![DVector::zeros(0)],
            cond_var: vec![cov[(0, 0)]],
        });
    }
    let mut weights = Vec::with_capacity(p);
    let mut cond_var = Vec::with_capacity(p);
    for j in 0..p {
        let rest: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        let minor = cov.select_rows(&rest).select_columns(&rest);
        let col = DVector::from_iterator(p - 1, rest.iter().map(|&k| cov[(k, j)]));
        let chol = Cholesky::new(minor).ok_or(Error::SingularCovariance { cond })?;
        let w = chol.solve(&col);
        let v = cov[(j, j)] - col.dot(&w);
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::SingularCovariance { cond });
        }
        weights.push(w);
        cond_var.push(v);
    }
    Ok(ConditionalCoeffs {
        weights,
        cond_var,
    })
}

/// Counters accumulated while cycling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GibbsStats {
    /// Coordinate updates skipped because the conditional region mass
    /// underflowed; the coordinate keeps its current value.
    pub degenerate_skips: usize,
}

/// One systematic-scan Gibbs cycle over all coordinates, in place.
///
/// The input state must satisfy every region; the output then does too, since
/// every accepted draw lies in its region and a degenerate coordinate is left
/// unchanged (and counted in `stats`).
pub fn gibbs_cycle<R: Rng + ?Sized>(
    state: &mut DVector<f64>,
    spec: &TmvnSpec,
    coeffs: &ConditionalCoeffs,
    rng: &mut R,
    stats: &mut GibbsStats,
) -> Result<()> {
    for j in 0..spec.dim() {
        let cm = coeffs.cond_mean(j, &spec.mean, state);
        match sample_region(rng, cm, coeffs.cond_var(j), &spec.regions[j]) {
            Ok(x) => state[j] = x,
            Err(Error::DegenerateMass { .. }) => stats.degenerate_skips += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Draw `n_samples` states (rows) after `burn_in` cycles, keeping every
/// `thin`-th cycle thereafter.
pub fn sample_tmvn<R: Rng + ?Sized>(
    spec: &TmvnSpec,
    init: &DVector<f64>,
    n_samples: usize,
    burn_in: usize,
    thin: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, GibbsStats)> {
    if thin == 0 {
        return Err(Error::InvalidParameter {
            name: "thin",
            value: 0.0,
            reason: "thinning interval must be at least 1",
        });
    }
    if init.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            what: "init",
            expected: spec.dim(),
            got: init.len(),
        });
    }
    if let Some(j) = spec.satisfies(init) {
        return Err(Error::InvalidInit { coordinate: j });
    }
    let coeffs = precompute_conditionals(&spec.cov)?;
    let mut state = init.clone();
    let mut stats = GibbsStats::default();
    for _ in 0..burn_in {
        gibbs_cycle(&mut state, spec, &coeffs, rng, &mut stats)?;
    }
    let mut out = DMatrix::zeros(n_samples, spec.dim());
    for s in 0..n_samples {
        for _ in 0..thin {
            gibbs_cycle(&mut state, spec, &coeffs, rng, &mut stats)?;
        }
        out.row_mut(s).copy_from(&state.transpose());
    }
    Ok((out, stats))
}
