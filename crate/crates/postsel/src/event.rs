//! Affine characterization of the lasso selection event and the pair of
//! independent statistics (η, ξ) it constrains.
//!
//! For active set M with sign vector s, the event {selected model = (M, s)}
//! is exactly {A1 y ≤ u1(s)} ∩ {l0(s) ≤ A0 y ≤ u0(s)} with
//! A1 = −diag(s)(X_M^T X_M)⁻¹X_M^T and A0 = (1/λ)X_{−M}^T(I − P_M).
//! Writing η = (X_M^T X_M)⁻¹X_M^T y and ξ = A0 y, the two statistics are
//! uncorrelated (A0 X_M = 0), so under Gaussian noise they are independent
//! and the event factorizes.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// The affine inequalities defining a lasso selection event, with the
/// reusable pieces of the algebra cached.
#[derive(Debug, Clone)]
pub struct SelectionEvent {
    /// Selected column indices, strictly ascending.
    pub active: Vec<usize>,
    /// The complement, strictly ascending; rows of `a0`, `cross`, `l0`,
    /// `u0` align with this order.
    pub inactive: Vec<usize>,
    /// Signs (±1) of the selected coefficients, aligned with `active`.
    pub signs: DVector<f64>,
    pub lambda: f64,
    /// K = X_M^T X_M.
    pub xtx_m: DMatrix<f64>,
    /// K⁻¹.
    pub xtx_m_inv: DMatrix<f64>,
    /// G = X_{−M}^T X_M K⁻¹; the inactive bounds are ∓1 − G s.
    pub cross: DMatrix<f64>,
    /// A1 = −diag(s) K⁻¹ X_M^T for the fitted signs.
    pub a1: DMatrix<f64>,
    /// u1 = −λ diag(s) K⁻¹ s for the fitted signs.
    pub u1: DVector<f64>,
    /// A0 = (1/λ) X_{−M}^T (I − P_M).
    pub a0: DMatrix<f64>,
    /// l0 = −1 − G s for the fitted signs.
    pub l0: DVector<f64>,
    /// u0 = 1 − G s for the fitted signs.
    pub u0: DVector<f64>,
}

impl SelectionEvent {
    /// Active-side threshold vector for an arbitrary sign assignment:
    /// u1(s) = −λ diag(s) K⁻¹ s.
    pub fn u1_for(&self, signs: &DVector<f64>) -> DVector<f64> {
        let ks = &self.xtx_m_inv * signs;
        -self.lambda * signs.component_mul(&ks)
    }

    /// Inactive box (l0, u0) for an arbitrary sign assignment.
    pub fn inactive_bounds_for(&self, signs: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let gs = &self.cross * signs;
        let ones = DVector::from_element(self.inactive.len(), 1.0);
        (-&ones - &gs, ones - gs)
    }

    /// Strict event membership of (η, ξ) under sign assignment `signs`.
    pub fn in_event(
        &self,
        eta: &DVector<f64>,
        xi: &DVector<f64>,
        signs: &DVector<f64>,
    ) -> (bool, bool) {
        self.in_event_tol(eta, xi, signs, 0.0)
    }

    /// Event membership with slack `tol` on every inequality, for checking
    /// points produced by an iterative solver.
    pub fn in_event_tol(
        &self,
        eta: &DVector<f64>,
        xi: &DVector<f64>,
        signs: &DVector<f64>,
        tol: f64,
    ) -> (bool, bool) {
        let u1 = self.u1_for(signs);
        let active_ok = (0..eta.len()).all(|j| -signs[j] * eta[j] < u1[j] + tol);
        let (l0, u0) = self.inactive_bounds_for(signs);
        let inactive_ok = (0..xi.len()).all(|k| l0[k] - tol < xi[k] && xi[k] < u0[k] + tol);
        (active_ok, inactive_ok)
    }

    /// Membership of raw data under the fitted signs.
    pub fn in_event_y(&self, x: &DMatrix<f64>, y: &DVector<f64>, tol: f64) -> (bool, bool) {
        let xm = x.select_columns(&self.active);
        let eta = &self.xtx_m_inv * (xm.transpose() * y);
        let xi = &self.a0 * y;
        self.in_event_tol(&eta, &xi, &self.signs, tol)
    }
}

/// Builds the event algebra for a given (M, s, λ).
pub fn selection_event(
    x: &DMatrix<f64>,
    active: &[usize],
    signs: &[f64],
    lambda: f64,
) -> Result<SelectionEvent> {
    let p = x.ncols();
    if signs.len() != active.len() {
        return Err(Error::DimensionMismatch {
            what: "signs",
            expected: active.len(),
            got: signs.len(),
        });
    }
    for w in active.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidParameter {
                name: "active",
                value: w[1] as f64,
                reason: "active indices must be strictly ascending",
            });
        }
    }
    if let Some(&j) = active.last() {
        if j >= p {
            return Err(Error::InvalidParameter {
                name: "active",
                value: j as f64,
                reason: "active index out of range",
            });
        }
    }
    for &s in signs {
        if s != 1.0 && s != -1.0 {
            return Err(Error::InvalidParameter {
                name: "signs",
                value: s,
                reason: "signs must be ±1",
            });
        }
    }
    let inactive: Vec<usize> = (0..p).filter(|j| !active.contains(j)).collect();
    if !inactive.is_empty() && !(lambda > 0.0) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            value: lambda,
            reason: "positive penalty required when inactive coordinates exist",
        });
    }
    let m = active.len();
    let xm = x.select_columns(active);
    let xtx_m = xm.transpose() * &xm;
    let chol = xtx_m.clone().cholesky().ok_or(Error::RankDeficient {
        detail: "selected columns are not full rank".to_string(),
    })?;
    let xtx_m_inv = chol.inverse();
    let s = DVector::from_column_slice(signs);

    let a1 = if m > 0 {
        let mut a = &xtx_m_inv * xm.transpose();
        for j in 0..m {
            let row = -signs[j] * a.row(j);
            a.set_row(j, &row);
        }
        a
    } else {
        DMatrix::zeros(0, x.nrows())
    };
    let u1 = if m > 0 {
        let ks = &xtx_m_inv * &s;
        -lambda * s.component_mul(&ks)
    } else {
        DVector::zeros(0)
    };

    let x_rest = x.select_columns(&inactive);
    // A0 = (1/λ)(X_{−M}^T − (X_{−M}^T X_M) K⁻¹ X_M^T), avoiding the n×n projector
    let cross_raw = x_rest.transpose() * &xm; // (p−m)×m
    let cross = &cross_raw * &xtx_m_inv;
    let a0 = if inactive.is_empty() {
        DMatrix::zeros(0, x.nrows())
    } else {
        (x_rest.transpose() - &cross * xm.transpose()) / lambda
    };
    let gs = &cross * &s;
    let ones = DVector::from_element(inactive.len(), 1.0);
    let l0 = -&ones - &gs;
    let u0 = ones - gs;

    Ok(SelectionEvent {
        active: active.to_vec(),
        inactive,
        signs: s,
        lambda,
        xtx_m,
        xtx_m_inv,
        cross,
        a1,
        u1,
        a0,
        l0,
        u0,
    })
}

/// The independent statistic pair and their covariances at noise level σ².
#[derive(Debug, Clone)]
pub struct EtaXi {
    /// η = K⁻¹ X_M^T y, the refitted least-squares coefficients.
    pub eta: DVector<f64>,
    /// ξ = A0 y, the scaled inactive correlations.
    pub xi: DVector<f64>,
    /// σ² K⁻¹.
    pub cov_eta: DMatrix<f64>,
    /// σ² A0 A0^T.
    pub cov_xi: DMatrix<f64>,
}

/// Computes (η, ξ) for observed data along with their covariances.
pub fn eta_xi(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    event: &SelectionEvent,
    sigma2: f64,
) -> Result<EtaXi> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            what: "y",
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "sigma2",
            value: sigma2,
            reason: "noise variance must be positive and finite",
        });
    }
    let xm = x.select_columns(&event.active);
    let eta = &event.xtx_m_inv * (xm.transpose() * y);
    let xi = &event.a0 * y;
    let cov_eta = sigma2 * &event.xtx_m_inv;
    let cov_xi = sigma2 * (&event.a0 * event.a0.transpose());
    Ok(EtaXi {
        eta,
        xi,
        cov_eta,
        cov_xi,
    })
}
