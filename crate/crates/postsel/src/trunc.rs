//! Univariate truncated-normal regions: masses, CDFs, moments, and draws.
//!
//! A `TruncRegion` is either the interval `Inside(lower, upper)` or its
//! complement `Outside(lower, upper)`, i.e. the union of two tails. Outside
//! regions are what a selected coordinate lives on (it crossed a threshold),
//! Inside regions are what an unselected coordinate lives on.
//!
//! All probability arithmetic anchors on whichever tail of the normal keeps
//! relative precision, so region masses down to ~1e-300 are usable directly
//! and moments remain finite far beyond that via log-space ratios.

use crate::error::{Error, Result};
use crate::normal::{
    ln_phi, ln_std_cdf, ln_std_sf, log_add_exp, log_sub_exp, std_cdf, std_quantile,
    std_quantile_from_sf, std_sf,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Region mass below which inverse-CDF sampling is declared degenerate.
pub const MIN_REGION_MASS: f64 = 1e-290;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Inside,
    Outside,
}

/// An interval or two-tail support for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionRepr", into = "RegionRepr")]
pub struct TruncRegion {
    kind: RegionKind,
    lower: f64,
    upper: f64,
}

#[derive(Serialize, Deserialize)]
struct RegionRepr {
    kind: RegionKind,
    lower: f64,
    upper: f64,
}

impl TryFrom<RegionRepr> for TruncRegion {
    type Error = Error;
    fn try_from(r: RegionRepr) -> Result<Self> {
        TruncRegion::new(r.kind, r.lower, r.upper)
    }
}

impl From<TruncRegion> for RegionRepr {
    fn from(r: TruncRegion) -> Self {
        RegionRepr {
            kind: r.kind,
            lower: r.lower,
            upper: r.upper,
        }
    }
}

impl TruncRegion {
    /// The interval [lower, upper]; bounds may be infinite but not NaN.
    pub fn inside(lower: f64, upper: f64) -> Result<Self> {
        Self::new(RegionKind::Inside, lower, upper)
    }

    /// The two tails (-inf, lower] and [upper, +inf).
    ///
    /// `lower == upper` is allowed and means the whole real line (the
    /// excluded open interval is empty); an infinite bound drops that tail.
    pub fn outside(lower: f64, upper: f64) -> Result<Self> {
        Self::new(RegionKind::Outside, lower, upper)
    }

    pub fn new(kind: RegionKind, lower: f64, upper: f64) -> Result<Self> {
        let ordered = match kind {
            RegionKind::Inside => lower < upper,
            // Outside(-inf, +inf) excludes everything; Outside(-inf, u) is
            // the single tail [u, inf), Outside(l, +inf) the tail (-inf, l].
            RegionKind::Outside => {
                lower <= upper && !(lower == f64::NEG_INFINITY && upper == f64::INFINITY)
            }
        };
        if lower.is_nan() || upper.is_nan() || !ordered {
            return Err(Error::InvalidRegion { lower, upper });
        }
        Ok(TruncRegion { kind, lower, upper })
    }

    pub fn kind(&self) -> RegionKind {
        self.kind
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, x: f64) -> bool {
        match self.kind {
            RegionKind::Inside => self.lower <= x && x <= self.upper,
            RegionKind::Outside => x <= self.lower || x >= self.upper,
        }
    }

    /// True when the region is the whole real line (no truncation).
    pub fn is_unconstrained(&self) -> bool {
        match self.kind {
            RegionKind::Inside => self.lower == f64::NEG_INFINITY && self.upper == f64::INFINITY,
            RegionKind::Outside => self.lower >= self.upper,
        }
    }
}

/// P(zl <= Z <= zu) for a standard normal, anchored to preserve relative
/// precision: survival differences in the right tail, CDF differences in the
/// left tail, and an erf sum (no cancellation) when the interval straddles 0.
pub fn interval_mass(zl: f64, zu: f64) -> f64 {
    debug_assert!(zl <= zu);
    use std::f64::consts::SQRT_2;
    if zl >= 0.0 {
        (std_sf(zl) - std_sf(zu)).max(0.0)
    } else if zu <= 0.0 {
        (std_cdf(zu) - std_cdf(zl)).max(0.0)
    } else {
        0.5 * (libm::erf(zu / SQRT_2) + libm::erf(-zl / SQRT_2))
    }
}

/// log P(zl <= Z <= zu); finite whenever the true mass is nonzero, even past
/// the underflow range of `interval_mass`.
pub fn ln_interval_mass(zl: f64, zu: f64) -> f64 {
    let direct = interval_mass(zl, zu);
    if direct > 0.0 {
        return direct.ln();
    }
    if zl >= 0.0 {
        log_sub_exp(ln_std_sf(zl), ln_std_sf(zu))
    } else if zu <= 0.0 {
        log_sub_exp(ln_std_cdf(zu), ln_std_cdf(zl))
    } else {
        f64::NEG_INFINITY // straddling mass cannot underflow
    }
}

fn check_sigma2(sigma2: f64) -> Result<f64> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma2",
            value: sigma2,
            reason: "variance must be finite and positive",
        });
    }
    Ok(sigma2.sqrt())
}

fn standardize(x: f64, mu: f64, sd: f64) -> f64 {
    // keeps infinite bounds infinite
    if x.is_infinite() {
        x
    } else {
        (x - mu) / sd
    }
}

/// CDF of N(mu, sigma2) truncated to `region`, evaluated at x.
pub fn trunc_cdf(x: f64, mu: f64, sigma2: f64, region: &TruncRegion) -> Result<f64> {
    let sd = check_sigma2(sigma2)?;
    let zx = standardize(x, mu, sd);
    let zl = standardize(region.lower(), mu, sd);
    let zu = standardize(region.upper(), mu, sd);
    match region.kind() {
        RegionKind::Inside => {
            let den = interval_mass(zl, zu);
            if den < MIN_REGION_MASS {
                return Err(Error::DegenerateMass { coordinate: None });
            }
            if zx <= zl {
                return Ok(0.0);
            }
            if zx >= zu {
                return Ok(1.0);
            }
            Ok((interval_mass(zl, zx) / den).clamp(0.0, 1.0))
        }
        RegionKind::Outside => {
            let wl = if zl == f64::NEG_INFINITY {
                0.0
            } else {
                std_cdf(zl)
            };
            let wr = if zu == f64::INFINITY { 0.0 } else { std_sf(zu) };
            let den = if region.is_unconstrained() {
                1.0
            } else {
                wl + wr
            };
            if den < MIN_REGION_MASS {
                return Err(Error::DegenerateMass { coordinate: None });
            }
            if region.is_unconstrained() {
                return Ok(std_cdf(zx));
            }
            let num = if zx <= zl {
                std_cdf(zx)
            } else if zx < zu {
                wl
            } else {
                wl + interval_mass(zu, zx)
            };
            Ok((num / den).clamp(0.0, 1.0))
        }
    }
}

/// Inverse-CDF draw from N(mu, sigma2) restricted to [lower, upper].
///
/// `u01` in [0, 1) maps monotonically onto the support. The target quantile
/// is anchored on whichever side of the interval carries the smaller normal
/// mass, so draws stay accurate when the interval sits 30+ standard
/// deviations out. Errors with `DegenerateMass` when the interval mass
/// underflows below `MIN_REGION_MASS`; multi-coordinate callers decide how to
/// recover (the Gibbs cycle keeps the coordinate and counts the event).
pub fn sample_inside(u01: f64, mu: f64, sigma2: f64, lower: f64, upper: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u01) {
        return Err(Error::InvalidParameter {
            name: "u01",
            value: u01,
            reason: "uniform draw must lie in [0,1]",
        });
    }
    if !(lower < upper) {
        return Err(Error::InvalidRegion { lower, upper });
    }
    let sd = check_sigma2(sigma2)?;
    let zl = standardize(lower, mu, sd);
    let zu = standardize(upper, mu, sd);
    let mass = interval_mass(zl, zu);
    if mass < MIN_REGION_MASS {
        return Err(Error::DegenerateMass { coordinate: None });
    }
    let cdf_l = if zl == f64::NEG_INFINITY {
        0.0
    } else {
        std_cdf(zl)
    };
    let z = if cdf_l <= 0.5 {
        let q = cdf_l + u01 * mass;
        if q <= 0.5 {
            std_quantile(q)
        } else {
            // upper half: anchor on the survival side
            let sf_l = if zl == f64::NEG_INFINITY {
                1.0
            } else {
                std_sf(zl)
            };
            std_quantile_from_sf((sf_l - u01 * mass).max(f64::MIN_POSITIVE))
        }
    } else {
        // interval entirely in the right half: survival-side arithmetic only
        let sf_l = std_sf(zl);
        std_quantile_from_sf((sf_l - u01 * mass).max(f64::MIN_POSITIVE))
    };
    Ok(mu + sd * z.clamp(zl, zu))
}

/// Draw from N(mu, sigma2) restricted to the two tails (-inf, lower] and
/// [upper, +inf): pick the tail by its conditional probability
/// P(left) = cdf(lower) / (cdf(lower) + sf(upper)), then draw inside it.
pub fn sample_outside<R: Rng + ?Sized>(
    rng: &mut R,
    mu: f64,
    sigma2: f64,
    lower: f64,
    upper: f64,
) -> Result<f64> {
    let sd = check_sigma2(sigma2)?;
    if lower >= upper {
        // excluded interval is empty: unconstrained normal
        if lower > upper {
            return Err(Error::InvalidRegion { lower, upper });
        }
        let u: f64 = rng.gen();
        return sample_inside(u, mu, sigma2, f64::NEG_INFINITY, f64::INFINITY);
    }
    let zl = standardize(lower, mu, sd);
    let zu = standardize(upper, mu, sd);
    let wl = if zl == f64::NEG_INFINITY {
        0.0
    } else {
        std_cdf(zl)
    };
    let wr = if zu == f64::INFINITY { 0.0 } else { std_sf(zu) };
    if wl + wr < MIN_REGION_MASS {
        return Err(Error::DegenerateMass { coordinate: None });
    }
    let p_left = wl / (wl + wr);
    let pick: f64 = rng.gen();
    let u: f64 = rng.gen();
    if pick < p_left {
        sample_inside(u, mu, sigma2, f64::NEG_INFINITY, lower)
    } else {
        sample_inside(u, mu, sigma2, upper, f64::INFINITY)
    }
}

/// Draw from N(mu, sigma2) restricted to an arbitrary region.
pub fn sample_region<R: Rng + ?Sized>(
    rng: &mut R,
    mu: f64,
    sigma2: f64,
    region: &TruncRegion,
) -> Result<f64> {
    match region.kind() {
        RegionKind::Inside => {
            let u: f64 = rng.gen();
            sample_inside(u, mu, sigma2, region.lower(), region.upper())
        }
        RegionKind::Outside => sample_outside(rng, mu, sigma2, region.lower(), region.upper()),
    }
}

// Mean and variance of a standard normal restricted to [zl, zu], computed
// through log-space density/mass ratios so deep-tail intervals (where both
// the densities and the mass underflow) still yield finite moments.
fn std_inside_moments(zl: f64, zu: f64) -> Result<(f64, f64)> {
    let ln_mass = ln_interval_mass(zl, zu);
    if ln_mass == f64::NEG_INFINITY {
        return Err(Error::DegenerateMass { coordinate: None });
    }
    let (ra, a_ra) = if zl == f64::NEG_INFINITY {
        (0.0, 0.0)
    } else {
        let r = (ln_phi(zl) - ln_mass).exp();
        (r, zl * r)
    };
    let (rb, b_rb) = if zu == f64::INFINITY {
        (0.0, 0.0)
    } else {
        let r = (ln_phi(zu) - ln_mass).exp();
        (r, zu * r)
    };
    let mean = ra - rb;
    let var = (1.0 + (a_ra - b_rb) - mean * mean).max(0.0);
    Ok((mean, var))
}

/// Mean and variance of N(mu, sigma2) restricted to `region`.
///
/// Inside regions use the usual density-ratio formulas; Outside regions are
/// the two-tail mixture with log-space weights. Unlike the samplers this
/// never needs an invertible CDF, so it only fails when the region mass is
/// zero beyond log-space resolution.
pub fn trunc_moments(mu: f64, sigma2: f64, region: &TruncRegion) -> Result<(f64, f64)> {
    let sd = check_sigma2(sigma2)?;
    if region.is_unconstrained() {
        return Ok((mu, sigma2));
    }
    let zl = standardize(region.lower(), mu, sd);
    let zu = standardize(region.upper(), mu, sd);
    match region.kind() {
        RegionKind::Inside => {
            let (m, v) = std_inside_moments(zl, zu)?;
            Ok((mu + sd * m, sigma2 * v))
        }
        RegionKind::Outside => {
            let ln_wl = if zl == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                ln_std_cdf(zl)
            };
            let ln_wr = if zu == f64::INFINITY {
                f64::NEG_INFINITY
            } else {
                ln_std_sf(zu)
            };
            let ln_z = log_add_exp(ln_wl, ln_wr);
            if ln_z == f64::NEG_INFINITY {
                return Err(Error::DegenerateMass { coordinate: None });
            }
            let wl = (ln_wl - ln_z).exp();
            let wr = (ln_wr - ln_z).exp();
            let (ml, vl) = if wl > 0.0 {
                std_inside_moments(f64::NEG_INFINITY, zl)?
            } else {
                (0.0, 0.0)
            };
            let (mr, vr) = if wr > 0.0 {
                std_inside_moments(zu, f64::INFINITY)?
            } else {
                (0.0, 0.0)
            };
            let mean = wl * ml + wr * mr;
            let ex2 = wl * (vl + ml * ml) + wr * (vr + mr * mr);
            let var = (ex2 - mean * mean).max(0.0);
            Ok((mu + sd * mean, sigma2 * var))
        }
    }
}
