//! Grid containers and interpolation helpers shared by every module:
//! sampled functions on strictly increasing abscissae, quantile functions on
//! rank grids, and probability densities on consumption grids.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A sampled real function: strictly increasing `points` with aligned
/// `values`. Points are ranks in `[0,1]` or consumption in MWh depending on
/// context.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D<R = f64> {
    points: Vec<R>,
    values: Vec<R>,
}

impl<R: Real> Grid1D<R> {
    pub fn new(points: Vec<R>, values: Vec<R>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Invariant("grid needs at least 2 points".into()));
        }
        if points.len() != values.len() {
            return Err(Error::Invariant(format!(
                "points/values length mismatch: {} vs {}",
                points.len(),
                values.len()
            )));
        }
        if !strictly_increasing(&points) {
            return Err(Error::Invariant("grid points must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("grid values must be finite".into()));
        }
        Ok(Self { points, values })
    }

    pub fn points(&self) -> &[R] {
        &self.points
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }
}

/// Quantile function of a distribution sampled on a rank grid.
/// Values are non-decreasing in the rank.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid<R = f64> {
    ranks: Vec<R>,
    values: Vec<R>,
}

impl<R: Real> QuantileGrid<R> {
    pub fn new(ranks: Vec<R>, values: Vec<R>) -> Result<Self> {
        if ranks.len() < 2 || ranks.len() != values.len() {
            return Err(Error::Invariant("quantile grid needs matching ranks/values (>= 2)".into()));
        }
        if !strictly_increasing(&ranks) {
            return Err(Error::Invariant("rank grid must be strictly increasing".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invariant("quantile values must be non-decreasing".into()));
        }
        Ok(Self { ranks, values })
    }

    pub fn ranks(&self) -> &[R] {
        &self.ranks
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    /// Trapezoid integral of the quantile over the covered rank range
    /// (tails outside the grid are not included).
    pub fn mean_trapezoid(&self) -> R {
        trapezoid(&self.ranks, &self.values)
    }

    pub fn same_ranks(&self, other: &Self) -> bool {
        self.ranks.len() == other.ranks.len()
            && self
                .ranks
                .iter()
                .zip(other.ranks.iter())
                .all(|(a, b)| *a == *b)
    }
}

/// Probability density sampled on a consumption grid; non-negative values
/// whose trapezoid integral is 1 within `DENSITY_MASS_TOL`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid<R = f64> {
    xs: Vec<R>,
    values: Vec<R>,
}

pub const DENSITY_MASS_TOL: f64 = 1e-6;

impl<R: Real> DensityGrid<R> {
    pub fn new(xs: Vec<R>, values: Vec<R>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != values.len() {
            return Err(Error::Invariant("density grid needs matching xs/values (>= 2)".into()));
        }
        if !strictly_increasing(&xs) {
            return Err(Error::Invariant("density abscissae must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < R::zero()) {
            return Err(Error::Invariant("density values must be finite and >= 0".into()));
        }
        let mass = trapezoid(&xs, &values);
        if (mass - R::one()).abs() > R::of(DENSITY_MASS_TOL) {
            return Err(Error::Invariant(format!(
                "density mass {mass} deviates from 1 by more than {DENSITY_MASS_TOL}"
            )));
        }
        Ok(Self { xs, values })
    }

    /// Builds a density from non-negative weights by dividing out their
    /// trapezoid integral.
    pub fn normalized(xs: Vec<R>, mut weights: Vec<R>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != weights.len() {
            return Err(Error::Invariant("density grid needs matching xs/values (>= 2)".into()));
        }
        let mass = trapezoid(&xs, &weights);
        if !(mass > R::zero()) || !mass.is_finite() {
            return Err(Error::Invariant("density weights must have positive finite mass".into()));
        }
        for w in &mut weights {
            *w = *w / mass;
        }
        Self::new(xs, weights)
    }

    pub fn xs(&self) -> &[R] {
        &self.xs
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn integral(&self) -> R {
        trapezoid(&self.xs, &self.values)
    }

    pub fn mean(&self) -> R {
        let weighted: Vec<R> = self
            .xs
            .iter()
            .zip(self.values.iter())
            .map(|(x, f)| *x * *f)
            .collect();
        trapezoid(&self.xs, &weighted) / self.integral()
    }

    /// Linear interpolation of the density, clamped to the grid range.
    pub fn at(&self, x: R) -> R {
        interp_clamped(&self.xs, &self.values, x)
    }

    /// Cumulative distribution function by cumulative trapezoid, repaired to
    /// be non-decreasing and rescaled so the last value is exactly 1.
    pub fn cdf(&self) -> Vec<R> {
        let mut cdf = cumulative_trapezoid(&self.xs, &self.values);
        let mut running = R::neg_infinity();
        for v in &mut cdf {
            running = running.max(*v);
            *v = running;
        }
        let total = *cdf.last().expect("non-empty");
        if total > R::zero() {
            for v in &mut cdf {
                *v = *v / total;
            }
        }
        cdf
    }

    /// Inverts the CDF onto a rank grid. Ranks outside the covered CDF range
    /// clamp to the grid edges.
    pub fn to_quantiles(&self, ranks: &[R]) -> Result<QuantileGrid<R>> {
        let cdf = self.cdf();
        let mut values = Vec::with_capacity(ranks.len());
        for &r in ranks {
            values.push(invert_monotone(&self.xs, &cdf, r));
        }
        // Inversion of a repaired CDF can leave flat spots; enforce
        // monotonicity before constructing the quantile grid.
        let mut running = R::neg_infinity();
        for v in &mut values {
            running = running.max(*v);
            *v = running;
        }
        QuantileGrid::new(ranks.to_vec(), values)
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace<R: Real>(lo: R, hi: R, n: usize) -> Vec<R> {
    assert!(n >= 2, "linspace needs n >= 2");
    let step = (hi - lo) / R::of_usize(n - 1);
    let mut out: Vec<R> = (0..n).map(|i| lo + step * R::of_usize(i)).collect();
    out[n - 1] = hi;
    out
}

/// Default rank grid: `n` cell midpoints, uniform on `[1/(2n), 1 - 1/(2n)]`.
/// The endpoints 0 and 1 are excluded because the normal quantile is
/// singular there.
pub fn default_rank_grid<R: Real>(n: usize) -> Vec<R> {
    assert!(n >= 2, "rank grid needs n >= 2");
    let half = R::one() / (R::of(2.0) * R::of_usize(n));
    linspace(half, R::one() - half, n)
}

pub const DEFAULT_RANK_POINTS: usize = 2001;
pub const DEFAULT_CONSUMPTION_POINTS: usize = 4001;

/// Rank grid with geometrically refined tails: log-spaced nodes from
/// `eps` up to the first core rank and mirrored nodes near 1. Used for
/// full-range `[0,1]` rank integrals where the uniform core grid alone
/// would truncate the (integrable) tail contributions.
pub fn composite_rank_grid<R: Real>(core: &[R], eps: f64, per_tail: usize) -> Vec<R> {
    assert!(core.len() >= 2);
    let r_lo = core[0];
    let r_hi = core[core.len() - 1];
    assert!(eps > 0.0 && R::of(eps) < r_lo);
    let log_lo = eps.ln();
    let log_hi = r_lo.as_f64().ln();
    let mut grid: Vec<R> = Vec::with_capacity(core.len() + 2 * per_tail);
    for i in 0..per_tail {
        let t = log_lo + (log_hi - log_lo) * (i as f64) / (per_tail as f64);
        grid.push(R::of(t.exp()));
    }
    grid.extend_from_slice(core);
    let comp_hi = (R::one() - r_hi).as_f64().ln();
    for i in (0..per_tail).rev() {
        let t = log_lo + (comp_hi - log_lo) * (i as f64) / (per_tail as f64);
        grid.push(R::one() - R::of(t.exp()));
    }
    grid
}

/// Composite trapezoid rule on a (possibly non-uniform) grid.
pub fn trapezoid<R: Real>(xs: &[R], ys: &[R]) -> R {
    debug_assert_eq!(xs.len(), ys.len());
    let half = R::of(0.5);
    let mut acc = R::zero();
    for i in 1..xs.len() {
        acc += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) * half;
    }
    acc
}

/// Cumulative trapezoid values aligned with `xs` (first entry 0).
pub fn cumulative_trapezoid<R: Real>(xs: &[R], ys: &[R]) -> Vec<R> {
    debug_assert_eq!(xs.len(), ys.len());
    let half = R::of(0.5);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = R::zero();
    out.push(acc);
    for i in 1..xs.len() {
        acc += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) * half;
        out.push(acc);
    }
    out
}

/// Index `i` with `xs[i] <= x < xs[i+1]`, clamped to `[0, len-2]`.
pub fn bracket<R: Real>(xs: &[R], x: R) -> usize {
    let n = xs.len();
    if x <= xs[0] {
        return 0;
    }
    if x >= xs[n - 2] {
        return n - 2;
    }
    let mut lo = 0usize;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if xs[mid] <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Piecewise-linear interpolation, clamped to the end values outside the grid.
pub fn interp_clamped<R: Real>(xs: &[R], ys: &[R], x: R) -> R {
    if x <= xs[0] {
        return ys[0];
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = bracket(xs, x);
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + (ys[i + 1] - ys[i]) * t
}

/// Inverse interpolation of a non-decreasing sampled function: returns `x`
/// with `f(x) = y`, clamping outside the sampled range. Flat spots resolve
/// to their left edge.
pub fn invert_monotone<R: Real>(xs: &[R], fs: &[R], y: R) -> R {
    let n = xs.len();
    if y <= fs[0] {
        return xs[0];
    }
    if y >= fs[n - 1] {
        return xs[n - 1];
    }
    // binary search for the first index with fs[i+1] >= y
    let mut lo = 0usize;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fs[mid] < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let df = fs[hi] - fs[lo];
    if df <= R::zero() {
        return xs[lo];
    }
    xs[lo] + (xs[hi] - xs[lo]) * (y - fs[lo]) / df
}

pub(crate) fn strictly_increasing<R: Real>(xs: &[R]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0])
}
