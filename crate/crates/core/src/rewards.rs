//! The bounded piecewise-linear additional-reward class, the invertible
//! transform between it and the search box `(-1,1]^N`, and the closed-form
//! segment integrals it admits.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grids::{bracket, interp_clamped, strictly_increasing};
use crate::scalar::Real;

/// Relative tolerance used when validating reward vectors assembled from
/// floating-point arithmetic (transform outputs, sampled profiles).
const KNOT_TOL: f64 = 1e-9;

/// A bounded, non-increasing, piecewise-linear rank reward: knots
/// `eta_1 = 0 < ... < eta_N = 1`, values `b_1 >= ... >= b_N` with
/// `|b_i| <= bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseReward<R = f64> {
    eta: Vec<R>,
    values: Vec<R>,
    bound: R,
}

impl<R: Real> PiecewiseReward<R> {
    pub fn new(eta: Vec<R>, values: Vec<R>, bound: R) -> Result<Self> {
        if eta.len() < 2 || eta.len() != values.len() {
            return Err(Error::Invariant("reward needs matching knots/values (>= 2)".into()));
        }
        if !(bound >= R::zero()) {
            return Err(Error::Invariant("reward bound must be >= 0".into()));
        }
        if eta[0] != R::zero() || *eta.last().unwrap() != R::one() {
            return Err(Error::Invariant("knots must start at 0 and end at 1".into()));
        }
        if !strictly_increasing(&eta) {
            return Err(Error::Invariant("knots must be strictly increasing".into()));
        }
        let slack = R::of(KNOT_TOL) * (R::one() + bound);
        let mut clamped = values;
        for v in &mut clamped {
            if !v.is_finite() {
                return Err(Error::Invariant("reward values must be finite".into()));
            }
            if v.abs() > bound + slack {
                return Err(Error::Invariant(format!(
                    "reward value {v} exceeds bound {bound}"
                )));
            }
            *v = (*v).min(bound).max(-bound);
        }
        for i in 1..clamped.len() {
            if clamped[i] > clamped[i - 1] + slack {
                return Err(Error::Invariant(format!(
                    "reward values must be non-increasing (violated at knot {i})"
                )));
            }
            if clamped[i] > clamped[i - 1] {
                clamped[i] = clamped[i - 1];
            }
        }
        Ok(Self { eta, values: clamped, bound })
    }

    /// Builds a reward from a sampled profile, clamping increases up to
    /// `tol` (interpolation noise) and rejecting anything larger.
    pub fn new_monotonized(eta: Vec<R>, values: Vec<R>, tol: R) -> Result<Self> {
        for (i, w) in values.windows(2).enumerate() {
            if w[1] > w[0] + tol {
                return Err(Error::Unattainable(format!(
                    "profile increases by {} at knot {} (rank {})",
                    w[1] - w[0],
                    i + 1,
                    eta[i + 1]
                )));
            }
        }
        let bound = values
            .iter()
            .fold(R::zero(), |acc, v| acc.max(v.abs()));
        Self::new(eta, values, bound)
    }

    /// The constant reward `B = k`.
    pub fn constant(k: R) -> Self {
        Self {
            eta: vec![R::zero(), R::one()],
            values: vec![k, k],
            bound: k.abs(),
        }
    }

    /// `n` uniform knots spanning `[0, 1]`.
    pub fn uniform_knots(n: usize) -> Vec<R> {
        crate::grids::linspace(R::zero(), R::one(), n)
    }

    pub fn knots(&self) -> &[R] {
        &self.eta
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn bound(&self) -> R {
        self.bound
    }

    /// Reward at rank `r` by linear interpolation on the containing segment.
    pub fn eval(&self, r: R) -> Result<R> {
        if !(r >= R::zero() && r <= R::one()) {
            return Err(Error::Domain(format!("rank {r} outside [0,1]")));
        }
        Ok(self.eval_clamped(r))
    }

    /// Interpolation with ranks clamped into `[0,1]`; hot-path variant for
    /// callers whose ranks are grid-generated.
    pub fn eval_clamped(&self, r: R) -> R {
        interp_clamped(&self.eta, &self.values, r)
    }

    /// `∫_0^1 B(z) dz`, exact for the piecewise-linear class.
    pub fn total_integral(&self) -> R {
        let half = R::of(0.5);
        let mut acc = R::zero();
        for i in 1..self.eta.len() {
            acc += (self.eta[i] - self.eta[i - 1]) * (self.values[i] + self.values[i - 1]) * half;
        }
        acc
    }

    /// `∫_0^r exp(-B(z)/kappa) dz` in closed form.
    pub fn exp_weight_integral(&self, kappa: R, r: R) -> Result<R> {
        let w = self.exp_weights(kappa)?;
        if !(r >= R::zero() && r <= R::one()) {
            return Err(Error::Domain(format!("rank {r} outside [0,1]")));
        }
        Ok(w.prefix_at(r))
    }

    /// Precomputes per-segment prefix/suffix integrals of
    /// `exp(-B(z)/kappa)`; all subsequent queries are O(log N).
    pub fn exp_weights(&self, kappa: R) -> Result<ExpWeights<R>> {
        if !(kappa > R::zero()) {
            return Err(Error::Domain(format!("kappa must be > 0, got {kappa}")));
        }
        ExpWeights::build(self, kappa)
    }

    /// Returns the reward shifted by a constant, keeping the same bound.
    /// Fails when the shift would push a value outside `[-bound, bound]`.
    pub fn shifted(&self, delta: R) -> Result<Self> {
        let values: Vec<R> = self.values.iter().map(|v| *v + delta).collect();
        Self::new(self.eta.clone(), values, self.bound)
    }

    /// Largest upward shift that keeps the reward within its bound.
    pub fn shift_headroom(&self) -> R {
        self.bound - self.values[0]
    }

    /// Applies the transform `phi^N_M` mapping the box `(-1,1]^N` onto the
    /// reward class: `b_1 = M z_1`, `b_i = (b_{i-1} - M)/2 + (b_{i-1} + M) z_i / 2`.
    pub fn from_search_vector(z: &SearchVector<R>, bound: R, eta: &[R]) -> Result<Self> {
        if !(bound > R::zero()) {
            return Err(Error::Domain("transform bound must be > 0".into()));
        }
        let zs = z.components();
        if zs.len() != eta.len() {
            return Err(Error::Usage(format!(
                "search vector dimension {} does not match {} knots",
                zs.len(),
                eta.len()
            )));
        }
        let half = R::of(0.5);
        let mut values = Vec::with_capacity(zs.len());
        let mut prev = bound * zs[0];
        values.push(prev);
        for &zi in &zs[1..] {
            let b = half * (prev - bound) + half * (prev + bound) * zi;
            values.push(b);
            prev = b;
        }
        Self::new(eta.to_vec(), values, bound)
    }

    /// Inverse transform `(phi^N_M)^{-1}`. At a flat floor
    /// (`b_{i-1} = b_i = -bound`) the inverse component is undefined; the
    /// convention `z_i = 1` is returned there.
    pub fn to_search_vector(&self) -> SearchVector<R> {
        let m = self.bound;
        let mut z = Vec::with_capacity(self.values.len());
        z.push(self.values[0] / m);
        for i in 1..self.values.len() {
            let denom = self.values[i - 1] + m;
            let zi = if denom <= R::zero() {
                R::one()
            } else {
                (R::of(2.0) * self.values[i] - self.values[i - 1] + m) / denom
            };
            z.push(zi);
        }
        SearchVector::clamped(z)
    }

    /// CSV serialization: `rank,value` rows at the knots.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,value\n");
        for (e, v) in self.eta.iter().zip(self.values.iter()) {
            out.push_str(&format!("{:.16e},{:.16e}\n", e.as_f64(), v.as_f64()));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut eta = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("rank")) {
                continue;
            }
            let mut parts = line.split(',');
            let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
                return Err(Error::Parse(format!("reward csv line {}: expected rank,value", lineno + 1)));
            };
            let e: f64 = a
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("reward csv line {}: bad rank {a}", lineno + 1)))?;
            let v: f64 = b
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("reward csv line {}: bad value {b}", lineno + 1)))?;
            eta.push(R::of(e));
            values.push(R::of(v));
        }
        let bound = values
            .iter()
            .fold(R::zero(), |acc: R, v: &R| acc.max(v.abs()));
        Self::new(eta, values, bound)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text)
    }
}

/// A point of the search box `(-1, 1]^N` explored by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchVector<R = f64>(Vec<R>);

impl<R: Real> SearchVector<R> {
    pub fn new(z: Vec<R>) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::Invariant("search vector must be non-empty".into()));
        }
        for (i, v) in z.iter().enumerate() {
            if !(*v > -R::one() && *v <= R::one()) {
                return Err(Error::Domain(format!(
                    "search component {i} = {v} outside (-1, 1]"
                )));
            }
        }
        Ok(Self(z))
    }

    /// Clamps components into `(-1, 1]`, nudging exact `-1` inward.
    pub fn clamped(mut z: Vec<R>) -> Self {
        let lo = -R::one() + R::epsilon();
        for v in &mut z {
            *v = (*v).min(R::one()).max(lo);
        }
        Self(z)
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![R::one(); n])
    }

    pub fn components(&self) -> &[R] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<R> {
        self.0
    }
}

/// Prefix/suffix integrals of `exp(-B(z)/kappa)` for one reward and one
/// `kappa`, exact per segment. Prefix and suffix are accumulated
/// independently so that both ends of the range stay accurate.
#[derive(Debug, Clone)]
pub struct ExpWeights<R = f64> {
    eta: Vec<R>,
    values: Vec<R>,
    kappa: R,
    prefix: Vec<R>,
    suffix: Vec<R>,
}

impl<R: Real> ExpWeights<R> {
    fn build(reward: &PiecewiseReward<R>, kappa: R) -> Result<Self> {
        let n = reward.eta.len();
        let mut prefix = vec![R::zero(); n];
        let mut suffix = vec![R::zero(); n];
        for i in 1..n {
            let w = reward.eta[i] - reward.eta[i - 1];
            prefix[i] = prefix[i - 1]
                + segment_exp_integral(reward.values[i - 1], reward.values[i], w, kappa);
        }
        for i in (0..n - 1).rev() {
            let w = reward.eta[i + 1] - reward.eta[i];
            suffix[i] = suffix[i + 1]
                + segment_exp_integral(reward.values[i], reward.values[i + 1], w, kappa);
        }
        Ok(Self {
            eta: reward.eta.clone(),
            values: reward.values.clone(),
            kappa,
            prefix,
            suffix,
        })
    }

    pub fn total(&self) -> R {
        *self.prefix.last().unwrap()
    }

    /// `∫_0^r exp(-B/kappa)`, with `r` clamped into `[0,1]`.
    pub fn prefix_at(&self, r: R) -> R {
        let r = r.min(R::one()).max(R::zero());
        let i = bracket(&self.eta, r);
        let dr = r - self.eta[i];
        if dr <= R::zero() {
            return self.prefix[i];
        }
        let b_r = self.value_at(i, r);
        self.prefix[i] + segment_exp_integral(self.values[i], b_r, dr, self.kappa)
    }

    /// `∫_r^1 exp(-B/kappa)`, with `r` clamped into `[0,1]`.
    pub fn suffix_at(&self, r: R) -> R {
        let r = r.min(R::one()).max(R::zero());
        let i = bracket(&self.eta, r);
        let dr = self.eta[i + 1] - r;
        if dr <= R::zero() {
            return self.suffix[i + 1];
        }
        let b_r = self.value_at(i, r);
        self.suffix[i + 1] + segment_exp_integral(b_r, self.values[i + 1], dr, self.kappa)
    }

    /// Solves `∫_0^r exp(-B/kappa) = target` for `r` (clamped to `[0,1]`).
    pub fn invert_prefix(&self, target: R) -> R {
        if target <= R::zero() {
            return R::zero();
        }
        if target >= self.total() {
            return R::one();
        }
        let i = upper_index(&self.prefix, target);
        let t = target - self.prefix[i];
        let w = self.eta[i + 1] - self.eta[i];
        let slope = (self.values[i + 1] - self.values[i]) / w;
        let dr = solve_forward(self.values[i], slope, t, self.kappa);
        (self.eta[i] + dr.min(w)).min(R::one())
    }

    /// Solves `∫_r^1 exp(-B/kappa) = target` for `r` (clamped to `[0,1]`).
    pub fn invert_suffix(&self, target: R) -> R {
        if target <= R::zero() {
            return R::one();
        }
        if target >= self.total() {
            return R::zero();
        }
        let i = lower_index_suffix(&self.suffix, target);
        let t = target - self.suffix[i + 1];
        let w = self.eta[i + 1] - self.eta[i];
        let slope = (self.values[i + 1] - self.values[i]) / w;
        let dr = solve_backward(self.values[i + 1], slope, t, self.kappa);
        (self.eta[i + 1] - dr.min(w)).max(R::zero())
    }

    fn value_at(&self, seg: usize, r: R) -> R {
        let w = self.eta[seg + 1] - self.eta[seg];
        let t = (r - self.eta[seg]) / w;
        self.values[seg] + (self.values[seg + 1] - self.values[seg]) * t
    }
}

/// `∫ exp(-B/kappa)` over one linear segment running from value `b_start`
/// to `b_end` across width `w`: the sign-corrected antiderivative
/// `kappa * w / (b_start - b_end) * (exp(-b_end/kappa) - exp(-b_start/kappa))`,
/// evaluated through `exp_m1` so the flat-segment limit `w * exp(-b/kappa)`
/// is reached continuously.
fn segment_exp_integral<R: Real>(b_start: R, b_end: R, w: R, kappa: R) -> R {
    let d = (b_start - b_end) / kappa;
    let base = (-b_start / kappa).exp();
    if d.abs() < R::of(1e-300) {
        return w * base;
    }
    w * base * d.exp_m1() / d
}

/// Width `dr` with `∫` over `[start, start+dr]` of `exp(-(b0 + slope*x)/kappa)`
/// equal to `target`.
fn solve_forward<R: Real>(b0: R, slope: R, target: R, kappa: R) -> R {
    if slope.abs() < R::of(1e-300) {
        return target * (b0 / kappa).exp();
    }
    let arg = -(slope / kappa) * target * (b0 / kappa).exp();
    if arg <= -R::one() {
        return R::infinity();
    }
    -(kappa / slope) * arg.ln_1p()
}

/// Width `dr` with `∫` over `[end-dr, end]` of the segment ending at value
/// `b1` with the given slope equal to `target`.
fn solve_backward<R: Real>(b1: R, slope: R, target: R, kappa: R) -> R {
    if slope.abs() < R::of(1e-300) {
        return target * (b1 / kappa).exp();
    }
    let arg = (slope / kappa) * target * (b1 / kappa).exp();
    if arg <= -R::one() {
        return R::infinity();
    }
    (kappa / slope) * arg.ln_1p()
}

/// Last index `i` with `prefix[i] <= target` (and `i < len-1`).
fn upper_index<R: Real>(prefix: &[R], target: R) -> usize {
    let mut lo = 0usize;
    let mut hi = prefix.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if prefix[mid] <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// First segment index `i` with `suffix[i] >= target > suffix[i+1]`.
fn lower_index_suffix<R: Real>(suffix: &[R], target: R) -> usize {
    let mut lo = 0usize;
    let mut hi = suffix.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if suffix[mid] >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// A general terminal reward `R(x, r)`: continuous, bounded on the grids it
/// is evaluated on, non-increasing in both consumption and rank.
#[derive(Clone)]
pub struct GeneralReward<R = f64> {
    eval: Arc<dyn Fn(R, R) -> R + Send + Sync>,
    purely_ranked: bool,
    /// `Some(p)` when the reward has the decomposed form `B(r) - p x`.
    price: Option<R>,
}

impl<R: Real> GeneralReward<R> {
    /// Purely rank-based reward `R(x, r) = B(r)`.
    pub fn purely_ranked(reward: &PiecewiseReward<R>) -> Self {
        let b = reward.clone();
        Self {
            eval: Arc::new(move |_x, r| b.eval_clamped(r)),
            purely_ranked: true,
            price: Some(R::zero()),
        }
    }

    /// Decomposed total reward `R(x, r) = B(r) - p x`.
    pub fn affine(reward: &PiecewiseReward<R>, price: R) -> Self {
        let b = reward.clone();
        Self {
            eval: Arc::new(move |x, r| b.eval_clamped(r) - price * x),
            purely_ranked: price == R::zero(),
            price: Some(price),
        }
    }

    /// Arbitrary reward surface. The caller is responsible for the
    /// monotonicity and boundedness invariants on its evaluation grids.
    pub fn from_fn(f: impl Fn(R, R) -> R + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(f),
            purely_ranked: false,
            price: None,
        }
    }

    /// Consumption-only reward sampled on a grid (linear interpolation,
    /// clamped outside).
    pub fn from_x_table(xs: Vec<R>, values: Vec<R>) -> Self {
        Self {
            eval: Arc::new(move |x, _r| interp_clamped(&xs, &values, x)),
            purely_ranked: false,
            price: None,
        }
    }

    pub fn eval(&self, x: R, r: R) -> R {
        (self.eval)(x, r)
    }

    pub fn is_purely_ranked(&self) -> bool {
        self.purely_ranked
    }

    /// The price coefficient when the reward is known to have the form
    /// `B(r) - p x`.
    pub fn price(&self) -> Option<R> {
        self.price
    }

    /// Samples the reward on a grid pair and checks boundedness and
    /// monotonicity in both arguments.
    pub fn validate_on(&self, xs: &[R], ranks: &[R]) -> Result<()> {
        let tol = R::of(1e-9);
        let mut prev_row: Option<Vec<R>> = None;
        for &r in ranks {
            let row: Vec<R> = xs.iter().map(|&x| self.eval(x, r)).collect();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant("reward unbounded on evaluation grid".into()));
            }
            for w in row.windows(2) {
                if w[1] > w[0] + tol {
                    return Err(Error::Invariant("reward must be non-increasing in x".into()));
                }
            }
            if let Some(prev) = &prev_row {
                for (a, b) in prev.iter().zip(row.iter()) {
                    if *b > *a + tol {
                        return Err(Error::Invariant("reward must be non-increasing in rank".into()));
                    }
                }
            }
            prev_row = Some(row);
        }
        Ok(())
    }
}

impl<R: std::fmt::Debug> std::fmt::Debug for GeneralReward<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneralReward")
            .field("purely_ranked", &self.purely_ranked)
            .field("price", &self.price)
            .finish()
    }
}
