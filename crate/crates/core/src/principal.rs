//! Retailer-side objectives and reward design: the retailer gain and its
//! Lagrangian relaxation, the homogeneous analytic optimum, the
//! derivative-free reward search, and the invariance transforms that reduce
//! a general reward to a purely ranked or a consumption-only one.

use std::sync::Arc;

use serde::Serialize;

use crate::cmaes::{run_search, GenerationRecord, SearchConfig};
use crate::error::{Error, Result};
use crate::grids::{composite_rank_grid, linspace, trapezoid, DensityGrid};
use crate::mfg::{
    best_response, equilibrium_summary, price_incentive, validate_portfolio, ClusterParams, Grids,
};
use crate::numerics::{normal_quantile, wasserstein1};
use crate::rewards::{GeneralReward, PiecewiseReward, SearchVector};
use crate::scalar::Real;

/// The retailer's valuation `s(m)` of the portfolio mean consumption,
/// decreasing, concave and differentiable on the operating range.
#[derive(Clone)]
pub enum SavingsFunction<R = f64> {
    Quadratic { a2: R, a1: R, a0: R },
    Custom {
        s: Arc<dyn Fn(R) -> R + Send + Sync>,
        s_prime: Arc<dyn Fn(R) -> R + Send + Sync>,
    },
}

impl<R: Real> SavingsFunction<R> {
    pub fn quadratic(a2: R, a1: R, a0: R) -> Self {
        SavingsFunction::Quadratic { a2, a1, a0 }
    }

    pub fn custom(
        s: impl Fn(R) -> R + Send + Sync + 'static,
        s_prime: impl Fn(R) -> R + Send + Sync + 'static,
    ) -> Self {
        SavingsFunction::Custom { s: Arc::new(s), s_prime: Arc::new(s_prime) }
    }

    pub fn eval(&self, m: R) -> R {
        match self {
            SavingsFunction::Quadratic { a2, a1, a0 } => (*a2 * m + *a1) * m + *a0,
            SavingsFunction::Custom { s, .. } => s(m),
        }
    }

    pub fn derivative(&self, m: R) -> R {
        match self {
            SavingsFunction::Quadratic { a2, a1, .. } => R::of(2.0) * *a2 * m + *a1,
            SavingsFunction::Custom { s_prime, .. } => s_prime(m),
        }
    }
}

impl<R: std::fmt::Debug> std::fmt::Debug for SavingsFunction<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SavingsFunction::Quadratic { a2, a1, a0 } => {
                write!(f, "Quadratic({a2:?} m^2 + {a1:?} m + {a0:?})")
            }
            SavingsFunction::Custom { .. } => write!(f, "Custom"),
        }
    }
}

/// Market-side parameters of the retailer problem.
#[derive(Clone, Debug)]
pub struct MarketParams<R = f64> {
    /// Contract horizon T (years).
    pub horizon: R,
    /// Energy price p (EUR/MWh equivalent units of the instance).
    pub price: R,
    /// Production cost c_r (same unit as the price).
    pub production_cost: R,
    pub savings: SavingsFunction<R>,
}

impl<R: Real> MarketParams<R> {
    pub fn new(horizon: R, price: R, production_cost: R, savings: SavingsFunction<R>) -> Result<Self> {
        if !(horizon > R::zero()) {
            return Err(Error::Invariant("horizon must be > 0".into()));
        }
        Ok(Self { horizon, price, production_cost, savings })
    }

    /// `g(m) = s(m) - c_r m`.
    pub fn gain(&self, m: R) -> R {
        self.savings.eval(m) - self.production_cost * m
    }

    /// Reduction desire `delta(m) = p - c_r + s'(m)`: the marginal value to
    /// the retailer of lowering the mean consumption.
    pub fn reduction_desire(&self, m: R) -> R {
        self.price - self.production_cost + self.savings.derivative(m)
    }

    /// Samples `s'` on `[lo, hi]` and checks it is non-positive and
    /// non-increasing (decreasing concave savings).
    pub fn validate_savings_on(&self, lo: R, hi: R) -> Result<()> {
        let xs: Vec<R> = linspace(lo, hi, 201);
        let tol = R::of(1e-9);
        let mut prev = R::infinity();
        for &m in &xs {
            let d = self.savings.derivative(m);
            if !d.is_finite() {
                return Err(Error::Invariant(format!("s' not finite at m = {m}")));
            }
            if d > tol {
                return Err(Error::Invariant(format!(
                    "savings must be decreasing: s'({m}) = {d} > 0"
                )));
            }
            if d > prev + tol {
                return Err(Error::Invariant(format!(
                    "savings must be concave: s' increases at m = {m}"
                )));
            }
            prev = d;
        }
        Ok(())
    }
}

/// Per-cluster outcome of a candidate reward.
#[derive(Clone, Debug, Serialize)]
pub struct ClusterReport<R = f64> {
    pub rho: R,
    /// Equilibrium mean consumption.
    pub mean: R,
    /// Consumer value under the reward.
    pub value: R,
    /// Reservation value `V_pi` (price incentive only).
    pub value_floor: R,
    /// `value - value_floor`; non-negative for admissible rewards.
    pub slack: R,
}

/// Retailer objective report for one reward.
#[derive(Clone, Debug, Serialize)]
pub struct ObjectiveReport<R = f64> {
    /// Retailer gain `pi = s(m) + (p - c_r) m - ∫ B`.
    pub gain: R,
    /// Hinge-penalized gain at `lambda`.
    pub penalized: R,
    pub lambda: R,
    pub portfolio_mean: R,
    /// `∫_0^1 B(r) dr`.
    pub reward_cost: R,
    pub clusters: Vec<ClusterReport<R>>,
}

impl<R: Real> ObjectiveReport<R> {
    /// `pi - lambda * Σ rho_k max(V_pi_k - V_k, 0)`.
    pub fn penalized_at(&self, lambda: R) -> R {
        let penalty: R = self
            .clusters
            .iter()
            .map(|c| c.rho * (-c.slack).max(R::zero()))
            .sum();
        self.gain - lambda * penalty
    }

    pub fn min_slack(&self) -> R {
        self.clusters
            .iter()
            .map(|c| c.slack)
            .fold(R::infinity(), |a, b| a.min(b))
    }

    pub fn to_json(&self) -> String
    where
        R: Serialize,
    {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn report_for<R: Real>(
    reward: &PiecewiseReward<R>,
    clusters: &[ClusterParams<R>],
    market: &MarketParams<R>,
    lambda: R,
) -> Result<ObjectiveReport<R>> {
    validate_portfolio(clusters)?;
    let mut portfolio_mean = R::zero();
    let mut reports = Vec::with_capacity(clusters.len());
    for cl in clusters {
        let (mean, value) = equilibrium_summary(reward, market.price, cl, market.horizon)?;
        let pi = price_incentive(cl, market.price, market.horizon)?;
        portfolio_mean += cl.rho * mean;
        reports.push(ClusterReport {
            rho: cl.rho,
            mean,
            value,
            value_floor: pi.v_pi,
            slack: value - pi.v_pi,
        });
    }
    let reward_cost = reward.total_integral();
    let gain = market.savings.eval(portfolio_mean)
        + (market.price - market.production_cost) * portfolio_mean
        - reward_cost;
    let mut report = ObjectiveReport {
        gain,
        penalized: gain,
        lambda,
        portfolio_mean,
        reward_cost,
        clusters: reports,
    };
    report.penalized = report.penalized_at(lambda);
    Ok(report)
}

/// Retailer gain of a reward across the cluster portfolio, with per-cluster
/// means, values and utility slacks.
pub fn retailer_gain<R: Real>(
    reward: &PiecewiseReward<R>,
    clusters: &[ClusterParams<R>],
    market: &MarketParams<R>,
) -> Result<ObjectiveReport<R>> {
    report_for(reward, clusters, market, R::zero())
}

/// Hinge-penalized retailer objective used by the reward search.
pub fn lagrangian_objective<R: Real>(
    reward: &PiecewiseReward<R>,
    clusters: &[ClusterParams<R>],
    market: &MarketParams<R>,
    lambda: R,
) -> Result<R> {
    if !(lambda >= R::zero()) {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    Ok(report_for(reward, clusters, market, lambda)?.penalized)
}

/// Closed-form optimum of the relaxed homogeneous problem.
#[derive(Clone, Debug)]
pub struct AnalyticOptimum<R = f64> {
    /// Optimal mean `m*`, root of `m - x_pi = (T/2c) delta(m)`.
    pub mean: R,
    /// Reduction desire at the optimum.
    pub reduction_desire: R,
    /// Retailer gain at the optimum.
    pub gain: R,
    /// Whether the associated reward is non-increasing (`delta(m*) <= 0`);
    /// when false the relaxation is inadmissible and no reward is returned.
    pub reward_admissible: bool,
    /// The optimal reward truncated to `[-bound, bound]`, sampled on the
    /// rank grid; `None` when inadmissible.
    pub reward: Option<PiecewiseReward<R>>,
}

/// Homogeneous analytic optimum: solves the scalar fixed-point equation for
/// the optimal mean by bisection, then assembles the optimal reward
/// `B*(r) = (c/T)(x_pi^2 - m*^2) + q*(r) delta(m*)` and the closed-form gain.
pub fn analytic_optimum<R: Real>(
    cl: &ClusterParams<R>,
    market: &MarketParams<R>,
    ranks: &[R],
    bound: R,
) -> Result<AnalyticOptimum<R>> {
    if !(bound > R::zero()) {
        return Err(Error::Config("reward bound must be > 0".into()));
    }
    let c = cl.cost.constant()?;
    let t_over_2c = market.horizon / (R::of(2.0) * c);
    let pi = price_incentive(cl, market.price, market.horizon)?;
    let residual = |m: R| m - pi.x_pi - t_over_2c * market.reduction_desire(m);

    // bracket the (unique) root: residual is increasing in m
    let mut lo = pi.x_pi - market.reduction_desire(pi.x_pi).abs() * t_over_2c - R::one();
    let mut hi = pi.x_pi + R::one();
    let mut width = hi - lo;
    for _ in 0..200 {
        if residual(lo) < R::zero() {
            break;
        }
        lo -= width;
        width = width * R::of(2.0);
    }
    for _ in 0..200 {
        if residual(hi) > R::zero() {
            break;
        }
        hi += width;
        width = width * R::of(2.0);
    }
    if !(residual(lo) < R::zero() && residual(hi) > R::zero()) {
        return Err(Error::NonConverged("could not bracket the optimal mean".into()));
    }
    market.validate_savings_on(lo.min(pi.x_pi), hi.max(cl.x_nom) + R::one())?;
    let mut m = (lo + hi) * R::of(0.5);
    for _ in 0..300 {
        let r = residual(m);
        if r.abs() < R::of(1e-12) {
            break;
        }
        if r > R::zero() {
            hi = m;
        } else {
            lo = m;
        }
        let next = (lo + hi) * R::of(0.5);
        if next == m {
            break;
        }
        m = next;
    }
    let delta = market.reduction_desire(m);
    let gain = market.savings.eval(m) - m * market.savings.derivative(m)
        + (m + pi.x_pi) * R::of(0.5) * delta;
    let admissible = delta <= R::zero();
    let reward = if admissible {
        let offset = c / market.horizon * (pi.x_pi * pi.x_pi - m * m);
        let sd = cl.terminal_sd(market.horizon);
        let clamp = |v: R| v.min(bound).max(-bound);
        let mut eta = Vec::with_capacity(ranks.len() + 2);
        let mut values = Vec::with_capacity(ranks.len() + 2);
        eta.push(R::zero());
        values.push(if delta < R::zero() { bound } else { clamp(offset) });
        for &r in ranks {
            let q = m + sd * normal_quantile(r)?;
            eta.push(r);
            values.push(clamp(offset + q * delta));
        }
        eta.push(R::one());
        values.push(if delta < R::zero() { -bound } else { clamp(offset) });
        Some(PiecewiseReward::new(eta, values, bound)?)
    } else {
        None
    };
    Ok(AnalyticOptimum { mean: m, reduction_desire: delta, gain, reward_admissible: admissible, reward })
}

/// Optimal mean for a quadratic savings function, in closed form:
/// `m* = (x_nom + (a1 - c_r) T / (2c)) / (1 - a2 T / c)`. The energy price
/// cancels analytically.
pub fn quadratic_mean_closed_form<R: Real>(
    a2: R,
    a1: R,
    cl: &ClusterParams<R>,
    market: &MarketParams<R>,
) -> Result<R> {
    let c = cl.cost.constant()?;
    let denom = R::one() - a2 * market.horizon / c;
    if denom.abs() < R::of(1e-12) {
        return Err(Error::Domain("degenerate quadratic: a2 T / c = 1".into()));
    }
    Ok((cl.x_nom + (a1 - market.production_cost) * market.horizon / (R::of(2.0) * c)) / denom)
}

/// Configuration of the reward search (Lagrangian objective maximized by
/// CMA-ES through the box transform).
#[derive(Clone, Debug)]
pub struct OptimizeConfig<R = f64> {
    /// Reward bound M.
    pub bound: R,
    /// Number of knots N (uniform on [0,1]).
    pub n_knots: usize,
    /// Penalty multiplier for the utility constraint.
    pub lambda: R,
    /// Initial CMA step size.
    pub sigma0: R,
    /// Evaluation budget.
    pub budget: usize,
    pub seed: u64,
    /// Starting point; defaults to all ones (B = M, always feasible).
    pub z0: Option<Vec<R>>,
    pub population: Option<usize>,
    /// After the search, shift the reward up by the smallest constant that
    /// restores all utility slacks (a strict improvement of the penalized
    /// objective whenever `lambda * rho > 1`).
    pub repair_feasibility: bool,
}

impl<R: Real> Default for OptimizeConfig<R> {
    fn default() -> Self {
        Self {
            bound: R::of(60.0),
            n_knots: 20,
            lambda: R::of(1e3),
            sigma0: R::of(0.05),
            budget: 20_000,
            seed: 0,
            z0: None,
            population: None,
            repair_feasibility: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome<R = f64> {
    pub reward: PiecewiseReward<R>,
    pub report: ObjectiveReport<R>,
    pub trace: Vec<GenerationRecord<R>>,
    pub evaluations: usize,
    /// Penalized objective of the starting point.
    pub initial_penalized: R,
    /// Constant added by the feasibility repair (0 when none).
    pub repair_shift: R,
}

/// Searches the bounded piecewise-linear reward class for a maximizer of
/// the penalized retailer objective. Deterministic for a fixed seed.
pub fn optimize_reward<R: Real>(
    clusters: &[ClusterParams<R>],
    market: &MarketParams<R>,
    cfg: &OptimizeConfig<R>,
) -> Result<OptimizeOutcome<R>>
where
    rand_distr::StandardNormal: rand_distr::Distribution<R>,
{
    if !(cfg.bound > R::zero()) {
        return Err(Error::Config("reward bound M must be > 0".into()));
    }
    if cfg.n_knots < 2 {
        return Err(Error::Config("need at least 2 knots".into()));
    }
    if !(cfg.lambda >= R::zero()) {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    validate_portfolio(clusters)?;
    let (range_lo, range_hi) = operating_range(clusters, market)?;
    market.validate_savings_on(range_lo, range_hi)?;

    let eta: Vec<R> = PiecewiseReward::uniform_knots(cfg.n_knots);
    let objective = {
        let eta = eta.clone();
        let clusters = clusters.to_vec();
        let market = market.clone();
        let bound = cfg.bound;
        let lambda = cfg.lambda;
        move |z: &[R]| -> R {
            let sv = SearchVector::clamped(z.to_vec());
            let Ok(reward) = PiecewiseReward::from_search_vector(&sv, bound, &eta) else {
                return R::neg_infinity();
            };
            match lagrangian_objective(&reward, &clusters, &market, lambda) {
                Ok(v) => v,
                Err(_) => R::neg_infinity(),
            }
        }
    };

    let initial_point = match &cfg.z0 {
        Some(z) => {
            if z.len() != cfg.n_knots {
                return Err(Error::Config(format!(
                    "z0 has {} components for {} knots",
                    z.len(),
                    cfg.n_knots
                )));
            }
            z.clone()
        }
        None => vec![R::one(); cfg.n_knots],
    };
    let initial_penalized = objective(&initial_point);
    let search_cfg = SearchConfig {
        dimension: cfg.n_knots,
        initial_point,
        initial_step: cfg.sigma0,
        population: cfg.population,
        max_evaluations: cfg.budget,
        seed: cfg.seed,
    };
    let outcome = run_search(&objective, &search_cfg)?;

    let sv = SearchVector::clamped(outcome.best_point.clone());
    let mut reward = PiecewiseReward::from_search_vector(&sv, cfg.bound, &eta)?;
    let mut report = report_for(&reward, clusters, market, cfg.lambda)?;
    let mut repair_shift = R::zero();
    if cfg.repair_feasibility {
        let violation = (-report.min_slack()).max(R::zero());
        if violation > R::zero() {
            let shift = violation.min(reward.shift_headroom());
            if shift > R::zero() {
                let candidate = reward.shifted(shift)?;
                let candidate_report = report_for(&candidate, clusters, market, cfg.lambda)?;
                if candidate_report.penalized >= report.penalized {
                    reward = candidate;
                    report = candidate_report;
                    repair_shift = shift;
                }
            }
        }
    }
    Ok(OptimizeOutcome {
        reward,
        report,
        trace: outcome.trace,
        evaluations: outcome.evaluations,
        initial_penalized,
        repair_shift,
    })
}

fn operating_range<R: Real>(
    clusters: &[ClusterParams<R>],
    market: &MarketParams<R>,
) -> Result<(R, R)> {
    let mut lo = R::infinity();
    let mut hi = R::neg_infinity();
    for cl in clusters {
        let sd = cl.terminal_sd(market.horizon);
        let pi = price_incentive(cl, market.price, market.horizon)?;
        lo = lo.min(pi.x_pi.min(cl.x_nom) - R::of(6.0) * sd);
        hi = hi.max(cl.x_nom + R::of(6.0) * sd);
    }
    Ok((lo, hi))
}

/// The two equivalent reward representations extracted from an optimal
/// general reward at its equilibrium: a purely ranked reward
/// `B(r) = R(q(r), r)` and a consumption-only reward `R(x, F(x))`.
#[derive(Clone, Debug)]
pub struct InvarianceTransforms<R = f64> {
    /// Purely rank-based equivalent (competitive form).
    pub ranked: PiecewiseReward<R>,
    /// Consumption-only equivalent (decentralized form) as a sampled table.
    pub consumption_xs: Vec<R>,
    pub consumption_values: Vec<R>,
    pub consumption_only: GeneralReward<R>,
    /// `∫_0^1 B(r) dr` of the ranked equivalent.
    pub ranked_cost: R,
    /// `∫ R(x, F(x)) f(x) dx` of the original reward at the equilibrium.
    pub original_cost: R,
}

/// Builds the invariance transforms of `reward` at its equilibrium
/// `mu_star`. Fails when `mu_star` is not a fixed point of the best
/// response (W1 residual above 1e-5).
pub fn invariance_transforms<R: Real>(
    reward: &GeneralReward<R>,
    mu_star: &DensityGrid<R>,
    cl: &ClusterParams<R>,
    market: &MarketParams<R>,
    grids: &Grids<R>,
) -> Result<InvarianceTransforms<R>> {
    let response = best_response(reward, mu_star, cl, market.horizon)?;
    let residual = wasserstein1(
        &response.to_quantiles(&grids.ranks)?,
        &mu_star.to_quantiles(&grids.ranks)?,
    )?;
    if residual > R::of(1e-5) {
        return Err(Error::Inconsistent(format!(
            "mu_star is not an equilibrium of the reward (residual {residual})"
        )));
    }

    // rank grid with log-refined tails so the full [0,1] integral of the
    // ranked equivalent matches the x-space expected cost
    let tail_ranks = composite_rank_grid(&grids.ranks, 1e-12, 240);
    let q = mu_star.to_quantiles(&tail_ranks)?;
    let mut eta = Vec::with_capacity(tail_ranks.len() + 2);
    let mut values = Vec::with_capacity(tail_ranks.len() + 2);
    eta.push(R::zero());
    values.push(reward.eval(q.values()[0], tail_ranks[0]));
    for (&r, &x) in tail_ranks.iter().zip(q.values().iter()) {
        eta.push(r);
        values.push(reward.eval(x, r));
    }
    eta.push(R::one());
    values.push(*values.last().unwrap());
    let scale = values.iter().fold(R::zero(), |a, v| a.max(v.abs()));
    let ranked = PiecewiseReward::new_monotonized(eta, values, R::of(1e-6) * (R::one() + scale))?;
    let ranked_cost = ranked.total_integral();

    let cdf = mu_star.cdf();
    let consumption_values: Vec<R> = mu_star
        .xs()
        .iter()
        .zip(cdf.iter())
        .map(|(&x, &f)| reward.eval(x, f))
        .collect();
    let weighted: Vec<R> = consumption_values
        .iter()
        .zip(mu_star.values().iter())
        .map(|(&v, &f)| v * f)
        .collect();
    let original_cost = trapezoid(mu_star.xs(), &weighted);
    let consumption_only =
        GeneralReward::from_x_table(mu_star.xs().to_vec(), consumption_values.clone());
    Ok(InvarianceTransforms {
        ranked,
        consumption_xs: mu_star.xs().to_vec(),
        consumption_values,
        consumption_only,
        ranked_cost,
        original_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::equilibrium_closed_form;

    fn cluster1() -> ClusterParams<f64> {
        ClusterParams::with_constant_cost(18.0, 0.6, 2.5, 1.0).unwrap()
    }

    fn market() -> MarketParams<f64> {
        MarketParams::new(3.0, 0.17, 0.15, SavingsFunction::quadratic(-0.1, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn retailer_gain_zero_reward_no_savings() {
        let clusters = vec![
            ClusterParams::with_constant_cost(18.0, 0.6, 2.5, 0.5).unwrap(),
            ClusterParams::with_constant_cost(12.0, 0.3, 5.0, 0.5).unwrap(),
        ];
        let market =
            MarketParams::new(3.0, 0.17, 0.15, SavingsFunction::quadratic(0.0, 0.0, 0.0)).unwrap();
        let b0 = PiecewiseReward::constant(0.0);
        let report = retailer_gain(&b0, &clusters, &market).unwrap();
        let expect: f64 = (0.17 - 0.15) * (0.5 * 17.898 + 0.5 * 11.949);
        assert!((report.gain - expect).abs() < 1e-6, "{} vs {expect}", report.gain);
        assert_eq!(report.penalized, report.gain);
        assert!((report.reward_cost).abs() < 1e-15);
    }

    #[test]
    fn lagrangian_reduces_to_gain_when_feasible() {
        let clusters = vec![cluster1()];
        let m = market();
        let b = PiecewiseReward::constant(5.0);
        let report = retailer_gain(&b, &clusters, &m).unwrap();
        assert!(report.min_slack() > 0.0);
        let pl = lagrangian_objective(&b, &clusters, &m, 1e3).unwrap();
        assert!((pl - report.gain).abs() < 1e-9);
    }

    #[test]
    fn lagrangian_linear_in_lambda_when_infeasible() {
        let clusters = vec![cluster1()];
        let m = market();
        // negative constant reward: V = V_pi + K < V_pi
        let b = PiecewiseReward::constant(-2.0);
        let report = retailer_gain(&b, &clusters, &m).unwrap();
        let slack = report.min_slack();
        assert!((slack + 2.0).abs() < 1e-6, "slack {slack}");
        let p0 = lagrangian_objective(&b, &clusters, &m, 0.0).unwrap();
        assert!((p0 - report.gain).abs() < 1e-12);
        let p1 = lagrangian_objective(&b, &clusters, &m, 10.0).unwrap();
        let p2 = lagrangian_objective(&b, &clusters, &m, 20.0).unwrap();
        let slope1 = (p1 - p0) / 10.0;
        let slope2 = (p2 - p1) / 10.0;
        assert!((slope1 - slope2).abs() < 1e-9);
        assert!((slope1 + 2.0).abs() < 1e-6, "slope {slope1}");
    }

    #[test]
    fn analytic_optimum_trivial_when_no_reduction_desire() {
        let cl = cluster1();
        // s = 0, c_r = p: delta = 0 everywhere
        let m = MarketParams::new(3.0, 0.17, 0.17, SavingsFunction::quadratic(0.0, 0.0, 0.0))
            .unwrap();
        let ranks: Vec<f64> = crate::grids::default_rank_grid(101);
        let opt = analytic_optimum(&cl, &m, &ranks, 60.0).unwrap();
        assert!((opt.mean - 17.898).abs() < 1e-9);
        assert!(opt.reduction_desire.abs() < 1e-12);
        assert!(opt.gain.abs() < 1e-9);
        let b = opt.reward.unwrap();
        assert!(b.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn analytic_optimum_table1_cluster1() {
        let cl = cluster1();
        let m = market();
        let ranks: Vec<f64> = crate::grids::default_rank_grid(2001);
        let opt = analytic_optimum(&cl, &m, &ranks, 60.0).unwrap();
        assert!((opt.mean - 15.9910714285714).abs() < 1e-9, "m* {}", opt.mean);
        assert!((opt.reduction_desire - (-3.178214285714)).abs() < 1e-9);
        assert!((opt.gain - (-28.2819)).abs() < 1e-3, "pi* {}", opt.gain);
        assert!(opt.reward_admissible);
        let b = opt.reward.unwrap();
        let mid = b.eval(0.5).unwrap();
        assert!((mid - 3.030).abs() < 1e-3, "B*(0.5) = {mid}");

        // round trip through the equilibrium
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let eq = equilibrium_closed_form(&b, 0.17, &cl, 3.0, &grids).unwrap();
        assert!((eq.mean - opt.mean).abs() < 1e-3, "round-trip mean {}", eq.mean);
        let pi = price_incentive(&cl, 0.17, 3.0).unwrap();
        assert!((eq.value - pi.v_pi).abs() < 1e-3, "round-trip value {}", eq.value);
    }

    #[test]
    fn analytic_optimum_flags_increasing_reward() {
        let cl = cluster1();
        // strong margin, no savings: delta = p - c_r > 0
        let m = MarketParams::new(3.0, 0.5, 0.1, SavingsFunction::quadratic(0.0, 0.0, 0.0))
            .unwrap();
        let ranks: Vec<f64> = crate::grids::default_rank_grid(101);
        let opt = analytic_optimum(&cl, &m, &ranks, 60.0).unwrap();
        assert!(!opt.reward_admissible);
        assert!(opt.reward.is_none());
        assert!(opt.reduction_desire > 0.0);
    }

    #[test]
    fn quadratic_closed_form_examples() {
        let cl = cluster1();
        // a2 = a1 = 0, c_r = 0: m* = x_nom
        let free = MarketParams::new(3.0, 0.17, 0.0, SavingsFunction::quadratic(0.0, 0.0, 0.0))
            .unwrap();
        let m = quadratic_mean_closed_form(0.0, 0.0, &cl, &free).unwrap();
        assert!((m - 18.0).abs() < 1e-12);

        let mk = market();
        let m = quadratic_mean_closed_form(-0.1, 0.0, &cl, &mk).unwrap();
        assert!((m - 17.91 / 1.12).abs() < 1e-10, "{m}");

        // bisection agrees and is price-independent
        let ranks: Vec<f64> = crate::grids::default_rank_grid(101);
        for price in [0.0, 0.17, 1.0] {
            let mk =
                MarketParams::new(3.0, price, 0.15, SavingsFunction::quadratic(-0.1, 0.0, 0.0))
                    .unwrap();
            let opt = analytic_optimum(&cl, &mk, &ranks, 60.0).unwrap();
            assert!((opt.mean - m).abs() < 1e-10, "price {price}: {}", opt.mean);
        }

        // degenerate denominator
        let bad = MarketParams::new(3.0, 0.17, 0.15, SavingsFunction::quadratic(2.5 / 3.0, 0.0, 0.0));
        assert!(quadratic_mean_closed_form(2.5 / 3.0, 0.0, &cl, &bad.unwrap()).is_err());
    }

    #[test]
    fn optimize_config_validation() {
        let clusters = vec![cluster1()];
        let m = market();
        let mut cfg = OptimizeConfig::<f64> { budget: 50, ..Default::default() };
        cfg.bound = 0.0;
        assert!(optimize_reward(&clusters, &m, &cfg).is_err());
        cfg.bound = 60.0;
        cfg.n_knots = 1;
        assert!(optimize_reward(&clusters, &m, &cfg).is_err());
        cfg.n_knots = 20;
        cfg.lambda = -1.0;
        assert!(optimize_reward(&clusters, &m, &cfg).is_err());
    }

    #[test]
    fn optimize_improves_and_is_deterministic() {
        let clusters = vec![cluster1()];
        let m = market();
        let cfg = OptimizeConfig::<f64> {
            n_knots: 8,
            budget: 600,
            seed: 11,
            ..Default::default()
        };
        let a = optimize_reward(&clusters, &m, &cfg).unwrap();
        assert!(a.report.penalized >= a.initial_penalized);
        let b = optimize_reward(&clusters, &m, &cfg).unwrap();
        assert_eq!(a.reward.values(), b.reward.values());
        assert_eq!(a.report.penalized, b.report.penalized);
        // byte-identical serialization
        assert_eq!(a.reward.to_csv(), b.reward.to_csv());
    }
}
