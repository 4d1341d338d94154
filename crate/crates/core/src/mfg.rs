//! Agent-side mean-field machinery.
//!
//! For a cluster with constant effort cost `c`, volatility `sigma` and
//! nominal consumption `x_nom`, the best response to a conjectured
//! population law `mu` under a bounded terminal reward `R` is the
//! exponential tilt
//!
//! ```text
//! f*(x) = f_nom(x) exp(R(x, F_mu(x)) / (2 c sigma^2)) / beta
//! ```
//!
//! and under the decomposition `R(x,r) = B(r) - p x` the (unique)
//! equilibrium quantile is known in closed form:
//!
//! ```text
//! q(r) = x_nom - pT/(2c) + sigma sqrt(T) N^{-1}( G(r) / G(1) ),
//! G(r) = ∫_0^r exp(-B(z) / (2 c sigma^2)) dz .
//! ```
//!
//! This module hosts the closed form, the best-response operator, the damped
//! fixed-point solver used when no closed form applies, the consumer value,
//! and the inverse map from a target distribution back to a reward.

use crate::error::{Error, Result};
use crate::grids::{
    composite_rank_grid, default_rank_grid, linspace, trapezoid, DensityGrid, QuantileGrid,
    DEFAULT_CONSUMPTION_POINTS, DEFAULT_RANK_POINTS,
};
use crate::hjb::CostProfile;
use crate::numerics::{gaussian_pdf, ln_gaussian_pdf, normal_cdf, normal_quantile, normal_sf, wasserstein1};
use crate::principal::MarketParams;
use crate::rewards::{ExpWeights, GeneralReward, PiecewiseReward};
use crate::scalar::Real;

/// Effort-cost specification of a cluster: a constant (closed forms apply)
/// or a bounded time profile (handled by the HJB backend).
#[derive(Clone, Debug)]
pub enum EffortCost<R = f64> {
    Constant(R),
    TimeVarying(CostProfile<R>),
}

impl<R: Real> EffortCost<R> {
    pub fn constant(&self) -> Result<R> {
        match self {
            EffortCost::Constant(c) => Ok(*c),
            EffortCost::TimeVarying(_) => Err(Error::Unsupported(
                "operation requires a constant effort cost; use the hjb module for time profiles"
                    .into(),
            )),
        }
    }

    pub fn at(&self, t: R) -> R {
        match self {
            EffortCost::Constant(c) => *c,
            EffortCost::TimeVarying(p) => p.at(t),
        }
    }

    pub fn lower_bound(&self) -> R {
        match self {
            EffortCost::Constant(c) => *c,
            EffortCost::TimeVarying(p) => p.lower_bound(),
        }
    }
}

/// One sub-population of indistinguishable consumers.
#[derive(Clone, Debug)]
pub struct ClusterParams<R = f64> {
    /// Nominal consumption forecast at time 0 (MWh).
    pub x_nom: R,
    /// Volatility of the consumption forecast (MWh / sqrt(year)).
    pub sigma: R,
    /// Quadratic effort-cost coefficient (EUR per (MWh/year)^2 per year).
    pub cost: EffortCost<R>,
    /// Population weight in [0, 1].
    pub rho: R,
}

impl<R: Real> ClusterParams<R> {
    pub fn new(x_nom: R, sigma: R, cost: EffortCost<R>, rho: R) -> Result<Self> {
        if !(sigma > R::zero()) {
            return Err(Error::Invariant(format!("sigma must be > 0, got {sigma}")));
        }
        if !(rho >= R::zero() && rho <= R::one()) {
            return Err(Error::Invariant(format!("rho must lie in [0,1], got {rho}")));
        }
        match &cost {
            EffortCost::Constant(c) => {
                if !(*c > R::zero()) {
                    return Err(Error::Invariant(format!("effort cost must be > 0, got {c}")));
                }
            }
            EffortCost::TimeVarying(p) => p.validate()?,
        }
        Ok(Self { x_nom, sigma, cost, rho })
    }

    pub fn with_constant_cost(x_nom: R, sigma: R, c: R, rho: R) -> Result<Self> {
        Self::new(x_nom, sigma, EffortCost::Constant(c), rho)
    }

    /// Standard deviation of the zero-effort terminal consumption.
    pub fn terminal_sd(&self, horizon: R) -> R {
        self.sigma * horizon.sqrt()
    }

    /// Entropic temperature `2 c sigma^2` of the Schrödinger-bridge tilt.
    pub fn kappa(&self) -> Result<R> {
        Ok(R::of(2.0) * self.cost.constant()? * self.sigma * self.sigma)
    }

    /// Zero-effort terminal density on a consumption grid.
    pub fn nominal_density(&self, horizon: R, xs: &[R]) -> Result<DensityGrid<R>> {
        let sd = self.terminal_sd(horizon);
        let values: Vec<R> = xs.iter().map(|&x| gaussian_pdf(x, self.x_nom, sd)).collect();
        DensityGrid::normalized(xs.to_vec(), values)
    }

    /// Zero-effort terminal quantiles on a rank grid.
    pub fn nominal_quantiles(&self, horizon: R, ranks: &[R]) -> Result<QuantileGrid<R>> {
        let sd = self.terminal_sd(horizon);
        let mut values = Vec::with_capacity(ranks.len());
        for &r in ranks {
            values.push(self.x_nom + sd * normal_quantile(r)?);
        }
        QuantileGrid::new(ranks.to_vec(), values)
    }
}

/// Checks that the population weights of a portfolio sum to 1.
pub fn validate_portfolio<R: Real>(clusters: &[ClusterParams<R>]) -> Result<()> {
    if clusters.is_empty() {
        return Err(Error::Invariant("portfolio must contain at least one cluster".into()));
    }
    let total: R = clusters.iter().map(|c| c.rho).sum();
    if (total - R::one()).abs() > R::of(1e-9) {
        return Err(Error::Invariant(format!(
            "population weights must sum to 1, got {total}"
        )));
    }
    Ok(())
}

/// Shared evaluation grids: the rank grid for quantiles and the consumption
/// grid for densities.
#[derive(Clone, Debug)]
pub struct Grids<R = f64> {
    pub ranks: Vec<R>,
    pub xs: Vec<R>,
}

impl<R: Real> Grids<R> {
    /// Default grids: 2001 rank midpoints and a 4001-point consumption grid
    /// spanning all cluster means padded by `8 sigma sqrt(T)` plus the
    /// price-incentive shift.
    pub fn standard(clusters: &[ClusterParams<R>], price: R, horizon: R) -> Result<Self> {
        Self::with_sizes(
            clusters,
            price,
            horizon,
            DEFAULT_RANK_POINTS,
            DEFAULT_CONSUMPTION_POINTS,
            R::of(8.0),
        )
    }

    pub fn with_sizes(
        clusters: &[ClusterParams<R>],
        price: R,
        horizon: R,
        n_rank: usize,
        n_x: usize,
        padding: R,
    ) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::Config("grids need at least one cluster".into()));
        }
        if n_rank < 2 || n_x < 2 {
            return Err(Error::Config("grids need at least 2 points per axis".into()));
        }
        let mut lo = R::infinity();
        let mut hi = R::neg_infinity();
        for cl in clusters {
            let sd = cl.terminal_sd(horizon);
            let shift = (price * horizon / (R::of(2.0) * cl.cost.lower_bound())).abs();
            lo = lo.min(cl.x_nom - padding * sd - shift);
            hi = hi.max(cl.x_nom + padding * sd + shift.min(R::zero()).abs());
        }
        Ok(Self {
            ranks: default_rank_grid(n_rank),
            xs: linspace(lo, hi, n_x),
        })
    }
}

/// Consumption and consumer value when the price is the only incentive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriceIncentive<R = f64> {
    /// Mean consumption `x_nom - pT/(2c)`.
    pub x_pi: R,
    /// Consumer value `-p x_nom + p^2 T / (4c)`.
    pub v_pi: R,
}

/// Equilibrium mean and value for `B = 0`: the reduction driven by the
/// energy price alone.
pub fn price_incentive<R: Real>(
    cl: &ClusterParams<R>,
    price: R,
    horizon: R,
) -> Result<PriceIncentive<R>> {
    if !(horizon > R::zero()) {
        return Err(Error::Domain("horizon must be > 0".into()));
    }
    let c = cl.cost.constant()?;
    let two = R::of(2.0);
    Ok(PriceIncentive {
        x_pi: cl.x_nom - price * horizon / (two * c),
        v_pi: -price * cl.x_nom + price * price * horizon / (R::of(4.0) * c),
    })
}

/// Equilibrium terminal distribution of one cluster, in both quantile and
/// density form, together with its mean, the consumer value and `ln beta`.
#[derive(Clone, Debug)]
pub struct EquilibriumResult<R = f64> {
    pub quantile: QuantileGrid<R>,
    pub density: DensityGrid<R>,
    /// Mean consumption `∫_0^1 q(r) dr` (tail-corrected).
    pub mean: R,
    /// Consumer value `V = 2 c sigma^2 ln beta`.
    pub value: R,
    pub log_beta: R,
}

/// Exact closed-form machinery for the equilibrium of `B(r) - p x`.
struct EqContext<R: Real> {
    reward: PiecewiseReward<R>,
    weights: ExpWeights<R>,
    g_total: R,
    x_center: R,
    sd: R,
    kappa: R,
    price: R,
    value: R,
    log_beta: R,
}

impl<R: Real> EqContext<R> {
    fn build(
        reward: &PiecewiseReward<R>,
        price: R,
        cl: &ClusterParams<R>,
        horizon: R,
    ) -> Result<Self> {
        if !(horizon > R::zero()) {
            return Err(Error::Domain("horizon must be > 0".into()));
        }
        let c = cl.cost.constant()?;
        let kappa = R::of(2.0) * c * cl.sigma * cl.sigma;
        let weights = reward.exp_weights(kappa)?;
        let g_total = weights.total();
        let pi = price_incentive(cl, price, horizon)?;
        let value = pi.v_pi - kappa * g_total.ln();
        Ok(Self {
            reward: reward.clone(),
            weights,
            g_total,
            x_center: cl.x_nom - price * horizon / (R::of(2.0) * c),
            sd: cl.sigma * horizon.sqrt(),
            kappa,
            price,
            value,
            log_beta: value / kappa,
        })
    }

    /// Normal score `N^{-1}(G(r)/G(1))`, using whichever of the prefix or
    /// suffix integral is smaller so both tails stay accurate.
    fn standard_score(&self, r: R) -> R {
        let prefix = self.weights.prefix_at(r);
        let suffix = self.weights.suffix_at(r);
        if prefix <= suffix {
            let u = (prefix / self.g_total).max(R::of(1e-300));
            normal_quantile(u.min(R::of(0.5))).expect("u in (0, 1/2]")
        } else {
            let u = (suffix / self.g_total).max(R::of(1e-300));
            -normal_quantile(u.min(R::of(0.5))).expect("u in (0, 1/2]")
        }
    }

    fn quantile(&self, r: R) -> R {
        self.x_center + self.sd * self.standard_score(r)
    }

    /// Inverse of the quantile: the rank of a consumption level, computed
    /// through the closed-form inverse of the weight integral.
    fn rank_of(&self, x: R) -> R {
        let z = (x - self.x_center) / self.sd;
        if z <= R::zero() {
            self.weights.invert_prefix(normal_cdf(z) * self.g_total)
        } else {
            self.weights.invert_suffix(normal_sf(z) * self.g_total)
        }
    }

    /// Log of the equilibrium density at `x` (exact construction).
    fn ln_density(&self, x: R, x_nom: R) -> R {
        let r = self.rank_of(x);
        ln_gaussian_pdf(x, x_nom, self.sd)
            + (self.reward.eval_clamped(r) - self.price * x) / self.kappa
            - self.log_beta
    }

    /// `∫_0^1 q(r) dr` on a composite grid whose log-spaced tails capture
    /// the integrable quantile singularities at 0 and 1.
    fn mean(&self) -> R {
        let grid = mean_grid::<R>();
        let values: Vec<R> = grid.iter().map(|&r| self.quantile(r)).collect();
        trapezoid(&grid, &values)
    }
}

/// Integration grid for full-range rank integrals: a uniform core with
/// log-refined tails reaching down to 1e-15.
fn mean_grid<R: Real>() -> Vec<R> {
    let core: Vec<R> = linspace(R::of(0.01), R::of(0.99), 1961);
    composite_rank_grid(&core, 1e-15, 320)
}

/// Closed-form equilibrium of the total reward `B(r) - p x` (Assumption-1
/// form). The zero-price equilibrium quantile is shifted by `-pT/(2c)`.
pub fn equilibrium_closed_form<R: Real>(
    reward: &PiecewiseReward<R>,
    price: R,
    cl: &ClusterParams<R>,
    horizon: R,
    grids: &Grids<R>,
) -> Result<EquilibriumResult<R>> {
    let ctx = EqContext::build(reward, price, cl, horizon)?;
    let mut qs = Vec::with_capacity(grids.ranks.len());
    for &r in &grids.ranks {
        qs.push(ctx.quantile(r));
    }
    let quantile = QuantileGrid::new(grids.ranks.clone(), qs)?;
    let density_values: Vec<R> = grids
        .xs
        .iter()
        .map(|&x| ctx.ln_density(x, cl.x_nom).exp())
        .collect();
    let density = DensityGrid::normalized(grids.xs.clone(), density_values)?;
    Ok(EquilibriumResult {
        quantile,
        density,
        mean: ctx.mean(),
        value: ctx.value,
        log_beta: ctx.log_beta,
    })
}

/// Fast path for optimization loops: mean and consumer value of the
/// closed-form equilibrium, without constructing the grids.
pub fn equilibrium_summary<R: Real>(
    reward: &PiecewiseReward<R>,
    price: R,
    cl: &ClusterParams<R>,
    horizon: R,
) -> Result<(R, R)> {
    let ctx = EqContext::build(reward, price, cl, horizon)?;
    Ok((ctx.mean(), ctx.value))
}

/// Consumer value `V = 2 c sigma^2 ln beta` computed by rank-substitution
/// quadrature of the normalizing integral
/// `beta = ∫ f_nom(x) exp((B(F(x)) - p x)/kappa) dx`.
///
/// `eq` must be the equilibrium of `(reward, price)`; the quantile grid is
/// re-derived and compared as a consistency guard.
pub fn consumer_value<R: Real>(
    reward: &PiecewiseReward<R>,
    price: R,
    cl: &ClusterParams<R>,
    horizon: R,
    eq: &EquilibriumResult<R>,
) -> Result<R> {
    let ctx = EqContext::build(reward, price, cl, horizon)?;
    let tol = R::of(1e-8) * (R::one() + ctx.x_center.abs());
    for (&r, &q) in eq.quantile.ranks().iter().zip(eq.quantile.values().iter()) {
        if (ctx.quantile(r) - q).abs() > tol {
            return Err(Error::Inconsistent(format!(
                "supplied equilibrium deviates from the fixed point at rank {r}"
            )));
        }
    }
    // substitute x = q(r): beta = ∫_0^1 f_nom(q) exp((B(r) - p q)/kappa) q'(r) dr
    // with the analytic q'(r) = sd exp(-B(r)/kappa) / (G(1) phi(z_r)).
    let grid = mean_grid::<R>();
    let mut ln_terms = Vec::with_capacity(grid.len());
    let mut max_term = R::neg_infinity();
    let ln_sqrt_2pi = R::of(0.918_938_533_204_672_7);
    for &r in &grid {
        let z = ctx.standard_score(r);
        let q = ctx.x_center + ctx.sd * z;
        let b = ctx.reward.eval_clamped(r);
        let ln_fnom = ln_gaussian_pdf(q, cl.x_nom, ctx.sd);
        let ln_qprime = ctx.sd.ln() - b / ctx.kappa - ctx.g_total.ln()
            + (z * z * R::of(0.5) + ln_sqrt_2pi);
        let t = ln_fnom + (b - price * q) / ctx.kappa + ln_qprime;
        max_term = max_term.max(t);
        ln_terms.push(t);
    }
    let scaled: Vec<R> = ln_terms.iter().map(|&t| (t - max_term).exp()).collect();
    let integral = trapezoid(&grid, &scaled);
    Ok(ctx.kappa * (integral.ln() + max_term))
}

/// Per-rank values of `B(r) - p q(r) + kappa ln(f_nom/f_mu)(q(r))`, which
/// the equilibrium characterization forces to be constant (and equal to the
/// consumer value). The density is read from the equilibrium's density
/// grid by interpolation.
pub fn value_constancy_profile<R: Real>(
    reward: &PiecewiseReward<R>,
    price: R,
    cl: &ClusterParams<R>,
    horizon: R,
    eq: &EquilibriumResult<R>,
) -> Result<Vec<R>> {
    let kappa = cl.kappa()?;
    let sd = cl.terminal_sd(horizon);
    let ln_density: Vec<R> = eq
        .density
        .values()
        .iter()
        .map(|&f| f.max(R::of(1e-300)).ln())
        .collect();
    let mut out = Vec::with_capacity(eq.quantile.ranks().len());
    for (&r, &q) in eq.quantile.ranks().iter().zip(eq.quantile.values().iter()) {
        let ln_fmu = crate::grids::interp_clamped(eq.density.xs(), &ln_density, q);
        let ln_fnom = ln_gaussian_pdf(q, cl.x_nom, sd);
        out.push(reward.eval(r)? - price * q + kappa * (ln_fnom - ln_fmu));
    }
    Ok(out)
}

/// Best response to a conjectured population law: the exponential tilt of
/// the nominal density by `R(x, F_mu(x)) / (2 c sigma^2)`, normalized in
/// log space.
pub fn best_response<R: Real>(
    reward: &GeneralReward<R>,
    mu: &DensityGrid<R>,
    cl: &ClusterParams<R>,
    horizon: R,
) -> Result<DensityGrid<R>> {
    Ok(best_response_with_value(reward, mu, cl, horizon)?.0)
}

/// Best response plus the responder's optimal value `2 c sigma^2 ln beta`.
pub fn best_response_with_value<R: Real>(
    reward: &GeneralReward<R>,
    mu: &DensityGrid<R>,
    cl: &ClusterParams<R>,
    horizon: R,
) -> Result<(DensityGrid<R>, R)> {
    let kappa = cl.kappa()?;
    let sd = cl.terminal_sd(horizon);
    let cdf = mu.cdf();
    let xs = mu.xs();
    let mut exponents = Vec::with_capacity(xs.len());
    let mut max_e = R::neg_infinity();
    for (i, &x) in xs.iter().enumerate() {
        let e = ln_gaussian_pdf(x, cl.x_nom, sd) + reward.eval(x, cdf[i]) / kappa;
        if !e.is_finite() && e > R::zero() {
            return Err(Error::Domain("reward must be bounded on the grid".into()));
        }
        max_e = max_e.max(e);
        exponents.push(e);
    }
    let weights: Vec<R> = exponents.iter().map(|&e| (e - max_e).exp()).collect();
    let mass = trapezoid(xs, &weights);
    let value = kappa * (mass.ln() + max_e);
    Ok((DensityGrid::normalized(xs.to_vec(), weights)?, value))
}

/// Damping schedule of the fixed-point iteration.
#[derive(Clone, Copy, Debug)]
pub enum Damping<R = f64> {
    /// Iteration-independent coefficient `l`.
    Constant(R),
    /// Decreasing coefficients `l_i = (1/(i+1))^p`; slow but guaranteed.
    Power(u32),
}

impl<R: Real> Damping<R> {
    pub fn coefficient(&self, iteration: usize) -> R {
        match self {
            Damping::Constant(l) => *l,
            Damping::Power(p) => {
                (R::one() / R::of_usize(iteration + 1)).powi(*p as i32)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointOptions<R = f64> {
    pub damping: Damping<R>,
    /// Wasserstein-1 tolerance between consecutive iterates.
    pub eps: R,
    pub max_iterations: usize,
}

impl<R: Real> Default for FixedPointOptions<R> {
    fn default() -> Self {
        Self {
            damping: Damping::Power(1),
            eps: R::of(1e-6),
            max_iterations: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointOutcome<R = f64> {
    pub density: DensityGrid<R>,
    /// Wasserstein-1 distance between consecutive iterates, one entry per
    /// iteration.
    pub trace: Vec<R>,
    pub converged: bool,
    pub iterations: usize,
}

/// Damped fixed-point iteration `f^{i+1} = l_i Phi(f^i) + (1 - l_i) f^i`,
/// stopping when the W1 distance between iterates drops below `eps` or the
/// iteration budget is exhausted (reported via `converged`, not an error:
/// constant damping is not guaranteed to converge).
pub fn fixed_point_solve<R: Real>(
    phi: impl Fn(&DensityGrid<R>) -> Result<DensityGrid<R>>,
    mu0: &DensityGrid<R>,
    ranks: &[R],
    opts: &FixedPointOptions<R>,
) -> Result<FixedPointOutcome<R>> {
    if !(opts.eps > R::zero()) {
        return Err(Error::Config("fixed-point tolerance must be > 0".into()));
    }
    let mut current = mu0.clone();
    let mut current_q = current.to_quantiles(ranks)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let response = phi(&current)?;
        if response.xs() != current.xs() {
            return Err(Error::Usage("best response changed the consumption grid".into()));
        }
        let l = opts.damping.coefficient(iterations);
        let one_minus = R::one() - l;
        let blended: Vec<R> = response
            .values()
            .iter()
            .zip(current.values().iter())
            .map(|(f_new, f_old)| l * *f_new + one_minus * *f_old)
            .collect();
        let next = DensityGrid::normalized(current.xs().to_vec(), blended)?;
        let next_q = next.to_quantiles(ranks)?;
        let d = wasserstein1(&current_q, &next_q)?;
        trace.push(d);
        current = next;
        current_q = next_q;
        iterations += 1;
        if d < opts.eps {
            converged = true;
            break;
        }
    }
    Ok(FixedPointOutcome { density: current, trace, converged, iterations })
}

/// Fixed-point equilibrium for a general reward, starting from the nominal
/// density (Algorithm-2 style resolution).
pub fn fixed_point_equilibrium<R: Real>(
    reward: &GeneralReward<R>,
    cl: &ClusterParams<R>,
    horizon: R,
    grids: &Grids<R>,
    opts: &FixedPointOptions<R>,
) -> Result<FixedPointOutcome<R>> {
    let mu0 = cl.nominal_density(horizon, &grids.xs)?;
    fixed_point_solve(
        |mu| best_response(reward, mu, cl, horizon),
        &mu0,
        &grids.ranks,
        opts,
    )
}

/// How the free constant of a recovered reward is pinned down.
#[derive(Clone, Copy, Debug)]
pub enum RewardLevel<R = f64> {
    /// Use this constant directly.
    Constant(R),
    /// Spend at most this total reward budget `∫ B <= K`; the smallest
    /// admissible constant (the reservation value) is chosen.
    Budget(R),
}

#[derive(Clone, Debug)]
pub struct RecoveredReward<R = f64> {
    pub reward: PiecewiseReward<R>,
    /// The constant actually used; it equals the consumer value the reward
    /// produces.
    pub c_used: R,
    /// `[V_pi, K - ∫ profile]` when a budget was given.
    pub c_bounds: Option<(R, R)>,
}

/// Inverse map of the equilibrium: the reward whose equilibrium is `mu`,
/// `B(r) = kappa ln(f_mu/f_nom)(q(r)) + p q(r) + C`, sampled at the target
/// knots. Rejects targets outside the attainable set (profile not
/// non-increasing).
pub fn reward_from_distribution<R: Real>(
    mu: &DensityGrid<R>,
    cl: &ClusterParams<R>,
    price: R,
    horizon: R,
    level: RewardLevel<R>,
    ranks: &[R],
) -> Result<RecoveredReward<R>> {
    let kappa = cl.kappa()?;
    let sd = cl.terminal_sd(horizon);
    let quantiles = mu.to_quantiles(ranks)?;
    let ln_density: Vec<R> = mu
        .values()
        .iter()
        .map(|&f| f.max(R::of(1e-300)).ln())
        .collect();
    let mut profile = Vec::with_capacity(ranks.len());
    for &q in quantiles.values() {
        let ln_fmu = crate::grids::interp_clamped(mu.xs(), &ln_density, q);
        let ln_fnom = ln_gaussian_pdf(q, cl.x_nom, sd);
        let v = kappa * (ln_fmu - ln_fnom) + price * q;
        if !v.is_finite() {
            return Err(Error::Unattainable("profile unbounded on the rank grid".into()));
        }
        profile.push(v);
    }
    let range = profile
        .iter()
        .fold(R::zero(), |acc, v| acc.max(v.abs()));
    let tol = R::of(1e-4) * (R::one() + range);
    if *profile.last().unwrap() > profile[0] + tol {
        return Err(Error::Unattainable(
            "profile is increasing end-to-end; target distribution is not attainable".into(),
        ));
    }

    let pi = price_incentive(cl, price, horizon)?;
    let (c_used, c_bounds) = match level {
        RewardLevel::Constant(c) => (c, None),
        RewardLevel::Budget(k) => {
            // ∫_0^1 profile dr, extending the end values flat into the tails
            let core = trapezoid(ranks, &profile);
            let r0 = ranks[0];
            let r1 = *ranks.last().unwrap();
            let integral = core + r0 * profile[0] + (R::one() - r1) * *profile.last().unwrap();
            let upper = k - integral;
            if pi.v_pi > upper {
                return Err(Error::Unattainable(format!(
                    "budget {k} leaves no admissible constant: needs at least {}",
                    pi.v_pi + integral
                )));
            }
            (pi.v_pi, Some((pi.v_pi, upper)))
        }
    };

    // extend flat to the mandatory knots at 0 and 1
    let mut eta = Vec::with_capacity(ranks.len() + 2);
    let mut values = Vec::with_capacity(ranks.len() + 2);
    eta.push(R::zero());
    values.push(profile[0] + c_used);
    for (&r, &v) in ranks.iter().zip(profile.iter()) {
        eta.push(r);
        values.push(v + c_used);
    }
    eta.push(R::one());
    values.push(*profile.last().unwrap() + c_used);
    let reward = PiecewiseReward::new_monotonized(eta, values, tol)?;
    Ok(RecoveredReward { reward, c_used, c_bounds })
}

/// Value and diagnostics of the distribution-space retailer objective.
#[derive(Clone, Debug)]
pub struct DistributionObjective<R = f64> {
    /// `g(Σ rho m) - Σ rho (V_pi + kappa KL(f_mu || f_nom))`.
    pub value: R,
    pub portfolio_mean: R,
    pub cluster_means: Vec<R>,
    pub kl_divergences: Vec<R>,
    /// Grid points where the density vanished inside the nominal support
    /// and was clamped for the KL integrand.
    pub clamped_points: usize,
}

/// Retailer objective evaluated directly on candidate equilibrium
/// distributions (the reformulation of the reward-design problem on
/// distribution space).
pub fn distribution_objective<R: Real>(
    mus: &[DensityGrid<R>],
    clusters: &[ClusterParams<R>],
    market: &MarketParams<R>,
) -> Result<DistributionObjective<R>> {
    if mus.len() != clusters.len() {
        return Err(Error::Usage(format!(
            "{} distributions for {} clusters",
            mus.len(),
            clusters.len()
        )));
    }
    validate_portfolio(clusters)?;
    let mut portfolio_mean = R::zero();
    let mut penalty = R::zero();
    let mut cluster_means = Vec::with_capacity(mus.len());
    let mut kls = Vec::with_capacity(mus.len());
    let mut clamped = 0usize;
    for (mu, cl) in mus.iter().zip(clusters.iter()) {
        let kappa = cl.kappa()?;
        let sd = cl.terminal_sd(market.horizon);
        let mean = mu.mean();
        let pi = price_incentive(cl, market.price, market.horizon)?;
        let tiny = R::of(1e-300);
        let integrand: Vec<R> = mu
            .xs()
            .iter()
            .zip(mu.values().iter())
            .map(|(&x, &f)| {
                if f <= R::zero() {
                    if (x - cl.x_nom).abs() < R::of(6.0) * sd {
                        clamped += 1;
                    }
                    R::zero()
                } else {
                    f * (f.max(tiny).ln() - ln_gaussian_pdf(x, cl.x_nom, sd))
                }
            })
            .collect();
        let kl = trapezoid(mu.xs(), &integrand);
        portfolio_mean += cl.rho * mean;
        penalty += cl.rho * (pi.v_pi + kappa * kl);
        cluster_means.push(mean);
        kls.push(kl);
    }
    Ok(DistributionObjective {
        value: market.gain(portfolio_mean) - penalty,
        portfolio_mean,
        cluster_means,
        kl_divergences: kls,
        clamped_points: clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::principal::SavingsFunction;

    fn cluster1() -> ClusterParams<f64> {
        ClusterParams::with_constant_cost(18.0, 0.6, 2.5, 1.0).unwrap()
    }

    fn cluster2() -> ClusterParams<f64> {
        ClusterParams::with_constant_cost(12.0, 0.3, 5.0, 1.0).unwrap()
    }

    fn table1_market() -> MarketParams<f64> {
        MarketParams::new(
            3.0,
            0.17,
            0.15,
            SavingsFunction::quadratic(-0.1, 0.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn price_incentive_examples() {
        let pi = price_incentive(&cluster1(), 0.0, 3.0).unwrap();
        assert_eq!(pi.x_pi, 18.0);
        assert_eq!(pi.v_pi, 0.0);

        let pi = price_incentive(&cluster1(), 0.17, 3.0).unwrap();
        assert!((pi.x_pi - 17.898).abs() < 1e-12);
        assert!((pi.v_pi - (-3.051330)).abs() < 1e-6);

        let pi = price_incentive(&cluster2(), 0.17, 3.0).unwrap();
        assert!((pi.x_pi - 11.949).abs() < 1e-12);
    }

    #[test]
    fn price_incentive_rejects_time_profile() {
        let profile = CostProfile::linear(5.5, -1.5, 3.0).unwrap();
        let cl = ClusterParams::new(18.0, 0.6, EffortCost::TimeVarying(profile), 1.0).unwrap();
        assert!(price_incentive(&cl, 0.17, 3.0).is_err());
    }

    #[test]
    fn constant_reward_zero_price_recovers_nominal() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.0, 3.0).unwrap();
        let b = PiecewiseReward::constant(2.0);
        let eq = equilibrium_closed_form(&b, 0.0, &cl, 3.0, &grids).unwrap();
        let nominal = cl.nominal_quantiles(3.0, &grids.ranks).unwrap();
        let d = wasserstein1(&eq.quantile, &nominal).unwrap();
        assert!(d < 1e-10, "W1 to nominal {d}");
        assert!((eq.mean - 18.0).abs() < 1e-6);
        // constant reward adds itself to the value
        assert!((eq.value - 2.0).abs() < 1e-10);
    }

    #[test]
    fn constant_reward_with_price_is_shifted_normal() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let b = PiecewiseReward::constant(0.0);
        let eq = equilibrium_closed_form(&b, 0.17, &cl, 3.0, &grids).unwrap();
        let sd = cl.terminal_sd(3.0);
        for (&r, &q) in eq.quantile.ranks().iter().zip(eq.quantile.values().iter()) {
            let expect = 17.898 + sd * normal_quantile(r).unwrap();
            assert!((q - expect).abs() < 1e-9, "rank {r}");
        }
        assert!((eq.mean - 17.898).abs() < 1e-6);
        assert!((eq.value - (-3.051330)).abs() < 1e-6);
    }

    #[test]
    fn equilibrium_density_and_quantile_consistent() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let eta: Vec<f64> = PiecewiseReward::uniform_knots(5);
        let b = PiecewiseReward::new(eta, vec![3.0, 2.0, 1.5, 0.0, -1.0], 3.0).unwrap();
        let eq = equilibrium_closed_form(&b, 0.17, &cl, 3.0, &grids).unwrap();
        // F(q(r)) = r through the density grid's CDF
        let cdf = eq.density.cdf();
        for (&r, &q) in eq
            .quantile
            .ranks()
            .iter()
            .zip(eq.quantile.values().iter())
            .step_by(37)
        {
            let f = crate::grids::interp_clamped(eq.density.xs(), &cdf, q);
            assert!((f - r).abs() < 1e-4, "rank {r}: F(q) = {f}");
        }
        // mean agrees with the plain quantile trapezoid up to tail mass
        let core_mean = eq.quantile.mean_trapezoid();
        assert!((eq.mean - core_mean).abs() < 0.02);
    }

    #[test]
    fn shift_theorem_holds_by_construction() {
        let cl = cluster2();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let eta: Vec<f64> = PiecewiseReward::uniform_knots(6);
        let b = PiecewiseReward::new(eta, vec![4.0, 2.0, 1.0, 0.5, 0.5, -2.0], 4.0).unwrap();
        let eq_p = equilibrium_closed_form(&b, 0.17, &cl, 3.0, &grids).unwrap();
        let eq_0 = equilibrium_closed_form(&b, 0.0, &cl, 3.0, &grids).unwrap();
        let shift = 0.17 * 3.0 / (2.0 * 5.0);
        let shifted = QuantileGrid::new(
            eq_0.quantile.ranks().to_vec(),
            eq_0.quantile.values().iter().map(|q| q - shift).collect(),
        )
        .unwrap();
        let d = wasserstein1(&eq_p.quantile, &shifted).unwrap();
        assert!(d < 1e-10, "shift residual {d}");
    }

    #[test]
    fn consumer_value_examples() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();

        let b0 = PiecewiseReward::constant(0.0);
        let eq = equilibrium_closed_form(&b0, 0.17, &cl, 3.0, &grids).unwrap();
        let v = consumer_value(&b0, 0.17, &cl, 3.0, &eq).unwrap();
        assert!((v - (-3.051330)).abs() < 1e-6, "v = {v}");

        let bk = PiecewiseReward::constant(7.5);
        let eq = equilibrium_closed_form(&bk, 0.17, &cl, 3.0, &grids).unwrap();
        let v = consumer_value(&bk, 0.17, &cl, 3.0, &eq).unwrap();
        assert!((v - (-3.051330 + 7.5)).abs() < 1e-6, "v = {v}");
        assert!((v - eq.value).abs() < 1e-9);
    }

    #[test]
    fn consumer_value_rejects_mismatched_equilibrium() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let b = PiecewiseReward::constant(0.0);
        let eq = equilibrium_closed_form(&b, 0.17, &cl, 3.0, &grids).unwrap();
        let other = PiecewiseReward::new(
            PiecewiseReward::uniform_knots(3),
            vec![5.0, 0.0, -5.0],
            5.0,
        )
        .unwrap();
        assert!(consumer_value(&other, 0.17, &cl, 3.0, &eq).is_err());
    }

    #[test]
    fn value_constancy_across_ranks() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let eta: Vec<f64> = PiecewiseReward::uniform_knots(5);
        let b = PiecewiseReward::new(eta, vec![4.0, 2.5, 1.0, 0.5, -1.5], 4.0).unwrap();
        let eq = equilibrium_closed_form(&b, 0.17, &cl, 3.0, &grids).unwrap();
        let profile = value_constancy_profile(&b, 0.17, &cl, 3.0, &eq).unwrap();
        let n = profile.len() as f64;
        let mean: f64 = profile.iter().sum::<f64>() / n;
        let var: f64 = profile.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let rel_sd = var.sqrt() / mean.abs();
        assert!(rel_sd < 1e-5, "relative sd {rel_sd}");
        assert!((mean - eq.value).abs() < 1e-4, "mean {mean} vs value {}", eq.value);
    }

    #[test]
    fn best_response_zero_reward_is_nominal() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let nominal = cl.nominal_density(3.0, &grids.xs).unwrap();
        // conjecture far from nominal: answer must still be nominal
        let shifted = ClusterParams::with_constant_cost(16.0, 0.6, 2.5, 1.0)
            .unwrap()
            .nominal_density(3.0, &grids.xs)
            .unwrap();
        let zero = GeneralReward::purely_ranked(&PiecewiseReward::constant(0.0));
        let resp = best_response(&zero, &shifted, &cl, 3.0).unwrap();
        let d = wasserstein1(
            &resp.to_quantiles(&grids.ranks).unwrap(),
            &nominal.to_quantiles(&grids.ranks).unwrap(),
        )
        .unwrap();
        assert!(d < 1e-6, "W1 {d}");
    }

    #[test]
    fn best_response_price_only_matches_tilt() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let mu = cl.nominal_density(3.0, &grids.xs).unwrap();
        let priced = GeneralReward::affine(&PiecewiseReward::constant(0.0), 0.17);
        let (resp, value) = best_response_with_value(&priced, &mu, &cl, 3.0).unwrap();
        let target = ClusterParams::with_constant_cost(17.898, 0.6, 2.5, 1.0)
            .unwrap()
            .nominal_density(3.0, &grids.xs)
            .unwrap();
        let d = wasserstein1(
            &resp.to_quantiles(&grids.ranks).unwrap(),
            &target.to_quantiles(&grids.ranks).unwrap(),
        )
        .unwrap();
        assert!(d < 1e-6, "W1 {d}");
        assert!((value - (-3.051330)).abs() < 1e-6);
    }

    #[test]
    fn closed_form_is_fixed_point_of_best_response() {
        for (cl, price) in [(cluster1(), 0.17), (cluster2(), 0.17)] {
            let grids = Grids::standard(std::slice::from_ref(&cl), price, 3.0).unwrap();
            let eta: Vec<f64> = PiecewiseReward::uniform_knots(6);
            let b =
                PiecewiseReward::new(eta, vec![4.0, 3.0, 1.0, 0.2, -0.5, -2.0], 4.0).unwrap();
            let eq = equilibrium_closed_form(&b, price, &cl, 3.0, &grids).unwrap();
            let total = GeneralReward::affine(&b, price);
            let resp = best_response(&total, &eq.density, &cl, 3.0).unwrap();
            let d = wasserstein1(
                &resp.to_quantiles(&grids.ranks).unwrap(),
                &eq.quantile,
            )
            .unwrap();
            assert!(d < 1e-6, "fixed-point residual {d}");
        }
    }

    #[test]
    fn fixed_point_zero_reward_converges_immediately() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.0, 3.0).unwrap();
        let zero = GeneralReward::purely_ranked(&PiecewiseReward::constant(0.0));
        let out = fixed_point_equilibrium(
            &zero,
            &cl,
            3.0,
            &grids,
            &FixedPointOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.trace.len(), 1);
        assert!(out.trace[0] < 1e-9, "trace {:?}", out.trace);
    }

    #[test]
    fn fixed_point_reaches_closed_form() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let eta: Vec<f64> = PiecewiseReward::uniform_knots(5);
        let b = PiecewiseReward::new(eta, vec![3.0, 2.0, 1.0, 0.0, -1.0], 3.0).unwrap();
        let eq = equilibrium_closed_form(&b, 0.17, &cl, 3.0, &grids).unwrap();
        let total = GeneralReward::affine(&b, 0.17);
        let opts = FixedPointOptions {
            damping: Damping::Power(1),
            eps: 1e-7,
            max_iterations: 200,
        };
        let out = fixed_point_equilibrium(&total, &cl, 3.0, &grids, &opts).unwrap();
        assert!(out.converged, "trace tail {:?}", &out.trace[out.trace.len().saturating_sub(3)..]);
        let d = wasserstein1(
            &out.density.to_quantiles(&grids.ranks).unwrap(),
            &eq.quantile,
        )
        .unwrap();
        assert!(d < 1e-4, "distance to closed form {d}");
    }

    #[test]
    fn reward_recovery_of_price_incentive_distribution_is_constant() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let mu = ClusterParams::with_constant_cost(17.898, 0.6, 2.5, 1.0)
            .unwrap()
            .nominal_density(3.0, &grids.xs)
            .unwrap();
        let pi = price_incentive(&cl, 0.17, 3.0).unwrap();
        let rec = reward_from_distribution(
            &mu,
            &cl,
            0.17,
            3.0,
            RewardLevel::Constant(pi.v_pi),
            &grids.ranks,
        )
        .unwrap();
        // with C = V_pi the price-incentive law needs no shaped reward
        for &v in rec.reward.values() {
            assert!(v.abs() < 2e-3, "expected ~0, got {v}");
        }
    }

    #[test]
    fn reward_recovery_round_trip() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let mu = ClusterParams::with_constant_cost(16.0, 0.6, 2.5, 1.0)
            .unwrap()
            .nominal_density(3.0, &grids.xs)
            .unwrap();
        let pi = price_incentive(&cl, 0.17, 3.0).unwrap();
        let rec = reward_from_distribution(
            &mu,
            &cl,
            0.17,
            3.0,
            RewardLevel::Constant(pi.v_pi),
            &grids.ranks,
        )
        .unwrap();
        let eq = equilibrium_closed_form(&rec.reward, 0.17, &cl, 3.0, &grids).unwrap();
        let d = wasserstein1(&eq.quantile, &mu.to_quantiles(&grids.ranks).unwrap()).unwrap();
        assert!(d < 1e-3, "round-trip W1 {d}");
        assert!((eq.mean - 16.0).abs() < 1e-3);
        // the constant equals the consumer value it produces
        assert!((eq.value - pi.v_pi).abs() < 1e-3);
    }

    #[test]
    fn reward_recovery_budget_bounds() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        let mu = ClusterParams::with_constant_cost(16.0, 0.6, 2.5, 1.0)
            .unwrap()
            .nominal_density(3.0, &grids.xs)
            .unwrap();
        let rec = reward_from_distribution(
            &mu,
            &cl,
            0.17,
            3.0,
            RewardLevel::Budget(100.0),
            &grids.ranks,
        )
        .unwrap();
        let (lo, hi) = rec.c_bounds.unwrap();
        let pi = price_incentive(&cl, 0.17, 3.0).unwrap();
        assert_eq!(lo, pi.v_pi);
        assert!(hi > lo);
        assert_eq!(rec.c_used, lo);
        // infeasible budget rejected
        assert!(reward_from_distribution(
            &mu,
            &cl,
            0.17,
            3.0,
            RewardLevel::Budget(-100.0),
            &grids.ranks,
        )
        .is_err());
    }

    #[test]
    fn reward_recovery_rejects_unattainable_target() {
        let cl = cluster1();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
        // nominal with p > 0: the profile reduces to p q(r), strictly increasing
        let mu = cl.nominal_density(3.0, &grids.xs).unwrap();
        let err = reward_from_distribution(
            &mu,
            &cl,
            0.17,
            3.0,
            RewardLevel::Constant(0.0),
            &grids.ranks,
        );
        assert!(matches!(err, Err(Error::Unattainable(_))), "{err:?}");
    }

    #[test]
    fn distribution_objective_examples() {
        let cl = cluster1();
        let market = table1_market();
        let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();

        let mu_pi = ClusterParams::with_constant_cost(17.898, 0.6, 2.5, 1.0)
            .unwrap()
            .nominal_density(3.0, &grids.xs)
            .unwrap();
        let obj = distribution_objective(&[mu_pi], &[cl.clone()], &market).unwrap();
        assert!((obj.value - (-31.6759)).abs() < 1e-3, "value {}", obj.value);

        let mu_star = ClusterParams::with_constant_cost(15.9910714285714, 0.6, 2.5, 1.0)
            .unwrap()
            .nominal_density(3.0, &grids.xs)
            .unwrap();
        let obj = distribution_objective(&[mu_star], &[cl.clone()], &market).unwrap();
        assert!((obj.value - (-28.2819)).abs() < 1e-3, "value {}", obj.value);

        // nominal target, free market: everything vanishes
        let free = MarketParams::new(3.0, 0.0, 0.0, SavingsFunction::quadratic(0.0, 0.0, 0.0))
            .unwrap();
        let nominal = cl.nominal_density(3.0, &grids.xs).unwrap();
        let obj = distribution_objective(&[nominal], &[cl], &free).unwrap();
        assert!(obj.value.abs() < 1e-6, "value {}", obj.value);
    }
}
