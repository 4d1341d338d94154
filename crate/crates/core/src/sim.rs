//! N-player Euler-Maruyama simulation under the mean-field feedback
//! control, with effort-cost accounting, empirical ranks, and common random
//! numbers across scenarios: per-agent noise streams are keyed by
//! `(seed, cluster, agent)` so identical Brownian increments drive every
//! scenario and trajectory differences isolate the control.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hjb::ControlField;
use crate::mfg::ClusterParams;
use crate::numerics::normal_pdf;
use crate::scalar::Real;

/// One simulation scenario: a name and one optional control field per
/// cluster (`None` = zero effort).
#[derive(Clone, Debug)]
pub struct Scenario<R = f64> {
    pub name: String,
    pub controls: Vec<Option<ControlField<R>>>,
}

impl<R: Real> Scenario<R> {
    pub fn zero_control(name: impl Into<String>, n_clusters: usize) -> Self {
        Self { name: name.into(), controls: vec![None; n_clusters] }
    }

    pub fn with_controls(name: impl Into<String>, controls: Vec<Option<ControlField<R>>>) -> Self {
        Self { name: name.into(), controls }
    }
}

/// Simulated trajectories of one scenario.
#[derive(Clone, Debug)]
pub struct TrajectoryBundle<R = f64> {
    pub scenario: String,
    /// Time grid spanning `[0, T]`, `n_steps + 1` points.
    pub times: Vec<R>,
    /// Per-agent paths, agent-major; `paths[a * times.len() + t]`.
    pub paths: Vec<R>,
    /// Per-agent cumulative effort cost, same layout; non-decreasing rows
    /// starting at 0.
    pub costs: Vec<R>,
    pub cluster_of: Vec<u32>,
    /// Times an agent left the control grid and the control was clamped.
    pub clamp_events: u64,
    pub seed: u64,
}

impl<R: Real> TrajectoryBundle<R> {
    pub fn n_agents(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn path(&self, agent: usize) -> &[R] {
        let n = self.times.len();
        &self.paths[agent * n..(agent + 1) * n]
    }

    pub fn cost_path(&self, agent: usize) -> &[R] {
        let n = self.times.len();
        &self.costs[agent * n..(agent + 1) * n]
    }

    pub fn terminal_values(&self, cluster: Option<u32>) -> Vec<R> {
        let n = self.times.len();
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|(_, &c)| cluster.map_or(true, |want| c == want))
            .map(|(a, _)| self.paths[a * n + n - 1])
            .collect()
    }

    pub fn terminal_costs(&self, cluster: Option<u32>) -> Vec<R> {
        let n = self.times.len();
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|(_, &c)| cluster.map_or(true, |want| c == want))
            .map(|(a, _)| self.costs[a * n + n - 1])
            .collect()
    }
}

/// Standard-normal increments of one agent's Brownian driver. The stream
/// is a pure function of `(seed, cluster, agent)`, so every scenario sees
/// bitwise-identical noise.
pub fn brownian_increments<R: Real>(
    seed: u64,
    cluster: u32,
    agent: u64,
    n_steps: usize,
) -> Vec<R>
where
    StandardNormal: Distribution<R>,
{
    let mut rng = agent_rng(seed, cluster, agent);
    (0..n_steps).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn agent_rng(seed: u64, cluster: u32, agent: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((cluster as u64) << 40) ^ agent);
    rng
}

struct AgentTrace<R> {
    path: Vec<R>,
    cost: Vec<R>,
    clamps: u64,
}

fn simulate_agent<R: Real>(
    cl: &ClusterParams<R>,
    control: Option<&ControlField<R>>,
    horizon: R,
    n_steps: usize,
    noise: &[R],
) -> AgentTrace<R> {
    let dt = horizon / R::of_usize(n_steps);
    let sq_dt = dt.sqrt();
    let mut x = cl.x_nom;
    let mut cost = R::zero();
    let mut path = Vec::with_capacity(n_steps + 1);
    let mut costs = Vec::with_capacity(n_steps + 1);
    let mut clamps = 0u64;
    path.push(x);
    costs.push(cost);
    for (step, &xi) in noise.iter().enumerate() {
        let t = dt * R::of_usize(step);
        let a = match control {
            None => R::zero(),
            Some(field) => {
                let xs = field.xs();
                if x < xs[0] || x > *xs.last().unwrap() {
                    clamps += 1;
                }
                field.at(t, x)
            }
        };
        cost += cl.cost.at(t) * a * a * dt;
        x = x + a * dt + cl.sigma * sq_dt * xi;
        path.push(x);
        costs.push(cost);
    }
    AgentTrace { path, cost: costs, clamps }
}

/// Simulates every scenario over the same agent population with common
/// random numbers. `n_agents[k]` agents are drawn from cluster `k`;
/// scenarios must carry one control slot per cluster.
pub fn simulate_population<R: Real>(
    scenarios: &[Scenario<R>],
    clusters: &[ClusterParams<R>],
    n_agents: &[usize],
    horizon: R,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<TrajectoryBundle<R>>>
where
    StandardNormal: Distribution<R>,
{
    if n_steps == 0 {
        return Err(Error::Config("simulation needs at least one step".into()));
    }
    if n_agents.len() != clusters.len() {
        return Err(Error::Usage("one agent count per cluster required".into()));
    }
    for sc in scenarios {
        if sc.controls.len() != clusters.len() {
            return Err(Error::Usage(format!(
                "scenario '{}' has {} control slots for {} clusters",
                sc.name,
                sc.controls.len(),
                clusters.len()
            )));
        }
    }
    let dt = horizon / R::of_usize(n_steps);
    let times: Vec<R> = (0..=n_steps).map(|i| dt * R::of_usize(i)).collect();
    let agents: Vec<(u32, u64)> = clusters
        .iter()
        .enumerate()
        .flat_map(|(k, _)| (0..n_agents[k] as u64).map(move |i| (k as u32, i)))
        .collect();

    let mut bundles = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let traces: Vec<AgentTrace<R>> = agents
            .par_iter()
            .map(|&(k, i)| {
                let noise: Vec<R> = brownian_increments(seed, k, i, n_steps);
                simulate_agent(
                    &clusters[k as usize],
                    sc.controls[k as usize].as_ref(),
                    horizon,
                    n_steps,
                    &noise,
                )
            })
            .collect();
        let mut paths = Vec::with_capacity(agents.len() * times.len());
        let mut costs = Vec::with_capacity(agents.len() * times.len());
        let mut clamp_events = 0u64;
        for tr in &traces {
            paths.extend_from_slice(&tr.path);
            costs.extend_from_slice(&tr.cost);
            clamp_events += tr.clamps;
        }
        bundles.push(TrajectoryBundle {
            scenario: sc.name.clone(),
            times: times.clone(),
            paths,
            costs,
            cluster_of: agents.iter().map(|&(k, _)| k).collect(),
            clamp_events,
            seed,
        });
    }
    Ok(bundles)
}

/// Terminal-only samples for large Monte-Carlo runs (no path storage).
#[derive(Clone, Debug)]
pub struct TerminalSample<R = f64> {
    pub scenario: String,
    pub terminal: Vec<R>,
    pub terminal_cost: Vec<R>,
    pub cluster_of: Vec<u32>,
    pub clamp_events: u64,
}

pub fn simulate_terminals<R: Real>(
    scenarios: &[Scenario<R>],
    clusters: &[ClusterParams<R>],
    n_agents: &[usize],
    horizon: R,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<TerminalSample<R>>>
where
    StandardNormal: Distribution<R>,
{
    if n_steps == 0 {
        return Err(Error::Config("simulation needs at least one step".into()));
    }
    if n_agents.len() != clusters.len() {
        return Err(Error::Usage("one agent count per cluster required".into()));
    }
    let agents: Vec<(u32, u64)> = clusters
        .iter()
        .enumerate()
        .flat_map(|(k, _)| (0..n_agents[k] as u64).map(move |i| (k as u32, i)))
        .collect();
    let mut out = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        if sc.controls.len() != clusters.len() {
            return Err(Error::Usage(format!(
                "scenario '{}' has {} control slots for {} clusters",
                sc.name,
                sc.controls.len(),
                clusters.len()
            )));
        }
        let rows: Vec<(R, R, u64)> = agents
            .par_iter()
            .map(|&(k, i)| {
                let noise: Vec<R> = brownian_increments(seed, k, i, n_steps);
                let tr = simulate_agent(
                    &clusters[k as usize],
                    sc.controls[k as usize].as_ref(),
                    horizon,
                    n_steps,
                    &noise,
                );
                (*tr.path.last().unwrap(), *tr.cost.last().unwrap(), tr.clamps)
            })
            .collect();
        out.push(TerminalSample {
            scenario: sc.name.clone(),
            terminal: rows.iter().map(|r| r.0).collect(),
            terminal_cost: rows.iter().map(|r| r.1).collect(),
            cluster_of: agents.iter().map(|&(k, _)| k).collect(),
            clamp_events: rows.iter().map(|r| r.2).sum(),
        });
    }
    Ok(out)
}

/// Count-based empirical ranks: `rank_i = #{j : X_j <= X_i} / N`, so the
/// worst performer (highest consumption) has rank 1 and ties share the
/// count of their group.
pub fn empirical_rank<R: Real>(values: &[R]) -> Vec<R> {
    let n = values.len();
    assert!(n >= 1, "empirical_rank needs at least one value");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![R::zero(); n];
    let nf = R::of_usize(n);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = R::of_usize(end + 1) / nf;
        for &idx in &order[start..=end] {
            ranks[idx] = rank;
        }
        start = end + 1;
    }
    ranks
}

/// Monte-Carlo estimate of the consumer value `E[payoff(X_T) - ∫ c a^2]`
/// with its standard error.
pub fn monte_carlo_value<R: Real>(
    terminal: &[R],
    terminal_cost: &[R],
    payoff: impl Fn(R) -> R,
) -> (R, R) {
    assert_eq!(terminal.len(), terminal_cost.len());
    let n = terminal.len();
    let nf = R::of_usize(n);
    let samples: Vec<R> = terminal
        .iter()
        .zip(terminal_cost.iter())
        .map(|(&x, &c)| payoff(x) - c)
        .collect();
    let mean: R = samples.iter().copied().sum::<R>() / nf;
    if n < 2 {
        return (mean, R::infinity());
    }
    let var: R = samples.iter().map(|&s| (s - mean) * (s - mean)).sum::<R>()
        / (nf - R::one());
    (mean, (var / nf).sqrt())
}

/// Feedback control consistent with the exponential-tilt best response:
/// `a*(t,x) = sigma^2 ∂_x ln w(t,x)` with
/// `w(t,x) = E[exp(payoff(x + sigma W_{T-t}) / (2 c sigma^2))]`, computed
/// by Gaussian-kernel convolution in log space on the consumption grid.
/// The kernel bandwidth `sigma sqrt(T-t)` is floored at
/// `sigma sqrt(min_lookahead)` to avoid the degenerate kernel at `t = T`.
pub fn feedback_control<R: Real>(
    payoff: impl Fn(R) -> R,
    cl: &ClusterParams<R>,
    horizon: R,
    xs: &[R],
    n_slices: usize,
    min_lookahead: R,
) -> Result<ControlField<R>> {
    if xs.len() < 5 {
        return Err(Error::Config("control grid needs at least 5 points".into()));
    }
    if n_slices < 2 {
        return Err(Error::Config("need at least 2 control slices".into()));
    }
    if !(min_lookahead > R::zero()) {
        return Err(Error::Config("bandwidth floor must be > 0".into()));
    }
    let kappa = cl.kappa()?;
    let nx = xs.len();
    let dx = xs[1] - xs[0];
    for w in xs.windows(2) {
        if ((w[1] - w[0]) - dx).abs() > R::of(1e-9) * dx {
            return Err(Error::Config("control grid must be uniform".into()));
        }
    }
    let s_max = cl.sigma * horizon.sqrt();
    let radius_max = ((R::of(8.0) * s_max / dx).as_f64().ceil() as usize).max(2);

    // exponent table padded with linear extensions so edge columns see a
    // full symmetric kernel (exact for affine payoffs)
    let mut expo = vec![R::zero(); nx + 2 * radius_max];
    for (j, &x) in xs.iter().enumerate() {
        let e = payoff(x) / kappa;
        if !e.is_finite() {
            return Err(Error::Domain("payoff must be bounded on the control grid".into()));
        }
        expo[radius_max + j] = e;
    }
    let slope_lo = (expo[radius_max + 1] - expo[radius_max]) / dx;
    let slope_hi = (expo[radius_max + nx - 1] - expo[radius_max + nx - 2]) / dx;
    for k in 1..=radius_max {
        expo[radius_max - k] = expo[radius_max] - slope_lo * dx * R::of_usize(k);
        expo[radius_max + nx - 1 + k] = expo[radius_max + nx - 1] + slope_hi * dx * R::of_usize(k);
    }
    let global_max = expo.iter().fold(R::neg_infinity(), |a, &b| a.max(b));

    let times: Vec<R> = crate::grids::linspace(R::zero(), horizon, n_slices);
    let sigma2 = cl.sigma * cl.sigma;
    let rows: Vec<Vec<R>> = times
        .par_iter()
        .map(|&t| {
            let lookahead = (horizon - t).max(min_lookahead);
            let s = cl.sigma * lookahead.sqrt();
            let radius = (((R::of(8.0) * s / dx).as_f64().ceil() as usize).max(2)).min(radius_max);
            let mut kernel = Vec::with_capacity(2 * radius + 1);
            let mut ksum = R::zero();
            for k in 0..=2 * radius {
                let z = (R::of_usize(k) - R::of_usize(radius)) * dx / s;
                let w = normal_pdf(z);
                ksum += w;
                kernel.push(w);
            }
            for w in &mut kernel {
                *w = *w / ksum;
            }
            let mut ln_w = vec![R::zero(); nx];
            for j in 0..nx {
                let base = radius_max + j - radius;
                let mut acc = R::zero();
                for (k, &kw) in kernel.iter().enumerate() {
                    acc += kw * (expo[base + k] - global_max).exp();
                }
                ln_w[j] = acc.ln() + global_max;
            }
            let mut row = vec![R::zero(); nx];
            for j in 0..nx {
                let d = if j == 0 {
                    (ln_w[1] - ln_w[0]) / dx
                } else if j == nx - 1 {
                    (ln_w[nx - 1] - ln_w[nx - 2]) / dx
                } else {
                    (ln_w[j + 1] - ln_w[j - 1]) / (R::of(2.0) * dx)
                };
                row[j] = sigma2 * d;
            }
            row
        })
        .collect();
    let values: Vec<R> = rows.into_iter().flatten().collect();
    ControlField::new(times, xs.to_vec(), values)
}

/// CSV export of trajectory bundles: one file per run with columns
/// `t,agent_id,cluster,scenario,x,cum_effort_cost`.
pub fn trajectories_to_csv<R: Real>(bundles: &[TrajectoryBundle<R>]) -> String {
    let mut out = String::from("t,agent_id,cluster,scenario,x,cum_effort_cost\n");
    for bundle in bundles {
        let nt = bundle.times.len();
        for agent in 0..bundle.n_agents() {
            for (ti, &t) in bundle.times.iter().enumerate() {
                out.push_str(&format!(
                    "{:.16e},{},{},{},{:.16e},{:.16e}\n",
                    t.as_f64(),
                    agent,
                    bundle.cluster_of[agent],
                    bundle.scenario,
                    bundle.paths[agent * nt + ti].as_f64(),
                    bundle.costs[agent * nt + ti].as_f64(),
                ));
            }
        }
    }
    out
}
