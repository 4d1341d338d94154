//! Best response under a time-dependent effort cost `c(t)`: backward
//! explicit finite differences for the value function
//! `u_t + u_x^2 / (4 c(t)) + (sigma^2 / 2) u_xx = 0`, `u(T, .) = payoff`,
//! followed by a forward Kolmogorov sweep in flux form with the feedback
//! drift `a*(t,x) = u_x / (2 c(t))` from an initial (mollified) Dirac at
//! the nominal consumption. With a constant cost profile the terminal
//! density degenerates to the closed-form exponential tilt, which serves
//! as the oracle for the scheme.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grids::{interp_clamped, trapezoid, DensityGrid};
use crate::mfg::ClusterParams;
use crate::numerics::gaussian_pdf;
use crate::scalar::Real;

/// Bounded effort-cost profile `t -> c(t)` on `[0, T]`.
#[derive(Clone)]
pub struct CostProfile<R = f64> {
    eval: Arc<dyn Fn(R) -> R + Send + Sync>,
    c_lo: R,
    c_hi: R,
}

impl<R: Real> CostProfile<R> {
    pub fn constant(c: R) -> Result<Self> {
        if !(c > R::zero()) {
            return Err(Error::Domain(format!("cost must be > 0, got {c}")));
        }
        Ok(Self { eval: Arc::new(move |_| c), c_lo: c, c_hi: c })
    }

    /// Linear profile `c(t) = a + b t`, validated over `[0, horizon]`.
    pub fn linear(a: R, b: R, horizon: R) -> Result<Self> {
        let end = a + b * horizon;
        let lo = a.min(end);
        let hi = a.max(end);
        if !(lo > R::zero()) {
            return Err(Error::Domain(format!(
                "linear cost profile must stay positive on [0, {horizon}], reaches {lo}"
            )));
        }
        Ok(Self { eval: Arc::new(move |t| a + b * t), c_lo: lo, c_hi: hi })
    }

    pub fn custom(
        eval: impl Fn(R) -> R + Send + Sync + 'static,
        c_lo: R,
        c_hi: R,
    ) -> Result<Self> {
        let p = Self { eval: Arc::new(eval), c_lo, c_hi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_lo > R::zero() && self.c_hi >= self.c_lo) {
            return Err(Error::Invariant(format!(
                "cost bounds must satisfy 0 < c_lo <= c_hi, got ({}, {})",
                self.c_lo, self.c_hi
            )));
        }
        Ok(())
    }

    pub fn at(&self, t: R) -> R {
        (self.eval)(t)
    }

    pub fn lower_bound(&self) -> R {
        self.c_lo
    }

    pub fn upper_bound(&self) -> R {
        self.c_hi
    }
}

impl<R: std::fmt::Debug> std::fmt::Debug for CostProfile<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostProfile")
            .field("c_lo", &self.c_lo)
            .field("c_hi", &self.c_hi)
            .finish()
    }
}

/// Feedback control sampled on a time grid x consumption grid,
/// bilinearly interpolated (clamped at the edges).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlField<R = f64> {
    times: Vec<R>,
    xs: Vec<R>,
    /// Row-major, time-major: `values[t_index * xs.len() + x_index]`.
    values: Vec<R>,
}

impl<R: Real> ControlField<R> {
    pub fn new(times: Vec<R>, xs: Vec<R>, values: Vec<R>) -> Result<Self> {
        if times.is_empty() || xs.len() < 2 {
            return Err(Error::Invariant("control field needs times and a grid".into()));
        }
        if values.len() != times.len() * xs.len() {
            return Err(Error::Invariant("control field dimensions mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("control field must be finite".into()));
        }
        Ok(Self { times, xs, values })
    }

    /// Constant-in-time field from a single row.
    pub fn stationary(xs: Vec<R>, row: Vec<R>, horizon: R) -> Result<Self> {
        let times = vec![R::zero(), horizon];
        let mut values = row.clone();
        values.extend_from_slice(&row);
        Self::new(times, xs, values)
    }

    pub fn times(&self) -> &[R] {
        &self.times
    }

    pub fn xs(&self) -> &[R] {
        &self.xs
    }

    pub fn row(&self, t_index: usize) -> &[R] {
        let n = self.xs.len();
        &self.values[t_index * n..(t_index + 1) * n]
    }

    pub fn max_abs(&self) -> R {
        self.values.iter().fold(R::zero(), |a, v| a.max(v.abs()))
    }

    /// Bilinear interpolation; time and space are clamped to the grid, and
    /// out-of-grid clamping in space is what the simulation counts as a
    /// clamp event.
    pub fn at(&self, t: R, x: R) -> R {
        let row = |ti: usize| self.row(ti);
        if self.times.len() == 1 {
            return interp_clamped(&self.xs, row(0), x);
        }
        let t = t.min(*self.times.last().unwrap()).max(self.times[0]);
        let ti = crate::grids::bracket(&self.times, t);
        let w = (t - self.times[ti]) / (self.times[ti + 1] - self.times[ti]);
        let lo = interp_clamped(&self.xs, row(ti), x);
        let hi = interp_clamped(&self.xs, row(ti + 1), x);
        lo + (hi - lo) * w
    }

    /// CSV export with columns `t,x,a_star`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,a_star\n");
        for (ti, &t) in self.times.iter().enumerate() {
            for (xi, &x) in self.xs.iter().enumerate() {
                out.push_str(&format!(
                    "{:.16e},{:.16e},{:.16e}\n",
                    t.as_f64(),
                    x.as_f64(),
                    self.values[ti * self.xs.len() + xi].as_f64()
                ));
            }
        }
        out
    }
}

/// Grid configuration of the solver.
#[derive(Clone, Debug)]
pub struct HjbConfig<R = f64> {
    /// Uniform consumption grid.
    pub xs: Vec<R>,
    /// Number of time steps; `None` picks the largest stable step times
    /// `cfl_safety`.
    pub n_time_steps: Option<usize>,
    pub cfl_safety: R,
    /// Number of stored control slices (time resolution of the returned
    /// field and of the forward drift).
    pub control_slices: usize,
    /// Width of the mollified initial Dirac, in grid cells.
    pub mollify_cells: R,
}

impl<R: Real> HjbConfig<R> {
    /// Default grid for one cluster: 1201 points spanning the nominal mean
    /// padded by 8 sigma sqrt(T) and the price shift.
    pub fn default_for(cl: &ClusterParams<R>, price: R, horizon: R) -> Result<Self> {
        let grids = crate::mfg::Grids::with_sizes(
            std::slice::from_ref(cl),
            price,
            horizon,
            3,
            1201,
            R::of(8.0),
        )?;
        Ok(Self {
            xs: grids.xs,
            n_time_steps: None,
            cfl_safety: R::of(0.9),
            control_slices: 513,
            mollify_cells: R::of(2.0),
        })
    }

    pub fn refined(&self) -> Self {
        let n = self.xs.len();
        let lo = self.xs[0];
        let hi = *self.xs.last().unwrap();
        Self {
            xs: crate::grids::linspace(lo, hi, 2 * (n - 1) + 1),
            n_time_steps: self.n_time_steps.map(|nt| 4 * nt),
            cfl_safety: self.cfl_safety,
            control_slices: self.control_slices,
            mollify_cells: self.mollify_cells,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HjbSolution<R = f64> {
    pub terminal: DensityGrid<R>,
    pub control: ControlField<R>,
    /// `u(0, x_nom)`: the consumer value of the control problem.
    pub value_at_origin: R,
    /// |mass - 1| of the terminal density before normalization.
    pub mass_defect: R,
    /// Total negative mass clipped during the forward sweep.
    pub clipped_mass: R,
    pub time_steps: usize,
}

/// Solves the consumer's best response for a bounded terminal payoff and a
/// time-dependent quadratic effort cost.
pub fn solve_best_response_timedep<R: Real>(
    payoff: impl Fn(R) -> R,
    profile: &CostProfile<R>,
    cl: &ClusterParams<R>,
    horizon: R,
    cfg: &HjbConfig<R>,
) -> Result<HjbSolution<R>> {
    profile.validate()?;
    let xs = &cfg.xs;
    let nx = xs.len();
    if nx < 5 {
        return Err(Error::Config("hjb grid needs at least 5 points".into()));
    }
    let dx = xs[1] - xs[0];
    for w in xs.windows(2) {
        if ((w[1] - w[0]) - dx).abs() > R::of(1e-9) * dx {
            return Err(Error::Config("hjb grid must be uniform".into()));
        }
    }
    let sigma2 = cl.sigma * cl.sigma;
    let dt_stable = dx * dx / sigma2;
    let nt = match cfg.n_time_steps {
        Some(nt) => {
            let dt = horizon / R::of_usize(nt);
            if dt > dt_stable {
                let needed = (horizon / dt_stable).as_f64().ceil() as usize;
                return Err(Error::Config(format!(
                    "explicit scheme unstable: dt = {dt} exceeds dx^2/sigma^2 = {dt_stable}; use >= {needed} steps"
                )));
            }
            nt
        }
        None => (horizon / (cfg.cfl_safety * dt_stable)).as_f64().ceil() as usize,
    };
    let dt = horizon / R::of_usize(nt);

    let mut u: Vec<R> = xs.iter().map(|&x| payoff(x)).collect();
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("terminal payoff must be bounded on the grid".into()));
    }

    // control slices at (roughly) evenly spaced step indices, always
    // including the first and last step
    let slices = cfg.control_slices.clamp(2, nt + 1);
    let slice_steps: Vec<usize> = (0..slices)
        .map(|i| (i as f64 * nt as f64 / (slices - 1) as f64).round() as usize)
        .collect();
    let mut slice_rows: Vec<Vec<R>> = vec![Vec::new(); slices];
    let mut slice_times: Vec<R> = vec![R::zero(); slices];
    let record = |u: &[R], step: usize, rows: &mut Vec<Vec<R>>, times: &mut Vec<R>| {
        for (k, &s) in slice_steps.iter().enumerate() {
            if s == step && rows[k].is_empty() {
                let t = dt * R::of_usize(step);
                times[k] = t;
                rows[k] = drift_row(u, dx, profile.at(t));
            }
        }
    };
    record(&u, nt, &mut slice_rows, &mut slice_times);

    let half = R::of(0.5);
    let quarter_diff = sigma2 * half;
    let mut scratch = vec![R::zero(); nx];
    for step in (0..nt).rev() {
        let t_mid = dt * (R::of_usize(step) + half);
        let c = profile.at(t_mid);
        let inv_4c = R::one() / (R::of(4.0) * c);
        for j in 0..nx {
            let ux = if j == 0 {
                (u[1] - u[0]) / dx
            } else if j == nx - 1 {
                (u[nx - 1] - u[nx - 2]) / dx
            } else {
                (u[j + 1] - u[j - 1]) / (R::of(2.0) * dx)
            };
            let uxx = if j == 0 || j == nx - 1 {
                R::zero()
            } else {
                (u[j + 1] - R::of(2.0) * u[j] + u[j - 1]) / (dx * dx)
            };
            scratch[j] = u[j] + dt * (ux * ux * inv_4c + quarter_diff * uxx);
        }
        std::mem::swap(&mut u, &mut scratch);
        record(&u, step, &mut slice_rows, &mut slice_times);
    }
    let value_at_origin = interp_clamped(xs, &u, cl.x_nom);

    let control_values: Vec<R> = slice_rows.iter().flat_map(|r| r.iter().copied()).collect();
    let control = ControlField::new(slice_times.clone(), xs.clone(), control_values)?;

    // secondary CFL including advection
    let amax = control.max_abs();
    if dt * (sigma2 / (dx * dx) + amax / dx) > R::one() {
        let needed = (horizon * (sigma2 / (dx * dx) + amax / dx)).as_f64().ceil() as usize;
        return Err(Error::Config(format!(
            "advective CFL violated (max |a| = {amax}); use >= {needed} steps"
        )));
    }

    // forward Kolmogorov from the mollified Dirac
    let sd0 = cfg.mollify_cells * dx;
    let mut f: Vec<R> = xs.iter().map(|&x| gaussian_pdf(x, cl.x_nom, sd0)).collect();
    let mass0 = trapezoid(xs, &f);
    for v in &mut f {
        *v = *v / mass0;
    }
    let diff = sigma2 * half;
    let mut clipped = R::zero();
    let mut flux = vec![R::zero(); nx + 1];
    let mut slice_cursor = 0usize;
    for step in 0..nt {
        let t = dt * R::of_usize(step);
        while slice_cursor + 2 < slices && slice_times[slice_cursor + 1] <= t {
            slice_cursor += 1;
        }
        let t0 = slice_times[slice_cursor];
        let t1 = slice_times[slice_cursor + 1];
        let w = if t1 > t0 { ((t - t0) / (t1 - t0)).min(R::one()).max(R::zero()) } else { R::zero() };
        let row0 = &slice_rows[slice_cursor];
        let row1 = &slice_rows[slice_cursor + 1];
        // boundary fluxes stay zero: mass is conserved exactly
        for j in 0..nx - 1 {
            let a_face = half
                * ((row0[j] + (row1[j] - row0[j]) * w)
                    + (row0[j + 1] + (row1[j + 1] - row0[j + 1]) * w));
            // hybrid flux: central when the cell Peclet number allows it,
            // upwind-weighted beyond
            let pe = (a_face * dx / diff).abs();
            let theta = if pe > R::of(2.0) { R::one() - R::of(2.0) / pe } else { R::zero() };
            let central = half * (f[j] + f[j + 1]);
            let upwind = if a_face >= R::zero() { f[j] } else { f[j + 1] };
            let advected = theta * upwind + (R::one() - theta) * central;
            flux[j + 1] = a_face * advected - diff * (f[j + 1] - f[j]) / dx;
        }
        for j in 0..nx {
            f[j] = f[j] - dt / dx * (flux[j + 1] - flux[j]);
            if f[j] < R::zero() {
                clipped += -f[j];
                f[j] = R::zero();
            }
        }
    }
    let mass = trapezoid(xs, &f);
    let mass_defect = (mass - R::one()).abs();
    if mass_defect > R::of(1e-4) {
        return Err(Error::NonConverged(format!(
            "forward sweep lost mass: defect {mass_defect}"
        )));
    }
    let terminal = DensityGrid::normalized(xs.clone(), f)?;
    Ok(HjbSolution {
        terminal,
        control,
        value_at_origin,
        mass_defect,
        clipped_mass: clipped * dx,
        time_steps: nt,
    })
}

fn drift_row<R: Real>(u: &[R], dx: R, c: R) -> Vec<R> {
    let nx = u.len();
    let inv_2c = R::one() / (R::of(2.0) * c);
    let mut row = vec![R::zero(); nx];
    for j in 0..nx {
        let ux = if j == 0 {
            (u[1] - u[0]) / dx
        } else if j == nx - 1 {
            (u[nx - 1] - u[nx - 2]) / dx
        } else {
            (u[j + 1] - u[j - 1]) / (R::of(2.0) * dx)
        };
        row[j] = ux * inv_2c;
    }
    row
}
