//! Self-contained covariance-matrix-adaptation evolution strategy, used as
//! the derivative-free maximizer behind the reward search. Standard
//! rank-mu weighted recombination with step-size and covariance path
//! adaptation; the search space is the fixed box `(-1, 1]^n` and sampled
//! points are folded back into the box by reflection before evaluation.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct SearchConfig<R = f64> {
    pub dimension: usize,
    /// Starting point, inside `(-1, 1]^n`.
    pub initial_point: Vec<R>,
    /// Initial step size `sigma_0`.
    pub initial_step: R,
    /// Population size per generation; default `4 + floor(3 ln n)`.
    pub population: Option<usize>,
    pub max_evaluations: usize,
    pub seed: u64,
}

impl<R: Real> SearchConfig<R> {
    pub fn new(dimension: usize, initial_step: R, max_evaluations: usize, seed: u64) -> Self {
        Self {
            dimension,
            initial_point: vec![R::one(); dimension],
            initial_step,
            population: None,
            max_evaluations,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::Config("search dimension must be >= 1".into()));
        }
        if self.initial_point.len() != self.dimension {
            return Err(Error::Config(format!(
                "initial point has {} components for dimension {}",
                self.initial_point.len(),
                self.dimension
            )));
        }
        for v in &self.initial_point {
            if !(*v > -R::one() && *v <= R::one()) {
                return Err(Error::Config(format!("initial component {v} outside (-1, 1]")));
            }
        }
        if !(self.initial_step > R::zero()) {
            return Err(Error::Config("initial step must be > 0".into()));
        }
        if self.max_evaluations == 0 {
            return Err(Error::Config("evaluation budget must be >= 1".into()));
        }
        if let Some(p) = self.population {
            if p < 2 {
                return Err(Error::Config("population must be >= 2".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationRecord<R = f64> {
    pub generation: usize,
    pub evaluations: usize,
    pub best_value: R,
    pub step_size: R,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome<R = f64> {
    pub best_point: Vec<R>,
    pub best_value: R,
    pub trace: Vec<GenerationRecord<R>>,
    pub evaluations: usize,
}

/// Folds a coordinate into the box `(-1, 1]` by reflection at the
/// boundaries (period-4 triangle wave); an exact hit on -1 is nudged inward.
pub fn mirror_into_box<R: Real>(z: R) -> R {
    let four = R::of(4.0);
    let one = R::one();
    if z > -one && z <= one {
        return z;
    }
    let mut t = (z + one) % four;
    if t < R::zero() {
        t += four;
    }
    let folded = if t <= R::of(2.0) { t } else { four - t };
    let v = folded - one;
    if v <= -one {
        -one + R::epsilon()
    } else {
        v
    }
}

/// Maximizes `objective` over the box `(-1, 1]^n`. Deterministic for a
/// fixed seed; candidates within a generation are evaluated in parallel
/// but ranked in sampling order, so the outcome does not depend on
/// scheduling. Non-finite objective values are treated as `-inf`
/// (candidate rejected, run continues).
pub fn run_search<R: Real>(
    objective: impl Fn(&[R]) -> R + Sync,
    cfg: &SearchConfig<R>,
) -> Result<SearchOutcome<R>>
where
    StandardNormal: Distribution<R>,
{
    cfg.validate()?;
    let n = cfg.dimension;
    let nf = R::of_usize(n);
    let lambda = cfg.population.unwrap_or(4 + (3.0 * (n as f64).ln()).floor() as usize);
    let mu = lambda / 2;

    // rank-mu recombination weights
    let mut weights: Vec<R> = (0..mu)
        .map(|i| R::of(((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln()))
        .collect();
    let wsum: R = weights.iter().copied().sum();
    for w in &mut weights {
        *w = *w / wsum;
    }
    let mu_eff = R::one() / weights.iter().map(|w| *w * *w).sum::<R>();

    let c_sigma = (mu_eff + R::of(2.0)) / (nf + mu_eff + R::of(5.0));
    let d_sigma = R::one()
        + R::of(2.0) * (((mu_eff - R::one()) / (nf + R::one())).sqrt() - R::one()).max(R::zero())
        + c_sigma;
    let c_c = (R::of(4.0) + mu_eff / nf) / (nf + R::of(4.0) + R::of(2.0) * mu_eff / nf);
    let c_1 = R::of(2.0) / ((nf + R::of(1.3)) * (nf + R::of(1.3)) + mu_eff);
    let c_mu = (R::one() - c_1).min(
        R::of(2.0) * (mu_eff - R::of(2.0) + R::one() / mu_eff)
            / ((nf + R::of(2.0)) * (nf + R::of(2.0)) + mu_eff),
    );
    let chi_n = nf.sqrt()
        * (R::one() - R::one() / (R::of(4.0) * nf)
            + R::one() / (R::of(21.0) * nf * nf));

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut mean = cfg.initial_point.clone();
    let mut sigma = cfg.initial_step;
    let mut cov = identity::<R>(n);
    let mut path_sigma = vec![R::zero(); n];
    let mut path_c = vec![R::zero(); n];

    // the initial point is evaluated first so the incumbent never falls
    // below objective(z0)
    let mut best_point = mean.clone();
    let mut best_value = sanitize(objective(&best_point));
    let mut evaluations = 1usize;
    let mut trace = vec![GenerationRecord {
        generation: 0,
        evaluations,
        best_value,
        step_size: sigma,
    }];

    let mut generation = 0usize;
    while evaluations < cfg.max_evaluations {
        generation += 1;
        let (eig_vecs, eig_sqrt) = eigen_decompose(&cov, n);

        // sample the generation (sequential draws keep the stream
        // deterministic), then evaluate concurrently
        let take = lambda.min(cfg.max_evaluations - evaluations);
        let mut raw: Vec<Vec<R>> = Vec::with_capacity(take);
        let mut displacements: Vec<Vec<R>> = Vec::with_capacity(take);
        for _ in 0..take {
            let z: Vec<R> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut y = vec![R::zero(); n];
            for (col, &zc) in z.iter().enumerate() {
                let scale = eig_sqrt[col] * zc;
                for row in 0..n {
                    y[row] += eig_vecs[row * n + col] * scale;
                }
            }
            let x: Vec<R> = mean.iter().zip(y.iter()).map(|(m, yi)| *m + sigma * *yi).collect();
            raw.push(x);
            displacements.push(y);
        }
        let boxed: Vec<Vec<R>> = raw
            .iter()
            .map(|x| x.iter().map(|&v| mirror_into_box(v)).collect())
            .collect();
        let fitness: Vec<R> = boxed
            .par_iter()
            .map(|x| sanitize(objective(x)))
            .collect();
        evaluations += take;
        for (x, &f) in boxed.iter().zip(fitness.iter()) {
            if f > best_value {
                best_value = f;
                best_point = x.clone();
            }
        }
        if take < lambda {
            // budget exhausted mid-generation: no strategy update
            trace.push(GenerationRecord { generation, evaluations, best_value, step_size: sigma });
            break;
        }

        // rank candidates (maximization: descending fitness, ties by index)
        let mut order: Vec<usize> = (0..lambda).collect();
        order.sort_by(|&a, &b| {
            fitness[b].partial_cmp(&fitness[a]).unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let mut y_w = vec![R::zero(); n];
        for (rank, &idx) in order.iter().take(mu).enumerate() {
            for (acc, &d) in y_w.iter_mut().zip(displacements[idx].iter()) {
                *acc += weights[rank] * d;
            }
        }
        for (m, &yw) in mean.iter_mut().zip(y_w.iter()) {
            *m += sigma * yw;
        }

        // C^{-1/2} y_w through the eigenbasis
        let mut c_inv_sqrt_y = vec![R::zero(); n];
        for col in 0..n {
            let mut proj = R::zero();
            for row in 0..n {
                proj += eig_vecs[row * n + col] * y_w[row];
            }
            let scaled = proj / eig_sqrt[col];
            for row in 0..n {
                c_inv_sqrt_y[row] += eig_vecs[row * n + col] * scaled;
            }
        }
        let decay = R::one() - c_sigma;
        let input = (c_sigma * (R::of(2.0) - c_sigma) * mu_eff).sqrt();
        for (p, &v) in path_sigma.iter_mut().zip(c_inv_sqrt_y.iter()) {
            *p = decay * *p + input * v;
        }
        let ps_norm = path_sigma.iter().map(|p| *p * *p).sum::<R>().sqrt();
        let unbias = (R::one()
            - (R::one() - c_sigma).powi(2 * generation as i32))
        .sqrt();
        let h_sigma = ps_norm / unbias
            < (R::of(1.4) + R::of(2.0) / (nf + R::one())) * chi_n;
        let h = if h_sigma { R::one() } else { R::zero() };

        let decay_c = R::one() - c_c;
        let input_c = (c_c * (R::of(2.0) - c_c) * mu_eff).sqrt();
        for (p, &v) in path_c.iter_mut().zip(y_w.iter()) {
            *p = decay_c * *p + h * input_c * v;
        }

        // covariance update: rank-1 + rank-mu
        let w_total: R = weights.iter().copied().sum();
        let base = R::one() - c_1 - c_mu * w_total;
        let stall = (R::one() - h) * c_c * (R::of(2.0) - c_c);
        for row in 0..n {
            for col in 0..=row {
                let mut v = base * cov[row * n + col]
                    + c_1 * (path_c[row] * path_c[col] + stall * cov[row * n + col]);
                for (rank, &idx) in order.iter().take(mu).enumerate() {
                    v += c_mu * weights[rank] * displacements[idx][row] * displacements[idx][col];
                }
                cov[row * n + col] = v;
                cov[col * n + row] = v;
            }
        }

        let arg = (c_sigma / d_sigma) * (ps_norm / chi_n - R::one());
        sigma = sigma * arg.min(R::one()).max(-R::one()).exp();

        trace.push(GenerationRecord { generation, evaluations, best_value, step_size: sigma });
    }

    Ok(SearchOutcome { best_point, best_value, trace, evaluations })
}

fn sanitize<R: Real>(f: R) -> R {
    if f.is_finite() {
        f
    } else {
        R::neg_infinity()
    }
}

fn identity<R: Real>(n: usize) -> Vec<R> {
    let mut m = vec![R::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = R::one();
    }
    m
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvector matrix (columns) and the square roots of the eigenvalues,
/// floored to keep the condition number bounded.
fn eigen_decompose<R: Real>(matrix: &[R], n: usize) -> (Vec<R>, Vec<R>) {
    let mut a = matrix.to_vec();
    let mut v = identity::<R>(n);
    let tol = R::of(1e-14);
    for _sweep in 0..40 {
        let mut off = R::zero();
        for r in 0..n {
            for c in (r + 1)..n {
                off += a[r * n + c].abs();
            }
        }
        let scale: R = (0..n).map(|i| a[i * n + i].abs()).sum();
        if off <= tol * (scale + R::of(1e-300)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * (a[p * n + p].abs() + a[q * n + q].abs() + R::of(1e-300)) {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (R::of(2.0) * apq);
                let t = {
                    let sign = if theta >= R::zero() { R::one() } else { -R::one() };
                    sign / (theta.abs() + (theta * theta + R::one()).sqrt())
                };
                let c = R::one() / (t * t + R::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut eigvals: Vec<R> = (0..n).map(|i| a[i * n + i]).collect();
    let max_ev = eigvals.iter().fold(R::of(1e-300), |m, &e| m.max(e));
    let floor = max_ev * R::of(1e-14);
    for e in &mut eigvals {
        *e = (*e).max(floor);
    }
    let sqrt_vals: Vec<R> = eigvals.iter().map(|e| e.sqrt()).collect();
    (v, sqrt_vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_folds_into_box() {
        assert_eq!(mirror_into_box(0.3f64), 0.3);
        assert_eq!(mirror_into_box(1.0f64), 1.0);
        assert!((mirror_into_box(1.2f64) - 0.8).abs() < 1e-15);
        assert!((mirror_into_box(-1.2f64) + 0.8).abs() < 1e-15);
        assert!((mirror_into_box(3.5f64) + 0.5).abs() < 1e-14);
        let v: f64 = mirror_into_box(-1.0);
        assert!(v > -1.0 && v <= 1.0);
        for i in 0..2000 {
            let z = -10.0 + i as f64 * 0.01;
            let m: f64 = mirror_into_box(z);
            assert!(m > -1.0 && m <= 1.0, "{z} -> {m}");
        }
    }

    #[test]
    fn eigen_of_diagonal() {
        let m: Vec<f64> = vec![4.0, 0.0, 0.0, 9.0];
        let (v, d) = eigen_decompose(&m, 2);
        let mut ds = d.clone();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ds[0] - 2.0).abs() < 1e-12);
        assert!((ds[1] - 3.0).abs() < 1e-12);
        // columns orthonormal
        let dot: f64 = v[0] * v[1] + v[2] * v[3];
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn sphere_is_solved() {
        let n = 20;
        let objective = |z: &[f64]| -> f64 {
            -z.iter().map(|zi| (zi - 0.3).powi(2)).sum::<f64>()
        };
        let cfg = SearchConfig::<f64> {
            dimension: n,
            initial_point: vec![1.0; n],
            initial_step: 0.3,
            population: None,
            max_evaluations: 10_000,
            seed: 42,
        };
        let out = run_search(objective, &cfg).unwrap();
        let dist = z_dist(&out.best_point, 0.3);
        assert!(dist < 1e-4, "distance to optimum {dist}");
        assert!(out.evaluations <= 10_000);
    }

    #[test]
    fn constant_objective_is_harmless() {
        let cfg = SearchConfig::<f64>::new(5, 0.05, 500, 1);
        let out = run_search(|_| 3.25, &cfg).unwrap();
        assert_eq!(out.best_value, 3.25);
    }

    #[test]
    fn non_finite_objective_rejected_not_fatal() {
        let cfg = SearchConfig::<f64>::new(4, 0.2, 2_000, 3);
        let out = run_search(
            |z: &[f64]| {
                let s: f64 = z.iter().sum();
                if s > 0.0 {
                    f64::NAN
                } else {
                    s
                }
            },
            &cfg,
        )
        .unwrap();
        assert!(out.best_value.is_finite() || out.best_value == f64::NEG_INFINITY);
        assert_eq!(out.evaluations, 2_000);
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let objective = |z: &[f64]| -> f64 { -z.iter().map(|zi| (zi - 0.1).powi(2)).sum::<f64>() };
        let cfg = SearchConfig::<f64>::new(8, 0.1, 3_000, 77);
        let a = run_search(objective, &cfg).unwrap();
        let b = run_search(objective, &cfg).unwrap();
        assert_eq!(a.best_point, b.best_point);
        assert_eq!(a.best_value, b.best_value);
        assert_eq!(a.trace.len(), b.trace.len());
        for (ra, rb) in a.trace.iter().zip(b.trace.iter()) {
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn incumbent_is_monotone_and_at_least_initial() {
        let objective = |z: &[f64]| -> f64 { -z.iter().map(|zi| (zi - 0.4).powi(2)).sum::<f64>() };
        let cfg = SearchConfig::<f64>::new(6, 0.2, 4_000, 5);
        let f0 = objective(&vec![1.0; 6]);
        let out = run_search(objective, &cfg).unwrap();
        assert!(out.best_value >= f0);
        let mut prev = f64::NEG_INFINITY;
        for rec in &out.trace {
            assert!(rec.best_value >= prev);
            prev = rec.best_value;
        }
    }

    #[test]
    fn box_respected_by_all_evaluations() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let violations = AtomicUsize::new(0);
        let objective = |z: &[f64]| -> f64 {
            if z.iter().any(|&v| v <= -1.0 || v > 1.0) {
                violations.fetch_add(1, Ordering::Relaxed);
            }
            -z.iter().map(|zi| zi * zi).sum::<f64>()
        };
        let cfg = SearchConfig::<f64>::new(10, 0.5, 5_000, 9);
        run_search(objective, &cfg).unwrap();
        assert_eq!(violations.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn rotated_ellipsoid_condition_1e3() {
        let n = 20;
        // deterministic rotation via Gram-Schmidt on a seeded Gaussian matrix
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let mut q = vec![0.0f64; n * n];
        for v in q.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for col in 0..n {
            for prev in 0..col {
                let dot: f64 = (0..n).map(|r| q[r * n + col] * q[r * n + prev]).sum();
                for r in 0..n {
                    q[r * n + col] -= dot * q[r * n + prev];
                }
            }
            let norm: f64 = (0..n).map(|r| q[r * n + col].powi(2)).sum::<f64>().sqrt();
            for r in 0..n {
                q[r * n + col] /= norm;
            }
        }
        let target = vec![0.2f64; n];
        let objective = move |z: &[f64]| -> f64 {
            let mut val = 0.0;
            for i in 0..n {
                let mut y = 0.0;
                for j in 0..n {
                    y += q[i * n + j] * (z[j] - target[j]);
                }
                let cond = 10f64.powf(3.0 * i as f64 / (n as f64 - 1.0));
                val -= cond * y * y;
            }
            val
        };
        let cfg = SearchConfig::<f64> {
            dimension: n,
            initial_point: vec![1.0; n],
            initial_step: 0.3,
            population: None,
            max_evaluations: 50_000,
            seed: 2024,
        };
        let out = run_search(objective, &cfg).unwrap();
        assert!(out.best_value > -1e-3, "best {}", out.best_value);
    }

    fn z_dist(z: &[f64], target: f64) -> f64 {
        z.iter().map(|zi| (zi - target).powi(2)).sum::<f64>().sqrt()
    }
}
