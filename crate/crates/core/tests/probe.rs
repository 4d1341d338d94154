use rankfield::grids::*;
use rankfield::mfg::*;
use rankfield::numerics::*;
use rankfield::rewards::*;

#[test]
fn probe_quantile_roundtrip() {
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut worst_u = 0.0f64;
    for _ in 0..1000 {
        let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
        let x = normal_quantile(u).unwrap();
        let e = (normal_cdf(x) - u).abs();
        if e > worst { worst = e; worst_u = u; }
    }
    println!("worst |N(q(u))-u| = {worst:e} at u = {worst_u:e}");
    for &u in &[1e-12f64, 1e-9, 1e-4, 0.2, 0.5, 0.9, 1.0-1e-4, 1.0-1e-9] {
        let x = normal_quantile(u).unwrap();
        println!("u={u:e} q={x} N(q)={:e} diff={:e}", normal_cdf(x), (normal_cdf(x)-u).abs());
    }
}

#[test]
fn probe_fixed_point_residual() {
    let cl = ClusterParams::with_constant_cost(18.0, 0.6, 2.5, 1.0).unwrap();
    let grids = Grids::standard(std::slice::from_ref(&cl), 0.17, 3.0).unwrap();
    let eta: Vec<f64> = PiecewiseReward::uniform_knots(6);
    let b = PiecewiseReward::new(eta, vec![4.0, 3.0, 1.0, 0.2, -0.5, -2.0], 4.0).unwrap();
    let eq = equilibrium_closed_form(&b, 0.17, &cl, 3.0, &grids).unwrap();
    println!("mean={} value={} logbeta={}", eq.mean, eq.value, eq.log_beta);
    println!("density mass = {}", eq.density.integral());
    let cdf = eq.density.cdf();
    for idx in [0usize, 100, 500, 1000, 1500, 1900, 2000] {
        let r = eq.quantile.ranks()[idx];
        let q = eq.quantile.values()[idx];
        let f = interp_clamped(eq.density.xs(), &cdf, q);
        println!("r={r:.6} q={q:.6} F(q)={f:.6} diff={:.3e}", (f - r).abs());
    }
    let total = GeneralReward::affine(&b, 0.17);
    let resp = best_response(&total, &eq.density, &cl, 3.0).unwrap();
    let d = wasserstein1(&resp.to_quantiles(&grids.ranks).unwrap(), &eq.quantile).unwrap();
    println!("fixed-point residual = {d:e}");
    let rq = resp.to_quantiles(&grids.ranks).unwrap();
    for idx in [0usize, 10, 1000, 1990, 2000] {
        println!("idx {idx}: resp q = {}, eq q = {}", rq.values()[idx], eq.quantile.values()[idx]);
    }
}
