mod common;

use common::*;
use pearson_uot::dynamics::{
    build_endpoint_densities, continuity_residual, evolve, mass_factor_by_quadrature, uniform_times, DynamicsFields, TestFunction,
};
use pearson_uot::monge_ampere::{ma_residual, pushforward_error, solve_1d, solve_tensor, MonotoneMap};
use pearson_uot::neural::mollify::{mollify_to_tolerance, Boundary};
use pearson_uot::sinkhorn::solve;
use pearson_uot::{Grid, ProblemSpec};
use proptest::prelude::*;
use rand::Rng;

fn centers_density(g: &Grid, f: impl Fn(f64) -> f64) -> Vec<f64> {
    g.axes[0].centers().into_iter().map(f).collect()
}

/// Normalizes `v` to the given total mass on `g`.
fn with_mass(g: &Grid, mut v: Vec<f64>, mass: f64) -> Vec<f64> {
    let m = g.integrate(&v);
    v.iter_mut().for_each(|x| *x *= mass / m);
    v
}

#[test]
fn analytic_cases_have_small_residual_and_pushforward_error() {
    let mut r = rng(5);
    for n in [16usize, 32, 64] {
        let s = line(0.0, 1.0, n);
        let h = 1.0 / n as f64;
        let cases = [
            (line(0.0, 2.0, n), vec![1.0; n], vec![0.5; n]),
            (line(0.5, 1.5, n), vec![1.0; n], vec![1.0; n]),
            (line(-1.0, 3.0, n), vec![2.0; n], vec![0.5; n]),
        ];
        for (t, kx, ky) in cases {
            let map = solve_1d(&s, &kx, &t, &ky).unwrap();
            assert!(map.is_monotone());
            assert!(ma_residual(&map, &kx, &ky).sup <= 2.0 * h);
            for _ in 0..10 {
                let (a, b, c) = (r.random_range(-1.0..1.0), r.random_range(-3.0..3.0), r.random_range(0.0..6.3));
                let e = pushforward_error(&map, &kx, &ky, |y| a * (b * y[0] + c).sin());
                assert!(e <= 2.0 * h, "n = {n}: pushforward error {e}");
            }
        }
    }
}

#[test]
fn residual_refines_at_first_order() {
    // Smooth non-constant marginals with equal mass.
    let levels = [16usize, 32, 64, 128];
    let mut res = vec![];
    for &n in &levels {
        let s = line(0.0, 1.0, n);
        let t = line(0.0, 1.5, n);
        let kx = with_mass(&s, centers_density(&s, |x| 1.0 + 0.6 * x * x), 1.0);
        let ky = with_mass(&t, centers_density(&t, |y| 1.0 + 0.5 * (3.0 * y).sin()), 1.0);
        let map = solve_1d(&s, &kx, &t, &ky).unwrap();
        res.push(ma_residual(&map, &kx, &ky).interior_sup);
    }
    for (k, w) in res.windows(2).enumerate() {
        let ratio = w[0] / w[1];
        assert!(ratio > 1.5, "level {k}: residuals {res:?}");
    }
    // Bounded by a fixed multiple of h on every level.
    let scaled: Vec<f64> = res.iter().zip(&levels).map(|(r, n)| r * *n as f64).collect();
    assert!(scaled.windows(2).all(|w| w[1] <= w[0] * 1.05), "residual/h grows: {scaled:?}");
}

#[test]
fn tensor_map_is_monotone_and_pushes_forward() {
    let g = Grid::new(vec![
        pearson_uot::Axis::new(0.0, 1.0, 12).unwrap(),
        pearson_uot::Axis::new(0.0, 1.0, 10).unwrap(),
    ])
    .unwrap();
    let t = Grid::new(vec![
        pearson_uot::Axis::new(0.0, 2.0, 12).unwrap(),
        pearson_uot::Axis::new(-0.5, 0.5, 10).unwrap(),
    ])
    .unwrap();
    let kx: Vec<f64> = g.points().iter().map(|p| (1.0 + p[0]) * (2.0 - p[1]) / 2.25).collect();
    let ky: Vec<f64> = t.points().iter().map(|p| 0.5 * (1.0 + 0.4 * p[1])).collect();
    let ky = with_mass(&t, ky, g.integrate(&kx));
    let map = solve_tensor(&g, &kx, &t, &ky).unwrap();
    assert!(map.is_monotone());
    let e = pushforward_error(&map, &kx, &ky, |y| (y[0] - y[1]).cos());
    assert!(e <= 2.0 * g.min_h(), "{e}");
}

fn positive_density(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.2f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_dimensional_maps_are_monotone_into_the_target_hull(
        (n, kx, ky) in (3usize..40).prop_flat_map(|n| (Just(n), positive_density(n), positive_density(n))),
        lo in -2.0f64..2.0,
        width in 0.5f64..3.0,
    ) {
        let s = line(0.0, 1.0, n);
        let t = line(lo, lo + width, n);
        let ky = with_mass(&t, ky, s.integrate(&kx));
        let map = solve_1d(&s, &kx, &t, &ky).unwrap();
        prop_assert!(map.is_monotone());
        for y in map.samples() {
            prop_assert!(y[0] >= lo - 1e-12 && y[0] <= lo + width + 1e-12);
        }
        prop_assert!(map.exact_det_samples().iter().all(|&d| d > 0.0));
    }
}

// ---- dynamics ----

fn pipeline_dynamics(
    spec: &ProblemSpec,
    l: usize,
    horizon: f64,
    stamps: usize,
) -> (DynamicsFields, Vec<f64>, Vec<f64>, pearson_uot::dynamics::EvolvedDensity) {
    let out = solve(spec, l).unwrap();
    let (fb, gb) = build_endpoint_densities(&out.coupling, &out.duals).unwrap();
    let map = solve_1d(&spec.f.grid, &out.coupling.kx, &spec.g.grid, &out.coupling.ky).unwrap();
    let fields = DynamicsFields::new(horizon, map, out.duals.k1.clone(), out.duals.k2.clone()).unwrap();
    let ev = evolve(&fields, &fb, &uniform_times(horizon, stamps)).unwrap();
    (fields, fb, gb, ev)
}

#[test]
fn endpoint_matches_g_bar_on_uniform_cases() {
    for spec in [uniform(64, 0.01), asymmetric(64, 0.01)] {
        let h = spec.hx();
        let (fields, _, gb, ev) = pipeline_dynamics(&spec, 300, 1.0, 4);
        let mu_t = ev.to_eulerian(ev.times.len() - 1, &fields, &spec.g.grid);
        let l1 = spec.g.grid.l1_dist(&mu_t, &gb);
        assert!(l1 <= 5.0 * h, "L1 {l1} vs 5h {}", 5.0 * h);
    }
}

#[test]
fn endpoint_on_dilation_with_smoothed_potentials() {
    let gx = line(0.0, 1.0, 64);
    let gy = line(0.0, 2.0, 64);
    let f = density(&gx, |_| 1.0);
    let g = density(&gy, |p| 0.5 + 0.2 * (p[0] - 1.0));
    let spec = ProblemSpec::new(f, g, pearson_uot::CostGrid::zero(&gx, &gy), 0.01).unwrap();
    let out = solve(&spec, 300).unwrap();
    let mut duals = out.duals.clone();
    duals.k1_tilde = Some(mollify_to_tolerance(&gx, &duals.k1, 1e-3, Boundary::Renormalize).unwrap().values);
    duals.k2_tilde = Some(mollify_to_tolerance(&gy, &duals.k2, 1e-3, Boundary::Renormalize).unwrap().values);
    let (fb, gb) = build_endpoint_densities(&out.coupling, &duals).unwrap();
    let map = solve_1d(&gx, &out.coupling.kx, &gy, &out.coupling.ky).unwrap();
    let (k1, k2) = duals.smoothed();
    let fields = DynamicsFields::new(1.0, map, k1.to_vec(), k2.to_vec()).unwrap();
    let ev = evolve(&fields, &fb, &uniform_times(1.0, 4)).unwrap();
    let mu_t = ev.to_eulerian(4, &fields, &gy);
    let l1 = gy.l1_dist(&mu_t, &gb);
    assert!(l1 <= 5.0 * gx.min_h(), "{l1}");
}

#[test]
fn mass_factor_closed_form_matches_time_quadrature() {
    let spec = quadratic(32, 0.01);
    let (fields, _, _, _) = pipeline_dynamics(&spec, 300, 1.5, 2);
    let mut worst: f64 = 0.0;
    for x in spec.f.grid.points().iter().step_by(3) {
        for t in [0.3, 0.75, 1.5] {
            let closed = fields.mass_factor(x, t).unwrap();
            let quad = mass_factor_by_quadrature(&fields, x, t, 400).unwrap();
            worst = worst.max((closed - quad).abs());
        }
    }
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn continuity_residual_shrinks_under_joint_refinement() {
    let tf_v = |z: &[f64]| (2.0 * z[0]).sin();
    let tf_g = |z: &[f64]| vec![2.0 * (2.0 * z[0]).cos()];
    let tf2_v = |z: &[f64]| z[0] * z[0];
    let tf2_g = |z: &[f64]| vec![2.0 * z[0]];
    let tests = [
        TestFunction { value: &tf_v, grad: &tf_g },
        TestFunction {
            value: &tf2_v,
            grad: &tf2_g,
        },
    ];
    // Potentials stay well below 1 here; near 1 the growth rate is close to
    // singular at t = T and the last interior stamp approaches it as Δt shrinks.
    let mut worst = vec![];
    for (n, stamps) in [(16usize, 4usize), (32, 8), (64, 16)] {
        let gx = line(0.0, 1.0, n);
        let gy = line(0.0, 1.5, n);
        let f = density(&gx, |p| 1.0 + 0.5 * p[0]);
        let g = density(&gy, |p| 0.6 + 0.2 * p[0]);
        let spec = ProblemSpec::new(f, g, pearson_uot::CostGrid::squared_distance(&gx, &gy).unwrap(), 0.01).unwrap();
        let (fields, _, _, ev) = pipeline_dynamics(&spec, 300, 1.0, stamps);
        let r = continuity_residual(&ev, &fields, &tests).unwrap();
        worst.push(r.into_iter().fold(0.0, f64::max));
    }
    assert!(worst.windows(2).all(|w| w[1] < w[0]), "{worst:?}");
}

#[test]
fn identity_dynamics_are_static() {
    let spec = uniform(16, 0.01);
    let (fields, fb, _, ev) = pipeline_dynamics(&spec, 300, 1.0, 3);
    let id = MonotoneMap::identity(&spec.f.grid, &fb);
    assert!(fields
        .map
        .samples()
        .iter()
        .zip(id.samples())
        .all(|(a, b)| (a[0] - b[0]).abs() < 1e-12));
    for m in 0..ev.times.len() {
        assert!((ev.masses[m] - ev.masses[0]).abs() < 1e-12);
    }
}
