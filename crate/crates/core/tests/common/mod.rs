//! Shared fixtures and a brute-force oracle written independently of the
//! library's solvers.
#![allow(dead_code)]

use pearson_uot::{CostGrid, Grid, GridDensity, ProblemSpec};

pub fn line(lo: f64, hi: f64, n: usize) -> Grid {
    Grid::line(lo, hi, n).unwrap()
}

pub fn density(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> GridDensity {
    GridDensity::with_min_witness(grid.clone(), grid.points().iter().map(|p| f(p)).collect()).unwrap()
}

/// f = g = 1 on [0, 1], zero cost.
pub fn uniform(n: usize, delta: f64) -> ProblemSpec {
    let g = line(0.0, 1.0, n);
    let f = density(&g, |_| 1.0);
    ProblemSpec::new(f.clone(), f, CostGrid::zero(&g, &g), delta).unwrap()
}

/// f = 1, g = 2 on [0, 1], zero cost.
pub fn asymmetric(n: usize, delta: f64) -> ProblemSpec {
    let g = line(0.0, 1.0, n);
    ProblemSpec::new(density(&g, |_| 1.0), density(&g, |_| 2.0), CostGrid::zero(&g, &g), delta).unwrap()
}

/// Non-constant densities on shifted supports with squared-distance cost.
pub fn quadratic(n: usize, delta: f64) -> ProblemSpec {
    let gx = line(0.0, 1.0, n);
    let gy = line(0.5, 1.5, n);
    let f = density(&gx, |p| 1.0 + 0.5 * p[0]);
    let g = density(&gy, |p| 1.2 - 0.3 * (p[0] - 0.5));
    ProblemSpec::new(f, g, CostGrid::squared_distance(&gx, &gy).unwrap(), delta).unwrap()
}

/// Supports far enough apart that the floor `k ≥ δ` binds.
pub fn far_apart(n: usize, delta: f64) -> ProblemSpec {
    let gx = line(0.0, 1.0, n);
    let gy = line(1.0, 2.0, n);
    let f = density(&gx, |p| 1.0 + 0.3 * p[0]);
    let g = density(&gy, |_| 1.0);
    ProblemSpec::new(f, g, CostGrid::squared_distance(&gx, &gy).unwrap(), delta).unwrap()
}

pub struct OracleSolution {
    pub k: Vec<f64>,
    pub value: f64,
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
}

/// Objective `∫Ck + η‖k‖² + ½F(k_x|f) + ½F(k_y|g)`, written out directly.
pub fn objective(spec: &ProblemSpec, k: &[f64], eta: f64) -> f64 {
    let (nf, ng) = (spec.f.values.len(), spec.g.values.len());
    let hx = spec.f.grid.cell_volume();
    let hy = spec.g.grid.cell_volume();
    let mut kx = vec![0.0; nf];
    let mut ky = vec![0.0; ng];
    let mut lin = 0.0;
    let mut sq = 0.0;
    for i in 0..nf {
        for j in 0..ng {
            let v = k[i * ng + j];
            kx[i] += v * hy;
            ky[j] += v * hx;
            lin += spec.cost.values[i * ng + j] * v;
            sq += v * v;
        }
    }
    let pearson = |m: &[f64], d: &[f64], h: f64| -> f64 { m.iter().zip(d).map(|(a, b)| (a / b - 1.0).powi(2) * b).sum::<f64>() * h };
    (lin + eta * sq) * hx * hy + 0.5 * pearson(&kx, &spec.f.values, hx) + 0.5 * pearson(&ky, &spec.g.values, hy)
}

/// Minimizes [`objective`] over `k ≥ floor` by projected gradient with
/// Nesterov momentum until no entry moves by more than `tol`.
pub fn oracle(spec: &ProblemSpec, eta: f64, floor: f64, tol: f64) -> OracleSolution {
    let (nf, ng) = (spec.f.values.len(), spec.g.values.len());
    let hx = spec.f.grid.cell_volume();
    let hy = spec.g.grid.cell_volume();
    let vf = hx * nf as f64;
    let vg = hy * ng as f64;
    let fmin = spec.f.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let gmin = spec.g.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let lip = 2.0 * eta + vg / fmin + vf / gmin;
    let grad = |k: &[f64]| -> Vec<f64> {
        let mut ax = vec![0.0; nf];
        let mut ay = vec![0.0; ng];
        for i in 0..nf {
            for j in 0..ng {
                ax[i] += k[i * ng + j] * hy;
                ay[j] += k[i * ng + j] * hx;
            }
        }
        let mut g = vec![0.0; nf * ng];
        for i in 0..nf {
            for j in 0..ng {
                g[i * ng + j] = spec.cost.values[i * ng + j] + 2.0 * eta * k[i * ng + j] + ax[i] / spec.f.values[i] - 1.0
                    + ay[j] / spec.g.values[j]
                    - 1.0;
            }
        }
        g
    };
    let mut x = vec![floor.max(0.5); nf * ng];
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..5_000_000 {
        let g = grad(&y);
        let xn: Vec<f64> = y.iter().zip(&g).map(|(a, b)| (a - b / lip).max(floor)).collect();
        let moved = xn.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let restart = g.iter().zip(xn.iter().zip(&x)).map(|(d, (a, b))| d * (a - b)).sum::<f64>() > 0.0;
        y = if restart {
            xn.clone()
        } else {
            xn.iter().zip(&x).map(|(a, b)| (a + (t - 1.0) / tn * (a - b)).max(floor)).collect()
        };
        t = if restart { 1.0 } else { tn };
        x = xn;
        if moved <= tol {
            break;
        }
    }
    let mut kx = vec![0.0; nf];
    let mut ky = vec![0.0; ng];
    for i in 0..nf {
        for j in 0..ng {
            kx[i] += x[i * ng + j] * hy;
            ky[j] += x[i * ng + j] * hx;
        }
    }
    let k1 = kx.iter().zip(&spec.f.values).map(|(a, f)| 1.0 - a / f).collect();
    let k2 = ky.iter().zip(&spec.g.values).map(|(a, g)| 1.0 - a / g).collect();
    OracleSolution {
        value: objective(spec, &x, eta),
        k: x,
        k1,
        k2,
    }
}

/// `Σ|a_i − b_i|² · h`.
pub fn l2_sq(a: &[f64], b: &[f64], h: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * h
}

/// Seeded generator for fixtures.
pub fn rng(seed: u64) -> rand::rngs::StdRng {
    rand::SeedableRng::seed_from_u64(seed)
}
