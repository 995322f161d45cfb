//! Brute-force reference optimum by accelerated projected gradient on the
//! primal problem, independent of the proximal solver.
//!
//! Per unit product-cell volume the primal gradient is
//! `C_ij + k_ij + (k_x,i/f_i − 1) + (k_y,j/g_j − 1)`, and the feasible set
//! `k ≥ δ` is a box, so projection is a clamp. Potentials are read off the
//! marginals as `k*_1 = 1 − k_x/f` and `k*_2 = 1 − k_y/g`, which satisfy the
//! stationarity relations exactly whenever the coupling is optimal.

use crate::error::{Result, UotError};
use crate::uot::{Coupling, DualPotentials, ProblemSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub coupling: Coupling,
    pub duals: DualPotentials,
    pub iterations: usize,
    /// Sup norm of the final gradient-mapping step.
    pub residual: f64,
}

fn gradient(k: &[f64], spec: &ProblemSpec) -> Vec<f64> {
    let (nf, ng) = (spec.nf(), spec.ng());
    let (hx, hy) = (spec.hx(), spec.hy());
    let mut rx = vec![0.0; nf];
    let mut ry = vec![0.0; ng];
    for i in 0..nf {
        for j in 0..ng {
            rx[i] += k[i * ng + j] * hy;
            ry[j] += k[i * ng + j] * hx;
        }
    }
    for (r, f) in rx.iter_mut().zip(&spec.f.values) {
        *r = *r / f - 1.0;
    }
    for (r, g) in ry.iter_mut().zip(&spec.g.values) {
        *r = *r / g - 1.0;
    }
    let mut out = Vec::with_capacity(k.len());
    for i in 0..nf {
        for j in 0..ng {
            let ij = i * ng + j;
            out.push(spec.cost.values[ij] + k[ij] + rx[i] + ry[j]);
        }
    }
    out
}

/// Runs until the projected step moves no entry by more than `tol`.
pub fn solve_reference(spec: &ProblemSpec, tol: f64, max_iter: usize) -> Result<ReferenceSolution> {
    spec.validate()?;
    let fmin = spec.f.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let gmin = spec.g.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let lip = 1.0 + spec.vol_g() / fmin + spec.vol_f() / gmin;
    let step = 1.0 / lip;
    let delta = spec.delta;
    let mut k = vec![delta.max(0.5); spec.nf() * spec.ng()];
    let mut y = k.clone();
    let mut theta = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let g = gradient(&y, spec);
        let next: Vec<f64> = y.iter().zip(&g).map(|(v, d)| delta.max(v - step * d)).collect();
        residual = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(UotError::NumericalBlowup {
                what: "reference coupling".into(),
                iteration: it,
            });
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        // Restart the momentum whenever it points uphill.
        let uphill: f64 = g.iter().zip(next.iter().zip(&k)).map(|(d, (a, b))| d * (a - b)).sum();
        if uphill > 0.0 {
            theta = 1.0;
            y = next.clone();
        } else {
            y = next.iter().zip(&k).map(|(a, b)| delta.max(a + beta * (a - b))).collect();
            theta = theta_next;
        }
        k = next;
        if residual <= tol {
            return Ok(finish(k, spec, it, residual));
        }
    }
    Err(UotError::BudgetNotMet(format!(
        "reference solver stopped at residual {residual:e} after {max_iter} iterations"
    )))
}

fn finish(values: Vec<f64>, spec: &ProblemSpec, iterations: usize, residual: f64) -> ReferenceSolution {
    let coupling = Coupling::new(values, spec).expect("sizes agree");
    let k1 = coupling.kx.iter().zip(&spec.f.values).map(|(k, f)| 1.0 - k / f).collect();
    let k2 = coupling.ky.iter().zip(&spec.g.values).map(|(k, g)| 1.0 - k / g).collect();
    ReferenceSolution {
        coupling,
        duals: DualPotentials::new(k1, k2),
        iterations,
        residual,
    }
}
