//! Bounded-Lipschitz distance between discrete measures and rate fitting.

use std::collections::BTreeMap;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::dynamics::EvolvedDensity;
use crate::error::{Result, UotError};
use crate::grid::Grid;

/// Weighted point cloud; weights may be signed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(UotError::InvalidParameter("points and weights differ in length".into()));
        }
        let d = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(UotError::InvalidParameter("points must share a dimension and be finite".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(UotError::InvalidParameter("weights must be finite".into()));
        }
        Ok(Self { points, weights })
    }

    pub fn dirac(point: Vec<f64>, mass: f64) -> Self {
        Self {
            points: vec![point],
            weights: vec![mass],
        }
    }

    /// Cell-mass lumping at cell centers.
    pub fn from_density(grid: &Grid, values: &[f64]) -> Self {
        let vol = grid.cell_volume();
        Self {
            points: grid.points(),
            weights: values.iter().map(|v| v * vol).collect(),
        }
    }

    /// Lagrangian samples of an evolved density at stamp `m`.
    pub fn from_evolved(ev: &EvolvedDensity, m: usize) -> Self {
        let vol = ev.source.cell_volume();
        let weights = ev.initial.iter().zip(&ev.mass_factor[m]).map(|(f, mf)| f * mf * vol).collect();
        Self {
            points: ev.points[m].clone(),
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DblConfig {
    /// Largest number of support points solved exactly in 1-D.
    pub cap_1d: usize,
    /// Largest number of support points solved exactly with all pairwise
    /// constraints (d ≥ 2).
    pub cap_pairwise: usize,
}

impl Default for DblConfig {
    fn default() -> Self {
        Self {
            cap_1d: 4000,
            cap_pairwise: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DblResult {
    pub value: f64,
    /// Merged support points carrying nonzero net mass.
    pub points: Vec<Vec<f64>>,
    /// Witness test function at `points`.
    pub witness: Vec<f64>,
    pub a: f64,
    pub b: f64,
    /// False when the sampled-ridge lower bound replaced the exact LP.
    pub exact: bool,
}

fn dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Net signed masses `μ − ν` on the merged support, zero entries dropped.
fn net_masses(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut acc: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
    let key = |p: &[f64]| p.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<u64>>();
    for (p, w) in mu.points.iter().zip(&mu.weights) {
        acc.entry(key(p)).or_insert_with(|| (p.clone(), 0.0)).1 += w;
    }
    for (p, w) in nu.points.iter().zip(&nu.weights) {
        acc.entry(key(p)).or_insert_with(|| (p.clone(), 0.0)).1 -= w;
    }
    let mut pts = vec![];
    let mut ws = vec![];
    for (_, (p, w)) in acc {
        if w != 0.0 {
            pts.push(p);
            ws.push(w);
        }
    }
    (pts, ws)
}

/// `d_bL(μ, ν) = sup { Σφ(p_i)(μ_i − ν_i) : ‖φ‖_∞ + Lip(φ) ≤ 1 }`.
pub fn dbl_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<DblResult> {
    dbl_distance_with(mu, nu, &DblConfig::default())
}

pub fn dbl_distance_with(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cfg: &DblConfig) -> Result<DblResult> {
    if mu.dim() != nu.dim() && !mu.points.is_empty() && !nu.points.is_empty() {
        return Err(UotError::InvalidParameter("measures live in different dimensions".into()));
    }
    let (mut pts, mut w) = net_masses(mu, nu);
    if pts.is_empty() {
        return Ok(DblResult {
            value: 0.0,
            points: vec![],
            witness: vec![],
            a: 0.0,
            b: 0.0,
            exact: true,
        });
    }
    let d = pts[0].len();
    if d == 1 {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&i, &j| pts[i][0].total_cmp(&pts[j][0]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        w = order.iter().map(|&i| w[i]).collect();
        if pts.len() <= cfg.cap_1d {
            let pairs: Vec<(usize, usize)> = (1..pts.len()).map(|i| (i - 1, i)).collect();
            return solve_lp(pts, w, &pairs);
        }
    } else if pts.len() <= cfg.cap_pairwise {
        let pairs: Vec<(usize, usize)> = (0..pts.len()).flat_map(|i| (i + 1..pts.len()).map(move |j| (i, j))).collect();
        return solve_lp(pts, w, &pairs);
    }
    Ok(ridge_lower_bound(pts, w))
}

fn solve_lp(pts: Vec<Vec<f64>>, w: Vec<f64>, pairs: &[(usize, usize)]) -> Result<DblResult> {
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let phi: Vec<_> = w.iter().map(|&wi| lp.add_var(wi, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    let a = lp.add_var(0.0, (0.0, 1.0));
    let b = lp.add_var(0.0, (0.0, 1.0));
    lp.add_constraint([(a, 1.0), (b, 1.0)], ComparisonOp::Le, 1.0);
    for &p in &phi {
        lp.add_constraint([(p, 1.0), (a, -1.0)], ComparisonOp::Le, 0.0);
        lp.add_constraint([(p, -1.0), (a, -1.0)], ComparisonOp::Le, 0.0);
    }
    for &(i, j) in pairs {
        let dij = dist(&pts[i], &pts[j]);
        lp.add_constraint([(phi[i], 1.0), (phi[j], -1.0), (b, -dij)], ComparisonOp::Le, 0.0);
        lp.add_constraint([(phi[j], 1.0), (phi[i], -1.0), (b, -dij)], ComparisonOp::Le, 0.0);
    }
    let sol = lp
        .solve()
        .map_err(|e| UotError::InternalError(format!("bounded-Lipschitz LP: {e}")))?;
    let witness: Vec<f64> = phi.iter().map(|&p| sol[p]).collect();
    // φ = 0 is feasible, so round-off below zero is clipped.
    let value = witness.iter().zip(&w).map(|(p, wi)| p * wi).sum::<f64>();
    let value = if value > 0.0 { value } else { 0.0 };
    Ok(DblResult {
        value,
        points: pts,
        witness,
        a: sol[a],
        b: sol[b],
        exact: true,
    })
}

/// Lower bound from ridge test functions `clamp(β(v·x − θ), −a, a)` with
/// `a + β ≤ 1`, maximized over a sampled family of directions, thresholds
/// and splits.
fn ridge_lower_bound(pts: Vec<Vec<f64>>, w: Vec<f64>) -> DblResult {
    let d = pts[0].len();
    let mut dirs: Vec<Vec<f64>> = vec![];
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        dirs.push(e);
    }
    if d == 2 {
        for m in 1..16 {
            let th = std::f64::consts::PI * m as f64 / 16.0;
            dirs.push(vec![th.cos(), th.sin()]);
        }
    } else if d > 2 {
        for i in 0..d {
            for j in i + 1..d {
                for s in [1.0, -1.0] {
                    let mut v = vec![0.0; d];
                    v[i] = std::f64::consts::FRAC_1_SQRT_2;
                    v[j] = s * std::f64::consts::FRAC_1_SQRT_2;
                    dirs.push(v);
                }
            }
        }
    }
    let total: f64 = w.iter().sum();
    let mut best = (total.abs(), 0usize, 0.0, 1.0, 0.0, total.signum());
    for (di, v) in dirs.iter().enumerate() {
        let proj: Vec<f64> = pts.iter().map(|p| p.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &p| (l.min(p), h.max(p)));
        for ti in 0..=32 {
            let theta = lo + (hi - lo) * ti as f64 / 32.0;
            for ai in 1..20 {
                let a = ai as f64 / 20.0;
                let beta = 1.0 - a;
                let val: f64 = proj.iter().zip(&w).map(|(p, wi)| (beta * (p - theta)).clamp(-a, a) * wi).sum();
                if val.abs() > best.0 {
                    best = (val.abs(), di, theta, a, beta, val.signum());
                }
            }
        }
    }
    let (value, di, theta, a, beta, sign) = best;
    let v = &dirs[di];
    let witness = pts
        .iter()
        .map(|p| sign * (beta * (p.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() - theta)).clamp(-a, a))
        .collect();
    DblResult {
        value,
        points: pts,
        witness,
        a,
        b: beta,
        exact: false,
    }
}

/// Least-squares slope of `ln series` against the index: returns the
/// per-step ratio `exp(slope)` and the coefficient of determination.
pub fn rate_fit(series: &[f64]) -> Result<(f64, f64)> {
    if series.len() < 5 {
        return Err(UotError::InvalidSeries(format!("need at least 5 points, got {}", series.len())));
    }
    if let Some(i) = series.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(UotError::InvalidSeries(format!("entry {i} = {} is not positive", series[i])));
    }
    let n = series.len() as f64;
    let ys: Vec<f64> = series.iter().map(|v| v.ln()).collect();
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        let dy = y - ym;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope.exp(), r2))
}

/// Fitted ratio of a decaying step-norm series over the last half of the
/// iterations that sit above `floor`.
pub fn tail_rate(series: &[f64], floor: f64) -> Result<(f64, f64)> {
    let last = series
        .iter()
        .rposition(|&v| v > floor)
        .ok_or_else(|| UotError::InvalidSeries("series is below the floor".into()))?;
    let end = last + 1;
    let start = end / 2;
    rate_fit(&series[start..end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equal_measures_are_at_distance_zero() {
        let m = DiscreteMeasure::new(vec![vec![0.0], vec![0.5]], vec![1.0, 2.0]).unwrap();
        assert_eq!(dbl_distance(&m, &m).unwrap().value, 0.0);
    }

    #[test]
    fn two_point_formula() {
        for h in [0.1, 0.5, 1.0, 1.7, 2.0, 2.5, 4.0, 50.0] {
            let r = dbl_distance(&DiscreteMeasure::dirac(vec![0.0], 1.0), &DiscreteMeasure::dirac(vec![h], 1.0)).unwrap();
            assert_abs_diff_eq!(r.value, 2.0 * h / (2.0 + h), epsilon = 1e-9);
            assert!(r.exact);
        }
        let r = dbl_distance(
            &DiscreteMeasure::dirac(vec![0.0, 0.0], 1.0),
            &DiscreteMeasure::dirac(vec![0.3, 0.4], 1.0),
        )
        .unwrap();
        assert_abs_diff_eq!(r.value, 1.0 / 2.5, epsilon = 1e-9);
    }

    #[test]
    fn witness_is_feasible() {
        let mu = DiscreteMeasure::new(
            (0..12).map(|i| vec![i as f64 * 0.1]).collect(),
            (0..12).map(|i| 1.0 + (i as f64).sin()).collect(),
        )
        .unwrap();
        let nu = DiscreteMeasure::new((0..12).map(|i| vec![i as f64 * 0.1 + 0.05]).collect(), vec![1.0; 12]).unwrap();
        let r = dbl_distance(&mu, &nu).unwrap();
        assert!(r.a + r.b <= 1.0 + 1e-10);
        for (i, p) in r.points.iter().enumerate() {
            assert!(r.witness[i].abs() <= r.a + 1e-10);
            for (j, q) in r.points.iter().enumerate() {
                assert!((r.witness[i] - r.witness[j]).abs() <= r.b * dist(p, q) + 1e-10);
            }
        }
    }

    #[test]
    fn fallback_is_a_flagged_lower_bound() {
        let pts: Vec<Vec<f64>> = (0..6)
            .flat_map(|i| (0..6).map(move |j| vec![i as f64 * 0.2, j as f64 * 0.2]))
            .collect();
        let mu = DiscreteMeasure::new(pts.clone(), pts.iter().map(|p| 1.0 + p[0]).collect()).unwrap();
        let nu = DiscreteMeasure::new(pts.clone(), vec![1.2; 36]).unwrap();
        let exact = dbl_distance(&mu, &nu).unwrap();
        let low = dbl_distance_with(
            &mu,
            &nu,
            &DblConfig {
                cap_1d: 10,
                cap_pairwise: 10,
            },
        )
        .unwrap();
        assert!(exact.exact && !low.exact);
        assert!(low.value <= exact.value + 1e-9);
        assert!(low.value > 0.5 * exact.value);
    }

    #[test]
    fn rate_fit_examples() {
        let s: Vec<f64> = (0..20).map(|n| 0.5f64.powi(n)).collect();
        let (r, r2) = rate_fit(&s).unwrap();
        assert_abs_diff_eq!(r, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r2, 1.0, epsilon = 1e-12);
        assert!(matches!(rate_fit(&[1.0, 0.5, 0.0, 0.1, 0.1]), Err(UotError::InvalidSeries(_))));
        assert!(matches!(rate_fit(&[1.0, 0.5]), Err(UotError::InvalidSeries(_))));
    }

    #[test]
    fn tail_rate_ignores_floor() {
        let mut s: Vec<f64> = (0..40).map(|n| 0.7f64.powi(n)).collect();
        s.extend(vec![1e-17; 10]);
        let (r, _) = tail_rate(&s, 1e-13).unwrap();
        assert_abs_diff_eq!(r, 0.7, epsilon = 1e-12);
    }
}
