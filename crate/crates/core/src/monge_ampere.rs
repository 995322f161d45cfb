//! Monotone transport maps between coupling marginals.
//!
//! In one dimension the map is the monotone rearrangement `T = G⁻¹∘F`
//! of the cumulative functions. In higher dimension only separable
//! (tensor-product) marginals are handled here; other solvers plug in
//! through [`ExternalMaSolver`].

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::grid::{Axis, Grid};

/// One axis of a diagonal map, sampled at the source cell centers.
///
/// Between centers the map is linear; beyond the outermost centers it
/// continues affinely with the exact end derivatives, so it is defined and
/// continuous on the whole line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMap {
    pub source: Axis,
    pub target: Axis,
    pub values: Vec<f64>,
    /// Derivative of the rearrangement at each center.
    pub slopes: Vec<f64>,
}

impl AxisMap {
    pub fn identity(axis: Axis) -> Self {
        Self {
            source: axis,
            target: axis,
            values: axis.centers(),
            slopes: vec![1.0; axis.n],
        }
    }

    fn segment(&self, x: f64) -> Option<usize> {
        let n = self.source.n;
        let c0 = self.source.center(0);
        if n < 2 || x < c0 || x > self.source.center(n - 1) {
            return None;
        }
        let i = ((x - c0) / self.source.h()).floor() as usize;
        Some(i.min(n - 2))
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.source.n;
        match self.segment(x) {
            Some(i) => {
                let x0 = self.source.center(i);
                let t = (x - x0) / self.source.h();
                self.values[i] + t * (self.values[i + 1] - self.values[i])
            }
            None => {
                if x < self.source.center(0) {
                    self.values[0] + self.slopes[0] * (x - self.source.center(0))
                } else {
                    self.values[n - 1] + self.slopes[n - 1] * (x - self.source.center(n - 1))
                }
            }
        }
    }

    /// Derivative of the interpolant (one-sided from the right at knots).
    pub fn deriv(&self, x: f64) -> f64 {
        let n = self.source.n;
        match self.segment(x) {
            Some(i) => (self.values[i + 1] - self.values[i]) / self.source.h(),
            None if x < self.source.center(0) => self.slopes[0],
            None => self.slopes[n - 1],
        }
    }

    /// Centered finite-difference derivative at sample `i`, one-sided at
    /// the ends.
    pub fn fd_deriv(&self, i: usize) -> f64 {
        let n = self.source.n;
        let h = self.source.h();
        if n == 1 {
            return self.slopes[0];
        }
        if i == 0 {
            (self.values[1] - self.values[0]) / h
        } else if i == n - 1 {
            (self.values[n - 1] - self.values[n - 2]) / h
        } else {
            (self.values[i + 1] - self.values[i - 1]) / (2.0 * h)
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Diagonal monotone map `x ↦ (T_1(x_1), …, T_d(x_d))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneMap {
    pub source: Grid,
    pub target: Grid,
    pub axes: Vec<AxisMap>,
    pub source_density: Vec<f64>,
    pub target_density: Vec<f64>,
}

impl MonotoneMap {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.axes.iter().zip(x).map(|(a, &xi)| a.eval(xi)).collect()
    }

    /// Jacobian diagonal of the interpolant at `x`.
    pub fn jacobian_diag(&self, x: &[f64]) -> Vec<f64> {
        self.axes.iter().zip(x).map(|(a, &xi)| a.deriv(xi)).collect()
    }

    /// `T(x_i)` at source sample `flat`.
    pub fn sample(&self, flat: usize) -> Vec<f64> {
        let idx = self.source.multi_index(flat);
        self.axes.iter().zip(&idx).map(|(a, &i)| a.values[i]).collect()
    }

    pub fn samples(&self) -> Vec<Vec<f64>> {
        (0..self.source.len()).map(|i| self.sample(i)).collect()
    }

    /// Finite-difference Jacobian determinant at every source sample.
    pub fn det_samples(&self) -> Vec<f64> {
        (0..self.source.len())
            .map(|flat| {
                let idx = self.source.multi_index(flat);
                self.axes.iter().zip(&idx).map(|(a, &i)| a.fd_deriv(i)).product()
            })
            .collect()
    }

    /// Exact rearrangement Jacobian determinant at every source sample.
    pub fn exact_det_samples(&self) -> Vec<f64> {
        (0..self.source.len())
            .map(|flat| {
                let idx = self.source.multi_index(flat);
                self.axes.iter().zip(&idx).map(|(a, &i)| a.slopes[i]).product()
            })
            .collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.axes.iter().all(AxisMap::is_monotone)
    }

    pub fn identity(grid: &Grid, density: &[f64]) -> Self {
        Self {
            source: grid.clone(),
            target: grid.clone(),
            axes: grid.axes.iter().map(|a| AxisMap::identity(*a)).collect(),
            source_density: density.to_vec(),
            target_density: density.to_vec(),
        }
    }
}

fn check_density(v: &[f64], what: &str) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
        return Err(UotError::InvalidDensity(format!("{what} has value {} at cell {i}", v[i])));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(UotError::InvalidDensity(format!("{what} has zero mass")));
    }
    Ok(())
}

/// 1-D rearrangement between densities given per cell on two axes.
fn rearrange(src: Axis, kx: &[f64], tgt: Axis, ky: &[f64]) -> Result<AxisMap> {
    check_density(kx, "source marginal")?;
    check_density(ky, "target marginal")?;
    let sx: f64 = kx.iter().sum();
    let sy: f64 = ky.iter().sum();
    // Cumulative target distribution at cell edges.
    let mut ge = Vec::with_capacity(ky.len() + 1);
    let mut acc = 0.0;
    ge.push(0.0);
    for &v in ky {
        acc += v;
        ge.push(acc / sy);
    }
    let mx = sx * src.h();
    let my = sy * tgt.h();
    let mut values = Vec::with_capacity(kx.len());
    let mut slopes = Vec::with_capacity(kx.len());
    let mut before = 0.0;
    for &v in kx {
        let u = (before + 0.5 * v) / sx;
        before += v;
        // Leftmost cell whose upper edge reaches u.
        let j = ge[1..].partition_point(|&g| g < u).min(ky.len() - 1);
        let width = ge[j + 1] - ge[j];
        let frac = if width > 0.0 { ((u - ge[j]) / width).clamp(0.0, 1.0) } else { 0.0 };
        values.push(tgt.edge(j) + frac * tgt.h());
        let dens_y = ky[j] / my;
        slopes.push(if dens_y > 0.0 { (v / mx) / dens_y } else { f64::INFINITY });
    }
    Ok(AxisMap {
        source: src,
        target: tgt,
        values,
        slopes,
    })
}

fn check_mass(mx: f64, my: f64) -> Result<()> {
    if (mx - my).abs() > 1e-10 * mx.abs().max(my.abs()).max(1.0) {
        return Err(UotError::MassMismatch {
            source_mass: mx,
            target_mass: my,
        });
    }
    Ok(())
}

/// Monotone rearrangement on 1-D grids.
pub fn solve_1d(src: &Grid, kx: &[f64], tgt: &Grid, ky: &[f64]) -> Result<MonotoneMap> {
    if src.dim() != 1 || tgt.dim() != 1 {
        return Err(UotError::Unsupported("solve_1d needs one-dimensional grids".into()));
    }
    if kx.len() != src.len() || ky.len() != tgt.len() {
        return Err(UotError::GridMismatch("marginal length does not match its grid".into()));
    }
    check_density(kx, "source marginal")?;
    check_density(ky, "target marginal")?;
    check_mass(src.integrate(kx), tgt.integrate(ky))?;
    let axis = rearrange(src.axes[0], kx, tgt.axes[0], ky)?;
    Ok(MonotoneMap {
        source: src.clone(),
        target: tgt.clone(),
        axes: vec![axis],
        source_density: kx.to_vec(),
        target_density: ky.to_vec(),
    })
}

/// Factors `v = a_1 ⊗ … ⊗ a_d` of a separable grid function, if it is one
/// (relative tolerance `tol`).
pub fn separable_factors(grid: &Grid, v: &[f64], tol: f64) -> Option<Vec<Vec<f64>>> {
    let d = grid.dim();
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut factors: Vec<Vec<f64>> = grid.axes.iter().map(|a| vec![0.0; a.n]).collect();
    for (flat, &val) in v.iter().enumerate() {
        for (k, &i) in grid.multi_index(flat).iter().enumerate() {
            factors[k][i] += val;
        }
    }
    // For a product, v = Π_k (axis sums_k) / total^(d-1).
    let scale = total.powi(d as i32 - 1);
    let vmax = v.iter().copied().fold(0.0, f64::max);
    for (flat, &val) in v.iter().enumerate() {
        let p: f64 = grid.multi_index(flat).iter().enumerate().map(|(k, &i)| factors[k][i]).product();
        if (p / scale - val).abs() > tol * vmax {
            return None;
        }
    }
    Some(factors)
}

/// Tensor-product rearrangement for separable marginals.
pub fn solve_tensor(src: &Grid, kx: &[f64], tgt: &Grid, ky: &[f64]) -> Result<MonotoneMap> {
    if src.dim() != tgt.dim() {
        return Err(UotError::GridMismatch("source and target dimensions differ".into()));
    }
    check_density(kx, "source marginal")?;
    check_density(ky, "target marginal")?;
    check_mass(src.integrate(kx), tgt.integrate(ky))?;
    let fx = separable_factors(src, kx, 1e-9).ok_or_else(|| UotError::Unsupported("source marginal is not separable".into()))?;
    let fy = separable_factors(tgt, ky, 1e-9).ok_or_else(|| UotError::Unsupported("target marginal is not separable".into()))?;
    let axes = (0..src.dim())
        .map(|k| rearrange(src.axes[k], &fx[k], tgt.axes[k], &fy[k]))
        .collect::<Result<Vec<_>>>()?;
    Ok(MonotoneMap {
        source: src.clone(),
        target: tgt.clone(),
        axes,
        source_density: kx.to_vec(),
        target_density: ky.to_vec(),
    })
}

/// Dispatches to [`solve_1d`] or [`solve_tensor`] by dimension.
pub fn solve(src: &Grid, kx: &[f64], tgt: &Grid, ky: &[f64]) -> Result<MonotoneMap> {
    if src.dim() == 1 {
        solve_1d(src, kx, tgt, ky)
    } else {
        solve_tensor(src, kx, tgt, ky)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaResidual {
    pub sup: f64,
    /// Sup over cells not touching the boundary.
    pub interior_sup: f64,
    pub l1: f64,
    /// Smallest source cell side; residuals are expected to scale as O(h).
    pub h: f64,
    pub order: u32,
}

/// `|k_y(T(x))·det DT(x) − k_x(x)|` with finite-difference Jacobians and
/// `k_y` interpolated through target cell centers.
pub fn ma_residual(map: &MonotoneMap, kx: &[f64], ky: &[f64]) -> MaResidual {
    let dets = map.det_samples();
    let mut sup: f64 = 0.0;
    let mut interior: f64 = 0.0;
    let mut l1 = 0.0;
    for flat in 0..map.source.len() {
        let y = map.sample(flat);
        let r = (map.target.interpolate(ky, &y) * dets[flat] - kx[flat]).abs();
        sup = sup.max(r);
        l1 += r;
        let idx = map.source.multi_index(flat);
        let inner = idx.iter().zip(&map.source.axes).all(|(&i, a)| i > 0 && i + 1 < a.n);
        if inner {
            interior = interior.max(r);
        }
    }
    MaResidual {
        sup,
        interior_sup: interior,
        l1: l1 * map.source.cell_volume(),
        h: map.source.min_h(),
        order: 1,
    }
}

/// `|Σ h(T(x_i)) k_x(x_i) vol_x − Σ h(y_j) k_y(y_j) vol_y|` for a test
/// function `h`.
pub fn pushforward_error(map: &MonotoneMap, kx: &[f64], ky: &[f64], h: impl Fn(&[f64]) -> f64) -> f64 {
    let lhs: f64 = (0..map.source.len()).map(|i| h(&map.sample(i)) * kx[i]).sum::<f64>() * map.source.cell_volume();
    let rhs: f64 = (0..map.target.len()).map(|j| h(&map.target.point(j)) * ky[j]).sum::<f64>() * map.target.cell_volume();
    (lhs - rhs).abs()
}

/// File-exchange document for maps produced outside this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapExchange {
    pub grid: Grid,
    #[serde(rename = "T_values")]
    pub t_values: Vec<Vec<f64>>,
    pub det_values: Vec<f64>,
}

impl MapExchange {
    pub fn from_map(map: &MonotoneMap) -> Self {
        Self {
            grid: map.source.clone(),
            t_values: map.samples(),
            det_values: map.det_samples(),
        }
    }

    /// Rebuilds a diagonal map. Each component of `T` must depend on its own
    /// coordinate only; anything else is rejected as unsupported.
    pub fn into_map(self, target: &Grid, kx: &[f64], ky: &[f64]) -> Result<MonotoneMap> {
        let g = &self.grid;
        let d = g.dim();
        if self.t_values.len() != g.len() || self.det_values.len() != g.len() {
            return Err(UotError::Format("map exchange sizes disagree with grid".into()));
        }
        if self.t_values.iter().any(|t| t.len() != d) {
            return Err(UotError::Format("map exchange values have the wrong dimension".into()));
        }
        let mut axes = Vec::with_capacity(d);
        for k in 0..d {
            let a = g.axes[k];
            let mut vals = vec![f64::NAN; a.n];
            for flat in 0..g.len() {
                let i = g.multi_index(flat)[k];
                let v = self.t_values[flat][k];
                if vals[i].is_nan() {
                    vals[i] = v;
                } else if (vals[i] - v).abs() > 1e-12 * (1.0 + v.abs()) {
                    return Err(UotError::Unsupported("external map is not diagonal".into()));
                }
            }
            let mut am = AxisMap {
                source: a,
                target: target.axes[k],
                values: vals,
                slopes: vec![0.0; a.n],
            };
            am.slopes = (0..a.n).map(|i| am.fd_deriv(i)).collect();
            axes.push(am);
        }
        Ok(MonotoneMap {
            source: g.clone(),
            target: target.clone(),
            axes,
            source_density: kx.to_vec(),
            target_density: ky.to_vec(),
        })
    }
}

/// Plug point for Monge–Ampère solvers that live outside this crate.
pub trait ExternalMaSolver {
    fn solve(&self, src: &Grid, kx: &[f64], tgt: &Grid, ky: &[f64]) -> Result<MonotoneMap>;
}

/// Reads a precomputed map from a [`MapExchange`] JSON file.
#[derive(Debug, Clone)]
pub struct FileExchangeSolver {
    pub path: std::path::PathBuf,
}

impl ExternalMaSolver for FileExchangeSolver {
    fn solve(&self, src: &Grid, kx: &[f64], tgt: &Grid, ky: &[f64]) -> Result<MonotoneMap> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| UotError::Io(format!("{}: {e}", self.path.display())))?;
        let ex: MapExchange = serde_json::from_str(&text).map_err(|e| UotError::Format(e.to_string()))?;
        if &ex.grid != src {
            return Err(UotError::GridMismatch("external map grid differs from the source grid".into()));
        }
        ex.into_map(tgt, kx, ky)
    }
}
