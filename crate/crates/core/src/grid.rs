//! Uniform tensor grids, densities and cost tables.
//!
//! All integrals in the crate use the midpoint rule on these grids, so a
//! quantity like `∫ v` is `cell_volume * Σ v_i` everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};

/// One axis of a uniform grid: `n` cells splitting `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo || n == 0 {
            return Err(UotError::InvalidParameter(format!("axis [{lo}, {hi}] with {n} cells")));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn h(&self) -> f64 {
        self.width() / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.h()
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.h()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }
}

/// Row-major tensor grid; the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(UotError::InvalidParameter("grid needs at least one axis".into()));
        }
        for a in &axes {
            Axis::new(a.lo, a.hi, a.n)?;
        }
        Ok(Self { axes })
    }

    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![Axis::new(lo, hi, n)?])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.h()).product()
    }

    /// |Ω| as cell volume times cell count.
    pub fn volume(&self) -> f64 {
        self.cell_volume() * self.len() as f64
    }

    /// Smallest cell side.
    pub fn min_h(&self) -> f64 {
        self.axes.iter().map(|a| a.h()).fold(f64::INFINITY, f64::min)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (k, a) in self.axes.iter().enumerate().rev() {
            idx[k] = flat % a.n;
            flat /= a.n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        self.axes.iter().zip(idx).fold(0, |acc, (a, &i)| acc * a.n + i)
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat).iter().zip(&self.axes).map(|(&i, a)| a.center(i)).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Midpoint integral of grid values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Squared L² norm by the midpoint rule.
    pub fn norm2_sq(&self, values: &[f64]) -> f64 {
        values.iter().map(|v| v * v).sum::<f64>() * self.cell_volume()
    }

    pub fn l2_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * self.cell_volume()).sqrt()
    }

    pub fn l1_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * self.cell_volume()
    }

    /// Cell containing `x` on each axis, clamped to the grid.
    pub fn locate(&self, x: &[f64]) -> Vec<usize> {
        self.axes
            .iter()
            .zip(x)
            .map(|(a, &xi)| {
                let t = ((xi - a.lo) / a.h()).floor();
                (t.max(0.0) as usize).min(a.n - 1)
            })
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.axes.iter().zip(x).all(|(a, &xi)| xi >= a.lo && xi <= a.hi)
    }

    /// Piecewise-constant lookup (value of the cell containing `x`).
    pub fn lookup(&self, values: &[f64], x: &[f64]) -> f64 {
        values[self.flat_index(&self.locate(x))]
    }

    /// Multilinear interpolation through cell centers, constant beyond the
    /// outermost centers.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        let mut lo_idx = vec![0usize; d];
        let mut frac = vec![0.0f64; d];
        for k in 0..d {
            let a = &self.axes[k];
            let s = (x[k] - a.lo) / a.h() - 0.5;
            if a.n == 1 || s <= 0.0 {
                lo_idx[k] = 0;
                frac[k] = 0.0;
            } else if s >= (a.n - 1) as f64 {
                lo_idx[k] = a.n - 2;
                frac[k] = 1.0;
            } else {
                let i = s.floor() as usize;
                lo_idx[k] = i;
                frac[k] = s - i as f64;
            }
        }
        let mut acc = 0.0;
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut wgt = 1.0;
            for k in 0..d {
                let up = (corner >> k) & 1 == 1;
                if self.axes[k].n == 1 {
                    if up {
                        wgt = 0.0;
                    }
                    idx[k] = 0;
                    continue;
                }
                idx[k] = lo_idx[k] + usize::from(up);
                wgt *= if up { frac[k] } else { 1.0 - frac[k] };
            }
            if wgt != 0.0 {
                acc += wgt * values[self.flat_index(&idx)];
            }
        }
        acc
    }
}

/// A density on a uniform grid together with its lower-bound witness `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub c_lower: f64,
}

impl GridDensity {
    pub fn new(grid: Grid, values: Vec<f64>, c_lower: f64) -> Result<Self> {
        let d = Self { grid, values, c_lower };
        d.validate()?;
        Ok(d)
    }

    /// Density whose witness is its own minimum.
    pub fn with_min_witness(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let c = values.iter().copied().fold(f64::INFINITY, f64::min);
        Self::new(grid, values, c)
    }

    pub fn constant(grid: Grid, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n], value)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid.len() {
            return Err(UotError::GridMismatch(format!(
                "{} values for {} cells",
                self.values.len(),
                self.grid.len()
            )));
        }
        if !(self.c_lower > 0.0 && self.c_lower.is_finite()) {
            return Err(UotError::InvalidDensity(format!(
                "lower bound witness c = {} must be positive",
                self.c_lower
            )));
        }
        if !(self.grid.volume() > 0.0) {
            return Err(UotError::InvalidDensity("support has zero volume".into()));
        }
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(UotError::InvalidDensity(format!("non-finite value at cell {i}")));
            }
            if v < self.c_lower {
                return Err(UotError::InvalidDensity(format!(
                    "value {v} at cell {i} below witness c = {}",
                    self.c_lower
                )));
            }
        }
        Ok(())
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Closed-form tag for a cost table, when one is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Zero,
    SquaredDistance,
    Distance,
    Tabulated,
}

/// Cost values `C(x_i, y_j)` stored with the x index slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostGrid {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
    pub kind: CostKind,
}

impl CostGrid {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>, kind: CostKind) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(UotError::GridMismatch(format!(
                "cost has {} values, expected {nx}x{ny}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(UotError::InvalidParameter(format!(
                "cost value {} at {i} must be finite and nonnegative",
                values[i]
            )));
        }
        Ok(Self { nx, ny, values, kind })
    }

    pub fn zero(fx: &Grid, gy: &Grid) -> Self {
        Self {
            nx: fx.len(),
            ny: gy.len(),
            values: vec![0.0; fx.len() * gy.len()],
            kind: CostKind::Zero,
        }
    }

    pub fn from_fn(fx: &Grid, gy: &Grid, kind: CostKind, c: impl Fn(&[f64], &[f64]) -> f64) -> Result<Self> {
        let xs = fx.points();
        let ys = gy.points();
        let mut values = Vec::with_capacity(xs.len() * ys.len());
        for x in &xs {
            for y in &ys {
                values.push(c(x, y));
            }
        }
        Self::new(xs.len(), ys.len(), values, kind)
    }

    pub fn squared_distance(fx: &Grid, gy: &Grid) -> Result<Self> {
        Self::from_fn(fx, gy, CostKind::SquaredDistance, |x, y| {
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
        })
    }

    pub fn distance(fx: &Grid, gy: &Grid) -> Result<Self> {
        Self::from_fn(fx, gy, CostKind::Distance, |x, y| {
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ny + j]
    }

    /// Largest `|C(p) - C(p')| / dist(p,p')^γ` over grid neighbours in the
    /// product grid, where neighbours differ by one cell along one axis.
    pub fn holder_modulus(&self, fx: &Grid, gy: &Grid, gamma: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nx {
            let mi = fx.multi_index(i);
            for j in 0..self.ny {
                let mj = gy.multi_index(j);
                let c0 = self.at(i, j);
                for k in 0..fx.dim() {
                    if mi[k] + 1 < fx.axes[k].n {
                        let mut m2 = mi.clone();
                        m2[k] += 1;
                        let i2 = fx.flat_index(&m2);
                        let r = (self.at(i2, j) - c0).abs() / fx.axes[k].h().powf(gamma);
                        worst = worst.max(r);
                    }
                }
                for k in 0..gy.dim() {
                    if mj[k] + 1 < gy.axes[k].n {
                        let mut m2 = mj.clone();
                        m2[k] += 1;
                        let j2 = gy.flat_index(&m2);
                        let r = (self.at(i, j2) - c0).abs() / gy.axes[k].h().powf(gamma);
                        worst = worst.max(r);
                    }
                }
            }
        }
        worst
    }
}
