//! Bump-kernel mollification.
//!
//! `S(x) = exp(−1/(1 − ‖x‖²))` inside the unit ball and `Γ_ς(x) = S(x/ς) /
//! (ς^d ∫S)`. Grid functions are treated as piecewise constant, extended by
//! zero outside their grid, and the result is returned as exact cell
//! averages of the continuous convolution. That keeps the output continuous
//! in `ς` even when the kernel is narrower than a cell.

use crate::error::{Result, UotError};
use crate::grid::Grid;
use crate::quadrature::{composite_legendre, gauss_legendre};

/// Unnormalized bump as a function of `‖x‖²`.
pub fn bump(r2: f64) -> f64 {
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// `∫_{ℝ^d} S`, computed radially.
pub fn bump_mass(d: usize) -> f64 {
    let (r, w) = composite_legendre(0.0, 1.0, 64, 16);
    let radial: f64 = r.iter().zip(&w).map(|(r, w)| w * r.powi(d as i32 - 1) * bump(r * r)).sum();
    // Surface area of the unit sphere in ℝ^d.
    let area = 2.0 * std::f64::consts::PI.powf(d as f64 / 2.0) / gamma_half(d);
    area * radial
}

/// `Γ(d/2)` for positive integers `d`.
fn gamma_half(d: usize) -> f64 {
    let mut g = if d.is_multiple_of(2) { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut k = if d.is_multiple_of(2) { 1.0 } else { 0.5 };
    while k < d as f64 / 2.0 {
        g *= k;
        k += 1.0;
    }
    g
}

/// Normalized kernel `Γ_ς`.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    pub sigma: f64,
    pub d: usize,
    norm: f64,
}

impl Kernel {
    pub fn new(sigma: f64, d: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(UotError::InvalidParameter(format!("mollifier width {sigma} must be positive")));
        }
        Ok(Self {
            sigma,
            d,
            norm: 1.0 / (sigma.powi(d as i32) * bump_mass(d)),
        })
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let r2: f64 = z.iter().map(|v| v * v).sum::<f64>() / (self.sigma * self.sigma);
        self.norm * bump(r2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero extension outside the grid, then restriction to the grid.
    #[default]
    ZeroExtend,
    /// Divide by the kernel mass that falls inside the grid.
    Renormalize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mollified {
    pub values: Vec<f64>,
    pub width: f64,
    pub l2_distance: f64,
    /// Kernel narrower than the smallest cell.
    pub under_resolved: bool,
}

fn gl_on(a: f64, b: f64, max_len: f64, order: usize) -> (Vec<f64>, Vec<f64>) {
    if b <= a {
        return (vec![], vec![]);
    }
    let panels = ((b - a) / max_len).ceil().max(1.0) as usize;
    composite_legendre(a, b, panels, order)
}

/// Cell-average weights `W(m) = ∫ Γ_ς(z) Π_k Λ_k(z_k − m_k h_k) dz`
/// where `Λ_k` is the unit hat of half-width `h_k`. Keys are offsets.
fn cell_weights(grid: &Grid, kernel: &Kernel) -> Vec<(Vec<i64>, f64)> {
    let d = grid.dim();
    let sig = kernel.sigma;
    let hs: Vec<f64> = grid.axes.iter().map(|a| a.h()).collect();
    let reach: Vec<i64> = hs.iter().map(|h| (sig / h).ceil() as i64 + 1).collect();
    // Per axis and offset: nodes and weights (already multiplied by Λ).
    let per_axis: Vec<Vec<(i64, Vec<f64>, Vec<f64>)>> = (0..d)
        .map(|k| {
            let h = hs[k];
            (-reach[k]..=reach[k])
                .filter_map(|m| {
                    let c = m as f64 * h;
                    let mut xs = vec![];
                    let mut ws = vec![];
                    for (a, b) in [(c - h, c), (c, c + h)] {
                        let (x, w) = gl_on(a.max(-sig), b.min(sig), sig / 8.0, 8);
                        for (xi, wi) in x.into_iter().zip(w) {
                            let lam = (1.0 - (xi - c).abs() / h).max(0.0);
                            xs.push(xi);
                            ws.push(wi * lam);
                        }
                    }
                    (!xs.is_empty()).then_some((m, xs, ws))
                })
                .collect()
        })
        .collect();
    let mut out = vec![];
    let mut idx = vec![0usize; d];
    loop {
        // Tensor quadrature over this combination of axis offsets.
        let mut total = 0.0;
        let mut pidx = vec![0usize; d];
        let mut z = vec![0.0; d];
        'outer: loop {
            let mut w = 1.0;
            for k in 0..d {
                let (_, xs, ws) = &per_axis[k][idx[k]];
                z[k] = xs[pidx[k]];
                w *= ws[pidx[k]];
            }
            total += w * kernel.eval(&z);
            for k in (0..d).rev() {
                pidx[k] += 1;
                if pidx[k] < per_axis[k][idx[k]].1.len() {
                    continue 'outer;
                }
                pidx[k] = 0;
            }
            break;
        }
        if total > 0.0 {
            out.push(((0..d).map(|k| per_axis[k][idx[k]].0).collect(), total));
        }
        let mut k = d;
        loop {
            if k == 0 {
                let s: f64 = out.iter().map(|(_, w)| w).sum();
                for (_, w) in &mut out {
                    *w /= s;
                }
                return out;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < per_axis[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Mollifies a piecewise-constant grid function with width `sigma`.
pub fn mollify_grid(grid: &Grid, values: &[f64], sigma: f64, boundary: Boundary) -> Result<Mollified> {
    if values.len() != grid.len() {
        return Err(UotError::GridMismatch("values do not match grid".into()));
    }
    let kernel = Kernel::new(sigma, grid.dim())?;
    let weights = cell_weights(grid, &kernel);
    let d = grid.dim();
    let mut out = Vec::with_capacity(values.len());
    for flat in 0..grid.len() {
        let i = grid.multi_index(flat);
        let mut acc = 0.0;
        let mut inside = 0.0;
        let mut j = vec![0usize; d];
        'w: for (m, w) in &weights {
            for k in 0..d {
                let jk = i[k] as i64 - m[k];
                if jk < 0 || jk >= grid.axes[k].n as i64 {
                    continue 'w;
                }
                j[k] = jk as usize;
            }
            acc += w * values[grid.flat_index(&j)];
            inside += w;
        }
        out.push(match boundary {
            Boundary::ZeroExtend => acc,
            Boundary::Renormalize => acc / inside,
        });
    }
    let l2_distance = grid.l2_dist(values, &out);
    Ok(Mollified {
        values: out,
        width: sigma,
        l2_distance,
        under_resolved: sigma < grid.min_h(),
    })
}

/// Largest width found by bisection with `‖values − mollified‖_{L²} < eps0`.
pub fn mollify_to_tolerance(grid: &Grid, values: &[f64], eps0: f64, boundary: Boundary) -> Result<Mollified> {
    if !(eps0 > 0.0) {
        return Err(UotError::InvalidParameter(format!("eps0 = {eps0} must be positive")));
    }
    let widest = grid.axes.iter().map(|a| a.width()).fold(0.0, f64::max);
    let top = mollify_grid(grid, values, widest, boundary)?;
    if top.l2_distance < eps0 {
        return Ok(top);
    }
    let (mut lo, mut hi) = (0.0, widest);
    let mut best: Option<Mollified> = None;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let m = mollify_grid(grid, values, mid, boundary)?;
        if m.l2_distance < eps0 {
            lo = mid;
            best = Some(m);
        } else {
            hi = mid;
        }
    }
    best.ok_or_else(|| UotError::InternalError("no mollifier width meets the tolerance".into()))
}

/// Quadrature stencil `Σ_p w_p F(x − z_p) ≈ (Γ_ς * F)(x)` with weights
/// renormalized to sum to one.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub sigma: f64,
    pub offsets: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Stencil {
    /// Product Gauss–Legendre rule on `[−ς, ς]^d` with `panels` panels of
    /// `order` points per axis.
    pub fn new(sigma: f64, d: usize, panels: usize, order: usize) -> Result<Self> {
        let kernel = Kernel::new(sigma, d)?;
        let (x, w) = if panels == 1 {
            let (x, w) = gauss_legendre(order);
            (
                x.iter().map(|v| v * sigma).collect::<Vec<_>>(),
                w.iter().map(|v| v * sigma).collect::<Vec<_>>(),
            )
        } else {
            composite_legendre(-sigma, sigma, panels, order)
        };
        let n = x.len();
        let mut offsets = vec![];
        let mut weights = vec![];
        let total = n.pow(d as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut z = vec![0.0; d];
            let mut wt = 1.0;
            for zk in z.iter_mut().rev() {
                let i = rem % n;
                rem /= n;
                *zk = x[i];
                wt *= w[i];
            }
            let val = wt * kernel.eval(&z);
            if val > 0.0 {
                offsets.push(z);
                weights.push(val);
            }
        }
        let s: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= s;
        }
        Ok(Self { sigma, offsets, weights })
    }

    /// Mollified vector field at `x`.
    pub fn apply(&self, x: &[f64], f: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        let mut acc: Vec<f64> = vec![];
        let mut p = vec![0.0; x.len()];
        for (z, w) in self.offsets.iter().zip(&self.weights) {
            for k in 0..x.len() {
                p[k] = x[k] - z[k];
            }
            let v = f(&p);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            for (a, b) in acc.iter_mut().zip(&v) {
                *a += w * b;
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bump_mass_one_dimension() {
        // Reference value of ∫_{-1}^{1} exp(−1/(1−x²)) dx.
        assert_abs_diff_eq!(bump_mass(1), 0.443_993_816_168_079_4, epsilon = 1e-12);
        let k = Kernel::new(0.3, 1).unwrap();
        let (x, w) = composite_legendre(-0.3, 0.3, 40, 16);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * k.eval(&[*x])).sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        let k2 = Kernel::new(0.5, 2).unwrap();
        let (x, w) = composite_legendre(-0.5, 0.5, 20, 16);
        let mut s = 0.0;
        for (a, wa) in x.iter().zip(&w) {
            for (b, wb) in x.iter().zip(&w) {
                s += wa * wb * k2.eval(&[*a, *b]);
            }
        }
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_interior_unchanged() {
        let g = Grid::line(0.0, 1.0, 64).unwrap();
        let m = mollify_grid(&g, &[2.5; 64], 0.05, Boundary::ZeroExtend).unwrap();
        for (i, v) in m.values.iter().enumerate() {
            if (5..59).contains(&i) {
                assert_abs_diff_eq!(*v, 2.5, epsilon = 1e-12);
            }
        }
        assert!(m.values[0] < 2.5);
        let r = mollify_grid(&g, &[2.5; 64], 0.05, Boundary::Renormalize).unwrap();
        assert!(r.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn step_transition_width() {
        let n = 400;
        let g = Grid::line(-1.0, 1.0, n).unwrap();
        let x = g.axes[0].centers();
        let step: Vec<f64> = x.iter().map(|&v| if v < 0.0 { 0.0 } else { 1.0 }).collect();
        let sig = 0.1;
        let m = mollify_grid(&g, &step, sig, Boundary::Renormalize).unwrap();
        let first = x.iter().zip(&m.values).find(|(_, v)| **v > 1e-9).unwrap().0;
        let last = x.iter().zip(&m.values).rev().find(|(_, v)| **v < 1.0 - 1e-9).unwrap().0;
        let width = last - first;
        assert!((width - 2.0 * sig).abs() < 4.0 * g.min_h(), "width {width}");
    }

    #[test]
    fn lipschitz_rate() {
        let g = Grid::line(0.0, 1.0, 2000).unwrap();
        let v: Vec<f64> = g.axes[0].centers().iter().map(|x| (x - 0.4).abs()).collect();
        let d: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&s| mollify_grid(&g, &v, s, Boundary::Renormalize).unwrap().l2_distance)
            .collect();
        assert!(d[0] > d[1] && d[1] > d[2]);
        // A single kink costs O(ς^{3/2}) in L², at least as fast as O(ς).
        assert!(d[1] / d[0] < 0.6 && d[2] / d[1] < 0.6, "{d:?}");
    }

    #[test]
    fn sub_cell_width_is_continuous() {
        let g = Grid::line(0.0, 1.0, 16).unwrap();
        let v = vec![1.0; 16];
        let a = mollify_grid(&g, &v, 1e-3, Boundary::ZeroExtend).unwrap();
        let b = mollify_grid(&g, &v, 2e-3, Boundary::ZeroExtend).unwrap();
        assert!(a.under_resolved);
        assert!(a.l2_distance > 0.0 && a.l2_distance < b.l2_distance);
    }

    #[test]
    fn tolerance_search() {
        let g = Grid::line(0.0, 1.0, 64).unwrap();
        let v = vec![1.0 / 3.0; 64];
        for eps in [0.1, 0.02, 0.005] {
            let m = mollify_to_tolerance(&g, &v, eps, Boundary::ZeroExtend).unwrap();
            assert!(m.l2_distance < eps);
            assert!(m.l2_distance > 0.5 * eps);
        }
    }

    #[test]
    fn stencil_reproduces_linear_fields() {
        let s = Stencil::new(0.2, 1, 4, 8).unwrap();
        let out = s.apply(&[0.7], &|x: &[f64]| vec![3.0 * x[0] - 1.0]);
        assert_abs_diff_eq!(out[0], 3.0 * 0.7 - 1.0, epsilon = 1e-12);
        let s2 = Stencil::new(0.2, 2, 2, 8).unwrap();
        let out = s2.apply(&[0.1, -0.3], &|x: &[f64]| vec![x[0] + 2.0 * x[1], 1.0]);
        assert_abs_diff_eq!(out[0], 0.1 - 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-12);
    }
}
