//! Tensor Hermite expansions with Fejér-type tapering.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::quadrature::gauss_hermite;

/// Physicists' Hermite polynomial `H_n(x)` by the three-term recurrence.
pub fn hermite_1d(n: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    if n == 0 {
        return h0;
    }
    for i in 1..n {
        let h2 = 2.0 * x * h1 - 2.0 * i as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// `H_n(x) = ∏_l H_{n_l}(x_l)`.
pub fn hermite_poly(n: &[usize], x: &[f64]) -> f64 {
    n.iter().zip(x).map(|(&k, &xk)| hermite_1d(k, xk)).product()
}

/// `√(n! 2^n √π)`, the 1-D normalization.
pub fn norm_1d(n: usize) -> f64 {
    let mut s = PI.sqrt();
    for i in 1..=n {
        s *= 2.0 * i as f64;
    }
    s.sqrt()
}

/// `√(n⃗! 2^{|n⃗|} π^{d/2})`.
pub fn norm(n: &[usize]) -> f64 {
    n.iter().map(|&k| norm_1d(k)).product()
}

/// `H_k(x)/norm_1d(k)` for `k = 0..count`, stable for large `k`.
pub fn normalized_table(count: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25);
    out.push(cur);
    for k in 0..count.saturating_sub(1) {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * x * cur - (kf / (kf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
        out.push(cur);
    }
    out
}

/// Monomial coefficients of `H_n`, lowest degree first.
pub fn monomial_coeffs(n: usize) -> Vec<f64> {
    let mut h0 = vec![1.0];
    if n == 0 {
        return h0;
    }
    let mut h1 = vec![0.0, 2.0];
    for i in 1..n {
        let mut h2 = vec![0.0; i + 2];
        for (k, c) in h1.iter().enumerate() {
            h2[k + 1] += 2.0 * c;
        }
        for (k, c) in h0.iter().enumerate() {
            h2[k] -= 2.0 * i as f64 * c;
        }
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// `∏_{l : n_l > 𝐧} (2 − n_l/𝐧)`.
pub fn fejer_factor(n: &[usize], order: usize) -> f64 {
    n.iter().filter(|&&k| k > order).map(|&k| 2.0 - k as f64 / order as f64).product()
}

/// All multi-indices with every entry `≤ max`, last axis fastest.
pub fn index_box(d: usize, max: usize) -> Vec<Vec<usize>> {
    let side = max + 1;
    (0..side.pow(d as u32))
        .map(|mut flat| {
            let mut idx = vec![0; d];
            for k in (0..d).rev() {
                idx[k] = flat % side;
                flat /= side;
            }
            idx
        })
        .collect()
}

/// Which multi-indices enter the truncated expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// `n⃗ ≤ 2𝐧 − 1` with the taper `∏_{n_l > 𝐧}(2 − n_l/𝐧)`.
    #[default]
    Fejer,
    /// `n⃗ ≤ 𝐧` without tapering.
    Plain,
}

impl Truncation {
    /// Largest per-axis index kept at order `𝐧`, or `None` if nothing is kept.
    pub fn top(self, order: usize) -> Option<usize> {
        match self {
            Truncation::Fejer => (2 * order).checked_sub(1),
            Truncation::Plain => Some(order),
        }
    }
}

/// Coefficients against the orthonormal system `H_n⃗/norm(n⃗)`, one block
/// per time stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteExpansion {
    pub dim: usize,
    pub components: usize,
    /// Truncation order `𝐧`.
    pub order: usize,
    pub truncation: Truncation,
    pub indices: Vec<Vec<usize>>,
    pub fejer: Vec<f64>,
    /// `coeffs[stamp][index][component]`.
    pub coeffs: Vec<Vec<Vec<f64>>>,
    /// Gauss–Hermite nodes per axis used for the coefficients.
    pub nodes: usize,
}

/// Expand every field in `fields` (one per time stamp). With largest kept
/// index `p`, `nodes` points per axis must integrate degree `2p` exactly,
/// which needs `nodes ≥ p + 1`.
pub fn hermite_coeffs(
    fields: &[&dyn Fn(&[f64]) -> Vec<f64>],
    dim: usize,
    order: usize,
    truncation: Truncation,
    nodes: usize,
) -> Result<HermiteExpansion> {
    if dim == 0 {
        return Err(UotError::InvalidParameter("dimension must be positive".into()));
    }
    let top = truncation
        .top(order)
        .ok_or_else(|| UotError::InvalidParameter("the tapered expansion needs order at least 1".into()))?;
    if nodes < top + 1 {
        return Err(UotError::Unresolved(format!(
            "{nodes} Gauss-Hermite nodes cannot resolve degree {} (need at least {})",
            2 * top,
            top + 1
        )));
    }
    let indices = index_box(dim, top);
    let fejer: Vec<f64> = match truncation {
        Truncation::Fejer => indices.iter().map(|n| fejer_factor(n, order)).collect(),
        Truncation::Plain => vec![1.0; indices.len()],
    };
    let (x, w) = gauss_hermite(nodes);
    let tables: Vec<Vec<f64>> = x.iter().map(|&xi| normalized_table(top + 1, xi)).collect();
    let grid = index_box(dim, nodes - 1);

    let mut coeffs = Vec::with_capacity(fields.len());
    let mut components = 0;
    for field in fields {
        let mut block: Vec<Vec<f64>> = vec![];
        for q in &grid {
            let p: Vec<f64> = q.iter().map(|&i| x[i]).collect();
            let wq: f64 = q.iter().map(|&i| w[i]).product();
            let v = field(&p);
            if block.is_empty() {
                components = v.len();
                block = vec![vec![0.0; components]; indices.len()];
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(UotError::NumericalBlowup {
                    what: "field sample at Hermite node".into(),
                    iteration: 0,
                });
            }
            for (n, row) in indices.iter().zip(block.iter_mut()) {
                let basis: f64 = n.iter().zip(q).map(|(&k, &i)| tables[i][k]).product();
                let s = wq * basis;
                for (c, vi) in row.iter_mut().zip(&v) {
                    *c += s * vi;
                }
            }
        }
        coeffs.push(block);
    }
    Ok(HermiteExpansion {
        dim,
        components,
        order,
        truncation,
        indices,
        fejer,
        coeffs,
        nodes,
    })
}

impl HermiteExpansion {
    pub fn stamps(&self) -> usize {
        self.coeffs.len()
    }

    /// Largest per-axis index in the expansion.
    pub fn top(&self) -> usize {
        self.indices.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Reconstruction `Σ fejer · c · H_n⃗/norm(n⃗)` at stamp `m`.
    pub fn eval(&self, m: usize, x: &[f64]) -> Vec<f64> {
        let tables: Vec<Vec<f64>> = x.iter().map(|&xi| normalized_table(self.top() + 1, xi)).collect();
        let mut out = vec![0.0; self.components];
        for ((n, f), row) in self.indices.iter().zip(&self.fejer).zip(&self.coeffs[m]) {
            let basis: f64 = n.iter().enumerate().map(|(l, &k)| tables[l][k]).product();
            for (o, c) in out.iter_mut().zip(row) {
                *o += f * c * basis;
            }
        }
        out
    }

    /// Largest coefficient magnitude over stamps, for the uniform bound.
    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().flatten().flatten().fold(0.0, |a, c| a.max(c.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn low_order_polynomials() {
        for x in [-1.3, 0.0, 0.4, 2.0] {
            assert_eq!(hermite_1d(0, x), 1.0);
            assert_eq!(hermite_1d(1, x), 2.0 * x);
            assert_abs_diff_eq!(hermite_1d(2, x), 4.0 * x * x - 2.0, epsilon = 1e-14);
            assert_abs_diff_eq!(hermite_1d(3, x), 8.0 * x * x * x - 12.0 * x, epsilon = 1e-13);
        }
        assert_eq!(monomial_coeffs(2), vec![-2.0, 0.0, 4.0]);
        assert_eq!(monomial_coeffs(3), vec![0.0, -12.0, 0.0, 8.0]);
    }

    #[test]
    fn normalized_table_matches_direct() {
        for x in [-2.0, 0.3, 1.7] {
            let t = normalized_table(12, x);
            for (k, v) in t.iter().enumerate() {
                let direct = hermite_1d(k, x) / norm_1d(k);
                assert!((v - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn orthonormal_under_quadrature() {
        let top = 15;
        let (x, w) = gauss_hermite(top + 1);
        let tabs: Vec<Vec<f64>> = x.iter().map(|&xi| normalized_table(top + 1, xi)).collect();
        for n in 0..=top {
            for m in 0..=top {
                let ip: f64 = (0..x.len()).map(|q| w[q] * tabs[q][n] * tabs[q][m]).sum();
                assert_abs_diff_eq!(ip, if n == m { 1.0 } else { 0.0 }, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn basis_element_has_unit_coefficient() {
        let field = |x: &[f64]| vec![hermite_1d(2, x[0]) / norm_1d(2)];
        let e = hermite_coeffs(&[&field], 1, 2, Truncation::Fejer, 8).unwrap();
        for (n, c) in e.indices.iter().zip(&e.coeffs[0]) {
            let want = if n[0] == 2 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(c[0], want, epsilon = 1e-8);
        }
    }

    #[test]
    fn fejer_weights() {
        assert_eq!(fejer_factor(&[1, 2], 2), 1.0);
        assert_abs_diff_eq!(fejer_factor(&[3, 1], 2), 0.5);
        assert_abs_diff_eq!(fejer_factor(&[3, 3], 2), 0.25);
    }

    #[test]
    fn plain_truncation_keeps_low_indices() {
        let field = |x: &[f64]| vec![3.0 + x[0]];
        let e = hermite_coeffs(&[&field], 1, 0, Truncation::Plain, 4).unwrap();
        assert_eq!(e.indices, vec![vec![0]]);
        assert_abs_diff_eq!(e.eval(0, &[0.7])[0], 3.0, epsilon = 1e-12);
        assert!(hermite_coeffs(&[&field], 1, 0, Truncation::Fejer, 4).is_err());
    }

    #[test]
    fn under_resolved_quadrature_is_reported() {
        let field = |_: &[f64]| vec![1.0];
        assert!(matches!(
            hermite_coeffs(&[&field], 1, 4, Truncation::Fejer, 7),
            Err(UotError::Unresolved(_))
        ));
    }

    #[test]
    fn polynomial_field_reconstructs_in_two_dimensions() {
        let field = |x: &[f64]| vec![x[0] * x[1] - 0.5 * x[1], 1.0 + x[0]];
        let e = hermite_coeffs(&[&field], 2, 2, Truncation::Fejer, 6).unwrap();
        for p in [[0.3, -0.7], [1.5, 2.0], [-2.0, 0.1]] {
            let v = e.eval(0, &p);
            let want = field(&p);
            assert_abs_diff_eq!(v[0], want[0], epsilon = 1e-10);
            assert_abs_diff_eq!(v[1], want[1], epsilon = 1e-10);
        }
    }
}
