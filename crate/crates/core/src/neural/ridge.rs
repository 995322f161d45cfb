//! Ridge monomials `(x·v_m)^𝐦` spanning homogeneous polynomials, and the
//! change of basis from tensor Hermite polynomials.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::neural::hermite::monomial_coeffs;

/// Exponent vectors `α ∈ ℕ^d` with `|α| = total`, lexicographic.
pub fn exponents(d: usize, total: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return if total == 0 { vec![vec![]] } else { vec![] };
    }
    if d == 1 {
        return vec![vec![total]];
    }
    let mut out = vec![];
    for first in (0..=total).rev() {
        for mut rest in exponents(d - 1, total - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Nonnegative integer points `u ∈ ℕ^{d−1}` with `u_1 + … + u_{d−1} ≤ m`.
pub fn lattice_points(d: usize, m: usize) -> Vec<Vec<usize>> {
    if d <= 1 {
        return vec![vec![]];
    }
    (0..=m).flat_map(|s| exponents(d - 1, s)).collect()
}

/// `C(m + d − 1, d − 1)`.
pub fn count(d: usize, m: usize) -> usize {
    let k = d.saturating_sub(1);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (m + k - i) as u128 / (i + 1) as u128;
    }
    c as usize
}

fn multinomial(alpha: &[usize]) -> f64 {
    let mut c = 1.0;
    let mut n = 0;
    for &a in alpha {
        for i in 1..=a {
            n += 1;
            c *= n as f64 / i as f64;
        }
    }
    c
}

/// Directions `v_m = (1, u_m)` for one homogeneous degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeBasis {
    pub dim: usize,
    pub degree: usize,
    pub points: Vec<Vec<usize>>,
    pub directions: Vec<Vec<f64>>,
    /// Homogeneous exponents in the row order of the linear system.
    pub exponents: Vec<Vec<usize>>,
}

impl RidgeBasis {
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        if dim == 0 {
            return Err(UotError::InvalidParameter("dimension must be positive".into()));
        }
        let points = lattice_points(dim, degree);
        let directions = points
            .iter()
            .map(|u| std::iter::once(1.0).chain(u.iter().map(|&k| k as f64)).collect())
            .collect();
        Ok(Self {
            dim,
            degree,
            points,
            directions,
            exponents: exponents(dim, degree),
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// `G_{m,𝐦}(x) = (x·v_m)^𝐦`.
    pub fn eval(&self, m: usize, x: &[f64]) -> f64 {
        let s: f64 = x.iter().zip(&self.directions[m]).map(|(a, b)| a * b).sum();
        s.powi(self.degree as i32)
    }

    fn system(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |r, c| {
            let alpha = &self.exponents[r];
            let v = &self.directions[c];
            multinomial(alpha) * alpha.iter().zip(v).map(|(&a, &vk)| vk.powi(a as i32)).product::<f64>()
        })
    }

    /// Coefficients `h_m` with `Σ_α p_α x^α = Σ_m h_m (x·v_m)^𝐦`, where
    /// `p` is indexed like `self.exponents`.
    pub fn solve(&self, p: &[f64]) -> Result<Vec<f64>> {
        let a = self.system();
        let lu = a.clone().lu();
        let rhs = DVector::from_column_slice(p);
        let h = lu.solve(&rhs).ok_or_else(|| {
            UotError::InternalError(format!(
                "ridge system of degree {} in dimension {} is singular ({} directions)",
                self.degree,
                self.dim,
                self.len()
            ))
        })?;
        let resid = (&a * &h - &rhs).amax();
        let scale = rhs.amax().max(1.0);
        if !(resid <= 1e-9 * scale) {
            return Err(UotError::InternalError(format!(
                "ridge system of degree {} in dimension {} solved with residual {resid:e}",
                self.degree, self.dim
            )));
        }
        Ok(h.iter().copied().collect())
    }
}

/// Bases for every degree up to `max_degree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFamily {
    pub dim: usize,
    pub bases: Vec<RidgeBasis>,
}

/// `h_{n⃗,m,𝐦}` for one Hermite index, grouped by degree `𝐦 = 0..=|n⃗|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeExpansion {
    pub index: Vec<usize>,
    pub by_degree: Vec<Vec<f64>>,
}

impl RidgeFamily {
    pub fn new(dim: usize, max_degree: usize) -> Result<Self> {
        let bases = (0..=max_degree).map(|m| RidgeBasis::new(dim, m)).collect::<Result<_>>()?;
        Ok(Self { dim, bases })
    }

    pub fn max_degree(&self) -> usize {
        self.bases.len() - 1
    }

    /// Express `H_n⃗` in ridge monomials.
    pub fn express(&self, n: &[usize]) -> Result<RidgeExpansion> {
        if n.len() != self.dim {
            return Err(UotError::InvalidParameter("Hermite index has the wrong dimension".into()));
        }
        let total: usize = n.iter().sum();
        if total > self.max_degree() {
            return Err(UotError::InvalidParameter(format!(
                "degree {total} exceeds the family's {}",
                self.max_degree()
            )));
        }
        let per_axis: Vec<Vec<f64>> = n.iter().map(|&k| monomial_coeffs(k)).collect();
        let mut by_degree = Vec::with_capacity(total + 1);
        for m in 0..=total {
            let basis = &self.bases[m];
            let p: Vec<f64> = basis
                .exponents
                .iter()
                .map(|alpha| {
                    alpha
                        .iter()
                        .zip(&per_axis)
                        .map(|(&a, c)| c.get(a).copied().unwrap_or(0.0))
                        .product()
                })
                .collect();
            if p.iter().all(|&c| c == 0.0) {
                by_degree.push(vec![0.0; basis.len()]);
            } else {
                by_degree.push(basis.solve(&p)?);
            }
        }
        Ok(RidgeExpansion {
            index: n.to_vec(),
            by_degree,
        })
    }

    /// `Σ_𝐦 Σ_m h_{m,𝐦} (x·v_m)^𝐦`.
    pub fn eval(&self, e: &RidgeExpansion, x: &[f64]) -> f64 {
        e.by_degree
            .iter()
            .enumerate()
            .map(|(m, h)| h.iter().enumerate().map(|(k, hk)| hk * self.bases[m].eval(k, x)).sum::<f64>())
            .sum()
    }
}
