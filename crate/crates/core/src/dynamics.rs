//! Displacement interpolation `𝕋_t`, velocity `ξ_t`, growth `ζ_t` and the
//! pushforward density they transport.
//!
//! Densities are carried on Lagrangian samples: the source cell centers
//! `x_i` move to `𝕋_t(x_i)` and keep their label. Eulerian snapshots come
//! from [`EvolvedDensity::to_eulerian`].

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::grid::Grid;
use crate::monge_ampere::MonotoneMap;
use crate::uot::{Coupling, DualPotentials};

/// `f̄ = k̄_x/(1 − k̃*_1)` and `ḡ = k̄_y/(1 − k̃*_2)`, using the smoothed
/// potentials when present.
pub fn build_endpoint_densities(coupling: &Coupling, duals: &DualPotentials) -> Result<(Vec<f64>, Vec<f64>)> {
    let (k1, k2) = duals.smoothed();
    if k1.len() != coupling.kx.len() || k2.len() != coupling.ky.len() {
        return Err(UotError::GridMismatch("potentials do not match coupling marginals".into()));
    }
    let divide = |num: &[f64], pot: &[f64], what: &str| -> Result<Vec<f64>> {
        num.iter()
            .zip(pot)
            .map(|(&n, &p)| {
                let den = 1.0 - p;
                if den <= 0.0 {
                    Err(UotError::FeasibilityViolation {
                        what: format!("1 - {what} > 0"),
                        magnitude: -den,
                    })
                } else {
                    Ok(n / den)
                }
            })
            .collect()
    };
    Ok((divide(&coupling.kx, k1, "k1")?, divide(&coupling.ky, k2, "k2")?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsFields {
    /// Time horizon `T`.
    pub horizon: f64,
    pub map: MonotoneMap,
    /// Smoothed potential on the source grid.
    pub k1: Vec<f64>,
    /// Smoothed potential on the target grid.
    pub k2: Vec<f64>,
}

/// `𝕋_t` sampled at the source cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct MapAtTime {
    pub t: f64,
    pub points: Vec<Vec<f64>>,
}

impl DynamicsFields {
    pub fn new(horizon: f64, map: MonotoneMap, k1: Vec<f64>, k2: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(UotError::InvalidParameter(format!("horizon T = {horizon} must be positive")));
        }
        if k1.len() != map.source.len() || k2.len() != map.target.len() {
            return Err(UotError::GridMismatch("potentials do not match map grids".into()));
        }
        Ok(Self { horizon, map, k1, k2 })
    }

    pub fn source(&self) -> &Grid {
        &self.map.source
    }

    fn frac(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(UotError::InvalidParameter(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(t / self.horizon)
    }

    /// Smoothed `k̃*_1` at a source point.
    pub fn k1_at(&self, x: &[f64]) -> f64 {
        self.map.source.interpolate(&self.k1, x)
    }

    /// Smoothed `k̃*_2` at a target point.
    pub fn k2_at(&self, y: &[f64]) -> f64 {
        self.map.target.interpolate(&self.k2, y)
    }

    /// `𝕋_t(x) = (1 − t/T)x + (t/T)∇φ(x)` at an arbitrary point.
    pub fn forward(&self, x: &[f64], t: f64) -> Vec<f64> {
        let s = t / self.horizon;
        self.map
            .axes
            .iter()
            .zip(x)
            .map(|(a, &xi)| (1.0 - s) * xi + s * a.eval(xi))
            .collect()
    }

    /// `𝕋_t` at the source samples.
    pub fn interp_map(&self, t: f64) -> Result<MapAtTime> {
        self.frac(t)?;
        let points = (0..self.map.source.len())
            .map(|i| self.forward(&self.map.source.point(i), t))
            .collect();
        Ok(MapAtTime { t, points })
    }

    /// Per-axis bisection for `𝕋_t⁻¹(z)` on the whole line; the map is
    /// extended affinely beyond `Ω_f`, so every `z` has a preimage.
    pub fn inverse_unbounded(&self, z: &[f64], t: f64) -> Vec<f64> {
        let s = t / self.horizon;
        self.map
            .axes
            .iter()
            .zip(z)
            .map(|(a, &zk)| {
                let f = |x: f64| (1.0 - s) * x + s * a.eval(x);
                let w = a.source.width();
                let (mut lo, mut hi) = (a.source.lo, a.source.hi);
                while f(lo) > zk {
                    lo -= w;
                }
                while f(hi) < zk {
                    hi += w;
                }
                let tol = 1e-12 * w;
                while hi - lo > tol {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) < zk {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect()
    }

    /// `𝕋_t⁻¹(z)` for `z ∈ 𝕋_t(Ω_f)`.
    pub fn inverse(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let s = self.frac(t)?;
        for (a, &zk) in self.map.axes.iter().zip(z) {
            let lo = (1.0 - s) * a.source.lo + s * a.eval(a.source.lo);
            let hi = (1.0 - s) * a.source.hi + s * a.eval(a.source.hi);
            let slack = 1e-12 * (hi - lo).abs().max(a.source.width());
            if zk < lo - slack || zk > hi + slack {
                return Err(UotError::OutOfRange { point: z.to_vec(), t });
            }
        }
        Ok(self.inverse_unbounded(z, t))
    }

    /// `ξ_t(z) = (∇φ(y) − y)/T` with `y = 𝕋_t⁻¹(z)`.
    pub fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let y = self.inverse(z, t)?;
        Ok(self.velocity_at_source(&y))
    }

    /// Velocity along the characteristic labelled by `y`.
    pub fn velocity_at_source(&self, y: &[f64]) -> Vec<f64> {
        let ty = self.map.eval(y);
        ty.iter().zip(y).map(|(a, b)| (a - b) / self.horizon).collect()
    }

    /// `ζ_t(z)` with `y = 𝕋_t⁻¹(z)`.
    pub fn growth(&self, z: &[f64], t: f64) -> Result<f64> {
        let y = self.inverse(z, t)?;
        self.growth_at_source(&y, t)
    }

    /// Growth rate along the characteristic labelled by `y`.
    pub fn growth_at_source(&self, y: &[f64], t: f64) -> Result<f64> {
        let s = self.frac(t)?;
        let a = self.k1_at(y);
        let b = self.k2_at(&self.map.eval(y));
        Ok((-a / (1.0 - s * a) + b / (1.0 - s * b)) / self.horizon)
    }

    /// `(1 − (t/T)k̃*_1(x)) / (1 − (t/T)k̃*_2(∇φ(x)))`, the accumulated
    /// growth `exp ∫_0^t ζ` along the characteristic starting at `x`.
    pub fn mass_factor(&self, x: &[f64], t: f64) -> Result<f64> {
        let s = self.frac(t)?;
        let a = self.k1_at(x);
        let b = self.k2_at(&self.map.eval(x));
        Ok((1.0 - s * a) / (1.0 - s * b))
    }

    /// `det D𝕋_t` at source sample `flat`, from centered differences of `∇φ`.
    pub fn jacobian_det(&self, flat: usize, t: f64) -> f64 {
        let s = t / self.horizon;
        let idx = self.map.source.multi_index(flat);
        self.map
            .axes
            .iter()
            .zip(&idx)
            .map(|(a, &i)| (1.0 - s) + s * a.fd_deriv(i))
            .product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolvedDensity {
    pub times: Vec<f64>,
    pub source: Grid,
    /// `points[m][i] = 𝕋_{t_m}(x_i)`.
    pub points: Vec<Vec<Vec<f64>>>,
    /// `density[m][i] = μ_{t_m}(𝕋_{t_m}(x_i))`.
    pub density: Vec<Vec<f64>>,
    pub mass_factor: Vec<Vec<f64>>,
    pub jacobian: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
    /// Source density `f̄` at the samples.
    pub initial: Vec<f64>,
}

/// Pushes `f̄` forward: `μ_t(𝕋_t x) = f̄(x)·mass_factor(x,t)/det D𝕋_t(x)`.
pub fn evolve(fields: &DynamicsFields, f_bar: &[f64], times: &[f64]) -> Result<EvolvedDensity> {
    let src = fields.source().clone();
    if f_bar.len() != src.len() {
        return Err(UotError::GridMismatch("f_bar does not match the source grid".into()));
    }
    let vol = src.cell_volume();
    let xs = src.points();
    let mut out = EvolvedDensity {
        times: times.to_vec(),
        source: src.clone(),
        points: vec![],
        density: vec![],
        mass_factor: vec![],
        jacobian: vec![],
        masses: vec![],
        initial: f_bar.to_vec(),
    };
    for &t in times {
        let pts = fields.interp_map(t)?.points;
        let mut dens = Vec::with_capacity(xs.len());
        let mut mfs = Vec::with_capacity(xs.len());
        let mut jac = Vec::with_capacity(xs.len());
        let mut mass = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let det = fields.jacobian_det(i, t);
            if !(det > 0.0) {
                return Err(UotError::DegenerateMap { det, index: i });
            }
            let mf = fields.mass_factor(x, t)?;
            dens.push(f_bar[i] * mf / det);
            mfs.push(mf);
            jac.push(det);
            mass += f_bar[i] * mf;
        }
        out.points.push(pts);
        out.density.push(dens);
        out.mass_factor.push(mfs);
        out.jacobian.push(jac);
        out.masses.push(mass * vol);
    }
    Ok(out)
}

/// `n + 1` uniform stamps on `[0, T]`.
pub fn uniform_times(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| horizon * i as f64 / n as f64).collect()
}

impl EvolvedDensity {
    /// `∫ φ dμ_{t_m}` over the Lagrangian samples.
    pub fn integrate(&self, m: usize, phi: &dyn Fn(&[f64]) -> f64) -> f64 {
        let vol = self.source.cell_volume();
        self.points[m]
            .iter()
            .zip(&self.initial)
            .zip(&self.mass_factor[m])
            .map(|((p, f), mf)| phi(p) * f * mf)
            .sum::<f64>()
            * vol
    }

    /// Resamples `μ_{t_m}` onto `grid` by multilinear interpolation through
    /// the moved samples; zero outside the moved support box.
    pub fn to_eulerian(&self, m: usize, fields: &DynamicsFields, grid: &Grid) -> Vec<f64> {
        let t = self.times[m];
        let s = t / fields.horizon;
        let d = self.source.dim();
        let axes_pts: Vec<Vec<f64>> = fields
            .map
            .axes
            .iter()
            .map(|a| a.source.centers().iter().map(|&x| (1.0 - s) * x + s * a.eval(x)).collect())
            .collect();
        let support: Vec<(f64, f64)> = fields
            .map
            .axes
            .iter()
            .map(|a| {
                let lo = (1.0 - s) * a.source.lo + s * a.eval(a.source.lo);
                let hi = (1.0 - s) * a.source.hi + s * a.eval(a.source.hi);
                (lo, hi)
            })
            .collect();
        let mut out = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            let z = grid.point(flat);
            if (0..d).any(|k| z[k] < support[k].0 || z[k] > support[k].1) {
                out.push(0.0);
                continue;
            }
            let mut lo = vec![0usize; d];
            let mut fr = vec![0.0f64; d];
            for k in 0..d {
                let p = &axes_pts[k];
                let n = p.len();
                if n == 1 || z[k] <= p[0] {
                    lo[k] = 0;
                    fr[k] = 0.0;
                } else if z[k] >= p[n - 1] {
                    lo[k] = n - 2;
                    fr[k] = 1.0;
                } else {
                    let j = p.partition_point(|&v| v <= z[k]).saturating_sub(1).min(n - 2);
                    lo[k] = j;
                    let w = p[j + 1] - p[j];
                    fr[k] = if w > 0.0 { (z[k] - p[j]) / w } else { 0.0 };
                }
            }
            let mut acc = 0.0;
            let mut idx = vec![0usize; d];
            for corner in 0..(1usize << d) {
                let mut wgt = 1.0;
                for k in 0..d {
                    let up = (corner >> k) & 1 == 1;
                    if axes_pts[k].len() == 1 {
                        if up {
                            wgt = 0.0;
                        }
                        idx[k] = 0;
                    } else {
                        idx[k] = lo[k] + usize::from(up);
                        wgt *= if up { fr[k] } else { 1.0 - fr[k] };
                    }
                }
                if wgt != 0.0 {
                    acc += wgt * self.density[m][self.source.flat_index(&idx)];
                }
            }
            out.push(acc);
        }
        out
    }
}

/// A test function with its gradient.
pub struct TestFunction<'a> {
    pub value: &'a dyn Fn(&[f64]) -> f64,
    pub grad: &'a dyn Fn(&[f64]) -> Vec<f64>,
}

/// Weak-form residual of `∂_t μ + ∇·(ξμ) = ζμ` per test function: the
/// largest `|d/dt ∫φ dμ − ∫ξ·∇φ dμ − ∫φζ dμ|` over interior stamps, with
/// centered differences in time.
pub fn continuity_residual(evolved: &EvolvedDensity, fields: &DynamicsFields, tests: &[TestFunction]) -> Result<Vec<f64>> {
    let nt = evolved.times.len();
    if nt < 3 {
        return Err(UotError::InvalidParameter(
            "continuity residual needs at least 3 time stamps".into(),
        ));
    }
    let vol = evolved.source.cell_volume();
    let mut out = Vec::with_capacity(tests.len());
    for tf in tests {
        let ints: Vec<f64> = (0..nt).map(|m| evolved.integrate(m, tf.value)).collect();
        let mut worst: f64 = 0.0;
        for m in 1..nt - 1 {
            let dt = evolved.times[m + 1] - evolved.times[m - 1];
            let lhs = (ints[m + 1] - ints[m - 1]) / dt;
            let t = evolved.times[m];
            let mut rhs = 0.0;
            for (i, z) in evolved.points[m].iter().enumerate() {
                let w = evolved.initial[i] * evolved.mass_factor[m][i];
                let xi = fields.velocity(z, t)?;
                let zeta = fields.growth(z, t)?;
                let g = (tf.grad)(z);
                let adv: f64 = xi.iter().zip(&g).map(|(a, b)| a * b).sum();
                rhs += (adv + (tf.value)(z) * zeta) * w;
            }
            worst = worst.max((lhs - rhs * vol).abs());
        }
        out.push(worst);
    }
    Ok(out)
}

/// `exp ∫_0^t ζ_τ(𝕋_τ x) dτ` by composite Simpson with `steps` (even)
/// intervals, evaluating `ζ` through the inverse map.
pub fn mass_factor_by_quadrature(fields: &DynamicsFields, x: &[f64], t: f64, steps: usize) -> Result<f64> {
    let steps = steps + steps % 2;
    let h = t / steps as f64;
    let mut acc = 0.0;
    for k in 0..=steps {
        let tau = k as f64 * h;
        let z = fields.forward(x, tau);
        let w = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * fields.growth(&z, tau)?;
    }
    Ok((acc * h / 3.0).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monge_ampere::solve_1d;
    use approx::assert_abs_diff_eq;

    fn dilation(n: usize, k1: f64, k2: f64) -> DynamicsFields {
        let s = Grid::line(0.0, 1.0, n).unwrap();
        let t = Grid::line(0.0, 2.0, n).unwrap();
        let map = solve_1d(&s, &vec![1.0; n], &t, &vec![0.5; n]).unwrap();
        DynamicsFields::new(1.0, map, vec![k1; n], vec![k2; n]).unwrap()
    }

    #[test]
    fn endpoint_densities() {
        let gr = Grid::line(0.0, 1.0, 4).unwrap();
        let f = crate::grid::GridDensity::constant(gr.clone(), 1.0).unwrap();
        let spec = crate::uot::ProblemSpec::new(f.clone(), f, crate::grid::CostGrid::zero(&gr, &gr), 0.01).unwrap();
        let k = Coupling::constant(2.0 / 3.0, &spec);
        let d = DualPotentials::constant(1.0 / 3.0, 1.0 / 3.0, &spec);
        let (fb, gb) = build_endpoint_densities(&k, &d).unwrap();
        assert!(fb.iter().chain(&gb).all(|v| (v - 1.0).abs() < 1e-15));
        let z = DualPotentials::constant(0.0, 0.0, &spec);
        assert_eq!(build_endpoint_densities(&k, &z).unwrap().0, k.kx);
        let bad = DualPotentials::constant(1.0, 0.0, &spec);
        assert!(matches!(
            build_endpoint_densities(&k, &bad),
            Err(UotError::FeasibilityViolation { .. })
        ));
    }

    #[test]
    fn interp_map_cases() {
        let f = dilation(10, 0.0, 0.0);
        let m0 = f.interp_map(0.0).unwrap();
        assert!((0..10).all(|i| m0.points[i] == f.source().point(i)));
        let m1 = f.interp_map(1.0).unwrap();
        assert!((0..10).all(|i| (m1.points[i][0] - 2.0 * f.source().point(i)[0]).abs() < 1e-14));
        for i in 0..10 {
            let x = f.source().point(i);
            let z = f.forward(&x, 0.5);
            assert_abs_diff_eq!(z[0], 1.5 * x[0], epsilon = 1e-14);
            assert_abs_diff_eq!(f.inverse(&z, 0.5).unwrap()[0], x[0], epsilon = 1e-10);
        }
        assert!(matches!(f.inverse(&[1.6], 0.5), Err(UotError::OutOfRange { .. })));
    }

    #[test]
    fn identity_has_zero_velocity() {
        let s = Grid::line(0.0, 1.0, 8).unwrap();
        let id = MonotoneMap::identity(&s, &[1.0; 8]);
        let f = DynamicsFields::new(2.0, id, vec![0.2; 8], vec![0.2; 8]).unwrap();
        for i in 0..8 {
            let x = s.point(i);
            assert_abs_diff_eq!(f.velocity(&x, 1.0).unwrap()[0], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(f.growth(&x, 1.0).unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dilation_closed_forms() {
        let (a, b) = (0.2, 0.35);
        let f = dilation(16, a, b);
        for i in 0..16 {
            let x = f.source().point(i);
            for t in [0.0, 0.3, 0.5, 1.0] {
                let z = f.forward(&x, t);
                assert_abs_diff_eq!(f.velocity(&z, t).unwrap()[0], x[0], epsilon = 1e-10);
                let zeta = -a / (1.0 - t * a) + b / (1.0 - t * b);
                assert_abs_diff_eq!(f.growth(&z, t).unwrap(), zeta, epsilon = 1e-12);
                assert_abs_diff_eq!(f.mass_factor(&x, t).unwrap(), (1.0 - t * a) / (1.0 - t * b), epsilon = 1e-14);
            }
            assert_eq!(f.mass_factor(&x, 0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn mass_factor_matches_quadrature() {
        let s = Grid::line(0.0, 1.0, 32).unwrap();
        let t = Grid::line(0.0, 1.5, 32).unwrap();
        let kx: Vec<f64> = s.axes[0].centers().iter().map(|x| 1.0 + 0.5 * x).collect();
        let mass = s.integrate(&kx);
        let ky: Vec<f64> = t.axes[0]
            .centers()
            .iter()
            .map(|y| (2.0 - y) * mass / t.integrate(&t.axes[0].centers().iter().map(|y| 2.0 - y).collect::<Vec<_>>()))
            .collect();
        let map = solve_1d(&s, &kx, &t, &ky).unwrap();
        let k1: Vec<f64> = s.axes[0].centers().iter().map(|x| 0.3 * x).collect();
        let k2: Vec<f64> = t.axes[0].centers().iter().map(|y| 0.1 + 0.2 * y).collect();
        let f = DynamicsFields::new(1.0, map, k1, k2).unwrap();
        for i in [0, 7, 20, 31] {
            let x = s.point(i);
            let closed = f.mass_factor(&x, 1.0).unwrap();
            let quad = mass_factor_by_quadrature(&f, &x, 1.0, 400).unwrap();
            assert!((closed - quad).abs() < 1e-6, "{closed} vs {quad}");
        }
    }

    #[test]
    fn identity_evolution_is_static() {
        let s = Grid::line(0.0, 1.0, 12).unwrap();
        let fb: Vec<f64> = s.axes[0].centers().iter().map(|x| 1.0 + x).collect();
        let f = DynamicsFields::new(1.0, MonotoneMap::identity(&s, &fb), vec![0.1; 12], vec![0.1; 12]).unwrap();
        let ev = evolve(&f, &fb, &uniform_times(1.0, 8)).unwrap();
        for dens in &ev.density {
            assert!(dens.iter().zip(&fb).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let one = |_: &[f64]| 1.0;
        let zero = |_: &[f64]| vec![0.0];
        let res = continuity_residual(&ev, &f, &[TestFunction { value: &one, grad: &zero }]).unwrap();
        assert!(res[0] <= 1e-8);
    }

    #[test]
    fn dilation_conserves_mass_without_growth() {
        let f = dilation(32, 0.25, 0.25);
        let fb = vec![1.0; 32];
        let ev = evolve(&f, &fb, &uniform_times(1.0, 16)).unwrap();
        for (m, &t) in ev.times.iter().enumerate() {
            assert_abs_diff_eq!(ev.masses[m], 1.0, epsilon = 1e-10);
            assert!(ev.density[m].iter().all(|v| (v - 1.0 / (1.0 + t)).abs() < 1e-12));
        }
        let first = |x: &[f64]| x[0];
        let grad = |_: &[f64]| vec![1.0];
        let res = continuity_residual(
            &ev,
            &f,
            &[TestFunction {
                value: &first,
                grad: &grad,
            }],
        )
        .unwrap();
        assert!(res[0] < 1.0 / 32.0 + (1.0f64 / 16.0).powi(2), "{res:?}");
    }

    #[test]
    fn growth_changes_mass() {
        let f = dilation(16, 0.1, 0.4);
        let ev = evolve(&f, &[1.0; 16], &uniform_times(1.0, 4)).unwrap();
        assert_abs_diff_eq!(ev.masses[4], 0.9 / 0.6, epsilon = 1e-12);
        let g = Grid::line(0.0, 2.0, 16).unwrap();
        let eul = ev.to_eulerian(4, &f, &g);
        assert!(eul.iter().all(|v| (v - 0.5 * 0.9 / 0.6).abs() < 1e-12));
    }

    #[test]
    fn degenerate_map_is_reported() {
        let s = Grid::line(0.0, 1.0, 4).unwrap();
        let mut map = MonotoneMap::identity(&s, &[1.0; 4]);
        map.axes[0].values = vec![0.0, 0.0, 0.0, 0.0];
        let f = DynamicsFields::new(1.0, map, vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert!(matches!(evolve(&f, &[1.0; 4], &[0.0, 1.0]), Err(UotError::DegenerateMap { .. })));
    }
}
