//! Assembly of `(W_i(t), A_i, b_i)` and evaluation of
//! `ξ̃_t(x) = Σ_i W_i(t) 𝚺(A_i x + b_i)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::grid::Grid;
use crate::neural::hermite::{index_box, norm, HermiteExpansion, Truncation};
use crate::neural::nai::{Activation, NaiKernel};
use crate::neural::ridge::{lattice_points, RidgeExpansion, RidgeFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeInterp {
    #[default]
    Linear,
    Piecewise,
}

/// Uniform partition of the ridge argument range for one direction
/// `v = (1, u)`; cells have the kernel width and nodes are midpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub point: Vec<usize>,
    pub direction: Vec<f64>,
    pub z: Vec<f64>,
    pub nodes: Vec<f64>,
}

impl Partition {
    /// Covers `|x·v| ≤ M‖v‖₁` plus `reach + 1` kernel widths on each side.
    pub fn new(point: Vec<usize>, m_box: f64, kernel_width: f64, reach: f64) -> Self {
        let direction: Vec<f64> = std::iter::once(1.0).chain(point.iter().map(|&k| k as f64)).collect();
        let r = m_box * direction.iter().map(|v| v.abs()).sum::<f64>();
        let half = r + (reach + 1.0) * kernel_width;
        let cells = (2.0 * half / kernel_width).ceil() as usize;
        let lo = -(cells as f64) * kernel_width / 2.0;
        let z: Vec<f64> = (0..=cells).map(|k| lo + k as f64 * kernel_width).collect();
        let nodes = z.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        Self {
            point,
            direction,
            z,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    /// Diagonal of `W_i(t)` at every time stamp.
    pub w_diag: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralFieldParams {
    pub activation: NaiKernel,
    #[serde(rename = "N")]
    pub n: usize,
    pub dim: usize,
    pub order: usize,
    pub truncation: Truncation,
    pub times: Vec<f64>,
    pub time_interp: TimeInterp,
    #[serde(rename = "M")]
    pub m_box: f64,
    /// Mollifier width `ς`.
    pub sigma: f64,
    pub kernel_width: f64,
    pub partitions: Vec<Partition>,
    pub units: Vec<Unit>,
}

/// Per-axis index bound of the truncated expansion; zero if nothing is kept.
fn index_top(order: usize, truncation: Truncation) -> Option<usize> {
    truncation.top(order)
}

/// `N = N′ Σ_{n⃗} Σ_{𝐦 ≤ |n⃗|} Σ_m l_{m}` where `l_m` is the partition size
/// for direction `v_m`.
pub fn expected_unit_count(dim: usize, order: usize, truncation: Truncation, n_prime: usize, l_of: impl Fn(&[usize]) -> usize) -> usize {
    let Some(top) = index_top(order, truncation) else { return 0 };
    let mut per_degree: Vec<usize> = vec![];
    let mut total = 0;
    for n in index_box(dim, top) {
        let deg: usize = n.iter().sum();
        while per_degree.len() <= deg {
            let m = per_degree.len();
            per_degree.push(lattice_points(dim, m).iter().map(|u| l_of(u)).sum());
        }
        total += per_degree[..=deg].iter().sum::<usize>();
    }
    total * n_prime
}

#[derive(Debug, Clone)]
pub struct AssemblyInput<'a> {
    pub expansion: &'a HermiteExpansion,
    pub family: &'a RidgeFamily,
    pub kernel: &'a NaiKernel,
    pub kernel_width: f64,
    pub m_box: f64,
    pub sigma: f64,
    pub times: &'a [f64],
    pub time_interp: TimeInterp,
}

pub fn assemble(inp: &AssemblyInput) -> Result<NeuralFieldParams> {
    let e = inp.expansion;
    let d = e.dim;
    if inp.times.len() != e.stamps() {
        return Err(UotError::InvalidParameter("one time per coefficient stamp is required".into()));
    }
    if !(inp.kernel_width > 0.0) || !(inp.m_box > 0.0) {
        return Err(UotError::InvalidParameter("kernel width and box bound must be positive".into()));
    }
    let max_deg = d * e.top();
    if inp.family.dim != d || inp.family.max_degree() < max_deg {
        return Err(UotError::InvalidParameter("ridge family does not cover the expansion".into()));
    }
    let kw = inp.kernel_width;
    let k = inp.kernel;
    let mut partitions = vec![];
    let mut lookup: HashMap<Vec<usize>, usize> = HashMap::new();
    for u in lattice_points(d, max_deg) {
        lookup.insert(u.clone(), partitions.len());
        partitions.push(Partition::new(u, inp.m_box, kw, k.reach));
    }

    let mut units = vec![];
    for (idx, (n, fejer)) in e.indices.iter().zip(&e.fejer).enumerate() {
        let ridge: RidgeExpansion = inp.family.express(n)?;
        let scale = fejer / (kw * norm(n));
        for (deg, hs) in ridge.by_degree.iter().enumerate() {
            let basis = &inp.family.bases[deg];
            for (u, &h) in basis.points.iter().zip(hs) {
                let part = &partitions[lookup[u]];
                for i in 0..k.n_prime() {
                    let row: Vec<f64> = part.direction.iter().map(|v| k.a[i] * v / kw).collect();
                    for (l, &wl) in part.nodes.iter().enumerate() {
                        let dz = part.z[l + 1] - part.z[l];
                        let c = scale * h * dz * wl.powi(deg as i32) * k.w[i];
                        let w_diag = e.coeffs.iter().map(|block| block[idx].iter().map(|cj| c * cj).collect()).collect();
                        units.push(Unit {
                            w_diag,
                            a: vec![row.clone(); d],
                            b: vec![k.b[i] - k.a[i] * wl / kw; d],
                        });
                    }
                }
            }
        }
    }
    let n = units.len();
    let params = NeuralFieldParams {
        activation: k.clone(),
        n,
        dim: d,
        order: e.order,
        truncation: e.truncation,
        times: inp.times.to_vec(),
        time_interp: inp.time_interp,
        m_box: inp.m_box,
        sigma: inp.sigma,
        kernel_width: kw,
        partitions,
        units,
    };
    params.validate()?;
    Ok(params)
}

impl NeuralFieldParams {
    /// Shape, counting and finiteness checks.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        let bad = |msg: String| Err(UotError::Format(msg));
        if self.n != self.units.len() {
            return bad(format!("N = {} but {} units are listed", self.n, self.units.len()));
        }
        if self.times.is_empty() || self.times.windows(2).any(|p| !(p[0] < p[1])) {
            return bad("time stamps must be nonempty and strictly increasing".into());
        }
        let sizes: HashMap<&[usize], usize> = self.partitions.iter().map(|p| (p.point.as_slice(), p.len())).collect();
        let want = expected_unit_count(d, self.order, self.truncation, self.activation.n_prime(), |u| {
            sizes.get(u).copied().unwrap_or(0)
        });
        if want != self.n {
            return bad(format!("counting formula gives N = {want}, found {}", self.n));
        }
        for (i, u) in self.units.iter().enumerate() {
            let shape_ok = u.w_diag.len() == self.times.len()
                && u.w_diag.iter().all(|w| w.len() == d)
                && u.a.len() == d
                && u.a.iter().all(|r| r.len() == d)
                && u.b.len() == d;
            if !shape_ok {
                return bad(format!("unit {i} has inconsistent shapes for dimension {d}"));
            }
            if u.w_diag
                .iter()
                .flatten()
                .chain(u.a.iter().flatten())
                .chain(&u.b)
                .any(|v| !v.is_finite())
            {
                return bad(format!("unit {i} has non-finite entries"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| UotError::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s).map_err(|e| UotError::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn network(&self) -> Network {
        Network::from_params(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Neuron {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    /// Rows of `a` and entries of `b` coincide, so one activation suffices.
    scalar: bool,
    w: Vec<Vec<f64>>,
}

/// Evaluation form of the parameters: units sharing `(A, b)` are merged
/// and units with identically zero weights are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub dim: usize,
    pub activation: Activation,
    pub times: Vec<f64>,
    pub time_interp: TimeInterp,
    pub m_box: f64,
    neurons: Vec<Neuron>,
}

impl Network {
    pub fn from_params(p: &NeuralFieldParams) -> Self {
        let mut neurons: Vec<Neuron> = vec![];
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for u in &p.units {
            if u.w_diag.iter().flatten().all(|&w| w == 0.0) {
                continue;
            }
            let key: Vec<u64> = u.a.iter().flatten().chain(&u.b).map(|v| (v + 0.0).to_bits()).collect();
            match seen.get(&key) {
                Some(&k) => {
                    for (acc, w) in neurons[k].w.iter_mut().zip(&u.w_diag) {
                        for (a, b) in acc.iter_mut().zip(w) {
                            *a += b;
                        }
                    }
                }
                None => {
                    let scalar = u.a.iter().all(|r| *r == u.a[0]) && u.b.iter().all(|&b| b == u.b[0]);
                    seen.insert(key, neurons.len());
                    neurons.push(Neuron {
                        a: u.a.clone(),
                        b: u.b.clone(),
                        scalar,
                        w: u.w_diag.clone(),
                    });
                }
            }
        }
        Self {
            dim: p.dim,
            activation: p.activation.activation,
            times: p.times.clone(),
            time_interp: p.time_interp,
            m_box: p.m_box,
            neurons,
        }
    }

    /// A network that is identically zero.
    pub fn zero(dim: usize, m_box: f64, times: Vec<f64>) -> Self {
        Self {
            dim,
            activation: Activation::Relu,
            times,
            time_interp: TimeInterp::Linear,
            m_box,
            neurons: vec![],
        }
    }

    pub fn neuron_count(&self) -> usize {
        self.neurons.len()
    }

    /// Stamp weights `(m0, 1 − θ), (m1, θ)` for time `t`.
    fn stamp_weights(&self, x: &[f64], t: f64) -> Result<(usize, usize, f64)> {
        let ts = &self.times;
        let last = ts.len() - 1;
        let span = (ts[last] - ts[0]).abs().max(1.0);
        if t < ts[0] - 1e-12 * span || t > ts[last] + 1e-12 * span || !t.is_finite() {
            return Err(UotError::OutOfRange { point: x.to_vec(), t });
        }
        if last == 0 {
            return Ok((0, 0, 0.0));
        }
        let m = ts.partition_point(|&s| s <= t).clamp(1, last) - 1;
        let theta = ((t - ts[m]) / (ts[m + 1] - ts[m])).clamp(0.0, 1.0);
        Ok(match self.time_interp {
            TimeInterp::Linear => (m, m + 1, theta),
            TimeInterp::Piecewise if theta >= 1.0 => (m + 1, m + 1, 0.0),
            TimeInterp::Piecewise => (m, m, 0.0),
        })
    }

    /// `ξ̃_t(x)`; `OutOfBox` when `x ∉ [−M, M]^d`.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let tol = 1e-12 * self.m_box;
        if x.len() != self.dim {
            return Err(UotError::InvalidParameter(format!(
                "point has dimension {}, expected {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !(v.abs() <= self.m_box + tol)) {
            return Err(UotError::OutOfBox {
                point: x.to_vec(),
                m: self.m_box,
            });
        }
        let (m0, m1, th) = self.stamp_weights(x, t)?;
        Ok(self.eval_at(x, m0, m1, th))
    }

    fn eval_at(&self, x: &[f64], m0: usize, m1: usize, th: f64) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        let mut act = vec![0.0; d];
        for nr in &self.neurons {
            if nr.scalar {
                let y: f64 = nr.a[0].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + nr.b[0];
                act.fill(self.activation.eval(y));
            } else {
                for j in 0..d {
                    let y: f64 = nr.a[j].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + nr.b[j];
                    act[j] = self.activation.eval(y);
                }
            }
            for j in 0..d {
                let w = if th == 0.0 {
                    nr.w[m0][j]
                } else {
                    (1.0 - th) * nr.w[m0][j] + th * nr.w[m1][j]
                };
                out[j] += w * act[j];
            }
        }
        out
    }
}

/// `ξ̃_t(x)` straight from the parameters.
pub fn eval_network(params: &NeuralFieldParams, x: &[f64], t: f64) -> Result<Vec<f64>> {
    params.network().eval(x, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldErrorAt {
    pub t: f64,
    pub l2: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldErrorReport {
    pub per_time: Vec<FieldErrorAt>,
    pub max_l2: f64,
    pub max_linf: f64,
}

/// Vector-valued L² and L∞ distances over the cells of `region` at each time.
pub fn field_error(net: &Network, reference: &dyn Fn(&[f64], f64) -> Vec<f64>, region: &Grid, times: &[f64]) -> Result<FieldErrorReport> {
    distance_report(&|x, t| net.eval(x, t), reference, region, times)
}

/// Same report for any pair of fields.
pub fn distance_report(
    a: &dyn Fn(&[f64], f64) -> Result<Vec<f64>>,
    b: &dyn Fn(&[f64], f64) -> Vec<f64>,
    region: &Grid,
    times: &[f64],
) -> Result<FieldErrorReport> {
    let vol = region.cell_volume();
    let pts = region.points();
    let mut per_time = Vec::with_capacity(times.len());
    for &t in times {
        let (mut sq, mut sup) = (0.0f64, 0.0f64);
        for p in &pts {
            let va = a(p, t)?;
            let vb = b(p, t);
            let e2: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum();
            sq += e2 * vol;
            sup = sup.max(e2.sqrt());
        }
        per_time.push(FieldErrorAt {
            t,
            l2: sq.sqrt(),
            linf: sup,
        });
    }
    let max_l2 = per_time.iter().fold(0.0f64, |m, e| m.max(e.l2));
    let max_linf = per_time.iter().fold(0.0f64, |m, e| m.max(e.linf));
    Ok(FieldErrorReport {
        per_time,
        max_l2,
        max_linf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::hermite::hermite_coeffs;
    use approx::assert_abs_diff_eq;

    fn build(
        field: &dyn Fn(&[f64]) -> Vec<f64>,
        dim: usize,
        order: usize,
        tr: Truncation,
        kw: f64,
        kernel: &NaiKernel,
    ) -> NeuralFieldParams {
        let e = hermite_coeffs(&[field], dim, order, tr, 12).unwrap();
        let fam = RidgeFamily::new(dim, dim * e.top()).unwrap();
        assemble(&AssemblyInput {
            expansion: &e,
            family: &fam,
            kernel,
            kernel_width: kw,
            m_box: 2.0,
            sigma: 0.1,
            times: &[0.0],
            time_interp: TimeInterp::Linear,
        })
        .unwrap()
    }

    #[test]
    fn constant_field_single_index() {
        let relu = NaiKernel::relu();
        let p = build(&|_| vec![1.5], 1, 0, Truncation::Plain, 0.25, &relu);
        let l0 = p.partitions[0].len();
        assert_eq!(p.n, 3 * l0);
        // Hand assembly: Σ_l Δ Γ_κ(x − w_l) = 1 inside the partition, times
        // the coefficient 1.5·√(√π) against H_0/norm.
        let c = 1.5 * std::f64::consts::PI.powf(0.25);
        for x in [-2.0, -0.3, 0.0, 1.1, 2.0] {
            let hand: f64 = p.partitions[0].nodes.iter().map(|&w| 0.25 * relu.gamma_scaled(x - w, 0.25)).sum();
            let v = eval_network(&p, &[x], 0.0).unwrap()[0];
            assert_abs_diff_eq!(v, c * hand / std::f64::consts::PI.powf(0.25), epsilon = 1e-12);
            assert_abs_diff_eq!(v, 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn counting_formula_one_dimension() {
        let relu = NaiKernel::relu();
        let p = build(&|x| vec![x[0]], 1, 2, Truncation::Fejer, 0.25, &relu);
        let l = p.partitions[0].len();
        assert!(p.partitions.iter().all(|q| q.len() == l));
        // Indices 0..=3, degrees 0..=n: 1 + 2 + 3 + 4 ridge terms.
        assert_eq!(p.n, 3 * 10 * l);
    }

    #[test]
    fn relu_network_interpolates_linear_field() {
        let relu = NaiKernel::relu();
        let p = build(&|x| vec![0.5 * x[0] - 0.25], 1, 1, Truncation::Fejer, 0.1, &relu);
        for x in [-2.0, -1.23, 0.0, 0.77, 2.0] {
            assert_abs_diff_eq!(eval_network(&p, &[x], 0.0).unwrap()[0], 0.5 * x - 0.25, epsilon = 1e-10);
        }
        assert!(matches!(eval_network(&p, &[2.5], 0.0), Err(UotError::OutOfBox { .. })));
    }

    #[test]
    fn weights_are_diagonal_and_rows_match_formula() {
        let relu = NaiKernel::relu();
        let p = build(&|x| vec![x[0] * x[1], x[0] - x[1]], 2, 1, Truncation::Fejer, 0.5, &relu);
        assert!(p.units.iter().all(|u| u.w_diag.iter().all(|w| w.len() == 2)));
        let json = p.to_json().unwrap();
        let back = NeuralFieldParams::from_json(&json).unwrap();
        assert_eq!(back, p);
        let mut broken = p.clone();
        broken.units.pop();
        broken.n -= 1;
        assert!(NeuralFieldParams::from_json(&broken.to_json().unwrap()).is_err());
    }

    #[test]
    fn two_dimensional_bilinear_field() {
        let relu = NaiKernel::relu();
        let field = |x: &[f64]| vec![x[0] * x[1], x[0] - x[1]];
        let p = build(&field, 2, 1, Truncation::Fejer, 0.05, &relu);
        let net = p.network();
        for x in [[0.3, -0.4], [1.0, 1.5], [-1.9, 0.2]] {
            let v = net.eval(&x, 0.0).unwrap();
            let want = field(&x);
            assert_abs_diff_eq!(v[1], want[1], epsilon = 1e-9);
            // Piecewise-linear interpolation of (x·v)² costs κ²/4 per ridge term.
            assert!((v[0] - want[0]).abs() < 0.05);
        }
    }

    #[test]
    fn zero_field_gives_zero_network() {
        let relu = NaiKernel::relu();
        let p = build(&|_| vec![0.0], 1, 1, Truncation::Fejer, 0.2, &relu);
        assert!(p.units.iter().all(|u| u.w_diag.iter().flatten().all(|&w| w == 0.0)));
        assert_eq!(p.network().neuron_count(), 0);
        assert_eq!(eval_network(&p, &[0.3], 0.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn time_interpolation_modes() {
        let relu = NaiKernel::relu();
        let e = hermite_coeffs(&[&|_: &[f64]| vec![1.0], &|_: &[f64]| vec![3.0]], 1, 1, Truncation::Fejer, 8).unwrap();
        let fam = RidgeFamily::new(1, 1).unwrap();
        let mut inp = AssemblyInput {
            expansion: &e,
            family: &fam,
            kernel: &relu,
            kernel_width: 0.25,
            m_box: 1.0,
            sigma: 0.1,
            times: &[0.0, 1.0],
            time_interp: TimeInterp::Linear,
        };
        let p = assemble(&inp).unwrap();
        assert_abs_diff_eq!(eval_network(&p, &[0.2], 0.25).unwrap()[0], 1.5, epsilon = 1e-10);
        inp.time_interp = TimeInterp::Piecewise;
        let q = assemble(&inp).unwrap();
        assert_abs_diff_eq!(eval_network(&q, &[0.2], 0.25).unwrap()[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(eval_network(&q, &[0.2], 1.0).unwrap()[0], 3.0, epsilon = 1e-10);
        assert!(matches!(eval_network(&p, &[0.2], 1.5), Err(UotError::OutOfRange { .. })));
    }
}
