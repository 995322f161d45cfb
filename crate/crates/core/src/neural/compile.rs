//! End-to-end compilation of a velocity field `ξ_t` into a network whose
//! measured field error stays within a requested budget.
//!
//! The three approximation stages (mollify, truncate, quadratize) each get a
//! third of the internal budget `ε′₁`. Each stage parameter is refined by
//! halving or doubling until its measured error fits; if a cap is hit the
//! compile fails with `BudgetNotMet` rather than returning a weaker network.

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsFields;
use crate::error::{Result, UotError};
use crate::grid::{Axis, Grid};
use crate::neural::assemble::{assemble, expected_unit_count, AssemblyInput, Network, NeuralFieldParams, Partition, TimeInterp};
use crate::neural::hermite::{hermite_coeffs, HermiteExpansion, Truncation};
use crate::neural::mollify::Stencil;
use crate::neural::nai::NaiKernel;
use crate::neural::ridge::RidgeFamily;

pub type FieldFn<'a> = dyn Fn(&[f64], f64) -> Vec<f64> + 'a;

/// A velocity field defined on all of `ℝ^d` for `t ∈ [0, T]`, with the
/// constants that fix the internal budget and the box.
pub struct FieldSource<'a> {
    pub dim: usize,
    pub horizon: f64,
    pub field: &'a FieldFn<'a>,
    /// Lipschitz bound `𝔏`.
    pub lipschitz: f64,
    /// `min det D²φ` over the source.
    pub min_det: f64,
    /// `max_{Ω_f} ‖x‖`.
    pub source_radius: f64,
    /// Sup-norm radius of `Ω_f ∪ ∇φ(Ω_f)`.
    pub endpoint_radius: f64,
    /// `sup_t ‖ξ_t‖_∞` over the transported support.
    pub field_sup: f64,
}

/// `ε′₁ = ε₁ min{1, min det} / (e^𝔏 (e^{T𝔏} − 1))`.
pub fn internal_budget(eps1: f64, lipschitz: f64, horizon: f64, min_det: f64) -> f64 {
    eps1 * min_det.min(1.0) / (lipschitz.exp() * (horizon * lipschitz).exp_m1())
}

/// Smallest integer `M` with `M > max‖x‖ + T(ε′₁ + sup‖ξ‖)` and
/// `Ω_f ∪ ∇φ(Ω_f) ⊂ [−M + 1, M − 1]^d`.
pub fn box_bound(src: &FieldSource, eps1_prime: f64) -> f64 {
    let a = src.source_radius + src.horizon * (eps1_prime + src.field_sup);
    (a.max(src.endpoint_radius) + 1.0).ceil()
}

/// Constants of a [`FieldSource`] read off transport dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConstants {
    pub lipschitz: f64,
    pub lip_xi: f64,
    pub lip_zeta: f64,
    pub potential_term: f64,
    pub min_det: f64,
    pub source_radius: f64,
    pub endpoint_radius: f64,
    pub field_sup: f64,
}

/// `𝔏 = max{Lip ξ_t, Lip ζ_t, 1 + δ max{|Ω_f|,|Ω_g|}(‖k̄*₁‖_∞ + ‖k̄*₂‖_∞)/2E}`
/// with the Lipschitz constants taken from neighbouring moved samples at
/// the given times.
pub fn dynamics_constants(fields: &DynamicsFields, times: &[f64], delta: f64, vol_max: f64, e_sup: f64) -> Result<DynamicsConstants> {
    let src = fields.source();
    let n = src.len();
    let d = src.dim();
    let xs = src.points();
    let (mut lip_xi, mut lip_zeta, mut field_sup) = (0.0f64, 0.0f64, 0.0f64);
    let vel: Vec<Vec<f64>> = xs.iter().map(|x| fields.velocity_at_source(x)).collect();
    for v in &vel {
        field_sup = field_sup.max(v.iter().fold(0.0f64, |m, c| m.max(c.abs())));
    }
    for &t in times {
        let moved: Vec<Vec<f64>> = xs.iter().map(|x| fields.forward(x, t)).collect();
        let growth: Vec<f64> = xs.iter().map(|x| fields.growth_at_source(x, t)).collect::<Result<_>>()?;
        for i in 0..n {
            let idx = src.multi_index(i);
            for k in 0..d {
                if idx[k] + 1 >= src.axes[k].n {
                    continue;
                }
                let mut jdx = idx.clone();
                jdx[k] += 1;
                let j = src.flat_index(&jdx);
                let dist = moved[i].iter().zip(&moved[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if dist <= 0.0 {
                    continue;
                }
                let dv = vel[i].iter().zip(&vel[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                lip_xi = lip_xi.max(dv / dist);
                lip_zeta = lip_zeta.max((growth[i] - growth[j]).abs() / dist);
            }
        }
    }
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let potential_term = 1.0 + delta * vol_max * (sup(&fields.k1) + sup(&fields.k2)) / (2.0 * e_sup);
    let min_det = fields.map.exact_det_samples().into_iter().fold(f64::INFINITY, f64::min);
    let source_radius = src.axes.iter().map(|a| a.lo.abs().max(a.hi.abs()).powi(2)).sum::<f64>().sqrt();
    let mut endpoint_radius = src.axes.iter().fold(0.0f64, |m, a| m.max(a.lo.abs()).max(a.hi.abs()));
    for x in &xs {
        endpoint_radius = endpoint_radius.max(sup(&fields.map.eval(x)));
    }
    Ok(DynamicsConstants {
        lipschitz: lip_xi.max(lip_zeta).max(potential_term),
        lip_xi,
        lip_zeta,
        potential_term,
        min_det,
        source_radius,
        endpoint_radius,
        field_sup,
    })
}

/// `ξ_t(z) = (∇φ(y) − y)/T` with `y = 𝕋_t⁻¹(z)` on all of `ℝ^d`; beyond
/// the transported support the map's affine extension continues the field.
pub fn dynamics_field(fields: &DynamicsFields) -> impl Fn(&[f64], f64) -> Vec<f64> + '_ {
    move |z, t| fields.velocity_at_source(&fields.inverse_unbounded(z, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileConfig {
    pub eps1: f64,
    pub kernel: NaiKernel,
    pub truncation: Truncation,
    pub time_interp: TimeInterp,
    /// Initial number of time stamps (at least 2).
    pub stamps: usize,
    pub max_stamps: usize,
    /// Cells per axis of the evaluation grid on `[−M, M]^d`.
    pub eval_cells: usize,
    pub sigma_start: f64,
    pub sigma_min: f64,
    pub max_order: usize,
    pub kernel_width_start: f64,
    pub kernel_width_min: f64,
    pub max_units: usize,
    /// Gauss–Legendre panels and order per axis for pointwise mollification.
    pub stencil_panels: usize,
    pub stencil_order: usize,
}

impl CompileConfig {
    pub fn new(eps1: f64, dim: usize) -> Self {
        Self {
            eps1,
            kernel: NaiKernel::relu(),
            truncation: Truncation::Fejer,
            time_interp: TimeInterp::Linear,
            stamps: 3,
            max_stamps: 65,
            eval_cells: if dim == 1 { 400 } else { 40 },
            sigma_start: 0.5,
            sigma_min: 1e-4,
            max_order: if dim == 1 { 32 } else { 6 },
            kernel_width_start: 0.5,
            kernel_width_min: 1e-3,
            max_units: 4_000_000,
            stencil_panels: 4,
            stencil_order: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageErrors {
    pub mollify: f64,
    pub truncate: f64,
    pub quadratize: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileReport {
    pub eps1: f64,
    pub eps1_prime: f64,
    pub lipschitz: f64,
    pub min_det: f64,
    pub m_box: f64,
    pub sigma: f64,
    pub order: usize,
    pub kernel_width: f64,
    pub stamps: usize,
    pub units: usize,
    pub neurons: usize,
    /// Largest measured L² error over the stamps, per stage.
    pub stages: StageErrors,
    /// Largest L² distance to `ξ_t` at the stamps and at their midpoints.
    pub total_l2: f64,
    pub total_linf: f64,
    /// Largest ‖Hermite coefficient‖ and its Bessel bound.
    pub max_coeff: f64,
    pub coeff_bound: f64,
}

pub struct Compiled {
    pub params: NeuralFieldParams,
    pub network: Network,
    pub expansion: HermiteExpansion,
    pub report: CompileReport,
}

fn l2_between(grid: &Grid, a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let vol = grid.cell_volume();
    let (mut sq, mut sup) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let e2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        sq += e2 * vol;
        sup = sup.max(e2.sqrt());
    }
    (sq.sqrt(), sup)
}

pub fn compile(src: &FieldSource, cfg: &CompileConfig) -> Result<Compiled> {
    if !(cfg.eps1 > 0.0) || !(src.horizon > 0.0) || src.dim == 0 {
        return Err(UotError::InvalidParameter("eps1, T and the dimension must be positive".into()));
    }
    if cfg.stamps < 2 {
        return Err(UotError::InvalidParameter("at least two time stamps are required".into()));
    }
    let eps1_prime = internal_budget(cfg.eps1, src.lipschitz, src.horizon, src.min_det);
    if !(eps1_prime > 0.0) || !eps1_prime.is_finite() {
        return Err(UotError::InvalidParameter(format!("internal budget {eps1_prime} is not positive")));
    }
    let m_box = box_bound(src, eps1_prime);
    let stage_budget = eps1_prime / 3.0;
    let d = src.dim;
    let grid = Grid::new(vec![Axis::new(-m_box, m_box, cfg.eval_cells)?; d])?;
    let pts = grid.points();
    let field = src.field;

    let mut stamps = cfg.stamps;
    let mut sigma = cfg.sigma_start;
    let mut order = 1usize;
    let mut kw = cfg.kernel_width_start;
    loop {
        let times: Vec<f64> = (0..stamps).map(|k| src.horizon * k as f64 / (stamps - 1) as f64).collect();
        let raw: Vec<Vec<Vec<f64>>> = times.iter().map(|&t| pts.iter().map(|p| field(p, t)).collect()).collect();

        // Mollify: largest width, halving from the start, within budget.
        let (stencil, moll, e_moll) = loop {
            let st = Stencil::new(sigma, d, cfg.stencil_panels, cfg.stencil_order)?;
            let moll: Vec<Vec<Vec<f64>>> = times
                .iter()
                .map(|&t| pts.iter().map(|p| st.apply(p, &|y| field(y, t))).collect())
                .collect();
            let err = raw.iter().zip(&moll).map(|(a, b)| l2_between(&grid, a, b).0).fold(0.0, f64::max);
            if err <= stage_budget {
                break (st, moll, err);
            }
            sigma *= 0.5;
            if sigma < cfg.sigma_min {
                return Err(UotError::BudgetNotMet(format!(
                    "mollifier error {err:e} above {stage_budget:e} at the smallest width"
                )));
            }
        };

        // Truncate: double the Hermite order.
        let smoothed: Vec<Box<dyn Fn(&[f64]) -> Vec<f64> + '_>> = times
            .iter()
            .map(|&t| {
                let st = &stencil;
                Box::new(move |y: &[f64]| st.apply(y, &|z| field(z, t))) as Box<dyn Fn(&[f64]) -> Vec<f64>>
            })
            .collect();
        let refs: Vec<&dyn Fn(&[f64]) -> Vec<f64>> = smoothed.iter().map(|b| b.as_ref()).collect();
        let (expansion, recon, e_trunc) = loop {
            let top = cfg.truncation.top(order).unwrap_or(0);
            let nodes = 2 * (top + 1) + 8;
            let e = hermite_coeffs(&refs, d, order, cfg.truncation, nodes)?;
            let recon: Vec<Vec<Vec<f64>>> = (0..times.len()).map(|m| pts.iter().map(|p| e.eval(m, p)).collect()).collect();
            let err = moll.iter().zip(&recon).map(|(a, b)| l2_between(&grid, a, b).0).fold(0.0, f64::max);
            if err <= stage_budget {
                break (e, recon, err);
            }
            order *= 2;
            if order > cfg.max_order {
                return Err(UotError::BudgetNotMet(format!(
                    "Hermite truncation error {err:e} above {stage_budget:e} at order {}",
                    order / 2
                )));
            }
        };

        // Quadratize: halve the kernel width.
        let family = RidgeFamily::new(d, d * expansion.top())?;
        let (params, network, e_quad) = loop {
            let reach = cfg.kernel.reach;
            let want = expected_unit_count(d, order, cfg.truncation, cfg.kernel.n_prime(), |u| {
                Partition::new(u.to_vec(), m_box, kw, reach).len()
            });
            if want > cfg.max_units {
                return Err(UotError::BudgetNotMet(format!(
                    "kernel width {kw:e} needs {want} units, above the cap {}",
                    cfg.max_units
                )));
            }
            let params = assemble(&AssemblyInput {
                expansion: &expansion,
                family: &family,
                kernel: &cfg.kernel,
                kernel_width: kw,
                m_box,
                sigma,
                times: &times,
                time_interp: cfg.time_interp,
            })?;
            let net = params.network();
            let mut err = 0.0f64;
            for (m, &t) in times.iter().enumerate() {
                let vals: Vec<Vec<f64>> = pts.iter().map(|p| net.eval(p, t)).collect::<Result<_>>()?;
                err = err.max(l2_between(&grid, &vals, &recon[m]).0);
            }
            if err <= stage_budget {
                break (params, net, err);
            }
            kw *= 0.5;
            if kw < cfg.kernel_width_min {
                return Err(UotError::BudgetNotMet(format!(
                    "quadratization error {err:e} above {stage_budget:e}"
                )));
            }
        };

        // Total error at the stamps and between them.
        let (mut total_l2, mut total_linf) = (0.0f64, 0.0f64);
        let mut check = times.clone();
        check.extend(times.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        for &t in &check {
            let vals: Vec<Vec<f64>> = pts.iter().map(|p| network.eval(p, t)).collect::<Result<_>>()?;
            let reference: Vec<Vec<f64>> = pts.iter().map(|p| field(p, t)).collect();
            let (l2, linf) = l2_between(&grid, &vals, &reference);
            total_l2 = total_l2.max(l2);
            total_linf = total_linf.max(linf);
        }
        if total_l2 > eps1_prime {
            if 2 * stamps - 1 > cfg.max_stamps {
                return Err(UotError::BudgetNotMet(format!(
                    "field error {total_l2:e} above {eps1_prime:e} with {stamps} time stamps"
                )));
            }
            stamps = 2 * stamps - 1;
            continue;
        }

        // Bessel: |c_n| ≤ ‖ξ^ς_t‖ in the Gaussian-weighted L².
        let top = expansion.top();
        let weighted = hermite_weighted_norms(&refs, d, 2 * (top + 1) + 8);
        let coeff_bound = weighted.iter().fold(0.0f64, |m, &v| m.max(v));
        let report = CompileReport {
            eps1: cfg.eps1,
            eps1_prime,
            lipschitz: src.lipschitz,
            min_det: src.min_det,
            m_box,
            sigma,
            order,
            kernel_width: kw,
            stamps,
            units: params.n,
            neurons: network.neuron_count(),
            stages: StageErrors {
                mollify: e_moll,
                truncate: e_trunc,
                quadratize: e_quad,
            },
            total_l2,
            total_linf,
            max_coeff: expansion.max_abs_coeff(),
            coeff_bound,
        };
        return Ok(Compiled {
            params,
            network,
            expansion,
            report,
        });
    }
}

/// `max_j ‖(F_t)_j‖_{L²_ω}` per field by Gauss–Hermite quadrature.
fn hermite_weighted_norms(fields: &[&dyn Fn(&[f64]) -> Vec<f64>], d: usize, nodes: usize) -> Vec<f64> {
    let (x, w) = crate::quadrature::gauss_hermite(nodes);
    let grid = crate::neural::hermite::index_box(d, nodes - 1);
    fields
        .iter()
        .map(|f| {
            let mut acc: Vec<f64> = vec![];
            for q in &grid {
                let p: Vec<f64> = q.iter().map(|&i| x[i]).collect();
                let wq: f64 = q.iter().map(|&i| w[i]).product();
                let v = f(&p);
                if acc.is_empty() {
                    acc = vec![0.0; v.len()];
                }
                for (a, b) in acc.iter_mut().zip(&v) {
                    *a += wq * b * b;
                }
            }
            acc.iter().fold(0.0f64, |m, &s| m.max(s.sqrt()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dilation_source<'a>(field: &'a FieldFn<'a>) -> FieldSource<'a> {
        // 𝕋_t(x) = (1 + a t)x on Ω_f = [−1, 1], a = 0.5, T = 1.
        FieldSource {
            dim: 1,
            horizon: 1.0,
            field,
            lipschitz: 1.0,
            min_det: 1.5,
            source_radius: 1.0,
            endpoint_radius: 1.5,
            field_sup: 0.5,
        }
    }

    #[test]
    fn budget_and_box() {
        let f = |x: &[f64], t: f64| vec![0.5 * x[0] / (1.0 + 0.5 * t)];
        let src = dilation_source(&f);
        let e = internal_budget(0.1, 1.0, 1.0, 1.5);
        assert_abs_diff_eq!(e, 0.1 / (1f64.exp() * 1f64.exp_m1()), epsilon = 1e-15);
        assert_eq!(box_bound(&src, e), 3.0);
    }

    #[test]
    fn dilation_compiles_within_budget() {
        let f = |x: &[f64], t: f64| vec![0.5 * x[0] / (1.0 + 0.5 * t)];
        let src = dilation_source(&f);
        let out = compile(&src, &CompileConfig::new(0.1, 1)).unwrap();
        let r = &out.report;
        assert!(r.total_l2 <= r.eps1_prime, "{r:?}");
        assert!(r.stages.mollify <= r.eps1_prime / 3.0);
        assert!(r.max_coeff <= r.coeff_bound + r.eps1_prime);
        assert_eq!(r.order, 1);
    }

    #[test]
    fn smooth_nonlinear_field_meets_both_budgets() {
        let f = |x: &[f64], t: f64| vec![0.3 * (x[0] * (1.0 + 0.5 * t)).sin()];
        let mut src = dilation_source(&f);
        src.field_sup = 0.3;
        let mut orders = vec![];
        for eps in [0.1, 0.05] {
            let out = compile(&src, &CompileConfig::new(eps, 1)).unwrap();
            eprintln!("{:?}", out.report);
            assert!(out.report.total_l2 <= out.report.eps1_prime);
            orders.push((out.report.order, out.report.kernel_width, out.report.sigma));
        }
        assert!(orders[1].0 >= orders[0].0 && orders[1].1 <= orders[0].1 && orders[1].2 <= orders[0].2);
    }

    #[test]
    fn zero_field_compiles_to_zero() {
        let f = |_: &[f64], _: f64| vec![0.0];
        let mut src = dilation_source(&f);
        src.field_sup = 0.0;
        let out = compile(&src, &CompileConfig::new(0.1, 1)).unwrap();
        assert_eq!(out.network.neuron_count(), 0);
        assert_eq!(out.report.total_l2, 0.0);
    }

    #[test]
    fn impossible_budget_fails_loudly() {
        let f = |x: &[f64], _: f64| vec![(3.0 * x[0]).sin().abs()];
        let src = dilation_source(&f);
        let mut cfg = CompileConfig::new(1e-6, 1);
        cfg.max_order = 4;
        assert!(matches!(compile(&src, &cfg), Err(UotError::BudgetNotMet(_))));
    }
}
