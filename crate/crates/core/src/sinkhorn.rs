//! Six-sequence accelerated proximal iteration for the dual problem, with
//! its a-priori error certificate.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::uot::{
    clamp_marginals, dual_objective, g_eval, g_offset, kkt_recover_coupling, kkt_residuals, primal_objective, w_eval, Coupling,
    DualPotentials, ProblemSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub alpha: f64,
    pub q: f64,
    pub s: f64,
    pub r: f64,
    pub delta: f64,
    /// Strong-convexity constant `c` of the problem.
    pub c: f64,
    pub l_max: usize,
    /// Early stop once the duality gap drops below this value.
    pub early_stop_gap: Option<f64>,
    /// Clamp at `1 − |Ω_g|/f` instead of `1 − δ|Ω_g|/f`.
    pub undamped_bound: bool,
}

pub fn compute_params(spec: &ProblemSpec) -> Result<SolverParams> {
    spec.validate()?;
    let c = spec.c();
    let v = spec.vol_f().max(spec.vol_g());
    let e = spec.e_sup();
    let alpha = (2.0 * (v * v + (e - c / 4.0).powi(2))).sqrt();
    let q = 2.0 * (alpha / c).sqrt();
    let s = 0.5 * (alpha * c).sqrt();
    let r = q / (1.0 + q);
    Ok(SolverParams {
        alpha,
        q,
        s,
        r,
        delta: spec.delta,
        c,
        l_max: 300,
        early_stop_gap: None,
        undamped_bound: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub x: Vec<f64>,
    pub x0: Vec<f64>,
    pub xs: Vec<f64>,
    pub y: Vec<f64>,
    pub y0: Vec<f64>,
    pub ys: Vec<f64>,
    pub n: usize,
}

impl SolverState {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        let (nf, ng) = (spec.nf(), spec.ng());
        Self {
            x: vec![0.0; nf],
            x0: vec![0.0; nf],
            xs: vec![0.0; nf],
            y: vec![0.0; ng],
            y0: vec![0.0; ng],
            ys: vec![0.0; ng],
            n: 0,
        }
    }
}

fn clamp_bounds(spec: &ProblemSpec, params: &SolverParams) -> (Vec<f64>, Vec<f64>) {
    if params.undamped_bound {
        let bx = spec.f.values.iter().map(|f| 1.0 - spec.vol_g() / f).collect();
        let by = spec.g.values.iter().map(|g| 1.0 - spec.vol_f() / g).collect();
        (bx, by)
    } else {
        (spec.bound_x(), spec.bound_y())
    }
}

fn check_finite(v: &[f64], what: &str, iteration: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(UotError::NumericalBlowup {
            what: what.into(),
            iteration,
        })
    }
}

/// One pass of the six updates.
///
/// The gradient step uses `D₁G_w = D₁G − (c/4)X*`, the gradient of the
/// `c/4`-shifted function whose proximal step the remaining updates solve.
pub fn step(state: &SolverState, spec: &ProblemSpec, params: &SolverParams) -> Result<SolverState> {
    let (bx, by) = clamp_bounds(spec, params);
    let c4 = params.c / 4.0;
    let (s, r, q) = (params.s, params.r, params.q);
    let (rx, ry) = clamp_marginals(&state.xs, &state.ys, spec);

    let chain = |r_int: &[f64], star: &[f64], dens: &[f64], prev: &[f64], prev0: &[f64], bound: &[f64]| {
        let mut x = Vec::with_capacity(star.len());
        let mut x0 = Vec::with_capacity(star.len());
        let mut xs = Vec::with_capacity(star.len());
        for i in 0..star.len() {
            let xn = r_int[i] + (star[i] - 1.0) * dens[i] - c4 * star[i];
            let cand = (s * prev0[i] - ((1.0 + r) * xn - r * prev[i])) / (c4 + s);
            let x0n = cand.min(bound[i]);
            x.push(xn);
            x0.push(x0n);
            xs.push((q * star[i] + x0n) / (1.0 + q));
        }
        (x, x0, xs)
    };
    let (x, x0, xs) = chain(&rx, &state.xs, &spec.f.values, &state.x, &state.x0, &bx);
    let (y, y0, ys) = chain(&ry, &state.ys, &spec.g.values, &state.y, &state.y0, &by);
    let n = state.n + 1;
    for (v, name) in [(&x, "X"), (&x0, "X0"), (&xs, "X*"), (&y, "Y"), (&y0, "Y0"), (&ys, "Y*")] {
        check_finite(v, name, n)?;
    }
    Ok(SolverState { x, x0, xs, y, y0, ys, n })
}

/// Diagnostics for the iterate `(X0^{n+1}, Y0^{n+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub n: usize,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub kkt_res: f64,
    /// `sqrt(‖X0^{n+1} − X0^n‖² + ‖Y0^{n+1} − Y0^n‖²)`
    pub step_norm: f64,
    /// `w(X0^{n+1}, Y0^{n+1})`
    pub w: f64,
    pub certificate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub records: Vec<IterRecord>,
    pub g00: f64,
    pub g_hat: f64,
    pub gap_nonmonotone: bool,
    pub early_stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub duals: DualPotentials,
    pub coupling: Coupling,
    pub diagnostics: Diagnostics,
    pub state: SolverState,
}

/// Runs `L + 1` iterations and returns `(X0^{L+1}, Y0^{L+1})`.
pub fn run(spec: &ProblemSpec, params: &SolverParams, l: usize) -> Result<RunOutput> {
    let mut state = SolverState::zeros(spec);
    let mut records = Vec::with_capacity(l + 1);
    let mut best_primal = f64::INFINITY;
    let mut gap_nonmonotone = false;
    let mut early_stopped = false;
    let gx = spec.f.grid.cell_volume();
    let gy = spec.g.grid.cell_volume();
    for n in 0..=l {
        let next = step(&state, spec, params)?;
        let dx: f64 = next.x0.iter().zip(&state.x0).map(|(a, b)| (a - b) * (a - b)).sum();
        let dy: f64 = next.y0.iter().zip(&state.y0).map(|(a, b)| (a - b) * (a - b)).sum();
        let step_norm = (dx * gx + dy * gy).sqrt();
        let duals = DualPotentials::new(next.x0.clone(), next.y0.clone());
        let k = kkt_recover_coupling(&duals, spec);
        let rep = kkt_residuals(&k, &duals, spec)?;
        best_primal = best_primal.min(rep.primal);
        if let Some(prev) = records.last().map(|r: &IterRecord| r.gap) {
            if rep.gap > prev * (1.0 + 1e-6) + 1e-12 {
                gap_nonmonotone = true;
            }
        }
        records.push(IterRecord {
            n,
            primal: rep.primal,
            dual: rep.dual,
            gap: rep.gap,
            kkt_res: rep.max_residual(),
            step_norm,
            w: w_eval(&next.x0, &next.y0, spec),
            certificate: f64::NAN,
        });
        state = next;
        if let Some(tol) = params.early_stop_gap {
            if rep.gap < tol && n < l {
                early_stopped = true;
                break;
            }
        }
    }
    let g00 = g_eval(&vec![0.0; spec.nf()], &vec![0.0; spec.ng()], spec);
    let g_hat = -best_primal + g_offset(spec);
    let mut diagnostics = Diagnostics {
        records,
        g00,
        g_hat,
        gap_nonmonotone,
        early_stopped,
    };
    let bounds = error_certificate(&diagnostics, params, spec);
    for (rec, b) in diagnostics.records.iter_mut().zip(bounds) {
        rec.certificate = b;
    }
    let duals = DualPotentials::new(state.x0.clone(), state.y0.clone());
    let coupling = kkt_recover_coupling(&duals, spec);
    Ok(RunOutput {
        duals,
        coupling,
        diagnostics,
        state,
    })
}

/// `B(m) = (4r^m/c)(q(G(0,0) − Ĝ) + s·w(X0^{m+1}, Y0^{m+1}))` for every
/// recorded `m`, with `Ĝ` the weak-duality lower bound in the diagnostics.
pub fn error_certificate(diag: &Diagnostics, params: &SolverParams, spec: &ProblemSpec) -> Vec<f64> {
    certificate_with_lower_bound(diag, params, spec, diag.g_hat)
}

/// As [`error_certificate`] with an explicit lower bound `Ĝ ≤ G(k*)`.
pub fn certificate_with_lower_bound(diag: &Diagnostics, params: &SolverParams, spec: &ProblemSpec, g_hat: f64) -> Vec<f64> {
    let gap0 = (diag.g00 - g_hat).max(0.0);
    diag.records
        .iter()
        .map(|rec| 4.0 * params.r.powi(rec.n as i32) / spec.c() * (params.q * gap0 + params.s * rec.w))
        .collect()
}

/// Convenience: compute parameters, run `l` iterations and return the
/// output. The primal value at the end is available as
/// `diagnostics.records.last().primal`.
pub fn solve(spec: &ProblemSpec, l: usize) -> Result<RunOutput> {
    let mut p = compute_params(spec)?;
    p.l_max = l;
    run(spec, &p, l)
}

/// Primal objective of the KKT coupling of `duals`.
pub fn recovered_primal(duals: &DualPotentials, spec: &ProblemSpec) -> Result<f64> {
    primal_objective(&kkt_recover_coupling(duals, spec), spec)
}

/// Dual value in the human-readable sign convention (`−dual_objective`).
pub fn reported_dual_value(duals: &DualPotentials, spec: &ProblemSpec) -> f64 {
    -dual_objective(duals, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CostGrid, Grid, GridDensity};
    use approx::assert_abs_diff_eq;

    fn spec(n: usize, fv: f64, gv: f64, glen: f64) -> ProblemSpec {
        let gf = Grid::line(0.0, 1.0, n).unwrap();
        let gg = Grid::line(0.0, glen, n).unwrap();
        let f = GridDensity::constant(gf.clone(), fv).unwrap();
        let g = GridDensity::constant(gg.clone(), gv).unwrap();
        ProblemSpec::new(f, g, CostGrid::zero(&gf, &gg), 0.01).unwrap()
    }

    #[test]
    fn params_uniform_case() {
        let p = compute_params(&spec(16, 1.0, 1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(p.alpha, 3.125f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.q, 2.0 * 3.125f64.sqrt().sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.s, 0.5 * 3.125f64.sqrt().sqrt(), epsilon = 1e-15);
        // Rounded reference values; the last printed digit of q, s and r is
        // only good to about 1e-5.
        assert_abs_diff_eq!(p.alpha, 1.767767, epsilon = 1e-6);
        assert_abs_diff_eq!(p.q, 2.659140, epsilon = 1e-5);
        assert_abs_diff_eq!(p.s, 0.664785, epsilon = 1e-5);
        assert_abs_diff_eq!(p.r, 0.726714, epsilon = 1e-5);
        assert_abs_diff_eq!(p.r, p.q / (1.0 + p.q), epsilon = 1e-15);
        assert_abs_diff_eq!(p.s, p.q * p.c / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn params_monotone_in_support() {
        let a = compute_params(&spec(8, 1.0, 1.0, 1.0)).unwrap();
        let b = compute_params(&spec(8, 1.0, 0.5, 2.0)).unwrap();
        assert!(b.alpha > a.alpha);
        let c = compute_params(&spec(8, 2.0, 2.0, 1.0)).unwrap();
        assert_abs_diff_eq!(c.alpha, (2.0 * (1.0 + 1.5f64.powi(2))).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn params_reject_large_delta() {
        let mut s = spec(8, 1.0, 1.0, 1.0);
        s.delta = 2.0;
        assert!(matches!(compute_params(&s), Err(UotError::InvalidDelta { .. })));
    }

    #[test]
    fn first_step_uniform() {
        let s = spec(8, 1.0, 1.0, 1.0);
        let p = compute_params(&s).unwrap();
        let st = step(&SolverState::zeros(&s), &s, &p).unwrap();
        let d = s.delta;
        assert!(st.x.iter().all(|v| (v - (d - 1.0)).abs() < 1e-15));
        let expect = (-(1.0 + p.r) * (d - 1.0) / (p.c / 4.0 + p.s)).min(1.0 - d);
        assert!(st.x0.iter().all(|v| (v - expect).abs() < 1e-15));
        let out = run(&s, &p, 0).unwrap();
        assert_eq!(out.duals.k1, st.x0);
        assert_eq!(out.duals.k2, st.y0);
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let s = spec(8, 1.0, 1.0, 1.0);
        let p = compute_params(&s).unwrap();
        let third = vec![1.0 / 3.0; 8];
        let xc = vec![-p.c / 12.0; 8];
        let st = SolverState {
            x: xc.clone(),
            x0: third.clone(),
            xs: third.clone(),
            y: xc,
            y0: third.clone(),
            ys: third,
            n: 5,
        };
        let nx = step(&st, &s, &p).unwrap();
        for v in nx.x0.iter().chain(&nx.xs).chain(&nx.y0) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn uniform_converges() {
        let s = spec(64, 1.0, 1.0, 1.0);
        let out = solve(&s, 200).unwrap();
        assert!(out.duals.k1.iter().chain(&out.duals.k2).all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        let last = out.diagnostics.records.last().unwrap();
        assert!(last.gap < 1e-8);
    }

    #[test]
    fn iterates_stay_feasible_and_deterministic() {
        let s = spec(16, 1.0, 2.0, 1.0);
        let p = compute_params(&s).unwrap();
        let mut st = SolverState::zeros(&s);
        let (bx, by) = (s.bound_x(), s.bound_y());
        for _ in 0..50 {
            st = step(&st, &s, &p).unwrap();
            assert!(st.x0.iter().zip(&bx).all(|(a, b)| a <= b));
            assert!(st.y0.iter().zip(&by).all(|(a, b)| a <= b));
        }
        let a = run(&s, &p, 40).unwrap();
        let b = run(&s, &p, 40).unwrap();
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn certificate_ratio_is_r() {
        let s = spec(8, 1.0, 1.0, 1.0);
        let p = compute_params(&s).unwrap();
        let out = run(&s, &p, 60).unwrap();
        let recs = &out.diagnostics.records;
        // Late iterates have converged, so w is constant and the ratio is r.
        let ratio = recs[50].certificate / recs[49].certificate;
        assert_abs_diff_eq!(ratio, p.r, epsilon = 1e-9);
        let degenerate = certificate_with_lower_bound(&out.diagnostics, &p, &s, out.diagnostics.g00);
        for (rec, b) in recs.iter().zip(&degenerate) {
            assert_abs_diff_eq!(*b, 4.0 * p.r.powi(rec.n as i32) / p.c * p.s * rec.w, epsilon = 1e-15);
        }
    }

    #[test]
    fn certificate_bounds_uniform_error() {
        let s = spec(8, 1.0, 1.0, 1.0);
        let p = compute_params(&s).unwrap();
        let out = run(&s, &p, 80).unwrap();
        for m in 0..80 {
            let o = run(&s, &p, m).unwrap();
            let e: f64 = o.duals.k1.iter().chain(&o.duals.k2).map(|v| (v - 1.0 / 3.0).powi(2)).sum::<f64>() / 8.0;
            assert!(e <= out.diagnostics.records[m].certificate, "m={m}");
        }
    }

    #[test]
    fn literal_bound_flag_changes_clamp() {
        let s = spec(8, 1.0, 1.0, 1.0);
        let mut p = compute_params(&s).unwrap();
        p.undamped_bound = true;
        let st = step(&SolverState::zeros(&s), &s, &p).unwrap();
        assert!(st.x0.iter().all(|&v| v == 0.0));
    }
}
