//! Discretized problem, Pearson functionals, primal and dual objectives,
//! convex conjugates, KKT recovery and the quantities `G`, `G_w`, `w`.
//!
//! Couplings live on the product grid `Ω_f × Ω_g` with the `Ω_f` index
//! slowest: `k[i * ng + j] = k(x_i, y_j)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::grid::{CostGrid, GridDensity};

/// Quadrature rule used for every integral. Only the midpoint rule exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    #[default]
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub f: GridDensity,
    pub g: GridDensity,
    pub cost: CostGrid,
    pub delta: f64,
    #[serde(default)]
    pub quadrature: Quadrature,
}

impl ProblemSpec {
    pub fn new(f: GridDensity, g: GridDensity, cost: CostGrid, delta: f64) -> Result<Self> {
        let s = Self {
            f,
            g,
            cost,
            delta,
            quadrature: Quadrature::Midpoint,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.f.validate()?;
        self.g.validate()?;
        if self.cost.nx != self.f.len() || self.cost.ny != self.g.len() {
            return Err(UotError::GridMismatch(format!(
                "cost is {}x{}, densities have {} and {} cells",
                self.cost.nx,
                self.cost.ny,
                self.f.len(),
                self.g.len()
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(UotError::InvalidParameter(format!("delta = {} must be positive", self.delta)));
        }
        let lhs = self.delta * self.vol_f().max(self.vol_g());
        if lhs > self.c() {
            return Err(UotError::InvalidDelta {
                delta: self.delta,
                lhs,
                c: self.c(),
            });
        }
        Ok(())
    }

    /// Common lower bound `c` of both densities.
    pub fn c(&self) -> f64 {
        self.f.c_lower.min(self.g.c_lower)
    }

    /// `E`, the larger sup-norm of the two densities.
    pub fn e_sup(&self) -> f64 {
        self.f.sup().max(self.g.sup())
    }

    pub fn vol_f(&self) -> f64 {
        self.f.grid.volume()
    }

    pub fn vol_g(&self) -> f64 {
        self.g.grid.volume()
    }

    pub fn nf(&self) -> usize {
        self.f.len()
    }

    pub fn ng(&self) -> usize {
        self.g.len()
    }

    pub fn hx(&self) -> f64 {
        self.f.grid.cell_volume()
    }

    pub fn hy(&self) -> f64 {
        self.g.grid.cell_volume()
    }

    /// Upper bound `1 − δ|Ω_g|/f` of the constrained dual set on `Ω_f`.
    pub fn bound_x(&self) -> Vec<f64> {
        let t = self.delta * self.vol_g();
        self.f.values.iter().map(|&f| 1.0 - t / f).collect()
    }

    /// Upper bound `1 − δ|Ω_f|/g` on `Ω_g`.
    pub fn bound_y(&self) -> Vec<f64> {
        let t = self.delta * self.vol_f();
        self.g.values.iter().map(|&g| 1.0 - t / g).collect()
    }
}

/// Row and column quadratures of a product-grid function.
pub fn marginals_of(values: &[f64], nf: usize, ng: usize, hx: f64, hy: f64) -> (Vec<f64>, Vec<f64>) {
    let mut kx = vec![0.0; nf];
    let mut ky = vec![0.0; ng];
    for i in 0..nf {
        let row = &values[i * ng..(i + 1) * ng];
        let mut s = 0.0;
        for (j, &v) in row.iter().enumerate() {
            s += v;
            ky[j] += v;
        }
        kx[i] = s * hy;
    }
    for v in &mut ky {
        *v *= hx;
    }
    (kx, ky)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub nf: usize,
    pub ng: usize,
    pub values: Vec<f64>,
    pub delta: f64,
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
}

impl Coupling {
    /// Wraps values and caches marginals. Feasibility is not enforced here;
    /// see [`Coupling::max_violation`].
    pub fn new(values: Vec<f64>, spec: &ProblemSpec) -> Result<Self> {
        let (nf, ng) = (spec.nf(), spec.ng());
        if values.len() != nf * ng {
            return Err(UotError::GridMismatch(format!(
                "coupling has {} values, expected {}",
                values.len(),
                nf * ng
            )));
        }
        let (kx, ky) = marginals_of(&values, nf, ng, spec.hx(), spec.hy());
        Ok(Self {
            nf,
            ng,
            values,
            delta: spec.delta,
            kx,
            ky,
        })
    }

    pub fn constant(value: f64, spec: &ProblemSpec) -> Self {
        Self::new(vec![value; spec.nf() * spec.ng()], spec).expect("sizes agree")
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ng + j]
    }

    /// Largest amount by which `k` dips below `δ` (0 when feasible).
    pub fn max_violation(&self) -> f64 {
        self.values.iter().map(|&v| (self.delta - v).max(0.0)).fold(0.0, f64::max)
    }

    pub fn total_mass(&self, spec: &ProblemSpec) -> f64 {
        self.values.iter().sum::<f64>() * spec.hx() * spec.hy()
    }
}

/// Potentials `(k*_1, k*_2)` and, once mollified, their smoothed versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1_tilde: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2_tilde: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing_width: Option<f64>,
}

impl DualPotentials {
    pub fn new(k1: Vec<f64>, k2: Vec<f64>) -> Self {
        Self {
            k1,
            k2,
            k1_tilde: None,
            k2_tilde: None,
            smoothing_width: None,
        }
    }

    pub fn constant(a: f64, b: f64, spec: &ProblemSpec) -> Self {
        Self::new(vec![a; spec.nf()], vec![b; spec.ng()])
    }

    /// Smoothed potentials when present, raw ones otherwise.
    pub fn smoothed(&self) -> (&[f64], &[f64]) {
        (
            self.k1_tilde.as_deref().unwrap_or(&self.k1),
            self.k2_tilde.as_deref().unwrap_or(&self.k2),
        )
    }

    /// Largest excess over the bounds `1 − δ|Ω_g|/f` and `1 − δ|Ω_f|/g`.
    pub fn feasibility_excess(&self, spec: &ProblemSpec) -> f64 {
        let ex = self.k1.iter().zip(spec.bound_x()).map(|(k, b)| (k - b).max(0.0));
        let ey = self.k2.iter().zip(spec.bound_y()).map(|(k, b)| (k - b).max(0.0));
        ex.chain(ey).fold(0.0, f64::max)
    }
}

/// Pearson divergence `∫(μ/ν − 1)² ν`.
pub fn pearson_divergence(mu: &[f64], nu: &GridDensity) -> Result<f64> {
    if mu.len() != nu.len() {
        return Err(UotError::GridMismatch(format!("{} vs {} cells", mu.len(), nu.len())));
    }
    let mut s = 0.0;
    for (i, (&m, &n)) in mu.iter().zip(&nu.values).enumerate() {
        if !(n > 0.0) {
            return Err(UotError::InvalidDensity(format!("reference density vanishes at cell {i}")));
        }
        let r = m / n - 1.0;
        s += r * r * n;
    }
    Ok(s * nu.grid.cell_volume())
}

/// `∫Ck + ½‖k‖² + ½F(k_x|f) + ½F(k_y|g)` for a feasible coupling.
pub fn primal_objective(k: &Coupling, spec: &ProblemSpec) -> Result<f64> {
    let viol = k.max_violation();
    if viol > 0.0 {
        return Err(UotError::FeasibilityViolation {
            what: "k >= delta".into(),
            magnitude: viol,
        });
    }
    let mut transport = 0.0;
    let mut sq = 0.0;
    for (kv, cv) in k.values.iter().zip(&spec.cost.values) {
        transport += cv * kv;
        sq += kv * kv;
    }
    let vol = spec.hx() * spec.hy();
    let fx = pearson_divergence(&k.kx, &spec.f)?;
    let gy = pearson_divergence(&k.ky, &spec.g)?;
    Ok(transport * vol + 0.5 * sq * vol + 0.5 * fx + 0.5 * gy)
}

/// `½∫ v [m(2u*+2−m) − 1]` with `m = max{θ/v, u*+1}`.
pub fn conjugate_f(u_star: &[f64], v: &GridDensity, theta: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(UotError::InvalidParameter(format!("theta = {theta} must be positive")));
    }
    if u_star.len() != v.len() {
        return Err(UotError::GridMismatch(format!("{} vs {} cells", u_star.len(), v.len())));
    }
    let mut s = 0.0;
    for (&u, &vv) in u_star.iter().zip(&v.values) {
        let m = (theta / vv).max(u + 1.0);
        s += vv * (m * (2.0 * u + 2.0 - m) - 1.0);
    }
    Ok(0.5 * s * v.grid.cell_volume())
}

/// `½∫ max{δ, k*−C}(2(k*−C) − max{δ, k*−C})` over the product grid.
pub fn conjugate_cbar(kstar_sum: &[f64], spec: &ProblemSpec) -> f64 {
    let d = spec.delta;
    let mut s = 0.0;
    for (&k, &c) in kstar_sum.iter().zip(&spec.cost.values) {
        let r = k - c;
        let m = d.max(r);
        s += m * (2.0 * r - m);
    }
    0.5 * s * spec.hx() * spec.hy()
}

/// `k*_1 ⊕ k*_2` on the product grid.
pub fn direct_sum(k1: &[f64], k2: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(k1.len() * k2.len());
    for &a in k1 {
        for &b in k2 {
            out.push(a + b);
        }
    }
    out
}

/// Dual objective in the infimum convention; at the optimum it equals
/// minus the primal optimum.
pub fn dual_objective(duals: &DualPotentials, spec: &ProblemSpec) -> f64 {
    let cbar = conjugate_cbar(&direct_sum(&duals.k1, &duals.k2), spec);
    let neg1: Vec<f64> = duals.k1.iter().map(|v| -v).collect();
    let neg2: Vec<f64> = duals.k2.iter().map(|v| -v).collect();
    let fx = conjugate_f(&neg1, &spec.f, spec.delta * spec.vol_g()).expect("theta > 0");
    let gy = conjugate_f(&neg2, &spec.g, spec.delta * spec.vol_f()).expect("theta > 0");
    cbar + fx + gy
}

/// `k = max{δ, k*_1 ⊕ k*_2 − C}`.
pub fn kkt_recover_coupling(duals: &DualPotentials, spec: &ProblemSpec) -> Coupling {
    let ng = spec.ng();
    let mut values = Vec::with_capacity(spec.nf() * ng);
    for (i, &a) in duals.k1.iter().enumerate() {
        for (j, &b) in duals.k2.iter().enumerate() {
            values.push(spec.delta.max(a + b - spec.cost.values[i * ng + j]));
        }
    }
    Coupling::new(values, spec).expect("sizes agree")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `sup |k − max{δ, k*_1⊕k*_2 − C}|`
    pub coupling: f64,
    /// `sup |k_x − f max{δ|Ω_g|/f, 1 − k*_1}|`
    pub marginal_x: f64,
    /// `sup |k_y − g max{δ|Ω_f|/g, 1 − k*_2}|`
    pub marginal_y: f64,
    pub primal: f64,
    pub dual: f64,
    /// `|primal + dual|`
    pub gap: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.coupling.max(self.marginal_x).max(self.marginal_y)
    }
}

pub fn kkt_residuals(k: &Coupling, duals: &DualPotentials, spec: &ProblemSpec) -> Result<KktReport> {
    if k.nf != duals.k1.len() || k.ng != duals.k2.len() {
        return Err(UotError::GridMismatch("coupling and potentials disagree".into()));
    }
    let rec = kkt_recover_coupling(duals, spec);
    let coupling = k.values.iter().zip(&rec.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let tx = spec.delta * spec.vol_g();
    let marginal_x =
        k.kx.iter()
            .zip(&duals.k1)
            .zip(&spec.f.values)
            .map(|((kx, k1), f)| (kx - f * (tx / f).max(1.0 - k1)).abs())
            .fold(0.0, f64::max);
    let ty = spec.delta * spec.vol_f();
    let marginal_y =
        k.ky.iter()
            .zip(&duals.k2)
            .zip(&spec.g.values)
            .map(|((ky, k2), g)| (ky - g * (ty / g).max(1.0 - k2)).abs())
            .fold(0.0, f64::max);
    let primal = primal_objective(k, spec)?;
    let dual = dual_objective(duals, spec);
    Ok(KktReport {
        coupling,
        marginal_x,
        marginal_y,
        primal,
        dual,
        gap: (primal + dual).abs(),
    })
}

/// `G(u,v) = ½∫max{δ,R}(2R − max{δ,R}) + ½∫(1−u)²f + ½∫(1−v)²g`, `R = u⊕v − C`.
pub fn g_eval(u: &[f64], v: &[f64], spec: &ProblemSpec) -> f64 {
    let cbar = conjugate_cbar(&direct_sum(u, v), spec);
    let px: f64 = u.iter().zip(&spec.f.values).map(|(u, f)| (1.0 - u) * (1.0 - u) * f).sum();
    let py: f64 = v.iter().zip(&spec.g.values).map(|(v, g)| (1.0 - v) * (1.0 - v) * g).sum();
    cbar + 0.5 * px * spec.hx() + 0.5 * py * spec.hy()
}

/// Row and column integrals of `max{δ, u⊕v − C}`.
pub fn clamp_marginals(u: &[f64], v: &[f64], spec: &ProblemSpec) -> (Vec<f64>, Vec<f64>) {
    let (nf, ng) = (u.len(), v.len());
    let mut rx = vec![0.0; nf];
    let mut ry = vec![0.0; ng];
    let d = spec.delta;
    for i in 0..nf {
        let row = &spec.cost.values[i * ng..(i + 1) * ng];
        let ui = u[i];
        let mut s = 0.0;
        for j in 0..ng {
            let m = d.max(ui + v[j] - row[j]);
            s += m;
            ry[j] += m;
        }
        rx[i] = s * spec.hy();
    }
    for r in &mut ry {
        *r *= spec.hx();
    }
    (rx, ry)
}

/// Fréchet derivatives `(D₁G, D₂G)`.
pub fn g_gradients(u: &[f64], v: &[f64], spec: &ProblemSpec) -> (Vec<f64>, Vec<f64>) {
    let (mut gx, mut gy) = clamp_marginals(u, v, spec);
    for ((g, &ui), &f) in gx.iter_mut().zip(u).zip(&spec.f.values) {
        *g += (ui - 1.0) * f;
    }
    for ((g, &vj), &gg) in gy.iter_mut().zip(v).zip(&spec.g.values) {
        *g += (vj - 1.0) * gg;
    }
    (gx, gy)
}

/// `w(u,v) = ½(‖u‖² + ‖v‖²)`.
pub fn w_eval(u: &[f64], v: &[f64], spec: &ProblemSpec) -> f64 {
    0.5 * (spec.f.grid.norm2_sq(u) + spec.g.grid.norm2_sq(v))
}

/// `G_w = G − (c/4) w`.
pub fn g_w_eval(u: &[f64], v: &[f64], spec: &ProblemSpec) -> f64 {
    g_eval(u, v, spec) - 0.25 * spec.c() * w_eval(u, v, spec)
}

/// Gradients of `G_w`: `D_iG − (c/4)·(u, v)`.
pub fn g_w_gradients(u: &[f64], v: &[f64], spec: &ProblemSpec) -> (Vec<f64>, Vec<f64>) {
    let (mut gx, mut gy) = g_gradients(u, v, spec);
    let c4 = 0.25 * spec.c();
    for (g, &ui) in gx.iter_mut().zip(u) {
        *g -= c4 * ui;
    }
    for (g, &vj) in gy.iter_mut().zip(v) {
        *g -= c4 * vj;
    }
    (gx, gy)
}

/// Constant `½(∫f + ∫g)` linking `G` and the dual objective on the
/// constrained dual set.
pub fn g_offset(spec: &ProblemSpec) -> f64 {
    0.5 * (spec.f.mass() + spec.g.mass())
}
