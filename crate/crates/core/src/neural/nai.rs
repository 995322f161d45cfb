//! Activation kernels `Γ(x) = Σ W′_i σ(A′_i x + b′_i)` forming approximate
//! identities.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::quadrature::composite_legendre;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn eval(self, y: f64) -> f64 {
        match self {
            Activation::Relu => y.max(0.0),
            Activation::Sigmoid => {
                if y >= 0.0 {
                    1.0 / (1.0 + (-y).exp())
                } else {
                    let e = y.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => y.tanh(),
            Activation::Softplus => {
                if y > 30.0 {
                    y + (-y).exp().ln_1p()
                } else {
                    y.exp().ln_1p()
                }
            }
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" | "logistic" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(UotError::Unsupported(format!("activation '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }
}

/// `(N′, W′, A′, b′)` together with the half-width (in kernel units)
/// beyond which `|Γ|` carries negligible mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiKernel {
    pub activation: Activation,
    pub w: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub reach: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiReport {
    pub integral: f64,
    pub l1: f64,
    /// `∫_{|x|>ϱ} |Γ_ς|` for the probe `(ϱ, ς)`.
    pub tail: f64,
    pub rho: f64,
    pub width: f64,
}

const TAIL_TOL: f64 = 1e-12;

impl NaiKernel {
    /// Second difference of ReLU: the unit triangle on `[−1, 1]`.
    pub fn relu() -> Self {
        Self {
            activation: Activation::Relu,
            w: vec![1.0, -2.0, 1.0],
            a: vec![1.0; 3],
            b: vec![1.0, 0.0, -1.0],
            reach: 1.0,
        }
    }

    /// `(σ(x + 1) − σ(x − 1))/2` for the logistic sigmoid.
    pub fn sigmoid() -> Self {
        Self {
            activation: Activation::Sigmoid,
            w: vec![0.5, -0.5],
            a: vec![1.0, 1.0],
            b: vec![1.0, -1.0],
            reach: 40.0,
        }
    }

    pub fn shipped(activation: Activation) -> Result<Self> {
        match activation {
            Activation::Relu => Ok(Self::relu()),
            Activation::Sigmoid => Ok(Self::sigmoid()),
            other => Err(UotError::Unsupported(format!(
                "no shipped kernel for '{}'; supply (W', A', b') explicitly",
                other.name()
            ))),
        }
    }

    /// User-supplied coefficients, accepted only if the approximate-identity
    /// axioms hold numerically.
    pub fn custom(activation: Activation, w: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.len() != a.len() || w.len() != b.len() {
            return Err(UotError::InvalidParameter("W', A', b' must be nonempty and of equal length".into()));
        }
        if w.iter().chain(&a).chain(&b).any(|v| !v.is_finite()) {
            return Err(UotError::InvalidParameter("kernel coefficients must be finite".into()));
        }
        let mut k = Self {
            activation,
            w,
            a,
            b,
            reach: 1.0,
        };
        let mut reach = 1.0;
        loop {
            k.reach = reach;
            let outside = k.abs_mass(reach, 2.0 * reach + 64.0) + k.abs_mass(-(2.0 * reach + 64.0), -reach);
            if outside <= TAIL_TOL {
                break;
            }
            reach *= 2.0;
            if reach > 1024.0 {
                return Err(UotError::InvalidParameter("kernel tails do not vanish".into()));
            }
        }
        let report = k.check()?;
        if (report.integral - 1.0).abs() > 1e-10 {
            return Err(UotError::InvalidParameter(format!(
                "kernel integrates to {} instead of 1",
                report.integral
            )));
        }
        Ok(k)
    }

    pub fn n_prime(&self) -> usize {
        self.w.len()
    }

    pub fn gamma(&self, x: f64) -> f64 {
        self.w
            .iter()
            .zip(&self.a)
            .zip(&self.b)
            .map(|((w, a), b)| w * self.activation.eval(a * x + b))
            .sum()
    }

    /// `Γ_ς(x) = Γ(x/ς)/ς`.
    pub fn gamma_scaled(&self, x: f64, width: f64) -> f64 {
        self.gamma(x / width) / width
    }

    fn integrate(&self, lo: f64, hi: f64, g: impl Fn(f64) -> f64) -> f64 {
        // Every ReLU breakpoint sits at an integer, so cutting at the
        // integers leaves the integrand smooth on each piece.
        let mut edges = vec![lo];
        edges.extend(
            (lo.floor() as i64 + 1..=hi.ceil() as i64 - 1)
                .map(|k| k as f64)
                .filter(|&k| k > lo && k < hi),
        );
        edges.push(hi);
        edges
            .windows(2)
            .map(|e| {
                let (x, w) = composite_legendre(e[0], e[1], 4, 12);
                x.iter().zip(&w).map(|(&xi, wi)| wi * g(xi)).sum::<f64>()
            })
            .sum()
    }

    fn abs_mass(&self, lo: f64, hi: f64) -> f64 {
        self.integrate(lo, hi, |x| self.gamma(x).abs())
    }

    /// Axiom check with the probe `ϱ = 0.1`, `ς = 10⁻³`.
    pub fn check(&self) -> Result<NaiReport> {
        self.report(0.1, 1e-3)
    }

    pub fn report(&self, rho: f64, width: f64) -> Result<NaiReport> {
        let b = (self.reach + 64.0).ceil();
        let integral = self.integrate(-b, b, |x| self.gamma(x));
        let l1 = self.abs_mass(-b, b);
        let cut = rho / width;
        let tail = if cut >= b {
            0.0
        } else {
            self.abs_mass(cut, b) + self.abs_mass(-b, -cut)
        };
        if !integral.is_finite() || !l1.is_finite() {
            return Err(UotError::NumericalBlowup {
                what: "kernel quadrature".into(),
                iteration: 0,
            });
        }
        Ok(NaiReport {
            integral,
            l1,
            tail,
            rho,
            width,
        })
    }
}
