//! Characteristics of the compiled field by classical RK4.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::neural::assemble::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl Trajectory {
    /// `max_k ‖x_k − y_k‖` against another trajectory on the same times.
    pub fn sup_distance(&self, other: &Trajectory) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// RK4 for `ẋ = F(x, t)` on `[0, T]` with `steps` equal steps.
pub fn rk4(field: &dyn Fn(&[f64], f64) -> Result<Vec<f64>>, x0: &[f64], horizon: f64, steps: usize) -> Result<Trajectory> {
    if steps == 0 || !(horizon > 0.0) {
        return Err(UotError::InvalidParameter("steps and horizon must be positive".into()));
    }
    let h = horizon / steps as f64;
    let mut x = x0.to_vec();
    let mut times = vec![0.0];
    let mut points = vec![x.clone()];
    let axpy = |x: &[f64], a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(p, q)| p + a * q).collect() };
    for n in 0..steps {
        let t = n as f64 * h;
        let k1 = field(&x, t)?;
        let k2 = field(&axpy(&x, 0.5 * h, &k1), t + 0.5 * h)?;
        let k3 = field(&axpy(&x, 0.5 * h, &k2), t + 0.5 * h)?;
        let k4 = field(&axpy(&x, h, &k3), (t + h).min(horizon))?;
        for j in 0..x.len() {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        times.push(if n + 1 == steps { horizon } else { t + h });
        points.push(x.clone());
    }
    Ok(Trajectory { times, points })
}

/// Neural-ODE characteristic from `x0`; leaving `[−M, M]^d` is a `BoxExit`
/// at the stage time where it happened.
pub fn neural_ode_flow(net: &Network, x0: &[f64], horizon: f64, steps: usize) -> Result<Trajectory> {
    let f = |x: &[f64], t: f64| -> Result<Vec<f64>> {
        net.eval(x, t).map_err(|e| match e {
            UotError::OutOfBox { m, .. } => UotError::BoxExit { t, m },
            other => other,
        })
    };
    let traj = rk4(&f, x0, horizon, steps)?;
    let tol = 1e-12 * net.m_box;
    for (t, p) in traj.times.iter().zip(&traj.points) {
        if p.iter().any(|v| !(v.abs() <= net.m_box + tol)) {
            return Err(UotError::BoxExit { t: *t, m: net.m_box });
        }
    }
    Ok(traj)
}

/// Grönwall: two flows whose fields differ by at most `eps` in sup norm,
/// one of them `lip`-Lipschitz, separate by at most `eps (e^{lip t} − 1)/lip`.
pub fn gronwall_bound(eps: f64, lip: f64, t: f64) -> f64 {
    if lip == 0.0 {
        eps * t
    } else {
        eps * (lip * t).exp_m1() / lip
    }
}
