//! Latent linear dynamics and rollouts of the learned demonstration-space system.
//!
//! The latent system is `x' = rate (x* - x)`. With `y = psi(x)` the demonstration-space
//! velocity is `y' = J_psi(x) x'`, so integration happens in latent space and each
//! state is pushed through the learned map.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffeo::{DiffeoModel, DEFAULT_INVERSE_MAX_ITER, DEFAULT_INVERSE_TOL};
use crate::error::{Error, Result};

pub const DEFAULT_RATE: f64 = 1.0;
pub const DEFAULT_DT: f64 = 1e-2;
pub const DEFAULT_EPS: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDs {
    pub attractor: Vec<f64>,
    pub rate: f64,
}

impl LatentDs {
    pub fn new(attractor: Vec<f64>, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("rate must be positive, got {rate}")));
        }
        if attractor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attractor".into()));
        }
        Ok(Self { attractor, rate })
    }

    /// Latent system whose attractor is the model's last source point.
    pub fn for_model(model: &DiffeoModel, rate: f64) -> Result<Self> {
        Self::new(model.meta.latent_attractor.clone(), rate)
    }

    pub fn velocity(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.attractor)
            .map(|(xi, a)| self.rate * (a - xi))
            .collect()
    }
}

pub fn latent_velocity(ds: &LatentDs, x: &[f64]) -> Vec<f64> {
    ds.velocity(x)
}

/// Velocity at `y = psi(x)` for the latent point `x`.
pub fn demo_velocity(model: &DiffeoModel, ds: &LatentDs, x: &[f64]) -> Vec<f64> {
    let g = ds.velocity(x);
    let jac = model.jacobian(x);
    (0..x.len())
        .map(|i| (0..x.len()).map(|j| jac[(i, j)] * g[j]).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutSettings {
    pub dt: f64,
    pub t_max: f64,
    pub eps: f64,
}

impl RolloutSettings {
    /// Defaults for a given rate: `dt = 1e-2`, `eps = 1e-2`, `t_max = 50 / rate`.
    pub fn for_rate(rate: f64) -> Self {
        Self {
            dt: DEFAULT_DT,
            t_max: 50.0 / rate,
            eps: DEFAULT_EPS,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.t_max > 0.0 && self.eps > 0.0) {
            return Err(Error::InvalidParameter("dt, t_max and eps must be positive".into()));
        }
        if self.dt >= self.t_max {
            return Err(Error::InvalidParameter(format!(
                "dt {} must be below t_max {}",
                self.dt, self.t_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub latent: Vec<Vec<f64>>,
    pub converged: bool,
    pub final_distance: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub converged: bool,
    pub final_distance: f64,
    /// Integration steps taken; zero when the start is already within `eps`.
    pub steps: usize,
}

fn rk4_step(ds: &LatentDs, x: &[f64], h: f64) -> Vec<f64> {
    let shifted = |k: &[f64], s: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let k1 = ds.velocity(x);
    let k2 = ds.velocity(&shifted(&k1, 0.5 * h));
    let k3 = ds.velocity(&shifted(&k2, 0.5 * h));
    let k4 = ds.velocity(&shifted(&k3, h));
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Integrates from the demonstration-space start `y0` until the state is within `eps`
/// of `psi(x*)` or `t_max` is reached.
pub fn rollout(model: &DiffeoModel, ds: &LatentDs, y0: &[f64], settings: &RolloutSettings) -> Result<RolloutTrace> {
    settings.validate()?;
    if y0.len() != ds.attractor.len() {
        return Err(Error::DimensionMismatch {
            left: ds.attractor.len(),
            right: y0.len(),
        });
    }
    let target = model.forward(&ds.attractor);
    let mut x = model.inverse(y0, DEFAULT_INVERSE_TOL, DEFAULT_INVERSE_MAX_ITER)?;
    let mut trace = RolloutTrace {
        times: Vec::new(),
        positions: Vec::new(),
        velocities: Vec::new(),
        latent: Vec::new(),
        converged: false,
        final_distance: f64::INFINITY,
        eps: settings.eps,
    };
    let max_steps = (settings.t_max / settings.dt).floor() as usize;
    for step in 0..=max_steps {
        let y = model.forward(&x);
        let dist = distance(&y, &target);
        trace.times.push(step as f64 * settings.dt);
        trace.velocities.push(demo_velocity(model, ds, &x));
        trace.positions.push(y);
        trace.latent.push(x.clone());
        trace.final_distance = dist;
        if dist <= settings.eps {
            trace.converged = true;
            break;
        }
        if step < max_steps {
            x = rk4_step(ds, &x, settings.dt);
        }
    }
    Ok(trace)
}

impl RolloutTrace {
    pub fn summary(&self) -> RolloutSummary {
        RolloutSummary {
            converged: self.converged,
            final_distance: self.final_distance,
            steps: self.times.len().saturating_sub(1),
        }
    }

    /// `time, y_1..y_n, v_1..v_n` at full precision.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let n = self.positions.first().map_or(0, Vec::len);
        let mut header = vec!["time".to_string()];
        header.extend((1..=n).map(|j| format!("y_{j}")));
        header.extend((1..=n).map(|j| format!("v_{j}")));
        writeln!(out, "{}", header.join(","))?;
        for ((t, y), v) in self.times.iter().zip(&self.positions).zip(&self.velocities) {
            let mut fields = vec![format!("{t:?}")];
            fields.extend(y.iter().map(|x| format!("{x:?}")));
            fields.extend(v.iter().map(|x| format!("{x:?}")));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }
}
