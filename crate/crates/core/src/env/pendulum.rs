//! Inverted pendulum `m l² θ̈ = g m l sin θ − η θ̇ + u` with state `(θ, θ̇)`.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dynamics::{rk4_step, Dynamics, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumParams {
    /// Mass in kg.
    pub m: f64,
    /// Length in m.
    pub l: f64,
    /// Friction coefficient in N·m·s/rad.
    pub eta: f64,
    pub g: f64,
    /// Symmetric torque bound `|u| ≤ u_max`.
    pub u_max: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            m: 0.15,
            l: 0.5,
            eta: 0.1,
            g: 9.81,
            u_max: 1.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.m, self.l, self.g, self.u_max];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("invalid pendulum parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pendulum {
    pub params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    /// `½ m l² θ̇² + m g l cos θ`.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let p = &self.params;
        0.5 * p.m * p.l * p.l * x[1] * x[1] + p.m * p.g * p.l * x[0].cos()
    }
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let p = &self.params;
        let inertia = p.m * p.l * p.l;
        let acc = (p.g * p.m * p.l * x[0].sin() - p.eta * x[1] + u[0]) / inertia;
        Ok(dvector![x[1], acc])
    }

    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (dvector![-self.params.u_max], dvector![self.params.u_max])
    }

    fn continuous_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = &self.params;
        let inertia = p.m * p.l * p.l;
        Ok((
            dmatrix![0.0, 1.0; p.g / p.l * x[0].cos(), -p.eta / inertia],
            dmatrix![0.0; 1.0 / inertia],
        ))
    }
}

/// One control interval of the true pendulum with the torque clamped to its
/// bound.
pub fn pendulum_step(x: &DVector<f64>, u: &DVector<f64>, params: &PendulumParams, dt: f64) -> Result<DVector<f64>> {
    rk4_step(&Pendulum::new(params.clone())?, x, u, dt, DEFAULT_SUBSTEPS)
}
