//! Cart-pole with state `(x, ẋ, θ, θ̇)`, where `θ = 0` is the upright pole,
//! driven by a horizontal force on the cart:
//!
//! ```text
//! (M + m) ẍ − m l cos θ θ̈ + m l θ̇² sin θ = u − η ẋ
//! −m cos θ ẍ + m l θ̈ − m g sin θ = 0
//! ```

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dynamics::{rk4_step, Dynamics, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    /// Cart mass `M` in kg.
    pub cart_mass: f64,
    /// Pole mass `m` in kg.
    pub pole_mass: f64,
    /// Pole length `l` in m.
    pub pole_length: f64,
    /// Rail friction coefficient.
    pub eta: f64,
    pub g: f64,
    pub rail_min: f64,
    pub rail_max: f64,
    /// Symmetric pole angle bound in degrees.
    pub angle_limit_deg: f64,
    /// Symmetric force bound `|u| ≤ u_max`.
    pub u_max: f64,
    /// Initial cart position.
    pub start: f64,
    /// Goal cart position.
    pub goal: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pole_mass: 0.5,
            pole_length: 0.5,
            eta: 0.1,
            g: 9.81,
            rail_min: -10.0,
            rail_max: 3.0,
            angle_limit_deg: 90.0,
            u_max: 5.0,
            start: -2.0,
            goal: 2.6,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.cart_mass,
            self.pole_mass,
            self.pole_length,
            self.g,
            self.u_max,
            self.angle_limit_deg,
        ];
        let ok = positive.iter().all(|v| v.is_finite() && *v > 0.0)
            && self.eta.is_finite()
            && self.eta >= 0.0
            && self.rail_min < self.rail_max
            && self.angle_limit_deg <= 180.0
            && (self.rail_min..=self.rail_max).contains(&self.start)
            && (self.rail_min..=self.rail_max).contains(&self.goal);
        if !ok {
            return Err(Error::Config(format!("invalid cart-pole parameters {self:?}")));
        }
        Ok(())
    }

    pub fn angle_limit_rad(&self) -> f64 {
        self.angle_limit_deg.to_radians()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartPole {
    pub params: CartPoleParams,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl Dynamics for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let p = &self.params;
        let (big_m, m, l) = (p.cart_mass, p.pole_mass, p.pole_length);
        let (s, c) = x[2].sin_cos();
        let det = m * l * (big_m + m * s * s);
        if !(det.abs() > 1e-12) {
            return Err(Error::InvalidInput("singular cart-pole mass matrix".into()));
        }
        let r1 = u[0] - p.eta * x[1] - m * l * x[3] * x[3] * s;
        let r2 = m * p.g * s;
        let xdd = (m * l * r1 + m * l * c * r2) / det;
        let tdd = ((big_m + m) * r2 + m * c * r1) / det;
        Ok(dvector![x[1], xdd, x[3], tdd])
    }

    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (dvector![-self.params.u_max], dvector![self.params.u_max])
    }
}

/// Continuous-time linearization at the upright rest state.
pub fn upright_linearization(p: &CartPoleParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let (big_m, m, l) = (p.cart_mass, p.pole_mass, p.pole_length);
    let a = dmatrix![
        0.0, 1.0, 0.0, 0.0;
        0.0, -p.eta / big_m, m * p.g / big_m, 0.0;
        0.0, 0.0, 0.0, 1.0;
        0.0, -p.eta / (l * big_m), (big_m + m) * p.g / (l * big_m), 0.0
    ];
    let b = dmatrix![0.0; 1.0 / big_m; 0.0; 1.0 / (l * big_m)];
    (a, b)
}

/// One control interval of the true cart-pole with the force clamped to its
/// bound.
pub fn cartpole_step(x: &DVector<f64>, u: &DVector<f64>, params: &CartPoleParams, dt: f64) -> Result<DVector<f64>> {
    rk4_step(&CartPole::new(params.clone())?, x, u, dt, DEFAULT_SUBSTEPS)
}
