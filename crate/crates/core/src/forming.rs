//! Voltage-forming reference generators in normal form.
//!
//! Frequencies are carried in rad/s. Droop and inertia gains act on
//! per-unit deviations `(ω − ω0)/ω0`, so `m_p = 0.02` is a 2 % droop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::rk4;
use crate::phasor::{wrap_angle, Cx};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopParams {
    pub m_p: f64,
    pub m_q: f64,
    pub p_star: f64,
    pub q_star: f64,
    pub v_star: f64,
    pub omega0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VsmParams {
    pub t_j: f64,
    pub d: f64,
    pub m_q: f64,
    pub p_star: f64,
    pub q_star: f64,
    pub v_star: f64,
    pub omega0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvocParams {
    pub eta: f64,
    pub alpha: f64,
    pub phi: f64,
    pub p_star: f64,
    pub q_star: f64,
    pub v_star: f64,
    pub omega0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualPortParams {
    pub droop: DroopParams,
    pub m_dc: f64,
    pub v_dc_star: f64,
}

/// Reference generator state. `theta` is the absolute, unwrapped angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormingRefState {
    pub theta: f64,
    pub omega: f64,
    pub v_mag: f64,
    pub v_vec: Cx,
    pub magnitude_droop: bool,
}

impl FormingRefState {
    pub fn new(theta: f64, v_mag: f64, omega0: f64) -> Self {
        Self {
            theta,
            omega: omega0,
            v_mag,
            v_vec: Cx::from_polar(v_mag, theta),
            magnitude_droop: true,
        }
    }

    /// Reference vector `v̂∠θ̂`.
    pub fn reference(&self) -> Cx {
        Cx::from_polar(self.v_mag, self.theta)
    }

    fn with_vector(mut self, v: Cx, dt: f64) -> Self {
        let dtheta = wrap_angle(v.arg() - self.v_vec.arg());
        self.theta += dtheta;
        self.omega = dtheta / dt;
        self.v_mag = v.norm();
        self.v_vec = v;
        self
    }
}

/// `ω̂ = ω0 + ω0·m_p(p* − p)`.
pub fn droop_frequency(p: f64, prm: &DroopParams) -> f64 {
    prm.omega0 * (1.0 + prm.m_p * (prm.p_star - p))
}

/// `v̂ = v* + m_q(q* − q)`.
pub fn droop_magnitude(q: f64, v_star: f64, m_q: f64, q_star: f64) -> f64 {
    v_star + m_q * (q_star - q)
}

pub fn droop_step(
    state: &FormingRefState,
    p: f64,
    q: f64,
    prm: &DroopParams,
    dt: f64,
) -> FormingRefState {
    let omega = droop_frequency(p, prm);
    let mut next = *state;
    next.omega = omega;
    next.theta += omega * dt;
    next.v_mag = if state.magnitude_droop {
        droop_magnitude(q, prm.v_star, prm.m_q, prm.q_star)
    } else {
        prm.v_star
    };
    next.v_vec = next.reference();
    next
}

/// Swing-equation rates `(dθ̂/dt, dω̂/dt)` in rad/s and rad/s².
///
/// `T_J·d(ω̂/ω0)/dt = −D(ω̂/ω0 − 1) + p* − p`.
pub fn vsm_rates(omega: f64, p: f64, prm: &VsmParams) -> (f64, f64) {
    let w = omega / prm.omega0;
    let dw = (-prm.d * (w - 1.0) + prm.p_star - p) / prm.t_j;
    (omega, dw * prm.omega0)
}

pub fn vsm_step(
    state: &FormingRefState,
    p: f64,
    q: f64,
    prm: &VsmParams,
    dt: f64,
) -> FormingRefState {
    let y = rk4(0.0, &[state.theta, state.omega], dt, |_, y| {
        let (a, b) = vsm_rates(y[1], p, prm);
        [a, b]
    });
    let mut next = *state;
    next.theta = y[0];
    next.omega = y[1];
    next.v_mag = if state.magnitude_droop {
        droop_magnitude(q, prm.v_star, prm.m_q, prm.q_star)
    } else {
        prm.v_star
    };
    next.v_vec = next.reference();
    next
}

/// Polar complex-droop rates `(dθ̂/dt, dv̂/dt)`.
pub fn complex_droop_rates(v_mag: f64, p: f64, q: f64, prm: &DvocParams) -> (f64, f64) {
    let vs2 = prm.v_star * prm.v_star;
    let v2 = v_mag * v_mag;
    let dtheta = prm.omega0 + prm.eta * (prm.p_star / vs2 - p / v2);
    let dv = v_mag
        * (prm.eta * (prm.q_star / vs2 - q / v2) + prm.eta * prm.alpha * (vs2 - v2) / vs2);
    (dtheta, dv)
}

pub fn complex_droop_step(
    state: &FormingRefState,
    p: f64,
    q: f64,
    prm: &DvocParams,
    dt: f64,
) -> Result<FormingRefState> {
    if !(state.v_mag > 0.0) {
        return Err(Error::config("complex droop requires a positive voltage magnitude"));
    }
    let y = rk4(0.0, &[state.theta, state.v_mag], dt, |_, y| {
        let (a, b) = complex_droop_rates(y[1], p, q, prm);
        [a, b]
    });
    let mut next = *state;
    next.omega = (y[0] - state.theta) / dt;
    next.theta = y[0];
    next.v_mag = y[1];
    next.v_vec = next.reference();
    Ok(next)
}

/// Enhanced dVOC vector field in the stationary frame:
/// `jω0·v̂ + ηe^{jφ}((p* − jq*)/v*²·v̂ − i/λ) + ηα(v*² − |v̂|²)/v*²·v̂`.
pub fn dvoc_rate(v: Cx, i_o: Cx, lambda: f64, prm: &DvocParams) -> Cx {
    let vs2 = prm.v_star * prm.v_star;
    let s_star = Cx::new(prm.p_star, -prm.q_star) / vs2;
    let rot = Cx::from_polar(prm.eta, prm.phi);
    Cx::new(0.0, prm.omega0) * v
        + rot * (s_star * v - i_o / lambda)
        + v * (prm.eta * prm.alpha * (vs2 - v.norm_sqr()) / vs2)
}

pub fn dvoc_step(state: &FormingRefState, i_o: Cx, prm: &DvocParams, dt: f64) -> FormingRefState {
    let v = rk4(0.0, &state.v_vec, dt, |_, v| dvoc_rate(*v, i_o, 1.0, prm));
    state.with_vector(v, dt)
}

pub fn enhanced_dvoc_step(
    state: &FormingRefState,
    i_o: Cx,
    lambda: f64,
    prm: &DvocParams,
    dt: f64,
) -> Result<FormingRefState> {
    if !(lambda > 0.0) {
        return Err(Error::config(format!("λ must be positive, got {lambda}")));
    }
    let v = rk4(0.0, &state.v_vec, dt, |_, v| dvoc_rate(*v, i_o, lambda, prm));
    Ok(state.with_vector(v, dt))
}

/// `ω̂ = ω0 + ω0·(m_p(p* − p) + m_dc(v_dc − v_dc*))`.
pub fn dual_port_frequency(p: f64, v_dc: f64, prm: &DualPortParams) -> f64 {
    let d = &prm.droop;
    d.omega0 * (1.0 + d.m_p * (d.p_star - p) + prm.m_dc * (v_dc - prm.v_dc_star))
}

pub fn dual_port_step(
    state: &FormingRefState,
    p: f64,
    q: f64,
    v_dc: f64,
    prm: &DualPortParams,
    dt: f64,
) -> FormingRefState {
    let mut next = droop_step(state, p, q, &prm.droop, dt);
    let omega = dual_port_frequency(p, v_dc, prm);
    next.theta = state.theta + omega * dt;
    next.omega = omega;
    next.v_vec = next.reference();
    next
}

/// Active power computed with the reference voltage, `Re{v̂·conj(i_o⁺)}`.
pub fn virtual_power_feedback(v_ref: Cx, i_o: Cx) -> f64 {
    (v_ref * i_o.conj()).re
}
