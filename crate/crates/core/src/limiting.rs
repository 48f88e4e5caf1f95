//! Reference current limiters and the benchmark current-limiting strategies
//! (adaptive virtual impedance and saturated current-forming control).

use serde::{Deserialize, Serialize};

use crate::cross_forming::{dos, VirtualImpedance};
use crate::error::{Error, Result};
use crate::phasor::{Cx, SequencePhasor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimiterFrame {
    #[default]
    Stationary,
    Rotational,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimiterConfig {
    pub i_lim: f64,
    pub frame: LimiterFrame,
}

impl LimiterConfig {
    /// Applies the configured limiter; `theta` is the dq-frame angle.
    pub fn apply(&self, i: &SequencePhasor, theta: f64) -> (SequencePhasor, f64) {
        match self.frame {
            LimiterFrame::Stationary => elliptical_limit(i, self.i_lim),
            LimiterFrame::Rotational => {
                let (p, n) = to_dq(i, theta);
                let (p, n, mu) = dq_limit(p, n, theta, self.i_lim);
                (from_dq(p, n, theta), mu)
            }
        }
    }
}

pub fn circular_limit(i: Cx, i_lim: f64) -> Cx {
    let m = i.norm();
    if m <= i_lim {
        i
    } else {
        i * (i_lim / m)
    }
}

/// Scales both sequences by the common DoS.
pub fn elliptical_limit(i: &SequencePhasor, i_lim: f64) -> (SequencePhasor, f64) {
    let mu = dos(i, i_lim);
    (i.scale(mu), mu)
}

/// Synchronous-frame components `(e^{−jθ}i⁺, e^{jθ}i⁻)`.
pub fn to_dq(i: &SequencePhasor, theta: f64) -> (Cx, Cx) {
    (
        i.pos * Cx::from_polar(1.0, -theta),
        i.neg * Cx::from_polar(1.0, theta),
    )
}

pub fn from_dq(pos: Cx, neg: Cx, theta: f64) -> SequencePhasor {
    SequencePhasor::new(
        pos * Cx::from_polar(1.0, theta),
        neg * Cx::from_polar(1.0, -theta),
    )
}

/// Limiter acting on dq-frame sequence components. Phase magnitudes are
/// recovered from `|i_dq⁺|`, `|i_dq⁻|` and the frame-invariant product
/// `i_dq⁺·i_dq⁻`.
pub fn dq_limit(i_dq_pos: Cx, i_dq_neg: Cx, _theta: f64, i_lim: f64) -> (Cx, Cx, f64) {
    // the product and moduli are frame invariant, so the stationary formula applies unchanged
    let mu = dos(&SequencePhasor::new(i_dq_pos, i_dq_neg), i_lim);
    (i_dq_pos * mu, i_dq_neg * mu, mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveViConfig {
    pub i_th: f64,
    pub kappa_vi: f64,
    pub sigma_vi: f64,
}

impl AdaptiveViConfig {
    pub fn validate(&self, i_lim: f64) -> Result<()> {
        if !(self.i_th > 0.0 && self.i_th < i_lim) {
            return Err(Error::config(format!(
                "adaptive VI threshold {} must lie in (0, I_lim = {i_lim})",
                self.i_th
            )));
        }
        if self.kappa_vi < 0.0 || self.sigma_vi < 0.0 {
            return Err(Error::config("adaptive VI gains must be non-negative"));
        }
        Ok(())
    }
}

/// Threshold virtual impedance driven by the current-magnitude feedback.
pub fn adaptive_virtual_impedance(i_mag: f64, cfg: &AdaptiveViConfig) -> VirtualImpedance {
    let r_v = if i_mag <= cfg.i_th {
        0.0
    } else {
        cfg.kappa_vi * (i_mag - cfg.i_th)
    };
    VirtualImpedance::new(r_v, cfg.sigma_vi * r_v)
}

/// Smallest `κ_vi` that keeps the steady bolted-fault current within `I_lim`.
pub fn kvi_lower_bound(v_ref_mag: f64, i_lim: f64, i_th: f64, sigma_vi: f64) -> Result<f64> {
    if i_lim <= i_th {
        return Err(Error::config(format!(
            "I_lim ({i_lim}) must exceed the threshold I_th ({i_th})"
        )));
    }
    Ok(v_ref_mag / (i_lim * (sigma_vi * sigma_vi + 1.0).sqrt() * (i_lim - i_th)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentFormingConfig {
    pub m_p: f64,
    pub p_star: f64,
    pub omega0: f64,
    pub i_lim: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentFormingState {
    pub theta: f64,
}

/// Droop-synchronised current vector `I_lim∠(θ − ψ)`.
pub fn current_forming_step(
    state: &CurrentFormingState,
    p: f64,
    cfg: &CurrentFormingConfig,
    dt: f64,
) -> (CurrentFormingState, Cx) {
    let omega = cfg.omega0 * (1.0 + cfg.m_p * (cfg.p_star - p));
    let next = CurrentFormingState {
        theta: state.theta + omega * dt,
    };
    (next, Cx::from_polar(cfg.i_lim, next.theta - cfg.psi))
}
