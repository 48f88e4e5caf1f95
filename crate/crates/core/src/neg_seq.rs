//! Negative-sequence current references and power-ripple measurement.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phasor::{power_decompose, Cx, SequencePhasor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NegSeqMode {
    Balanced,
    Flexible(f64),
    VoltageMitigation(f64),
}

impl NegSeqMode {
    pub const P_OSC_SUPPRESS: NegSeqMode = NegSeqMode::Flexible(-1.0);
    pub const Q_OSC_SUPPRESS: NegSeqMode = NegSeqMode::Flexible(1.0);

    pub fn validate(&self) -> Result<()> {
        match *self {
            NegSeqMode::Flexible(chi) if !(-1.0..=1.0).contains(&chi) => {
                Err(Error::config(format!("χ = {chi} outside [-1, 1]")))
            }
            NegSeqMode::VoltageMitigation(k) if !(k >= 0.0) => {
                Err(Error::config(format!("K-factor {k} must be non-negative")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_balanced(&self) -> bool {
        matches!(self, NegSeqMode::Balanced)
    }
}

impl fmt::Display for NegSeqMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NegSeqMode::Balanced => write!(f, "balanced"),
            NegSeqMode::Flexible(c) if c == -1.0 => write!(f, "p_osc_suppress"),
            NegSeqMode::Flexible(c) if c == 1.0 => write!(f, "q_osc_suppress"),
            NegSeqMode::Flexible(c) => write!(f, "flexible:{c}"),
            NegSeqMode::VoltageMitigation(k) => write!(f, "v_mitigation:{k}"),
        }
    }
}

impl FromStr for NegSeqMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number in neg_seq_mode \"{s}\"")))
        };
        let mode = match s.trim() {
            "balanced" => NegSeqMode::Balanced,
            "p_osc_suppress" => NegSeqMode::P_OSC_SUPPRESS,
            "q_osc_suppress" => NegSeqMode::Q_OSC_SUPPRESS,
            other => match other.split_once(':') {
                Some(("flexible", v)) => NegSeqMode::Flexible(num(v)?),
                Some(("v_mitigation", v)) => NegSeqMode::VoltageMitigation(num(v)?),
                _ => return Err(Error::config(format!("unknown neg_seq_mode \"{s}\""))),
            },
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// Negative-sequence reference from the positive-sequence reference `î⁺`
/// (taken before limiting) and the measured voltage.
pub fn neg_seq_reference(mode: &NegSeqMode, v: &SequencePhasor, i_pos: Cx) -> Result<Cx> {
    match *mode {
        NegSeqMode::Balanced => Ok(Cx::new(0.0, 0.0)),
        NegSeqMode::Flexible(chi) => {
            if v.pos.norm_sqr() == 0.0 {
                return Err(Error::VoltageCollapse);
            }
            Ok(v.neg / v.pos.conj() * i_pos.conj() * chi)
        }
        NegSeqMode::VoltageMitigation(k) => Ok(Cx::new(0.0, -k) * v.neg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ripple {
    pub p_ripple: f64,
    pub q_ripple: f64,
}

/// Peak-to-peak double-frequency ripple of `p(t)` and `q(t)`.
pub fn verify_non_oscillation(v: &SequencePhasor, i: &SequencePhasor) -> Ripple {
    let d = power_decompose(v, i);
    Ripple {
        p_ripple: d.p_ripple(),
        q_ripple: d.q_ripple(),
    }
}
