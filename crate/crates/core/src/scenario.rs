//! TOML scenario files.
//!
//! Every key is optional except the inverter list; omitted keys take the
//! reference-case defaults and are listed in [`Scenario::provenance`].
//! Complex values are written `[re, im]`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cross_forming::ModeSwitchConfig;
use crate::error::{Error, Result};
use crate::forming::{DroopParams, DualPortParams, DvocParams, VsmParams};
use crate::limiting::{AdaptiveViConfig, LimiterFrame};
use crate::neg_seq::NegSeqMode;
use crate::network::{
    Branch, FaultEvent, FaultKind, Load, MultiBusNetwork, ShuntKind, Source, TheveninGrid,
};
use crate::phasor::Cx;
use crate::sim::{
    FormingKind, InverterConfig, NetworkModel, Regulator, SetpointEvent, SimConfig, SimSetup,
};

type C2 = [f64; 2];

fn cx(v: C2) -> Cx {
    Cx::new(v[0], v[1])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decimation: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega0: Option<f64>,
    /// Impedance base (Ω) used to convert `r_f_ohm`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_base_ohm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub bus: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<C2>,
    pub z: C2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSection {
    pub from: String,
    pub to: String,
    pub z: C2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSection {
    pub bus: String,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// `thevenin` (default) or `multibus`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_g1: Option<C2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_g2: Option<C2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z0_g2: Option<C2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_g: Option<C2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buses: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branch: Vec<BranchSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub load: Vec<LoadSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverterSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_lim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_v: Option<C2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forming: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regulator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limiter_frame: Option<LimiterFrame>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neg_seq_mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_neg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub magnitude_droop_in_cf: Option<bool>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_dc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_dc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_dc_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard_limiter: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_th: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_vi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_vi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_fb: Option<f64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_enter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_recover: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_exit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_lock: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reseed: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    /// `three_phase`, `slg`, `llg` or `dip`.
    pub kind: String,
    pub t_on: f64,
    /// Omit for a permanent fault.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_clear: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_f_ohm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_f_pu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bus: Option<String>,
    /// Retained grid-voltage magnitude of a dip.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mag: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_jump: Option<f64>,
    /// Active-power setpoint applied after fault detection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_star_fault: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_delay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointSection {
    pub t: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inverter: Option<String>,
    pub p_star: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub inverter: Vec<InverterSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fault: Vec<FaultSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub setpoint: Vec<SetpointSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    /// The file with every default filled in.
    pub file: ScenarioFile,
    pub setup: SimSetup,
    /// One line per default that was applied.
    pub provenance: Vec<String>,
}

pub mod defaults {
    use std::f64::consts::PI;

    pub const DT: f64 = 1e-4;
    pub const T_END: f64 = 10.0;
    pub const TAU_C: f64 = 1e-3;
    pub const DECIMATION: usize = 10;
    pub const OMEGA0: f64 = 100.0 * PI;
    /// 220 kV line-to-line on 200 MVA.
    pub const Z_BASE_OHM: f64 = 242.0;
    pub const Z_G1: [f64; 2] = [0.01, 0.1];
    pub const Z_G2: [f64; 2] = [0.003, 0.03];
    pub const I_LIM: f64 = 1.1;
    pub const Z_V: [f64; 2] = [0.0, 0.2];
    pub const T_J: f64 = 5.0;
    pub const D: f64 = 25.0;
    pub const M_Q: f64 = 0.2;
    pub const M_P: f64 = 0.02;
    pub const P_STAR: f64 = 0.2;
    pub const V_STAR: f64 = 1.0;
    pub const ETA: f64 = 10.0;
    pub const ALPHA: f64 = 1.0;
    pub const KAPPA_I: f64 = 50.0;
    pub const KAPPA: f64 = 1.0;
    pub const TAU_MU: f64 = 0.01;
    pub const TAU_V: f64 = 0.01;
    pub const I_TH: f64 = 1.0;
    pub const KAPPA_VI: f64 = 0.91;
    pub const SIGMA_VI: f64 = 10.0;
    pub const TAU_FB: f64 = 1e-3;
    pub const R_F_OHM: f64 = 1.0;
    pub const DETECTION_DELAY: f64 = 5e-3;
}

struct Filler<'a> {
    notes: &'a mut Vec<String>,
    prefix: String,
}

impl Filler<'_> {
    fn or<T: Clone + std::fmt::Debug + Serialize>(&mut self, slot: &mut Option<T>, key: &str, v: T, why: &str) {
        if slot.is_none() {
            let shown = toml::Value::try_from(&v).map_or_else(|_| format!("{v:?}"), |x| x.to_string());
            self.notes
                .push(format!("{}{key} = {shown} (default: {why})", self.prefix));
            *slot = Some(v);
        }
    }
}

/// Parameter keys owned by each forming kind.
pub const FORMING_KEYS: &[(&str, &[&str])] = &[
    ("vsm", &["t_j", "d", "m_q", "p_star", "q_star", "v_star"]),
    ("droop", &["m_p", "m_q", "p_star", "q_star", "v_star"]),
    ("dvoc", &["eta", "alpha", "phi", "p_star", "q_star", "v_star"]),
    (
        "dual_port",
        &["m_p", "m_q", "m_dc", "v_dc", "v_dc_star", "p_star", "q_star", "v_star"],
    ),
    ("fixed", &["v_star", "theta"]),
];

/// Parameter keys owned by each regulator kind.
pub const REGULATOR_KEYS: &[(&str, &[&str])] = &[
    ("explicit", &["kappa_i", "hard_limiter"]),
    ("implicit", &["kappa", "tau_mu", "tau_v"]),
    ("virtual_admittance", &[]),
    ("adaptive_vi", &["i_th", "kappa_vi", "sigma_vi", "tau_fb"]),
    ("current_forming", &[]),
];

fn present_keys(inv: &InverterSection) -> Vec<&'static str> {
    let mut k = Vec::new();
    macro_rules! chk {
        ($($f:ident),*) => { $( if inv.$f.is_some() { k.push(stringify!($f)); } )* };
    }
    chk!(
        t_j, d, m_p, m_q, p_star, q_star, v_star, eta, alpha, phi, m_dc, v_dc, v_dc_star, theta,
        kappa_i, hard_limiter, kappa, tau_mu, tau_v, i_th, kappa_vi, sigma_vi, tau_fb
    );
    k
}

impl ScenarioFile {
    /// Fills every default, collecting provenance notes and all semantic
    /// errors in one pass.
    pub fn normalized(&self) -> Result<(ScenarioFile, Vec<String>)> {
        let mut f = self.clone();
        let mut notes = Vec::new();
        let mut errs: Vec<String> = Vec::new();

        let mut fl = Filler {
            notes: &mut notes,
            prefix: "sim.".into(),
        };
        fl.or(&mut f.sim.dt, "dt", defaults::DT, "fixed RK4 step");
        fl.or(&mut f.sim.t_end, "t_end", defaults::T_END, "reference run length");
        fl.or(&mut f.sim.tau_c, "tau_c", defaults::TAU_C, "current-tracking lag");
        fl.or(&mut f.sim.decimation, "decimation", defaults::DECIMATION, "record every 1 ms");
        fl.or(&mut f.sim.omega0, "omega0", defaults::OMEGA0, "50 Hz");
        fl.or(&mut f.sim.z_base_ohm, "z_base_ohm", defaults::Z_BASE_OHM, "220 kV, 200 MVA");

        let mut fl = Filler {
            notes: &mut notes,
            prefix: "network.".into(),
        };
        fl.or(&mut f.network.kind, "kind", "thevenin".to_string(), "single-inverter system");
        let kind = f.network.kind.clone().unwrap_or_default();
        match kind.as_str() {
            "thevenin" => {
                fl.or(&mut f.network.z_g1, "z_g1", defaults::Z_G1, "reference grid impedance");
                fl.or(&mut f.network.z_g2, "z_g2", defaults::Z_G2, "reference grid impedance");
                let z2 = f.network.z_g2.expect("filled");
                fl.or(&mut f.network.z0_g2, "z0_g2", z2, "zero sequence equals positive");
                fl.or(&mut f.network.v_g, "v_g", [1.0, 0.0], "nominal grid voltage");
                if f.network.buses.is_some()
                    || f.network.source.is_some()
                    || !f.network.branch.is_empty()
                    || !f.network.load.is_empty()
                {
                    errs.push("network: buses/source/branch/load apply to kind = \"multibus\" only".into());
                }
            }
            "multibus" => {
                if f.network.z_g1.is_some()
                    || f.network.z_g2.is_some()
                    || f.network.z0_g2.is_some()
                    || f.network.v_g.is_some()
                {
                    errs.push("network: z_g1/z_g2/z0_g2/v_g apply to kind = \"thevenin\" only".into());
                }
                if f.network.buses.as_ref().map_or(true, |b| b.is_empty()) {
                    errs.push("network: multibus requires a non-empty `buses` list".into());
                }
                if let Some(s) = &mut f.network.source {
                    if s.v.is_none() {
                        fl.notes.push("network.source.v = [1.0, 0.0] (default: nominal)".into());
                        s.v = Some([1.0, 0.0]);
                    }
                }
            }
            other => errs.push(format!("network.kind: unknown kind \"{other}\"")),
        }

        if f.inverter.is_empty() {
            errs.push("at least one [[inverter]] block is required".into());
        }
        for (k, inv) in f.inverter.iter_mut().enumerate() {
            let mut fl = Filler {
                notes: &mut notes,
                prefix: format!("inverter[{k}]."),
            };
            let present = present_keys(inv);
            fl.or(&mut inv.name, "name", format!("inv{}", k + 1), "positional name");
            fl.or(&mut inv.rating, "rating", 1.0, "own base equals system base");
            fl.or(&mut inv.i_lim, "i_lim", defaults::I_LIM, "reference current limit");
            fl.or(&mut inv.z_v, "z_v", defaults::Z_V, "reference virtual impedance");
            fl.or(&mut inv.forming, "forming", "vsm".to_string(), "reference forming law");
            fl.or(&mut inv.regulator, "regulator", "implicit".to_string(), "reference regulator");
            fl.or(&mut inv.limiter_frame, "limiter_frame", LimiterFrame::Stationary, "per-phase limiter");
            fl.or(&mut inv.neg_seq_mode, "neg_seq_mode", "balanced".to_string(), "balanced currents");
            fl.or(&mut inv.tau_neg, "tau_neg", 0.0, "no v⁻ filter");
            fl.or(&mut inv.magnitude_droop_in_cf, "magnitude_droop_in_cf", false, "frozen magnitude under saturation");
            let ms = ModeSwitchConfig::default();
            fl.or(&mut inv.t_enter, "t_enter", ms.t_enter, "mode entry delay");
            fl.or(&mut inv.v_recover, "v_recover", ms.v_recover, "mode exit voltage");
            fl.or(&mut inv.t_exit, "t_exit", ms.t_exit, "mode exit delay");
            fl.or(&mut inv.t_lock, "t_lock", ms.t_lock, "re-entry lockout");
            fl.or(&mut inv.reseed, "reseed", ms.reseed, "re-seed explicit integrator to v*");

            let forming = inv.forming.clone().expect("filled");
            let regulator = inv.regulator.clone().expect("filled");
            let fkeys = FORMING_KEYS.iter().find(|(n, _)| *n == forming).map(|(_, k)| *k);
            let rkeys = REGULATOR_KEYS.iter().find(|(n, _)| *n == regulator).map(|(_, k)| *k);
            if fkeys.is_none() {
                errs.push(format!("inverter[{k}].forming: unknown kind \"{forming}\""));
            }
            if rkeys.is_none() {
                errs.push(format!("inverter[{k}].regulator: unknown kind \"{regulator}\""));
            }
            let allowed: Vec<&str> = fkeys
                .unwrap_or(&[])
                .iter()
                .chain(rkeys.unwrap_or(&[]))
                .copied()
                .collect();
            for key in present {
                if fkeys.is_some() && rkeys.is_some() && !allowed.contains(&key) {
                    errs.push(format!(
                        "inverter[{k}].{key}: not used by forming = \"{forming}\" / regulator = \"{regulator}\""
                    ));
                }
            }
            let want = |key: &str| allowed.contains(&key);
            macro_rules! def {
                ($f:ident, $v:expr, $why:expr) => {
                    if want(stringify!($f)) {
                        fl.or(&mut inv.$f, stringify!($f), $v, $why);
                    }
                };
            }
            def!(p_star, defaults::P_STAR, "reference active setpoint");
            def!(q_star, 0.0, "reference reactive setpoint");
            def!(v_star, defaults::V_STAR, "nominal voltage");
            def!(t_j, defaults::T_J, "reference inertia");
            def!(d, defaults::D, "reference damping");
            def!(m_q, defaults::M_Q, "reference reactive droop");
            def!(m_p, defaults::M_P, "2 % frequency droop");
            def!(eta, defaults::ETA, "oscillator synchronization gain");
            def!(alpha, defaults::ALPHA, "oscillator voltage gain");
            let zv = cx(inv.z_v.expect("filled"));
            def!(phi, zv.arg(), "angle of z_v");
            def!(m_dc, 0.0, "no DC-port coupling");
            def!(v_dc, 1.0, "nominal DC voltage");
            def!(v_dc_star, 1.0, "nominal DC voltage");
            def!(theta, 0.0, "reference angle");
            def!(kappa_i, defaults::KAPPA_I, "reference integral gain");
            def!(hard_limiter, true, "limiter kept as transient backstop");
            def!(kappa, defaults::KAPPA, "reference feedforward gain");
            def!(tau_mu, defaults::TAU_MU, "μ feedback filter");
            def!(tau_v, defaults::TAU_V, "v feedback filter");
            def!(i_th, defaults::I_TH, "threshold matching κ_vi lower bound");
            def!(kappa_vi, defaults::KAPPA_VI, "reference adaptive-VI gain");
            def!(sigma_vi, defaults::SIGMA_VI, "reference adaptive-VI X/R");
            def!(tau_fb, defaults::TAU_FB, "current-magnitude feedback filter");
            match (&f.network.kind.as_deref(), &inv.bus) {
                (Some("multibus"), None) => {
                    errs.push(format!("inverter[{k}].bus: required for a multibus network"))
                }
                (Some("thevenin"), Some(_)) => {
                    errs.push(format!("inverter[{k}].bus: only valid for a multibus network"))
                }
                _ => {}
            }
        }

        for (k, ft) in f.fault.iter_mut().enumerate() {
            let mut fl = Filler {
                notes: &mut notes,
                prefix: format!("fault[{k}]."),
            };
            match ft.kind.as_str() {
                "three_phase" | "slg" | "llg" => {
                    if ft.mag.is_some() || ft.phase_jump.is_some() {
                        errs.push(format!("fault[{k}]: mag/phase_jump apply to kind = \"dip\" only"));
                    }
                    match (ft.r_f_ohm, ft.r_f_pu) {
                        (Some(_), Some(_)) => {
                            errs.push(format!("fault[{k}]: give r_f_ohm or r_f_pu, not both"))
                        }
                        (None, None) => fl.or(&mut ft.r_f_ohm, "r_f_ohm", defaults::R_F_OHM, "grounding resistance"),
                        _ => {}
                    }
                }
                "dip" => {
                    if ft.r_f_ohm.is_some() || ft.r_f_pu.is_some() || ft.bus.is_some() {
                        errs.push(format!("fault[{k}]: r_f/bus do not apply to a dip"));
                    }
                    if ft.mag.is_none() {
                        errs.push(format!("fault[{k}].mag: required for a dip"));
                    }
                    fl.or(&mut ft.phase_jump, "phase_jump", 0.0, "no phase jump");
                }
                other => errs.push(format!("fault[{k}].kind: unknown kind \"{other}\"")),
            }
            if ft.p_star_fault.is_some() {
                fl.or(&mut ft.detection_delay, "detection_delay", defaults::DETECTION_DELAY, "fault detection delay");
            } else if ft.detection_delay.is_some() {
                errs.push(format!("fault[{k}].detection_delay: only used with p_star_fault"));
            }
        }

        if errs.is_empty() {
            Ok((f, notes))
        } else {
            Err(Error::config(format!(
                "{} problem(s):\n  {}",
                errs.len(),
                errs.join("\n  ")
            )))
        }
    }
}

fn bus_index(names: &[String], name: &str, ctx: &str) -> Result<usize> {
    names
        .iter()
        .position(|b| b == name)
        .ok_or_else(|| Error::config(format!("{ctx}: unknown bus \"{name}\"")))
}

/// Builds the simulator setup from a normalized file.
fn build(f: &ScenarioFile) -> Result<SimSetup> {
    let s = &f.sim;
    let sim = SimConfig {
        dt: s.dt.expect("normalized"),
        t_end: s.t_end.expect("normalized"),
        tau_c: s.tau_c.expect("normalized"),
        decimation: s.decimation.expect("normalized"),
        omega0: s.omega0.expect("normalized"),
    };
    let z_base = s.z_base_ohm.expect("normalized");
    let n = &f.network;
    let buses = n.buses.clone().unwrap_or_default();

    let mut inverters = Vec::new();
    for (k, inv) in f.inverter.iter().enumerate() {
        let g = |o: Option<f64>| o.expect("normalized");
        let p = inv.p_star.unwrap_or(0.0);
        let q = inv.q_star.unwrap_or(0.0);
        let v = inv.v_star.unwrap_or(defaults::V_STAR);
        let droop = |m_p: f64| DroopParams {
            m_p,
            m_q: inv.m_q.unwrap_or(0.0),
            p_star: p,
            q_star: q,
            v_star: v,
            omega0: sim.omega0,
        };
        let forming = match inv.forming.as_deref().expect("normalized") {
            "vsm" => FormingKind::Vsm(VsmParams {
                t_j: g(inv.t_j),
                d: g(inv.d),
                m_q: g(inv.m_q),
                p_star: p,
                q_star: q,
                v_star: v,
                omega0: sim.omega0,
            }),
            "droop" => FormingKind::Droop(droop(g(inv.m_p))),
            "dvoc" => FormingKind::Dvoc(DvocParams {
                eta: g(inv.eta),
                alpha: g(inv.alpha),
                phi: g(inv.phi),
                p_star: p,
                q_star: q,
                v_star: v,
                omega0: sim.omega0,
            }),
            "dual_port" => FormingKind::DualPort {
                params: DualPortParams {
                    droop: droop(g(inv.m_p)),
                    m_dc: g(inv.m_dc),
                    v_dc_star: g(inv.v_dc_star),
                },
                v_dc: g(inv.v_dc),
            },
            "fixed" => FormingKind::Fixed {
                v_mag: v,
                theta: g(inv.theta),
            },
            _ => unreachable!("validated"),
        };
        let regulator = match inv.regulator.as_deref().expect("normalized") {
            "explicit" => Regulator::Explicit {
                kappa_i: g(inv.kappa_i),
                hard_limiter: inv.hard_limiter.expect("normalized"),
            },
            "implicit" => Regulator::Implicit {
                kappa: g(inv.kappa),
                tau_mu: g(inv.tau_mu),
                tau_v: g(inv.tau_v),
            },
            "virtual_admittance" => Regulator::VirtualAdmittance,
            "adaptive_vi" => Regulator::AdaptiveVi {
                cfg: AdaptiveViConfig {
                    i_th: g(inv.i_th),
                    kappa_vi: g(inv.kappa_vi),
                    sigma_vi: g(inv.sigma_vi),
                },
                tau_fb: g(inv.tau_fb),
            },
            "current_forming" => Regulator::CurrentForming,
            _ => unreachable!("validated"),
        };
        let neg_seq: NegSeqMode = inv.neg_seq_mode.as_deref().expect("normalized").parse()?;
        let bus = match &inv.bus {
            Some(b) => Some(bus_index(&buses, b, &format!("inverter[{k}].bus"))?),
            None => None,
        };
        inverters.push(InverterConfig {
            name: inv.name.clone().expect("normalized"),
            bus,
            rating: g(inv.rating),
            i_lim: g(inv.i_lim),
            z_v: cx(inv.z_v.expect("normalized")),
            forming,
            regulator,
            limiter_frame: inv.limiter_frame.expect("normalized"),
            neg_seq,
            tau_neg: g(inv.tau_neg),
            mode_switch: ModeSwitchConfig {
                t_enter: g(inv.t_enter),
                v_recover: g(inv.v_recover),
                t_exit: g(inv.t_exit),
                t_lock: g(inv.t_lock),
                reseed: inv.reseed.expect("normalized"),
            },
            magnitude_droop_in_cf: inv.magnitude_droop_in_cf.expect("normalized"),
        });
    }

    let network = match n.kind.as_deref().expect("normalized") {
        "thevenin" => NetworkModel::Thevenin(TheveninGrid {
            z_g1: cx(n.z_g1.expect("normalized")),
            z_g2: cx(n.z_g2.expect("normalized")),
            z0_g2: cx(n.z0_g2.expect("normalized")),
            v_g: cx(n.v_g.expect("normalized")),
        }),
        _ => {
            let mut branches = Vec::new();
            for (k, b) in n.branch.iter().enumerate() {
                let ctx = format!("network.branch[{k}]");
                branches.push(Branch {
                    from: bus_index(&buses, &b.from, &ctx)?,
                    to: bus_index(&buses, &b.to, &ctx)?,
                    z: cx(b.z),
                });
            }
            let mut loads = Vec::new();
            for (k, l) in n.load.iter().enumerate() {
                loads.push(Load {
                    bus: bus_index(&buses, &l.bus, &format!("network.load[{k}]"))?,
                    p: l.p,
                    q: l.q,
                });
            }
            let source = match &n.source {
                Some(s) => Some(Source {
                    bus: bus_index(&buses, &s.bus, "network.source")?,
                    v: cx(s.v.expect("normalized")),
                    z: cx(s.z),
                }),
                None => None,
            };
            NetworkModel::Multibus(MultiBusNetwork {
                bus_names: buses.clone(),
                branches,
                loads,
                source,
                inverter_buses: inverters.iter().map(|i| i.bus.expect("validated")).collect(),
                ratings: inverters.iter().map(|i| i.rating).collect(),
            })
        }
    };

    let mut faults = Vec::new();
    let mut setpoints = Vec::new();
    for (k, ft) in f.fault.iter().enumerate() {
        let kind = match ft.kind.as_str() {
            "three_phase" => FaultKind::Shunt(ShuntKind::ThreePhase),
            "slg" => FaultKind::Shunt(ShuntKind::Slg),
            "llg" => FaultKind::Shunt(ShuntKind::Llg),
            _ => FaultKind::VoltageDip {
                mag: ft.mag.expect("normalized"),
                phase_jump: ft.phase_jump.expect("normalized"),
            },
        };
        let r_f = match (ft.r_f_ohm, ft.r_f_pu) {
            (Some(ohm), _) => ohm / z_base,
            (_, Some(pu)) => pu,
            _ => 0.0,
        };
        let bus = match &ft.bus {
            Some(b) => Some(bus_index(&buses, b, &format!("fault[{k}].bus"))?),
            None => None,
        };
        faults.push(FaultEvent {
            kind,
            r_f,
            t_on: ft.t_on,
            t_clear: ft.t_clear,
            bus,
        });
        if let Some(pf) = ft.p_star_fault {
            let delay = ft.detection_delay.expect("normalized");
            setpoints.push(SetpointEvent {
                t: ft.t_on + delay,
                inverter: None,
                p_star: pf,
            });
            if let Some(tc) = ft.t_clear {
                for (j, inv) in inverters.iter().enumerate() {
                    setpoints.push(SetpointEvent {
                        t: tc + delay,
                        inverter: Some(j),
                        p_star: inv.forming.setpoints().0,
                    });
                }
            }
        }
    }
    for sp in &f.setpoint {
        let inverter = match &sp.inverter {
            Some(name) => Some(
                inverters
                    .iter()
                    .position(|i| &i.name == name)
                    .ok_or_else(|| Error::config(format!("setpoint: unknown inverter \"{name}\"")))?,
            ),
            None => None,
        };
        setpoints.push(SetpointEvent {
            t: sp.t,
            inverter,
            p_star: sp.p_star,
        });
    }
    setpoints.sort_by(|a, b| a.t.total_cmp(&b.t));

    let setup = SimSetup {
        sim,
        network,
        inverters,
        faults,
        setpoints,
    };
    crate::sim::validate_setup(&setup)?;
    Ok(setup)
}

impl Scenario {
    pub fn from_file(file: &ScenarioFile) -> Result<Self> {
        let (file, provenance) = file.normalized()?;
        let setup = build(&file)?;
        Ok(Self {
            name: file.name.clone().unwrap_or_else(|| "scenario".into()),
            file,
            setup,
            provenance,
        })
    }

    /// Effective configuration: the normalized file, preceded by one comment
    /// line per applied default.
    pub fn echo(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for p in &self.provenance {
            out.push_str("# ");
            out.push_str(p);
            out.push('\n');
        }
        out.push_str(&toml::to_string(&self.file).expect("scenario serializes"));
        out
    }

    pub fn inverter_names(&self) -> Vec<String> {
        self.setup.inverters.iter().map(|i| i.name.clone()).collect()
    }

    /// Copy with simulation overrides applied.
    pub fn with_overrides(&self, dt: Option<f64>, t_end: Option<f64>) -> Result<Self> {
        let mut f = self.file.clone();
        if let Some(dt) = dt {
            f.sim.dt = Some(dt);
        }
        if let Some(t) = t_end {
            f.sim.t_end = Some(t);
        }
        let mut s = Scenario::from_file(&f)?;
        s.provenance = self.provenance.clone();
        Ok(s)
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::config(format!("scenario parse error: {e}")))?;
    Scenario::from_file(&file)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text).map_err(|e| match e {
        Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_reference_defaults() {
        let s = parse_scenario("[[inverter]]\n").unwrap();
        let inv = &s.setup.inverters[0];
        assert_eq!(inv.i_lim, 1.1);
        assert_eq!(inv.z_v, Cx::new(0.0, 0.2));
        assert!(s.provenance.iter().any(|p| p.starts_with("inverter[0].i_lim = 1.1")));
        match inv.forming {
            FormingKind::Vsm(v) => assert_eq!((v.t_j, v.d, v.m_q), (5.0, 25.0, 0.2)),
            _ => panic!("vsm expected"),
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_scenario("[[inverter]]\nfoo = 1\n").unwrap_err();
        assert!(e.to_string().contains("foo"), "{e}");
        let e = parse_scenario("[sim]\nfoo = 1\n[[inverter]]\n").unwrap_err();
        assert!(e.to_string().contains("foo"), "{e}");
    }

    #[test]
    fn inapplicable_keys_are_enumerated() {
        let e = parse_scenario("[[inverter]]\nforming = \"vsm\"\neta = 3\nkappa_i = 2\nregulator = \"implicit\"\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("inverter[0].eta") && e.contains("inverter[0].kappa_i"), "{e}");
    }

    #[test]
    fn fault_setpoint_schedule() {
        let s = parse_scenario(
            "[[inverter]]\np_star = 1.0\n[[fault]]\nkind = \"three_phase\"\nt_on = 3.0\nt_clear = 3.3\np_star_fault = 0.35\n",
        )
        .unwrap();
        let sp = &s.setup.setpoints;
        assert_eq!(sp.len(), 2);
        assert!((sp[0].t - 3.005).abs() < 1e-12 && sp[0].p_star == 0.35);
        assert!((sp[1].t - 3.305).abs() < 1e-12 && sp[1].p_star == 1.0);
        assert!((s.setup.faults[0].r_f - 1.0 / 242.0).abs() < 1e-15);
    }

    #[test]
    fn echo_round_trip() {
        let s = parse_scenario(
            "name = \"x\"\n[sim]\nt_end = 1.0\n[[inverter]]\nregulator = \"explicit\"\n[[fault]]\nkind = \"llg\"\nt_on = 0.5\n",
        )
        .unwrap();
        let back = parse_scenario(&s.echo()).unwrap();
        assert_eq!(back.file, s.file);
        assert_eq!(back.setup, s.setup);
        assert!(back.provenance.is_empty());
    }
}
