//! Fixed-step dynamic-phasor engine.
//!
//! All phasors are baseband envelopes in the frame rotating at `ω0`, so a
//! reference angle is stored as `θ̂ − ω0·t`. Controller and filter states,
//! and the first-order current-tracking lag, are integrated together with
//! RK4; the network is algebraic and evaluated at every stage from the
//! current states. Events act at step boundaries only.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cross_forming::{
    dos, mode_switch, ExplicitRegState, ModeMachine, ModeSwitchConfig, OperatingMode,
    VirtualImpedance, MU_FLOOR,
};
use crate::error::{Error, Result};
use crate::forming::{dvoc_rate, DroopParams, DualPortParams, DvocParams, VsmParams};
use crate::integrate::rk4;
use crate::limiting::{adaptive_virtual_impedance, AdaptiveViConfig, LimiterConfig, LimiterFrame};
use crate::neg_seq::{neg_seq_reference, NegSeqMode};
use crate::network::{
    thevenin_map, FaultEvent, FaultKind, MultiBusNetwork, NetMap, ShuntFault, ShuntKind,
    TheveninGrid, Topology,
};
use crate::phasor::{phase_magnitudes, Cx, SequencePhasor};
use crate::record::RecordRow;

const J: Cx = Cx::new(0.0, 1.0);
const ZERO: Cx = Cx::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FormingKind {
    Droop(DroopParams),
    Vsm(VsmParams),
    Dvoc(DvocParams),
    DualPort { params: DualPortParams, v_dc: f64 },
    /// Constant reference `v_mag∠theta` in the rotating frame.
    Fixed { v_mag: f64, theta: f64 },
}

impl FormingKind {
    pub fn setpoints(&self) -> (f64, f64, f64) {
        match self {
            FormingKind::Droop(d) => (d.p_star, d.q_star, d.v_star),
            FormingKind::Vsm(v) => (v.p_star, v.q_star, v.v_star),
            FormingKind::Dvoc(d) => (d.p_star, d.q_star, d.v_star),
            FormingKind::DualPort { params, .. } => {
                (params.droop.p_star, params.droop.q_star, params.droop.v_star)
            }
            FormingKind::Fixed { v_mag, .. } => (0.0, 0.0, *v_mag),
        }
    }

    fn m_q(&self) -> f64 {
        match self {
            FormingKind::Droop(d) => d.m_q,
            FormingKind::Vsm(v) => v.m_q,
            FormingKind::DualPort { params, .. } => params.droop.m_q,
            FormingKind::Dvoc(_) | FormingKind::Fixed { .. } => 0.0,
        }
    }

    fn omega0(&self) -> Option<f64> {
        match self {
            FormingKind::Droop(d) => Some(d.omega0),
            FormingKind::Vsm(v) => Some(v.omega0),
            FormingKind::Dvoc(d) => Some(d.omega0),
            FormingKind::DualPort { params, .. } => Some(params.droop.omega0),
            FormingKind::Fixed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Regulator {
    Explicit { kappa_i: f64, hard_limiter: bool },
    Implicit { kappa: f64, tau_mu: f64, tau_v: f64 },
    VirtualAdmittance,
    AdaptiveVi { cfg: AdaptiveViConfig, tau_fb: f64 },
    CurrentForming,
}

impl Regulator {
    pub fn name(&self) -> &'static str {
        match self {
            Regulator::Explicit { .. } => "explicit",
            Regulator::Implicit { .. } => "implicit",
            Regulator::VirtualAdmittance => "virtual_admittance",
            Regulator::AdaptiveVi { .. } => "adaptive_vi",
            Regulator::CurrentForming => "current_forming",
        }
    }

    fn is_cross_forming(&self) -> bool {
        matches!(self, Regulator::Explicit { .. } | Regulator::Implicit { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterConfig {
    pub name: String,
    /// Bus index for multi-bus networks.
    pub bus: Option<usize>,
    /// Rating on the system power base.
    pub rating: f64,
    pub i_lim: f64,
    pub z_v: Cx,
    pub forming: FormingKind,
    pub regulator: Regulator,
    pub limiter_frame: LimiterFrame,
    pub neg_seq: NegSeqMode,
    /// Time constant of the optional `v⁻` feedback filter (0 disables it).
    pub tau_neg: f64,
    pub mode_switch: ModeSwitchConfig,
    /// Keep the reactive-power magnitude droop active in cross-forming mode.
    pub magnitude_droop_in_cf: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Current-tracking lag; zero selects the Norton form.
    pub tau_c: f64,
    pub decimation: usize,
    pub omega0: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            t_end: 10.0,
            tau_c: 1e-3,
            decimation: 10,
            omega0: 100.0 * std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetpointEvent {
    pub t: f64,
    /// `None` applies to every inverter.
    pub inverter: Option<usize>,
    pub p_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetworkModel {
    Thevenin(TheveninGrid),
    Multibus(MultiBusNetwork),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetup {
    pub sim: SimConfig,
    pub network: NetworkModel,
    pub inverters: Vec<InverterConfig>,
    pub faults: Vec<FaultEvent>,
    pub setpoints: Vec<SetpointEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    EnterCrossForming,
    ExitCrossForming,
    /// Implicit regulator DoS hit its floor.
    MuFloor,
    /// Explicit internal voltage driven to zero: no feasible operating point.
    LambdaFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub t: f64,
    pub inverter: usize,
    pub kind: DiagnosticKind,
}

const NS: usize = 15;
mod ix {
    pub const THETA: usize = 0;
    pub const W: usize = 1;
    pub const VV: usize = 2;
    pub const VLAM: usize = 4;
    pub const MU: usize = 5;
    pub const VF: usize = 6;
    pub const IP: usize = 8;
    pub const IN: usize = 10;
    pub const IFB: usize = 12;
    pub const VN: usize = 13;
}

fn get_c(y: &[f64], k: usize) -> Cx {
    Cx::new(y[k], y[k + 1])
}

fn set_c(y: &mut [f64], k: usize, z: Cx) {
    y[k] = z.re;
    y[k + 1] = z.im;
}

/// Step-boundary state of one inverter.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Discrete {
    machine: ModeMachine,
    p_star: f64,
    psi: f64,
}

/// Algebraic quantities of one inverter at one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverterOutputs {
    pub v: SequencePhasor,
    pub i: SequencePhasor,
    pub v_ref: Cx,
    pub i_unsat: SequencePhasor,
    pub i_ref: SequencePhasor,
    pub p: f64,
    pub q: f64,
    pub p_virtual: f64,
    pub theta_rel: f64,
    pub omega: f64,
    pub mu: f64,
    pub v_lambda_mag: f64,
    pub mode: OperatingMode,
    /// Peak phase magnitude of the voltage-forming reference.
    pub shadow_peak: f64,
}

pub struct World {
    pub setup: SimSetup,
    pub t: f64,
    pub steps: u64,
    y: Vec<f64>,
    disc: Vec<Discrete>,
    map: NetMap,
    active_fault: Option<usize>,
    pub diagnostics: Vec<Diagnostic>,
}

fn norton_mode(setup: &SimSetup) -> bool {
    setup.sim.tau_c == 0.0
}

pub fn validate_setup(setup: &SimSetup) -> Result<()> {
    let s = &setup.sim;
    if !(s.dt > 0.0) || !(s.t_end >= 0.0) || !(s.tau_c >= 0.0) || s.decimation == 0 {
        return Err(Error::config("dt > 0, t_end ≥ 0, tau_c ≥ 0 and decimation ≥ 1 required"));
    }
    if setup.inverters.is_empty() {
        return Err(Error::config("at least one inverter is required"));
    }
    for (k, inv) in setup.inverters.iter().enumerate() {
        let ctx = |m: &str| Error::config(format!("inverter {k} ({}): {m}", inv.name));
        if !(inv.i_lim > 0.0) {
            return Err(ctx("I_lim must be positive"));
        }
        if inv.z_v.norm() == 0.0 {
            return Err(ctx("virtual impedance must be non-zero"));
        }
        if !(inv.rating > 0.0) {
            return Err(ctx("rating must be positive"));
        }
        inv.neg_seq.validate()?;
        let (_, _, v_star) = inv.forming.setpoints();
        if !(v_star > 0.0) {
            return Err(ctx("voltage setpoint must be positive"));
        }
        if let Some(w0) = inv.forming.omega0() {
            if (w0 - s.omega0).abs() > 1e-9 * s.omega0 {
                return Err(ctx("forming ω0 differs from the simulation ω0"));
            }
        }
        match &inv.regulator {
            Regulator::Implicit { kappa, tau_mu, tau_v } => {
                if !(*kappa > 0.0 && *tau_mu > 0.0 && *tau_v > 0.0) {
                    return Err(ctx("implicit regulator needs κ, τ_μ, τ_v > 0"));
                }
            }
            Regulator::Explicit { kappa_i, .. } if !(*kappa_i >= 0.0) => {
                return Err(ctx("κ_i must be non-negative"));
            }
            Regulator::AdaptiveVi { cfg, tau_fb } => {
                cfg.validate(inv.i_lim)?;
                if !(*tau_fb > 0.0) {
                    return Err(ctx("adaptive VI feedback filter needs τ > 0"));
                }
            }
            _ => {}
        }
        if norton_mode(setup) {
            let ok = matches!(
                inv.regulator,
                Regulator::Explicit {
                    hard_limiter: false,
                    ..
                }
            ) && inv.neg_seq.is_balanced()
                && inv.forming.m_q() == 0.0;
            if !ok {
                return Err(ctx(
                    "tau_c = 0 requires an explicit regulator without hard limiter, balanced \
                     negative-sequence mode and no reactive droop",
                ));
            }
        }
    }
    match &setup.network {
        NetworkModel::Thevenin(g) => {
            g.validate()?;
            if setup.inverters.len() != 1 {
                return Err(Error::config("a Thevenin network takes exactly one inverter"));
            }
        }
        NetworkModel::Multibus(net) => {
            net.validate()?;
            if net.inverter_buses.len() != setup.inverters.len() {
                return Err(Error::config("inverter/bus count mismatch"));
            }
            if setup.inverters.iter().any(|i| !i.neg_seq.is_balanced()) {
                return Err(Error::config(
                    "multi-bus networks are positive-sequence only; use neg_seq_mode = \"balanced\"",
                ));
            }
            for f in &setup.faults {
                match f.kind {
                    FaultKind::Shunt(ShuntKind::ThreePhase) => {
                        if f.bus.map_or(true, |b| b >= net.n_bus()) {
                            return Err(Error::config("multi-bus fault needs a valid bus"));
                        }
                    }
                    FaultKind::VoltageDip { .. } if net.source.is_some() => {}
                    _ => {
                        return Err(Error::config(
                            "multi-bus networks accept three-phase faults and source dips only",
                        ))
                    }
                }
            }
        }
    }
    let mut sorted: Vec<&FaultEvent> = setup.faults.iter().collect();
    sorted.sort_by(|a, b| a.t_on.total_cmp(&b.t_on));
    for f in &sorted {
        if f.r_f < 0.0 || f.t_clear.is_some_and(|tc| tc <= f.t_on) {
            return Err(Error::config("faults need r_f ≥ 0 and t_clear > t_on"));
        }
    }
    for w in sorted.windows(2) {
        if w[1].t_on < w[0].end() {
            return Err(Error::config("overlapping fault events are not supported"));
        }
    }
    Ok(())
}

fn build_map(setup: &SimSetup, fault: Option<&FaultEvent>) -> Result<NetMap> {
    let map = match &setup.network {
        NetworkModel::Thevenin(g) => {
            let mut grid = *g;
            let mut shunt = None;
            if let Some(f) = fault {
                match f.kind {
                    FaultKind::Shunt(kind) => shunt = Some(ShuntFault { kind, r_f: f.r_f }),
                    FaultKind::VoltageDip { mag, phase_jump } => {
                        grid.v_g = Cx::from_polar(mag, g.v_g.arg() + phase_jump);
                    }
                }
            }
            thevenin_map(&grid, shunt.as_ref())?
        }
        NetworkModel::Multibus(net) => {
            let mut topo = Topology {
                fault: None,
                v_source: None,
            };
            if let Some(f) = fault {
                match f.kind {
                    FaultKind::Shunt(_) => topo.fault = Some((f.bus.unwrap_or(0), f.r_f)),
                    FaultKind::VoltageDip { mag, phase_jump } => {
                        let v = net.source.as_ref().map_or(Cx::new(1.0, 0.0), |s| s.v);
                        topo.v_source = Some(Cx::from_polar(mag, v.arg() + phase_jump));
                    }
                }
            }
            net.map(&topo)?
        }
    };
    if norton_mode(setup) {
        let y: Vec<Option<Cx>> = setup
            .inverters
            .iter()
            .map(|inv| Some(Cx::new(1.0, 0.0) / inv.z_v))
            .collect();
        map.with_norton(&y)
    } else {
        Ok(map)
    }
}

fn active_fault_at(setup: &SimSetup, t: f64) -> Option<usize> {
    let eps = 1e-9;
    setup
        .faults
        .iter()
        .position(|f| t + eps >= f.t_on && f.t_clear.map_or(true, |tc| t + eps < tc))
}

struct Eval {
    out: Vec<InverterOutputs>,
    dy: Vec<f64>,
}

fn limiter(inv: &InverterConfig) -> LimiterConfig {
    LimiterConfig {
        i_lim: inv.i_lim,
        frame: inv.limiter_frame,
    }
}

impl World {
    fn v_ref(&self, k: usize, y: &[f64], mode: OperatingMode, q: f64) -> Cx {
        let inv = &self.setup.inverters[k];
        let s = &y[k * NS..(k + 1) * NS];
        let droop = mode == OperatingMode::VoltageForming || inv.magnitude_droop_in_cf;
        match &inv.forming {
            FormingKind::Dvoc(_) => get_c(s, ix::VV),
            FormingKind::Fixed { v_mag, .. } => Cx::from_polar(*v_mag, s[ix::THETA]),
            f => {
                let (_, q_star, v_star) = f.setpoints();
                let mag = if droop {
                    v_star + f.m_q() * (q_star - q)
                } else {
                    v_star
                };
                Cx::from_polar(mag, s[ix::THETA])
            }
        }
    }

    /// Norton source of inverter `k` (τ_c = 0 only).
    fn norton_emf(&self, k: usize, y: &[f64]) -> Cx {
        let mode = self.disc[k].machine.mode;
        let s = &y[k * NS..(k + 1) * NS];
        let v_ref = self.v_ref(k, y, mode, 0.0);
        match mode {
            OperatingMode::VoltageForming => v_ref,
            OperatingMode::CrossForming => Cx::from_polar(s[ix::VLAM], v_ref.arg()),
        }
    }

    fn evaluate(&self, y: &[f64]) -> Eval {
        let n = self.setup.inverters.len();
        let norton = norton_mode(&self.setup);
        let tau_c = self.setup.sim.tau_c;
        let w0 = self.setup.sim.omega0;

        let (v_all, i_all): (Vec<SequencePhasor>, Vec<SequencePhasor>) = if norton {
            let emf: Vec<Cx> = (0..n).map(|k| self.norton_emf(k, y)).collect();
            let u: Vec<SequencePhasor> = emf
                .iter()
                .zip(&self.setup.inverters)
                .map(|(e, inv)| SequencePhasor::balanced(e / inv.z_v))
                .collect();
            let v = self.map.terminal(&u);
            let i = v
                .iter()
                .zip(emf.iter().zip(&self.setup.inverters))
                .map(|(v, (e, inv))| SequencePhasor::balanced((e - v.pos) / inv.z_v))
                .collect();
            (v, i)
        } else {
            let i: Vec<SequencePhasor> = (0..n)
                .map(|k| {
                    let s = &y[k * NS..(k + 1) * NS];
                    SequencePhasor::new(get_c(s, ix::IP), get_c(s, ix::IN))
                })
                .collect();
            (self.map.terminal(&i), i)
        };

        let mut dy = vec![0.0; y.len()];
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let inv = &self.setup.inverters[k];
            let d = &self.disc[k];
            let mode = d.machine.mode;
            let s = &y[k * NS..(k + 1) * NS];
            let ds = &mut dy[k * NS..(k + 1) * NS];
            let v = v_all[k];
            let i = i_all[k];
            let zv = VirtualImpedance::from(inv.z_v);
            let s_meas = v.pos * i.pos.conj();
            let (p, q) = (s_meas.re, s_meas.im);
            let v_ref = self.v_ref(k, y, mode, q);
            let theta = s[ix::THETA];
            let cf = mode == OperatingMode::CrossForming;

            // positive-sequence reference before limiting
            let mut v_lambda_mag = v_ref.norm();
            let i_pos_unsat = match &inv.regulator {
                Regulator::Explicit { .. } if cf => {
                    v_lambda_mag = s[ix::VLAM];
                    (Cx::from_polar(v_lambda_mag, v_ref.arg()) - v.pos) / zv.z()
                }
                Regulator::Implicit { kappa, .. } => {
                    let mu_f = s[ix::MU].max(MU_FLOOR);
                    v_lambda_mag = kappa * mu_f * v_ref.norm();
                    (v_ref * *kappa - get_c(s, ix::VF) / mu_f) / zv.z()
                }
                Regulator::AdaptiveVi { cfg, .. } => {
                    let zvi = adaptive_virtual_impedance(s[ix::IFB], cfg);
                    (v_ref - zvi.z() * i.pos - v.pos) / zv.z()
                }
                Regulator::CurrentForming if cf => Cx::from_polar(inv.i_lim, theta - d.psi),
                _ => (v_ref - v.pos) / zv.z(),
            };
            let v_for_neg = if inv.tau_neg > 0.0 {
                SequencePhasor::new(v.pos, get_c(s, ix::VN))
            } else {
                v
            };
            let i_neg_unsat = if v.pos.norm() < 1e-9 {
                ZERO
            } else {
                neg_seq_reference(&inv.neg_seq, &v_for_neg, i_pos_unsat).unwrap_or(ZERO)
            };
            let i_unsat = SequencePhasor::new(i_pos_unsat, i_neg_unsat);
            let lim = limiter(inv);
            let (i_ref, mu) = match &inv.regulator {
                Regulator::Explicit {
                    hard_limiter: false,
                    ..
                }
                | Regulator::AdaptiveVi { .. } => (i_unsat, dos(&i_unsat, inv.i_lim)),
                _ => lim.apply(&i_unsat, theta),
            };
            if !matches!(inv.regulator, Regulator::Explicit { .. } | Regulator::Implicit { .. }) {
                v_lambda_mag = mu * v_ref.norm();
            }

            // forming-law power feedback
            let v_virtual = match &inv.forming {
                FormingKind::Dvoc(_) | FormingKind::Fixed { .. } => v_ref,
                f => {
                    let (_, _, v_star) = f.setpoints();
                    if cf && !inv.magnitude_droop_in_cf {
                        Cx::from_polar(v_star, theta)
                    } else {
                        v_ref
                    }
                }
            };
            let p_virtual = (v_virtual * i.pos.conj()).re;
            let p_fb = if cf && inv.regulator.is_cross_forming() {
                p_virtual
            } else {
                p
            };

            let dtheta;
            match &inv.forming {
                FormingKind::Droop(prm) => {
                    dtheta = w0 * prm.m_p * (d.p_star - p_fb);
                }
                FormingKind::Vsm(prm) => {
                    let w = s[ix::W];
                    dtheta = w0 * (w - 1.0);
                    ds[ix::W] = (-prm.d * (w - 1.0) + d.p_star - p_fb) / prm.t_j;
                }
                FormingKind::DualPort { params, v_dc } => {
                    dtheta = w0
                        * (params.droop.m_p * (d.p_star - p_fb)
                            + params.m_dc * (v_dc - params.v_dc_star));
                }
                FormingKind::Dvoc(prm) => {
                    let lambda = match &inv.regulator {
                        Regulator::Explicit { .. } if cf => {
                            (s[ix::VLAM] / v_ref.norm()).max(MU_FLOOR)
                        }
                        Regulator::Implicit { kappa, .. } if cf => {
                            (kappa * s[ix::MU]).max(MU_FLOOR)
                        }
                        _ => 1.0,
                    };
                    let mut prm = *prm;
                    prm.p_star = d.p_star;
                    let dv = dvoc_rate(v_ref, i.pos, lambda, &prm) - J * w0 * v_ref;
                    set_c(ds, ix::VV, dv);
                    dtheta = (dv / v_ref).im;
                }
                FormingKind::Fixed { .. } => dtheta = 0.0,
            }
            ds[ix::THETA] = dtheta;

            match &inv.regulator {
                Regulator::Explicit { kappa_i, .. } if cf => {
                    let reg = ExplicitRegState {
                        v_lambda_mag: s[ix::VLAM],
                        kappa_i: *kappa_i,
                        v_star_init: inv.forming.setpoints().2,
                    };
                    ds[ix::VLAM] = reg.rate(s[ix::VLAM], &i_unsat, inv.i_lim);
                }
                Regulator::Implicit { tau_mu, tau_v, .. } => {
                    // μ_f is held at 1 outside saturation
                    if cf {
                        ds[ix::MU] = (dos(&i_unsat, inv.i_lim) - s[ix::MU]) / tau_mu;
                    }
                    set_c(ds, ix::VF, (v.pos - get_c(s, ix::VF)) / *tau_v);
                }
                Regulator::AdaptiveVi { tau_fb, .. } => {
                    ds[ix::IFB] = (phase_magnitudes(&i).max() - s[ix::IFB]) / tau_fb;
                }
                _ => {}
            }
            if inv.tau_neg > 0.0 {
                set_c(ds, ix::VN, (v.neg - get_c(s, ix::VN)) / inv.tau_neg);
            }
            if !norton {
                set_c(ds, ix::IP, (i_ref.pos - i.pos) / tau_c);
                set_c(ds, ix::IN, (i_ref.neg - i.neg) / tau_c);
            }

            let shadow = match &inv.regulator {
                Regulator::Implicit { kappa, .. } => (v_ref * *kappa - get_c(s, ix::VF)) / zv.z(),
                _ => (v_ref - v.pos) / zv.z(),
            };
            let shadow_neg = if v.pos.norm() < 1e-9 {
                ZERO
            } else {
                neg_seq_reference(&inv.neg_seq, &v_for_neg, shadow).unwrap_or(ZERO)
            };
            let shadow_peak = phase_magnitudes(&SequencePhasor::new(shadow, shadow_neg)).max();

            out.push(InverterOutputs {
                v,
                i,
                v_ref,
                i_unsat,
                i_ref,
                p,
                q,
                p_virtual,
                theta_rel: theta,
                omega: w0 + dtheta,
                mu,
                v_lambda_mag,
                mode,
                shadow_peak,
            });
        }
        Eval { out, dy }
    }

    pub fn outputs(&self) -> Vec<InverterOutputs> {
        self.evaluate(&self.y).out
    }

    pub fn state(&self) -> &[f64] {
        &self.y
    }

    pub fn rows(&self) -> Vec<RecordRow> {
        self.outputs()
            .iter()
            .enumerate()
            .map(|(k, o)| RecordRow {
                t: self.t,
                inverter: k,
                v_pos: o.v.pos,
                v_neg: o.v.neg,
                i_pos: o.i.pos,
                i_neg: o.i.neg,
                i_maxphase: phase_magnitudes(&o.i).max(),
                p: o.p,
                q: o.q,
                p_virtual: o.p_virtual,
                theta_rel: o.theta_rel,
                omega: o.omega,
                mu: o.mu,
                v_lambda_mag: o.v_lambda_mag,
                mode: o.mode.code(),
            })
            .collect()
    }

    fn check_divergence(&self) -> Result<()> {
        let n = self.setup.inverters.len();
        for k in 0..n {
            let s = &self.y[k * NS..(k + 1) * NS];
            for (j, x) in s.iter().enumerate() {
                let bound = if j == ix::THETA { f64::INFINITY } else { 1e3 };
                if !x.is_finite() || x.abs() > bound {
                    return Err(Error::Divergence {
                        t: self.t,
                        context: format!(
                            "inverter {} ({}) state {j} = {x}",
                            k, self.setup.inverters[k].name
                        ),
                    });
                }
            }
        }
        for o in self.outputs() {
            let mags = [o.v.pos.norm(), o.v.neg.norm(), o.i.pos.norm(), o.i.neg.norm(), o.p, o.q];
            if mags.iter().any(|x| !x.is_finite() || x.abs() > 1e3) {
                return Err(Error::Divergence {
                    t: self.t,
                    context: "network quantities exceed 1e3 pu".into(),
                });
            }
        }
        Ok(())
    }

    fn refresh_topology(&mut self) -> Result<()> {
        let f = active_fault_at(&self.setup, self.t);
        if f != self.active_fault {
            self.active_fault = f;
            self.map = build_map(&self.setup, f.map(|k| &self.setup.faults[k]))?;
        }
        Ok(())
    }

    fn apply_setpoints(&mut self, t_prev: f64) {
        let eps = 1e-9;
        for ev in &self.setup.setpoints {
            if ev.t > t_prev + eps && ev.t <= self.t + eps {
                for (k, d) in self.disc.iter_mut().enumerate() {
                    if ev.inverter.map_or(true, |j| j == k) {
                        d.p_star = ev.p_star;
                    }
                }
            }
        }
    }

    fn update_modes(&mut self) {
        let dt = self.setup.sim.dt;
        let outs = self.outputs();
        for (k, o) in outs.iter().enumerate() {
            let inv = &self.setup.inverters[k];
            if matches!(inv.regulator, Regulator::AdaptiveVi { .. }) {
                continue;
            }
            let peak = match o.mode {
                OperatingMode::VoltageForming => phase_magnitudes(&o.i_unsat).max(),
                OperatingMode::CrossForming => o.shadow_peak,
            };
            let cleared = o.mode == OperatingMode::CrossForming
                && inv.regulator.is_cross_forming()
                && (o.v.pos * Cx::from_polar(1.0, -o.v_ref.arg())).re >= o.v_lambda_mag;
            let before = self.disc[k].machine;
            let after = mode_switch(
                &before,
                peak,
                inv.i_lim,
                o.v.pos.norm(),
                cleared,
                self.t,
                dt,
                &inv.mode_switch,
            );
            self.disc[k].machine = after;
            if before.mode != after.mode {
                let s = &mut self.y[k * NS..(k + 1) * NS];
                let kind = if after.mode == OperatingMode::CrossForming {
                    let (_, _, v_star) = inv.forming.setpoints();
                    s[ix::VLAM] = if inv.mode_switch.reseed {
                        v_star
                    } else {
                        o.v_ref.norm()
                    };
                    if matches!(inv.regulator, Regulator::CurrentForming) {
                        self.disc[k].psi = s[ix::THETA] - o.i.pos.arg();
                    }
                    DiagnosticKind::EnterCrossForming
                } else {
                    s[ix::MU] = 1.0;
                    s[ix::VLAM] = inv.forming.setpoints().2;
                    DiagnosticKind::ExitCrossForming
                };
                self.diagnostics.push(Diagnostic {
                    t: self.t,
                    inverter: k,
                    kind,
                });
            }
        }
    }

    fn floor_checks(&mut self) {
        for (k, inv) in self.setup.inverters.iter().enumerate() {
            let s = &mut self.y[k * NS..(k + 1) * NS];
            let kind = match inv.regulator {
                Regulator::Implicit { .. } if s[ix::MU] < MU_FLOOR => {
                    s[ix::MU] = MU_FLOOR;
                    Some(DiagnosticKind::MuFloor)
                }
                Regulator::Explicit { .. }
                    if self.disc[k].machine.mode == OperatingMode::CrossForming =>
                {
                    let ceiling = 2.0 * inv.forming.setpoints().2;
                    s[ix::VLAM] = s[ix::VLAM].clamp(0.0, ceiling);
                    (s[ix::VLAM] <= 0.0).then_some(DiagnosticKind::LambdaFloor)
                }
                _ => None,
            };
            if let Some(kind) = kind {
                let first = !self
                    .diagnostics
                    .iter()
                    .any(|d| d.inverter == k && d.kind == kind);
                if first {
                    self.diagnostics.push(Diagnostic {
                        t: self.t,
                        inverter: k,
                        kind,
                    });
                }
            }
        }
    }

    /// Advances one fixed step.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.setup.sim.dt;
        let y = rk4(self.t, &self.y, dt, |_, y| self.evaluate(y).dy);
        self.y = y;
        let t_prev = self.t;
        self.steps += 1;
        self.t = self.steps as f64 * dt;
        self.floor_checks();
        self.check_divergence()?;
        self.apply_setpoints(t_prev);
        self.refresh_topology()?;
        self.update_modes();
        Ok(())
    }

    /// Runs to `t_end`, handing every decimated record batch to `sink`.
    pub fn run<F: FnMut(&[RecordRow])>(&mut self, mut sink: F) -> Result<()> {
        let n_steps = (self.setup.sim.t_end / self.setup.sim.dt).round() as u64;
        let dec = self.setup.sim.decimation as u64;
        if self.steps % dec == 0 {
            sink(&self.rows());
        }
        while self.steps < n_steps {
            self.step()?;
            if self.steps % dec == 0 {
                sink(&self.rows());
            }
        }
        Ok(())
    }

    pub fn run_collect(&mut self) -> Result<Vec<RecordRow>> {
        let mut rows = Vec::new();
        self.run(|r| rows.extend_from_slice(r))?;
        Ok(rows)
    }

    pub fn mode(&self, k: usize) -> OperatingMode {
        self.disc[k].machine.mode
    }

    pub fn p_star(&self, k: usize) -> f64 {
        self.disc[k].p_star
    }
}

/// Unknown layout of the pre-fault equilibrium solve.
struct EqLayout {
    islanded: bool,
    free: Vec<usize>,
}

fn steady_emf(inv: &InverterConfig, v_ref: Cx) -> Cx {
    match inv.regulator {
        Regulator::Implicit { kappa, .. } => v_ref * kappa,
        _ => v_ref,
    }
}

struct SteadyPoint {
    v: Vec<Cx>,
    i: Vec<Cx>,
}

fn steady_network(setup: &SimSetup, base: &NetMap, v_refs: &[Cx]) -> Result<SteadyPoint> {
    let solve = |i_fb: &[f64]| -> Result<SteadyPoint> {
        let z: Vec<Cx> = setup
            .inverters
            .iter()
            .zip(i_fb)
            .map(|(inv, &m)| match &inv.regulator {
                Regulator::AdaptiveVi { cfg, .. } => {
                    inv.z_v + adaptive_virtual_impedance(m, cfg).z()
                }
                _ => inv.z_v,
            })
            .collect();
        let y: Vec<Option<Cx>> = z.iter().map(|z| Some(Cx::new(1.0, 0.0) / z)).collect();
        let folded = base.with_norton(&y)?;
        let emf: Vec<Cx> = setup
            .inverters
            .iter()
            .zip(v_refs)
            .map(|(inv, v)| steady_emf(inv, *v))
            .collect();
        let u: Vec<SequencePhasor> = emf
            .iter()
            .zip(&z)
            .map(|(e, z)| SequencePhasor::balanced(e / z))
            .collect();
        let v: Vec<Cx> = folded.terminal(&u).iter().map(|s| s.pos).collect();
        let i = emf.iter().zip(&v).zip(&z).map(|((e, v), z)| (e - v) / z).collect();
        Ok(SteadyPoint { v, i })
    };
    let n = setup.inverters.len();
    let adaptive: Vec<usize> = (0..n)
        .filter(|&k| matches!(setup.inverters[k].regulator, Regulator::AdaptiveVi { .. }))
        .collect();
    let mut i_fb = vec![0.0; n];
    if adaptive.is_empty() {
        return solve(&i_fb);
    }
    // |i_k| decreases as its own feedback magnitude grows: bisect each
    // fixed point, sweeping until the set stops moving
    for _ in 0..100 {
        let mut moved = 0.0f64;
        for &k in &adaptive {
            let g = |m: f64, fb: &mut Vec<f64>| -> Result<f64> {
                fb[k] = m;
                Ok(solve(fb)?.i[k].norm() - m)
            };
            let mut fb = i_fb.clone();
            let (mut lo, mut hi) = (0.0, 1.0);
            while g(hi, &mut fb)? > 0.0 {
                hi *= 2.0;
                if hi > 1e6 {
                    return Err(Error::NoOperatingPoint("adaptive VI steady state unbounded".into()));
                }
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid, &mut fb)? > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-15 {
                    break;
                }
            }
            let m = 0.5 * (lo + hi);
            moved = moved.max((m - i_fb[k]).abs());
            i_fb[k] = m;
        }
        if moved < 1e-14 || adaptive.len() == 1 {
            break;
        }
    }
    solve(&i_fb)
}

fn eq_layout(setup: &SimSetup) -> EqLayout {
    let islanded = match &setup.network {
        NetworkModel::Thevenin(_) => false,
        NetworkModel::Multibus(net) => net.source.is_none(),
    };
    let free = setup
        .inverters
        .iter()
        .enumerate()
        .filter(|(_, inv)| !matches!(inv.forming, FormingKind::Fixed { .. }))
        .map(|(k, _)| k)
        .collect();
    EqLayout { islanded, free }
}

/// Per-inverter `(θ, |v̂|)` and common per-unit frequency deviation.
fn unpack(setup: &SimSetup, lay: &EqLayout, x: &[f64]) -> (Vec<(f64, f64)>, f64) {
    let mut ang: Vec<(f64, f64)> = setup
        .inverters
        .iter()
        .map(|inv| match inv.forming {
            FormingKind::Fixed { v_mag, theta } => (theta, v_mag),
            ref f => (0.0, f.setpoints().2),
        })
        .collect();
    let mut dw = 0.0;
    for (j, &k) in lay.free.iter().enumerate() {
        let th = x[2 * j];
        if lay.islanded && j == 0 {
            dw = th;
            ang[k].0 = 0.0;
        } else {
            ang[k].0 = th;
        }
        ang[k].1 = x[2 * j + 1];
    }
    (ang, dw)
}

fn eq_residual(setup: &SimSetup, base: &NetMap, lay: &EqLayout, x: &[f64]) -> Result<Vec<f64>> {
    let (ang, dw) = unpack(setup, lay, x);
    let v_refs: Vec<Cx> = ang.iter().map(|&(th, m)| Cx::from_polar(m, th)).collect();
    let sp = steady_network(setup, base, &v_refs)?;
    let w0 = setup.sim.omega0;
    let mut r = Vec::with_capacity(x.len());
    for &k in &lay.free {
        let inv = &setup.inverters[k];
        let s = sp.v[k] * sp.i[k].conj();
        let (p, q) = (s.re, s.im);
        let v_mag = ang[k].1;
        let mag_res = |q_star: f64, v_star: f64, m_q: f64| v_mag - (v_star + m_q * (q_star - q));
        match &inv.forming {
            FormingKind::Droop(prm) => {
                let f = if prm.m_p > 0.0 {
                    p - prm.p_star + dw / prm.m_p
                } else {
                    p - prm.p_star
                };
                r.push(f);
                r.push(mag_res(prm.q_star, prm.v_star, prm.m_q));
            }
            FormingKind::Vsm(prm) => {
                r.push(-prm.d * dw + prm.p_star - p);
                r.push(mag_res(prm.q_star, prm.v_star, prm.m_q));
            }
            FormingKind::DualPort { params, v_dc } => {
                let d = &params.droop;
                let f = d.m_p * (d.p_star - p) + params.m_dc * (v_dc - params.v_dc_star) - dw;
                r.push(if d.m_p > 0.0 { f / d.m_p } else { f });
                r.push(mag_res(d.q_star, d.v_star, d.m_q));
            }
            FormingKind::Dvoc(prm) => {
                let v = v_refs[k];
                let dv = dvoc_rate(v, sp.i[k], 1.0, prm) - J * w0 * (1.0 + dw) * v;
                // normalise the rotation so residuals are O(power)
                let g = dv / (v * prm.eta.max(1e-12));
                r.push(g.im);
                r.push(g.re);
            }
            FormingKind::Fixed { .. } => unreachable!("fixed references carry no unknowns"),
        }
    }
    Ok(r)
}

fn newton(setup: &SimSetup, base: &NetMap, lay: &EqLayout) -> Result<Vec<f64>> {
    let mut x: Vec<f64> = Vec::with_capacity(2 * lay.free.len());
    for &k in &lay.free {
        x.push(0.0);
        x.push(setup.inverters[k].forming.setpoints().2);
    }
    if x.is_empty() {
        return Ok(x);
    }
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut r = eq_residual(setup, base, lay, &x)?;
    let n = x.len();
    for _ in 0..50 {
        if norm(&r) < 1e-10 {
            return Ok(x);
        }
        let h = 1e-7;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for c in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let rp = eq_residual(setup, base, lay, &xp)?;
            let rm = eq_residual(setup, base, lay, &xm)?;
            for row in 0..n {
                jac[(row, c)] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        let step = jac
            .lu()
            .solve(&DVector::from_column_slice(&r))
            .ok_or_else(|| {
                Error::NoOperatingPoint("singular Jacobian in the initial equilibrium solve".into())
            })?;
        let mut alpha = 1.0;
        loop {
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a - alpha * b).collect();
            let rn = eq_residual(setup, base, lay, &xn)?;
            if rn.iter().all(|v| v.is_finite()) && (norm(&rn) < norm(&r) || alpha < 1e-3) {
                x = xn;
                r = rn;
                break;
            }
            alpha *= 0.5;
        }
    }
    if norm(&r) < 1e-10 {
        Ok(x)
    } else {
        Err(Error::NoOperatingPoint(format!(
            "pre-fault equilibrium not found after 50 Newton iterations (residual {:.3e}); \
             check that the power setpoints are transferable",
            norm(&r)
        )))
    }
}

/// Builds the world at its pre-fault equilibrium.
pub fn initialize_equilibrium(setup: SimSetup) -> Result<World> {
    validate_setup(&setup)?;
    let base = {
        let mut s = setup.clone();
        s.sim.tau_c = 1.0;
        build_map(&s, None)?
    };
    let lay = eq_layout(&setup);
    let x = newton(&setup, &base, &lay)?;
    let (ang, dw) = unpack(&setup, &lay, &x);
    let v_refs: Vec<Cx> = ang.iter().map(|&(th, m)| Cx::from_polar(m, th)).collect();
    let sp = steady_network(&setup, &base, &v_refs)?;
    for (k, &(th, m)) in ang.iter().enumerate() {
        if th.abs() > std::f64::consts::FRAC_PI_2 + 1.0 || !(m > 0.0) || !th.is_finite() {
            return Err(Error::NoOperatingPoint(format!(
                "inverter {k}: equilibrium is not physical (θ = {th}, |v̂| = {m})"
            )));
        }
    }

    let n = setup.inverters.len();
    let mut y = vec![0.0; n * NS];
    let mut disc = Vec::with_capacity(n);
    for (k, inv) in setup.inverters.iter().enumerate() {
        let s = &mut y[k * NS..(k + 1) * NS];
        let (th, m) = ang[k];
        s[ix::THETA] = th;
        s[ix::W] = 1.0 + dw;
        set_c(s, ix::VV, v_refs[k]);
        s[ix::VLAM] = inv.forming.setpoints().2;
        s[ix::MU] = 1.0;
        set_c(s, ix::VF, sp.v[k]);
        set_c(s, ix::IP, sp.i[k]);
        s[ix::IFB] = sp.i[k].norm();
        let _ = m;
        disc.push(Discrete {
            machine: ModeMachine::default(),
            p_star: inv.forming.setpoints().0,
            psi: 0.0,
        });
    }
    let mut world = World {
        map: build_map(&setup, None)?,
        setup,
        t: 0.0,
        steps: 0,
        y,
        disc,
        active_fault: None,
        diagnostics: Vec::new(),
    };
    world.refresh_topology()?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasor::PHASE_OFFSETS;
    use std::f64::consts::PI;

    const W0: f64 = 100.0 * PI;

    pub fn vsm(p_star: f64) -> FormingKind {
        FormingKind::Vsm(VsmParams {
            t_j: 5.0,
            d: 25.0,
            m_q: 0.2,
            p_star,
            q_star: 0.0,
            v_star: 1.0,
            omega0: W0,
        })
    }

    fn inverter(regulator: Regulator, forming: FormingKind) -> InverterConfig {
        InverterConfig {
            name: "inv".into(),
            bus: None,
            rating: 1.0,
            i_lim: 1.1,
            z_v: Cx::new(0.0, 0.2),
            forming,
            regulator,
            limiter_frame: LimiterFrame::Stationary,
            neg_seq: NegSeqMode::Balanced,
            tau_neg: 0.0,
            mode_switch: ModeSwitchConfig::default(),
            magnitude_droop_in_cf: false,
        }
    }

    fn grid() -> TheveninGrid {
        TheveninGrid {
            z_g1: Cx::new(0.01, 0.1),
            z_g2: Cx::new(0.003, 0.03),
            z0_g2: Cx::new(0.003, 0.03),
            v_g: Cx::new(1.0, 0.0),
        }
    }

    fn setup(inv: InverterConfig, t_end: f64) -> SimSetup {
        SimSetup {
            sim: SimConfig {
                t_end,
                ..SimConfig::default()
            },
            network: NetworkModel::Thevenin(grid()),
            inverters: vec![inv],
            faults: vec![],
            setpoints: vec![],
        }
    }

    #[test]
    fn equilibrium_holds() {
        for reg in [
            Regulator::Implicit {
                kappa: 1.0,
                tau_mu: 0.01,
                tau_v: 0.01,
            },
            Regulator::Explicit {
                kappa_i: 50.0,
                hard_limiter: true,
            },
        ] {
            let mut w = initialize_equilibrium(setup(inverter(reg, vsm(0.2)), 1.0)).unwrap();
            let y0 = w.state().to_vec();
            let o = w.outputs()[0];
            assert!((o.p - 0.2).abs() < 1e-9);
            for _ in 0..10_000 {
                w.step().unwrap();
            }
            let dev = w
                .state()
                .iter()
                .zip(&y0)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(dev < 1e-8, "deviation {dev}");
        }
    }

    #[test]
    fn trivial_equilibrium() {
        let mut s = setup(
            inverter(Regulator::VirtualAdmittance, vsm(0.0)),
            0.0,
        );
        if let FormingKind::Vsm(v) = &mut s.inverters[0].forming {
            v.m_q = 0.0;
        }
        let w = initialize_equilibrium(s).unwrap();
        let o = w.outputs()[0];
        assert!(o.i.pos.norm() < 1e-9 && o.theta_rel.abs() < 1e-9);
    }

    #[test]
    fn infeasible_setpoint_is_a_clean_error() {
        let s = setup(inverter(Regulator::VirtualAdmittance, vsm(5.0)), 1.0);
        match initialize_equilibrium(s) {
            Err(Error::NoOperatingPoint(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected failure"),
        }
    }

    #[test]
    fn instantaneous_power_matches_decomposition_convention() {
        // sanity check of the 2/3 scaling used in the per-unit power base
        let v = SequencePhasor::new(Cx::new(0.9, 0.1), Cx::new(0.05, 0.1));
        let i = SequencePhasor::new(Cx::new(0.4, -0.6), Cx::new(0.1, 0.0));
        let d = crate::phasor::power_decompose(&v, &i);
        let t = 0.0013;
        let mut p = 0.0;
        for lam in PHASE_OFFSETS {
            let x = |s: &SequencePhasor| {
                (s.pos * Cx::from_polar(1.0, W0 * t + lam)).re
                    + (s.neg * Cx::from_polar(1.0, -W0 * t + lam)).re
            };
            p += x(&v) * x(&i);
        }
        assert!((2.0 / 3.0 * p - d.p_at(W0 * t)).abs() < 1e-12);
    }
}
