//! Explicit and implicit cross-forming regulators, the virtual admittance
//! they reduce to, the saturated operating-point geometry and the mode
//! state machine.

use serde::{Deserialize, Serialize};

use crate::phasor::{phase_magnitudes, Cx, SequencePhasor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualImpedance {
    pub r_v: f64,
    pub x_v: f64,
}

impl VirtualImpedance {
    pub fn new(r_v: f64, x_v: f64) -> Self {
        Self { r_v, x_v }
    }

    pub fn z(&self) -> Cx {
        Cx::new(self.r_v, self.x_v)
    }
}

impl From<Cx> for VirtualImpedance {
    fn from(z: Cx) -> Self {
        Self::new(z.re, z.im)
    }
}

/// Degree of saturation `μ = min(1, I_lim / max phase magnitude)`.
pub fn dos(i_ref: &SequencePhasor, i_lim: f64) -> f64 {
    let peak = phase_magnitudes(i_ref).max();
    if peak <= i_lim {
        1.0
    } else {
        i_lim / peak
    }
}

/// `î⁺ = (v̂ − v⁺)/z_v`.
pub fn virtual_admittance(v_ref: Cx, v_pos: Cx, z_v: &VirtualImpedance) -> Cx {
    (v_ref - v_pos) / z_v.z()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplicitRegState {
    pub v_lambda_mag: f64,
    pub kappa_i: f64,
    pub v_star_init: f64,
}

impl ExplicitRegState {
    pub fn new(kappa_i: f64, v_star: f64) -> Self {
        Self {
            v_lambda_mag: v_star,
            kappa_i,
            v_star_init: v_star,
        }
    }

    /// Integrator upper clamp.
    pub fn ceiling(&self) -> f64 {
        2.0 * self.v_star_init
    }

    /// `d|v̂_λ|/dt`, zeroed when pushing against either clamp.
    pub fn rate(&self, v_lambda_mag: f64, i_ref: &SequencePhasor, i_lim: f64) -> f64 {
        let r = self.kappa_i * (i_lim - phase_magnitudes(i_ref).max());
        if (v_lambda_mag <= 0.0 && r < 0.0) || (v_lambda_mag >= self.ceiling() && r > 0.0) {
            0.0
        } else {
            r
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(0.0, self.ceiling())
    }
}

/// Advances the limit-tracking integrator with the previous reference and
/// returns the new positive-sequence reference `(|v̂_λ|∠θ̂ − v⁺)/z_v`.
pub fn explicit_step(
    state: &ExplicitRegState,
    v_ref_angle: f64,
    v_pos: Cx,
    i_ref_prev: &SequencePhasor,
    i_lim: f64,
    z_v: &VirtualImpedance,
    dt: f64,
) -> (ExplicitRegState, Cx) {
    let mut next = *state;
    let r = state.rate(state.v_lambda_mag, i_ref_prev, i_lim);
    next.v_lambda_mag = state.clamp(state.v_lambda_mag + r * dt);
    let i = (Cx::from_polar(next.v_lambda_mag, v_ref_angle) - v_pos) / z_v.z();
    (next, i)
}

pub const MU_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitRegState {
    pub mu_filtered: f64,
    pub v_fb_filtered: Cx,
    pub kappa: f64,
    pub tau_mu: f64,
    pub tau_v: f64,
    /// Number of steps on which the DoS floor was applied.
    pub floor_events: u64,
}

impl ImplicitRegState {
    pub fn new(kappa: f64, tau_mu: f64, tau_v: f64, v_init: Cx) -> Self {
        Self {
            mu_filtered: 1.0,
            v_fb_filtered: v_init,
            kappa,
            tau_mu,
            tau_v,
            floor_events: 0,
        }
    }

    /// Unsaturated reference `(κ·v̂ − v_f/μ_f)/z_v`.
    pub fn reference(&self, v_ref: Cx, z_v: &VirtualImpedance) -> Cx {
        (v_ref * self.kappa - self.v_fb_filtered / self.mu_filtered.max(MU_FLOOR)) / z_v.z()
    }

    /// Internal voltage magnitude `κ·μ·|v̂|`.
    pub fn internal_voltage(&self, v_ref_mag: f64) -> f64 {
        self.kappa * self.mu_filtered * v_ref_mag
    }
}

fn lag_factor(dt: f64, tau: f64) -> f64 {
    if tau > 0.0 {
        1.0 - (-dt / tau).exp()
    } else {
        1.0
    }
}

/// Advances both feedback filters exactly over `dt` (inputs held) and
/// returns the new unsaturated reference. The saturated output is
/// `dos(î)·î`.
pub fn implicit_step(
    state: &ImplicitRegState,
    v_ref: Cx,
    v_pos: Cx,
    i_ref_prev: &SequencePhasor,
    i_lim: f64,
    z_v: &VirtualImpedance,
    dt: f64,
) -> (ImplicitRegState, Cx) {
    let mu_raw = dos(i_ref_prev, i_lim);
    let mut next = *state;
    next.mu_filtered += (mu_raw - state.mu_filtered) * lag_factor(dt, state.tau_mu);
    next.v_fb_filtered += (v_pos - state.v_fb_filtered) * lag_factor(dt, state.tau_v);
    if next.mu_filtered < MU_FLOOR {
        next.mu_filtered = MU_FLOOR;
        next.floor_events += 1;
    }
    let i = next.reference(v_ref, z_v);
    (next, i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoints {
    /// Stable intersection (larger internal-voltage magnitude).
    pub s: Cx,
    /// Second intersection; `None` when its magnitude would be negative.
    pub u: Option<Cx>,
}

/// Intersections of the ray `r·e^{jψ}`, `r ≥ 0`, with the circle of radius
/// `I_lim·|z_total|` centred at `v_g`.
pub fn operating_point_geometry(
    v_ref_angle: f64,
    v_g: Cx,
    z_total: Cx,
    i_lim: f64,
) -> Option<OperatingPoints> {
    let radius = i_lim * z_total.norm();
    let dir = Cx::from_polar(1.0, v_ref_angle);
    let b = (v_g * dir.conj()).re;
    let c = v_g.norm_sqr() - radius * radius;
    let disc = b * b - c;
    let tol = 1e-12 * (b * b + radius * radius).max(1.0);
    if disc < -tol {
        return None;
    }
    let root = disc.max(0.0).sqrt();
    let (hi, lo) = (b + root, b - root);
    if hi < 0.0 {
        return None;
    }
    Some(OperatingPoints {
        s: dir * hi,
        u: (lo >= 0.0).then(|| dir * lo),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    Stable,
    Unstable,
}

/// Stable iff the projection of `v_g` on the ray is strictly below `|point|`.
pub fn classify_stability(point: Cx, v_g: Cx, v_ref_angle: f64) -> Stability {
    let proj = (v_g * Cx::from_polar(1.0, -v_ref_angle)).re;
    if proj < point.norm() {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatingMode {
    VoltageForming,
    CrossForming,
}

impl OperatingMode {
    pub fn code(&self) -> u8 {
        match self {
            OperatingMode::VoltageForming => 0,
            OperatingMode::CrossForming => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSwitchConfig {
    pub t_enter: f64,
    pub v_recover: f64,
    pub t_exit: f64,
    pub t_lock: f64,
    /// Re-seed the explicit integrator to `v*` on every entry.
    pub reseed: bool,
}

impl Default for ModeSwitchConfig {
    fn default() -> Self {
        Self {
            t_enter: 1e-3,
            v_recover: 0.9,
            t_exit: 10e-3,
            t_lock: 100e-3,
            reseed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeMachine {
    pub mode: OperatingMode,
    pub saturated_for: f64,
    pub recovered_for: f64,
    pub entered_at: Option<f64>,
    pub exited_at: Option<f64>,
}

impl Default for ModeMachine {
    fn default() -> Self {
        Self {
            mode: OperatingMode::VoltageForming,
            saturated_for: 0.0,
            recovered_for: 0.0,
            entered_at: None,
            exited_at: None,
        }
    }
}

/// Timer slack so that accumulated step sizes hit thresholds exactly.
const TIMER_EPS: f64 = 1e-9;

/// Advances the mode machine by one step of length `dt` ending at `t`.
///
/// `i_ref_peak` is the largest phase magnitude of the voltage-forming
/// (unsaturated) reference; in cross-forming mode it is the shadow reference
/// the inverter would follow after leaving. `cleared` flags a terminal
/// voltage whose projection on `∠v̂` has reached `|v̂_λ|`: the saturated
/// point has lost its negative feedback, which only happens once the grid
/// voltage comes back, so the machine exits at once.
#[allow(clippy::too_many_arguments)]
pub fn mode_switch(
    machine: &ModeMachine,
    i_ref_peak: f64,
    i_lim: f64,
    v_pos_mag: f64,
    cleared: bool,
    t: f64,
    dt: f64,
    cfg: &ModeSwitchConfig,
) -> ModeMachine {
    let mut m = *machine;
    let over = i_ref_peak > i_lim;
    match m.mode {
        OperatingMode::VoltageForming => {
            m.saturated_for = if over { m.saturated_for + dt } else { 0.0 };
            let locked = m.exited_at.is_some_and(|te| t - te < cfg.t_lock - TIMER_EPS);
            if !locked && m.saturated_for + TIMER_EPS >= cfg.t_enter {
                m.mode = OperatingMode::CrossForming;
                m.entered_at = Some(t);
                m.recovered_for = 0.0;
            }
        }
        OperatingMode::CrossForming => {
            let ok = v_pos_mag > cfg.v_recover && !over;
            m.recovered_for = if ok { m.recovered_for + dt } else { 0.0 };
            if cleared || m.recovered_for + TIMER_EPS >= cfg.t_exit {
                m.mode = OperatingMode::VoltageForming;
                m.exited_at = Some(t);
                m.saturated_for = 0.0;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zv() -> VirtualImpedance {
        VirtualImpedance::new(0.0, 0.2)
    }

    #[test]
    fn dos_examples() {
        let i = SequencePhasor::balanced(Cx::new(2.2, 0.0));
        assert!((dos(&i, 1.1) - 0.5).abs() < 1e-15);
        assert_eq!(dos(&SequencePhasor::balanced(Cx::new(0.5, 0.0)), 1.1), 1.0);
        let u = SequencePhasor::new(Cx::new(1.0, 0.0), Cx::new(0.5, 0.0));
        assert!((dos(&u, 1.1) - 1.1 / 1.5).abs() < 1e-12);
        assert_eq!(dos(&SequencePhasor::ZERO, 1.1), 1.0);
    }

    #[test]
    fn admittance_examples() {
        let v = Cx::new(0.8, 0.0);
        assert_eq!(virtual_admittance(v, v, &zv()), Cx::new(0.0, 0.0));
        let i = virtual_admittance(Cx::new(1.0, 0.0), v, &zv());
        assert!((i - Cx::new(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn explicit_holds_at_limit() {
        let s = ExplicitRegState {
            v_lambda_mag: 0.83,
            kappa_i: 50.0,
            v_star_init: 1.0,
        };
        let at_limit = SequencePhasor::balanced(Cx::new(0.0, -1.1));
        let (n, _) = explicit_step(&s, 0.0, Cx::new(0.5, 0.0), &at_limit, 1.1, &zv(), 1e-4);
        assert_eq!(n.v_lambda_mag, 0.83);
    }

    #[test]
    fn explicit_collinear_settles_to_stable_point() {
        // lumped circuit: inverter behind z_v, grid 0.5∠0 behind j0.1, instantaneous tracking
        let zg = Cx::new(0.0, 0.1);
        let vg = Cx::new(0.5, 0.0);
        let mut s = ExplicitRegState::new(50.0, 1.0);
        let mut i_prev = SequencePhasor::ZERO;
        for _ in 0..20_000 {
            let v_lambda = Cx::from_polar(s.v_lambda_mag, 0.0);
            let i = (v_lambda - vg) / (zv().z() + zg);
            let v = vg + zg * i;
            let (n, iref) = explicit_step(&s, 0.0, v, &i_prev, 1.1, &zv(), 1e-4);
            s = n;
            i_prev = SequencePhasor::balanced(iref);
        }
        assert!((s.v_lambda_mag - 0.83).abs() < 1e-9, "{}", s.v_lambda_mag);
    }

    #[test]
    fn implicit_identity_with_admittance() {
        let v = Cx::new(0.9, 0.1);
        let st = ImplicitRegState::new(1.0, 0.01, 0.01, v);
        let unsat = SequencePhasor::balanced(Cx::new(0.3, 0.0));
        let (n, i) = implicit_step(&st, Cx::new(1.0, 0.05), v, &unsat, 1.1, &zv(), 1e-4);
        assert_eq!(n.mu_filtered, 1.0);
        assert_eq!(i, virtual_admittance(Cx::new(1.0, 0.05), v, &zv()));
    }

    #[test]
    fn implicit_filter_pole() {
        let st = ImplicitRegState::new(1.0, 0.01, 0.01, Cx::new(1.0, 0.0));
        let sat = SequencePhasor::balanced(Cx::new(2.2, 0.0));
        let (n, _) = implicit_step(&st, Cx::new(1.0, 0.0), Cx::new(1.0, 0.0), &sat, 1.1, &zv(), 0.01);
        let expected = 1.0 + (0.5 - 1.0) * (1.0 - (-1.0f64).exp());
        assert!((n.mu_filtered - expected).abs() < 1e-15);
    }

    #[test]
    fn geometry_collinear() {
        let op = operating_point_geometry(0.0, Cx::new(0.5, 0.0), Cx::new(0.0, 0.3), 1.1).unwrap();
        assert!((op.s.re - 0.83).abs() < 1e-12);
        assert!((op.u.unwrap().re - 0.17).abs() < 1e-12);
        assert_eq!(classify_stability(op.s, Cx::new(0.5, 0.0), 0.0), Stability::Stable);
        assert_eq!(
            classify_stability(op.u.unwrap(), Cx::new(0.5, 0.0), 0.0),
            Stability::Unstable
        );
    }

    #[test]
    fn geometry_enclosing_and_tangent() {
        let op = operating_point_geometry(1.0, Cx::new(0.2, 0.0), Cx::new(0.0, 0.3), 1.1).unwrap();
        assert!(op.u.is_none());
        // tangent: sin ψ = R/|v_g|
        let vg = Cx::new(0.5, 0.0);
        let psi = (0.33f64 / 0.5).asin();
        let op = operating_point_geometry(psi, vg, Cx::new(0.0, 0.3), 1.1).unwrap();
        let u = op.u.unwrap();
        assert!((op.s - u).norm() < 1e-7);
        let tangent = Cx::from_polar((vg * Cx::from_polar(1.0, -psi)).re, psi);
        assert_eq!(classify_stability(tangent, vg, psi), Stability::Unstable);
        assert!(operating_point_geometry(psi + 0.05, vg, Cx::new(0.0, 0.3), 1.1).is_none());
    }

    #[test]
    fn mode_machine_entry_exit_lockout() {
        let cfg = ModeSwitchConfig::default();
        let dt = 1e-4;
        let mut m = ModeMachine::default();
        let mut t = 0.0;
        for _ in 0..100 {
            t += dt;
            m = mode_switch(&m, 0.5, 1.1, 1.0, false, t, dt, &cfg);
        }
        assert_eq!(m.mode, OperatingMode::VoltageForming);
        for _ in 0..10 {
            t += dt;
            m = mode_switch(&m, 2.0, 1.1, 0.3, false, t, dt, &cfg);
        }
        assert_eq!(m.mode, OperatingMode::CrossForming);
        for _ in 0..100 {
            t += dt;
            m = mode_switch(&m, 0.5, 1.1, 0.95, false, t, dt, &cfg);
        }
        assert_eq!(m.mode, OperatingMode::VoltageForming);
        for _ in 0..50 {
            t += dt;
            m = mode_switch(&m, 2.0, 1.1, 0.95, false, t, dt, &cfg);
        }
        assert_eq!(m.mode, OperatingMode::VoltageForming);
    }
}
