//! Power-angle curves, equal-area criterion, VSM energy function, the dVOC
//! sufficient condition and equivalent impedances of the limiting strategies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cross_forming::VirtualImpedance;
use crate::integrate::rk4;
use crate::limiting::AdaptiveViConfig;
use crate::phasor::Cx;

/// `p(δ) = p_max·sin(δ − θ_g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerAngleCurve {
    pub p_max: f64,
    pub theta_g: f64,
    pub p_star: f64,
}

impl PowerAngleCurve {
    pub fn power(&self, delta: f64) -> f64 {
        self.p_max * (delta - self.theta_g).sin()
    }
}

/// Curve of a lossless link `x_v + x_g` between `v̂` and `v_g`.
pub fn power_angle_curve(v_ref_mag: f64, v_g_mag: f64, x_v: f64, x_g: f64) -> PowerAngleCurve {
    assert!(x_v + x_g > 0.0, "total reactance must be positive");
    PowerAngleCurve {
        p_max: v_ref_mag * v_g_mag / (x_v + x_g),
        theta_g: 0.0,
        p_star: 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibria {
    pub sep: f64,
    pub uep: f64,
}

pub fn equilibria(curve: &PowerAngleCurve, p_star: f64) -> Option<Equilibria> {
    if curve.p_max <= 0.0 || p_star.abs() > curve.p_max {
        return None;
    }
    let d0 = (p_star / curve.p_max).asin();
    Some(Equilibria {
        sep: d0 + curve.theta_g,
        uep: PI - d0 + curve.theta_g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualAreaReport {
    pub delta0: f64,
    pub delta_u: f64,
    pub s_plus: f64,
    pub s_minus: f64,
    pub stable: bool,
    /// `None` when every clearing angle up to the UEP is stable.
    pub critical_angle: Option<f64>,
}

/// `∫(p* − p_max sin δ)dδ` from `a` to `b`.
fn excess_area(p_star: f64, p_max: f64, a: f64, b: f64) -> f64 {
    p_star * (b - a) + p_max * (b.cos() - a.cos())
}

/// Closed-form equal-area test. Curves are taken with zero offset angle.
pub fn equal_area(
    pre: &PowerAngleCurve,
    fault: &PowerAngleCurve,
    post: &PowerAngleCurve,
    p_star: f64,
    delta_c: f64,
) -> Option<EqualAreaReport> {
    let d0 = equilibria(pre, p_star)?.sep;
    let post_eq = equilibria(post, p_star);
    let du = post_eq.map_or(f64::NAN, |e| e.uep);
    let margin = |dc: f64| -> (f64, f64) {
        let sp = excess_area(p_star, fault.p_max, d0, dc);
        let sm = match post_eq {
            Some(_) => -excess_area(p_star, post.p_max, dc, du),
            None => f64::NEG_INFINITY,
        };
        (sp, sm)
    };
    let (s_plus, s_minus) = margin(delta_c);
    let stable = post_eq.is_some() && delta_c <= du && s_minus >= s_plus;

    let critical_angle = post_eq.and_then(|_| {
        let f = |dc: f64| {
            let (sp, sm) = margin(dc);
            sm - sp
        };
        if f(du) >= 0.0 {
            return None;
        }
        if f(d0) < 0.0 {
            return Some(d0);
        }
        let (mut lo, mut hi) = (d0, du);
        while hi - lo > 1e-10 {
            let mid = 0.5 * (lo + hi);
            if f(mid) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    });

    Some(EqualAreaReport {
        delta0: d0,
        delta_u: du,
        s_plus,
        s_minus: if s_minus.is_finite() { s_minus } else { 0.0 },
        stable,
        critical_angle,
    })
}

/// Time for the undamped fault-on swing `T_J·ω̇ = p* − P_f sin δ`,
/// `δ̇ = ω_b·ω`, starting at rest from `δ0`, to reach `δ_cr`.
pub fn critical_clearing_time(
    fault: &PowerAngleCurve,
    p_star: f64,
    delta0: f64,
    delta_cr: f64,
    t_j: f64,
    omega_base: f64,
) -> Option<f64> {
    if delta_cr <= delta0 {
        return Some(0.0);
    }
    if fault.p_max == 0.0 {
        if p_star <= 0.0 {
            return None;
        }
        return Some((2.0 * t_j * (delta_cr - delta0) / (omega_base * p_star)).sqrt());
    }
    let f = |_: f64, y: &[f64; 2]| [omega_base * y[1], (p_star - fault.power(y[0])) / t_j];
    let h = 1e-5;
    let mut y = [delta0, 0.0];
    let mut t = 0.0;
    while t < 100.0 {
        let next = rk4(t, &y, h, f);
        if next[0] >= delta_cr {
            let (mut lo, mut hi) = (0.0, h);
            while hi - lo > 1e-13 {
                let mid = 0.5 * (lo + hi);
                if rk4(t, &y, mid, f)[0] >= delta_cr {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(t + 0.5 * (lo + hi));
        }
        if next[1] < 0.0 && next[0] < delta_cr {
            return None;
        }
        y = next;
        t += h;
    }
    None
}

/// Parameters of the VSM energy function.
///
/// `omega_base` scales the kinetic term when `ω` is a per-unit frequency
/// deviation and `δ̇ = ω_b·ω`; with `ω_b = 1` the plain form
/// `½T_J ω² − p_max(cos δ − cos δ0) − p*(δ − δ0)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub t_j: f64,
    pub p_max: f64,
    pub p_star: f64,
    pub delta0: f64,
    pub omega_base: f64,
}

pub fn energy_function(omega: f64, delta: f64, prm: &EnergyParams) -> f64 {
    0.5 * prm.t_j * prm.omega_base * omega * omega
        - prm.p_max * (delta.cos() - prm.delta0.cos())
        - prm.p_star * (delta - prm.delta0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvocStabilityInputs {
    pub eta: f64,
    pub alpha: f64,
    pub phi: f64,
    pub p_star: f64,
    pub q_star: f64,
    pub v_star: f64,
    pub v_lambda_s: f64,
    pub v_lambda_star: f64,
    pub y: Cx,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvocCondition {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

pub fn dvoc_stability_condition(inp: &DvocStabilityInputs) -> DvocCondition {
    let rot = Cx::from_polar(1.0, inp.phi);
    let s = Cx::new(inp.p_star, -inp.q_star) / (inp.v_star * inp.v_star);
    let lhs = (rot * s).re + inp.alpha;
    let ratio = inp.v_lambda_s / inp.v_lambda_star;
    let rhs = 0.5 * inp.alpha * ratio * ratio + (rot * inp.y).re;
    DvocCondition {
        lhs,
        rhs,
        satisfied: lhs < rhs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EquivalentStrategy {
    /// Threshold virtual impedance with measured current magnitude.
    AdaptiveVi { cfg: AdaptiveViConfig, i_mag: f64 },
    /// Limiter cascaded with virtual admittance, unsaturated reference magnitude.
    LimiterAdmittance {
        z_v: VirtualImpedance,
        i_ref_mag: f64,
        i_lim: f64,
    },
    CrossForming { z_v: VirtualImpedance },
}

pub fn equivalent_impedance(strategy: &EquivalentStrategy) -> Cx {
    match *strategy {
        EquivalentStrategy::AdaptiveVi { cfg, i_mag } => {
            let k = (i_mag / cfg.i_th - 1.0).max(0.0);
            Cx::new(1.0, cfg.sigma_vi) * (cfg.kappa_vi * cfg.i_th * k)
        }
        EquivalentStrategy::LimiterAdmittance {
            z_v,
            i_ref_mag,
            i_lim,
        } => z_v.z() * (i_ref_mag / i_lim),
        EquivalentStrategy::CrossForming { z_v } => z_v.z(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn curve_examples() {
        let c = power_angle_curve(1.0, 0.5, 0.2, 0.1);
        assert!((c.p_max - 1.0 / 0.6).abs() < 1e-12);
        assert_eq!(c.power(0.0), 0.0);
        let e = equilibria(&c, 0.5).unwrap();
        assert!((e.sep - (0.5 / c.p_max).asin()).abs() < 1e-15);
        assert!((e.sep - 0.3047).abs() < 1e-4);
        let e0 = equilibria(&c, 0.0).unwrap();
        assert_eq!((e0.sep, e0.uep), (0.0, PI));
        let em = equilibria(&c, c.p_max).unwrap();
        assert!((em.sep - FRAC_PI_2).abs() < 1e-12 && (em.uep - FRAC_PI_2).abs() < 1e-12);
        assert!(equilibria(&c, 2.0).is_none());
    }

    #[test]
    fn equal_area_degenerate_cases() {
        let pre = power_angle_curve(1.0, 1.0, 0.2, 0.13);
        let fault = power_angle_curve(1.0, 0.1, 0.2, 0.13);
        let d0 = equilibria(&pre, 0.5).unwrap().sep;
        let r = equal_area(&pre, &fault, &pre, 0.5, d0).unwrap();
        assert_eq!(r.s_plus, 0.0);
        assert!(r.stable);
        let same = equal_area(&pre, &pre, &pre, 0.5, 1.5).unwrap();
        assert!(same.stable && same.critical_angle.is_none());
    }

    #[test]
    fn critical_angle_balances_areas() {
        let pre = power_angle_curve(1.0, 1.0, 0.2, 0.13);
        let fault = power_angle_curve(1.0, 0.1, 0.2, 0.13);
        let r = equal_area(&pre, &fault, &pre, 0.5, 0.5).unwrap();
        let dc = r.critical_angle.unwrap();
        let at = equal_area(&pre, &fault, &pre, 0.5, dc).unwrap();
        assert!((at.s_plus - at.s_minus).abs() < 1e-8);
    }

    #[test]
    fn cct_closed_form_agrees_with_integration() {
        let zero = PowerAngleCurve { p_max: 0.0, theta_g: 0.0, p_star: 0.0 };
        let tiny = PowerAngleCurve { p_max: 1e-12, theta_g: 0.0, p_star: 0.0 };
        let a = critical_clearing_time(&zero, 0.5, 0.2, 1.0, 5.0, 100.0 * PI).unwrap();
        let b = critical_clearing_time(&tiny, 0.5, 0.2, 1.0, 5.0, 100.0 * PI).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} {b}");
    }

    #[test]
    fn energy_examples() {
        let prm = EnergyParams { t_j: 5.0, p_max: 2.0, p_star: 0.5, delta0: 0.25, omega_base: 1.0 };
        assert_eq!(energy_function(0.0, 0.25, &prm), 0.0);
        assert!((energy_function(0.1, 0.25, &prm) - 0.025).abs() < 1e-15);
    }

    #[test]
    fn dvoc_condition_reduction() {
        let inp = DvocStabilityInputs {
            eta: 3.0,
            alpha: 1.0,
            phi: FRAC_PI_2,
            p_star: 0.0,
            q_star: 0.0,
            v_star: 1.0,
            v_lambda_s: 1.0,
            v_lambda_star: 1.0,
            y: Cx::new(0.0, -1.0 / 0.4),
        };
        let c = dvoc_stability_condition(&inp);
        assert!((c.lhs - 1.0).abs() < 1e-15);
        assert!((c.rhs - (0.5 + 2.5)).abs() < 1e-12);
        assert!(c.satisfied);
        let other = dvoc_stability_condition(&DvocStabilityInputs { eta: 300.0, ..inp });
        assert_eq!(c, other);
    }

    #[test]
    fn equivalent_impedance_examples() {
        let cfg = AdaptiveViConfig { i_th: 1.0, kappa_vi: 0.91, sigma_vi: 10.0 };
        let z = equivalent_impedance(&EquivalentStrategy::AdaptiveVi { cfg, i_mag: 1.0 });
        assert_eq!(z, Cx::new(0.0, 0.0));
        let z = equivalent_impedance(&EquivalentStrategy::LimiterAdmittance {
            z_v: VirtualImpedance::new(0.0, 0.2),
            i_ref_mag: 2.2,
            i_lim: 1.1,
        });
        assert!((z - Cx::new(0.0, 0.4)).norm() < 1e-15);
    }
}
