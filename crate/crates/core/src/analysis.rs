//! Static transient-stability analysis of a single-inverter scenario:
//! power-angle tables, the equal-area report and the dVOC condition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{FaultKind, ShuntKind, TheveninGrid};
use crate::phasor::Cx;
use crate::scenario::Scenario;
use crate::sim::{FormingKind, NetworkModel};
use crate::stability::{
    critical_clearing_time, dvoc_stability_condition, equal_area, power_angle_curve,
    DvocCondition, DvocStabilityInputs, EqualAreaReport, PowerAngleCurve,
};
use crate::cross_forming::operating_point_geometry;

/// Thevenin source seen from the inverter terminal with a balanced fault
/// through `r_f` at the fault node.
pub fn faulted_thevenin(grid: &TheveninGrid, r_f: f64) -> (Cx, Cx) {
    let rf = Cx::new(r_f, 0.0);
    let v = grid.v_g * rf / (grid.z_g2 + rf);
    let z = grid.z_g1 + grid.z_g2 * rf / (grid.z_g2 + rf);
    (v, z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub p_star: f64,
    pub pre: PowerAngleCurve,
    pub fault: PowerAngleCurve,
    /// Fault-on setpoint, when the scenario steps `p*` during the fault.
    pub p_star_fault: Option<f64>,
    pub equal_area: Option<EqualAreaReport>,
    /// Undamped critical clearing time (s), VSM forming only.
    pub critical_clearing_time: Option<f64>,
    pub dvoc: Option<DvocCondition>,
}

/// Analyses the first inverter of a Thevenin scenario with a balanced fault.
/// Reactances are taken from the imaginary parts of the impedances.
pub fn analyze(scn: &Scenario) -> Result<Analysis> {
    let NetworkModel::Thevenin(grid) = &scn.setup.network else {
        return Err(Error::config("analyze needs a thevenin network"));
    };
    let inv = scn
        .setup
        .inverters
        .first()
        .ok_or_else(|| Error::config("scenario has no inverter"))?;
    let fault = scn
        .setup
        .faults
        .iter()
        .find(|f| matches!(f.kind, FaultKind::Shunt(ShuntKind::ThreePhase)))
        .ok_or_else(|| Error::config("analyze needs a three_phase fault"))?;
    let (p_star, _, v_star) = inv.forming.setpoints();
    let x_v = inv.z_v.im;
    let pre = power_angle_curve(v_star, grid.v_g.norm(), x_v, (grid.z_g1 + grid.z_g2).im);
    let (v_th, z_th) = faulted_thevenin(grid, fault.r_f);
    let fault_curve = power_angle_curve(v_star, v_th.norm(), x_v, z_th.im);
    let p_star_fault = scn
        .setup
        .setpoints
        .iter()
        .find(|s| s.t >= fault.t_on && s.t <= fault.end())
        .map(|s| s.p_star);

    let ea = equal_area(&pre, &fault_curve, &pre, p_star, pre_delta(&pre, p_star));
    let cct = match (&inv.forming, ea.and_then(|r| r.critical_angle.map(|dc| (r.delta0, dc)))) {
        (FormingKind::Vsm(v), Some((d0, dc))) => {
            critical_clearing_time(&fault_curve, p_star, d0, dc, v.t_j, v.omega0)
        }
        _ => None,
    };

    let dvoc = match &inv.forming {
        FormingKind::Dvoc(d) => {
            // saturated internal magnitude from the fault-on geometry at the pre-fault angle
            let delta = ea.map_or(0.0, |r| r.delta0);
            let v_lambda_s = operating_point_geometry(delta, v_th, inv.z_v + z_th, inv.i_lim)
                .map_or(d.v_star, |op| op.s.norm());
            Some(dvoc_stability_condition(&DvocStabilityInputs {
                eta: d.eta,
                alpha: d.alpha,
                phi: d.phi,
                p_star: d.p_star,
                q_star: d.q_star,
                v_star: d.v_star,
                v_lambda_s,
                v_lambda_star: d.v_star,
                y: 1.0 / (inv.z_v + z_th),
            }))
        }
        _ => None,
    };

    Ok(Analysis {
        p_star,
        pre,
        fault: fault_curve,
        p_star_fault,
        equal_area: ea,
        critical_clearing_time: cct,
        dvoc,
    })
}

fn pre_delta(pre: &PowerAngleCurve, p_star: f64) -> f64 {
    if p_star.abs() <= pre.p_max {
        (p_star / pre.p_max).asin()
    } else {
        0.0
    }
}

/// `delta_rad,p_pre_pu,p_fault_pu` over `[0, π]`.
pub fn power_angle_table(a: &Analysis, points: usize) -> String {
    let mut out = String::from("delta_rad,p_pre_pu,p_fault_pu\n");
    let n = points.max(2) - 1;
    for k in 0..=n {
        let d = std::f64::consts::PI * k as f64 / n as f64;
        out += &format!("{d:e},{:e},{:e}\n", a.pre.power(d), a.fault.power(d));
    }
    out
}
