use std::f64::consts::PI;

use crossform::limiting::{circular_limit, elliptical_limit, LimiterConfig, LimiterFrame};
use crossform::network::{oracle, solve_sequence_network, ShuntFault, ShuntKind, TheveninGrid};
use crossform::neg_seq::{neg_seq_reference, verify_non_oscillation, NegSeqMode};
use crossform::phasor::{phase_magnitudes, power_decompose, reconstruct_instantaneous, phase_to_sequence, sequence_to_phase};
use crossform::scenario::parse_scenario;
use crossform::stability::{dvoc_stability_condition, DvocStabilityInputs};
use crossform::{bundled, Cx, SequencePhasor};
use proptest::prelude::*;

fn cx(max: f64) -> impl Strategy<Value = Cx> {
    (0.0..max, -PI..PI).prop_map(|(m, a)| Cx::from_polar(m, a))
}

fn seq(max_pos: f64, max_neg: f64) -> impl Strategy<Value = SequencePhasor> {
    (cx(max_pos), cx(max_neg)).prop_map(|(p, n)| SequencePhasor::new(p, n))
}

fn sampled_peaks(i: &SequencePhasor, n: usize) -> [f64; 3] {
    let mut peak = [0.0f64; 3];
    for k in 0..n {
        let x = reconstruct_instantaneous(i, k as f64 / n as f64, 2.0 * PI).as_array();
        for ph in 0..3 {
            peak[ph] = peak[ph].max(x[ph].abs());
        }
    }
    peak
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn limiter_output_never_exceeds_limit(i in seq(3.0, 3.0), theta in -10.0..10.0f64, i_lim in 0.5..2.0f64) {
        for frame in [LimiterFrame::Stationary, LimiterFrame::Rotational] {
            let (o, _) = LimiterConfig { i_lim, frame }.apply(&i, theta);
            prop_assert!(o.max_phase_magnitude() <= i_lim * (1.0 + 1e-12));
        }
    }

    #[test]
    fn limiter_is_identity_inside_the_limit(i in seq(0.5, 0.5), theta in -10.0..10.0f64) {
        let (o, _) = elliptical_limit(&i, 1.1);
        prop_assert_eq!(o, i);
        let (o, _) = LimiterConfig { i_lim: 1.1, frame: LimiterFrame::Rotational }.apply(&i, theta);
        prop_assert!((o.pos - i.pos).norm() < 1e-12 && (o.neg - i.neg).norm() < 1e-12);
    }

    #[test]
    fn circular_limit_keeps_angle(i in cx(5.0), i_lim in 0.1..2.0f64) {
        let o = circular_limit(i, i_lim);
        prop_assert!(o.norm() <= i_lim * (1.0 + 1e-15));
        if i.norm() > 1e-9 {
            prop_assert!((o.arg() - i.arg()).abs() < 1e-12 || (o.arg() - i.arg()).abs() > 2.0 * PI - 1e-12);
        }
    }

    #[test]
    fn phase_magnitudes_match_samples(i in seq(2.0, 2.0)) {
        let f = phase_magnitudes(&i).as_array();
        let s = sampled_peaks(&i, 4000);
        for ph in 0..3 {
            // sampling can only under-estimate the peak
            prop_assert!(s[ph] <= f[ph] + 1e-12);
            prop_assert!(f[ph] - s[ph] < 1e-5 * (1.0 + f[ph]));
        }
    }

    #[test]
    fn fortescue_round_trip(a in cx(2.0), b in cx(2.0), c in cx(2.0)) {
        let back = phase_to_sequence(&sequence_to_phase(&[a, b, c]));
        for (x, y) in back.iter().zip([a, b, c]) {
            prop_assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn power_decomposition_matches_sampled_power(v in seq(1.2, 0.6), i in seq(1.2, 0.6), wt in 0.0..(2.0 * PI)) {
        let d = power_decompose(&v, &i);
        let ph = |x: &SequencePhasor| -> [f64; 3] {
            [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0].map(|l: f64| {
                (x.pos * Cx::from_polar(1.0, wt + l)).re + (x.neg * Cx::from_polar(1.0, -wt + l)).re
            })
        };
        let (va, ia) = (ph(&v), ph(&i));
        let p = 2.0 / 3.0 * (va[0] * ia[0] + va[1] * ia[1] + va[2] * ia[2]);
        let q = 2.0 / 3.0 / 3f64.sqrt()
            * ((va[1] - va[2]) * ia[0] + (va[2] - va[0]) * ia[1] + (va[0] - va[1]) * ia[2]);
        prop_assert!((d.p_at(wt) - p).abs() < 1e-12);
        prop_assert!((d.q_at(wt) - q).abs() < 1e-12);
    }

    #[test]
    fn flexible_modes_cancel_their_ripple(v in seq(1.2, 0.6), i_pos in cx(1.1)) {
        prop_assume!(v.pos.norm() > 0.1 && v.neg.norm() < 0.95 * v.pos.norm());
        let n = neg_seq_reference(&NegSeqMode::P_OSC_SUPPRESS, &v, i_pos).unwrap();
        prop_assert!(verify_non_oscillation(&v, &SequencePhasor::new(i_pos, n)).p_ripple < 1e-12);
        let n = neg_seq_reference(&NegSeqMode::Q_OSC_SUPPRESS, &v, i_pos).unwrap();
        prop_assert!(verify_non_oscillation(&v, &SequencePhasor::new(i_pos, n)).q_ripple < 1e-12);
    }

    #[test]
    fn ripple_floor_holds_for_any_negative_current(v in seq(1.2, 0.6), i in seq(1.1, 1.1)) {
        // p and q ripples cannot both vanish: their sum is at least 4|v⁻||i⁺|
        let r = verify_non_oscillation(&v, &i);
        let floor = 4.0 * v.neg.norm() * i.pos.norm();
        prop_assert!(r.p_ripple + r.q_ripple >= floor * (1.0 - 1e-12) - 1e-15);
    }

    #[test]
    fn sequence_network_matches_phase_domain(
        i in seq(1.1, 0.5),
        g in (0.0..0.05f64, 0.05..0.3f64, 0.0..0.05f64, 0.02..0.2f64, 0.02..0.3f64),
        r_f in 0.0..0.2f64,
        kind in prop_oneof![Just(None), Just(Some(ShuntKind::ThreePhase)), Just(Some(ShuntKind::Slg)), Just(Some(ShuntKind::Llg))],
    ) {
        let grid = TheveninGrid {
            z_g1: Cx::new(g.0, g.1),
            z_g2: Cx::new(g.2, g.3),
            z0_g2: Cx::new(g.2, g.4),
            v_g: Cx::new(1.0, 0.0),
        };
        let fault = kind.map(|kind| ShuntFault { kind, r_f });
        let a = solve_sequence_network(&i, &grid, fault.as_ref()).unwrap();
        let b = oracle::terminal_voltage(&i, &grid, fault.as_ref());
        prop_assert!((a.pos - b.pos).norm() < 1e-10 && (a.neg - b.neg).norm() < 1e-10);
    }

    #[test]
    fn dvoc_condition_is_scale_invariant(
        eta in 0.1..20.0f64, alpha in 0.1..5.0f64, phi in 0.0..(PI / 2.0),
        p in -1.0..1.0f64, q in -1.0..1.0f64, v_s in 0.2..1.5f64, y in cx(10.0), k in 0.2..5.0f64,
    ) {
        // the condition depends on the setpoint only through (p* − jq*)/v*² and on v_λs/v_λ*
        let base = DvocStabilityInputs { eta, alpha, phi, p_star: p, q_star: q, v_star: 1.0, v_lambda_s: v_s, v_lambda_star: 1.0, y };
        let scaled = DvocStabilityInputs { p_star: p * k * k, q_star: q * k * k, v_star: k, v_lambda_s: v_s * k, v_lambda_star: k, ..base };
        let a = dvoc_stability_condition(&base);
        let b = dvoc_stability_condition(&scaled);
        prop_assert!((a.lhs - b.lhs).abs() < 1e-9 && (a.rhs - b.rhs).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn scenario_echo_round_trips(
        t_end in 0.1..20.0f64,
        i_lim in 0.5..2.0f64,
        x_g in 0.01..1.0f64,
        t_on in 0.0..0.1f64,
        dur in 0.01..1.0f64,
    ) {
        let text = format!(
            "name = \"rt\"\n[sim]\nt_end = {t_end:e}\n[network]\nkind = \"thevenin\"\nz_g1 = [0.0, {x_g:e}]\n\
             [[inverter]]\nforming = \"vsm\"\ni_lim = {i_lim:e}\n[[fault]]\nkind = \"three_phase\"\nt_on = {t_on:e}\nt_clear = {:e}\n",
            t_on + dur
        );
        let a = parse_scenario(&text).unwrap();
        let b = parse_scenario(&a.echo()).unwrap();
        prop_assert_eq!(&a.file, &b.file);
        let body = |e: String| e.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
        prop_assert_eq!(body(a.echo()), body(b.echo()));
        prop_assert_eq!(a.setup.inverters[0].i_lim, i_lim);
    }
}

#[test]
fn bundled_scenarios_echo_round_trip() {
    for name in bundled::names() {
        let a = bundled::load(name).unwrap();
        let b = parse_scenario(&a.echo()).unwrap();
        assert_eq!(a.file, b.file, "{name}");
    }
}
