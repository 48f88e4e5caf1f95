use std::path::PathBuf;

use crossform::bundled;
use crossform::scenario::defaults::OMEGA0;
use crossform::neg_seq::verify_non_oscillation;
use crossform::record::{csv_string, read_csv, RecordRow};
use crossform::runner::simulate;
use crossform::SequencePhasor;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.csv"))
}

/// Rows on a 10 ms grid up to 3.4 s.
fn coarse_run(name: &str) -> (Vec<RecordRow>, Vec<String>) {
    let scn = bundled::load(name).unwrap().with_overrides(None, Some(3.4)).unwrap();
    let out = simulate(&scn).unwrap();
    assert!(out.error.is_none(), "{name}: {:?}", out.error);
    let rows = out
        .rows
        .into_iter()
        .filter(|r| (r.t * 1000.0).round() as i64 % 10 == 0)
        .collect();
    (rows, scn.inverter_names())
}

fn check_golden(name: &str) {
    let (rows, names) = coarse_run(name);
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, csv_string(&rows, &names).unwrap()).unwrap();
        return;
    }
    let stored = read_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(stored.len(), rows.len(), "{name}: row count");
    for (a, b) in rows.iter().zip(&stored) {
        assert_eq!((a.inverter, a.mode), (b.inverter, b.mode), "{name} t={}", a.t);
        let pairs = [
            (a.t, b.t),
            (a.v_pos.re, b.v_pos.re),
            (a.v_pos.im, b.v_pos.im),
            (a.v_neg.re, b.v_neg.re),
            (a.v_neg.im, b.v_neg.im),
            (a.i_pos.re, b.i_pos.re),
            (a.i_pos.im, b.i_pos.im),
            (a.i_neg.re, b.i_neg.re),
            (a.i_neg.im, b.i_neg.im),
            (a.i_maxphase, b.i_maxphase),
            (a.p, b.p),
            (a.q, b.q),
            (a.p_virtual, b.p_virtual),
            (a.theta_rel, b.theta_rel),
            (a.omega / OMEGA0, b.omega / OMEGA0),
            (a.mu, b.mu),
            (a.v_lambda_mag, b.v_lambda_mag),
        ];
        for (k, (x, y)) in pairs.iter().enumerate() {
            assert!((x - y).abs() <= 1e-12, "{name} t={} field {k}: {x} vs {y}", a.t);
        }
    }
}

#[test]
fn golden_case1_explicit() {
    check_golden("case1_explicit");
}

#[test]
fn golden_case3_mode4() {
    check_golden("case3_mode4");
}

#[test]
fn p_osc_suppress_flattens_active_power_during_fault() {
    let scn = bundled::load("case3_mode2").unwrap().with_overrides(None, Some(3.35)).unwrap();
    let out = simulate(&scn).unwrap();
    let worst = out
        .rows
        .iter()
        .filter(|r| r.t >= 3.05 && r.t < 3.3)
        .map(|r| {
            let v = SequencePhasor::new(r.v_pos, r.v_neg);
            let i = SequencePhasor::new(r.i_pos, r.i_neg);
            verify_non_oscillation(&v, &i).p_ripple
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "p ripple {worst}");
}

#[test]
fn balanced_mode_leaves_active_power_ripple() {
    let scn = bundled::load("case3_mode1").unwrap().with_overrides(None, Some(3.35)).unwrap();
    let out = simulate(&scn).unwrap();
    let r = out.rows.iter().find(|r| r.t >= 3.2).unwrap();
    let ripple = verify_non_oscillation(
        &SequencePhasor::new(r.v_pos, r.v_neg),
        &SequencePhasor::new(r.i_pos, r.i_neg),
    );
    assert!(ripple.p_ripple > 0.1, "{ripple:?}");
}

#[test]
fn run_to_dir_output_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let scn = bundled::load("case3_mode2").unwrap().with_overrides(None, Some(0.1)).unwrap();
    let report = crossform::runner::run_to_dir(&scn, dir.path()).unwrap();
    assert!(report.summary.completed);
    let rows = read_csv(&std::fs::read_to_string(&report.csv).unwrap()).unwrap();
    assert_eq!(rows, simulate(&scn).unwrap().rows);
    let echoed = crossform::scenario::load_scenario(&dir.path().join("case3_mode2.effective.toml")).unwrap();
    assert_eq!(echoed.file, scn.file);
    assert!(!dir.path().join("case3_mode2.csv.tmp").exists());
}
