//! Scenario execution, sweeps and output files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{write_csv_atomic, RecordRow};
use crate::scenario::{Scenario, ScenarioFile, FORMING_KEYS, REGULATOR_KEYS};
use crate::sim::{initialize_equilibrium, Diagnostic, DiagnosticKind};

#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<RecordRow>,
    pub diagnostics: Vec<Diagnostic>,
    /// Set when the run stopped early.
    pub error: Option<Error>,
    pub elapsed_s: f64,
}

impl RunOutcome {
    /// Error class of the run: the stop reason, else a floor diagnostic.
    pub fn status(&self) -> std::result::Result<(), Error> {
        if let Some(e) = &self.error {
            return Err(match e {
                Error::Divergence { t, context } => Error::Divergence {
                    t: *t,
                    context: context.clone(),
                },
                Error::NoOperatingPoint(m) => Error::NoOperatingPoint(m.clone()),
                Error::VoltageCollapse => Error::VoltageCollapse,
                other => Error::config(other.to_string()),
            });
        }
        if let Some(d) = self
            .diagnostics
            .iter()
            .find(|d| matches!(d.kind, DiagnosticKind::MuFloor | DiagnosticKind::LambdaFloor))
        {
            return Err(Error::NoOperatingPoint(format!(
                "inverter {} hit the {:?} guard at t = {:.4} s",
                d.inverter, d.kind, d.t
            )));
        }
        Ok(())
    }

    pub fn exit_code(&self) -> i32 {
        self.status().err().map_or(0, |e| e.exit_code())
    }
}

/// Runs a scenario to completion. Initialisation failures are returned as
/// errors; failures during the run are captured with the partial record.
pub fn simulate(scn: &Scenario) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut world = initialize_equilibrium(scn.setup.clone())?;
    let mut rows = Vec::new();
    let res = world.run(|r| rows.extend_from_slice(r));
    Ok(RunOutcome {
        rows,
        diagnostics: world.diagnostics.clone(),
        error: res.err(),
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub completed: bool,
    pub exit_code: i32,
    pub message: Option<String>,
    /// Largest phase-current peak after the first event (pu).
    pub max_current: f64,
    /// Final `θ̂ − ω0t` per inverter (rad).
    pub final_theta: Vec<f64>,
    /// Range of `θ̂ − ω0t` after the first event (rad).
    pub theta_span: f64,
    /// Angles and currents constant over the last 0.5 s.
    pub settled: bool,
    pub elapsed_s: f64,
}

fn first_event(scn: &Scenario) -> f64 {
    let f = scn.setup.faults.iter().map(|f| f.t_on);
    let s = scn.setup.setpoints.iter().map(|s| s.t);
    f.chain(s).fold(f64::INFINITY, f64::min).min(scn.setup.sim.t_end)
}

pub fn summarize(scn: &Scenario, out: &RunOutcome) -> Summary {
    let n = scn.setup.inverters.len();
    let t0 = first_event(scn);
    let after: Vec<&RecordRow> = out.rows.iter().filter(|r| r.t >= t0).collect();
    let max_current = after.iter().map(|r| r.i_maxphase).fold(0.0, f64::max);
    let mut final_theta = vec![f64::NAN; n];
    for r in out.rows.iter().rev().take(n) {
        final_theta[r.inverter] = r.theta_rel;
    }
    let (lo, hi) = after.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.theta_rel), hi.max(r.theta_rel))
    });
    let t_end = out.rows.last().map_or(0.0, |r| r.t);
    let tail: Vec<&RecordRow> = out.rows.iter().filter(|r| r.t >= t_end - 0.5).collect();
    let settled = out.error.is_none()
        && !tail.is_empty()
        && (0..n).all(|k| {
            let th: Vec<f64> = tail.iter().filter(|r| r.inverter == k).map(|r| r.theta_rel).collect();
            let cur: Vec<f64> = tail.iter().filter(|r| r.inverter == k).map(|r| r.i_maxphase).collect();
            let span = |v: &[f64]| {
                v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - v.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            span(&th) < 1e-3 && span(&cur) < 1e-3
        });
    Summary {
        name: scn.name.clone(),
        completed: out.error.is_none(),
        exit_code: out.exit_code(),
        message: out.status().err().map(|e| e.to_string()),
        max_current,
        final_theta,
        theta_span: if hi >= lo { hi - lo } else { 0.0 },
        settled,
        elapsed_s: out.elapsed_s,
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn plot_script(csv_name: &str, names: &[String]) -> String {
    format!(
        r#"import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv("{csv_name}")
names = {names:?}
fig, ax = plt.subplots(5, 1, sharex=True, figsize=(8, 10))
for k, name in enumerate(names):
    d = df[df.inverter == k]
    ax[0].plot(d.t_s, (d.v_pos_re_pu**2 + d.v_pos_im_pu**2) ** 0.5, label=name)
    ax[1].plot(d.t_s, d.i_maxphase_pu, label=name)
    ax[2].plot(d.t_s, d.p_pu, label=name + " p")
    ax[2].plot(d.t_s, d.q_pu, "--", label=name + " q")
    ax[3].plot(d.t_s, d.theta_rel_rad, label=name)
    ax[4].plot(d.t_s, d.mode, label=name)
for a, lbl in zip(ax, ["|v+| (pu)", "max phase |i| (pu)", "p, q (pu)", "angle (rad)", "mode"]):
    a.set_ylabel(lbl)
    a.grid(True)
ax[0].legend()
ax[-1].set_xlabel("t (s)")
fig.tight_layout()
fig.savefig("{stem}.png", dpi=150)
"#,
        stem = csv_name.trim_end_matches(".csv"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub summary: Summary,
    pub csv: PathBuf,
}

/// Runs a scenario and writes `<name>.csv`, `<name>.effective.toml`,
/// `<name>.summary.json` and `<name>.plot.py` into `out_dir`.
pub fn run_to_dir(scn: &Scenario, out_dir: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(out_dir)?;
    let out = simulate(scn)?;
    let names = scn.inverter_names();
    let csv = out_dir.join(format!("{}.csv", scn.name));
    write_csv_atomic(&csv, &out.rows, &names)?;
    write_atomic(&out_dir.join(format!("{}.effective.toml", scn.name)), &scn.echo())?;
    let summary = summarize(scn, &out);
    write_atomic(
        &out_dir.join(format!("{}.summary.json", scn.name)),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    write_atomic(
        &out_dir.join(format!("{}.plot.py", scn.name)),
        &plot_script(&format!("{}.csv", scn.name), &names),
    )?;
    Ok(RunReport { summary, csv })
}

/// One swept key: a dotted path into the scenario file (array entries by
/// index, e.g. `fault.0.p_star_fault`) and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl std::str::FromStr for GridAxis {
    type Err = Error;

    /// `key=v1,v2,...`; values parse as integer, float, bool, else string.
    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("grid axis \"{s}\" must be key=v1,v2,...")))?;
        let values = if vals.trim().is_empty() {
            Vec::new()
        } else {
            vals.split(',').map(|v| parse_value(v.trim())).collect()
        };
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

fn parse_value(v: &str) -> toml::Value {
    if let Ok(i) = v.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = v.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = v.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(v.to_string())
    }
}

fn set_path(root: &mut toml::Value, key: &str, val: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(p.to_string(), val);
                    return Ok(());
                }
                t.entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
            }
            toml::Value::Array(a) => {
                let idx: usize = p
                    .parse()
                    .map_err(|_| Error::config(format!("grid key {key}: \"{p}\" is not an index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(format!("grid key {key}: index {idx} ≥ {len}")))?;
                if last {
                    *slot = val;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::config(format!("grid key {key}: \"{p}\" is not a table"))),
        };
    }
    Ok(())
}

/// Integers given for float keys are widened when the file is re-read.
fn widen_ints(v: &mut toml::Value, key: &str) {
    if let toml::Value::Integer(i) = v {
        if !key.ends_with("decimation") {
            *v = toml::Value::Float(*i as f64);
        }
    }
}

/// Switching an inverter's forming or regulator kind drops the parameters
/// owned only by the old kind, so the new kind's defaults apply.
fn drop_stale_keys(root: &mut toml::Value, key: &str, new: &toml::Value) {
    let parts: Vec<&str> = key.split('.').collect();
    let [section, idx, kind] = parts[..] else { return };
    let table = match kind {
        "forming" => FORMING_KEYS,
        "regulator" => REGULATOR_KEYS,
        _ => return,
    };
    let Some(inv) = idx
        .parse::<usize>()
        .ok()
        .and_then(|i| root.get_mut(section)?.as_array_mut()?.get_mut(i)?.as_table_mut())
    else {
        return;
    };
    let owned = |name: Option<&str>| -> &[&str] {
        name.and_then(|n| table.iter().find(|(k, _)| *k == n))
            .map_or(&[], |(_, keys)| *keys)
    };
    let old = owned(inv.get(kind).and_then(|v| v.as_str()));
    let keep = owned(new.as_str());
    for k in old.iter().filter(|k| !keep.contains(k)) {
        inv.remove(*k);
    }
}

/// Scenario with one grid point applied.
pub fn apply_point(template: &ScenarioFile, point: &[(String, toml::Value)]) -> Result<Scenario> {
    let mut root = toml::Value::try_from(template)
        .map_err(|e| Error::config(format!("scenario serialization: {e}")))?;
    for (k, v) in point {
        drop_stale_keys(&mut root, k, v);
        let mut v = v.clone();
        widen_ints(&mut v, k);
        set_path(&mut root, k, v)?;
    }
    let file: ScenarioFile = root
        .try_into()
        .map_err(|e| Error::config(format!("grid point: {e}")))?;
    Scenario::from_file(&file)
}

/// Cartesian product of the axes in row-major order (last axis fastest).
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<(String, toml::Value)>> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Vec::new();
    }
    let mut out: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for ax in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                ax.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((ax.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub scenario: String,
    pub point: Vec<(String, String)>,
    pub summary: Option<Summary>,
    pub error: Option<String>,
    pub error_code: Option<i32>,
}

fn show(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every template at every grid point in parallel. Rows are ordered by
/// template, then grid point; a failing point is recorded and skipped.
pub fn sweep(templates: &[ScenarioFile], axes: &[GridAxis]) -> Vec<SweepRow> {
    let points = grid_points(axes);
    let jobs: Vec<(&ScenarioFile, &Vec<(String, toml::Value)>)> = templates
        .iter()
        .flat_map(|t| points.iter().map(move |p| (t, p)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(index, (template, point))| {
            let shown = point.iter().map(|(k, v)| (k.clone(), show(v))).collect();
            let res = apply_point(template, point).and_then(|scn| {
                let out = simulate(&scn)?;
                Ok(summarize(&scn, &out))
            });
            let (summary, error, error_code) = match res {
                Ok(s) => (Some(s), None, None),
                Err(e) => (None, Some(e.to_string()), Some(e.exit_code())),
            };
            SweepRow {
                index,
                scenario: template.name.clone().unwrap_or_default(),
                point: shown,
                summary,
                error,
                error_code,
            }
        })
        .collect()
}

/// Sweep matrix as CSV, one row per run.
pub fn sweep_csv(axes: &[GridAxis], rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["index".into(), "scenario".into()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(
        [
            "completed",
            "exit_code",
            "max_current_pu",
            "theta_span_rad",
            "final_theta_rad",
            "settled",
            "verdict",
            "error",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = vec![r.index.to_string(), r.scenario.clone()];
        rec.extend(r.point.iter().map(|(_, v)| v.clone()));
        match &r.summary {
            Some(s) => {
                let verdict = if s.settled { "stable" } else { "unstable" };
                let ft = s
                    .final_theta
                    .iter()
                    .map(|x| format!("{x:e}"))
                    .collect::<Vec<_>>()
                    .join(";");
                rec.extend([
                    s.completed.to_string(),
                    s.exit_code.to_string(),
                    format!("{:e}", s.max_current),
                    format!("{:e}", s.theta_span),
                    ft,
                    s.settled.to_string(),
                    verdict.into(),
                    s.message.clone().unwrap_or_default(),
                ]);
            }
            None => rec.extend([
                "false".into(),
                r.error_code.unwrap_or(2).to_string(),
                String::new(),
                String::new(),
                String::new(),
                "false".into(),
                "error".into(),
                r.error.clone().unwrap_or_default(),
            ]),
        }
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major() {
        let axes: Vec<GridAxis> = ["a=1,2", "b=x,y,z"].iter().map(|s| s.parse().unwrap()).collect();
        let g = grid_points(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(show(&g[1][1].1), "y");
        assert_eq!(show(&g[3][0].1), "2");
        let empty: Vec<GridAxis> = vec!["a=".parse().unwrap()];
        assert!(grid_points(&empty).is_empty());
    }

    #[test]
    fn point_edits_nested_keys() {
        let scn = crate::scenario::parse_scenario(
            "[[inverter]]\n[[fault]]\nkind = \"three_phase\"\nt_on = 1.0\np_star_fault = 0.3\n",
        )
        .unwrap();
        let p = vec![
            ("fault.0.p_star_fault".to_string(), toml::Value::Float(0.1)),
            ("inverter.0.regulator".to_string(), toml::Value::String("explicit".into())),
            ("sim.t_end".to_string(), toml::Value::Integer(2)),
        ];
        let s = apply_point(&scn.file, &p).unwrap();
        assert_eq!(s.setup.setpoints[0].p_star, 0.1);
        assert_eq!(s.setup.sim.t_end, 2.0);
        assert!(matches!(
            s.setup.inverters[0].regulator,
            crate::sim::Regulator::Explicit { .. }
        ));
    }
}
