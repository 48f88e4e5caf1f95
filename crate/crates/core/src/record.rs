//! Record rows and their CSV form.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::phasor::Cx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub t: f64,
    pub inverter: usize,
    pub v_pos: Cx,
    pub v_neg: Cx,
    pub i_pos: Cx,
    pub i_neg: Cx,
    pub i_maxphase: f64,
    pub p: f64,
    pub q: f64,
    pub p_virtual: f64,
    /// `θ̂ − ω0·t` (rad, unwrapped).
    pub theta_rel: f64,
    /// Forming frequency (rad/s).
    pub omega: f64,
    pub mu: f64,
    pub v_lambda_mag: f64,
    /// 0 voltage-forming, 1 cross-forming.
    pub mode: u8,
}

pub const CSV_HEADER: [&str; 20] = [
    "t_s",
    "inverter",
    "v_pos_re_pu",
    "v_pos_im_pu",
    "v_neg_re_pu",
    "v_neg_im_pu",
    "i_pos_re_pu",
    "i_pos_im_pu",
    "i_neg_re_pu",
    "i_neg_im_pu",
    "i_maxphase_pu",
    "p_pu",
    "q_pu",
    "p_virtual_pu",
    "theta_rel_rad",
    "omega_rad_per_s",
    "mu",
    "v_lambda_mag_pu",
    "mode",
    "inverter_name",
];

impl RecordRow {
    fn fields(&self, name: &str) -> Vec<String> {
        let f = |x: f64| format!("{x:e}");
        vec![
            f(self.t),
            self.inverter.to_string(),
            f(self.v_pos.re),
            f(self.v_pos.im),
            f(self.v_neg.re),
            f(self.v_neg.im),
            f(self.i_pos.re),
            f(self.i_pos.im),
            f(self.i_neg.re),
            f(self.i_neg.im),
            f(self.i_maxphase),
            f(self.p),
            f(self.q),
            f(self.p_virtual),
            f(self.theta_rel),
            f(self.omega),
            f(self.mu),
            f(self.v_lambda_mag),
            self.mode.to_string(),
            name.to_string(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.i_maxphase,
            self.p,
            self.q,
            self.p_virtual,
            self.theta_rel,
            self.omega,
            self.mu,
            self.v_lambda_mag,
        ]
        .iter()
        .all(|x| x.is_finite())
            && [self.v_pos, self.v_neg, self.i_pos, self.i_neg]
                .iter()
                .all(|z| z.is_finite())
    }
}

/// Streams rows into any writer. Floats use Rust's shortest round-trip
/// scientific form so the text is exact and deterministic.
pub struct CsvSink<W: Write> {
    w: csv::Writer<W>,
    names: Vec<String>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W, names: Vec<String>) -> Result<Self> {
        let mut w = csv::Writer::from_writer(inner);
        w.write_record(CSV_HEADER)?;
        Ok(Self { w, names })
    }

    pub fn write(&mut self, row: &RecordRow) -> Result<()> {
        let name = self.names.get(row.inverter).map(String::as_str).unwrap_or("");
        self.w.write_record(row.fields(name))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.w.flush()?;
        self.w
            .into_inner()
            .map_err(|e| crate::error::Error::Io(e.into_error()))
    }
}

/// Writes rows to `path` via a temporary file renamed into place.
pub fn write_csv_atomic(path: &Path, rows: &[RecordRow], names: &[String]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut sink = CsvSink::new(std::io::BufWriter::new(file), names.to_vec())?;
        for r in rows {
            sink.write(r)?;
        }
        sink.finish()?.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn csv_string(rows: &[RecordRow], names: &[String]) -> Result<String> {
    let mut sink = CsvSink::new(Vec::new(), names.to_vec())?;
    for r in rows {
        sink.write(r)?;
    }
    let bytes = sink.finish()?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses a CSV produced by [`CsvSink`] back into numeric rows.
pub fn read_csv(text: &str) -> Result<Vec<RecordRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let g = |k: usize| rec[k].parse::<f64>().unwrap_or(f64::NAN);
        out.push(RecordRow {
            t: g(0),
            inverter: rec[1].parse().unwrap_or(0),
            v_pos: Cx::new(g(2), g(3)),
            v_neg: Cx::new(g(4), g(5)),
            i_pos: Cx::new(g(6), g(7)),
            i_neg: Cx::new(g(8), g(9)),
            i_maxphase: g(10),
            p: g(11),
            q: g(12),
            p_virtual: g(13),
            theta_rel: g(14),
            omega: g(15),
            mu: g(16),
            v_lambda_mag: g(17),
            mode: rec[18].parse().unwrap_or(0),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let row = RecordRow {
            t: 0.1 + 0.2,
            inverter: 0,
            v_pos: Cx::new(1.0 / 3.0, -2.0e-17),
            v_neg: Cx::new(0.0, 0.0),
            i_pos: Cx::new(0.2, -1.1),
            i_neg: Cx::new(0.0, 0.0),
            i_maxphase: 1.1,
            p: 0.2,
            q: 0.0,
            p_virtual: 0.2,
            theta_rel: 0.3,
            omega: 314.159,
            mu: 1.0,
            v_lambda_mag: 1.0,
            mode: 1,
        };
        let s = csv_string(&[row.clone()], &["inv".into()]).unwrap();
        assert!(s.starts_with("t_s,inverter,"));
        let back = read_csv(&s).unwrap();
        assert_eq!(back[0], row);
    }
}
