//! Per-unit complex phasor algebra and symmetrical-component helpers.
//!
//! Conventions used throughout the crate:
//!
//! * Phasors are amplitude-invariant baseband envelopes. A magnitude of 1.0
//!   is a per-phase peak of 1 pu.
//! * A sequence pair `(pos, neg)` reconstructs the phase quantity
//!   `x(t) = Re{pos·e^{j(ω0 t + λx)}} + Re{neg·e^{j(−ω0 t + λx)}}` with
//!   `λ = (0, −2π/3, +2π/3)` for phases `(a, b, c)`. The stationary-frame
//!   space vector is then `pos·e^{jω0 t} + neg·e^{−jω0 t}`.
//! * The power base absorbs the 3/2 factor of the amplitude-invariant Clarke
//!   transform, so `s = v·conj(i)` holds in pu and the three-phase
//!   instantaneous power is `p(t) = (2/3)·Σx vx(t)·ix(t)`.
//!
//! The negative-sequence envelope is the conjugate of the classical
//! negative-sequence phasor; an impedance `z` acts as `conj(z)` on it.

use std::f64::consts::{FRAC_PI_3, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Complex per-unit quantity.
pub type Cx = Complex64;

/// Phase offsets `λx` for phases a, b, c.
pub const PHASE_OFFSETS: [f64; 3] = [0.0, -2.0 * FRAC_PI_3, 2.0 * FRAC_PI_3];

/// Positive/negative-sequence phasor pair. Zero sequence is implicitly zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SequencePhasor {
    pub pos: Cx,
    pub neg: Cx,
}

impl SequencePhasor {
    pub const ZERO: SequencePhasor = SequencePhasor {
        pos: Cx::new(0.0, 0.0),
        neg: Cx::new(0.0, 0.0),
    };

    pub fn new(pos: Cx, neg: Cx) -> Self {
        Self { pos, neg }
    }

    pub fn balanced(pos: Cx) -> Self {
        Self {
            pos,
            neg: Cx::new(0.0, 0.0),
        }
    }

    pub fn scale(self, k: f64) -> Self {
        Self {
            pos: self.pos * k,
            neg: self.neg * k,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.is_finite() && self.neg.is_finite()
    }

    /// Largest phase peak magnitude.
    pub fn max_phase_magnitude(&self) -> f64 {
        phase_magnitudes(self).max()
    }
}

impl std::ops::Add for SequencePhasor {
    type Output = SequencePhasor;
    fn add(self, rhs: Self) -> Self {
        Self {
            pos: self.pos + rhs.pos,
            neg: self.neg + rhs.neg,
        }
    }
}

impl std::ops::Sub for SequencePhasor {
    type Output = SequencePhasor;
    fn sub(self, rhs: Self) -> Self {
        Self {
            pos: self.pos - rhs.pos,
            neg: self.neg - rhs.neg,
        }
    }
}

/// Per-phase real values (peak magnitudes or instantaneous samples).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTriplet {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl PhaseTriplet {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    /// Maximum entry; ties resolve in phase order a, b, c.
    pub fn max(&self) -> f64 {
        self.argmax().1
    }

    /// Index (0 = a) and value of the largest entry, first phase wins ties.
    pub fn argmax(&self) -> (usize, f64) {
        let v = self.as_array();
        let mut best = (0, v[0]);
        for (k, &x) in v.iter().enumerate().skip(1) {
            if x > best.1 {
                best = (k, x);
            }
        }
        best
    }
}

/// DC and double-frequency parts of the complex power of a sequence pair.
///
/// `p(t) = Re{s_dc} + Re{s_osc_fwd·e^{j2ω0t}} + Re{s_osc_rev·e^{−j2ω0t}}`, and
/// the same with `Im` for `q(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerDecomposition {
    pub s_dc: Cx,
    pub s_osc_fwd: Cx,
    pub s_osc_rev: Cx,
}

impl PowerDecomposition {
    /// Instantaneous active power at phase `ω0·t`.
    pub fn p_at(&self, omega_t: f64) -> f64 {
        let rot = Cx::from_polar(1.0, 2.0 * omega_t);
        self.s_dc.re + (self.s_osc_fwd * rot).re + (self.s_osc_rev * rot.conj()).re
    }

    /// Instantaneous reactive power at phase `ω0·t`.
    pub fn q_at(&self, omega_t: f64) -> f64 {
        let rot = Cx::from_polar(1.0, 2.0 * omega_t);
        self.s_dc.im + (self.s_osc_fwd * rot).im + (self.s_osc_rev * rot.conj()).im
    }

    /// Peak-to-peak ripple of `p(t)` over one period.
    ///
    /// `p_osc = Re{(s_fwd + conj(s_rev))·e^{j2ω0t}}`, an ordinary sinusoid.
    pub fn p_ripple(&self) -> f64 {
        2.0 * (self.s_osc_fwd + self.s_osc_rev.conj()).norm()
    }

    /// Peak-to-peak ripple of `q(t)` over one period.
    pub fn q_ripple(&self) -> f64 {
        2.0 * (self.s_osc_fwd - self.s_osc_rev.conj()).norm()
    }
}

/// Per-phase peak magnitudes of a sequence pair.
pub fn phase_magnitudes(i: &SequencePhasor) -> PhaseTriplet {
    let base = i.pos.norm_sqr() + i.neg.norm_sqr();
    let prod = i.pos * i.neg;
    let mag = |lambda: f64| {
        let cross = 2.0 * (prod * Cx::from_polar(1.0, 2.0 * lambda)).re;
        // rounding can push a perfectly cancelling phase slightly negative
        (base + cross).max(0.0).sqrt()
    };
    PhaseTriplet::new(
        mag(PHASE_OFFSETS[0]),
        mag(PHASE_OFFSETS[1]),
        mag(PHASE_OFFSETS[2]),
    )
}

/// Instantaneous per-phase values of a sequence pair at time `t`.
pub fn reconstruct_instantaneous(sig: &SequencePhasor, t: f64, omega0: f64) -> PhaseTriplet {
    let x = |lambda: f64| {
        (sig.pos * Cx::from_polar(1.0, omega0 * t + lambda)).re
            + (sig.neg * Cx::from_polar(1.0, -omega0 * t + lambda)).re
    };
    PhaseTriplet::new(
        x(PHASE_OFFSETS[0]),
        x(PHASE_OFFSETS[1]),
        x(PHASE_OFFSETS[2]),
    )
}

/// Splits `v·conj(i)` into its DC and double-frequency terms.
pub fn power_decompose(v: &SequencePhasor, i: &SequencePhasor) -> PowerDecomposition {
    PowerDecomposition {
        s_dc: v.pos * i.pos.conj() + v.neg * i.neg.conj(),
        s_osc_fwd: v.pos * i.neg.conj(),
        s_osc_rev: v.neg * i.pos.conj(),
    }
}

pub fn polar(mag: f64, angle: f64) -> Cx {
    Cx::from_polar(mag, angle)
}

pub fn to_polar(z: Cx) -> (f64, f64) {
    z.to_polar()
}

pub fn rotate(z: Cx, angle: f64) -> Cx {
    z * Cx::from_polar(1.0, angle)
}

pub fn conj(z: Cx) -> Cx {
    z.conj()
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Classical symmetrical-component phasors `(V0, V1, V2)` of a sequence pair.
pub fn to_classical(sig: &SequencePhasor) -> [Cx; 3] {
    [Cx::new(0.0, 0.0), sig.pos, sig.neg.conj()]
}

/// Inverse of [`to_classical`]; the zero-sequence entry is discarded.
pub fn from_classical(seq: &[Cx; 3]) -> SequencePhasor {
    SequencePhasor::new(seq[1], seq[2].conj())
}

/// Fortescue operator `a = e^{j2π/3}`.
pub fn fortescue_a() -> Cx {
    Cx::from_polar(1.0, 2.0 * FRAC_PI_3)
}

/// Phase phasors `(Va, Vb, Vc)` from classical sequence phasors `(V0, V1, V2)`.
pub fn sequence_to_phase(seq: &[Cx; 3]) -> [Cx; 3] {
    let a = fortescue_a();
    let a2 = a * a;
    [
        seq[0] + seq[1] + seq[2],
        seq[0] + a2 * seq[1] + a * seq[2],
        seq[0] + a * seq[1] + a2 * seq[2],
    ]
}

/// Classical sequence phasors `(V0, V1, V2)` from phase phasors.
pub fn phase_to_sequence(ph: &[Cx; 3]) -> [Cx; 3] {
    let a = fortescue_a();
    let a2 = a * a;
    let third = 1.0 / 3.0;
    [
        (ph[0] + ph[1] + ph[2]) * third,
        (ph[0] + a * ph[1] + a2 * ph[2]) * third,
        (ph[0] + a2 * ph[1] + a * ph[2]) * third,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn balanced_magnitudes() {
        let m = phase_magnitudes(&SequencePhasor::balanced(Cx::new(1.0, 0.0)));
        assert_eq!(m.as_array().map(|x| (x * 1e12).round()), [1e12; 3]);
        let z = phase_magnitudes(&SequencePhasor::ZERO);
        assert_eq!(z, PhaseTriplet::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn unbalanced_magnitudes_against_sampling() {
        let sig = SequencePhasor::new(Cx::new(1.0, 0.0), Cx::new(0.5, 0.0));
        let m = phase_magnitudes(&sig);
        assert!(close(m.a, 1.5, 1e-12));
        assert!(close(m.b, 0.866_025_403_784_438_6, 1e-12));
        assert!(close(m.c, 0.866_025_403_784_438_6, 1e-12));

        let omega0 = 100.0 * PI;
        let period = 2.0 * PI / omega0;
        let n = 10_000;
        let mut peak = [0.0f64; 3];
        for k in 0..n {
            let s = reconstruct_instantaneous(&sig, period * k as f64 / n as f64, omega0);
            for (p, x) in peak.iter_mut().zip(s.as_array()) {
                *p = p.max(x.abs());
            }
        }
        for (p, x) in peak.iter().zip(m.as_array()) {
            assert!(close(*p, x, 1e-6), "{p} vs {x}");
        }
    }

    #[test]
    fn reconstruction_at_origin() {
        let s = reconstruct_instantaneous(
            &SequencePhasor::balanced(Cx::new(1.0, 0.0)),
            0.0,
            100.0 * PI,
        );
        assert!(close(s.a, 1.0, 1e-15));
        assert!(close(s.b, -0.5, 1e-15));
        assert!(close(s.c, -0.5, 1e-15));
        let z = reconstruct_instantaneous(&SequencePhasor::ZERO, 0.37, 100.0 * PI);
        assert_eq!(z, PhaseTriplet::default());
    }

    #[test]
    fn unity_power() {
        let v = SequencePhasor::balanced(Cx::new(1.0, 0.0));
        let d = power_decompose(&v, &v);
        assert_eq!(d.s_dc, Cx::new(1.0, 0.0));
        assert_eq!(d.s_osc_fwd, Cx::new(0.0, 0.0));
        assert_eq!(d.s_osc_rev, Cx::new(0.0, 0.0));
    }

    #[test]
    fn ripple_matches_sampled_extremes() {
        let v = SequencePhasor::new(Cx::new(0.9, 0.1), Cx::new(0.1, -0.2));
        let i = SequencePhasor::new(Cx::new(0.3, -0.8), Cx::new(0.2, 0.1));
        let d = power_decompose(&v, &i);
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for k in 0..20_000 {
            let p = d.p_at(PI * k as f64 / 20_000.0);
            lo = lo.min(p);
            hi = hi.max(p);
        }
        assert!(close(hi - lo, d.p_ripple(), 1e-6));
    }

    #[test]
    fn rotation_helpers() {
        let z = rotate(Cx::new(1.0, 0.0), FRAC_PI_2);
        assert!(close(z.re, 0.0, 1e-15) && close(z.im, 1.0, 1e-15));
        assert_eq!(conj(Cx::new(2.0, 3.0)), Cx::new(2.0, -3.0));
        let w = Cx::new(0.3, -0.7);
        let back = rotate(rotate(w, 1.234), -1.234);
        assert!((back - w).norm() < 1e-15);
        let (m, a) = to_polar(polar(2.0, 0.5));
        assert!(close(m, 2.0, 1e-15) && close(a, 0.5, 1e-15));
    }

    #[test]
    fn wrap_is_half_open() {
        assert!(close(wrap_angle(PI), PI, 1e-15));
        assert!(close(wrap_angle(-PI), PI, 1e-15));
        assert!(close(wrap_angle(3.0 * PI + 0.1), -PI + 0.1, 1e-12));
    }

    #[test]
    fn classical_roundtrip() {
        let seq = [Cx::new(0.1, 0.2), Cx::new(1.0, -0.3), Cx::new(-0.2, 0.4)];
        let back = phase_to_sequence(&sequence_to_phase(&seq));
        for (x, y) in seq.iter().zip(back.iter()) {
            assert!((x - y).norm() < 1e-14);
        }
    }

    #[test]
    fn negative_envelope_matches_classical_phases() {
        // phase-b instantaneous value from the envelope must equal the classical phasor projection
        let sig = SequencePhasor::new(Cx::new(0.7, 0.2), Cx::new(-0.1, 0.3));
        let ph = sequence_to_phase(&to_classical(&sig));
        let omega0 = 100.0 * PI;
        for &t in &[0.0, 0.0013, 0.0071] {
            let inst = reconstruct_instantaneous(&sig, t, omega0);
            let rot = Cx::from_polar(1.0, omega0 * t);
            for (x, p) in inst.as_array().iter().zip(ph.iter()) {
                assert!(close(*x, (p * rot).re, 1e-12));
            }
        }
    }
}
