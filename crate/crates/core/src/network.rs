//! Algebraic sequence-domain networks.
//!
//! Network equations are written with classical symmetrical-component
//! phasors `(V1, V2)`; the inverter-side envelope pair maps as
//! `V1 = pos`, `V2 = conj(neg)`. Currents are positive out of the inverter.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phasor::{Cx, SequencePhasor};

const ZERO: Cx = Cx::new(0.0, 0.0);
const ONE: Cx = Cx::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuntKind {
    ThreePhase,
    Slg,
    Llg,
}

/// Shunt fault through `r_f` (pu): per phase for three-phase faults, phase a
/// for SLG, phases b and c joined and grounded through `r_f` for LLG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuntFault {
    pub kind: ShuntKind,
    pub r_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FaultKind {
    Shunt(ShuntKind),
    VoltageDip { mag: f64, phase_jump: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub kind: FaultKind,
    /// Fault resistance in pu.
    pub r_f: f64,
    pub t_on: f64,
    /// `None` for a permanent fault.
    pub t_clear: Option<f64>,
    /// Faulted bus for multi-bus networks.
    pub bus: Option<usize>,
}

impl FaultEvent {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.t_on && self.t_clear.map_or(true, |tc| t < tc)
    }

    pub fn end(&self) -> f64 {
        self.t_clear.unwrap_or(f64::INFINITY)
    }
}

/// Terminal –z_g1– fault node –z_g2– source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheveninGrid {
    pub z_g1: Cx,
    pub z_g2: Cx,
    /// Zero-sequence impedance from the fault node to ground on the grid side.
    pub z0_g2: Cx,
    pub v_g: Cx,
}

impl TheveninGrid {
    pub fn validate(&self) -> Result<()> {
        if (self.z_g1 + self.z_g2).norm() == 0.0 || self.z_g2.norm() == 0.0 {
            return Err(Error::config("grid impedances must be non-zero"));
        }
        Ok(())
    }
}

fn slg_llg_check(z: Cx) -> Result<()> {
    if z.norm() < 1e-14 || !z.is_finite() {
        Err(Error::config("singular sequence-network interconnection"))
    } else {
        Ok(())
    }
}

/// Terminal voltage of the single-inverter network.
pub fn solve_sequence_network(
    i: &SequencePhasor,
    grid: &TheveninGrid,
    fault: Option<&ShuntFault>,
) -> Result<SequencePhasor> {
    let i1 = i.pos;
    let i2 = i.neg.conj();
    let z = grid.z_g2;
    let v1oc = grid.v_g + z * i1;
    let v2oc = z * i2;
    let v0oc = ZERO;
    let (z1, z2, z0) = (z, z, grid.z0_g2);

    let (f1, f2) = match fault {
        None => (ZERO, ZERO),
        Some(f) => {
            let rf = Cx::new(f.r_f, 0.0);
            match f.kind {
                ShuntKind::ThreePhase => {
                    slg_llg_check(z1 + rf)?;
                    (v1oc / (z1 + rf), v2oc / (z2 + rf))
                }
                ShuntKind::Slg => {
                    let den = z1 + z2 + z0 + rf * 3.0;
                    slg_llg_check(den)?;
                    let f = (v1oc + v2oc + v0oc) / den;
                    (f, f)
                }
                ShuntKind::Llg => {
                    // unknowns (If0, If1, If2)
                    let m = Matrix3::new(
                        ONE, ONE, ONE,
                        ZERO, -z1, z2,
                        -z0 - rf * 3.0, z1, ZERO,
                    );
                    let rhs = Vector3::new(ZERO, v2oc - v1oc, v1oc - v0oc);
                    let sol = m
                        .lu()
                        .solve(&rhs)
                        .ok_or_else(|| Error::config("singular LLG interconnection"))?;
                    (sol[1], sol[2])
                }
            }
        }
    };
    let v1 = v1oc - z1 * f1 + grid.z_g1 * i1;
    let v2 = v2oc - z2 * f2 + grid.z_g1 * i2;
    Ok(SequencePhasor::new(v1, v2.conj()))
}

/// Affine terminal map `V = a + M·u` over all inverters in classical
/// sequence coordinates, ordered `[V1_0, V2_0, V1_1, V2_1, …]`.
///
/// `u` is the inverter current, or `E/z` for inverters folded in as Norton
/// sources (positive sequence only).
#[derive(Debug, Clone, PartialEq)]
pub struct NetMap {
    pub a: DVector<Cx>,
    pub m: DMatrix<Cx>,
}

impl NetMap {
    pub fn n_inverters(&self) -> usize {
        self.a.len() / 2
    }

    pub fn apply(&self, u: &DVector<Cx>) -> DVector<Cx> {
        &self.a + &self.m * u
    }

    /// Folds Norton admittances `y_k` (on the positive-sequence entries).
    pub fn with_norton(&self, y: &[Option<Cx>]) -> Result<NetMap> {
        let n = self.a.len();
        let mut yd = DMatrix::<Cx>::zeros(n, n);
        for (k, yk) in y.iter().enumerate() {
            if let Some(yk) = yk {
                yd[(2 * k, 2 * k)] = *yk;
            }
        }
        let lhs = DMatrix::<Cx>::identity(n, n) + &self.m * &yd;
        let lu = lhs.lu();
        let a = lu
            .solve(&self.a)
            .ok_or_else(|| Error::config("singular Norton-folded network"))?;
        let m = lu
            .solve(&self.m)
            .ok_or_else(|| Error::config("singular Norton-folded network"))?;
        Ok(NetMap { a, m })
    }

    /// Envelope terminal voltages from envelope currents (or Norton inputs).
    pub fn terminal(&self, u: &[SequencePhasor]) -> Vec<SequencePhasor> {
        let uv = DVector::from_iterator(
            2 * u.len(),
            u.iter().flat_map(|s| [s.pos, s.neg.conj()]),
        );
        let v = self.apply(&uv);
        (0..u.len())
            .map(|k| SequencePhasor::new(v[2 * k], v[2 * k + 1].conj()))
            .collect()
    }
}

fn probe_map<F>(n: usize, solve: F) -> Result<NetMap>
where
    F: Fn(&DVector<Cx>) -> Result<DVector<Cx>>,
{
    let zero = DVector::<Cx>::zeros(2 * n);
    let a = solve(&zero)?;
    let mut m = DMatrix::<Cx>::zeros(2 * n, 2 * n);
    for j in 0..2 * n {
        let mut e = zero.clone();
        e[j] = ONE;
        let col = solve(&e)? - &a;
        m.set_column(j, &col);
    }
    Ok(NetMap { a, m })
}

pub fn thevenin_map(grid: &TheveninGrid, fault: Option<&ShuntFault>) -> Result<NetMap> {
    probe_map(1, |u| {
        let i = SequencePhasor::new(u[0], u[1].conj());
        let v = solve_sequence_network(&i, grid, fault)?;
        Ok(DVector::from_vec(vec![v.pos, v.neg.conj()]))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub z: Cx,
}

/// Constant-impedance load sized for `p + jq` at 1 pu voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
}

impl Load {
    pub fn admittance(&self) -> Cx {
        Cx::new(self.p, -self.q)
    }
}

/// Ideal source behind an impedance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub bus: usize,
    pub v: Cx,
    pub z: Cx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiBusNetwork {
    pub bus_names: Vec<String>,
    pub branches: Vec<Branch>,
    pub loads: Vec<Load>,
    pub source: Option<Source>,
    /// Bus of each inverter.
    pub inverter_buses: Vec<usize>,
    /// Inverter rating on the system power base.
    pub ratings: Vec<f64>,
}

/// Network switching state: optional three-phase shunt fault at a bus and
/// the present source voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Topology {
    pub fault: Option<(usize, f64)>,
    pub v_source: Option<Cx>,
}

impl MultiBusNetwork {
    pub fn n_bus(&self) -> usize {
        self.bus_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_bus();
        let bad = |b: usize| b >= n;
        if self.branches.iter().any(|br| bad(br.from) || bad(br.to) || br.from == br.to) {
            return Err(Error::config("branch references an unknown bus or is a self-loop"));
        }
        if self.branches.iter().any(|br| br.z.norm() == 0.0) {
            return Err(Error::config("branch impedance must be non-zero"));
        }
        if self.loads.iter().any(|l| bad(l.bus)) || self.inverter_buses.iter().any(|&b| bad(b)) {
            return Err(Error::config("load or inverter references an unknown bus"));
        }
        if let Some(s) = &self.source {
            if bad(s.bus) || s.z.norm() == 0.0 {
                return Err(Error::config("source bus unknown or zero source impedance"));
            }
        }
        if self.ratings.len() != self.inverter_buses.len() {
            return Err(Error::config("one rating per inverter required"));
        }
        Ok(())
    }

    fn admittance(&self, topo: &Topology) -> DMatrix<Cx> {
        let n = self.n_bus();
        let mut y = DMatrix::<Cx>::zeros(n, n);
        for br in &self.branches {
            let yb = ONE / br.z;
            y[(br.from, br.from)] += yb;
            y[(br.to, br.to)] += yb;
            y[(br.from, br.to)] -= yb;
            y[(br.to, br.from)] -= yb;
        }
        for l in &self.loads {
            y[(l.bus, l.bus)] += l.admittance();
        }
        if let Some(s) = &self.source {
            y[(s.bus, s.bus)] += ONE / s.z;
        }
        if let Some((b, r_f)) = topo.fault {
            if r_f > 0.0 {
                y[(b, b)] += Cx::new(1.0 / r_f, 0.0);
            } else {
                for j in 0..n {
                    y[(b, j)] = ZERO;
                }
                y[(b, b)] = ONE;
            }
        }
        y
    }

    fn rhs(&self, topo: &Topology, i_inv: &[Cx]) -> DVector<Cx> {
        let mut r = DVector::<Cx>::zeros(self.n_bus());
        if let Some(s) = &self.source {
            let v = topo.v_source.unwrap_or(s.v);
            r[s.bus] += v / s.z;
        }
        for (k, &i) in i_inv.iter().enumerate() {
            r[self.inverter_buses[k]] += i * self.ratings[k];
        }
        if let Some((b, r_f)) = topo.fault {
            if r_f <= 0.0 {
                r[b] = ZERO;
            }
        }
        r
    }

    /// All bus voltages for the given positive-sequence inverter currents
    /// (pu on each inverter's own base).
    pub fn solve_nodes(&self, topo: &Topology, i_inv: &[Cx]) -> Result<DVector<Cx>> {
        let lu = self.admittance(topo).lu();
        lu.solve(&self.rhs(topo, i_inv))
            .filter(|v| v.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::config("singular nodal admittance matrix"))
    }

    /// Affine map of inverter-bus voltages; negative sequence is not modelled
    /// and its entries are identically zero.
    pub fn map(&self, topo: &Topology) -> Result<NetMap> {
        let n = self.inverter_buses.len();
        let lu = self.admittance(topo).lu();
        let solve = |i: &[Cx]| -> Result<DVector<Cx>> {
            lu.solve(&self.rhs(topo, i))
                .filter(|v| v.iter().all(|x| x.is_finite()))
                .ok_or_else(|| Error::config("singular nodal admittance matrix"))
        };
        let pick = |v: &DVector<Cx>| {
            let mut out = DVector::<Cx>::zeros(2 * n);
            for (k, &b) in self.inverter_buses.iter().enumerate() {
                out[2 * k] = v[b];
            }
            out
        };
        let base = pick(&solve(&vec![ZERO; n])?);
        let mut m = DMatrix::<Cx>::zeros(2 * n, 2 * n);
        for j in 0..n {
            let mut e = vec![ZERO; n];
            e[j] = ONE;
            let col = pick(&solve(&e)?) - &base;
            m.set_column(2 * j, &col);
        }
        Ok(NetMap { a: base, m })
    }
}

/// Bus voltages of a multi-bus network for positive-sequence injections.
pub fn solve_multibus(
    i_inv: &[Cx],
    net: &MultiBusNetwork,
    topo: &Topology,
) -> Result<DVector<Cx>> {
    net.solve_nodes(topo, i_inv)
}

/// Independent phase-domain solution of the single-inverter network.
pub mod oracle {
    use super::*;
    use crate::phasor::{fortescue_a, phase_to_sequence, sequence_to_phase};

    fn transform() -> DMatrix<Cx> {
        let a = fortescue_a();
        let a2 = a * a;
        DMatrix::from_row_slice(3, 3, &[ONE, ONE, ONE, ONE, a2, a, ONE, a, a2])
    }

    /// Phase impedance matrix with sequence impedances `(z0, z1, z2)`.
    pub fn phase_impedance(z0: Cx, z1: Cx, z2: Cx) -> DMatrix<Cx> {
        let t = transform();
        let t_inv = t.clone().try_inverse().expect("Fortescue matrix is invertible");
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![z0, z1, z2]));
        t * d * t_inv
    }

    /// Solves KCL/KVL in phase coordinates with the fault constraints written
    /// per phase, then converts the terminal voltages back to sequences.
    pub fn terminal_voltage(
        i: &SequencePhasor,
        grid: &TheveninGrid,
        fault: Option<&ShuntFault>,
    ) -> SequencePhasor {
        let i_ph = sequence_to_phase(&[ZERO, i.pos, i.neg.conj()]);
        let v_src = sequence_to_phase(&[ZERO, grid.v_g, ZERO]);
        let zp = phase_impedance(grid.z0_g2, grid.z_g2, grid.z_g2);
        let i_vec = DVector::from_row_slice(&i_ph);

        // unknowns: V_F (3) then I_f (3)
        let mut m = DMatrix::<Cx>::zeros(6, 6);
        let mut rhs = DVector::<Cx>::zeros(6);
        let drive = &zp * &i_vec;
        for r in 0..3 {
            m[(r, r)] = ONE;
            for c in 0..3 {
                m[(r, 3 + c)] = zp[(r, c)];
            }
            rhs[r] = v_src[r] + drive[r];
        }
        let rf = Cx::new(fault.map_or(0.0, |f| f.r_f), 0.0);
        match fault.map(|f| f.kind) {
            None => {
                for k in 0..3 {
                    m[(3 + k, 3 + k)] = ONE;
                }
            }
            Some(ShuntKind::ThreePhase) => {
                for k in 0..3 {
                    m[(3 + k, k)] = ONE;
                    m[(3 + k, 3 + k)] = -rf;
                }
            }
            Some(ShuntKind::Slg) => {
                m[(3, 0)] = ONE;
                m[(3, 3)] = -rf;
                m[(4, 4)] = ONE;
                m[(5, 5)] = ONE;
            }
            Some(ShuntKind::Llg) => {
                m[(3, 3)] = ONE;
                m[(4, 1)] = ONE;
                m[(4, 2)] = -ONE;
                m[(5, 1)] = ONE;
                m[(5, 4)] = -rf;
                m[(5, 5)] = -rf;
            }
        }
        let sol = m.lu().solve(&rhs).expect("oracle network is nonsingular");
        let v_t = [
            sol[0] + grid.z_g1 * i_ph[0],
            sol[1] + grid.z_g1 * i_ph[1],
            sol[2] + grid.z_g1 * i_ph[2],
        ];
        let seq = phase_to_sequence(&v_t);
        SequencePhasor::new(seq[1], seq[2].conj())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TheveninGrid {
        TheveninGrid {
            z_g1: Cx::new(0.01, 0.1),
            z_g2: Cx::new(0.003, 0.03),
            z0_g2: Cx::new(0.003, 0.03),
            v_g: Cx::new(1.0, 0.0),
        }
    }

    #[test]
    fn open_circuit_is_source() {
        let v = solve_sequence_network(&SequencePhasor::ZERO, &grid(), None).unwrap();
        assert_eq!(v, SequencePhasor::balanced(Cx::new(1.0, 0.0)));
    }

    #[test]
    fn bolted_three_phase_superposition() {
        let g = grid();
        let i = SequencePhasor::new(Cx::new(0.2, -1.0), Cx::new(0.1, 0.05));
        let f = ShuntFault {
            kind: ShuntKind::ThreePhase,
            r_f: 0.0,
        };
        let v = solve_sequence_network(&i, &g, Some(&f)).unwrap();
        assert!((v.pos - g.z_g1 * i.pos).norm() < 1e-15);
        assert!((v.neg - g.z_g1.conj() * i.neg).norm() < 1e-15);
    }

    #[test]
    fn sequence_solver_matches_phase_oracle() {
        let mut g = grid();
        g.z0_g2 = Cx::new(0.01, 0.09);
        let i = SequencePhasor::new(Cx::new(0.4, -0.9), Cx::new(-0.2, 0.15));
        let faults = [
            None,
            Some(ShuntFault { kind: ShuntKind::ThreePhase, r_f: 0.004 }),
            Some(ShuntFault { kind: ShuntKind::Slg, r_f: 0.004 }),
            Some(ShuntFault { kind: ShuntKind::Llg, r_f: 0.004 }),
            Some(ShuntFault { kind: ShuntKind::Llg, r_f: 0.0 }),
        ];
        for f in faults.iter() {
            let a = solve_sequence_network(&i, &g, f.as_ref()).unwrap();
            let b = oracle::terminal_voltage(&i, &g, f.as_ref());
            assert!((a.pos - b.pos).norm() < 1e-10, "{f:?}");
            assert!((a.neg - b.neg).norm() < 1e-10, "{f:?}");
        }
    }

    #[test]
    fn map_reproduces_direct_solve() {
        let g = grid();
        let f = ShuntFault { kind: ShuntKind::Llg, r_f: 0.004 };
        let map = thevenin_map(&g, Some(&f)).unwrap();
        let i = SequencePhasor::new(Cx::new(0.3, -0.7), Cx::new(0.05, -0.2));
        let a = map.terminal(&[i])[0];
        let b = solve_sequence_network(&i, &g, Some(&f)).unwrap();
        assert!((a.pos - b.pos).norm() < 1e-14 && (a.neg - b.neg).norm() < 1e-14);
    }

    #[test]
    fn norton_fold_matches_fixed_point() {
        let g = grid();
        let map = thevenin_map(&g, None).unwrap();
        let z = Cx::new(0.0, 0.2);
        let e = Cx::from_polar(1.05, 0.3);
        let folded = map.with_norton(&[Some(ONE / z)]).unwrap();
        let v = folded.terminal(&[SequencePhasor::balanced(e / z)])[0].pos;
        let i = (e - v) / z;
        let direct = solve_sequence_network(&SequencePhasor::balanced(i), &g, None).unwrap();
        assert!((direct.pos - v).norm() < 1e-14);
    }

    fn symmetric_net() -> MultiBusNetwork {
        MultiBusNetwork {
            bus_names: ["a", "b", "c", "pcc"].map(String::from).to_vec(),
            branches: (0..3)
                .map(|k| Branch { from: k, to: 3, z: Cx::new(0.01, 0.05) })
                .collect(),
            loads: vec![Load { bus: 3, p: 0.3, q: 0.1 }],
            source: Some(Source { bus: 3, v: Cx::new(1.0, 0.0), z: Cx::new(0.01, 0.1) }),
            inverter_buses: vec![0, 1, 2],
            ratings: vec![1.0 / 3.0; 3],
        }
    }

    #[test]
    fn multibus_symmetry() {
        let net = symmetric_net();
        let i = Cx::new(0.5, -0.3);
        let v = solve_multibus(&[i, i, i], &net, &Topology { fault: None, v_source: None }).unwrap();
        assert!((v[0] - v[1]).norm() < 1e-12 && (v[1] - v[2]).norm() < 1e-12);
    }

    #[test]
    fn multibus_single_inverter_matches_thevenin() {
        let net = MultiBusNetwork {
            bus_names: ["t", "f"].map(String::from).to_vec(),
            branches: vec![Branch { from: 0, to: 1, z: Cx::new(0.01, 0.1) }],
            loads: vec![],
            source: Some(Source { bus: 1, v: Cx::new(1.0, 0.0), z: Cx::new(0.003, 0.03) }),
            inverter_buses: vec![0],
            ratings: vec![1.0],
        };
        let i = SequencePhasor::balanced(Cx::new(0.4, -0.6));
        for fault in [None, Some((1usize, 0.004)), Some((1, 0.0))] {
            let topo = Topology { fault, v_source: None };
            let m = net.map(&topo).unwrap().terminal(&[i])[0].pos;
            let sf = fault.map(|(_, r)| ShuntFault { kind: ShuntKind::ThreePhase, r_f: r });
            let t = solve_sequence_network(&i, &grid(), sf.as_ref()).unwrap().pos;
            assert!((m - t).norm() < 1e-12, "{fault:?}");
        }
    }

    #[test]
    fn multibus_power_balance() {
        let net = symmetric_net();
        let topo = Topology { fault: Some((3, 0.02)), v_source: None };
        let i = [Cx::new(0.5, -0.3), Cx::new(0.2, -0.9), Cx::new(-0.1, 0.4)];
        let v = solve_multibus(&i, &net, &topo).unwrap();
        let src = net.source.as_ref().unwrap();
        let i_src = (src.v - v[src.bus]) / src.z;
        let mut gen = (src.v * i_src.conj()).re;
        for k in 0..3 {
            gen += (v[k] * i[k].conj()).re * net.ratings[k];
        }
        let mut used = 0.0;
        for br in &net.branches {
            let ib = (v[br.from] - v[br.to]) / br.z;
            used += br.z.re * ib.norm_sqr();
        }
        for l in &net.loads {
            used += l.p * v[l.bus].norm_sqr();
        }
        used += v[3].norm_sqr() / 0.02;
        used += src.z.re * i_src.norm_sqr();
        assert!((gen - used).abs() < 1e-9, "{gen} vs {used}");
    }
}
