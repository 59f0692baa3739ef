//! Network descriptions and the matrices of the averaged RLC model.
//!
//! State ordering is `x = [line currents; source-branch currents;
//! non-CPL bus voltages; CPL bus voltages]`. Line current is positive from
//! `from` to `to`. A source is a Thévenin pair `(u, R_s)` feeding its bus; when
//! the source also declares an inductance it becomes a series RL branch with
//! its own current state and `u` enters that branch's KVL row directly.
//!
//! The dynamics are
//!
//! ```text
//! D ẋ = A x + B2 (u ⊙ g) + B1 (p ⊘ C1 x)
//! ```
//!
//! where `g` is the per-source input gain (`1/R_s` for a Thévenin source,
//! `1` for an inductive branch), `C1 = B1ᵀ` and `C2 = B2ᵀ`.
//!
//! The steady-state conductance blocks treat every physical bus as a node of
//! the "load" side (`Y_ll`, with zero injection at buses without a CPL) and
//! every source's internal EMF node as the "source" side (`Y_ss`).

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: String,
    #[serde(default)]
    pub has_source: bool,
    #[serde(default)]
    pub has_cpl: bool,
    /// Farads (> 0).
    pub capacitance: f64,
    /// Ohms; absent means an open circuit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shunt_resistance: Option<f64>,
    /// Composite terminal resistance of the source (droop plus physical).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_resistance: Option<f64>,
    /// Optional series inductance of the source branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_inductance: Option<f64>,
    /// Watts, non-positive (a load draws power).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpl_power: Option<f64>,
    /// Steady-state voltage bounds `[min, max]`; absent means `[0, ∞)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voltage_bounds: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: String,
    pub to: String,
    pub resistance: f64,
    pub inductance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseValues {
    /// Base voltage `V₀` in volts.
    pub voltage: f64,
    /// Base power `p_ℓ0` in watts.
    pub power: f64,
}

impl BaseValues {
    pub fn impedance(&self) -> f64 {
        self.voltage * self.voltage / self.power
    }

    pub fn current(&self) -> f64 {
        self.power / self.voltage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    /// Source setpoint bounds `𝒰` (volts), shared by all sources.
    pub setpoint: [f64; 2],
    /// Generation bounds `𝒫_s` (watts), shared by all sources.
    pub generation: [f64; 2],
    /// Optional steady-state line-current bounds (amperes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current: Option<[f64; 2]>,
}

/// Half-widths `Δx̄` of the operating box, either per state class or as an
/// explicit vector in state order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HalfWidth {
    Uniform { current: f64, voltage: f64 },
    States(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Si,
    PerUnit,
}

/// Validated network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default)]
    pub name: String,
    pub buses: Vec<BusSpec>,
    #[serde(default)]
    pub lines: Vec<LineSpec>,
    pub base: BaseValues,
    pub bounds: Bounds,
    /// Generation cost per source, in source (bus) order. Defaults to ones.
    #[serde(default)]
    pub costs: Vec<f64>,
    pub operating_halfwidth: HalfWidth,
    /// Work on the per-unit model downstream.
    #[serde(default)]
    pub per_unit: bool,
    /// Units the numeric fields are expressed in.
    #[serde(default)]
    pub units: Units,
}

/// Source attachment as seen by the state-space model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SourceKind {
    /// `(u - v) / R_s` injected into the bus KCL row.
    Thevenin,
    /// Series RL branch; the payload is the branch current's state index.
    Inductive { branch_state: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub bus: usize,
    pub resistance: f64,
    pub kind: SourceKind,
}

/// Index bookkeeping between buses, lines, sources and the state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    pub n_lines: usize,
    pub n_branches: usize,
    pub n_buses: usize,
    /// State index of each bus voltage (indexed by bus).
    pub bus_state: Vec<usize>,
    /// Bus index of each CPL, in `C1` row order.
    pub cpl_buses: Vec<usize>,
    /// Sources in `B2` column order (bus order).
    pub sources: Vec<SourceInfo>,
}

impl StateLayout {
    pub fn n(&self) -> usize {
        self.n_lines + self.n_branches + self.n_buses
    }

    pub fn n_currents(&self) -> usize {
        self.n_lines + self.n_branches
    }

    pub fn n_cpl(&self) -> usize {
        self.cpl_buses.len()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn is_current(&self, state: usize) -> bool {
        state < self.n_currents()
    }
}

impl NetworkSpec {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn n_sources(&self) -> usize {
        self.buses.iter().filter(|b| b.has_source).count()
    }

    pub fn n_cpl(&self) -> usize {
        self.buses.iter().filter(|b| b.has_cpl).count()
    }

    /// Number of inductive source branches (extra current states).
    pub fn n_branches(&self) -> usize {
        self.buses
            .iter()
            .filter(|b| b.has_source && b.source_inductance.is_some())
            .count()
    }

    pub fn n_states(&self) -> usize {
        self.n_lines() + self.n_branches() + self.n_buses()
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn layout(&self) -> StateLayout {
        let n_lines = self.n_lines();
        let n_branches = self.n_branches();
        let n_cur = n_lines + n_branches;
        let mut bus_state = vec![0; self.n_buses()];
        let mut next = n_cur;
        for (k, b) in self.buses.iter().enumerate() {
            if !b.has_cpl {
                bus_state[k] = next;
                next += 1;
            }
        }
        let mut cpl_buses = Vec::new();
        for (k, b) in self.buses.iter().enumerate() {
            if b.has_cpl {
                bus_state[k] = next;
                next += 1;
                cpl_buses.push(k);
            }
        }
        let mut sources = Vec::new();
        let mut branch = n_lines;
        for (k, b) in self.buses.iter().enumerate() {
            if !b.has_source {
                continue;
            }
            let resistance = b.source_resistance.unwrap_or(f64::NAN);
            let kind = if b.source_inductance.is_some() {
                let s = SourceKind::Inductive {
                    branch_state: branch,
                };
                branch += 1;
                s
            } else {
                SourceKind::Thevenin
            };
            sources.push(SourceInfo {
                bus: k,
                resistance,
                kind,
            });
        }
        StateLayout {
            n_lines,
            n_branches,
            n_buses: self.n_buses(),
            bus_state,
            cpl_buses,
            sources,
        }
    }

    /// CPL powers in `C1` order (non-positive).
    pub fn cpl_powers(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_cpl(),
            self.buses
                .iter()
                .filter(|b| b.has_cpl)
                .map(|b| b.cpl_power.unwrap_or(0.0)),
        )
    }

    /// CPL power per bus (zero where no CPL).
    pub fn bus_powers(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_buses(),
            self.buses.iter().map(|b| {
                if b.has_cpl {
                    b.cpl_power.unwrap_or(0.0)
                } else {
                    0.0
                }
            }),
        )
    }

    pub fn costs_vector(&self) -> DVector<f64> {
        if self.costs.is_empty() {
            DVector::from_element(self.n_sources(), 1.0)
        } else {
            DVector::from_vec(self.costs.clone())
        }
    }

    /// `Δx̄` in state order.
    pub fn halfwidth_vector(&self) -> DVector<f64> {
        let layout = self.layout();
        match &self.operating_halfwidth {
            HalfWidth::Uniform { current, voltage } => DVector::from_fn(layout.n(), |i, _| {
                if layout.is_current(i) {
                    *current
                } else {
                    *voltage
                }
            }),
            HalfWidth::States(v) => DVector::from_vec(v.clone()),
        }
    }

    /// Lower/upper steady-state voltage bounds per bus.
    pub fn voltage_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let lo = DVector::from_iterator(
            self.n_buses(),
            self.buses
                .iter()
                .map(|b| b.voltage_bounds.map(|v| v[0]).unwrap_or(0.0)),
        );
        let hi = DVector::from_iterator(
            self.n_buses(),
            self.buses
                .iter()
                .map(|b| b.voltage_bounds.map(|v| v[1]).unwrap_or(f64::INFINITY)),
        );
        (lo, hi)
    }

    /// True when every bus shares the same finite voltage upper bound.
    pub fn uniform_voltage_upper_bound(&self) -> bool {
        let (_, hi) = self.voltage_bounds();
        let first = hi[0];
        first.is_finite() && hi.iter().all(|&h| (h - first).abs() <= 1e-12 * first.abs())
    }

    /// The spec the numerical pipeline should run on: the per-unit model when
    /// `per_unit` is set, otherwise the raw description.
    pub fn working(&self) -> Result<NetworkSpec> {
        if self.per_unit && self.units == Units::Si {
            per_unit(self)
        } else {
            Ok(self.clone())
        }
    }

    /// Scale converting working-unit voltages back to volts.
    pub fn voltage_scale(&self) -> f64 {
        match self.units {
            Units::Si => 1.0,
            Units::PerUnit => self.base.voltage,
        }
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("network serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |m: String| Err(Error::Schema(m));
        if self.buses.is_empty() {
            return schema("`buses` must contain at least one bus".into());
        }
        let mut ids = HashMap::new();
        for (k, b) in self.buses.iter().enumerate() {
            if ids.insert(b.id.as_str(), k).is_some() {
                return schema(format!("duplicate bus id `{}`", b.id));
            }
            if !(b.capacitance > 0.0) || !b.capacitance.is_finite() {
                return schema(format!("bus `{}`: capacitance must be positive", b.id));
            }
            if let Some(r) = b.shunt_resistance {
                if !(r > 0.0) {
                    return schema(format!("bus `{}`: shunt resistance must be positive", b.id));
                }
            }
            match (b.has_source, b.source_resistance) {
                (true, Some(r)) if r > 0.0 && r.is_finite() => {}
                (true, _) => {
                    return schema(format!(
                        "bus `{}`: source requires a positive `source_resistance`",
                        b.id
                    ))
                }
                (false, Some(_)) | (false, None) if b.source_inductance.is_some() => {
                    return schema(format!(
                        "bus `{}`: `source_inductance` without a source",
                        b.id
                    ))
                }
                (false, Some(_)) => {
                    return schema(format!(
                        "bus `{}`: `source_resistance` without a source",
                        b.id
                    ))
                }
                (false, None) => {}
            }
            if let Some(l) = b.source_inductance {
                if !(l > 0.0) {
                    return schema(format!(
                        "bus `{}`: source inductance must be positive",
                        b.id
                    ));
                }
            }
            match (b.has_cpl, b.cpl_power) {
                (true, Some(p)) if p <= 0.0 && p.is_finite() => {}
                (true, Some(_)) => {
                    return schema(format!(
                        "bus `{}`: CPL power must be non-positive (loads draw power)",
                        b.id
                    ))
                }
                (true, None) => return schema(format!("bus `{}`: CPL requires `cpl_power`", b.id)),
                (false, Some(_)) => {
                    return schema(format!("bus `{}`: `cpl_power` without `has_cpl`", b.id))
                }
                (false, None) => {}
            }
            if let Some([lo, hi]) = b.voltage_bounds {
                if !(lo >= 0.0 && hi > lo) {
                    return schema(format!(
                        "bus `{}`: voltage bounds must satisfy 0 ≤ min < max",
                        b.id
                    ));
                }
            }
        }
        if self.n_sources() == 0 {
            return schema("network needs at least one source".into());
        }
        for (t, l) in self.lines.iter().enumerate() {
            let from = ids
                .get(l.from.as_str())
                .ok_or_else(|| Error::Schema(format!("line {t}: unknown bus `{}`", l.from)))?;
            let to = ids
                .get(l.to.as_str())
                .ok_or_else(|| Error::Schema(format!("line {t}: unknown bus `{}`", l.to)))?;
            if from == to {
                return schema(format!("line {t}: endpoints must be distinct"));
            }
            if !(l.resistance > 0.0) || !l.resistance.is_finite() {
                return schema(format!("line {t}: resistance must be positive"));
            }
            if !(l.inductance > 0.0) || !l.inductance.is_finite() {
                return schema(format!("line {t}: inductance must be positive"));
            }
        }
        // connectivity
        let n = self.n_buses();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            let (a, b) = (ids[l.from.as_str()], ids[l.to.as_str()]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for &m in &adj[k] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Disconnected(self.buses[k].id.clone()));
        }
        if !(self.base.voltage > 0.0) || !(self.base.power > 0.0) {
            return schema("base voltage and power must be positive".into());
        }
        let [ulo, uhi] = self.bounds.setpoint;
        if !(ulo <= uhi) {
            return schema("setpoint bounds must satisfy min ≤ max".into());
        }
        let [plo, phi] = self.bounds.generation;
        if !(plo <= phi) {
            return schema("generation bounds must satisfy min ≤ max".into());
        }
        if let Some([lo, hi]) = self.bounds.current {
            if !(lo <= hi) {
                return schema("current bounds must satisfy min ≤ max".into());
            }
        }
        if !self.costs.is_empty() {
            if self.costs.len() != self.n_sources() {
                return schema(format!(
                    "`costs` has {} entries but the network has {} sources",
                    self.costs.len(),
                    self.n_sources()
                ));
            }
            if self.costs.iter().any(|&c| !(c >= 0.0)) {
                return schema("costs must be non-negative".into());
            }
        }
        match &self.operating_halfwidth {
            HalfWidth::Uniform { current, voltage } => {
                if !(*current > 0.0 && *voltage > 0.0) {
                    return schema("operating half-widths must be strictly positive".into());
                }
            }
            HalfWidth::States(v) => {
                if v.len() != self.n_states() {
                    return schema(format!(
                        "operating half-width has {} entries, expected {} states",
                        v.len(),
                        self.n_states()
                    ));
                }
                if v.iter().any(|&x| !(x > 0.0)) {
                    return schema("operating half-widths must be strictly positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Parse and validate a JSON network description.
pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    let spec: NetworkSpec = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_network(path: &std::path::Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_network(&text)
}

/// Matrices of the dynamic model.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    /// Diagonal of `D` (inductances, then capacitances).
    pub d: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    /// Input gain per source: `1/R_s` (Thévenin) or `1` (inductive branch).
    pub source_gain: DVector<f64>,
    /// CPL powers in `C1` order.
    pub p_load: DVector<f64>,
    pub layout: StateLayout,
}

impl SystemMatrices {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn n_cpl(&self) -> usize {
        self.b1.ncols()
    }

    pub fn n_sources(&self) -> usize {
        self.b2.ncols()
    }

    pub fn c1(&self) -> DMatrix<f64> {
        self.b1.transpose()
    }

    pub fn c2(&self) -> DMatrix<f64> {
        self.b2.transpose()
    }

    pub fn d_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.d)
    }

    pub fn d_inv(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.d.map(|x| 1.0 / x))
    }

    /// Diagonal (resistive) part of `A`.
    pub fn a_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.a.diagonal())
    }

    /// Skew-symmetric (interconnection) part of `A`.
    pub fn a_skew(&self) -> DMatrix<f64> {
        &self.a - self.a_diag()
    }

    /// Load-bus voltages `C1 x`.
    pub fn load_voltages(&self, x: &DVector<f64>) -> DVector<f64> {
        self.b1.tr_mul(x)
    }

    pub fn input(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.b2 * u.component_mul(&self.source_gain)
    }

    /// Right-hand side `A x + B2 (u ⊙ g) + B1 (p ⊘ C1 x)` (i.e. `D ẋ`).
    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let vl = self.load_voltages(x);
        let cpl = p.zip_map(&vl, |pj, vj| pj / vj);
        &self.a * x + self.input(u) + &self.b1 * cpl
    }

    /// `ẋ` of the nonlinear model.
    pub fn field(&self, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        self.rhs(x, u, p).component_div(&self.d)
    }
}

/// Assemble `D, A, B1, B2` from a validated spec.
pub fn build_dynamics(spec: &NetworkSpec) -> SystemMatrices {
    let layout = spec.layout();
    let n = layout.n();
    let mut d = DVector::zeros(n);
    let mut a = DMatrix::zeros(n, n);
    let ids: HashMap<&str, usize> = spec
        .buses
        .iter()
        .enumerate()
        .map(|(k, b)| (b.id.as_str(), k))
        .collect();

    for (t, line) in spec.lines.iter().enumerate() {
        let from = layout.bus_state[ids[line.from.as_str()]];
        let to = layout.bus_state[ids[line.to.as_str()]];
        d[t] = line.inductance;
        a[(t, t)] = -line.resistance;
        // KVL: L di/dt = v_from - v_to - R i
        a[(t, from)] += 1.0;
        a[(t, to)] -= 1.0;
        // KCL: current leaves `from`, enters `to`
        a[(from, t)] -= 1.0;
        a[(to, t)] += 1.0;
    }

    for (k, bus) in spec.buses.iter().enumerate() {
        let s = layout.bus_state[k];
        d[s] = bus.capacitance;
        if let Some(r) = bus.shunt_resistance {
            a[(s, s)] -= 1.0 / r;
        }
    }

    let ns = layout.n_sources();
    let mut b2 = DMatrix::zeros(n, ns);
    let mut gain = DVector::zeros(ns);
    for (j, src) in layout.sources.iter().enumerate() {
        let s = layout.bus_state[src.bus];
        match src.kind {
            SourceKind::Thevenin => {
                a[(s, s)] -= 1.0 / src.resistance;
                b2[(s, j)] = 1.0;
                gain[j] = 1.0 / src.resistance;
            }
            SourceKind::Inductive { branch_state } => {
                let bus = &spec.buses[src.bus];
                d[branch_state] = bus.source_inductance.unwrap_or(f64::NAN);
                a[(branch_state, branch_state)] = -src.resistance;
                a[(branch_state, s)] -= 1.0;
                a[(s, branch_state)] += 1.0;
                b2[(branch_state, j)] = 1.0;
                gain[j] = 1.0;
            }
        }
    }

    let nl = layout.n_cpl();
    let mut b1 = DMatrix::zeros(n, nl);
    for (j, &bus) in layout.cpl_buses.iter().enumerate() {
        b1[(layout.bus_state[bus], j)] = 1.0;
    }

    SystemMatrices {
        d,
        a,
        b1,
        b2,
        source_gain: gain,
        p_load: spec.cpl_powers(),
        layout,
    }
}

/// Nodal conductance blocks of the steady-state model.
#[derive(Debug, Clone, PartialEq)]
pub struct Conductance {
    /// `n_s × n_s`, diagonal `1/R_s`.
    pub y_ss: DMatrix<f64>,
    /// `n_s × n_b` coupling of source EMFs to buses.
    pub y_sl: DMatrix<f64>,
    /// `n_b × n_b` bus conductance matrix (lines, shunts, source resistances).
    pub y_ll: DMatrix<f64>,
}

impl Conductance {
    pub fn y_ls(&self) -> DMatrix<f64> {
        self.y_sl.transpose()
    }

    /// Net current leaving each bus into the network, `Y_ll v + Y_ls u`.
    pub fn bus_currents(&self, v: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.y_ll * v + self.y_sl.tr_mul(u)
    }

    /// Bus injections `[v](Y_ll v + Y_ls u)`.
    pub fn bus_powers(&self, v: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        v.component_mul(&self.bus_currents(v, u))
    }

    /// Source outputs `[u](Y_sl v + Y_ss u)`.
    pub fn source_powers(&self, v: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        u.component_mul(&(&self.y_sl * v + &self.y_ss * u))
    }
}

pub fn build_conductance(spec: &NetworkSpec) -> Conductance {
    let layout = spec.layout();
    let nb = spec.n_buses();
    let ns = layout.n_sources();
    let mut y_ll = DMatrix::zeros(nb, nb);
    for line in &spec.lines {
        let a = spec.bus_index(&line.from).expect("validated");
        let b = spec.bus_index(&line.to).expect("validated");
        let g = 1.0 / line.resistance;
        y_ll[(a, a)] += g;
        y_ll[(b, b)] += g;
        y_ll[(a, b)] -= g;
        y_ll[(b, a)] -= g;
    }
    for (k, bus) in spec.buses.iter().enumerate() {
        if let Some(r) = bus.shunt_resistance {
            y_ll[(k, k)] += 1.0 / r;
        }
    }
    let mut y_ss = DMatrix::zeros(ns, ns);
    let mut y_sl = DMatrix::zeros(ns, nb);
    for (j, src) in layout.sources.iter().enumerate() {
        let g = 1.0 / src.resistance;
        y_ss[(j, j)] = g;
        y_sl[(j, src.bus)] = -g;
        y_ll[(src.bus, src.bus)] += g;
    }
    Conductance { y_ss, y_sl, y_ll }
}

/// Steady-state vector `x^e` implied by setpoints `u` and bus voltages `v`.
pub fn steady_state_vector(
    spec: &NetworkSpec,
    layout: &StateLayout,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let mut x = DVector::zeros(layout.n());
    for (t, line) in spec.lines.iter().enumerate() {
        let a = spec.bus_index(&line.from).expect("validated");
        let b = spec.bus_index(&line.to).expect("validated");
        x[t] = (v[a] - v[b]) / line.resistance;
    }
    for (j, src) in layout.sources.iter().enumerate() {
        if let SourceKind::Inductive { branch_state } = src.kind {
            x[branch_state] = (u[j] - v[src.bus]) / src.resistance;
        }
    }
    for (k, &s) in layout.bus_state.iter().enumerate() {
        x[s] = v[k];
    }
    x
}

/// Bus voltages extracted from a state vector, in bus order.
pub fn bus_voltages(layout: &StateLayout, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(layout.n_buses, layout.bus_state.iter().map(|&s| x[s]))
}

/// Normalise by `V₀` and `p_ℓ0`: voltages by `V₀`, powers by `p_ℓ0`, currents
/// by `p_ℓ0/V₀`, resistances and inductances by `V₀²/p_ℓ0`, capacitances by
/// its inverse. Time stays in seconds.
pub fn per_unit(spec: &NetworkSpec) -> Result<NetworkSpec> {
    if spec.units == Units::PerUnit {
        return Err(Error::Schema("network is already in per-unit".into()));
    }
    Ok(scale_units(spec, Units::PerUnit, 1.0))
}

/// Inverse of [`per_unit`].
pub fn denormalize(spec: &NetworkSpec) -> Result<NetworkSpec> {
    if spec.units == Units::Si {
        return Err(Error::Schema("network is already in SI units".into()));
    }
    Ok(scale_units(spec, Units::Si, -1.0))
}

fn scale_units(spec: &NetworkSpec, target: Units, direction: f64) -> NetworkSpec {
    let base = spec.base;
    // direction = +1 divides by the base, -1 multiplies
    let f = |x: f64, b: f64| if direction > 0.0 { x / b } else { x * b };
    let v0 = base.voltage;
    let p0 = base.power;
    let z0 = base.impedance();
    let i0 = base.current();
    let mut out = spec.clone();
    for bus in &mut out.buses {
        bus.capacitance = f(bus.capacitance, 1.0 / z0);
        bus.shunt_resistance = bus.shunt_resistance.map(|r| f(r, z0));
        bus.source_resistance = bus.source_resistance.map(|r| f(r, z0));
        bus.source_inductance = bus.source_inductance.map(|l| f(l, z0));
        bus.cpl_power = bus.cpl_power.map(|p| f(p, p0));
        bus.voltage_bounds = bus.voltage_bounds.map(|[lo, hi]| [f(lo, v0), f(hi, v0)]);
    }
    for line in &mut out.lines {
        line.resistance = f(line.resistance, z0);
        line.inductance = f(line.inductance, z0);
    }
    out.bounds.setpoint = spec.bounds.setpoint.map(|x| f(x, v0));
    out.bounds.generation = spec.bounds.generation.map(|x| f(x, p0));
    out.bounds.current = spec.bounds.current.map(|c| c.map(|x| f(x, i0)));
    let layout = spec.layout();
    out.operating_halfwidth = match &spec.operating_halfwidth {
        HalfWidth::Uniform { current, voltage } => HalfWidth::Uniform {
            current: f(*current, i0),
            voltage: f(*voltage, v0),
        },
        HalfWidth::States(v) => HalfWidth::States(
            v.iter()
                .enumerate()
                .map(|(i, &x)| {
                    if layout.is_current(i) {
                        f(x, i0)
                    } else {
                        f(x, v0)
                    }
                })
                .collect(),
        ),
    };
    out.units = target;
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::max_eigenvalue;

    pub(crate) fn one_bus_json() -> &'static str {
        r#"{
            "name": "one-bus",
            "buses": [{
                "id": "load", "has_source": true, "has_cpl": true,
                "capacitance": 0.0005, "source_resistance": 0.5,
                "source_inductance": 0.001, "cpl_power": -300.0,
                "voltage_bounds": [1.0, 1000.0]
            }],
            "base": {"voltage": 60.0, "power": 300.0},
            "bounds": {"setpoint": [1.0, 1000.0], "generation": [-1e9, 1e9]},
            "costs": [1.0],
            "operating_halfwidth": {"current": 20.0, "voltage": 20.0}
        }"#
    }

    fn two_bus_json() -> &'static str {
        r#"{
            "buses": [
                {"id": "s", "has_source": true, "capacitance": 0.002,
                 "source_resistance": 0.2, "shunt_resistance": 50.0},
                {"id": "l", "has_cpl": true, "capacitance": 0.001, "cpl_power": -500.0}
            ],
            "lines": [{"from": "s", "to": "l", "resistance": 0.3, "inductance": 0.0007}],
            "base": {"voltage": 100.0, "power": 1000.0},
            "bounds": {"setpoint": [90.0, 110.0], "generation": [0.0, 5000.0]},
            "operating_halfwidth": {"current": 5.0, "voltage": 5.0}
        }"#
    }

    #[test]
    fn one_bus_matches_hand_matrices() {
        let spec = parse_network(one_bus_json()).unwrap();
        assert_eq!(spec.n_states(), 2);
        let m = build_dynamics(&spec);
        assert_eq!(m.a, DMatrix::from_row_slice(2, 2, &[-0.5, -1.0, 1.0, 0.0]));
        assert_eq!(m.b1, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(m.b2, DMatrix::from_row_slice(2, 1, &[1.0, 0.0]));
        assert_eq!(m.d, DVector::from_vec(vec![0.001, 0.0005]));
        assert_eq!(m.source_gain[0], 1.0);
    }

    #[test]
    fn two_bus_kcl_kvl_by_hand() {
        // states: (i_line, v_s, v_l)
        let spec = parse_network(two_bus_json()).unwrap();
        let m = build_dynamics(&spec);
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                -0.3,
                1.0,
                -1.0, //
                -1.0,
                -1.0 / 50.0 - 1.0 / 0.2,
                0.0, //
                1.0,
                0.0,
                0.0,
            ],
        );
        assert!((&m.a - expected).abs().max() < 1e-15);
        assert_eq!(m.d, DVector::from_vec(vec![0.0007, 0.002, 0.001]));
        assert_eq!(m.b2, DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.0]));
        assert_eq!(m.b1, DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]));
        assert!((m.source_gain[0] - 5.0).abs() < 1e-15);

        let y = build_conductance(&spec);
        let g = 1.0 / 0.3;
        let ys = 5.0;
        let expected_yll = DMatrix::from_row_slice(2, 2, &[g + 0.02 + ys, -g, -g, g]);
        assert!((&y.y_ll - expected_yll).abs().max() < 1e-12);
        assert_eq!(y.y_ss, DMatrix::from_row_slice(1, 1, &[ys]));
        assert_eq!(y.y_sl, DMatrix::from_row_slice(1, 2, &[-ys, 0.0]));
    }

    #[test]
    fn structural_invariants() {
        for text in [one_bus_json(), two_bus_json()] {
            let spec = parse_network(text).unwrap();
            let m = build_dynamics(&spec);
            assert!(m.d.iter().all(|&x| x > 0.0));
            let skew = m.a_skew();
            assert!((&skew + skew.transpose()).abs().max() < 1e-15);
            assert!(m.a.diagonal().iter().all(|&x| x <= 0.0));
            assert!(max_eigenvalue(&m.a) <= 1e-12);
            let c1b1 = m.c1() * &m.b1;
            assert_eq!(c1b1, DMatrix::identity(m.n_cpl(), m.n_cpl()));
            let c2b2 = m.c2() * &m.b2;
            assert_eq!(c2b2, DMatrix::identity(m.n_sources(), m.n_sources()));
        }
    }

    #[test]
    fn one_bus_power_flow_identity() {
        let spec = parse_network(one_bus_json()).unwrap();
        let y = build_conductance(&spec);
        let (u, v) = (70.0, 65.0);
        let p = y.bus_powers(&DVector::from_element(1, v), &DVector::from_element(1, u));
        assert!((p[0] - v * (v - u) / 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_cpl_equilibrium_matches_nodal_solution() {
        let mut spec = parse_network(two_bus_json()).unwrap();
        spec.buses[1].cpl_power = Some(0.0);
        let m = build_dynamics(&spec);
        let y = build_conductance(&spec);
        let u = DVector::from_element(1, 100.0);
        // nodal: Y_ll v = -Y_ls u
        let v = y.y_ll.clone().lu().solve(&(-y.y_ls() * &u)).unwrap();
        let x_nodal = steady_state_vector(&spec, &m.layout, &u, &v);
        // dynamic: A x = -B2 (u ⊙ g)
        let x_dyn = m.a.clone().lu().solve(&(-m.input(&u))).unwrap();
        let rel = (&x_nodal - &x_dyn).norm() / x_dyn.norm();
        assert!(rel < 1e-9, "rel = {rel}");
    }

    #[test]
    fn rejects_invalid_documents() {
        let empty = r#"{"buses": [], "base": {"voltage":1,"power":1},
            "bounds":{"setpoint":[0,1],"generation":[0,1]},
            "operating_halfwidth":{"current":1,"voltage":1}}"#;
        assert!(matches!(parse_network(empty), Err(Error::Schema(_))));

        let positive_cpl = one_bus_json().replace("-300.0", "300.0");
        assert!(matches!(
            parse_network(&positive_cpl),
            Err(Error::Schema(_))
        ));

        let zero_r = two_bus_json().replace("\"resistance\": 0.3", "\"resistance\": 0.0");
        assert!(matches!(parse_network(&zero_r), Err(Error::Schema(_))));

        let zero_c = one_bus_json().replace("0.0005", "0.0");
        assert!(matches!(parse_network(&zero_c), Err(Error::Schema(_))));

        let disconnected = two_bus_json().replace(
            r#""lines": [{"from": "s", "to": "l", "resistance": 0.3, "inductance": 0.0007}],"#,
            "",
        );
        assert!(matches!(
            parse_network(&disconnected),
            Err(Error::Disconnected(_))
        ));

        assert!(matches!(parse_network("{not json"), Err(Error::Schema(_))));
    }

    #[test]
    fn per_unit_scaling() {
        let mut spec = parse_network(two_bus_json()).unwrap();
        spec.base = BaseValues {
            voltage: 500.0,
            power: 100_000.0,
        };
        spec.buses[1].cpl_power = Some(-10_000.0);
        let pu = per_unit(&spec).unwrap();
        assert!((pu.buses[1].cpl_power.unwrap() + 0.1).abs() < 1e-15);
        // Z_base = 2.5 Ω
        assert!((pu.lines[0].resistance - 0.3 / 2.5).abs() < 1e-15);
        let back = denormalize(&pu).unwrap();
        assert!((back.lines[0].inductance - spec.lines[0].inductance).abs() < 1e-12 * 0.0007);
        assert!((back.buses[0].capacitance - 0.002).abs() < 1e-12 * 0.002);
        assert_eq!(back.units, Units::Si);

        let mut ident = spec.clone();
        ident.base = BaseValues {
            voltage: 1.0,
            power: 1.0,
        };
        let mut same = per_unit(&ident).unwrap();
        same.units = Units::Si;
        assert_eq!(same, ident);
    }
}
