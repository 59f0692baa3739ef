//! Steady-state operation: power flow, the cost-minimising dispatch and the
//! floor-constrained setpoint synthesis, plus the end-to-end pipeline.
//!
//! Dispatch problems are solved through the usual second-order-cone
//! relaxation of the DC power-flow equations: with `W_km` standing for the
//! product `V_k V_m` over buses and source EMF nodes, injections are linear
//! in `W` and `W_km² ≤ W_kk W_mm` is a rotated cone. The relaxed optimum is
//! mapped back through `V_k = √W_kk`, polished with Newton power flow at the
//! recovered setpoints, and re-checked against every constraint.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certify::{self, Certificate, CertifyOptions, CertifyTimings};
use crate::conic::{self, Affine, ConicProblem, SolveStatus, Tolerances};
use crate::error::{Error, Result};
use crate::netmodel::{
    build_conductance, build_dynamics, steady_state_vector, Conductance, NetworkSpec, Units,
};

/// A solved equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Source setpoints.
    pub u: Vec<f64>,
    /// Voltage of every bus, in bus order.
    pub v_bus: Vec<f64>,
    /// CPL bus voltages `C1 x^e`.
    pub v_load: Vec<f64>,
    /// Full steady state.
    pub x_e: Vec<f64>,
    /// Source output powers.
    pub p_s: Vec<f64>,
}

impl OperatingPoint {
    pub fn u_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.u.clone())
    }

    pub fn x_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.x_e.clone())
    }

    pub fn v_load_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.v_load.clone())
    }
}

fn scaled_residual(y: &Conductance, v: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> f64 {
    // current mismatch, scaled by the largest branch current scale
    let f = y.bus_currents(v, u) - p.component_div(v);
    let scale = (y.y_ll.amax() * v.amax()).max(1e-300);
    f.amax() / scale
}

/// Relative power-flow mismatch `‖p_bus(v, u) − p‖∞ / max(‖p‖∞, V²·G)`.
pub fn power_flow_residual(spec: &NetworkSpec, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let y = build_conductance(spec);
    let p = spec.bus_powers();
    let mism = y.bus_powers(v, u) - &p;
    let scale = p
        .amax()
        .max(y.y_ll.amax() * v.amax() * v.amax() * 1e-6)
        .max(1e-300);
    mism.amax() / scale
}

/// Scaled equilibrium residual `‖A x + B2(u⊙g) + B1(p ⊘ C1x)‖∞` of the
/// dynamic model.
pub fn equilibrium_residual(spec: &NetworkSpec, u: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let m = build_dynamics(spec);
    let r = m.rhs(x, u, &m.p_load);
    let scale = (m.a.amax() * x.amax()).max(1e-300);
    r.amax() / scale
}

/// Newton power flow at fixed setpoints, started at the highest setpoint so
/// that the high-voltage (stable) branch is found.
pub fn power_flow(spec: &NetworkSpec, u: &DVector<f64>) -> Result<OperatingPoint> {
    if u.len() != spec.n_sources() {
        return Err(Error::Dimension(format!(
            "{} setpoints for {} sources",
            u.len(),
            spec.n_sources()
        )));
    }
    let y = build_conductance(spec);
    let p = spec.bus_powers();
    let nb = spec.n_buses();
    let start = u.amax();
    if !(start > 0.0) {
        return Err(Error::Dimension("setpoints must be positive".into()));
    }
    let mut v = DVector::from_element(nb, start);
    let max_iter = 100;
    let mut res = scaled_residual(&y, &v, u, &p);
    for _ in 0..max_iter {
        if res <= 1e-12 {
            break;
        }
        let f = y.bus_currents(&v, u) - p.component_div(&v);
        let mut jac = y.y_ll.clone();
        for k in 0..nb {
            jac[(k, k)] += p[k] / (v[k] * v[k]);
        }
        let Some(dv) = jac.lu().solve(&(-&f)) else {
            return Err(Error::PowerFlowDivergence {
                iterations: max_iter,
                residual: res,
            });
        };
        let mut alpha = 1.0;
        loop {
            let cand = &v + &dv * alpha;
            if cand.iter().all(|&x| x > 0.0) {
                let r = scaled_residual(&y, &cand, u, &p);
                if r < res || alpha < 1e-4 {
                    v = cand;
                    res = r;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                return Err(Error::PowerFlowDivergence {
                    iterations: max_iter,
                    residual: res,
                });
            }
        }
    }
    if res > 1e-10 {
        return Err(Error::PowerFlowDivergence {
            iterations: max_iter,
            residual: res,
        });
    }
    // the high-voltage branch keeps the current Jacobian positive definite
    let mut jac = y.y_ll.clone();
    for k in 0..nb {
        jac[(k, k)] += p[k] / (v[k] * v[k]);
    }
    if crate::linalg::min_eigenvalue(&jac) <= 0.0 {
        return Err(Error::LowVoltageBranch(v.min()));
    }
    Ok(point_from(spec, &y, u, &v))
}

fn point_from(
    spec: &NetworkSpec,
    y: &Conductance,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> OperatingPoint {
    let layout = spec.layout();
    let x = steady_state_vector(spec, &layout, u, v);
    let ps = y.source_powers(v, u);
    OperatingPoint {
        u: u.iter().copied().collect(),
        v_bus: v.iter().copied().collect(),
        v_load: layout.cpl_buses.iter().map(|&k| v[k]).collect(),
        x_e: x.iter().copied().collect(),
        p_s: ps.iter().copied().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `Σ c_j p_s,j`.
    GenerationCost,
    /// `Σ u_j²` (used when a single source makes the cost meaningless).
    Setpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Relaxed optimum already satisfies the nonlinear equations.
    Exact,
    /// A Newton step at the recovered setpoints was needed.
    Refined,
    Inexact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub point: OperatingPoint,
    /// `cᵀ p_s`.
    pub objective: f64,
    pub objective_kind: Objective,
    pub relaxation: Relaxation,
    /// Nonlinear power-flow residual of the relaxed solution before polishing.
    pub relaxation_residual: f64,
    /// Floor verdict (true when no floor was imposed).
    pub verdict: bool,
    pub units: Units,
    pub voltage_scale: f64,
}

pub type SynthesisResult = DispatchResult;

/// Index bookkeeping of the `W` variables.
struct WVars {
    /// Diagonal variable per node (buses, then source EMF nodes).
    diag: Vec<usize>,
    /// Off-diagonal variable per edge `(k, m)`.
    edges: Vec<(usize, usize, usize)>,
}

struct Relaxed {
    problem: ConicProblem,
    w: WVars,
    /// `W` values are stored divided by `vref²`.
    vref: f64,
}

/// Build the SOCP relaxation. Nodes: buses `0..n_b`, source EMFs `n_b..`.
fn build_relaxation(
    spec: &NetworkSpec,
    floor: Option<&[(usize, f64)]>,
    objective: Objective,
) -> Relaxed {
    let layout = spec.layout();
    let y = build_conductance(spec);
    let nb = spec.n_buses();
    let ns = layout.n_sources();
    let vref = match spec.units {
        Units::Si => spec.base.voltage,
        Units::PerUnit => 1.0,
    };
    let v2 = vref * vref;

    let mut prob = ConicProblem::new();
    let diag: Vec<usize> = (0..nb + ns).map(|_| prob.add_scalar_var()).collect();
    let mut edges = Vec::new();
    for line in &spec.lines {
        let a = spec.bus_index(&line.from).expect("validated");
        let b = spec.bus_index(&line.to).expect("validated");
        edges.push((a, b, prob.add_scalar_var()));
    }
    for (j, src) in layout.sources.iter().enumerate() {
        edges.push((nb + j, src.bus, prob.add_scalar_var()));
    }
    let w = WVars { diag, edges };

    // full nodal admittance over buses + source nodes
    let n_all = nb + ns;
    let mut yf = DMatrix::zeros(n_all, n_all);
    yf.view_mut((0, 0), (nb, nb)).copy_from(&y.y_ll);
    yf.view_mut((0, nb), (nb, ns)).copy_from(&y.y_ls());
    yf.view_mut((nb, 0), (ns, nb)).copy_from(&y.y_sl);
    yf.view_mut((nb, nb), (ns, ns)).copy_from(&y.y_ss);

    let injection = |k: usize| -> Vec<(usize, f64)> {
        let mut c = vec![(w.diag[k], yf[(k, k)])];
        for &(a, b, idx) in &w.edges {
            if a == k {
                c.push((idx, yf[(k, b)]));
            } else if b == k {
                c.push((idx, yf[(k, a)]));
            }
        }
        c
    };

    let p = spec.bus_powers();
    for k in 0..nb {
        prob.add_equality(Affine::new(injection(k), -p[k] / v2));
    }

    let (lo, hi) = spec.voltage_bounds();
    for k in 0..nb {
        let mut lower = lo[k] * lo[k];
        if let Some(fl) = floor {
            for &(bus, f) in fl {
                if bus == k {
                    // a hair above the floor so that rounding cannot flip the verdict
                    lower = lower.max(f * f * (1.0 + 1e-9));
                }
            }
        }
        if lower > 0.0 {
            prob.add_linear(Affine::new(vec![(w.diag[k], 1.0)], -lower / v2));
        } else {
            prob.add_linear(Affine::new(vec![(w.diag[k], 1.0)], 0.0));
        }
        if hi[k].is_finite() {
            prob.add_linear(Affine::new(vec![(w.diag[k], -1.0)], hi[k] * hi[k] / v2));
        }
    }
    let [ulo, uhi] = spec.bounds.setpoint;
    let [plo, phi] = spec.bounds.generation;
    for j in 0..ns {
        let d = w.diag[nb + j];
        prob.add_linear(Affine::new(vec![(d, 1.0)], -(ulo.max(0.0)).powi(2) / v2));
        if uhi.is_finite() {
            prob.add_linear(Affine::new(vec![(d, -1.0)], uhi * uhi / v2));
        }
        let inj = injection(nb + j);
        if plo.is_finite() {
            prob.add_linear(Affine::new(inj.clone(), -plo / v2));
        }
        if phi.is_finite() {
            let neg = inj.iter().map(|&(i, c)| (i, -c)).collect();
            prob.add_linear(Affine::new(neg, phi / v2));
        }
    }
    if let Some([_, imax]) = spec.bounds.current {
        let imax = imax.abs();
        if imax.is_finite() {
            for (t, line) in spec.lines.iter().enumerate() {
                let (a, b, idx) = w.edges[t];
                let lim = (line.resistance * imax).powi(2) / v2;
                prob.add_linear(Affine::new(
                    vec![(w.diag[a], -1.0), (w.diag[b], -1.0), (idx, 2.0)],
                    lim,
                ));
            }
        }
    }
    for &(a, b, idx) in &w.edges {
        let (da, db) = (w.diag[a], w.diag[b]);
        prob.add_soc(
            Affine::new(vec![(da, 1.0), (db, 1.0)], 0.0),
            vec![
                Affine::new(vec![(idx, 2.0)], 0.0),
                Affine::new(vec![(da, 1.0), (db, -1.0)], 0.0),
            ],
        );
    }
    let cost = match objective {
        Objective::Setpoint => (0..ns).map(|j| (w.diag[nb + j], 1.0)).collect(),
        Objective::GenerationCost => {
            let c = spec.costs_vector();
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for j in 0..ns {
                for (i, v) in injection(nb + j) {
                    acc.push((i, c[j] * v));
                }
            }
            acc
        }
    };
    prob.set_cost(cost);
    Relaxed {
        problem: prob,
        w,
        vref,
    }
}

/// Bounds and floor check of a power-flow solution.
fn violation(spec: &NetworkSpec, pt: &OperatingPoint, floor: Option<&[(usize, f64)]>) -> f64 {
    let (lo, hi) = spec.voltage_bounds();
    let mut worst: f64 = 0.0;
    let rel = |x: f64, s: f64| x / s.abs().max(1e-12);
    for (k, &v) in pt.v_bus.iter().enumerate() {
        worst = worst.max(rel(lo[k] - v, lo[k].max(v)));
        if hi[k].is_finite() {
            worst = worst.max(rel(v - hi[k], hi[k]));
        }
    }
    if let Some(fl) = floor {
        for &(bus, f) in fl {
            worst = worst.max(rel(f - pt.v_bus[bus], f));
        }
    }
    let [ulo, uhi] = spec.bounds.setpoint;
    let [plo, phi] = spec.bounds.generation;
    let pscale = plo.abs().max(phi.abs()).clamp(1e-12, 1e300);
    for (j, &u) in pt.u.iter().enumerate() {
        worst = worst.max(rel(ulo - u, uhi));
        worst = worst.max(rel(u - uhi, uhi));
        worst = worst.max(rel(plo - pt.p_s[j], pscale));
        worst = worst.max(rel(pt.p_s[j] - phi, pscale));
    }
    worst
}

/// Solve a dispatch problem through the relaxation, polish and verify.
fn dispatch(
    spec: &NetworkSpec,
    floor: Option<&[(usize, f64)]>,
    objective: Objective,
    tol: &Tolerances,
) -> Result<(OperatingPoint, Relaxation, f64)> {
    let ns = spec.n_sources();
    let nb = spec.n_buses();
    let mut raised: Vec<(usize, f64)> = floor.map(|f| f.to_vec()).unwrap_or_default();
    let mut first_residual = f64::NAN;
    for attempt in 0..6 {
        let fl = floor.map(|_| raised.as_slice());
        let relaxed = build_relaxation(spec, fl, objective);
        let (rep, wv) = conic::solve_socp(&relaxed.problem, tol);
        match rep.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => {
                return Err(infeasibility(spec, floor.is_some(), objective, tol));
            }
            SolveStatus::NumericalFailure => return Err(Error::Solver(rep.message)),
        }
        let v2 = relaxed.vref * relaxed.vref;
        let u = DVector::from_fn(ns, |j, _| (wv[relaxed.w.diag[nb + j]] * v2).sqrt());
        let v = DVector::from_fn(nb, |k, _| (wv[relaxed.w.diag[k]] * v2).sqrt());
        let residual = power_flow_residual(spec, &u, &v);
        if attempt == 0 {
            first_residual = residual;
        }
        let pt = power_flow(spec, &u)?;
        let original_viol = violation(spec, &pt, floor);
        if original_viol <= 1e-9 {
            let exact = residual <= 1e-6 && attempt == 0 && spec.uniform_voltage_upper_bound();
            let status = if exact {
                Relaxation::Exact
            } else {
                Relaxation::Refined
            };
            return Ok((pt, status, first_residual));
        }
        // tighten the floors by the observed shortfall and retry
        if let Some(f0) = floor {
            for (i, &(bus, f)) in f0.iter().enumerate() {
                let short = (f - pt.v_bus[bus]).max(0.0);
                raised[i].1 = raised[i].1.max(f) + 2.0 * short + 1e-9 * f;
            }
        } else {
            break;
        }
    }
    Err(Error::Solver(
        "relaxation is inexact and tightening did not recover a feasible point".into(),
    ))
}

fn infeasibility(
    spec: &NetworkSpec,
    had_floor: bool,
    objective: Objective,
    tol: &Tolerances,
) -> Error {
    if had_floor {
        let relaxed = build_relaxation(spec, None, objective);
        let (rep, _) = conic::solve_socp(&relaxed.problem, tol);
        if rep.status == SolveStatus::Optimal {
            return Error::FloorInfeasible(
                "operating bounds alone are feasible; the stability voltage floor cannot be met"
                    .into(),
            );
        }
    }
    Error::BoundInfeasible(
        "no operating point satisfies the voltage, setpoint and generation bounds".into(),
    )
}

/// Cost-minimising dispatch without the stability floor.
pub fn solve_opf(spec: &NetworkSpec, tol: &Tolerances) -> Result<DispatchResult> {
    let (pt, relaxation, residual) = dispatch(spec, None, Objective::GenerationCost, tol)?;
    Ok(result(
        spec,
        pt,
        Objective::GenerationCost,
        relaxation,
        residual,
        true,
    ))
}

fn result(
    spec: &NetworkSpec,
    point: OperatingPoint,
    kind: Objective,
    relaxation: Relaxation,
    residual: f64,
    verdict: bool,
) -> DispatchResult {
    let c = spec.costs_vector();
    let objective = point.p_s.iter().zip(c.iter()).map(|(p, c)| p * c).sum();
    DispatchResult {
        point,
        objective,
        objective_kind: kind,
        relaxation,
        relaxation_residual: residual,
        verdict,
        units: spec.units,
        voltage_scale: spec.voltage_scale(),
    }
}

/// Floor-constrained synthesis. `spec` must be in the certificate's units.
/// With a single source the objective is the setpoint itself.
pub fn solve_synthesis(
    spec: &NetworkSpec,
    cert: &Certificate,
    tol: &Tolerances,
) -> Result<SynthesisResult> {
    if spec.units != cert.units {
        return Err(Error::Dimension(
            "network and certificate are expressed in different units".into(),
        ));
    }
    let layout = spec.layout();
    if cert.floor.len() != layout.n_cpl() {
        return Err(Error::Dimension(format!(
            "certificate has {} floors, network has {} CPLs",
            cert.floor.len(),
            layout.n_cpl()
        )));
    }
    let floor: Vec<(usize, f64)> = layout
        .cpl_buses
        .iter()
        .zip(&cert.floor)
        .map(|(&k, &f)| (k, f))
        .collect();
    let kind = if spec.n_sources() == 1 {
        Objective::Setpoint
    } else {
        Objective::GenerationCost
    };
    let (pt, relaxation, residual) = dispatch(spec, Some(&floor), kind, tol)?;
    let verdict = certify::certify_point(cert, &pt.v_load_vector());
    if !verdict {
        return Err(Error::Solver(
            "synthesised point does not meet the voltage floor".into(),
        ));
    }
    Ok(result(spec, pt, kind, relaxation, residual, verdict))
}

/// Wall-clock seconds of the four pipeline steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTimings {
    pub line_search: f64,
    pub line_search_steps: usize,
    pub support: f64,
    pub floor: f64,
    pub synthesis: f64,
}

impl PipelineTimings {
    fn from(c: &CertifyTimings, synthesis: f64) -> Self {
        Self {
            line_search: c.line_search,
            line_search_steps: c.probes.len(),
            support: c.support,
            floor: c.floor,
            synthesis,
        }
    }
}

/// Certificate → floor → synthesis on the network's working units.
pub fn run_algorithm1(
    spec: &NetworkSpec,
    opts: &CertifyOptions,
) -> Result<(Certificate, SynthesisResult, PipelineTimings)> {
    let (cert, ct) = certify::certify_network(spec, opts)?;
    let working = spec.working()?;
    let t = Instant::now();
    let synth = solve_synthesis(&working, &cert, &opts.tol)?;
    let timings = PipelineTimings::from(&ct, t.elapsed().as_secs_f64());
    Ok((cert, synth, timings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::parse_network;

    fn one_bus(p: f64) -> NetworkSpec {
        let text = format!(
            r#"{{
            "buses": [{{"id": "b", "has_source": true, "has_cpl": true,
                "capacitance": 0.0005, "source_resistance": 0.5,
                "source_inductance": 0.001, "cpl_power": {p},
                "voltage_bounds": [1.0, 1000.0]}}],
            "base": {{"voltage": 60.0, "power": 300.0}},
            "bounds": {{"setpoint": [1.0, 1000.0], "generation": [-1e9, 1e9]}},
            "operating_halfwidth": {{"current": 20.0, "voltage": 20.0}}}}"#
        );
        parse_network(&text).unwrap()
    }

    #[test]
    fn one_bus_power_flow_is_the_high_root() {
        let spec = one_bus(-300.0);
        let u = 64.8;
        let pt = power_flow(&spec, &DVector::from_element(1, u)).unwrap();
        // v² − u v + R|p| = 0
        let v = 0.5 * (u + (u * u - 4.0 * 0.5 * 300.0).sqrt());
        assert!((pt.v_bus[0] - v).abs() < 1e-9);
        assert!((pt.x_e[0] - 300.0 / v).abs() < 1e-9);
        assert!(equilibrium_residual(&spec, &pt.u_vector(), &pt.x_vector()) < 1e-12);
    }

    #[test]
    fn zero_load_power_flow_is_linear() {
        let spec = one_bus(0.0);
        let pt = power_flow(&spec, &DVector::from_element(1, 48.0)).unwrap();
        assert!((pt.v_bus[0] - 48.0).abs() < 1e-12);
        assert!(pt.p_s[0].abs() < 1e-9);
    }

    #[test]
    fn nose_point_is_reported() {
        // u² < 4 R |p| has no real equilibrium
        let spec = one_bus(-300.0);
        assert!(power_flow(&spec, &DVector::from_element(1, 20.0)).is_err());
    }

    #[test]
    fn one_bus_pipeline() {
        let spec = one_bus(-300.0);
        let (cert, synth, _) = run_algorithm1(&spec, &CertifyOptions::default()).unwrap();
        assert!((cert.floor[0] - 62.3).abs() < 0.5);
        assert!(
            (synth.point.u[0] - 64.8).abs() < 0.02 * 64.8,
            "{:?}",
            synth.point.u
        );
        assert_eq!(synth.relaxation, Relaxation::Exact);
        assert!(synth.verdict);
    }

    #[test]
    fn floor_infeasibility_is_distinguished() {
        let mut spec = one_bus(-300.0);
        spec.bounds.setpoint = [1.0, 63.0];
        let (cert, _) = certify::certify_network(&spec, &CertifyOptions::default()).unwrap();
        let err = solve_synthesis(&spec, &cert, &Tolerances::default()).unwrap_err();
        assert!(matches!(err, Error::FloorInfeasible(_)), "{err}");
        spec.bounds.setpoint = [1.0, 20.0];
        let err = solve_synthesis(&spec, &cert, &Tolerances::default()).unwrap_err();
        assert!(matches!(err, Error::BoundInfeasible(_)), "{err}");
    }
}
