//! Transient-stability certificate: a common quadratic Lyapunov function for
//! the shifted dynamics, an ellipsoid covering the operating box, and the
//! resulting per-load steady-state voltage floor.
//!
//! Around an equilibrium `x^e` the residual `Δx = x − x^e` obeys
//!
//! ```text
//! D Δẋ = A Δx + B1 [h] C1 Δx,   h = −p ⊘ ((v^e + Δv) ⊙ v^e)
//! ```
//!
//! with `v^e = C1 x^e`. Treating `h ∈ [0, β h⁰]` as a bounded parameter, the
//! S-procedure LMI
//!
//! ```text
//! ⎡ P̂A + AᵀP̂ᵀ + P    P̂B1 + ½βτ C1ᵀ[h⁰] ⎤
//! ⎣        ·               −τ I         ⎦ ⪯ 0,   P̂ = P D⁻¹
//! ```
//!
//! makes `V = ΔxᵀPΔx` decrease for every admissible `h`. The sub-level set
//! `{ΔxᵀPΔx ≤ 1}` is sized to cover the box through `P ⪯ diag(γ)`,
//! `Σ γ_i Δx̄_i² ≤ 1`, and the LMI is solved in box-normalised coordinates
//! `z = Δx ⊘ Δx̄` so that all entries are of order one.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, Affine, ConicProblem, PsdBlock, SolveStatus, Tolerances};
use crate::error::{Error, Result};
use crate::netmodel::{NetworkSpec, SystemMatrices, Units};

/// Residual dynamics around an equilibrium.
#[derive(Debug, Clone)]
pub struct ShiftedSystem<'a> {
    pub matrices: &'a SystemMatrices,
    pub x_e: DVector<f64>,
    pub p: DVector<f64>,
    pub v_e: DVector<f64>,
}

impl ShiftedSystem<'_> {
    /// The LPV parameter `h(Δx)`.
    pub fn h(&self, dx: &DVector<f64>) -> DVector<f64> {
        let dv = self.matrices.load_voltages(dx);
        DVector::from_fn(self.p.len(), |j, _| {
            -self.p[j] / ((self.v_e[j] + dv[j]) * self.v_e[j])
        })
    }

    /// `Δẋ = D⁻¹(A Δx + B1 [h] C1 Δx)`.
    pub fn field(&self, dx: &DVector<f64>) -> DVector<f64> {
        let m = self.matrices;
        let w = self.h(dx).component_mul(&m.load_voltages(dx));
        (&m.a * dx + &m.b1 * w).component_div(&m.d)
    }
}

pub fn shift_coordinates<'a>(
    matrices: &'a SystemMatrices,
    x_e: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<ShiftedSystem<'a>> {
    if x_e.len() != matrices.n() || p.len() != matrices.n_cpl() {
        return Err(Error::Dimension(format!(
            "x^e has {} entries and p has {}, expected {} and {}",
            x_e.len(),
            p.len(),
            matrices.n(),
            matrices.n_cpl()
        )));
    }
    let v_e = matrices.load_voltages(x_e);
    if let Some(j) = v_e.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NonPositiveVoltage {
            bus: matrices.layout.cpl_buses[j],
            voltage: v_e[j],
        });
    }
    Ok(ShiftedSystem {
        matrices,
        x_e: x_e.clone(),
        p: p.clone(),
        v_e,
    })
}

/// `D⁻¹(A + B1 [h] C1)`.
pub fn lpv_matrix(m: &SystemMatrices, h: &DVector<f64>) -> DMatrix<f64> {
    let a = &m.a + &m.b1 * DMatrix::from_diagonal(h) * m.c1();
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] / m.d[i])
}

/// Dense LMI matrix in original coordinates (should be ⪯ 0).
pub fn lmi_matrix(
    m: &SystemMatrices,
    p: &DMatrix<f64>,
    tau: f64,
    beta: f64,
    h0: &DVector<f64>,
) -> DMatrix<f64> {
    let n = m.n();
    let nl = m.n_cpl();
    let ph = p * m.d_inv();
    let tl = &ph * &m.a + m.a.transpose() * ph.transpose() + p;
    let tr = &ph * &m.b1 + m.c1().transpose() * DMatrix::from_diagonal(h0) * (0.5 * beta * tau);
    let mut out = DMatrix::zeros(n + nl, n + nl);
    out.view_mut((0, 0), (n, n)).copy_from(&tl);
    out.view_mut((0, n), (n, nl)).copy_from(&tr);
    out.view_mut((n, 0), (nl, n)).copy_from(&tr.transpose());
    for j in 0..nl {
        out[(n + j, n + j)] = -tau;
    }
    out
}

/// Largest eigenvalue of `P̂Â(h) + Â(h)ᵀP̂ᵀ + P` for a given `h`.
pub fn lyapunov_margin(m: &SystemMatrices, p: &DMatrix<f64>, h: &DVector<f64>) -> f64 {
    let ph = p * m.d_inv();
    let a = &m.a + &m.b1 * DMatrix::from_diagonal(h) * m.c1();
    let q = &ph * &a + a.transpose() * ph.transpose() + p;
    crate::linalg::max_eigenvalue(&q)
}

/// Box-normalised problem data: `Q = S⁻¹D⁻¹AS`, `R = S⁻¹D⁻¹B1`, `C = C1 S`.
struct Normalised {
    n: usize,
    nl: usize,
    /// `−κ [Q + ½I, R]`, `n × (n + n_ℓ)`.
    k: DMatrix<f64>,
    /// `[I, 0]`.
    j: DMatrix<f64>,
    /// `C1 S` columns, used by the τ term.
    c: DMatrix<f64>,
    kappa: f64,
}

impl Normalised {
    fn new(m: &SystemMatrices, halfwidth: &DVector<f64>) -> Self {
        let n = m.n();
        let nl = m.n_cpl();
        let q = DMatrix::from_fn(n, n, |i, j| {
            m.a[(i, j)] * halfwidth[j] / (m.d[i] * halfwidth[i])
        });
        let r = DMatrix::from_fn(n, nl, |i, j| m.b1[(i, j)] / (m.d[i] * halfwidth[i]));
        let c = DMatrix::from_fn(nl, n, |i, j| m.b1[(j, i)] * halfwidth[j]);
        let mut k = DMatrix::zeros(n, n + nl);
        k.view_mut((0, 0), (n, n))
            .copy_from(&(q + DMatrix::identity(n, n) * 0.5));
        k.view_mut((0, n), (n, nl)).copy_from(&r);
        let kappa = 1.0 / crate::linalg::max_abs(&k).max(1e-300);
        let mut j = DMatrix::zeros(n, n + nl);
        for i in 0..n {
            j[(i, i)] = 1.0;
        }
        Self {
            n,
            nl,
            k: -k * kappa,
            j,
            c,
            kappa,
        }
    }

    /// `κ·(−LMI)` as a PSD block in `(P_z, τ)`.
    fn block(&self, p: usize, tau: usize, beta: f64, h0: &DVector<f64>) -> PsdBlock {
        let (n, nl) = (self.n, self.nl);
        let mut ft = DMatrix::zeros(n + nl, n + nl);
        for jj in 0..nl {
            for i in 0..n {
                let v = -0.5 * beta * self.c[(jj, i)] * h0[jj] * self.kappa;
                ft[(i, n + jj)] = v;
                ft[(n + jj, i)] = v;
            }
            ft[(n + jj, n + jj)] = self.kappa;
        }
        PsdBlock::new(n + nl)
            .with_term(p, self.j.clone(), self.k.clone())
            .with_scalar(tau, ft)
    }
}

/// A built stability LMI and the variable handles needed to read it back.
pub struct StabilityLmi {
    pub problem: ConicProblem,
    p_var: usize,
    tau: usize,
    gamma: Vec<usize>,
    halfwidth: DVector<f64>,
}

impl StabilityLmi {
    /// `(P, τ, γ)` in original coordinates.
    pub fn extract(&self, y: &DVector<f64>) -> (DMatrix<f64>, f64, DVector<f64>) {
        let pz = self.problem.matrix_value(y, self.p_var);
        let s = &self.halfwidth;
        let p = DMatrix::from_fn(pz.nrows(), pz.ncols(), |i, j| pz[(i, j)] / (s[i] * s[j]));
        let gamma = DVector::from_fn(self.gamma.len(), |i, _| y[self.gamma[i]] / (s[i] * s[i]));
        (p, y[self.tau], gamma)
    }
}

fn check_lmi_inputs(
    m: &SystemMatrices,
    beta: f64,
    h0: &DVector<f64>,
    dx: &DVector<f64>,
) -> Result<()> {
    if h0.len() != m.n_cpl() || dx.len() != m.n() {
        return Err(Error::Dimension(format!(
            "h⁰ has {} entries (expected {}), Δx̄ has {} (expected {})",
            h0.len(),
            m.n_cpl(),
            dx.len(),
            m.n()
        )));
    }
    if !(beta > 0.0) || h0.iter().any(|&h| !(h > 0.0)) || dx.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Dimension(
            "β, h⁰ and Δx̄ must be strictly positive".into(),
        ));
    }
    Ok(())
}

/// Feasibility form: find `P ⪰ I` (normalised coordinates) and `τ` with the
/// stability LMI satisfied.
pub fn assemble_stability_lmi(
    m: &SystemMatrices,
    beta: f64,
    h0: &DVector<f64>,
    halfwidth: &DVector<f64>,
) -> Result<StabilityLmi> {
    check_lmi_inputs(m, beta, h0, halfwidth)?;
    let norm = Normalised::new(m, halfwidth);
    let n = m.n();
    let mut problem = ConicProblem::new();
    let p = problem.add_matrix_var(n);
    let tau = problem.add_scalar_var();
    problem.add_psd(norm.block(p, tau, beta, h0));
    problem.add_psd(
        PsdBlock::new(n)
            .with_matrix(p, n, 1.0)
            .with_constant(-DMatrix::identity(n, n)),
    );
    Ok(StabilityLmi {
        problem,
        p_var: p,
        tau,
        gamma: Vec::new(),
        halfwidth: halfwidth.clone(),
    })
}

/// Co-design form at fixed β: maximise `log det P` subject to the stability
/// LMI, `P ⪯ diag(γ)` and `Σ γ_i Δx̄_i² ≤ 1`.
pub fn assemble_codesign(
    m: &SystemMatrices,
    beta: f64,
    h0: &DVector<f64>,
    halfwidth: &DVector<f64>,
) -> Result<StabilityLmi> {
    check_lmi_inputs(m, beta, h0, halfwidth)?;
    let norm = Normalised::new(m, halfwidth);
    let n = m.n();
    let mut problem = ConicProblem::new();
    let p = problem.add_matrix_var(n);
    let tau = problem.add_scalar_var();
    let gamma: Vec<usize> = (0..n).map(|_| problem.add_scalar_var()).collect();
    problem.add_psd(norm.block(p, tau, beta, h0));
    let mut cover = PsdBlock::new(n).with_matrix(p, n, -1.0);
    for (i, &g) in gamma.iter().enumerate() {
        let mut e = DMatrix::zeros(n, n);
        e[(i, i)] = 1.0;
        cover = cover.with_scalar(g, e);
    }
    problem.add_psd(cover);
    // in normalised coordinates Δx̄ = 1
    problem.add_linear(Affine::new(gamma.iter().map(|&g| (g, -1.0)).collect(), 1.0));
    problem.maximize_logdet(p);
    Ok(StabilityLmi {
        problem,
        p_var: p,
        tau,
        gamma,
        halfwidth: halfwidth.clone(),
    })
}

/// β line-search schedule: geometric growth from `start` by `factor` up to
/// `cap`, then bisection to `rel_tol`. If `start` is infeasible the search
/// walks downwards by the same factor until `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub start: f64,
    pub factor: f64,
    pub cap: f64,
    pub floor: f64,
    pub rel_tol: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            factor: 1.2,
            cap: 1e6,
            floor: 1e-9,
            rel_tol: 1e-3,
        }
    }
}

/// One feasibility probe of the line search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub beta: f64,
    pub feasible: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GevpResult {
    pub beta: f64,
    pub p: DMatrix<f64>,
    pub tau: f64,
    /// The cap was reached without losing feasibility.
    pub capped: bool,
    pub probes: Vec<Probe>,
}

/// `(P, τ)` of a feasible probe.
type ProbeSolution = (DMatrix<f64>, f64);

fn probe(
    m: &SystemMatrices,
    beta: f64,
    h0: &DVector<f64>,
    halfwidth: &DVector<f64>,
    tol: &Tolerances,
) -> Result<(Option<ProbeSolution>, Probe)> {
    let start = Instant::now();
    let lmi = assemble_stability_lmi(m, beta, h0, halfwidth)?;
    let (rep, y) = conic::solve_lmi(&lmi.problem, tol);
    let seconds = start.elapsed().as_secs_f64();
    let out = match rep.status {
        SolveStatus::Optimal => {
            let (p, tau, _) = lmi.extract(&y);
            Some((p, tau))
        }
        SolveStatus::Infeasible => None,
        SolveStatus::NumericalFailure => {
            // treat as infeasible for the purposes of the search; the caller
            // only ever keeps verified feasible points
            None
        }
    };
    Ok((
        out.clone(),
        Probe {
            beta,
            feasible: out.is_some(),
            seconds,
        },
    ))
}

/// Largest β (on the schedule's grid) for which the stability LMI is feasible.
pub fn gevp_bisection(
    m: &SystemMatrices,
    h0: &DVector<f64>,
    halfwidth: &DVector<f64>,
    schedule: &Schedule,
    tol: &Tolerances,
) -> Result<GevpResult> {
    let mut probes = Vec::new();
    let run = |beta: f64, probes: &mut Vec<Probe>| -> Result<Option<(DMatrix<f64>, f64)>> {
        let (r, pr) = probe(m, beta, h0, halfwidth, tol)?;
        probes.push(pr);
        Ok(r)
    };

    let mut beta = schedule.start;
    let (mut lo, mut best, mut hi);
    match run(beta, &mut probes)? {
        Some(sol) => {
            lo = beta;
            best = sol;
            loop {
                let next = (beta * schedule.factor).min(schedule.cap);
                if next <= beta {
                    return Ok(GevpResult {
                        beta: lo,
                        p: best.0,
                        tau: best.1,
                        capped: true,
                        probes,
                    });
                }
                match run(next, &mut probes)? {
                    Some(sol) => {
                        lo = next;
                        best = sol;
                        beta = next;
                    }
                    None => {
                        hi = next;
                        break;
                    }
                }
            }
        }
        None => {
            hi = beta;
            loop {
                let next = beta / schedule.factor;
                if next < schedule.floor {
                    return Err(Error::CertificationInfeasible(format!(
                        "stability LMI infeasible for every β down to {:e}",
                        schedule.floor
                    )));
                }
                if let Some(sol) = run(next, &mut probes)? {
                    lo = next;
                    best = sol;
                    break;
                }
                hi = next;
                beta = next;
            }
        }
    }
    while (hi - lo) / lo > schedule.rel_tol {
        let mid = 0.5 * (lo + hi);
        match run(mid, &mut probes)? {
            Some(sol) => {
                lo = mid;
                best = sol;
            }
            None => hi = mid,
        }
    }
    Ok(GevpResult {
        beta: lo,
        p: best.0,
        tau: best.1,
        capped: false,
        probes,
    })
}

/// Ellipsoid `{ΔxᵀPΔx ≤ 1}` and its covering multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct SublevelSet {
    pub p: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub tau: f64,
    pub beta: f64,
}

/// Line search on β followed by the max-log-det co-design at the selected β.
pub fn codesign_linesearch(
    m: &SystemMatrices,
    halfwidth: &DVector<f64>,
    h0: &DVector<f64>,
    schedule: &Schedule,
    tol: &Tolerances,
) -> Result<(SublevelSet, GevpResult)> {
    let gevp = gevp_bisection(m, h0, halfwidth, schedule, tol)?;
    let mut beta = gevp.beta;
    let mut last = String::new();
    // the bisection's feasible end can sit within solver noise of the
    // boundary; back off slightly if the co-design cannot be certified there
    for _ in 0..8 {
        let lmi = assemble_codesign(m, beta, h0, halfwidth)?;
        let (rep, y) = conic::solve_maxlogdet(&lmi.problem, tol);
        if rep.status == SolveStatus::Optimal {
            let (p, tau, gamma) = lmi.extract(&y);
            let set = SublevelSet {
                p,
                gamma,
                tau,
                beta,
            };
            verify_sublevel(&set, halfwidth, tol.psd)?;
            return Ok((set, gevp));
        }
        last = rep.message;
        beta *= 1.0 - schedule.rel_tol;
    }
    Err(Error::Solver(format!(
        "co-design failed near β = {:.6e}: {last}",
        gevp.beta
    )))
}

fn verify_sublevel(set: &SublevelSet, halfwidth: &DVector<f64>, tol: f64) -> Result<()> {
    let lmin = crate::linalg::min_eigenvalue(&set.p);
    if !(lmin > 0.0) {
        return Err(Error::Solver(format!(
            "P is not positive definite (λmin = {lmin:e})"
        )));
    }
    let slack = DMatrix::from_diagonal(&set.gamma) - &set.p;
    let scale = set.gamma.amax();
    if crate::linalg::min_eigenvalue(&slack) < -tol * scale {
        return Err(Error::Solver("P ⪯ diag(γ) violated".into()));
    }
    // one vertex suffices: the ellipsoid and the box are both symmetric
    let vertex: f64 = set
        .gamma
        .iter()
        .zip(halfwidth.iter())
        .map(|(g, d)| g * d * d)
        .sum();
    if vertex > 1.0 + 1e-7 {
        return Err(Error::Solver(format!("Σγ Δx̄² = {vertex} exceeds 1")));
    }
    Ok(())
}

/// `max_v vᵀPv` over the vertices of the box, by enumeration (n ≤ 20).
pub fn set_covering(p: &DMatrix<f64>, halfwidth: &DVector<f64>) -> Result<f64> {
    let n = halfwidth.len();
    if p.shape() != (n, n) {
        return Err(Error::Dimension("P and Δx̄ sizes differ".into()));
    }
    if n > 20 {
        return Err(Error::Dimension(format!(
            "vertex enumeration capped at n = 20 (got {n}); use the diagonal-γ covering instead"
        )));
    }
    let mut best = f64::NEG_INFINITY;
    let mut v = DVector::zeros(n);
    // by symmetry only half the vertices are needed: fix the last sign
    let count = if n == 0 { 1u64 } else { 1u64 << (n - 1) };
    for mask in 0..count {
        for i in 0..n {
            let neg = i + 1 < n && (mask >> i) & 1 == 1;
            v[i] = if neg { -halfwidth[i] } else { halfwidth[i] };
        }
        best = best.max(v.dot(&(p * &v)));
    }
    Ok(best)
}

/// `inf_{ΔxᵀPΔx ≤ 1} C1 Δx`, row by row: `−√(c_k P⁻¹ c_kᵀ)`.
pub fn support_inf(p: &DMatrix<f64>, c1: &DMatrix<f64>) -> Result<DVector<f64>> {
    let ch = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("P is not positive definite".into()))?;
    let mut out = DVector::zeros(c1.nrows());
    for k in 0..c1.nrows() {
        let c = c1.row(k).transpose();
        let x = ch.solve(&c);
        out[k] = -c.dot(&x).max(0.0).sqrt();
    }
    Ok(out)
}

/// Positive root of `v (v + Δx^C_inf) = −p / (β h⁰)`.
pub fn voltage_floor(
    delta_inf: &DVector<f64>,
    p: &DVector<f64>,
    beta: f64,
    h0: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(delta_inf.len(), |k, _| {
        let d = delta_inf[k];
        0.5 * (-d + (d * d - 4.0 * p[k] / (beta * h0[k])).sqrt())
    })
}

/// Worst-case `h` over the ellipsoid for load voltages `v`.
pub fn sup_h(v: &DVector<f64>, delta_inf: &DVector<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
    for k in 0..v.len() {
        let margin = v[k] + delta_inf[k];
        if !(margin > 0.0) {
            return Err(Error::BoundaryViolation { index: k, margin });
        }
    }
    Ok(DVector::from_fn(v.len(), |k, _| {
        -p[k] / ((v[k] + delta_inf[k]) * v[k])
    }))
}

/// `h⁰ = −p ⊘ v_min²` with `v_min` the lower voltage bound minus the voltage
/// half-width, floored at 10% of the nominal voltage. Loads with zero power
/// get a tiny positive value so that `h⁰ > 0`.
pub fn default_h0(spec: &NetworkSpec) -> DVector<f64> {
    let layout = spec.layout();
    let dx = spec.halfwidth_vector();
    let (lo, _) = spec.voltage_bounds();
    let nominal = match spec.units {
        Units::Si => spec.base.voltage,
        Units::PerUnit => 1.0,
    };
    let p_scale = match spec.units {
        Units::Si => spec.base.power,
        Units::PerUnit => 1.0,
    };
    DVector::from_iterator(
        layout.n_cpl(),
        layout.cpl_buses.iter().map(|&k| {
            let vmin = (lo[k] - dx[layout.bus_state[k]]).max(0.1 * nominal);
            let p = -spec.buses[k].cpl_power.unwrap_or(0.0);
            p.max(1e-9 * p_scale) / (vmin * vmin)
        }),
    )
}

/// Everything needed to certify operating points of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Content hash of the network description this certificate belongs to.
    pub network_fingerprint: String,
    /// Units of all numeric fields below.
    pub units: Units,
    /// Factor converting voltages in `units` to volts.
    pub voltage_scale: f64,
    /// Lyapunov matrix, row-major.
    pub p: Vec<Vec<f64>>,
    pub beta: f64,
    pub beta_capped: bool,
    pub h0: Vec<f64>,
    pub tau: f64,
    pub gamma: Vec<f64>,
    pub halfwidth: Vec<f64>,
    pub cpl_power: Vec<f64>,
    /// Bus ids of the CPLs, in floor order.
    pub cpl_buses: Vec<String>,
    pub delta_inf: Vec<f64>,
    /// Steady-state voltage floor per CPL bus.
    pub floor: Vec<f64>,
}

impl Certificate {
    pub fn p_matrix(&self) -> DMatrix<f64> {
        let n = self.p.len();
        DMatrix::from_fn(n, n, |i, j| self.p[i][j])
    }

    pub fn floor_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.floor.clone())
    }

    pub fn h0_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.h0.clone())
    }

    pub fn delta_inf_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.delta_inf.clone())
    }

    pub fn floor_volts(&self) -> Vec<f64> {
        self.floor.iter().map(|f| f * self.voltage_scale).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("certificate: {e}")))
    }
}

/// Floor test: `C1 x^e ≥ x^{Ce}_−` elementwise.
pub fn certify_point(cert: &Certificate, v_load: &DVector<f64>) -> bool {
    v_load.len() == cert.floor.len() && v_load.iter().zip(&cert.floor).all(|(v, f)| v >= f)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CertifyOptions {
    pub schedule: Schedule,
    pub tol: Tolerances,
}

/// Wall-clock seconds of the certification steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyTimings {
    pub line_search: f64,
    pub probes: Vec<Probe>,
    pub support: f64,
    pub floor: f64,
}

/// Line search, support infimum and voltage floor for a network, working in
/// the units selected by its `per_unit` flag.
pub fn certify_network(
    spec: &NetworkSpec,
    opts: &CertifyOptions,
) -> Result<(Certificate, CertifyTimings)> {
    let working = spec.working()?;
    let m = crate::netmodel::build_dynamics(&working);
    let h0 = default_h0(&working);
    certify_with(spec, &working, &m, &h0, opts)
}

/// As [`certify_network`] with an explicit `h⁰`.
pub fn certify_with(
    spec: &NetworkSpec,
    working: &NetworkSpec,
    m: &SystemMatrices,
    h0: &DVector<f64>,
    opts: &CertifyOptions,
) -> Result<(Certificate, CertifyTimings)> {
    let halfwidth = working.halfwidth_vector();
    let t0 = Instant::now();
    let (set, gevp) = codesign_linesearch(m, &halfwidth, h0, &opts.schedule, &opts.tol)?;
    let line_search = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let delta_inf = support_inf(&set.p, &m.c1())?;
    let support = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let floor = voltage_floor(&delta_inf, &m.p_load, set.beta, h0);
    let floor_t = t2.elapsed().as_secs_f64();

    let layout = &m.layout;
    let cert = Certificate {
        network_fingerprint: spec.fingerprint(),
        units: working.units,
        voltage_scale: working.voltage_scale(),
        p: (0..set.p.nrows())
            .map(|i| set.p.row(i).iter().copied().collect())
            .collect(),
        beta: set.beta,
        beta_capped: gevp.capped,
        h0: h0.iter().copied().collect(),
        tau: set.tau,
        gamma: set.gamma.iter().copied().collect(),
        halfwidth: halfwidth.iter().copied().collect(),
        cpl_power: m.p_load.iter().copied().collect(),
        cpl_buses: layout
            .cpl_buses
            .iter()
            .map(|&k| working.buses[k].id.clone())
            .collect(),
        delta_inf: delta_inf.iter().copied().collect(),
        floor: floor.iter().copied().collect(),
    };
    Ok((
        cert,
        CertifyTimings {
            line_search,
            probes: gevp.probes,
            support,
            floor: floor_t,
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::netmodel::{build_dynamics, parse_network};

    fn one_bus() -> SystemMatrices {
        let spec = parse_network(
            r#"{
            "buses": [{"id": "b", "has_source": true, "has_cpl": true,
                "capacitance": 0.0005, "source_resistance": 0.5,
                "source_inductance": 0.001, "cpl_power": -300.0}],
            "base": {"voltage": 60.0, "power": 300.0},
            "bounds": {"setpoint": [0.0, 1000.0], "generation": [-1e9, 1e9]},
            "operating_halfwidth": {"current": 20.0, "voltage": 20.0}}"#,
        )
        .unwrap();
        build_dynamics(&spec)
    }

    #[test]
    fn shifted_h_matches_hand_arithmetic() {
        let m = one_bus();
        let x_e = DVector::from_vec(vec![6.0, 60.0]);
        let p = DVector::from_element(1, -300.0);
        let s = shift_coordinates(&m, &x_e, &p).unwrap();
        let h = s.h(&DVector::from_vec(vec![0.0, -10.0]));
        assert!((h[0] - 0.1).abs() < 1e-15);
        let zero = DVector::zeros(2);
        assert!((s.h(&zero)[0] - 300.0 / 3600.0).abs() < 1e-15);
    }

    #[test]
    fn shifted_field_matches_full_model() {
        let m = one_bus();
        // equilibrium for u: i = -p/v, u = v + R i
        let v = 62.0;
        let i = 300.0 / v;
        let u = DVector::from_element(1, v + 0.5 * i);
        let x_e = DVector::from_vec(vec![i, v]);
        let p = DVector::from_element(1, -300.0);
        let s = shift_coordinates(&m, &x_e, &p).unwrap();
        for dx in [[3.0, -7.0], [-12.0, 15.0], [0.0, 0.0]] {
            let dx = DVector::from_row_slice(&dx);
            let full = m.field(&(&x_e + &dx), &u, &p);
            let shifted = s.field(&dx);
            assert!((full - shifted).amax() < 1e-9);
        }
    }

    #[test]
    fn rejects_nonpositive_equilibrium_voltage() {
        let m = one_bus();
        let r = shift_coordinates(
            &m,
            &DVector::from_vec(vec![1.0, 0.0]),
            &DVector::from_element(1, -1.0),
        );
        assert!(matches!(r, Err(Error::NonPositiveVoltage { .. })));
    }

    #[test]
    fn lmi_block_dimensions() {
        let m = one_bus();
        let dx = DVector::from_vec(vec![20.0, 20.0]);
        let lmi = assemble_stability_lmi(&m, 1.0, &DVector::from_element(1, 0.1), &dx).unwrap();
        assert_eq!(lmi.problem.psd[0].size, 3);
        let mat = lmi_matrix(
            &m,
            &DMatrix::identity(2, 2),
            1.0,
            1.0,
            &DVector::from_element(1, 0.1),
        );
        assert_eq!(mat.shape(), (3, 3));
    }

    #[test]
    fn linear_limit_is_feasible() {
        // β h⁰ → 0: only P̂A + AᵀP̂ᵀ + P ⪯ 0 remains
        let m = one_bus();
        let dx = DVector::from_vec(vec![20.0, 20.0]);
        let lmi = assemble_stability_lmi(&m, 1e-9, &DVector::from_element(1, 1.0), &dx).unwrap();
        let (rep, y) = conic::solve_lmi(&lmi.problem, &Tolerances::default());
        assert_eq!(rep.status, SolveStatus::Optimal);
        let (p, tau, _) = lmi.extract(&y);
        let mat = lmi_matrix(&m, &p, tau, 1e-9, &DVector::from_element(1, 1.0));
        assert!(crate::linalg::max_eigenvalue(&mat) < 0.0);
    }

    #[test]
    fn closed_forms() {
        let eye = DMatrix::identity(2, 2);
        let c1 = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!((support_inf(&eye, &c1).unwrap()[0] + 1.0).abs() < 1e-15);
        let a = 3.0;
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0 / (a * a)]));
        assert!((support_inf(&p, &c1).unwrap()[0] + a).abs() < 1e-12);

        let dx = DVector::from_vec(vec![1.0, 1.0]);
        assert!((set_covering(&eye, &dx).unwrap() - 2.0).abs() < 1e-15);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        assert!((set_covering(&p, &dx).unwrap() - 5.0).abs() < 1e-15);

        let h0 = DVector::from_element(1, 2.0);
        let d = DVector::from_element(1, -3.0);
        let f = voltage_floor(&d, &DVector::zeros(1), 0.5, &h0);
        assert!((f[0] - 3.0).abs() < 1e-15);
        let f = voltage_floor(
            &DVector::zeros(1),
            &DVector::from_element(1, -4.0),
            0.5,
            &h0,
        );
        assert!((f[0] - 2.0).abs() < 1e-15);

        // binding at the floor
        let p = DVector::from_element(1, -7.0);
        let f = voltage_floor(&d, &p, 0.5, &h0);
        let s = sup_h(&f, &d, &p).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        let far = sup_h(&DVector::from_element(1, 1e9), &d, &p).unwrap();
        assert!(far[0] < 1e-16);
        assert!(matches!(
            sup_h(&DVector::from_element(1, 2.0), &d, &p),
            Err(Error::BoundaryViolation { .. })
        ));
    }

    pub(crate) fn dummy_certificate() -> Certificate {
        Certificate {
            network_fingerprint: String::new(),
            units: Units::Si,
            voltage_scale: 1.0,
            p: vec![vec![1.0]],
            beta: 1.0,
            beta_capped: false,
            h0: vec![1.0],
            tau: 1.0,
            gamma: vec![1.0],
            halfwidth: vec![1.0],
            cpl_power: vec![-1.0],
            cpl_buses: vec!["a".into(), "b".into()],
            delta_inf: vec![-1.0, -1.0],
            floor: vec![62.3, 10.0],
        }
    }

    #[test]
    fn certify_point_compares_elementwise() {
        let cert = dummy_certificate();
        assert!(certify_point(&cert, &DVector::from_vec(vec![64.8, 10.0])));
        assert!(!certify_point(&cert, &DVector::from_vec(vec![55.0, 11.0])));
        let back = Certificate::from_json(&cert.to_json().unwrap()).unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn one_bus_floor() {
        let spec = parse_network(
            r#"{
            "buses": [{"id": "b", "has_source": true, "has_cpl": true,
                "capacitance": 0.0005, "source_resistance": 0.5,
                "source_inductance": 0.001, "cpl_power": -300.0,
                "voltage_bounds": [1.0, 1000.0]}],
            "base": {"voltage": 60.0, "power": 300.0},
            "bounds": {"setpoint": [1.0, 1000.0], "generation": [-1e9, 1e9]},
            "operating_halfwidth": {"current": 20.0, "voltage": 20.0}}"#,
        )
        .unwrap();
        let (cert, _) = certify_network(&spec, &CertifyOptions::default()).unwrap();
        assert!((cert.floor[0] - 62.3).abs() < 0.5);
    }
}
