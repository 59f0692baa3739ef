//! Time-domain simulation of the nonlinear model, vertex sweeps, Lyapunov
//! traces, 2-D region-of-attraction grids and the borderline design search.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{build_dynamics, NetworkSpec, SystemMatrices, Units};
use crate::steadystate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Integrator {
    Rk4 {
        step: f64,
    },
    /// Dormand–Prince 5(4).
    Adaptive {
        rtol: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub integrator: Integrator,
    /// Horizon in seconds.
    pub t_max: f64,
    /// Convergence radius, per unit.
    pub epsilon: f64,
    /// Load-voltage level treated as collapse, in working units.
    pub v_div: f64,
    /// Natural voltage/current units of the working model (1 in per unit).
    pub voltage_unit: f64,
    pub current_unit: f64,
    /// Keep every accepted step (otherwise only the endpoints).
    pub record: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            integrator: Integrator::Adaptive { rtol: 1e-8 },
            t_max: 0.5,
            epsilon: 1e-3,
            v_div: 1.0,
            voltage_unit: 1.0,
            current_unit: 1.0,
            record: true,
        }
    }
}

impl SimOptions {
    /// Defaults expressed in the units of `spec` (a 1 V collapse guard).
    pub fn for_network(spec: &NetworkSpec) -> Self {
        let (vu, iu) = match spec.units {
            Units::Si => (spec.base.voltage, spec.base.current()),
            Units::PerUnit => (1.0, 1.0),
        };
        Self {
            voltage_unit: vu,
            current_unit: iu,
            v_div: 1.0 / spec.voltage_scale(),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let step_ok = match self.integrator {
            Integrator::Rk4 { step } => step > 0.0,
            Integrator::Adaptive { rtol } => rtol > 0.0,
        };
        if !(self.t_max > 0.0 && self.epsilon > 0.0 && self.v_div > 0.0 && step_ok) {
            return Err(Error::Dimension(
                "simulation options need positive horizon, radius, floor and step".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Converged,
    Diverged,
    Undecided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub status: Classification,
    /// Scaled ∞-distance to the target at the last sample.
    pub final_distance: f64,
    pub steps: usize,
}

impl Trajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("non-empty trajectory")
    }
}

struct Problem<'a> {
    m: &'a SystemMatrices,
    d_inv: DVector<f64>,
    forcing: DVector<f64>,
    p: &'a DVector<f64>,
    c1_idx: Vec<usize>,
}

impl Problem<'_> {
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut r = &self.m.a * x + &self.forcing;
        for (j, &s) in self.c1_idx.iter().enumerate() {
            r[s] += self.p[j] / x[s];
        }
        r.component_mul_assign(&self.d_inv);
        r
    }

    fn min_load_voltage(&self, x: &DVector<f64>) -> f64 {
        self.c1_idx
            .iter()
            .map(|&s| x[s])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Integrate the model from `x0` towards the equilibrium `x_e`.
pub fn simulate(
    m: &SystemMatrices,
    p: &DVector<f64>,
    u: &DVector<f64>,
    x_e: &DVector<f64>,
    x0: &DVector<f64>,
    opts: &SimOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    let n = m.n();
    if x0.len() != n || x_e.len() != n || p.len() != m.n_cpl() || u.len() != m.n_sources() {
        return Err(Error::Dimension(
            "simulation inputs do not match the model".into(),
        ));
    }
    let c1_idx: Vec<usize> = (0..m.n_cpl()).map(|j| m.b1.column(j).iamax()).collect();
    let prob = Problem {
        m,
        d_inv: m.d.map(|d| 1.0 / d),
        forcing: m.input(u),
        p,
        c1_idx,
    };
    let unit = DVector::from_fn(n, |i, _| {
        if m.layout.is_current(i) {
            opts.current_unit
        } else {
            opts.voltage_unit
        }
    });
    let distance = |x: &DVector<f64>| {
        (x - x_e)
            .iter()
            .zip(unit.iter())
            .map(|(d, s)| d.abs() / s)
            .fold(0.0, f64::max)
    };
    if prob.min_load_voltage(x0) <= 0.0 {
        return Err(Error::Dimension(
            "initial load voltages must be positive".into(),
        ));
    }

    let hold = 0.05 * opts.t_max;
    let mut t = 0.0;
    let mut x = x0.clone();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut inside_since: Option<f64> = (distance(&x) <= opts.epsilon).then_some(0.0);
    let mut status = Classification::Undecided;
    let mut steps = 0usize;

    let mut h = match opts.integrator {
        Integrator::Rk4 { step } => step,
        Integrator::Adaptive { .. } => {
            // a fraction of the fastest time constant
            let f0 = prob.f(&x);
            let scale = x
                .iter()
                .zip(unit.iter())
                .map(|(a, s)| a.abs().max(*s))
                .collect::<Vec<_>>();
            let rate = f0
                .iter()
                .zip(&scale)
                .map(|(d, s)| d.abs() / s)
                .fold(0.0, f64::max);
            if rate > 0.0 {
                (1e-3 / rate).min(opts.t_max * 1e-3)
            } else {
                opts.t_max * 1e-3
            }
        }
    };
    let h_min = opts.t_max * 1e-14;
    let mut k1 = prob.f(&x);

    while t < opts.t_max {
        let h_try = h.min(opts.t_max - t);
        let (x_new, accepted, h_next, k_last) = match opts.integrator {
            Integrator::Rk4 { .. } => (rk4_step(&prob, &x, h_try), true, h, None),
            Integrator::Adaptive { rtol } => {
                let (x_new, err, k7) = dopri_step(&prob, &x, &k1, h_try, rtol, &unit);
                if !err.is_finite() {
                    (x_new, false, h_try * 0.2, None)
                } else if err <= 1.0 {
                    let fac = if err == 0.0 {
                        5.0
                    } else {
                        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                    };
                    (x_new, true, h_try * fac, Some(k7))
                } else {
                    let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                    (x_new, false, h_try * fac, None)
                }
            }
        };
        if !accepted {
            h = h_next;
            if h < h_min {
                return Err(Error::Simulation(format!(
                    "step size underflow at t = {t:e}"
                )));
            }
            continue;
        }
        // a collapsing load voltage shows up as a non-finite or tiny value
        if x_new.iter().any(|v| !v.is_finite()) || prob.min_load_voltage(&x_new) <= opts.v_div {
            t += h_try;
            x = x_new;
            steps += 1;
            status = Classification::Diverged;
            times.push(t);
            states.push(x.clone());
            break;
        }
        t += h_try;
        x = x_new;
        steps += 1;
        k1 = match k_last {
            Some(k) => k,
            None => prob.f(&x),
        };
        h = h_next;
        if opts.record {
            times.push(t);
            states.push(x.clone());
        }
        if distance(&x) <= opts.epsilon {
            let since = *inside_since.get_or_insert(t);
            if t - since >= hold {
                status = Classification::Converged;
                break;
            }
        } else {
            inside_since = None;
        }
        if steps > 50_000_000 {
            return Err(Error::Simulation("step budget exhausted".into()));
        }
    }
    if !opts.record && times.last() != Some(&t) {
        times.push(t);
        states.push(x.clone());
    }
    let final_distance = distance(states.last().expect("non-empty"));
    Ok(Trajectory {
        times,
        states,
        status,
        final_distance,
        steps,
    })
}

fn rk4_step(p: &Problem, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = p.f(x);
    let k2 = p.f(&(x + &k1 * (0.5 * h)));
    let k3 = p.f(&(x + &k2 * (0.5 * h)));
    let k4 = p.f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// One Dormand–Prince step; returns the 5th-order solution, the scaled
/// error norm and the FSAL derivative.
fn dopri_step(
    p: &Problem,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
    rtol: f64,
    unit: &DVector<f64>,
) -> (DVector<f64>, f64, DVector<f64>) {
    let k2 = p.f(&(x + k1 * (h / 5.0)));
    let k3 = p.f(&(x + (k1 * (3.0 / 40.0) + &k2 * (9.0 / 40.0)) * h));
    let k4 = p.f(&(x + (k1 * (44.0 / 45.0) - &k2 * (56.0 / 15.0) + &k3 * (32.0 / 9.0)) * h));
    let k5 = p.f(&(x
        + (k1 * (19372.0 / 6561.0) - &k2 * (25360.0 / 2187.0) + &k3 * (64448.0 / 6561.0)
            - &k4 * (212.0 / 729.0))
            * h));
    let k6 = p.f(&(x
        + (k1 * (9017.0 / 3168.0) - &k2 * (355.0 / 33.0)
            + &k3 * (46732.0 / 5247.0)
            + &k4 * (49.0 / 176.0)
            - &k5 * (5103.0 / 18656.0))
            * h));
    let y = x
        + (k1 * (35.0 / 384.0) + &k3 * (500.0 / 1113.0) + &k4 * (125.0 / 192.0)
            - &k5 * (2187.0 / 6784.0)
            + &k6 * (11.0 / 84.0))
            * h;
    let k7 = p.f(&y);
    let e = (k1 * (71.0 / 57600.0) - &k3 * (71.0 / 16695.0) + &k4 * (71.0 / 1920.0)
        - &k5 * (17253.0 / 339200.0)
        + &k6 * (22.0 / 525.0)
        - &k7 * (1.0 / 40.0))
        * h;
    let n = x.len() as f64;
    let mut acc = 0.0;
    for i in 0..x.len() {
        let sc = rtol * (unit[i] + x[i].abs().max(y[i].abs()));
        acc += (e[i] / sc).powi(2);
    }
    (y, (acc / n).sqrt(), k7)
}

/// `V(t) = Δxᵀ P Δx` along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovTrace {
    pub values: Vec<f64>,
    /// `max_k (V_{k+1} − V_k) / V_0` (0 for an equilibrium start).
    pub max_forward_difference: f64,
}

pub fn lyapunov_trace(traj: &Trajectory, p: &DMatrix<f64>, x_e: &DVector<f64>) -> LyapunovTrace {
    let values: Vec<f64> = traj
        .states
        .iter()
        .map(|x| {
            let d = x - x_e;
            d.dot(&(p * &d))
        })
        .collect();
    let v0 = values.first().copied().unwrap_or(0.0);
    let max_forward_difference = if v0 > 0.0 {
        values
            .windows(2)
            .map(|w| (w[1] - w[0]) / v0)
            .fold(0.0_f64, f64::max)
    } else {
        0.0
    };
    LyapunovTrace {
        values,
        max_forward_difference,
    }
}

/// Every vertex of the box `x_e ± Δx̄` (n ≤ 20).
pub fn box_vertices(x_e: &DVector<f64>, halfwidth: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = x_e.len();
    assert!(n <= 20, "vertex enumeration limited to 20 states");
    (0..1usize << n)
        .map(|mask| {
            DVector::from_fn(n, |i, _| {
                if mask >> i & 1 == 1 {
                    x_e[i] + halfwidth[i]
                } else {
                    x_e[i] - halfwidth[i]
                }
            })
        })
        .collect()
}

/// `count` random vertices, reproducible from `seed`.
pub fn sampled_vertices(
    x_e: &DVector<f64>,
    halfwidth: &DVector<f64>,
    count: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            DVector::from_fn(x_e.len(), |i, _| {
                if rng.random::<bool>() {
                    x_e[i] + halfwidth[i]
                } else {
                    x_e[i] - halfwidth[i]
                }
            })
        })
        .collect()
}

/// Simulate from each start in parallel; results keep the input order.
pub fn sweep(
    m: &SystemMatrices,
    p: &DVector<f64>,
    u: &DVector<f64>,
    x_e: &DVector<f64>,
    starts: &[DVector<f64>],
    opts: &SimOptions,
) -> Result<Vec<Trajectory>> {
    starts
        .par_iter()
        .map(|x0| simulate(m, p, u, x_e, x0, opts))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoaGrid {
    /// Grid coordinates of state 0 (columns) and state 1 (rows).
    pub axis0: Vec<f64>,
    pub axis1: Vec<f64>,
    /// Row-major classification, `class[row * axis0.len() + col]`.
    pub class: Vec<Classification>,
    /// Lowest converging value of state 1 per column where a transition
    /// occurs, as `(state0, state1)` midpoints.
    pub boundary: Vec<[f64; 2]>,
    /// Whether every vertex of the operating box converged.
    pub box_inside: bool,
}

impl RoaGrid {
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for k in &self.class {
            c[match k {
                Classification::Converged => 0,
                Classification::Diverged => 1,
                Classification::Undecided => 2,
            }] += 1;
        }
        c
    }
}

/// Classify a `points × points` grid spanning `x_e ± window·Δx̄` for a
/// two-state model.
#[allow(clippy::too_many_arguments)]
pub fn roa_grid_2d(
    m: &SystemMatrices,
    p: &DVector<f64>,
    u: &DVector<f64>,
    x_e: &DVector<f64>,
    halfwidth: &DVector<f64>,
    points: usize,
    window: f64,
    opts: &SimOptions,
) -> Result<RoaGrid> {
    if m.n() != 2 {
        return Err(Error::Dimension(format!(
            "2-D grid needs n = 2, got {}",
            m.n()
        )));
    }
    if points < 2 {
        return Err(Error::Dimension(
            "grid needs at least 2 points per axis".into(),
        ));
    }
    let axis = |i: usize| -> Vec<f64> {
        (0..points)
            .map(|k| x_e[i] + halfwidth[i] * window * (2.0 * k as f64 / (points - 1) as f64 - 1.0))
            .collect()
    };
    let (axis0, axis1) = (axis(0), axis(1));
    let light = SimOptions {
        record: false,
        ..opts.clone()
    };
    let volt = m.b1.column(0).iamax();
    let class: Vec<Classification> = (0..points * points)
        .into_par_iter()
        .map(|k| {
            let x0 = DVector::from_vec(vec![axis0[k % points], axis1[k / points]]);
            if x0[volt] <= light.v_div {
                return Ok(Classification::Diverged);
            }
            simulate(m, p, u, x_e, &x0, &light).map(|t| t.status)
        })
        .collect::<Result<_>>()?;
    let mut boundary = Vec::new();
    for c in 0..points {
        for r in 1..points {
            let below = class[(r - 1) * points + c];
            let here = class[r * points + c];
            if below != Classification::Converged && here == Classification::Converged {
                boundary.push([axis0[c], 0.5 * (axis1[r - 1] + axis1[r])]);
                break;
            }
        }
    }
    let vertices = box_vertices(x_e, halfwidth);
    let box_inside = sweep(m, p, u, x_e, &vertices, &light)?
        .iter()
        .all(|t| t.status == Classification::Converged);
    Ok(RoaGrid {
        axis0,
        axis1,
        class,
        boundary,
        box_inside,
    })
}

/// Whether every box vertex converges to the equilibrium at setpoints `u`.
/// A missing high-voltage equilibrium counts as failure.
pub fn box_converges(spec: &NetworkSpec, u: &DVector<f64>, opts: &SimOptions) -> Result<bool> {
    let pt = match steadystate::power_flow(spec, u) {
        Ok(pt) => pt,
        Err(Error::PowerFlowDivergence { .. }) | Err(Error::LowVoltageBranch(_)) => {
            return Ok(false)
        }
        Err(e) => return Err(e),
    };
    let m = build_dynamics(spec);
    let x_e = pt.x_vector();
    let hw = spec.halfwidth_vector();
    let starts = if m.n() <= 12 {
        box_vertices(&x_e, &hw)
    } else {
        sampled_vertices(&x_e, &hw, 256, 0)
    };
    if starts
        .iter()
        .any(|x| m.load_voltages(x).iter().any(|&v| v <= 0.0))
    {
        return Ok(false);
    }
    let light = SimOptions {
        record: false,
        ..opts.clone()
    };
    Ok(sweep(&m, &m.p_load, u, &x_e, &starts, &light)?
        .iter()
        .all(|t| t.status == Classification::Converged))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Borderline {
    pub u_min: f64,
    /// Final bracket `[infeasible, feasible]`.
    pub bracket: [f64; 2],
    pub evaluations: usize,
}

/// Smallest single setpoint whose operating box converges from every
/// vertex, by bisection to `width` (working units). Feasibility is assumed
/// monotone in `u`; `undecided` runs count as failures.
pub fn borderline_design(
    spec: &NetworkSpec,
    bracket: Option<[f64; 2]>,
    width: f64,
    opts: &SimOptions,
) -> Result<Borderline> {
    if spec.n_sources() != 1 {
        return Err(Error::Dimension(
            "borderline search needs a single source".into(),
        ));
    }
    let [mut lo, mut hi] = bracket.unwrap_or(spec.bounds.setpoint);
    let feasible = |u: f64| box_converges(spec, &DVector::from_element(1, u), opts);
    let mut evaluations = 1;
    if !feasible(hi)? {
        return Err(Error::Simulation(format!(
            "no converging setpoint up to {hi}"
        )));
    }
    evaluations += 1;
    if feasible(lo)? {
        return Ok(Borderline {
            u_min: lo,
            bracket: [lo, lo],
            evaluations,
        });
    }
    while hi - lo > width {
        let mid = 0.5 * (lo + hi);
        evaluations += 1;
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Borderline {
        u_min: hi,
        bracket: [lo, hi],
        evaluations,
    })
}

/// `|u_synth − u_border| / u_border`.
pub fn relative_difference(u_synth: f64, u_border: f64) -> Result<f64> {
    if !(u_border > 0.0) {
        return Err(Error::Dimension(
            "borderline design must be positive".into(),
        ));
    }
    Ok((u_synth - u_border).abs() / u_border)
}

/// Delimited-text dump: `t,x0,x1,...`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.states.first().map_or(0, |x| x.len());
    let mut out = String::from("t");
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (t, x) in traj.times.iter().zip(&traj.states) {
        out.push_str(&format!("{t:.9e}"));
        for v in x.iter() {
            out.push_str(&format!(",{v:.12e}"));
        }
        out.push('\n');
    }
    out
}

/// Delimited-text dump of a grid: `x0,x1,class`.
pub fn grid_csv(grid: &RoaGrid) -> String {
    let mut out = String::from("x0,x1,class\n");
    let n0 = grid.axis0.len();
    for (k, c) in grid.class.iter().enumerate() {
        let name = match c {
            Classification::Converged => "converged",
            Classification::Diverged => "diverged",
            Classification::Undecided => "undecided",
        };
        out.push_str(&format!(
            "{:.9e},{:.9e},{name}\n",
            grid.axis0[k % n0],
            grid.axis1[k / n0]
        ));
    }
    out
}
