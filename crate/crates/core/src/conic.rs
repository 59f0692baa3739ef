//! Dense barrier interior-point solver for the small conic programs used by
//! the certification and dispatch steps.
//!
//! A problem lives over a flat variable vector `y`. Symmetric matrix
//! variables occupy contiguous ranges of `y` (upper triangle, row-major), and
//! enter PSD constraints through congruence terms `Lᵀ P R + Rᵀ P L`. That
//! structure lets the Hessian of `-log det F` be assembled from a handful of
//! small products instead of one dense matrix per variable entry.
//!
//! Supported cones: affine PSD blocks `F(y) ⪰ 0`, linear `aᵀy + b ≥ 0`,
//! second-order `t(y) ≥ ‖x(y)‖`, plus affine equalities (eliminated through a
//! null-space basis). The objective is `cᵀy − Σ log det P_k` for designated
//! matrix variables.
//!
//! Phase I minimises a common shift `s` added to every cone; a negative
//! optimum gives a strictly feasible start, a certified positive lower bound
//! proves infeasibility. Phase II follows the central path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Affine function `Σ coeffs[i].1 · y[coeffs[i].0] + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub coeffs: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn new(coeffs: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { coeffs, constant }
    }

    pub fn eval(&self, y: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(i, a)| a * y[i]).sum::<f64>() + self.constant
    }
}

/// Congruence contribution `Lᵀ P R + Rᵀ P L` of a matrix variable `P`.
/// `left` and `right` are `dim(P) × block size`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatTerm {
    pub var: usize,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

/// Affine PSD constraint `F0 + Σ terms + Σ y_i F_i ⪰ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdBlock {
    pub size: usize,
    pub constant: DMatrix<f64>,
    pub mat_terms: Vec<MatTerm>,
    pub scalar_terms: Vec<(usize, DMatrix<f64>)>,
}

impl PsdBlock {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            constant: DMatrix::zeros(size, size),
            mat_terms: Vec::new(),
            scalar_terms: Vec::new(),
        }
    }

    pub fn with_constant(mut self, f0: DMatrix<f64>) -> Self {
        self.constant = f0;
        self
    }

    /// Adds `Lᵀ P R + Rᵀ P L`.
    pub fn with_term(mut self, var: usize, left: DMatrix<f64>, right: DMatrix<f64>) -> Self {
        self.mat_terms.push(MatTerm { var, left, right });
        self
    }

    /// Adds `P` itself (top-left aligned when the block is larger).
    pub fn with_matrix(self, var: usize, dim: usize, sign: f64) -> Self {
        let size = self.size;
        let mut l = DMatrix::zeros(dim, size);
        let mut r = DMatrix::zeros(dim, size);
        for i in 0..dim {
            l[(i, i)] = 1.0;
            r[(i, i)] = 0.5 * sign;
        }
        self.with_term(var, l, r)
    }

    pub fn with_scalar(mut self, index: usize, f: DMatrix<f64>) -> Self {
        self.scalar_terms.push((index, f));
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocConstraint {
    pub t: Affine,
    pub x: Vec<Affine>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MatVar {
    offset: usize,
    dim: usize,
}

/// Conic program over a flat variable vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProblem {
    n_vars: usize,
    mat_vars: Vec<MatVar>,
    pub psd: Vec<PsdBlock>,
    pub linear: Vec<Affine>,
    pub soc: Vec<SocConstraint>,
    pub equalities: Vec<Affine>,
    pub cost: Vec<(usize, f64)>,
    /// Matrix variables whose log-determinant is maximised.
    pub logdet: Vec<usize>,
}

/// Problems with PSD blocks (feasibility or max-log-det).
pub type LmiProblem = ConicProblem;
/// Problems with linear and second-order cones only.
pub type SocpProblem = ConicProblem;

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Adds a symmetric `dim × dim` variable; returns its id.
    pub fn add_matrix_var(&mut self, dim: usize) -> usize {
        self.mat_vars.push(MatVar {
            offset: self.n_vars,
            dim,
        });
        self.n_vars += dim * (dim + 1) / 2;
        self.mat_vars.len() - 1
    }

    /// Adds a scalar variable; returns its index in `y`.
    pub fn add_scalar_var(&mut self) -> usize {
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn matrix_dim(&self, var: usize) -> usize {
        self.mat_vars[var].dim
    }

    /// Index in `y` of entry `(a, b)` of a matrix variable.
    pub fn entry_index(&self, var: usize, a: usize, b: usize) -> usize {
        let MatVar { offset, dim } = self.mat_vars[var];
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        offset + a * dim - a * a.saturating_sub(1) / 2 + (b - a)
    }

    pub fn matrix_value(&self, y: &DVector<f64>, var: usize) -> DMatrix<f64> {
        let dim = self.mat_vars[var].dim;
        DMatrix::from_fn(dim, dim, |a, b| y[self.entry_index(var, a, b)])
    }

    pub fn add_psd(&mut self, block: PsdBlock) {
        self.psd.push(block);
    }

    /// `a(y) ≥ 0`.
    pub fn add_linear(&mut self, a: Affine) {
        self.linear.push(a);
    }

    /// `a(y) = 0`.
    pub fn add_equality(&mut self, a: Affine) {
        self.equalities.push(a);
    }

    /// `t(y) ≥ ‖x(y)‖₂`.
    pub fn add_soc(&mut self, t: Affine, x: Vec<Affine>) {
        self.soc.push(SocConstraint { t, x });
    }

    pub fn set_cost(&mut self, cost: Vec<(usize, f64)>) {
        self.cost = cost;
    }

    pub fn maximize_logdet(&mut self, var: usize) {
        self.logdet.push(var);
    }

    fn check_dimensions(&self) -> Result<(), String> {
        let in_range = |i: usize| i < self.n_vars;
        for (k, b) in self.psd.iter().enumerate() {
            if b.constant.shape() != (b.size, b.size) {
                return Err(format!("PSD block {k}: constant has wrong shape"));
            }
            for t in &b.mat_terms {
                let dim = self
                    .mat_vars
                    .get(t.var)
                    .ok_or_else(|| format!("PSD block {k}: unknown matrix variable"))?
                    .dim;
                if t.left.shape() != (dim, b.size) || t.right.shape() != (dim, b.size) {
                    return Err(format!("PSD block {k}: congruence factor has wrong shape"));
                }
            }
            for (i, f) in &b.scalar_terms {
                if !in_range(*i) || f.shape() != (b.size, b.size) {
                    return Err(format!("PSD block {k}: bad scalar term"));
                }
            }
        }
        let affines = self.linear.iter().chain(self.equalities.iter()).chain(
            self.soc
                .iter()
                .flat_map(|s| std::iter::once(&s.t).chain(s.x.iter())),
        );
        for a in affines {
            if a.coeffs.iter().any(|&(i, _)| !in_range(i)) {
                return Err("affine expression references an unknown variable".into());
            }
        }
        if self.cost.iter().any(|&(i, _)| !in_range(i)) {
            return Err("cost references an unknown variable".into());
        }
        if self.logdet.iter().any(|&v| v >= self.mat_vars.len()) {
            return Err("log-det objective references an unknown matrix variable".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative duality-gap target of the barrier method.
    pub gap: f64,
    /// Scaled equality residual.
    pub residual: f64,
    /// Accepted PSD margin (minimum eigenvalue ≥ −psd).
    pub psd: f64,
    /// Bound `|y_i| ≤ box_radius` used by phase I.
    pub box_radius: f64,
    pub max_newton: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            gap: 1e-8,
            residual: 1e-8,
            psd: 1e-7,
            box_radius: 1e6,
            max_newton: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Largest scaled equality violation.
    pub primal_residual: f64,
    /// Duality-gap bound at termination.
    pub dual_residual: f64,
    /// Minimum eigenvalue of each PSD block (constraints first, then log-det
    /// variables).
    pub psd_margins: Vec<f64>,
    /// Smallest slack among linear and second-order cones.
    pub cone_margin: f64,
    pub objective: f64,
    pub newton_steps: usize,
    pub message: String,
}

/// Independent check of an assignment: evaluates every constraint densely
/// and returns `(equality residual, PSD margins, cone margin)`.
pub fn check_assignment(problem: &ConicProblem, y: &DVector<f64>) -> (f64, Vec<f64>, f64) {
    let eq = problem
        .equalities
        .iter()
        .map(|a| {
            let scale = a
                .coeffs
                .iter()
                .map(|&(i, c)| (c * y[i]).abs())
                .fold(a.constant.abs(), f64::max)
                .max(1.0);
            a.eval(y).abs() / scale
        })
        .fold(0.0, f64::max);

    let mut margins = Vec::new();
    for block in &problem.psd {
        let mut f = block.constant.clone();
        for term in &block.mat_terms {
            let p = problem.matrix_value(y, term.var);
            // naive triple loop on purpose: keeps this path separate from
            // the solver's matrix-product evaluation
            let (d, n) = term.left.shape();
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for a in 0..d {
                        for b in 0..d {
                            acc += p[(a, b)]
                                * (term.left[(a, i)] * term.right[(b, j)]
                                    + term.right[(a, i)] * term.left[(b, j)]);
                        }
                    }
                    f[(i, j)] += acc;
                }
            }
        }
        for (i, fi) in &block.scalar_terms {
            f += fi * y[*i];
        }
        let sym = (&f + f.transpose()) * 0.5;
        margins.push(
            sym.symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min),
        );
    }
    for &v in &problem.logdet {
        let p = problem.matrix_value(y, v);
        margins.push(
            p.symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min),
        );
    }

    let mut cone = f64::INFINITY;
    for a in &problem.linear {
        cone = cone.min(a.eval(y));
    }
    for s in &problem.soc {
        let t = s.t.eval(y);
        let nx = s.x.iter().map(|a| a.eval(y).powi(2)).sum::<f64>().sqrt();
        cone = cone.min(t - nx);
    }
    (eq, margins, cone)
}

/// Pure feasibility (or linear objective) over PSD constraints.
pub fn solve_lmi(problem: &LmiProblem, tol: &Tolerances) -> (SolveReport, DVector<f64>) {
    solve(problem, tol)
}

/// Maximise the log-determinant of the designated matrix variables.
pub fn solve_maxlogdet(problem: &LmiProblem, tol: &Tolerances) -> (SolveReport, DVector<f64>) {
    solve(problem, tol)
}

pub fn solve_socp(problem: &SocpProblem, tol: &Tolerances) -> (SolveReport, DVector<f64>) {
    solve(problem, tol)
}

/// Solve any [`ConicProblem`]. Feasibility problems (no cost, no log-det)
/// return the first strictly feasible point found.
pub fn solve(problem: &ConicProblem, tol: &Tolerances) -> (SolveReport, DVector<f64>) {
    let zero = DVector::zeros(problem.n_vars);
    let fail = |msg: String| {
        (
            SolveReport {
                status: SolveStatus::NumericalFailure,
                primal_residual: f64::NAN,
                dual_residual: f64::NAN,
                psd_margins: Vec::new(),
                cone_margin: f64::NAN,
                objective: f64::NAN,
                newton_steps: 0,
                message: msg,
            },
            DVector::zeros(problem.n_vars),
        )
    };
    if let Err(msg) = problem.check_dimensions() {
        return fail(format!("dimension mismatch: {msg}"));
    }

    let space = match AffineSpace::new(problem, tol) {
        Some(s) => s,
        None => {
            let (mut rep, y) = fail("equality constraints are inconsistent".into());
            rep.status = SolveStatus::Infeasible;
            return (rep, y);
        }
    };

    let mut steps = 0;
    let start = match phase_one(problem, &space, tol, &mut steps) {
        PhaseOne::Feasible(y) => y,
        PhaseOne::Infeasible(bound) => {
            let (mut rep, _) = fail(format!(
                "infeasible: phase I lower bound on the common shift is {bound:.3e} > 0"
            ));
            rep.status = SolveStatus::Infeasible;
            rep.newton_steps = steps;
            return (rep, zero);
        }
        PhaseOne::Failure(msg) => {
            let (mut rep, y) = fail(msg);
            rep.newton_steps = steps;
            return (rep, y);
        }
    };

    let has_objective = !problem.cost.is_empty() || !problem.logdet.is_empty();
    let (y, gap, msg) = if has_objective {
        let barrier = Barrier::phase_two(problem);
        let nu = barrier.nu();
        let out = central_path(&barrier, &space, start, tol, &mut steps, |_, _, _| false);
        match out {
            PathEnd::Converged(y, t) => (y, nu / t, String::new()),
            PathEnd::Stalled(y, t, why) => {
                let gap = nu / t;
                if gap <= 1e-6 * (1.0 + barrier.objective(&y).abs()) {
                    (y, gap, format!("stopped early ({why}); gap {gap:.2e}"))
                } else {
                    let (mut rep, _) = fail(format!("phase II stalled: {why} (gap {gap:.2e})"));
                    rep.newton_steps = steps;
                    return (rep, y);
                }
            }
            PathEnd::Stopped(y, t) => (y, nu / t, String::new()),
        }
    } else {
        (start, 0.0, String::new())
    };

    let (eq, margins, cone) = check_assignment(problem, &y);
    let objective = Barrier::phase_two(problem).objective(&y);
    let ok = eq <= tol.residual.max(1e-7)
        && margins.iter().all(|&m| m >= -tol.psd)
        && (cone >= -tol.psd || cone == f64::INFINITY);
    let status = if ok {
        SolveStatus::Optimal
    } else {
        SolveStatus::NumericalFailure
    };
    let message = if ok {
        msg
    } else {
        format!("independent check failed: eq {eq:.2e}, margins {margins:?}, cone {cone:.2e}")
    };
    (
        SolveReport {
            status,
            primal_residual: eq,
            dual_residual: gap,
            psd_margins: margins,
            cone_margin: cone,
            objective,
            newton_steps: steps,
            message,
        },
        y,
    )
}

/// `{y0 + N z}` parametrisation of the equality constraints.
struct AffineSpace {
    y0: DVector<f64>,
    basis: Option<DMatrix<f64>>,
}

impl AffineSpace {
    fn new(problem: &ConicProblem, tol: &Tolerances) -> Option<Self> {
        let m = problem.n_vars;
        if problem.equalities.is_empty() {
            return Some(Self {
                y0: DVector::zeros(m),
                basis: None,
            });
        }
        let p = problem.equalities.len();
        let mut a = DMatrix::zeros(p, m);
        let mut b = DVector::zeros(p);
        for (r, e) in problem.equalities.iter().enumerate() {
            for &(i, c) in &e.coeffs {
                a[(r, i)] += c;
            }
            b[r] = -e.constant;
        }
        // Full SVD through the Gram matrix keeps all right singular vectors.
        let gram = a.transpose() * &a;
        let eig = gram.symmetric_eigen();
        let smax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let cut = smax * 1e-20 + 1e-300;
        let mut null_cols = Vec::new();
        let mut range_cols = Vec::new();
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev <= cut.max(smax * 1e-24) || ev <= smax * 1e-14 {
                null_cols.push(k);
            } else {
                range_cols.push(k);
            }
        }
        // minimum-norm solution: y0 = V Σ⁻² Vᵀ Aᵀ b restricted to range
        let atb = a.transpose() * &b;
        let mut y0 = DVector::zeros(m);
        for &k in &range_cols {
            let v = eig.eigenvectors.column(k);
            y0 += v * (v.dot(&atb) / eig.eigenvalues[k]);
        }
        let res = (&a * &y0 - &b).amax();
        if res > tol.residual.max(1e-9) * (1.0 + b.amax()) {
            return None;
        }
        let basis = DMatrix::from_fn(m, null_cols.len(), |i, j| {
            eig.eigenvectors[(i, null_cols[j])]
        });
        Some(Self {
            y0,
            basis: Some(basis),
        })
    }

    fn reduce_grad(&self, g: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            None => g.clone(),
            Some(n) => n.tr_mul(g),
        }
    }

    fn reduce_hess(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.basis {
            None => h.clone(),
            Some(n) => n.transpose() * h * n,
        }
    }

    fn lift(&self, dz: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            None => dz.clone(),
            Some(n) => n * dz,
        }
    }
}

/// Weighted barrier `t·(cᵀy) − Σ w_k log det F_k − Σ log lin − Σ log soc`.
struct Barrier<'a> {
    problem: &'a ConicProblem,
    n: usize,
    /// Blocks: `(block, is objective)`.
    blocks: Vec<(std::borrow::Cow<'a, PsdBlock>, bool)>,
    linear: Vec<std::borrow::Cow<'a, Affine>>,
    soc: Vec<std::borrow::Cow<'a, SocConstraint>>,
    cost: Vec<(usize, f64)>,
}

impl<'a> Barrier<'a> {
    fn phase_two(problem: &'a ConicProblem) -> Self {
        use std::borrow::Cow;
        let mut blocks: Vec<(Cow<PsdBlock>, bool)> = problem
            .psd
            .iter()
            .map(|b| (Cow::Borrowed(b), false))
            .collect();
        for &v in &problem.logdet {
            let dim = problem.mat_vars[v].dim;
            blocks.push((
                Cow::Owned(PsdBlock::new(dim).with_matrix(v, dim, 1.0)),
                true,
            ));
        }
        Self {
            problem,
            n: problem.n_vars,
            blocks,
            linear: problem.linear.iter().map(Cow::Borrowed).collect(),
            soc: problem.soc.iter().map(Cow::Borrowed).collect(),
            cost: problem.cost.clone(),
        }
    }

    /// Shifted problem: variable `s` appended at index `n`, every cone gets
    /// `+s`, plus `s ≥ −1` and the box `|y_i| ≤ R`.
    fn phase_one(problem: &'a ConicProblem, radius: f64) -> Self {
        use std::borrow::Cow;
        let n = problem.n_vars;
        let s = n;
        let mut blocks = Vec::new();
        for b in &problem.psd {
            let size = b.size;
            blocks.push((
                Cow::Owned(b.clone().with_scalar(s, DMatrix::identity(size, size))),
                false,
            ));
        }
        for &v in &problem.logdet {
            let dim = problem.mat_vars[v].dim;
            blocks.push((
                Cow::Owned(
                    PsdBlock::new(dim)
                        .with_matrix(v, dim, 1.0)
                        .with_scalar(s, DMatrix::identity(dim, dim)),
                ),
                false,
            ));
        }
        let mut linear: Vec<Cow<Affine>> = problem
            .linear
            .iter()
            .map(|a| {
                let mut a = a.clone();
                a.coeffs.push((s, 1.0));
                Cow::Owned(a)
            })
            .collect();
        linear.push(Cow::Owned(Affine::new(vec![(s, 1.0)], 1.0)));
        for i in 0..n {
            linear.push(Cow::Owned(Affine::new(vec![(i, 1.0)], radius)));
            linear.push(Cow::Owned(Affine::new(vec![(i, -1.0)], radius)));
        }
        let soc = problem
            .soc
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.t.coeffs.push((s, 1.0));
                Cow::Owned(c)
            })
            .collect();
        Self {
            problem,
            n: n + 1,
            blocks,
            linear,
            soc,
            cost: vec![(s, 1.0)],
        }
    }

    fn nu(&self) -> f64 {
        let psd: usize = self
            .blocks
            .iter()
            .filter(|(_, obj)| !obj)
            .map(|(b, _)| b.size)
            .sum();
        (psd + self.linear.len() + 2 * self.soc.len()) as f64
    }

    fn objective(&self, y: &DVector<f64>) -> f64 {
        let lin: f64 = self.cost.iter().map(|&(i, c)| c * y[i]).sum();
        let mut ld = 0.0;
        for (b, obj) in &self.blocks {
            if *obj {
                match eval_block(self.problem, b, y).cholesky() {
                    Some(ch) => ld -= 2.0 * ch.l().diagonal().map(f64::ln).sum(),
                    None => return f64::INFINITY,
                }
            }
        }
        lin + ld
    }

    /// Barrier value at weight `t`, or `None` outside the domain.
    fn value(&self, y: &DVector<f64>, t: f64) -> Option<f64> {
        let mut v: f64 = t * self.cost.iter().map(|&(i, c)| c * y[i]).sum::<f64>();
        for (b, obj) in &self.blocks {
            let f = eval_block(self.problem, b, y);
            let ch = f.cholesky()?;
            let ld = 2.0 * ch.l().diagonal().map(f64::ln).sum();
            if !ld.is_finite() {
                return None;
            }
            v -= if *obj { t * ld } else { ld };
        }
        for a in &self.linear {
            let r = a.eval(y);
            if !(r > 0.0) {
                return None;
            }
            v -= r.ln();
        }
        for c in &self.soc {
            let tt = c.t.eval(y);
            let f = tt * tt - c.x.iter().map(|a| a.eval(y).powi(2)).sum::<f64>();
            if !(tt > 0.0 && f > 0.0) {
                return None;
            }
            v -= f.ln();
        }
        Some(v)
    }

    fn derivatives(&self, y: &DVector<f64>, t: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for &(i, c) in &self.cost {
            g[i] += t * c;
        }
        for (b, obj) in &self.blocks {
            let w = if *obj { t } else { 1.0 };
            let f = eval_block(self.problem, b, y);
            let winv = f.cholesky()?.inverse();
            block_derivatives(self.problem, b, &winv, w, &mut g, &mut h);
        }
        for a in &self.linear {
            let r = a.eval(y);
            for &(i, ci) in &a.coeffs {
                g[i] -= ci / r;
                for &(j, cj) in &a.coeffs {
                    h[(i, j)] += ci * cj / (r * r);
                }
            }
        }
        for c in &self.soc {
            // u = (t, x); φ = −log(t² − ‖x‖²)
            let rows: Vec<&Affine> = std::iter::once(&c.t).chain(c.x.iter()).collect();
            let u: Vec<f64> = rows.iter().map(|a| a.eval(y)).collect();
            let f = u[0] * u[0] - u[1..].iter().map(|v| v * v).sum::<f64>();
            let k = u.len();
            let mut grad_f = vec![0.0; k];
            grad_f[0] = 2.0 * u[0];
            for j in 1..k {
                grad_f[j] = -2.0 * u[j];
            }
            let gu: Vec<f64> = grad_f.iter().map(|x| -x / f).collect();
            let hu = DMatrix::from_fn(k, k, |p, q| {
                let j = if p == q {
                    if p == 0 {
                        2.0
                    } else {
                        -2.0
                    }
                } else {
                    0.0
                };
                -j / f + grad_f[p] * grad_f[q] / (f * f)
            });
            for (p, ap) in rows.iter().enumerate() {
                for &(i, ci) in &ap.coeffs {
                    g[i] += gu[p] * ci;
                    for (q, aq) in rows.iter().enumerate() {
                        let hpq = hu[(p, q)];
                        if hpq == 0.0 {
                            continue;
                        }
                        for &(j, cj) in &aq.coeffs {
                            h[(i, j)] += ci * hpq * cj;
                        }
                    }
                }
            }
        }
        Some((g, h))
    }
}

fn eval_block(problem: &ConicProblem, block: &PsdBlock, y: &DVector<f64>) -> DMatrix<f64> {
    let mut f = block.constant.clone();
    for term in &block.mat_terms {
        let p = problem.matrix_value(y, term.var);
        let m = term.left.transpose() * (&p * &term.right);
        f += &m + m.transpose();
    }
    for (i, fi) in &block.scalar_terms {
        if y[*i] != 0.0 {
            f += fi * y[*i];
        }
    }
    // exact symmetry for the Cholesky factorisation
    (&f + f.transpose()) * 0.5
}

/// Upper-triangle entries `(a, b)` of a `dim × dim` matrix, in storage order.
fn pairs(dim: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(dim * (dim + 1) / 2);
    for a in 0..dim {
        for b in a..dim {
            out.push((a, b));
        }
    }
    out
}

/// `tr(W F_i)`-style contraction of a symmetric `S` with the basis element
/// for entry `(a, b)`.
#[inline]
fn basis_dot(s: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    if a == b {
        s[(a, a)]
    } else {
        2.0 * s[(a, b)]
    }
}

/// Adds the gradient and Hessian of `−w log det F` to `g`, `h`, where
/// `winv = F⁻¹`.
fn block_derivatives(
    problem: &ConicProblem,
    block: &PsdBlock,
    winv: &DMatrix<f64>,
    w: f64,
    g: &mut DVector<f64>,
    h: &mut DMatrix<f64>,
) {
    let terms = &block.mat_terms;
    let offsets: Vec<usize> = terms
        .iter()
        .map(|t| problem.mat_vars[t.var].offset)
        .collect();
    let pair_lists: Vec<Vec<(usize, usize)>> = terms
        .iter()
        .map(|t| pairs(problem.mat_vars[t.var].dim))
        .collect();

    // gradient, matrix part
    for (r, term) in terms.iter().enumerate() {
        let gm = &term.right * winv * term.left.transpose();
        let s = &gm + gm.transpose();
        for (k, &(a, b)) in pair_lists[r].iter().enumerate() {
            g[offsets[r] + k] -= w * basis_dot(&s, a, b);
        }
    }
    // gradient, scalar part; K_i = W F_i W for the Hessian
    let mut ks = Vec::with_capacity(block.scalar_terms.len());
    for (i, fi) in &block.scalar_terms {
        g[*i] -= w * winv.component_mul(fi).sum();
        ks.push(winv * fi * winv);
    }

    // matrix–matrix Hessian
    for (r, tr) in terms.iter().enumerate() {
        let rw = &tr.right * winv;
        let lw = &tr.left * winv;
        for (s_idx, ts) in terms.iter().enumerate() {
            let x1 = &rw * ts.left.transpose();
            let y1 = &ts.right * winv * tr.left.transpose();
            let x2 = &rw * ts.right.transpose();
            let y2 = &ts.left * winv * tr.left.transpose();
            let x3 = &lw * ts.left.transpose();
            let y3 = &ts.right * winv * tr.right.transpose();
            let x4 = &lw * ts.right.transpose();
            let y4 = &ts.left * winv * tr.right.transpose();
            let combos = [(&x1, &y1), (&x2, &y2), (&x3, &y3), (&x4, &y4)];
            for (k1, &(a, b)) in pair_lists[r].iter().enumerate() {
                let row = offsets[r] + k1;
                let sab = if a == b { 0.5 } else { 1.0 };
                for (k2, &(c, d)) in pair_lists[s_idx].iter().enumerate() {
                    let scd = if c == d { 0.5 } else { 1.0 };
                    let mut acc = 0.0;
                    for (x, y) in combos.iter() {
                        acc += x[(b, c)] * y[(d, a)]
                            + x[(b, d)] * y[(c, a)]
                            + x[(a, c)] * y[(d, b)]
                            + x[(a, d)] * y[(c, b)];
                    }
                    h[(row, offsets[s_idx] + k2)] += w * sab * scd * acc;
                }
            }
        }
    }

    // scalar–matrix and scalar–scalar Hessian
    for (q, (i, _)) in block.scalar_terms.iter().enumerate() {
        let k = &ks[q];
        for (r, term) in terms.iter().enumerate() {
            let m = &term.right * k * term.left.transpose();
            let s = &m + m.transpose();
            for (k1, &(a, b)) in pair_lists[r].iter().enumerate() {
                let v = w * basis_dot(&s, a, b);
                h[(offsets[r] + k1, *i)] += v;
                h[(*i, offsets[r] + k1)] += v;
            }
        }
        for (j, fj) in &block.scalar_terms {
            h[(*i, *j)] += w * k.component_mul(fj).sum();
        }
    }
}

enum PathEnd {
    Converged(DVector<f64>, f64),
    Stopped(DVector<f64>, f64),
    Stalled(DVector<f64>, f64, String),
}

/// Barrier method from a strictly feasible `y`. `stop(y, t)` is polled after
/// every Newton step and after each centring (third argument `true`).
fn central_path(
    barrier: &Barrier,
    space: &AffineSpace,
    mut y: DVector<f64>,
    tol: &Tolerances,
    steps: &mut usize,
    mut stop: impl FnMut(&DVector<f64>, f64, bool) -> bool,
) -> PathEnd {
    let nu = barrier.nu().max(1.0);
    let mu = 20.0;
    let mut t = 1.0;
    loop {
        // centering
        let mut inner = 0;
        loop {
            if *steps >= tol.max_newton {
                return PathEnd::Stalled(y, t, "Newton iteration limit".into());
            }
            let Some((g, h)) = barrier.derivatives(&y, t) else {
                return PathEnd::Stalled(y, t, "left the cone interior".into());
            };
            let gr = space.reduce_grad(&g);
            let hr = space.reduce_hess(&h);
            let Some(dz) = newton_direction(&hr, &gr) else {
                return PathEnd::Stalled(y, t, "singular Newton system".into());
            };
            let dec = -gr.dot(&dz);
            *steps += 1;
            inner += 1;
            if dec <= 1e-10 || !dec.is_finite() {
                break;
            }
            let dy = space.lift(&dz);
            let f0 = barrier.value(&y, t).unwrap_or(f64::INFINITY);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &y + &dy * alpha;
                if let Some(fv) = barrier.value(&cand, t) {
                    if fv <= f0 - 0.25 * alpha * dec {
                        y = cand;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if stop(&y, t, false) {
                return PathEnd::Stopped(y, t);
            }
            // no measurable progress along a short Newton step: the point is
            // centred to working precision
            if !accepted || alpha < 1e-8 {
                if dec < 1e-3 {
                    break;
                }
                if !accepted {
                    return PathEnd::Stalled(y, t, "line search failed".into());
                }
            }
            if inner > 200 {
                break;
            }
        }
        if stop(&y, t, true) {
            return PathEnd::Stopped(y, t);
        }
        let obj = barrier.objective(&y);
        if nu / t <= tol.gap * (1.0 + obj.abs()) {
            return PathEnd::Converged(y, t);
        }
        t *= mu;
    }
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    // Jacobi scaling, then regularised Cholesky with iterative refinement
    // against the unregularised matrix
    let n = h.nrows();
    let sc = DVector::from_fn(n, |i, _| {
        let d = h[(i, i)].abs();
        if d > 0.0 && d.is_finite() {
            1.0 / d.sqrt()
        } else {
            1.0
        }
    });
    let hs = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * sc[i] * sc[j]);
    let gs = -g.component_mul(&sc);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut hr = hs.clone();
        for i in 0..n {
            hr[(i, i)] += reg;
        }
        if let Some(ch) = hr.cholesky() {
            let mut d = ch.solve(&gs);
            for _ in 0..3 {
                let r = &gs - &hs * &d;
                d += ch.solve(&r);
            }
            let d = d.component_mul(&sc);
            if d.iter().all(|x| x.is_finite()) {
                return Some(d);
            }
        }
        reg = if reg == 0.0 { 1e-14 } else { reg * 100.0 };
    }
    None
}

enum PhaseOne {
    Feasible(DVector<f64>),
    Infeasible(f64),
    Failure(String),
}

fn phase_one(
    problem: &ConicProblem,
    space: &AffineSpace,
    tol: &Tolerances,
    steps: &mut usize,
) -> PhaseOne {
    let n = problem.n_vars;
    let y0 = space.y0.clone();
    // already strictly feasible?
    let viol = max_violation(problem, &y0);
    if viol < 0.0 {
        return PhaseOne::Feasible(y0);
    }
    let barrier = Barrier::phase_one(problem, tol.box_radius);
    let nu = barrier.nu();
    let mut z = DVector::zeros(n + 1);
    z.rows_mut(0, n).copy_from(&y0);
    z[n] = viol + 1.0;
    let lifted = AffineSpace {
        y0: z.clone(),
        basis: space.basis.as_ref().map(|b| {
            let mut nb = DMatrix::zeros(n + 1, b.ncols() + 1);
            nb.view_mut((0, 0), (n, b.ncols())).copy_from(b);
            nb[(n, b.ncols())] = 1.0;
            nb
        }),
    };
    let mut bound = f64::NEG_INFINITY;
    // `s − ν/t` is a valid lower bound only at centred points; once it
    // exceeds `−psd` no point is feasible by more than the PSD tolerance
    let end = central_path(&barrier, &lifted, z, tol, steps, |z, t, centred| {
        if centred {
            bound = bound.max(z[n] - nu / t);
        }
        z[n] < 0.0 || bound > -tol.psd
    });
    let (z, t) = match end {
        PathEnd::Converged(z, t) | PathEnd::Stopped(z, t) => (z, t),
        PathEnd::Stalled(z, t, why) => {
            if z[n] < 0.0 {
                (z, t)
            } else if z[n] - nu / t > -tol.gap || z[n] > 1e-6 {
                // the shift cannot be pushed below zero
                return PhaseOne::Infeasible(z[n] - nu / t);
            } else {
                return PhaseOne::Failure(format!("phase I stalled: {why}"));
            }
        }
    };
    if z[n] < 0.0 {
        PhaseOne::Feasible(z.rows(0, n).into_owned())
    } else {
        PhaseOne::Infeasible((z[n] - nu / t).max(bound))
    }
}

fn max_violation(problem: &ConicProblem, y: &DVector<f64>) -> f64 {
    let mut v = f64::NEG_INFINITY;
    for b in &problem.psd {
        let f = eval_block(problem, b, y);
        let lmin = f
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        v = v.max(-lmin);
    }
    for &var in &problem.logdet {
        let p = problem.matrix_value(y, var);
        let lmin = p
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        v = v.max(-lmin);
    }
    for a in &problem.linear {
        v = v.max(-a.eval(y));
    }
    for c in &problem.soc {
        let nx = c.x.iter().map(|a| a.eval(y).powi(2)).sum::<f64>().sqrt();
        v = v.max(nx - c.t.eval(y));
    }
    v
}
