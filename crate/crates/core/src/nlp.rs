//! Sparse nonlinear programming by sequential quadratic programming.
//!
//! Problems have the form
//!
//! ```text
//! min f(x)  s.t.  c_eq(x) = 0,  c_in(x) <= 0,  lb <= x <= ub
//! ```
//!
//! Each iteration solves a convex QP built from a Hessian approximation and
//! the constraint linearization, then backtracks on the L1 exact-penalty
//! merit function. The Hessian is either the problem's Lagrangian Hessian,
//! supplied as a sum of small dense blocks that are projected onto the
//! positive semidefinite cone, or a damped BFGS matrix (dense, small problems
//! only). QP subproblems are handed to Clarabel.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

/// A nonlinear program with sparse first derivatives.
///
/// Jacobian values are written in the order of the declared structure.
/// Inequalities are of the form `c_in(x) <= 0`.
pub trait NlpProblem {
    fn num_variables(&self) -> usize;

    fn num_eq(&self) -> usize {
        0
    }

    fn num_ineq(&self) -> usize {
        0
    }

    /// Lower and upper variable bounds; infinite entries are unbounded.
    fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_variables();
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    fn objective(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64], grad: &mut [f64]);

    fn eq_constraints(&self, _x: &[f64], _out: &mut [f64]) {}

    fn ineq_constraints(&self, _x: &[f64], _out: &mut [f64]) {}

    /// `(row, column)` pairs of the equality Jacobian.
    fn eq_jacobian_structure(&self) -> Vec<(usize, usize)> {
        Vec::new()
    }

    fn eq_jacobian_values(&self, _x: &[f64], _values: &mut [f64]) {}

    fn ineq_jacobian_structure(&self) -> Vec<(usize, usize)> {
        Vec::new()
    }

    fn ineq_jacobian_values(&self, _x: &[f64], _values: &mut [f64]) {}

    /// Variable index sets of the Hessian blocks. The Lagrangian Hessian is
    /// the sum of the blocks; an empty list means no exact Hessian.
    fn hessian_blocks(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }

    /// Fills the dense block matrices of
    /// `obj_factor * H_f + sum lambda_eq H_eq + sum lambda_ineq H_in`.
    fn hessian_block_values(
        &self,
        _x: &[f64],
        _obj_factor: f64,
        _lambda_eq: &[f64],
        _lambda_ineq: &[f64],
        _blocks: &mut [DMatrix<f64>],
    ) {
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HessianMode {
    /// Problem-supplied block Hessian, each block projected to be PSD.
    Exact,
    /// Dense damped BFGS approximation.
    DampedBfgs,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    pub constraint_tolerance: f64,
    pub hessian_mode: HessianMode,
    /// Eigenvalue floor used when projecting Hessian blocks.
    pub hessian_floor: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub min_step_length: f64,
    pub qp_tolerance: f64,
    /// Iterative refinement in the QP solver on the first attempt. A QP that
    /// fails without it is always retried with it.
    pub qp_refinement: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            kkt_tolerance: 1e-6,
            constraint_tolerance: 1e-6,
            hessian_mode: HessianMode::Exact,
            hessian_floor: 1e-8,
            armijo: 1e-4,
            min_step_length: 1e-10,
            qp_tolerance: 1e-10,
            qp_refinement: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
    /// The QP subproblem could not be solved.
    SubproblemFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub constraint_violation: f64,
    pub kkt_residual: f64,
    pub step_norm: f64,
    pub step_length: f64,
    pub merit: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub lambda_eq: Vec<f64>,
    pub lambda_ineq: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    /// Max-norm violation of the equality and inequality constraints.
    pub primal_infeasibility: f64,
    pub kkt_residual: f64,
    pub solve_wall_time: f64,
    pub log: Vec<IterationRecord>,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Iteration log as CSV.
    pub fn log_csv(&self) -> String {
        let mut out = String::from(
            "iteration,objective,constraint_violation,kkt_residual,step_norm,step_length,merit,penalty\n",
        );
        for r in &self.log {
            out.push_str(&r.iteration.to_string());
            out.push(',');
            crate::push_csv_fields(
                &mut out,
                &[
                    r.objective,
                    r.constraint_violation,
                    r.kkt_residual,
                    r.step_norm,
                    r.step_length,
                    r.merit,
                    r.penalty,
                ],
            );
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum NlpError {
    #[error("initial point has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("callback returned a non-finite value in {0}")]
    CallbackFailure(&'static str),
    #[error("exact Hessian mode requires the problem to provide Hessian blocks")]
    MissingHessian,
    #[error("invalid solver options: {0}")]
    InvalidOptions(&'static str),
}

/// Function and first-derivative values at one point.
struct Evaluation {
    f: f64,
    grad: Vec<f64>,
    c_eq: Vec<f64>,
    c_in: Vec<f64>,
    jac_eq: Vec<f64>,
    jac_in: Vec<f64>,
}

struct Structure {
    n: usize,
    m_eq: usize,
    m_in: usize,
    jac_eq: Vec<(usize, usize)>,
    jac_in: Vec<(usize, usize)>,
    lb: Vec<f64>,
    ub: Vec<f64>,
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn evaluate_values<P: NlpProblem + ?Sized>(
    problem: &P,
    s: &Structure,
    x: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>), NlpError> {
    let f = problem.objective(x);
    if !f.is_finite() {
        return Err(NlpError::CallbackFailure("objective"));
    }
    let mut c_eq = vec![0.0; s.m_eq];
    problem.eq_constraints(x, &mut c_eq);
    if !all_finite(&c_eq) {
        return Err(NlpError::CallbackFailure("equality constraints"));
    }
    let mut c_in = vec![0.0; s.m_in];
    problem.ineq_constraints(x, &mut c_in);
    if !all_finite(&c_in) {
        return Err(NlpError::CallbackFailure("inequality constraints"));
    }
    Ok((f, c_eq, c_in))
}

fn evaluate<P: NlpProblem + ?Sized>(
    problem: &P,
    s: &Structure,
    x: &[f64],
) -> Result<Evaluation, NlpError> {
    let (f, c_eq, c_in) = evaluate_values(problem, s, x)?;
    let mut grad = vec![0.0; s.n];
    problem.gradient(x, &mut grad);
    if !all_finite(&grad) {
        return Err(NlpError::CallbackFailure("gradient"));
    }
    let mut jac_eq = vec![0.0; s.jac_eq.len()];
    problem.eq_jacobian_values(x, &mut jac_eq);
    if !all_finite(&jac_eq) {
        return Err(NlpError::CallbackFailure("equality Jacobian"));
    }
    let mut jac_in = vec![0.0; s.jac_in.len()];
    problem.ineq_jacobian_values(x, &mut jac_in);
    if !all_finite(&jac_in) {
        return Err(NlpError::CallbackFailure("inequality Jacobian"));
    }
    Ok(Evaluation {
        f,
        grad,
        c_eq,
        c_in,
        jac_eq,
        jac_in,
    })
}

fn violation_l1(c_eq: &[f64], c_in: &[f64]) -> f64 {
    c_eq.iter().map(|c| c.abs()).sum::<f64>() + c_in.iter().map(|c| c.max(0.0)).sum::<f64>()
}

fn violation_max(c_eq: &[f64], c_in: &[f64]) -> f64 {
    c_eq.iter()
        .map(|c| c.abs())
        .chain(c_in.iter().map(|c| c.max(0.0)))
        .fold(0.0, f64::max)
}

/// `g + J_eq^T lambda_eq + J_in^T lambda_in`.
fn lagrangian_gradient(
    s: &Structure,
    ev: &Evaluation,
    lambda_eq: &[f64],
    lambda_in: &[f64],
) -> Vec<f64> {
    let mut r = ev.grad.clone();
    for (k, &(row, col)) in s.jac_eq.iter().enumerate() {
        r[col] += ev.jac_eq[k] * lambda_eq[row];
    }
    for (k, &(row, col)) in s.jac_in.iter().enumerate() {
        r[col] += ev.jac_in[k] * lambda_in[row];
    }
    r
}

/// Scaled KKT residual. Bound multipliers are implied by the sign of the
/// Lagrangian gradient at variables near their bounds; their complementarity
/// gap enters the residual.
fn kkt_residual(
    s: &Structure,
    ev: &Evaluation,
    x: &[f64],
    lambda_eq: &[f64],
    lambda_in: &[f64],
) -> f64 {
    let r = lagrangian_gradient(s, ev, lambda_eq, lambda_in);
    let mut stationarity: f64 = 0.0;
    for j in 0..s.n {
        let rj = r[j];
        let res = if rj > 0.0 && s.lb[j].is_finite() {
            rj.min(rj * (x[j] - s.lb[j]))
        } else if rj < 0.0 && s.ub[j].is_finite() {
            (-rj).min(-rj * (s.ub[j] - x[j]))
        } else {
            rj.abs()
        };
        stationarity = stationarity.max(res);
    }
    let mut complementarity: f64 = 0.0;
    for (mu, c) in lambda_in.iter().zip(&ev.c_in) {
        complementarity = complementarity.max((mu * c).abs()).max(-mu);
    }
    let multiplier_sum: f64 = lambda_eq.iter().map(|l| l.abs()).sum::<f64>()
        + lambda_in.iter().map(|l| l.abs()).sum::<f64>();
    let count = (s.m_eq + s.m_in + s.n).max(1) as f64;
    let scale = (multiplier_sum / count).max(100.0) / 100.0;
    stationarity.max(complementarity) / scale
}

fn project_psd(block: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = block.nrows();
    if n == 1 {
        return DMatrix::from_element(1, 1, block[(0, 0)].max(floor));
    }
    let sym = (block + block.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Upper-triangular Hessian approximation as triplets (duplicates summed).
struct HessianTriplets {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl HessianTriplets {
    fn quad_form(&self, d: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..self.vals.len() {
            let (i, j) = (self.rows[k], self.cols[k]);
            let w = if i == j { 1.0 } else { 2.0 };
            total += w * self.vals[k] * d[i] * d[j];
        }
        total
    }
}

fn exact_hessian<P: NlpProblem + ?Sized>(
    problem: &P,
    blocks: &[Vec<usize>],
    x: &[f64],
    lambda_eq: &[f64],
    lambda_in: &[f64],
    floor: f64,
) -> Result<HessianTriplets, NlpError> {
    let mut mats: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|idx| DMatrix::zeros(idx.len(), idx.len()))
        .collect();
    problem.hessian_block_values(x, 1.0, lambda_eq, lambda_in, &mut mats);
    let mut h = HessianTriplets {
        rows: Vec::new(),
        cols: Vec::new(),
        vals: Vec::new(),
    };
    for (idx, mat) in blocks.iter().zip(&mats) {
        if !all_finite(mat.as_slice()) {
            return Err(NlpError::CallbackFailure("Hessian"));
        }
        let projected = project_psd(mat, floor);
        for a in 0..idx.len() {
            for b in 0..idx.len() {
                // indices within a block are distinct
                let (i, j) = (idx[a], idx[b]);
                if i <= j {
                    h.rows.push(i);
                    h.cols.push(j);
                    h.vals.push(projected[(a, b)]);
                }
            }
        }
    }
    Ok(h)
}

fn dense_hessian(b: &DMatrix<f64>) -> HessianTriplets {
    let n = b.nrows();
    let mut h = HessianTriplets {
        rows: Vec::with_capacity(n * (n + 1) / 2),
        cols: Vec::with_capacity(n * (n + 1) / 2),
        vals: Vec::with_capacity(n * (n + 1) / 2),
    };
    for j in 0..n {
        for i in 0..=j {
            h.rows.push(i);
            h.cols.push(j);
            h.vals.push(b[(i, j)]);
        }
    }
    h
}

struct QpSolution {
    step: Vec<f64>,
    lambda_eq: Vec<f64>,
    lambda_in: Vec<f64>,
}

/// min 1/2 d'Hd + g'd  s.t.  J_eq d = -c_eq, J_in d <= -c_in, lb - x <= d <= ub - x.
fn solve_qp(
    s: &Structure,
    ev: &Evaluation,
    hessian: &HessianTriplets,
    x: &[f64],
    tolerance: f64,
    refinement: bool,
) -> Option<QpSolution> {
    let n = s.n;
    let p = CscMatrix::new_from_triplets(
        n,
        n,
        hessian.rows.clone(),
        hessian.cols.clone(),
        hessian.vals.clone(),
    );

    let mut rows = Vec::with_capacity(s.jac_eq.len() + s.jac_in.len() + 2 * n);
    let mut cols = Vec::with_capacity(rows.capacity());
    let mut vals = Vec::with_capacity(rows.capacity());
    let mut rhs = Vec::with_capacity(s.m_eq + s.m_in + 2 * n);
    for (k, &(r, c)) in s.jac_eq.iter().enumerate() {
        rows.push(r);
        cols.push(c);
        vals.push(ev.jac_eq[k]);
    }
    rhs.extend(ev.c_eq.iter().map(|c| -c));
    for (k, &(r, c)) in s.jac_in.iter().enumerate() {
        rows.push(s.m_eq + r);
        cols.push(c);
        vals.push(ev.jac_in[k]);
    }
    rhs.extend(ev.c_in.iter().map(|c| -c));
    let mut row = s.m_eq + s.m_in;
    for j in 0..n {
        if s.ub[j].is_finite() {
            rows.push(row);
            cols.push(j);
            vals.push(1.0);
            rhs.push(s.ub[j] - x[j]);
            row += 1;
        }
        if s.lb[j].is_finite() {
            rows.push(row);
            cols.push(j);
            vals.push(-1.0);
            rhs.push(x[j] - s.lb[j]);
            row += 1;
        }
    }
    let a = CscMatrix::new_from_triplets(row, n, rows, cols, vals);
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if s.m_eq > 0 {
        cones.push(ZeroConeT(s.m_eq));
    }
    if row > s.m_eq {
        cones.push(NonnegativeConeT(row - s.m_eq));
    }

    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(200)
        .tol_gap_abs(tolerance)
        .tol_gap_rel(tolerance)
        .tol_feas(tolerance)
        .tol_ktratio(tolerance.max(1e-8))
        .iterative_refinement_enable(refinement)
        .build()
        .ok()?;
    let mut solver = DefaultSolver::new(&p, &ev.grad, &a, &rhs, &cones, settings).ok()?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        _ => return None,
    }
    let z = &solver.solution.z;
    Some(QpSolution {
        step: solver.solution.x.clone(),
        lambda_eq: z[..s.m_eq].to_vec(),
        lambda_in: z[s.m_eq..s.m_eq + s.m_in].to_vec(),
    })
}

fn clamp_into(x: &mut [f64], lb: &[f64], ub: &[f64]) {
    for j in 0..x.len() {
        x[j] = x[j].max(lb[j]).min(ub[j]);
    }
}

/// Solves `problem` from `x0`. Deterministic for identical inputs.
pub fn solve<P: NlpProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    options: &SolveOptions,
) -> Result<SolveResult, NlpError> {
    let start = Instant::now();
    if !(options.kkt_tolerance > 0.0 && options.constraint_tolerance > 0.0) {
        return Err(NlpError::InvalidOptions("tolerances must be positive"));
    }
    let (lb, ub) = problem.variable_bounds();
    let s = Structure {
        n: problem.num_variables(),
        m_eq: problem.num_eq(),
        m_in: problem.num_ineq(),
        jac_eq: problem.eq_jacobian_structure(),
        jac_in: problem.ineq_jacobian_structure(),
        lb,
        ub,
    };
    if x0.len() != s.n {
        return Err(NlpError::DimensionMismatch {
            expected: s.n,
            got: x0.len(),
        });
    }
    let blocks = match options.hessian_mode {
        HessianMode::Exact => {
            let blocks = problem.hessian_blocks();
            if blocks.is_empty() {
                return Err(NlpError::MissingHessian);
            }
            blocks
        }
        HessianMode::DampedBfgs => Vec::new(),
    };
    let mut bfgs = match options.hessian_mode {
        HessianMode::DampedBfgs => Some(DMatrix::<f64>::identity(s.n, s.n)),
        HessianMode::Exact => None,
    };

    let mut x = x0.to_vec();
    clamp_into(&mut x, &s.lb, &s.ub);
    let mut ev = evaluate(problem, &s, &x)?;
    let mut lambda_eq = vec![0.0; s.m_eq];
    let mut lambda_in = vec![0.0; s.m_in];
    let mut penalty: f64 = 0.0;
    let mut log = Vec::new();
    let mut kkt = f64::INFINITY;

    let finish = |x: Vec<f64>,
                  ev: &Evaluation,
                  lambda_eq: Vec<f64>,
                  lambda_in: Vec<f64>,
                  status: SolveStatus,
                  iterations: usize,
                  kkt: f64,
                  log: Vec<IterationRecord>| SolveResult {
        x,
        lambda_eq,
        lambda_ineq: lambda_in,
        status,
        iterations,
        objective: ev.f,
        primal_infeasibility: violation_max(&ev.c_eq, &ev.c_in),
        kkt_residual: kkt,
        solve_wall_time: start.elapsed().as_secs_f64(),
        log,
    };

    for iteration in 0..options.max_iterations {
        let hessian = match &bfgs {
            Some(b) => dense_hessian(b),
            None => exact_hessian(
                problem,
                &blocks,
                &x,
                &lambda_eq,
                &lambda_in,
                options.hessian_floor,
            )?,
        };
        let qp = solve_qp(
            &s,
            &ev,
            &hessian,
            &x,
            options.qp_tolerance,
            options.qp_refinement,
        )
        .or_else(|| {
            (!options.qp_refinement)
                .then(|| solve_qp(&s, &ev, &hessian, &x, options.qp_tolerance, true))
                .flatten()
        });
        let Some(qp) = qp else {
            return Ok(finish(
                x,
                &ev,
                lambda_eq,
                lambda_in,
                SolveStatus::SubproblemFailure,
                iteration,
                kkt,
                log,
            ));
        };

        // the QP multipliers certify the current point
        kkt = kkt_residual(&s, &ev, &x, &qp.lambda_eq, &qp.lambda_in);
        let infeasibility = violation_max(&ev.c_eq, &ev.c_in);
        if kkt <= options.kkt_tolerance && infeasibility <= options.constraint_tolerance {
            return Ok(finish(
                x,
                &ev,
                qp.lambda_eq,
                qp.lambda_in,
                SolveStatus::Converged,
                iteration,
                kkt,
                log,
            ));
        }

        let d = qp.step;
        let step_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let viol = violation_l1(&ev.c_eq, &ev.c_in);
        let g_d: f64 = ev.grad.iter().zip(&d).map(|(g, di)| g * di).sum();
        let curvature = hessian.quad_form(&d).max(0.0);
        let max_multiplier = qp
            .lambda_eq
            .iter()
            .chain(&qp.lambda_in)
            .fold(0.0f64, |m, l| m.max(l.abs()));
        let mut required = max_multiplier;
        if viol > 0.0 {
            required = required.max((g_d + 0.5 * curvature) / (0.5 * viol));
        }
        if penalty < required {
            penalty = 1.1 * required + 1e-6;
        }

        let merit0 = ev.f + penalty * viol;
        let slope = g_d - penalty * viol;
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= options.min_step_length {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            clamp_into(&mut trial, &s.lb, &s.ub);
            if let Ok((f, c_eq, c_in)) = evaluate_values(problem, &s, &trial) {
                let merit = f + penalty * violation_l1(&c_eq, &c_in);
                let slack = 1e-13 * merit0.abs().max(1.0);
                if merit <= merit0 + options.armijo * alpha * slope.min(0.0) + slack {
                    accepted = Some((trial, merit));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, merit)) = accepted else {
            return Ok(finish(
                x,
                &ev,
                qp.lambda_eq,
                qp.lambda_in,
                SolveStatus::LineSearchFailure,
                iteration,
                kkt,
                log,
            ));
        };

        let ev_new = evaluate(problem, &s, &x_new)?;
        if let Some(b) = bfgs.as_mut() {
            damped_bfgs_update(
                b,
                &s,
                &x,
                &x_new,
                &ev,
                &ev_new,
                &qp.lambda_eq,
                &qp.lambda_in,
            );
        }
        log.push(IterationRecord {
            iteration,
            objective: ev_new.f,
            constraint_violation: violation_max(&ev_new.c_eq, &ev_new.c_in),
            kkt_residual: kkt,
            step_norm: alpha * step_norm,
            step_length: alpha,
            merit,
            penalty,
        });
        x = x_new;
        ev = ev_new;
        lambda_eq = qp.lambda_eq;
        lambda_in = qp.lambda_in;
    }

    Ok(finish(
        x,
        &ev,
        lambda_eq,
        lambda_in,
        SolveStatus::MaxIterations,
        options.max_iterations,
        kkt,
        log,
    ))
}

#[allow(clippy::too_many_arguments)]
fn damped_bfgs_update(
    b: &mut DMatrix<f64>,
    s_: &Structure,
    x: &[f64],
    x_new: &[f64],
    ev: &Evaluation,
    ev_new: &Evaluation,
    lambda_eq: &[f64],
    lambda_in: &[f64],
) {
    let s = DVector::from_iterator(x.len(), x_new.iter().zip(x).map(|(a, b)| a - b));
    if s.norm() < 1e-14 {
        return;
    }
    let g_new = lagrangian_gradient(s_, ev_new, lambda_eq, lambda_in);
    let g_old = lagrangian_gradient(s_, ev, lambda_eq, lambda_in);
    let y = DVector::from_iterator(x.len(), g_new.iter().zip(&g_old).map(|(a, b)| a - b));
    let bs = &*b * &s;
    let sbs = s.dot(&bs);
    if sbs <= 0.0 {
        return;
    }
    let sy = s.dot(&y);
    // Powell damping keeps the update positive definite
    let r = if sy >= 0.2 * sbs {
        y
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        &y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

/// Worst finite-difference disagreement within one derivative block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockCheck {
    /// `max |fd - analytic| / max(1, |analytic|)`.
    pub max_relative_error: f64,
    /// Entry `(row, column)` where the maximum occurs.
    pub worst_entry: Option<(usize, usize)>,
    /// Entries with a finite-difference value but no declared structure.
    pub undeclared_nonzeros: usize,
}

impl Default for BlockCheck {
    fn default() -> Self {
        Self {
            max_relative_error: 0.0,
            worst_entry: None,
            undeclared_nonzeros: 0,
        }
    }
}

impl BlockCheck {
    fn record(&mut self, row: usize, col: usize, fd: f64, analytic: f64) {
        let err = (fd - analytic).abs() / analytic.abs().max(1.0);
        if err > self.max_relative_error {
            self.max_relative_error = err;
            self.worst_entry = Some((row, col));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub gradient: BlockCheck,
    pub eq_jacobian: BlockCheck,
    pub ineq_jacobian: BlockCheck,
    /// Relative error of all directional derivatives along one seeded
    /// random direction.
    pub directional: f64,
}

impl DerivativeReport {
    pub fn max_relative_error(&self) -> f64 {
        self.gradient
            .max_relative_error
            .max(self.eq_jacobian.max_relative_error)
            .max(self.ineq_jacobian.max_relative_error)
            .max(self.directional)
    }
}

fn column_index(structure: &[(usize, usize)], n: usize) -> Vec<Vec<(usize, usize)>> {
    let mut cols = vec![Vec::new(); n];
    for (k, &(row, col)) in structure.iter().enumerate() {
        cols[col].push((row, k));
    }
    cols
}

/// Compares declared first derivatives against central differences at `x`,
/// column by column, plus one directional check along a random direction
/// drawn from `seed`.
///
/// Steps are `cbrt(eps)` relative to the variable. The objective gets its
/// step scaled by `cbrt(|f|)` as well, which keeps rounding error in large
/// objective values from swamping the difference quotient.
pub fn check_derivatives<P: NlpProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    seed: u64,
) -> Result<DerivativeReport, NlpError> {
    let (lb, ub) = problem.variable_bounds();
    let s = Structure {
        n: problem.num_variables(),
        m_eq: problem.num_eq(),
        m_in: problem.num_ineq(),
        jac_eq: problem.eq_jacobian_structure(),
        jac_in: problem.ineq_jacobian_structure(),
        lb,
        ub,
    };
    if x.len() != s.n {
        return Err(NlpError::DimensionMismatch {
            expected: s.n,
            got: x.len(),
        });
    }
    let ev = evaluate(problem, &s, x)?;
    let eq_cols = column_index(&s.jac_eq, s.n);
    let in_cols = column_index(&s.jac_in, s.n);
    let mut report = DerivativeReport {
        gradient: BlockCheck::default(),
        eq_jacobian: BlockCheck::default(),
        ineq_jacobian: BlockCheck::default(),
        directional: 0.0,
    };

    let compare_column = |check: &mut BlockCheck,
                          col: usize,
                          fd: &[f64],
                          declared: &[(usize, usize)],
                          values: &[f64]| {
        let mut analytic = vec![0.0; fd.len()];
        let mut present = vec![false; fd.len()];
        for &(row, k) in declared {
            analytic[row] += values[k];
            present[row] = true;
        }
        for row in 0..fd.len() {
            if !present[row] && fd[row].abs() > 1e-6 {
                check.undeclared_nonzeros += 1;
            }
            check.record(row, col, fd[row], analytic[row]);
        }
    };

    const STEP: f64 = 6e-6;
    let f_scale = ev.f.abs().max(1.0).cbrt();
    let objective_difference =
        |x: &[f64], dir: &dyn Fn(usize) -> f64, h: f64| -> Result<f64, NlpError> {
            let shifted = |sign: f64| -> Vec<f64> {
                x.iter()
                    .enumerate()
                    .map(|(i, a)| a + sign * h * dir(i))
                    .collect()
            };
            let (fp, fm) = (
                problem.objective(&shifted(1.0)),
                problem.objective(&shifted(-1.0)),
            );
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(NlpError::CallbackFailure("objective"));
            }
            Ok((fp - fm) / (2.0 * h))
        };

    let mut xp = x.to_vec();
    for j in 0..s.n {
        let h = STEP * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let (_, ep, ip) = evaluate_values(problem, &s, &xp)?;
        xp[j] = x[j] - h;
        let (_, em, im) = evaluate_values(problem, &s, &xp)?;
        xp[j] = x[j];

        let unit = |i: usize| if i == j { 1.0 } else { 0.0 };
        report.gradient.record(
            0,
            j,
            objective_difference(x, &unit, h * f_scale)?,
            ev.grad[j],
        );
        let fd_eq: Vec<f64> = ep
            .iter()
            .zip(&em)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        compare_column(&mut report.eq_jacobian, j, &fd_eq, &eq_cols[j], &ev.jac_eq);
        let fd_in: Vec<f64> = ip
            .iter()
            .zip(&im)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        compare_column(
            &mut report.ineq_jacobian,
            j,
            &fd_in,
            &in_cols[j],
            &ev.jac_in,
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..s.n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    dir.iter_mut().for_each(|v| *v /= norm);
    let h = STEP * x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let shifted =
        |sign: f64| -> Vec<f64> { x.iter().zip(&dir).map(|(a, d)| a + sign * h * d).collect() };
    let (_, ep, ip) = evaluate_values(problem, &s, &shifted(1.0))?;
    let (_, em, im) = evaluate_values(problem, &s, &shifted(-1.0))?;
    let rel = |fd: f64, an: f64| (fd - an).abs() / an.abs().max(1.0);
    let g_dir: f64 = ev.grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
    let mut directional = rel(objective_difference(x, &|i| dir[i], h * f_scale)?, g_dir);
    let mut jd_eq = vec![0.0; s.m_eq];
    for (k, &(row, col)) in s.jac_eq.iter().enumerate() {
        jd_eq[row] += ev.jac_eq[k] * dir[col];
    }
    for row in 0..s.m_eq {
        directional = directional.max(rel((ep[row] - em[row]) / (2.0 * h), jd_eq[row]));
    }
    let mut jd_in = vec![0.0; s.m_in];
    for (k, &(row, col)) in s.jac_in.iter().enumerate() {
        jd_in[row] += ev.jac_in[k] * dir[col];
    }
    for row in 0..s.m_in {
        directional = directional.max(rel((ip[row] - im[row]) / (2.0 * h), jd_in[row]));
    }
    report.directional = directional;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = 1/2 x'Qx + c'x with a fixed SPD Q.
    struct Quadratic;

    const Q: [[f64; 3]; 3] = [[4.0, 1.0, 0.0], [1.0, 3.0, -0.5], [0.0, -0.5, 2.0]];
    const C: [f64; 3] = [-1.0, 2.0, 0.5];

    impl NlpProblem for Quadratic {
        fn num_variables(&self) -> usize {
            3
        }
        fn objective(&self, x: &[f64]) -> f64 {
            let mut f = 0.0;
            for i in 0..3 {
                f += C[i] * x[i];
                for j in 0..3 {
                    f += 0.5 * x[i] * Q[i][j] * x[j];
                }
            }
            f
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            for i in 0..3 {
                g[i] = C[i] + (0..3).map(|j| Q[i][j] * x[j]).sum::<f64>();
            }
        }
        fn hessian_blocks(&self) -> Vec<Vec<usize>> {
            vec![vec![0, 1, 2]]
        }
        fn hessian_block_values(
            &self,
            _x: &[f64],
            w: f64,
            _: &[f64],
            _: &[f64],
            blocks: &mut [DMatrix<f64>],
        ) {
            blocks[0] = DMatrix::from_fn(3, 3, |i, j| w * Q[i][j]);
        }
    }

    struct Rosenbrock;

    impl NlpProblem for Rosenbrock {
        fn num_variables(&self) -> usize {
            2
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            g[1] = 200.0 * (x[1] - x[0] * x[0]);
        }
        fn hessian_blocks(&self) -> Vec<Vec<usize>> {
            vec![vec![0, 1]]
        }
        fn hessian_block_values(
            &self,
            x: &[f64],
            w: f64,
            _: &[f64],
            _: &[f64],
            blocks: &mut [DMatrix<f64>],
        ) {
            blocks[0] = DMatrix::from_row_slice(
                2,
                2,
                &[
                    w * (2.0 - 400.0 * x[1] + 1200.0 * x[0] * x[0]),
                    w * (-400.0 * x[0]),
                    w * (-400.0 * x[0]),
                    w * 200.0,
                ],
            );
        }
    }

    /// min |x|^2 s.t. x1 + x2 = 1.
    struct EqualityQp;

    impl NlpProblem for EqualityQp {
        fn num_variables(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x[0] * x[0] + x[1] * x[1]
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            g[0] = 2.0 * x[0];
            g[1] = 2.0 * x[1];
        }
        fn eq_constraints(&self, x: &[f64], out: &mut [f64]) {
            out[0] = x[0] + x[1] - 1.0;
        }
        fn eq_jacobian_structure(&self) -> Vec<(usize, usize)> {
            vec![(0, 0), (0, 1)]
        }
        fn eq_jacobian_values(&self, _x: &[f64], v: &mut [f64]) {
            v[0] = 1.0;
            v[1] = 1.0;
        }
        fn hessian_blocks(&self) -> Vec<Vec<usize>> {
            vec![vec![0], vec![1]]
        }
        fn hessian_block_values(
            &self,
            _x: &[f64],
            w: f64,
            _: &[f64],
            _: &[f64],
            blocks: &mut [DMatrix<f64>],
        ) {
            blocks[0][(0, 0)] = 2.0 * w;
            blocks[1][(0, 0)] = 2.0 * w;
        }
    }

    #[test]
    fn quadratic_in_one_step() {
        let opts = SolveOptions {
            kkt_tolerance: 1e-10,
            ..Default::default()
        };
        let res = solve(&Quadratic, &[5.0, -3.0, 2.0], &opts).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        assert!(res.iterations <= 3, "{} iterations", res.iterations);
        assert!(res.kkt_residual <= 1e-10);
        let q = nalgebra::Matrix3::from_fn(|i, j| Q[i][j]);
        let expected = q
            .lu()
            .solve(&-nalgebra::Vector3::from_column_slice(&C))
            .unwrap();
        for i in 0..3 {
            assert!((res.x[i] - expected[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn rosenbrock_exact_and_bfgs() {
        for mode in [HessianMode::Exact, HessianMode::DampedBfgs] {
            let opts = SolveOptions {
                hessian_mode: mode,
                kkt_tolerance: 1e-9,
                ..Default::default()
            };
            let res = solve(&Rosenbrock, &[-1.2, 1.0], &opts).unwrap();
            assert_eq!(res.status, SolveStatus::Converged, "{mode:?}");
            assert!((res.x[0] - 1.0).abs() < 1e-6, "{mode:?}: {:?}", res.x);
            assert!((res.x[1] - 1.0).abs() < 1e-6, "{mode:?}: {:?}", res.x);
        }
    }

    #[test]
    fn equality_qp_kkt() {
        let res = solve(&EqualityQp, &[3.0, -7.0], &SolveOptions::default()).unwrap();
        assert!(res.converged());
        assert!((res.x[0] - 0.5).abs() < 1e-8);
        assert!((res.x[1] - 0.5).abs() < 1e-8);
        // stationarity 2x + lambda = 0 gives lambda = -1
        assert!((res.lambda_eq[0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn exact_mode_needs_blocks() {
        struct NoHessian;
        impl NlpProblem for NoHessian {
            fn num_variables(&self) -> usize {
                1
            }
            fn objective(&self, x: &[f64]) -> f64 {
                x[0] * x[0]
            }
            fn gradient(&self, x: &[f64], g: &mut [f64]) {
                g[0] = 2.0 * x[0];
            }
        }
        assert!(matches!(
            solve(&NoHessian, &[1.0], &SolveOptions::default()),
            Err(NlpError::MissingHessian)
        ));
        let bfgs = SolveOptions {
            hessian_mode: HessianMode::DampedBfgs,
            ..Default::default()
        };
        assert!(solve(&NoHessian, &[1.0], &bfgs).unwrap().converged());
        assert!(matches!(
            solve(&NoHessian, &[1.0, 2.0], &bfgs),
            Err(NlpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_callback_is_reported() {
        struct Broken;
        impl NlpProblem for Broken {
            fn num_variables(&self) -> usize {
                1
            }
            fn objective(&self, _x: &[f64]) -> f64 {
                f64::NAN
            }
            fn gradient(&self, _x: &[f64], g: &mut [f64]) {
                g[0] = 0.0;
            }
            fn hessian_blocks(&self) -> Vec<Vec<usize>> {
                vec![vec![0]]
            }
        }
        assert!(matches!(
            solve(&Broken, &[0.0], &SolveOptions::default()),
            Err(NlpError::CallbackFailure("objective"))
        ));
    }

    #[test]
    fn psd_projection_floors_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = project_psd(&m, 1e-8);
        let eig = p.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= 1e-8 - 1e-15));
        // the positive eigenpair (3, [1,1]/sqrt2) is kept
        let v = nalgebra::DVector::from_vec(vec![1.0, 1.0]);
        assert!(((&p * &v) - &v * 3.0).norm() < 1e-12);
    }

    #[test]
    fn linear_block_derivatives_are_exact() {
        let report = check_derivatives(&EqualityQp, &[0.3, -0.2], 1).unwrap();
        assert!(report.eq_jacobian.max_relative_error <= 1e-10);
        assert_eq!(report.eq_jacobian.undeclared_nonzeros, 0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        struct Wrong;
        impl NlpProblem for Wrong {
            fn num_variables(&self) -> usize {
                2
            }
            fn objective(&self, x: &[f64]) -> f64 {
                x[0].sin() + x[1] * x[1]
            }
            fn gradient(&self, x: &[f64], g: &mut [f64]) {
                g[0] = x[0].cos();
                g[1] = x[1]; // should be 2 x[1]
            }
        }
        let report = check_derivatives(&Wrong, &[0.4, 1.5], 3).unwrap();
        assert!(report.gradient.max_relative_error > 1e-2);
        assert_eq!(report.gradient.worst_entry, Some((0, 1)));
    }
}
