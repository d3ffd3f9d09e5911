//! Nyström kernel logistic regression for the log-density ratio.
//!
//! Minimizes
//!
//! ```text
//! L(w) = (1/N) Σᵢ ℓ(yᵢ, f_w(xᵢ)) + λ wᵀ K_MM w,     f_w(x) = Σⱼ wⱼ k_σ(x, cⱼ)
//! ℓ(0, f) = a·log(1 + e^f),  ℓ(1, f) = log(1 + e^−f),  a = N(R)/N_ℛ
//! ```
//!
//! with damped Newton steps.
//!
//! The centers' Gram matrix is numerically low-rank for any useful kernel
//! width, so the solver first runs a pivoted Cholesky on `K_MM`. Centers
//! whose kernel features are reproduced by the pivots to within
//! `PIVOT_TOL` get zero weight; on the pivot set `S` the weights are
//! written as `w_S = L_SS⁻ᵀ α`, which turns the regularizer into `‖α‖²` and
//! keeps every quantity bounded. Each Newton system in `α` is solved by
//! conjugate gradient preconditioned with an estimate of the Hessian from
//! a stratified row sample of a few rows per retained center. Only the
//! `N × |S|` kernel block is
//! ever materialized.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{NplmError, Result};
use crate::exec::Execution;
use crate::kernel::{axpy, dot, kernel_block, sample_center_indices};
use crate::seeds::{derive_seed, Stream};
use crate::types::{check_dims, Dataset, NplmConfig, Standardizer, TrainedModel};

/// Largest exponent used when evaluating `e^f` downstream.
pub const EXP_CLAMP: f64 = 50.0;

/// Residual-diagonal threshold of the pivoted Cholesky, relative to the
/// unit kernel diagonal.
pub const PIVOT_TOL: f64 = 1e-10;

const MAX_HALVINGS: usize = 30;

/// Rows sampled per retained center when estimating the Hessian for the
/// preconditioner.
const PRECOND_ROWS_PER_RANK: usize = 8;

/// Pooled training sample: reference rows (label 0) followed by data rows
/// (label 1).
#[derive(Debug, Clone)]
pub struct LabeledTrainingSet {
    pub points: Dataset,
    pub n_ref: usize,
    pub n_data: usize,
    /// `N(R)/N_ℛ`.
    pub ref_weight: f64,
}

impl LabeledTrainingSet {
    /// `expected_count` defaults to the data sample size.
    pub fn new(reference: &Dataset, data: &Dataset, expected_count: Option<f64>) -> Result<Self> {
        check_dims(reference.dim(), data.dim())?;
        let n_ref = reference.n_points();
        let n_data = data.n_points();
        let expected = expected_count.unwrap_or(n_data as f64);
        Ok(Self {
            points: reference.concat(data, "training")?,
            n_ref,
            n_data,
            ref_weight: expected / n_ref as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.n_ref + self.n_data
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<u8> {
        let mut y = vec![0u8; self.n_ref];
        y.resize(self.len(), 1);
        y
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `softplus(z + h) − softplus(z)`, cancellation-free for small `h`.
#[inline]
fn softplus_delta(z: f64, h: f64) -> f64 {
    if h.abs() < 1.0 {
        (h.exp_m1() * sigmoid(z)).ln_1p()
    } else {
        softplus(z + h) - softplus(z)
    }
}

#[inline]
fn point_loss(is_ref: bool, a: f64, f: f64) -> f64 {
    if is_ref {
        a * softplus(f)
    } else {
        softplus(-f)
    }
}

#[inline]
fn point_dloss(is_ref: bool, a: f64, f: f64) -> f64 {
    if is_ref {
        a * sigmoid(f)
    } else {
        -sigmoid(-f)
    }
}

#[inline]
fn point_d2loss(is_ref: bool, a: f64, f: f64) -> f64 {
    let c = sigmoid(f) * sigmoid(-f);
    if is_ref {
        a * c
    } else {
        c
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Kernel blocks of one training problem in the plain weight
/// parametrization: `K_NM` (training points × centers) and `K_MM`.
#[derive(Debug, Clone)]
pub struct KernelProblem {
    knm: Vec<f64>,
    kmm: Vec<f64>,
    n_ref: usize,
    n_data: usize,
    m: usize,
    ref_weight: f64,
    exec: Execution,
}

impl KernelProblem {
    pub fn new(train: &LabeledTrainingSet, centers: &Dataset, sigma: f64) -> Result<Self> {
        check_dims(train.points.dim(), centers.dim())?;
        let exec = Execution::default();
        let dim = centers.dim();
        Ok(Self {
            knm: kernel_block(exec, train.points.values(), centers.values(), dim, sigma),
            kmm: kernel_block(exec, centers.values(), centers.values(), dim, sigma),
            n_ref: train.n_ref,
            n_data: train.n_data,
            m: centers.n_points(),
            ref_weight: train.ref_weight,
            exec,
        })
    }

    fn n(&self) -> usize {
        self.n_ref + self.n_data
    }

    pub fn n_centers(&self) -> usize {
        self.m
    }

    /// `f_w` at every training point.
    pub fn predict(&self, w: &[f64]) -> Vec<f64> {
        let m = self.m;
        self.exec.map(self.n(), |i| dot(&self.knm[i * m..(i + 1) * m], w))
    }

    fn quad(&self, v: &[f64]) -> f64 {
        let kv: Vec<f64> = self.kmm.chunks_exact(self.m).map(|row| dot(row, v)).collect();
        dot(v, &kv)
    }

    /// Regularized empirical risk `L(w)`.
    pub fn risk(&self, w: &[f64], lambda: f64) -> f64 {
        let f = self.predict(w);
        let (n_ref, a) = (self.n_ref, self.ref_weight);
        let loss = self.exec.block_sum(f.len(), 1, |s, e, acc| {
            for (i, &fi) in f.iter().enumerate().take(e).skip(s) {
                acc[0] += point_loss(i < n_ref, a, fi);
            }
        })[0];
        loss / self.n() as f64 + lambda * self.quad(w)
    }

    /// Analytic gradient `∇_w L(w)`.
    pub fn gradient(&self, w: &[f64], lambda: f64) -> Vec<f64> {
        let f = self.predict(w);
        let (n_ref, a, m) = (self.n_ref, self.ref_weight, self.m);
        let mut g = self.exec.block_sum(self.n(), m, |s, e, acc| {
            for i in s..e {
                axpy(point_dloss(i < n_ref, a, f[i]), &self.knm[i * m..(i + 1) * m], acc);
            }
        });
        let n = self.n() as f64;
        for (gi, row) in g.iter_mut().zip(self.kmm.chunks_exact(m)) {
            *gi = *gi / n + 2.0 * lambda * dot(row, w);
        }
        g
    }
}

/// Greedy pivoted Cholesky of a symmetric PSD matrix given row-major.
/// Returns the pivot order and the `n × r` factor (row-major) with
/// `A ≈ L Lᵀ`; stops when the largest residual diagonal falls below `tol`.
fn pivoted_cholesky(a: &[f64], n: usize, tol: f64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut pivots = Vec::new();
    let mut used = vec![false; n];
    loop {
        let mut best = None;
        for (j, &dj) in diag.iter().enumerate() {
            if !used[j] && best.is_none_or(|(_, bd)| dj > bd) {
                best = Some((j, dj));
            }
        }
        let Some((p, dp)) = best else { break };
        if !(dp > tol) {
            break;
        }
        let lpp = dp.sqrt();
        used[p] = true;
        let k = pivots.len();
        let prow = rows[p].clone();
        for j in 0..n {
            let v = if j == p {
                lpp
            } else if used[j] {
                0.0
            } else {
                (a[j * n + p] - dot(&rows[j][..k], &prow[..k])) / lpp
            };
            rows[j].push(v);
            if !used[j] {
                diag[j] -= v * v;
            }
        }
        diag[p] = 0.0;
        pivots.push(p);
    }
    (pivots, rows)
}

/// Training problem in the reduced variable `α` (see module docs).
struct ReducedProblem {
    /// `N × r`, columns are the pivot centers.
    kns: Vec<f64>,
    /// `L_SS`, lower triangular in pivot order.
    l_ss: DMatrix<f64>,
    /// α-space features of the preconditioner's row sample, `s × r`.
    sample_features: DMatrix<f64>,
    /// Training-set positions of the sampled rows.
    sample_rows: Vec<usize>,
    /// Per-row weight of the sample in the Hessian estimate.
    sample_weights: Vec<f64>,
    pivots: Vec<usize>,
    n_ref: usize,
    n_data: usize,
    r: usize,
    ref_weight: f64,
    exec: Execution,
}

impl ReducedProblem {
    fn build(exec: Execution, train: &LabeledTrainingSet, center_rows: &[usize], sigma: f64) -> Result<Self> {
        let dim = train.points.dim();
        let m = center_rows.len();
        let mut centers = Vec::with_capacity(m * dim);
        for &i in center_rows {
            centers.extend_from_slice(train.points.row(i));
        }
        let kmm = kernel_block(exec, &centers, &centers, dim, sigma);
        let (pivots, rows) = pivoted_cholesky(&kmm, m, PIVOT_TOL);
        let r = pivots.len();
        if r == 0 {
            return Err(NplmError::Numerical("center Gram matrix has no usable pivot".into()));
        }
        let l_ss = DMatrix::from_fn(r, r, |i, j| if j <= i { rows[pivots[i]][j] } else { 0.0 });
        let mut pivot_centers = Vec::with_capacity(r * dim);
        for &p in &pivots {
            pivot_centers.extend_from_slice(&centers[p * dim..(p + 1) * dim]);
        }
        let kns = kernel_block(exec, train.points.values(), &pivot_centers, dim, sigma);
        let (sample_rows, sample_weights) = strided_sample(train.n_ref, train.n_data, PRECOND_ROWS_PER_RANK * r);
        let mut sample_features = DMatrix::from_fn(sample_rows.len(), r, |i, j| kns[sample_rows[i] * r + j]);
        // Rows become L_SS⁻¹ k_S(x), the features seen by α.
        let l_inv = l_ss
            .solve_lower_triangular(&DMatrix::identity(r, r))
            .ok_or_else(|| NplmError::Numerical("singular pivot block".into()))?;
        sample_features *= l_inv.transpose();
        Ok(Self {
            kns,
            l_ss,
            sample_features,
            sample_rows,
            sample_weights,
            pivots,
            n_ref: train.n_ref,
            n_data: train.n_data,
            r,
            ref_weight: train.ref_weight,
            exec,
        })
    }

    fn n(&self) -> usize {
        self.n_ref + self.n_data
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.kns[i * self.r..(i + 1) * self.r]
    }

    /// `w_S = L_SS⁻ᵀ α`
    fn weights(&self, alpha: &[f64]) -> Vec<f64> {
        let mut x = DVector::from_column_slice(alpha);
        self.l_ss.tr_solve_lower_triangular_mut(&mut x);
        x.as_slice().to_vec()
    }

    /// `L_SS⁻¹ v`
    fn to_alpha_space(&self, v: Vec<f64>) -> Vec<f64> {
        let mut x = DVector::from_vec(v);
        self.l_ss.solve_lower_triangular_mut(&mut x);
        x.as_slice().to_vec()
    }

    fn predict(&self, alpha: &[f64]) -> Vec<f64> {
        let w = self.weights(alpha);
        self.exec.map(self.n(), |i| dot(self.row(i), &w))
    }

    fn risk(&self, f: &[f64], alpha: &[f64], lambda: f64) -> f64 {
        let (n_ref, a) = (self.n_ref, self.ref_weight);
        let loss = self.exec.block_sum(f.len(), 1, |s, e, acc| {
            for (i, &fi) in f.iter().enumerate().take(e).skip(s) {
                acc[0] += point_loss(i < n_ref, a, fi);
            }
        })[0];
        loss / self.n() as f64 + lambda * dot(alpha, alpha)
    }

    fn gradient(&self, f: &[f64], alpha: &[f64], lambda: f64) -> Vec<f64> {
        let (n_ref, a) = (self.n_ref, self.ref_weight);
        let n = self.n() as f64;
        let g = self.exec.block_sum(self.n(), self.r, |s, e, acc| {
            for i in s..e {
                axpy(point_dloss(i < n_ref, a, f[i]) / n, self.row(i), acc);
            }
        });
        let mut g = self.to_alpha_space(g);
        axpy(2.0 * lambda, alpha, &mut g);
        g
    }

    /// Larger of the two class contributions to the loss gradient at
    /// `α = 0`. Gradient norms are reported relative to this scale, which
    /// stays meaningful when the contributions cancel, as they do under the
    /// null.
    fn gradient_scale(&self) -> f64 {
        let n = self.n() as f64;
        let class_norm = |start: usize, end: usize, weight: f64| {
            let g = self.exec.block_sum(end - start, self.r, |s, e, acc| {
                for i in s..e {
                    axpy(weight / n, self.row(start + i), acc);
                }
            });
            norm(&self.to_alpha_space(g))
        };
        let r = class_norm(0, self.n_ref, 0.5 * self.ref_weight);
        let d = class_norm(self.n_ref, self.n(), 0.5);
        r.max(d)
    }

    /// `H v` with curvature weights `d`.
    fn hvp(&self, d: &[f64], v: &[f64], lambda: f64) -> Vec<f64> {
        let n = self.n() as f64;
        let wv = self.weights(v);
        let s = self.exec.block_sum(self.n(), self.r, |start, end, acc| {
            for (i, di) in d.iter().enumerate().take(end).skip(start) {
                let row = self.row(i);
                axpy(di * dot(row, &wv) / n, row, acc);
            }
        });
        let mut out = self.to_alpha_space(s);
        axpy(2.0 * lambda, v, &mut out);
        out
    }

    /// Change in risk along `α + t·δ` where `u` are the fitted-value
    /// increments of `δ`.
    #[allow(clippy::too_many_arguments)]
    fn risk_delta(&self, f: &[f64], u: &[f64], t: f64, alpha: &[f64], delta: &[f64], lambda: f64) -> f64 {
        let (n_ref, a) = (self.n_ref, self.ref_weight);
        let loss = self.exec.block_sum(f.len(), 1, |s, e, acc| {
            for i in s..e {
                let h = t * u[i];
                acc[0] += if i < n_ref {
                    a * softplus_delta(f[i], h)
                } else {
                    softplus_delta(-f[i], -h)
                };
            }
        })[0];
        let reg = 2.0 * t * dot(alpha, delta) + t * t * dot(delta, delta);
        loss / self.n() as f64 + lambda * reg
    }

    /// Cholesky factor of the sampled Hessian estimate
    /// `Σ_sample cᵢ Dᵢ φᵢφᵢᵀ + 2λI`.
    fn preconditioner(&self, d: &[f64], lambda: f64) -> Result<DMatrix<f64>> {
        let mut g = self.sample_features.clone();
        for (i, (&row, &c)) in self.sample_rows.iter().zip(&self.sample_weights).enumerate() {
            g.row_mut(i).scale_mut((c * d[row]).sqrt());
        }
        let mut p = g.transpose() * &g;
        for i in 0..self.r {
            p[(i, i)] += 2.0 * lambda;
        }
        Cholesky::new(p)
            .map(|c| c.unpack())
            .ok_or_else(|| NplmError::Numerical("preconditioner is not positive definite".into()))
    }
}

/// Evenly strided rows from each class, about `target` in total, with
/// weights that make the weighted sum estimate `(1/N) Σ_all`.
fn strided_sample(n_ref: usize, n_data: usize, target: usize) -> (Vec<usize>, Vec<f64>) {
    let n = n_ref + n_data;
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for (start, count) in [(0, n_ref), (n_ref, n_data)] {
        if count == 0 {
            continue;
        }
        let want = ((target as f64 * count as f64 / n as f64).ceil() as usize).clamp(1, count);
        let stride = count as f64 / want as f64;
        for k in 0..want {
            rows.push(start + (k as f64 * stride) as usize);
            weights.push(count as f64 / (want as f64 * n as f64));
        }
    }
    (rows, weights)
}

/// `(L Lᵀ)⁻¹ v`
fn chol_solve(l: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let mut x = DVector::from_column_slice(v);
    l.solve_lower_triangular_mut(&mut x);
    l.tr_solve_lower_triangular_mut(&mut x);
    x.as_slice().to_vec()
}

/// Per-fit trace, mostly for tests and diagnostics.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: TrainedModel,
    /// `f` at every training point (reference rows first), in-sample.
    pub fitted: Vec<f64>,
    /// Risk after each accepted Newton step, starting at `w = 0`.
    pub risk_history: Vec<f64>,
    pub cg_iterations: usize,
    /// Number of centers carrying weight after the rank-revealing step.
    pub effective_rank: usize,
    /// Positions of the centers within the pooled training set.
    pub center_indices: Vec<usize>,
}

/// Fits the log-ratio model on `reference` (label 0) vs `data` (label 1).
pub fn fit(reference: &Dataset, data: &Dataset, config: &NplmConfig) -> Result<TrainedModel> {
    fit_detailed(reference, data, config).map(|o| o.model)
}

pub fn fit_detailed(reference: &Dataset, data: &Dataset, config: &NplmConfig) -> Result<FitOutcome> {
    fit_detailed_with(Execution::default(), reference, data, config)
}

pub fn fit_detailed_with(
    exec: Execution,
    reference: &Dataset,
    data: &Dataset,
    config: &NplmConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    check_dims(reference.dim(), data.dim())?;
    let n = reference.n_points() + data.n_points();
    if config.n_centers > n {
        return Err(NplmError::invalid(format!(
            "n_centers = {} exceeds the {n} pooled training points",
            config.n_centers
        )));
    }
    let (standardizer, train) = if config.standardize {
        let s = Standardizer::fit(reference);
        let t = LabeledTrainingSet::new(&s.apply(reference)?, &s.apply(data)?, config.expected_count)?;
        (Some(s), t)
    } else {
        (None, LabeledTrainingSet::new(reference, data, config.expected_count)?)
    };
    let center_rows = sample_center_indices(
        n,
        config.n_centers,
        derive_seed(config.master_seed, Stream::Centers, 0),
    )?;
    let problem = ReducedProblem::build(exec, &train, &center_rows, config.kernel_width)?;
    let solved = newton_solve(&problem, config)?;

    let dim = train.points.dim();
    let mut centers = Vec::with_capacity(center_rows.len() * dim);
    for &i in &center_rows {
        centers.extend_from_slice(train.points.row(i));
    }
    let w_s = problem.weights(&solved.alpha);
    let mut weights = vec![0.0; center_rows.len()];
    for (&p, w) in problem.pivots.iter().zip(&w_s) {
        weights[p] = *w;
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(NplmError::NonFiniteLoss {
            iteration: solved.iterations,
            grad_norm: solved.rel_grad,
        });
    }
    let model = TrainedModel {
        centers,
        dim,
        weights,
        kernel_width: config.kernel_width,
        ref_count: train.n_ref,
        data_count: train.n_data,
        expected_count: train.ref_weight * train.n_ref as f64,
        converged: solved.converged,
        iterations_used: solved.iterations,
        final_risk: solved.risk,
        relative_grad_norm: solved.rel_grad,
        standardizer,
    };
    Ok(FitOutcome {
        model,
        fitted: solved.fitted,
        risk_history: solved.history,
        cg_iterations: solved.cg_iterations,
        effective_rank: problem.r,
        center_indices: center_rows,
    })
}

struct Solved {
    alpha: Vec<f64>,
    fitted: Vec<f64>,
    risk: f64,
    rel_grad: f64,
    converged: bool,
    iterations: usize,
    cg_iterations: usize,
    history: Vec<f64>,
}

fn newton_solve(problem: &ReducedProblem, config: &NplmConfig) -> Result<Solved> {
    let lambda = config.regularization;
    let (n_ref, a) = (problem.n_ref, problem.ref_weight);

    let mut alpha = vec![0.0; problem.r];
    let mut f = vec![0.0; problem.n()];
    let mut risk = problem.risk(&f, &alpha, lambda);
    let mut grad = problem.gradient(&f, &alpha, lambda);
    let scale = problem.gradient_scale();
    let rel_of = |g: &[f64]| if scale > 0.0 { norm(g) / scale } else { 0.0 };
    let mut rel = rel_of(&grad);
    let mut history = vec![risk];
    let mut cg_total = 0;
    let mut iterations = 0;
    let mut converged = rel <= config.newton_tol;

    while !converged && iterations < config.newton_max_iter {
        let d: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(i, &fi)| point_d2loss(i < n_ref, a, fi))
            .collect();
        let prec = problem.preconditioner(&d, lambda)?;
                let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        // Forcing term: solve loosely far from the optimum, tightly near it.
        let eta = rel.sqrt().min(0.1).max(0.5 * config.newton_tol / rel);
        let (delta, used) = preconditioned_cg(
            |v| problem.hvp(&d, v, lambda),
            |v| chol_solve(&prec, v),
            &rhs,
            eta,
            config.cg_max_iter,
        );
        cg_total += used;
        let slope = dot(&grad, &delta);
        iterations += 1;
        if !(slope < 0.0) {
            break;
        }

        let u = problem.predict(&delta);
        let mut step = None;
        let mut t = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let change = problem.risk_delta(&f, &u, t, &alpha, &delta, lambda);
            if change < 0.0 {
                step = Some((t, change));
                break;
            }
            t *= 0.5;
        }
        log::trace!(
            "newton {iterations}: risk {risk:.12e} rel_grad {rel:.3e} cg {used} step {:?}",
            step.map(|s| s.0)
        );
        let Some((t, change)) = step else {
            // No representable decrease along a descent direction: the
            // iterate sits at the precision floor of the objective.
            converged = -slope <= 1e-14 * risk.abs().max(f64::MIN_POSITIVE);
            break;
        };
        axpy(t, &delta, &mut alpha);
        axpy(t, &u, &mut f);
        risk += change;
        history.push(risk);
        grad = problem.gradient(&f, &alpha, lambda);
        rel = rel_of(&grad);
        if !rel.is_finite() || !risk.is_finite() {
            return Err(NplmError::NonFiniteLoss {
                iteration: iterations,
                grad_norm: norm(&grad),
            });
        }
        converged = rel <= config.newton_tol;
    }

    let fitted = problem.predict(&alpha);
    let final_risk = problem.risk(&fitted, &alpha, lambda);
    if !final_risk.is_finite() {
        return Err(NplmError::NonFiniteLoss {
            iteration: iterations,
            grad_norm: norm(&grad),
        });
    }
    Ok(Solved {
        alpha,
        fitted,
        risk: final_risk,
        rel_grad: rel,
        converged,
        iterations,
        cg_iterations: cg_total,
        history,
    })
}

/// Preconditioned CG for an SPD operator, from `x = 0`. Stops when
/// `‖r‖ ≤ tol·‖b‖`. Returns the solution and the iterations used.
fn preconditioned_cg<A, P>(apply: A, precondition: P, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, usize)
where
    A: Fn(&[f64]) -> Vec<f64>,
    P: Fn(&[f64]) -> Vec<f64>,
{
    let mut x = vec![0.0; b.len()];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return (x, 0);
    }
    let mut r = b.to_vec();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return (x, it);
        }
        let step = rz / pap;
        axpy(step, &p, &mut x);
        axpy(-step, &ap, &mut r);
        if norm(&r) <= tol * b_norm {
            return (x, it + 1);
        }
        z = precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
        rz = rz_new;
    }
    (x, max_iter)
}

/// Kernel evaluations between raw `points` and the model's centers.
pub(crate) fn model_kernel(model: &TrainedModel, points: &Dataset) -> Result<Vec<f64>> {
    check_dims(model.dim, points.dim())?;
    let exec = Execution::default();
    match &model.standardizer {
        Some(s) => {
            let z = s.apply(points)?;
            Ok(kernel_block(exec, z.values(), &model.centers, model.dim, model.kernel_width))
        }
        None => Ok(kernel_block(exec, points.values(), &model.centers, model.dim, model.kernel_width)),
    }
}

/// `f(x) = Σᵢ wᵢ k_σ(x, cᵢ)` at each point.
pub fn evaluate_f(model: &TrainedModel, points: &Dataset) -> Result<Vec<f64>> {
    let k = model_kernel(model, points)?;
    let m = model.n_centers();
    Ok(k.chunks_exact(m).map(|row| dot(row, &model.weights)).collect())
}

/// Regularized empirical risk of `model` on `train` (raw coordinates).
pub fn empirical_risk(model: &TrainedModel, train: &LabeledTrainingSet, lambda: f64) -> Result<f64> {
    let f = evaluate_f(model, &train.points)?;
    let n = train.len() as f64;
    let a = train.ref_weight;
    let loss: f64 = f
        .iter()
        .enumerate()
        .map(|(i, &fi)| point_loss(i < train.n_ref, a, fi))
        .sum();
    let m = model.n_centers();
    let kmm = kernel_block(Execution::default(), &model.centers, &model.centers, model.dim, model.kernel_width);
    let reg: f64 = (0..m)
        .map(|i| model.weights[i] * dot(&kmm[i * m..(i + 1) * m], &model.weights))
        .sum();
    Ok(loss / n + lambda * reg)
}

/// `∇_w` of the regularized risk for explicit kernel blocks.
pub fn risk_gradient(weights: &[f64], problem: &KernelProblem, lambda: f64) -> Result<Vec<f64>> {
    if weights.len() != problem.m {
        return Err(NplmError::DimensionMismatch {
            expected: problem.m,
            found: weights.len(),
        });
    }
    Ok(problem.gradient(weights, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, dim: usize, shift: f64, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let v: Vec<f64> = (0..n * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) + shift)
            .collect();
        Dataset::new(v, dim, "g").unwrap()
    }

    fn naive_risk(train: &LabeledTrainingSet, centers: &Dataset, w: &[f64], sigma: f64, lambda: f64) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / (2.0 * sigma * sigma)).exp()
        };
        let mut loss = 0.0;
        for i in 0..train.len() {
            let x = train.points.row(i);
            let mut f = 0.0;
            for j in 0..centers.n_points() {
                f += w[j] * k(x, centers.row(j));
            }
            loss += if i < train.n_ref {
                train.ref_weight * (1.0 + f.exp()).ln()
            } else {
                (1.0 + (-f).exp()).ln()
            };
        }
        let mut reg = 0.0;
        for i in 0..centers.n_points() {
            for j in 0..centers.n_points() {
                reg += w[i] * w[j] * k(centers.row(i), centers.row(j));
            }
        }
        loss / train.len() as f64 + lambda * reg
    }

    #[test]
    fn risk_at_zero_weights_is_weighted_log2() {
        let r = gaussian(30, 2, 0.0, 1);
        let d = gaussian(10, 2, 0.0, 2);
        let train = LabeledTrainingSet::new(&r, &d, None).unwrap();
        let centers = r.select(&[0, 1, 2], "c").unwrap();
        let p = KernelProblem::new(&train, &centers, 1.0).unwrap();
        let expected = (30.0 * (10.0 / 30.0) + 10.0) * 2f64.ln() / 40.0;
        assert_abs_diff_eq!(p.risk(&[0.0; 3], 1e-3), expected, epsilon = 1e-15);
    }

    #[test]
    fn single_point_loss_is_log2() {
        let c = Dataset::from_rows(&[vec![0.3]], "c").unwrap();
        // One reference point far away so N_ℛ > 0; check the data row alone.
        let r = Dataset::from_rows(&[vec![100.0]], "r").unwrap();
        let train = LabeledTrainingSet::new(&r, &c, None).unwrap();
        let p = KernelProblem::new(&train, &c, 1.0).unwrap();
        let f = p.predict(&[0.0]);
        assert_eq!(softplus(-f[1]), 2f64.ln());
    }

    #[test]
    fn risk_matches_scalar_loop() {
        let r = gaussian(12, 2, 0.0, 3);
        let d = gaussian(8, 2, 0.5, 4);
        let train = LabeledTrainingSet::new(&r, &d, None).unwrap();
        let centers = train.points.select(&[0, 3, 7, 13, 19], "c").unwrap();
        let mut rng = rng_from_seed(5);
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = KernelProblem::new(&train, &centers, 0.9).unwrap();
        let got = p.risk(&w, 0.01);
        let want = naive_risk(&train, &centers, &w, 0.9, 0.01);
        assert_abs_diff_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn gradient_vanishes_on_balanced_symmetric_data() {
        let pts = Dataset::from_rows(&[vec![-1.0], vec![1.0]], "p").unwrap();
        let train = LabeledTrainingSet::new(&pts, &pts, None).unwrap();
        let p = KernelProblem::new(&train, &pts, 1.0).unwrap();
        let g = p.gradient(&[0.0, 0.0], 0.5);
        assert!(g.iter().all(|x| x.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn regularizer_gradient_is_linear_in_lambda() {
        let r = gaussian(20, 2, 0.0, 6);
        let d = gaussian(10, 2, 0.3, 7);
        let train = LabeledTrainingSet::new(&r, &d, None).unwrap();
        let centers = train.points.select(&[1, 5, 22], "c").unwrap();
        let p = KernelProblem::new(&train, &centers, 1.2).unwrap();
        let w = [0.4, -0.2, 0.7];
        let g0 = p.gradient(&w, 0.0);
        let g1 = p.gradient(&w, 0.1);
        let g2 = p.gradient(&w, 0.2);
        for i in 0..3 {
            assert_abs_diff_eq!(g2[i] - g0[i], 2.0 * (g1[i] - g0[i]), epsilon = 1e-14);
        }
    }

    #[test]
    fn evaluate_f_examples() {
        let c = Dataset::from_rows(&[vec![1.0, 2.0]], "c").unwrap();
        let mut model = TrainedModel {
            centers: c.values().to_vec(),
            dim: 2,
            weights: vec![0.0],
            kernel_width: 0.7,
            ref_count: 1,
            data_count: 1,
            expected_count: 1.0,
            converged: true,
            iterations_used: 0,
            final_risk: 0.0,
            relative_grad_norm: 0.0,
            standardizer: None,
        };
        assert_eq!(evaluate_f(&model, &c).unwrap(), vec![0.0]);
        model.weights = vec![2.0];
        assert_eq!(evaluate_f(&model, &c).unwrap(), vec![2.0]);
        let x = Dataset::from_rows(&[vec![1.0, 2.7]], "x").unwrap();
        assert_abs_diff_eq!(evaluate_f(&model, &x).unwrap()[0], 1.213_061_319_425_267, epsilon = 1e-12);
        let bad = Dataset::from_rows(&[vec![1.0]], "b").unwrap();
        assert!(evaluate_f(&model, &bad).is_err());
    }

    #[test]
    fn identical_samples_give_flat_f() {
        let r = gaussian(2000, 2, 0.0, 8);
        let cfg = NplmConfig::new(100, 1.5, 1e-6).with_seed(3);
        let out = fit_detailed(&r, &r, &cfg).unwrap();
        assert!(out.model.converged);
        let max = out.fitted.iter().fold(0.0f64, |m, f| m.max(f.abs()));
        assert!(max <= 0.1, "max |f| = {max}");
    }

    #[test]
    fn risk_decreases_monotonically_and_fit_is_deterministic() {
        let r = gaussian(3000, 2, 0.0, 9);
        let d = gaussian(600, 2, 0.4, 10);
        let cfg = NplmConfig::new(150, 1.0, 1e-7).with_seed(4);
        let a = fit_detailed(&r, &d, &cfg).unwrap();
        assert!(a.model.converged, "rel grad {}", a.model.relative_grad_norm);
        for pair in a.risk_history.windows(2) {
            assert!(pair[1] < pair[0], "{:?}", a.risk_history);
        }
        let b = fit_detailed(&r, &d, &cfg).unwrap();
        let bits = |m: &TrainedModel| m.weights.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
    }

    #[test]
    fn rejects_bad_shapes() {
        let r = gaussian(10, 2, 0.0, 1);
        let d = gaussian(5, 3, 0.0, 2);
        assert!(fit(&r, &d, &NplmConfig::new(3, 1.0, 1e-3)).is_err());
        let d = gaussian(5, 2, 0.0, 2);
        assert!(fit(&r, &d, &NplmConfig::new(16, 1.0, 1e-3)).is_err());
    }
}
