//! Bound-constrained nonlinear least squares: projected Gauss-Newton with
//! Levenberg damping and an Armijo line search on the projected path.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A least-squares problem `min 1/2 ||r(x)||^2` subject to box bounds.
///
/// Implementors provide the residual vector and, optionally, its Jacobian;
/// the default Jacobian is a forward-difference approximation that never
/// steps outside the bounds. Evaluators must be deterministic. Returning
/// `false` marks the point as unevaluable (non-finite model output), which
/// the solver treats as a rejected trial.
pub trait LeastSquaresProblem {
    fn residual_len(&self) -> usize;
    fn var_len(&self) -> usize;

    /// Per-variable bounds; entries may be infinite.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.var_len();
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    /// Writes `r(x)`; returns false if the model could not be evaluated.
    fn residuals(&self, x: &DVector<f64>, out: &mut DVector<f64>) -> bool;

    /// Writes the `m x n` Jacobian; returns false on evaluation failure.
    fn jacobian(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) -> bool {
        forward_difference_jacobian(self, x, out)
    }

    /// Hint for assembling the Gauss-Newton normal equations.
    fn structure(&self) -> NormalStructure {
        NormalStructure::Dense
    }
}

/// Sparsity hint for the normal-equations assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalStructure {
    Dense,
    /// Variables form `num_blocks` consecutive blocks of `block_len`
    /// followed by `tail_len` scalars; every residual row touches at most
    /// two adjacent blocks plus the tail. The Gauss-Newton matrix is then
    /// block tridiagonal with a dense tail border and is assembled from
    /// column stripes instead of a full `J^T J` product.
    BlockedChain {
        block_len: usize,
        num_blocks: usize,
        tail_len: usize,
    },
}

/// Forward differences with steps that respect the box.
pub fn forward_difference_jacobian<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    out: &mut DMatrix<f64>,
) -> bool {
    let (lo, hi) = problem.bounds();
    let m = problem.residual_len();
    let mut base = DVector::zeros(m);
    if !problem.residuals(x, &mut base) {
        return false;
    }
    let mut pert = DVector::zeros(m);
    let mut xp = x.clone();
    for j in 0..x.len() {
        let mut step = f64::EPSILON.sqrt() * x[j].abs().max(1.0);
        if x[j] + step > hi[j] {
            step = -step;
            if x[j] + step < lo[j] {
                return false; // box thinner than the step
            }
        }
        xp[j] = x[j] + step;
        if !problem.residuals(&xp, &mut pert) {
            return false;
        }
        for i in 0..m {
            out[(i, j)] = (pert[i] - base[i]) / step;
        }
        xp[j] = x[j];
    }
    true
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Termination threshold on the projected gradient norm.
    pub tol: f64,
    /// Cap on accepted Gauss-Newton steps.
    pub max_iter: usize,
    /// Initial Levenberg damping.
    pub damping_init: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Line-search backtracking factor.
    pub backtrack: f64,
    /// Backtracking attempts before escalating the damping.
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 100,
            damping_init: 1e-12,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_backtracks: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Projected gradient norm fell below the tolerance.
    Tolerance,
    MaxIter,
    LineSearchFail,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: DVector<f64>,
    /// Final cost `1/2 ||r||^2`.
    pub cost: f64,
    pub projected_grad_norm: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub termination: Termination,
}

const DAMPING_FLOOR: f64 = 1e-12;
const DAMPING_CEIL: f64 = 1e14;

fn clamp_into(x: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].max(lo[i]).min(hi[i]);
    }
}

fn projected_gradient_norm(
    x: &DVector<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> f64 {
    let mut sum = 0.0;
    for i in 0..x.len() {
        let gi = g[i];
        let blocked = (x[i] <= lo[i] && gi > 0.0) || (x[i] >= hi[i] && gi < 0.0);
        if !blocked {
            sum += gi * gi;
        }
    }
    sum.sqrt()
}

/// Assembles `J^T J`, exploiting the structure hint.
fn normal_matrix(jac: &DMatrix<f64>, structure: NormalStructure) -> DMatrix<f64> {
    match structure {
        NormalStructure::Dense => jac.tr_mul(jac),
        NormalStructure::BlockedChain {
            block_len,
            num_blocks,
            tail_len,
        } => {
            let n = jac.ncols();
            debug_assert_eq!(n, block_len * num_blocks + tail_len);
            let mut jtj = DMatrix::zeros(n, n);
            let stripe = |b: usize| jac.columns(b * block_len, block_len);
            for b in 0..num_blocks {
                let diag = stripe(b).tr_mul(&stripe(b));
                jtj.view_mut((b * block_len, b * block_len), (block_len, block_len))
                    .copy_from(&diag);
                if b + 1 < num_blocks {
                    let off = stripe(b).tr_mul(&stripe(b + 1));
                    jtj.view_mut((b * block_len, (b + 1) * block_len), (block_len, block_len))
                        .copy_from(&off);
                    jtj.view_mut(((b + 1) * block_len, b * block_len), (block_len, block_len))
                        .copy_from(&off.transpose());
                }
            }
            if tail_len > 0 {
                let tail = jac.columns(block_len * num_blocks, tail_len);
                let border = jac.columns(0, block_len * num_blocks).tr_mul(&tail);
                jtj.view_mut((0, block_len * num_blocks), (block_len * num_blocks, tail_len))
                    .copy_from(&border);
                jtj.view_mut((block_len * num_blocks, 0), (tail_len, block_len * num_blocks))
                    .copy_from(&border.transpose());
                let corner = tail.tr_mul(&tail);
                jtj.view_mut(
                    (block_len * num_blocks, block_len * num_blocks),
                    (tail_len, tail_len),
                )
                .copy_from(&corner);
            }
            jtj
        }
    }
}

/// Minimizes the problem from a feasible start.
pub fn minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let n = problem.var_len();
    let m = problem.residual_len();
    if x0.len() != n {
        return Err(Error::OutOfRange(format!(
            "start has {} vars, problem has {n}",
            x0.len()
        )));
    }
    let (lo, hi) = problem.bounds();
    for i in 0..n {
        if !(lo[i] <= hi[i]) {
            return Err(Error::OutOfRange(format!(
                "bound {i} inverted: [{}, {}]",
                lo[i], hi[i]
            )));
        }
        if x0[i] < lo[i] || x0[i] > hi[i] {
            return Err(Error::OutOfRange(format!(
                "start[{i}] = {} outside [{}, {}]",
                x0[i], lo[i], hi[i]
            )));
        }
    }

    let mut x = x0.clone();
    let mut r = DVector::zeros(m);
    if !problem.residuals(&x, &mut r) || !r.iter().all(|v| v.is_finite()) {
        return Err(Error::Solver("residuals not finite at the start".into()));
    }
    let mut cost = 0.5 * r.norm_squared();
    let mut jac = DMatrix::zeros(m, n);
    let structure = problem.structure();

    let mut lambda = opts.damping_init.max(DAMPING_FLOOR);
    let mut iterations = 0usize;

    loop {
        if !problem.jacobian(&x, &mut jac) || jac.iter().any(|v| !v.is_finite()) {
            return Ok(SolveReport {
                x,
                cost,
                projected_grad_norm: f64::NAN,
                iterations,
                termination: Termination::LineSearchFail,
            });
        }
        let g = jac.tr_mul(&r);
        let pg = projected_gradient_norm(&x, &g, &lo, &hi);
        if pg <= opts.tol {
            return Ok(SolveReport {
                x,
                cost,
                projected_grad_norm: pg,
                iterations,
                termination: Termination::Tolerance,
            });
        }
        if iterations >= opts.max_iter {
            return Ok(SolveReport {
                x,
                cost,
                projected_grad_norm: pg,
                iterations,
                termination: Termination::MaxIter,
            });
        }

        let jtj = normal_matrix(&jac, structure);
        let mut accepted = false;
        let mut r_trial = DVector::zeros(m);

        'damping: while lambda <= DAMPING_CEIL {
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += lambda;
            }
            let chol = match damped.cholesky() {
                Some(c) => c,
                None => {
                    lambda *= 10.0;
                    continue 'damping;
                }
            };
            let delta = chol.solve(&(-&g));

            let mut t = 1.0;
            for _ in 0..=opts.max_backtracks {
                let mut x_trial = &x + &delta * t;
                clamp_into(&mut x_trial, &lo, &hi);
                let step = &x_trial - &x;
                if step.norm() == 0.0 {
                    break; // projection annihilated the step; escalate damping
                }
                let slope = g.dot(&step);
                if problem.residuals(&x_trial, &mut r_trial)
                    && r_trial.iter().all(|v| v.is_finite())
                {
                    let cost_trial = 0.5 * r_trial.norm_squared();
                    if slope < 0.0 && cost_trial <= cost + opts.armijo_c * slope {
                        // ratio test on the quadratic model for the damping update
                        let jtj_step = &jtj * &step;
                        let predicted = -(g.dot(&step) + 0.5 * step.dot(&jtj_step));
                        let rho = if predicted > 0.0 {
                            (cost - cost_trial) / predicted
                        } else {
                            0.0
                        };
                        x = x_trial;
                        r.copy_from(&r_trial);
                        cost = cost_trial;
                        iterations += 1;
                        if rho > 0.75 && t == 1.0 {
                            lambda = (lambda / 10.0).max(DAMPING_FLOOR);
                        }
                        accepted = true;
                        break 'damping;
                    }
                }
                t *= opts.backtrack;
            }
            lambda *= 10.0;
        }

        if !accepted {
            return Ok(SolveReport {
                x,
                cost,
                projected_grad_norm: pg,
                iterations,
                termination: Termination::LineSearchFail,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// r(x) = A x - b with optional bounds.
    struct LinearProblem {
        a: DMatrix<f64>,
        b: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    }

    impl LinearProblem {
        fn unbounded(a: DMatrix<f64>, b: DVector<f64>) -> Self {
            let n = a.ncols();
            LinearProblem {
                a,
                b,
                lo: DVector::from_element(n, f64::NEG_INFINITY),
                hi: DVector::from_element(n, f64::INFINITY),
            }
        }
    }

    impl LeastSquaresProblem for LinearProblem {
        fn residual_len(&self) -> usize {
            self.a.nrows()
        }
        fn var_len(&self) -> usize {
            self.a.ncols()
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (self.lo.clone(), self.hi.clone())
        }
        fn residuals(&self, x: &DVector<f64>, out: &mut DVector<f64>) -> bool {
            out.copy_from(&(&self.a * x - &self.b));
            true
        }
        fn jacobian(&self, _x: &DVector<f64>, out: &mut DMatrix<f64>) -> bool {
            out.copy_from(&self.a);
            true
        }
    }

    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        fn residual_len(&self) -> usize {
            2
        }
        fn var_len(&self) -> usize {
            2
        }
        fn residuals(&self, x: &DVector<f64>, out: &mut DVector<f64>) -> bool {
            out[0] = 10.0 * (x[1] - x[0] * x[0]);
            out[1] = 1.0 - x[0];
            true
        }
        fn jacobian(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) -> bool {
            out[(0, 0)] = -20.0 * x[0];
            out[(0, 1)] = 10.0;
            out[(1, 0)] = -1.0;
            out[(1, 1)] = 0.0;
            true
        }
    }

    #[test]
    fn scalar_linear_one_step() {
        // r(x) = x - c solves in a single Gauss-Newton step.
        let p = LinearProblem::unbounded(
            DMatrix::identity(1, 1),
            DVector::from_element(1, 3.75),
        );
        let report = minimize(&p, &DVector::zeros(1), &SolverOptions::default()).unwrap();
        assert_eq!(report.termination, Termination::Tolerance);
        assert_eq!(report.iterations, 1);
        assert!((report.x[0] - 3.75).abs() < 1e-10);
    }

    #[test]
    fn active_bound_is_reported_converged() {
        // x <= c - 1 pins the solution at the bound with zero projected
        // gradient.
        let c = 2.0;
        let p = LinearProblem {
            a: DMatrix::identity(1, 1),
            b: DVector::from_element(1, c),
            lo: DVector::from_element(1, f64::NEG_INFINITY),
            hi: DVector::from_element(1, c - 1.0),
        };
        let report = minimize(&p, &DVector::zeros(1), &SolverOptions::default()).unwrap();
        assert_eq!(report.termination, Termination::Tolerance);
        assert!((report.x[0] - (c - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_start_rejected() {
        let p = LinearProblem {
            a: DMatrix::identity(1, 1),
            b: DVector::from_element(1, 0.0),
            lo: DVector::from_element(1, 1.0),
            hi: DVector::from_element(1, 2.0),
        };
        assert!(minimize(&p, &DVector::zeros(1), &SolverOptions::default()).is_err());
    }

    #[test]
    fn rosenbrock_converges() {
        let report = minimize(
            &Rosenbrock,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(report.iterations <= 100);
        assert!((report.x[0] - 1.0).abs() < 1e-8, "{:?}", report);
        assert!((report.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn linear_exactness_one_iteration() {
        // Full-column-rank linear residuals with inactive bounds reach the
        // least-squares solution in one iteration.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = 8;
            let n = 4;
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
                + DMatrix::identity(m, n) * 2.0;
            let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let expected = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
            let p = LinearProblem::unbounded(a, b);
            let report = minimize(&p, &DVector::zeros(n), &SolverOptions::default()).unwrap();
            assert_eq!(report.iterations, 1);
            assert!((report.x - expected).norm() < 1e-10);
        }
    }

    #[test]
    fn descent_on_random_bounded_quadratics() {
        // Cost never increases across accepted steps, bounds are honored in
        // every evaluator call.
        struct Guarded {
            inner: LinearProblem,
        }
        impl LeastSquaresProblem for Guarded {
            fn residual_len(&self) -> usize {
                self.inner.residual_len()
            }
            fn var_len(&self) -> usize {
                self.inner.var_len()
            }
            fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
                self.inner.bounds()
            }
            fn residuals(&self, x: &DVector<f64>, out: &mut DVector<f64>) -> bool {
                let (lo, hi) = self.inner.bounds();
                for i in 0..x.len() {
                    assert!(
                        x[i] >= lo[i] - 1e-15 && x[i] <= hi[i] + 1e-15,
                        "evaluator called out of bounds"
                    );
                }
                self.inner.residuals(x, out)
            }
            fn jacobian(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) -> bool {
                self.inner.jacobian(x, out)
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.gen_range(1..5usize);
            let m = n + rng.gen_range(0..3usize);
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-2.0..2.0))
                + DMatrix::identity(m, n);
            let b = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
            let lo = DVector::from_fn(n, |_, _| rng.gen_range(-1.5..-0.2));
            let hi = DVector::from_fn(n, |_, _| rng.gen_range(0.2..1.5));
            let x0 = DVector::from_fn(n, |i, _| rng.gen_range(lo[i]..hi[i]));
            let p = Guarded {
                inner: LinearProblem {
                    a,
                    b,
                    lo: lo.clone(),
                    hi: hi.clone(),
                },
            };
            let mut r0 = DVector::zeros(m);
            p.residuals(&x0, &mut r0);
            let cost0 = 0.5 * r0.norm_squared();
            let report = minimize(&p, &x0, &SolverOptions::default()).unwrap();
            assert!(report.cost <= cost0 + 1e-15);
            for i in 0..n {
                assert!(report.x[i] >= lo[i] && report.x[i] <= hi[i]);
            }
        }
    }

    #[test]
    fn finite_difference_jacobian_agrees() {
        struct NoJac;
        impl LeastSquaresProblem for NoJac {
            fn residual_len(&self) -> usize {
                2
            }
            fn var_len(&self) -> usize {
                2
            }
            fn residuals(&self, x: &DVector<f64>, out: &mut DVector<f64>) -> bool {
                out[0] = 10.0 * (x[1] - x[0] * x[0]);
                out[1] = 1.0 - x[0];
                true
            }
        }
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let mut fd = DMatrix::zeros(2, 2);
        assert!(forward_difference_jacobian(&NoJac, &x, &mut fd));
        let mut exact = DMatrix::zeros(2, 2);
        Rosenbrock.jacobian(&x, &mut exact);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (fd[(i, j)] - exact[(i, j)]).abs() < 1e-6 * exact[(i, j)].abs().max(1.0)
                );
            }
        }
    }

    #[test]
    fn blocked_chain_matches_dense_normal_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let block = 3;
        let blocks = 4;
        let tail = 1;
        let n = block * blocks + tail;
        let m = 20;
        // rows touch two adjacent blocks plus the tail
        let mut jac = DMatrix::zeros(m, n);
        for i in 0..m {
            let b = rng.gen_range(0..blocks - 1);
            for j in 0..2 * block {
                jac[(i, b * block + j)] = rng.gen_range(-1.0..1.0);
            }
            jac[(i, n - 1)] = rng.gen_range(-1.0..1.0);
        }
        let dense = normal_matrix(&jac, NormalStructure::Dense);
        let striped = normal_matrix(
            &jac,
            NormalStructure::BlockedChain {
                block_len: block,
                num_blocks: blocks,
                tail_len: tail,
            },
        );
        assert!((dense - striped).norm() < 1e-12);
    }
}
