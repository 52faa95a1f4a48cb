//! Dense convex QP `min ½xᵀMx + Fᵀx  s.t.  A·x ≤ b` solved through its dual
//! with Hildreth's coordinate-wise iteration.
//!
//! The dual of the problem above is
//!
//! ```text
//! min_{λ ≥ 0} ½λᵀHλ + λᵀK,   H = A·M⁻¹·Aᵀ,   K = b + A·M⁻¹·F
//! ```
//!
//! and the primal optimizer is recovered as `x = −M⁻¹(F + Aᵀλ)`.

use thiserror::Error;

use crate::linalg::{dot, Cholesky, Matrix};
use crate::Scalar;

/// Diagonal dual curvature at or below this value freezes the multiplier at zero.
pub const DEGENERATE_CURVATURE: f64 = 1e-12;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
/// Default sweep cap is this many sweeps per constraint row.
pub const DEFAULT_SWEEPS_PER_ROW: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("cost Hessian is not positive definite")]
    SingularMatrix,
    #[error("single-variable feasible interval is empty: lower bound {lower} exceeds upper bound {upper}")]
    InfeasibleProblem { lower: f64, upper: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cost Hessian is not symmetric (relative asymmetry {0})")]
    Asymmetric(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram<S> {
    pub m: Matrix<S>,
    pub f: Vec<S>,
    pub a_ieq: Matrix<S>,
    pub b_ieq: Vec<S>,
}

impl<S: Scalar> QuadraticProgram<S> {
    /// Checks dimensions and symmetry. Definiteness is checked when solving.
    pub fn new(m: Matrix<S>, f: Vec<S>, a_ieq: Matrix<S>, b_ieq: Vec<S>) -> Result<Self, QpError> {
        let n = f.len();
        if m.nrows() != n || m.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "M is {}x{} but F has length {n}",
                m.nrows(),
                m.ncols()
            )));
        }
        if a_ieq.nrows() != b_ieq.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A_ieq has {} rows but b_ieq has length {}",
                a_ieq.nrows(),
                b_ieq.len()
            )));
        }
        if a_ieq.nrows() > 0 && a_ieq.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "A_ieq has {} columns, expected {n}",
                a_ieq.ncols()
            )));
        }
        let asym = m.asymmetry();
        if asym > S::lit(1e-12) {
            return Err(QpError::Asymmetric(asym.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(Self { m, f, a_ieq, b_ieq })
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.b_ieq.len()
    }

    /// `½xᵀMx + Fᵀx`.
    pub fn objective(&self, x: &[S]) -> S {
        S::lit(0.5) * dot(x, &self.m.mul_vec(x)) + dot(&self.f, x)
    }

    /// `A·x − b`, positive entries are violations.
    pub fn slack(&self, x: &[S]) -> Vec<S> {
        if self.constraint_count() == 0 {
            return Vec::new();
        }
        self.a_ieq.mul_vec(x).into_iter().zip(&self.b_ieq).map(|(ax, &b)| ax - b).collect()
    }
}

/// Dual data `H`, `K` and the multipliers `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualProblem<S> {
    pub h: Matrix<S>,
    pub k: Vec<S>,
    pub lambda: Vec<S>,
}

impl<S: Scalar> DualProblem<S> {
    pub fn build(qp: &QuadraticProgram<S>, chol: &Cholesky<S>) -> Self {
        let a = &qp.a_ieq;
        // M⁻¹Aᵀ, one solve per constraint row
        let minv_at = chol.solve_matrix(&a.transpose());
        let h = a.mul(&minv_at);
        let minv_f = chol.solve(&qp.f);
        let k = a.mul_vec(&minv_f).into_iter().zip(&qp.b_ieq).map(|(x, &b)| b + x).collect();
        let m = qp.constraint_count();
        Self { h, k, lambda: vec![S::zero(); m] }
    }

    /// Dual objective `½λᵀHλ + λᵀK` (constant term dropped).
    pub fn objective(&self, lambda: &[S]) -> S {
        S::lit(0.5) * dot(lambda, &self.h.mul_vec(lambda)) + dot(lambda, &self.k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HildrethOutcome<S> {
    pub lambda: Vec<S>,
    pub converged: bool,
    pub iterations: usize,
}

/// Gauss–Seidel sweeps of `λᵢ ← max(0, −(Kᵢ + Σ_{j≠i} Hᵢⱼλⱼ)/Hᵢᵢ)`.
///
/// Converged means the largest multiplier change in the last sweep was at
/// most `tol`. Running out of sweeps is not an error; the last iterate is
/// returned with `converged = false`.
pub fn hildreth_iterate<S: Scalar>(h: &Matrix<S>, k: &[S], tol: S, max_iter: usize) -> HildrethOutcome<S> {
    hildreth_iterate_with(h, k, tol, max_iter, |_, _| {})
}

/// [`hildreth_iterate`] with a callback invoked after every sweep with the
/// sweep number (1-based) and the current multipliers.
pub fn hildreth_iterate_with<S: Scalar>(
    h: &Matrix<S>,
    k: &[S],
    tol: S,
    max_iter: usize,
    mut on_sweep: impl FnMut(usize, &[S]),
) -> HildrethOutcome<S> {
    let m = k.len();
    assert_eq!(h.nrows(), m);
    assert_eq!(h.ncols(), m);
    let floor = S::lit(DEGENERATE_CURVATURE);
    let mut lambda = vec![S::zero(); m];
    let mut iterations = 0;
    let mut converged = m == 0;

    while !converged && iterations < max_iter.max(1) {
        iterations += 1;
        let mut max_change = S::zero();
        for i in 0..m {
            let hii = h[(i, i)];
            if hii <= floor {
                lambda[i] = S::zero();
                continue;
            }
            let row = h.row(i);
            let mut w = k[i];
            for (j, (&hij, &lj)) in row.iter().zip(&lambda).enumerate() {
                if j != i {
                    w = w + hij * lj;
                }
            }
            let next = (-w / hii).max(S::zero());
            max_change = max_change.max((next - lambda[i]).abs());
            lambda[i] = next;
        }
        on_sweep(iterations, &lambda);
        converged = max_change <= tol;
    }

    HildrethOutcome { lambda, converged, iterations }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<S> {
    pub delta_p: Vec<S>,
    pub lambda: Vec<S>,
    pub iterations: usize,
    /// Primal feasibility and complementary slackness hold within
    /// `tol·(1 + |bᵢ|)` on every row.
    pub converged: bool,
    /// Rows with a strictly positive multiplier.
    pub active_set: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings<S> {
    pub tol: S,
    /// Sweep cap; `None` means `50·m`.
    pub max_iter: Option<usize>,
    /// Allow the closed-form clamp when the decision vector is scalar.
    pub fast_path: bool,
}

impl<S: Scalar> Default for QpSettings<S> {
    fn default() -> Self {
        Self { tol: S::lit(DEFAULT_TOLERANCE), max_iter: None, fast_path: true }
    }
}

impl<S: Scalar> QpSettings<S> {
    pub fn sweeps_for(&self, rows: usize) -> usize {
        self.max_iter.unwrap_or(DEFAULT_SWEEPS_PER_ROW * rows).max(1)
    }
}

/// `−M⁻¹F`.
pub fn solve_unconstrained<S: Scalar>(m: &Matrix<S>, f: &[S]) -> Result<Vec<S>, QpError> {
    if m.nrows() != f.len() {
        return Err(QpError::DimensionMismatch(format!("M has {} rows, F has length {}", m.nrows(), f.len())));
    }
    let chol = Cholesky::factor(m).ok_or(QpError::SingularMatrix)?;
    Ok(neg(chol.solve(f)))
}

fn neg<S: Scalar>(v: Vec<S>) -> Vec<S> {
    v.into_iter().map(|x| -x).collect()
}

/// Feasible interval `[lo, hi]` of a scalar problem whose rows read `aᵢ·x ≤ bᵢ`,
/// together with the rows attaining each end.
struct ScalarInterval<S> {
    lo: S,
    lo_row: Option<usize>,
    hi: S,
    hi_row: Option<usize>,
}

fn scalar_interval<S: Scalar>(qp: &QuadraticProgram<S>, tol: S) -> Result<ScalarInterval<S>, QpError> {
    let mut iv = ScalarInterval { lo: S::neg_infinity(), lo_row: None, hi: S::infinity(), hi_row: None };
    let tiny = S::lit(DEGENERATE_CURVATURE);
    for (i, &b) in qp.b_ieq.iter().enumerate() {
        let a = qp.a_ieq[(i, 0)];
        if a.abs() <= tiny {
            // 0·x ≤ b
            if b < -tol {
                return Err(QpError::InfeasibleProblem { lower: f64::INFINITY, upper: f64::NEG_INFINITY });
            }
            continue;
        }
        let bound = b / a;
        if a > S::zero() {
            if bound < iv.hi {
                iv.hi = bound;
                iv.hi_row = Some(i);
            }
        } else if bound > iv.lo {
            iv.lo = bound;
            iv.lo_row = Some(i);
        }
    }
    if iv.lo > iv.hi + tol {
        return Err(QpError::InfeasibleProblem {
            lower: iv.lo.to_f64().unwrap_or(f64::NAN),
            upper: iv.hi.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(iv)
}

/// Pivot below which a row counts as dependent on those already chosen,
/// relative to its own dual curvature.
const DEPENDENT_ROW: f64 = 1e-10;

/// Finishes a Hildreth run that lacks a KKT certificate by solving the
/// equality-constrained problem on a guessed active set. Returns the result only when it satisfies
/// the KKT conditions, which makes it the unique optimum.
fn refine_active_set<S: Scalar>(
    qp: &QuadraticProgram<S>,
    chol: &Cholesky<S>,
    dual: &DualProblem<S>,
    lambda: &[S],
    x: &[S],
    tol: S,
) -> Option<(Vec<S>, Vec<S>)> {
    let m = lambda.len();
    let mut by_lambda: Vec<usize> = (0..m).filter(|&i| lambda[i] > S::zero()).collect();
    by_lambda.sort_by(|&i, &j| lambda[j].partial_cmp(&lambda[i]).unwrap_or(std::cmp::Ordering::Equal));
    let slack = qp.slack(x);
    let mut by_slack: Vec<usize> = (0..m).filter(|&i| slack[i] >= -tol.sqrt() * (S::one() + qp.b_ieq[i].abs())).collect();
    by_slack.sort_by(|&i, &j| slack[j].partial_cmp(&slack[i]).unwrap_or(std::cmp::Ordering::Equal));

    for candidates in [by_lambda, by_slack] {
        let mut set = independent_rows(&dual.h, &candidates);
        let mut visited = vec![set.clone()];
        for _ in 0..(4 * m + 4) {
            let Some(mu) = multipliers(dual, &set) else {
                break;
            };
            if let Some(a) = argmin(&mu).filter(|&a| mu[a] < -tol) {
                set.remove(a);
                continue;
            }
            let mut full = vec![S::zero(); m];
            for (&i, &v) in set.iter().zip(&mu) {
                full[i] = v.max(S::zero());
            }
            let mut g = qp.a_ieq.tr_mul_vec(&full);
            for (r, &f) in g.iter_mut().zip(&qp.f) {
                *r = *r + f;
            }
            let cand = neg(chol.solve(&g));
            let scaled: Vec<S> =
                qp.slack(&cand).iter().zip(&qp.b_ieq).map(|(&s, &b)| s / (S::one() + b.abs())).collect();
            let worst = argmin(&neg(scaled.clone())).filter(|&r| scaled[r] > tol);
            let Some(r) = worst else {
                return satisfies_kkt(qp, &cand, &full, tol).then_some((cand, full));
            };
            if independent_rows(&dual.h, &[set.clone(), vec![r]].concat()).len() <= set.len() {
                let swapped = (0..set.len()).map(|a| {
                    let mut s = set.clone();
                    s[a] = r;
                    s
                });
                let viable = swapped
                    .clone()
                    .find(|s| multipliers(dual, s).is_some_and(|mu| mu.iter().all(|&v| v >= -tol)));
                match viable.or_else(|| swapped.into_iter().find(|s| !visited.contains(s))) {
                    Some(s) => set = s,
                    None => break,
                }
            } else {
                set.push(r);
            }
            if visited.contains(&set) {
                break;
            }
            visited.push(set.clone());
        }
    }
    None
}

/// Multipliers that make every row of `set` tight.
fn multipliers<S: Scalar>(dual: &DualProblem<S>, set: &[usize]) -> Option<Vec<S>> {
    if set.is_empty() {
        return Some(Vec::new());
    }
    let h_ss = Matrix::from_fn(set.len(), set.len(), |a, b| dual.h[(set[a], set[b])]);
    let rhs: Vec<S> = set.iter().map(|&i| -dual.k[i]).collect();
    Cholesky::factor(&h_ss).map(|c| c.solve(&rhs))
}

fn argmin<S: Scalar>(v: &[S]) -> Option<usize> {
    v.iter().enumerate().fold(None, |best, (i, &x)| match best {
        Some((_, b)) if b <= x => best,
        _ => Some((i, x)),
    })
    .map(|(i, _)| i)
}

fn independent_rows<S: Scalar>(h: &Matrix<S>, candidates: &[usize]) -> Vec<usize> {
    let mut set: Vec<usize> = Vec::new();
    for &i in candidates {
        let hii = h[(i, i)];
        if hii <= S::lit(DEGENERATE_CURVATURE) {
            continue;
        }
        let pivot = if set.is_empty() {
            hii
        } else {
            let h_ss = Matrix::from_fn(set.len(), set.len(), |a, b| h[(set[a], set[b])]);
            let h_si: Vec<S> = set.iter().map(|&j| h[(j, i)]).collect();
            match Cholesky::factor(&h_ss) {
                Some(c) => hii - dot(&h_si, &c.solve(&h_si)),
                None => S::zero(),
            }
        };
        if pivot > S::lit(DEPENDENT_ROW) * hii {
            set.push(i);
        }
    }
    set
}

fn active_rows<S: Scalar>(lambda: &[S]) -> Vec<usize> {
    lambda.iter().enumerate().filter(|(_, &l)| l > S::zero()).map(|(i, _)| i).collect()
}

/// Solves the QP. The unconstrained optimizer is returned untouched when it is
/// already feasible; otherwise the dual is solved with Hildreth's method, or,
/// for a scalar decision and `settings.fast_path`, by clamping to the
/// feasible interval. A Hildreth result that fails the KKT check is handed to
/// an active-set refinement before being reported as unconverged.
pub fn qp_solve<S: Scalar>(qp: &QuadraticProgram<S>, settings: &QpSettings<S>) -> Result<QpSolution<S>, QpError> {
    let n = qp.dim();
    let m = qp.constraint_count();
    let chol = Cholesky::factor(&qp.m).ok_or(QpError::SingularMatrix)?;
    let interval = if n == 1 { Some(scalar_interval(qp, settings.tol)?) } else { None };

    let x0 = neg(chol.solve(&qp.f));
    if qp.slack(&x0).iter().all(|&s| s <= S::zero()) {
        return Ok(QpSolution {
            delta_p: x0,
            lambda: vec![S::zero(); m],
            iterations: 0,
            converged: true,
            active_set: Vec::new(),
        });
    }

    if let (Some(iv), true) = (interval, settings.fast_path) {
        let mut lambda = vec![S::zero(); m];
        let x = if x0[0] > iv.hi {
            iv.hi
        } else if x0[0] < iv.lo {
            iv.lo
        } else {
            x0[0]
        };
        let row = if x0[0] > iv.hi { iv.hi_row } else { iv.lo_row };
        if let Some(r) = row {
            let grad = qp.m[(0, 0)] * x + qp.f[0];
            lambda[r] = (-grad / qp.a_ieq[(r, 0)]).max(S::zero());
        }
        return Ok(QpSolution {
            delta_p: vec![x],
            active_set: active_rows(&lambda),
            lambda,
            iterations: 1,
            converged: true,
        });
    }

    let dual = DualProblem::build(qp, &chol);
    let out = hildreth_iterate(&dual.h, &dual.k, settings.tol, settings.sweeps_for(m));
    let mut rhs = qp.a_ieq.tr_mul_vec(&out.lambda);
    for (r, &f) in rhs.iter_mut().zip(&qp.f) {
        *r = *r + f;
    }
    let delta_p = neg(chol.solve(&rhs));
    let certified = out.converged && satisfies_kkt(qp, &delta_p, &out.lambda, settings.tol);
    if !certified {
        if let Some((delta_p, lambda)) = refine_active_set(qp, &chol, &dual, &out.lambda, &delta_p, settings.tol) {
            return Ok(QpSolution {
                delta_p,
                active_set: active_rows(&lambda),
                lambda,
                iterations: out.iterations,
                converged: true,
            });
        }
        log::debug!("no KKT certificate after {} hildreth sweeps", out.iterations);
    }
    Ok(QpSolution {
        delta_p,
        active_set: active_rows(&out.lambda),
        lambda: out.lambda,
        iterations: out.iterations,
        converged: certified,
    })
}

/// Primal feasibility and complementary slackness, each within `tol·(1 + |bᵢ|)`.
fn satisfies_kkt<S: Scalar>(qp: &QuadraticProgram<S>, x: &[S], lambda: &[S], tol: S) -> bool {
    qp.slack(x).iter().zip(lambda).zip(&qp.b_ieq).all(|((&s, &l), &b)| {
        let scale = tol * (S::one() + b.abs());
        s <= scale && (l * s).abs() <= scale
    })
}

/// Worst-case KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport<S> {
    /// `max(0, max_i (A·x − b)_i)`.
    pub primal_violation: S,
    /// `max(0, −min_i λ_i)`.
    pub dual_violation: S,
    /// `max_i |λ_i·(A·x − b)_i| / (1 + |b_i|)`.
    pub complementarity: S,
    /// `‖M·x + F + Aᵀλ‖ / (1 + ‖F‖)`.
    pub stationarity: S,
}

impl<S: Scalar> KktReport<S> {
    pub fn evaluate(qp: &QuadraticProgram<S>, x: &[S], lambda: &[S]) -> Self {
        let slack = qp.slack(x);
        let primal_violation = slack.iter().fold(S::zero(), |w, &s| w.max(s));
        let dual_violation = lambda.iter().fold(S::zero(), |w, &l| w.max(-l));
        let complementarity = slack
            .iter()
            .zip(lambda)
            .zip(&qp.b_ieq)
            .fold(S::zero(), |w, ((&s, &l), &b)| w.max((l * s).abs() / (S::one() + b.abs())));
        let mut grad = qp.m.mul_vec(x);
        let at_lambda = if lambda.is_empty() { vec![S::zero(); x.len()] } else { qp.a_ieq.tr_mul_vec(lambda) };
        for ((g, &f), &al) in grad.iter_mut().zip(&qp.f).zip(&at_lambda) {
            *g = *g + f + al;
        }
        let stationarity = crate::linalg::norm(&grad) / (S::one() + crate::linalg::norm(&qp.f));
        Self { primal_violation, dual_violation, complementarity, stationarity }
    }

    pub fn within(&self, tol: S) -> bool {
        self.primal_violation <= tol
            && self.dual_violation <= tol
            && self.complementarity <= tol
            && self.stationarity <= tol
    }
}
