//! Storage state-of-charge MPC over the augmented model `x = [ΔE, E]`.
//!
//! Everything in this module is in the charge-positive storage frame:
//! positive power raises stored energy, `E_{k+1} = E_k + T·P_k`. The decision
//! variable is the vector of storage power increments `ΔP` over the control
//! horizon; the receding-horizon output is the first increment as a ramp rate.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::qp::{qp_solve, QpError, QpSettings, QpSolution, QuadraticProgram};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error("sampling time must be positive, got {0}")]
    InvalidSamplingTime(f64),
    #[error("invalid horizon: need 1 <= Nc <= Np, got Np={np}, Nc={nc}")]
    InvalidHorizon { np: usize, nc: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("storage envelope is empty: {0}")]
    InfeasibleEnvelope(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// `[ΔE_k, E_k]` in kJ.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentedState<S> {
    pub delta_e: S,
    pub e: S,
}

impl<S: Scalar> AugmentedState<S> {
    pub fn new(delta_e: S, e: S) -> Self {
        Self { delta_e, e }
    }

    pub fn as_vec(&self) -> [S; 2] {
        [self.delta_e, self.e]
    }
}

/// Bounds handed to the MPC each step, charge-positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageEnvelope<S> {
    pub p_chg_min: S,
    pub p_chg_max: S,
    pub r_chg_min: S,
    pub r_chg_max: S,
    pub e_min: S,
    pub e_max: S,
    pub e_ref: S,
    pub p_chg_now: S,
}

impl<S: Scalar> StorageEnvelope<S> {
    pub fn validate(&self) -> Result<(), MpcError> {
        let f = |x: S| x.to_f64().unwrap_or(f64::NAN);
        if !(self.p_chg_min <= self.p_chg_max) {
            return Err(MpcError::InfeasibleEnvelope(format!(
                "power bounds [{}, {}]",
                f(self.p_chg_min),
                f(self.p_chg_max)
            )));
        }
        if !(self.r_chg_min <= self.r_chg_max) {
            return Err(MpcError::InfeasibleEnvelope(format!(
                "ramp bounds [{}, {}]",
                f(self.r_chg_min),
                f(self.r_chg_max)
            )));
        }
        if !(S::zero() <= self.e_min && self.e_min <= self.e_max) {
            return Err(MpcError::InfeasibleEnvelope(format!(
                "energy bounds [{}, {}]",
                f(self.e_min),
                f(self.e_max)
            )));
        }
        if !(self.e_min <= self.e_ref && self.e_ref <= self.e_max) {
            return Err(MpcError::InfeasibleEnvelope(format!(
                "reference {} outside [{}, {}]",
                f(self.e_ref),
                f(self.e_min),
                f(self.e_max)
            )));
        }
        Ok(())
    }
}

/// `(A, B, C)` of the augmented model.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace<S> {
    pub a: Matrix<S>,
    pub b: Matrix<S>,
    pub c: Matrix<S>,
}

/// `A = [[1,0],[1,1]]`, `B = [T,T]ᵀ`, `C = [0,1]`.
///
/// Substituting `ΔE_{k+1} = ΔE_k + T·ΔP_k` into `E_{k+1} = E_k + T·P_k` gives
/// `E_{k+1} = E_k + ΔE_k + T·ΔP_k`, so both rows of `B` carry `T`.
pub fn build_augmented_model<S: Scalar>(step: S) -> Result<StateSpace<S>, MpcError> {
    if !(step > S::zero()) || !step.is_finite() {
        return Err(MpcError::InvalidSamplingTime(step.to_f64().unwrap_or(f64::NAN)));
    }
    let (o, z) = (S::one(), S::zero());
    Ok(StateSpace {
        a: Matrix::from_rows(&[vec![o, z], vec![o, o]]),
        b: Matrix::from_rows(&[vec![step], vec![step]]),
        c: Matrix::from_rows(&[vec![z, o]]),
    })
}

/// `G` stacks `C·Aⁱ` for `i = 1..=Np`; `Φ[i][j] = C·A^(i−j)·B` for `i ≥ j`.
pub fn build_prediction_matrices<S: Scalar>(
    ss: &StateSpace<S>,
    np: usize,
    nc: usize,
) -> Result<(Matrix<S>, Matrix<S>), MpcError> {
    if nc < 1 || np < 1 || nc > np {
        return Err(MpcError::InvalidHorizon { np, nc });
    }
    let nx = ss.a.nrows();
    if ss.a.ncols() != nx || ss.b.nrows() != nx || ss.c.ncols() != nx || ss.b.ncols() != 1 || ss.c.nrows() != 1 {
        return Err(MpcError::DimensionMismatch("state-space blocks must be n×n, n×1, 1×n".into()));
    }

    let mut g = Matrix::zeros(np, nx);
    // markov[k] = C·A^k·B
    let mut markov = Vec::with_capacity(np);
    let mut c_pow = ss.c.clone(); // C·A^k
    for i in 0..np {
        markov.push(c_pow.mul(&ss.b)[(0, 0)]);
        c_pow = c_pow.mul(&ss.a);
        for j in 0..nx {
            g[(i, j)] = c_pow[(0, j)];
        }
    }
    let phi = Matrix::from_fn(np, nc, |i, j| if i >= j { markov[i - j] } else { S::zero() });
    Ok((g, phi))
}

fn tracking_error<S: Scalar>(g: &Matrix<S>, x: &AugmentedState<S>, e_ref: S) -> Vec<S> {
    g.mul_vec(&x.as_vec()).into_iter().map(|gx| e_ref - gx).collect()
}

fn cost_hessian<S: Scalar>(phi: &Matrix<S>) -> Matrix<S> {
    let two = S::lit(2.0);
    phi.transpose().mul(phi).add(&Matrix::identity(phi.ncols())).scale(two)
}

fn cost_linear<S: Scalar>(g: &Matrix<S>, phi: &Matrix<S>, x: &AugmentedState<S>, e_ref: S) -> Vec<S> {
    let err = tracking_error(g, x, e_ref);
    phi.tr_mul_vec(&err).into_iter().map(|v| -S::lit(2.0) * v).collect()
}

/// `M = 2(ΦᵀΦ + I)`, `F = −2Φᵀ(Ē* − G·x)` with `Ē*` the constant reference.
pub fn build_cost<S: Scalar>(
    g: &Matrix<S>,
    phi: &Matrix<S>,
    x: &AugmentedState<S>,
    e_ref: S,
) -> Result<(Matrix<S>, Vec<S>), MpcError> {
    if g.nrows() != phi.nrows() || g.ncols() != 2 {
        return Err(MpcError::DimensionMismatch(format!(
            "G is {}x{}, Phi has {} rows",
            g.nrows(),
            g.ncols(),
            phi.nrows()
        )));
    }
    Ok((cost_hessian(phi), cost_linear(g, phi, x, e_ref)))
}

fn constraint_matrix<S: Scalar>(phi: &Matrix<S>) -> Matrix<S> {
    let nc = phi.ncols();
    let tri = Matrix::from_fn(nc, nc, |i, j| if j <= i { S::one() } else { S::zero() });
    let eye = Matrix::identity(nc);
    let neg_one = -S::one();
    Matrix::vstack(&[
        &tri.scale(neg_one),
        &tri,
        &eye.scale(neg_one),
        &eye,
        &phi.scale(neg_one),
        phi,
    ])
}

fn constraint_bounds<S: Scalar>(
    g: &Matrix<S>,
    x: &AugmentedState<S>,
    env: &StorageEnvelope<S>,
    step: S,
    nc: usize,
) -> Vec<S> {
    let gx = g.mul_vec(&x.as_vec());
    let mut b = Vec::with_capacity(4 * nc + 2 * gx.len());
    b.extend(std::iter::repeat_n(env.p_chg_now - env.p_chg_min, nc));
    b.extend(std::iter::repeat_n(env.p_chg_max - env.p_chg_now, nc));
    b.extend(std::iter::repeat_n(-step * env.r_chg_min, nc));
    b.extend(std::iter::repeat_n(step * env.r_chg_max, nc));
    b.extend(gx.iter().map(|&v| v - env.e_min));
    b.extend(gx.iter().map(|&v| env.e_max - v));
    b
}

/// Stacked power, ramp, and energy rows: `4·Nc + 2·Np` inequalities.
pub fn build_constraints<S: Scalar>(
    x: &AugmentedState<S>,
    env: &StorageEnvelope<S>,
    g: &Matrix<S>,
    phi: &Matrix<S>,
    step: S,
    np: usize,
    nc: usize,
) -> Result<(Matrix<S>, Vec<S>), MpcError> {
    if g.nrows() != np || phi.nrows() != np || phi.ncols() != nc || g.ncols() != 2 {
        return Err(MpcError::DimensionMismatch(format!(
            "G {}x{}, Phi {}x{} for Np={np}, Nc={nc}",
            g.nrows(),
            g.ncols(),
            phi.nrows(),
            phi.ncols()
        )));
    }
    env.validate()?;
    Ok((constraint_matrix(phi), constraint_bounds(g, x, env, step, nc)))
}

/// Prediction model with the state-independent parts of the QP cached.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionModel<S> {
    pub ss: StateSpace<S>,
    pub g: Matrix<S>,
    pub phi: Matrix<S>,
    pub step: S,
    pub np: usize,
    pub nc: usize,
    hessian: Matrix<S>,
    a_ieq: Matrix<S>,
    /// `A_ieq` without the `2·Np` energy rows.
    a_ieq_hard: Matrix<S>,
}

impl<S: Scalar> PredictionModel<S> {
    pub fn new(step: S, np: usize, nc: usize) -> Result<Self, MpcError> {
        let ss = build_augmented_model(step)?;
        let (g, phi) = build_prediction_matrices(&ss, np, nc)?;
        let hessian = cost_hessian(&phi);
        let a_ieq = constraint_matrix(&phi);
        let a_ieq_hard = Matrix::from_fn(4 * nc, nc, |i, j| a_ieq[(i, j)]);
        Ok(Self { ss, g, phi, step, np, nc, hessian, a_ieq, a_ieq_hard })
    }

    /// `Ē = G·x + Φ·ΔP̄`.
    pub fn predict(&self, x: &AugmentedState<S>, delta_p: &[S]) -> Vec<S> {
        let mut e = self.g.mul_vec(&x.as_vec());
        for (ei, pi) in e.iter_mut().zip(self.phi.mul_vec(delta_p)) {
            *ei = *ei + pi;
        }
        e
    }

    pub fn constraint_count(&self) -> usize {
        4 * self.nc + 2 * self.np
    }

    /// The full QP for state `x` under `env`.
    pub fn quadratic_program(
        &self,
        x: &AugmentedState<S>,
        env: &StorageEnvelope<S>,
    ) -> Result<QuadraticProgram<S>, MpcError> {
        env.validate()?;
        let f = cost_linear(&self.g, &self.phi, x, env.e_ref);
        let b = constraint_bounds(&self.g, x, env, self.step, self.nc);
        Ok(QuadraticProgram::new(self.hessian.clone(), f, self.a_ieq.clone(), b)?)
    }

    fn hard_program(&self, x: &AugmentedState<S>, env: &StorageEnvelope<S>) -> Result<QuadraticProgram<S>, MpcError> {
        let f = cost_linear(&self.g, &self.phi, x, env.e_ref);
        let mut b = constraint_bounds(&self.g, x, env, self.step, self.nc);
        b.truncate(4 * self.nc);
        Ok(QuadraticProgram::new(self.hessian.clone(), f, self.a_ieq_hard.clone(), b)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcOutput<S> {
    /// Storage ramp rate to apply this step, kW/s, charge-positive.
    pub r_chg: S,
    pub solution: QpSolution<S>,
    /// The energy rows made the problem infeasible and were dropped for this
    /// step; only power and ramp rows constrained the answer.
    pub energy_rows_relaxed: bool,
}

/// One receding-horizon step: solve the QP and return the first increment
/// as a ramp rate `ΔP₀ / T`.
///
/// With `Nc = 1` the input is held over the whole prediction horizon, so a
/// storage that is discharging hard can have no ramp-feasible input that
/// keeps the predicted energy above `e_min` at the far end of the horizon.
/// In that case the energy rows are dropped and the step is solved under the
/// power and ramp rows alone.
pub fn mpc_step<S: Scalar>(
    model: &PredictionModel<S>,
    x: &AugmentedState<S>,
    env: &StorageEnvelope<S>,
    settings: &QpSettings<S>,
) -> Result<MpcOutput<S>, MpcError> {
    let qp = model.quadratic_program(x, env)?;
    let (solution, energy_rows_relaxed) = match qp_solve(&qp, settings) {
        Ok(sol) => (sol, false),
        Err(QpError::InfeasibleProblem { .. }) => {
            let hard = model.hard_program(x, env)?;
            (qp_solve(&hard, settings)?, true)
        }
        Err(e) => return Err(e.into()),
    };
    Ok(MpcOutput { r_chg: solution.delta_p[0] / model.step, solution, energy_rows_relaxed })
}
