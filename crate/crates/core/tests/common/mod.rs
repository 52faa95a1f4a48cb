#![allow(dead_code)]

use ems_core::linalg::Matrix;
use ems_core::qp::QuadraticProgram;
use rand::Rng;

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let k = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= k * a[col][c];
            }
            b[r] -= k * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn subsets(m: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for i in 0..m {
        let grown: Vec<Vec<usize>> =
            out.iter().filter(|s| s.len() < max).map(|s| [s.as_slice(), &[i]].concat()).collect();
        out.extend(grown);
    }
    out
}

pub fn objective(qp: &QuadraticProgram<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut v = 0.0;
    for i in 0..n {
        for j in 0..n {
            v += 0.5 * x[i] * qp.m[(i, j)] * x[j];
        }
        v += qp.f[i] * x[i];
    }
    v
}

/// Exact minimum of a small strictly convex QP: the optimum is the
/// equality-constrained minimizer on some set of at most `n` rows, so the
/// best feasible such point over all row sets is the answer.
pub fn brute_force_qp(qp: &QuadraticProgram<f64>) -> Option<(Vec<f64>, f64)> {
    let n = qp.f.len();
    let m = qp.b_ieq.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for set in subsets(m, n) {
        let k = set.len();
        let mut a = vec![vec![0.0; n + k]; n + k];
        let mut rhs = vec![0.0; n + k];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = qp.m[(i, j)];
            }
            rhs[i] = -qp.f[i];
        }
        for (r, &row) in set.iter().enumerate() {
            for j in 0..n {
                a[n + r][j] = qp.a_ieq[(row, j)];
                a[j][n + r] = qp.a_ieq[(row, j)];
            }
            rhs[n + r] = qp.b_ieq[row];
        }
        let Some(sol) = gauss_solve(a, rhs) else { continue };
        let x = &sol[..n];
        let feasible = (0..m).all(|r| {
            let ax: f64 = (0..n).map(|j| qp.a_ieq[(r, j)] * x[j]).sum();
            ax <= qp.b_ieq[r] + 1e-9 * (1.0 + qp.b_ieq[r].abs())
        });
        if !feasible {
            continue;
        }
        let v = objective(qp, x);
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((x.to_vec(), v));
        }
    }
    best
}

/// Positive definite Hessian, random rows, right-hand side chosen so a
/// random point is strictly feasible.
pub fn random_program<R: Rng>(rng: &mut R, n: usize, m: usize) -> QuadraticProgram<f64> {
    let l: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let hess = Matrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| l[i][k] * l[j][k]).sum::<f64>() + if i == j { 0.2 } else { 0.0 }
    });
    let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let inner: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| loop {
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if r.iter().map(|v| v * v).sum::<f64>() > 0.04 {
                break r;
            }
        })
        .collect();
    let b = rows
        .iter()
        .map(|r| r.iter().zip(&inner).map(|(a, x)| a * x).sum::<f64>() + rng.gen_range(0.01..1.0))
        .collect();
    let a = if m == 0 { Matrix::zeros(0, n) } else { Matrix::from_rows(&rows) };
    QuadraticProgram::new(hess, f, a, b).unwrap()
}

/// `E_{k+1} = E_k + T·p_chg,k` with `p_chg` built up from the increments.
pub fn scalar_rollout(step: f64, p_prev: f64, e0: f64, dp: &[f64], np: usize) -> Vec<f64> {
    let mut p = p_prev;
    let mut e = e0;
    (0..np)
        .map(|i| {
            p += dp.get(i).copied().unwrap_or(0.0);
            e += step * p;
            e
        })
        .collect()
}

pub fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
