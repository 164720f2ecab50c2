//! The state/control/adjoint optimality system and its direct solution.

use crate::assembly::ParametricOperators;
use crate::banded::SparseLu;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::timing::Stopwatch;

/// `[[M, 0, A^T], [0, alpha M, -M^T], [A, -M, 0]]` with right-hand side
/// `[b; 0; c]`, inactive DOFs replaced by unit rows.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub n: usize,
    pub regularized_dofs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FullSolution {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub mu: f64,
    /// Factorization plus triangular solves, seconds.
    pub solve_time: f64,
    /// `||K x - rhs|| / (||rhs|| + 1e-30)`.
    pub relative_residual: f64,
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn assemble_kkt(ops: &ParametricOperators, alpha: f64) -> Result<KktSystem> {
    let n = ops.n();
    if ops.a.n() != n || ops.m.n() != n || ops.c.len() != n || ops.active_dofs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "operators of sizes A {}, M {}, b {}, c {}, active {}",
            ops.a.n(),
            ops.m.n(),
            n,
            ops.c.len(),
            ops.active_dofs.len()
        )));
    }
    let act = &ops.active_dofs;
    let mut t = Vec::with_capacity(3 * (ops.a.pattern().nnz() + 2 * ops.m.pattern().nnz()) + 3 * n);
    for ((i, j), &v) in ops.m.pattern().entries().zip(ops.m.values()) {
        if v == 0.0 || !act[i] || !act[j] {
            continue;
        }
        t.push((i, j, v));
        t.push((n + i, n + j, alpha * v));
        // -M^T in block (2,3) and -M in block (3,2).
        t.push((n + j, 2 * n + i, -v));
        t.push((2 * n + i, n + j, -v));
    }
    for ((i, j), &v) in ops.a.pattern().entries().zip(ops.a.values()) {
        if v == 0.0 || !act[i] || !act[j] {
            continue;
        }
        t.push((2 * n + i, j, v));
        t.push((j, 2 * n + i, v));
    }
    let mut regularized_dofs = Vec::new();
    let mut rhs = vec![0.0; 3 * n];
    for k in 0..n {
        if act[k] {
            rhs[k] = ops.b[k];
            rhs[2 * n + k] = ops.c[k];
        } else {
            regularized_dofs.push(k);
            for r in [k, n + k, 2 * n + k] {
                t.push((r, r, 1.0));
            }
        }
    }
    Ok(KktSystem {
        matrix: CsrMatrix::from_triplets(3 * n, &t),
        rhs,
        n,
        regularized_dofs,
    })
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    a.mul_vec(x).iter().zip(b).map(|(ax, bi)| bi - ax).collect()
}

/// Factors and solves `a x = b` with one step of iterative refinement.
/// Returns the solution and its relative residual.
pub fn solve_sparse(a: &CsrMatrix, b: &[f64]) -> Result<(Vec<f64>, f64)> {
    let lu = SparseLu::factor(a)?;
    let mut x = lu.solve(b);
    let r = residual(a, &x, b);
    let dx = lu.solve(&r);
    for (xi, d) in x.iter_mut().zip(&dx) {
        *xi += d;
    }
    let rel = norm2(&residual(a, &x, b)) / (norm2(b) + 1e-30);
    if !rel.is_finite() {
        return Err(Error::RankCollapse("non-finite solution".into()));
    }
    Ok((x, rel))
}

pub fn solve_kkt(sys: &KktSystem, mu: f64) -> Result<FullSolution> {
    let sw = Stopwatch::start();
    let (x, relative_residual) =
        solve_sparse(&sys.matrix, &sys.rhs).map_err(|e| e.at_stage("kkt solve", Some(mu)))?;
    let solve_time = sw.seconds();
    let n = sys.n;
    Ok(FullSolution {
        y: x[..n].to_vec(),
        u: x[n..2 * n].to_vec(),
        p: x[2 * n..].to_vec(),
        mu,
        solve_time,
        relative_residual,
    })
}

/// Assembles and solves the optimality system for `ops`.
pub fn solve_full(ops: &ParametricOperators, alpha: f64) -> Result<FullSolution> {
    solve_kkt(&assemble_kkt(ops, alpha)?, ops.mu)
}

/// Uncontrolled state: `A y = c` on the active DOFs, zero elsewhere.
pub fn solve_state(ops: &ParametricOperators) -> Result<Vec<f64>> {
    let n = ops.n();
    let act = &ops.active_dofs;
    let mut t: Vec<(usize, usize, f64)> = ops
        .a
        .pattern()
        .entries()
        .zip(ops.a.values())
        .filter(|((i, j), &v)| v != 0.0 && act[*i] && act[*j])
        .map(|((i, j), &v)| (i, j, v))
        .collect();
    let mut rhs = ops.c.clone();
    for k in (0..n).filter(|&k| !act[k]) {
        t.push((k, k, 1.0));
        rhs[k] = 0.0;
    }
    Ok(solve_sparse(&CsrMatrix::from_triplets(n, &t), &rhs)?.0)
}

/// `||alpha M u - M p||` against `||M u|| + ||M p||`.
pub fn optimality_residual(ops: &ParametricOperators, alpha: f64, sol: &FullSolution) -> (f64, f64) {
    let mu_ = ops.m.mul_vec(&sol.u);
    let mp = ops.m.mul_vec(&sol.p);
    let r: Vec<f64> = mu_.iter().zip(&mp).map(|(a, b)| alpha * a - b).collect();
    (norm2(&r), norm2(&mu_) + norm2(&mp) + 1e-30)
}

/// Discrete tracking functional up to the constant `||y_d||^2 / 2`:
/// `y^T M y / 2 - b^T y + alpha u^T M u / 2`.
pub fn cost(ops: &ParametricOperators, alpha: f64, y: &[f64], u: &[f64]) -> f64 {
    let by: f64 = ops.b.iter().zip(y).map(|(a, b)| a * b).sum();
    0.5 * ops.m.bilinear(y, y) - by + 0.5 * alpha * ops.m.bilinear(u, u)
}
