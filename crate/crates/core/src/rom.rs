//! Reduced optimality system: offline projection of the DEIM modes onto the
//! aggregated basis, online assembly from DEIM coefficients and a dense solve.
//!
//! Unknowns are ordered `[y_N; u_N; p_N]` with `y, p` in `V_yp` and `u` in
//! `V_u`. Each stored term is placed into every block position it occupies:
//! `A_N` at (3,1) and transposed at (1,3); `M_yy` at (1,1); `alpha M_uu` at
//! (2,2); `-M_yu` at (3,2) and transposed at (2,3).

use nalgebra::{DMatrix, DVector};

use crate::assembly::{Discretization, ParametricOperators, ProblemCase};
use crate::deim::{Component, DeimModel, DeimSet};
use crate::error::{Error, Result};
use crate::pod::AggregatedBasis;
use crate::sparse::CsrMatrix;
use crate::timing::Stopwatch;

#[derive(Debug, Clone)]
pub struct RomModel {
    pub basis: AggregatedBasis,
    pub deim: DeimSet,
    pub alpha: f64,
    /// `V_yp^T U_A^j V_yp`, one per A mode.
    pub a_terms: Vec<DMatrix<f64>>,
    /// `V_yp^T U_M^j V_yp`.
    pub m_yy: Vec<DMatrix<f64>>,
    /// `V_u^T U_M^j V_u`.
    pub m_uu: Vec<DMatrix<f64>>,
    /// `V_yp^T U_M^j V_u`.
    pub m_yu: Vec<DMatrix<f64>>,
    /// `V_yp^T u_b^j`.
    pub b_terms: Vec<DVector<f64>>,
    /// `V_yp^T u_c^j`.
    pub c_terms: Vec<DVector<f64>>,
}

/// Projected blocks of one operator set.
#[derive(Debug, Clone)]
pub struct ReducedBlocks {
    pub a: DMatrix<f64>,
    pub m_yy: DMatrix<f64>,
    pub m_uu: DMatrix<f64>,
    pub m_yu: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OnlineTimings {
    /// Reduced-mesh partial assembly and DEIM coefficients.
    pub coefficients: f64,
    /// Weighted sums of the stored terms.
    pub multiply: f64,
    pub solve: f64,
    pub lift: f64,
}

#[derive(Debug, Clone)]
pub struct RomSolution {
    pub mu: f64,
    pub y_n: DVector<f64>,
    pub u_n: DVector<f64>,
    pub p_n: DVector<f64>,
    /// `(y, u, p)` in the full space, present when lifted.
    pub lifted: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    pub timings: OnlineTimings,
}

fn project(v: &DMatrix<f64>, a: &CsrMatrix, w: &DMatrix<f64>) -> DMatrix<f64> {
    v.transpose() * a.mul_dense(w)
}

fn project_vec(v: &DMatrix<f64>, x: &[f64]) -> DVector<f64> {
    v.transpose() * DVector::from_column_slice(x)
}

impl ReducedBlocks {
    /// Galerkin projection of exact operators (DEIM bypassed).
    pub fn from_operators(basis: &AggregatedBasis, ops: &ParametricOperators) -> Self {
        let (vyp, vu) = (&basis.v_yp, &basis.v_u);
        Self {
            a: project(vyp, &ops.a, vyp),
            m_yy: project(vyp, &ops.m, vyp),
            m_uu: project(vu, &ops.m, vu),
            m_yu: project(vyp, &ops.m, vu),
            b: project_vec(vyp, &ops.b),
            c: project_vec(vyp, &ops.c),
        }
    }

    /// The dense reduced system matrix and right-hand side.
    pub fn system(&self, alpha: f64) -> (DMatrix<f64>, DVector<f64>) {
        let a = self.a.nrows();
        let b = self.m_uu.nrows();
        let dim = 2 * a + b;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (a, a)).copy_from(&self.m_yy);
        k.view_mut((0, a + b), (a, a)).copy_from(&self.a.transpose());
        k.view_mut((a, a), (b, b)).copy_from(&(&self.m_uu * alpha));
        k.view_mut((a, a + b), (b, a)).copy_from(&(-self.m_yu.transpose()));
        k.view_mut((a + b, 0), (a, a)).copy_from(&self.a);
        k.view_mut((a + b, a), (a, b)).copy_from(&(-&self.m_yu));
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, a).copy_from(&self.b);
        rhs.rows_mut(a + b, a).copy_from(&self.c);
        (k, rhs)
    }
}

fn mode_matrix(model: &DeimModel, d: &Discretization, j: usize) -> Result<CsrMatrix> {
    let mut e = vec![0.0; model.m()];
    e[j] = 1.0;
    model.to_matrix(d, model.reconstruct(&e))
}

fn mode_vector(model: &DeimModel, j: usize) -> Vec<f64> {
    let mut e = vec![0.0; model.m()];
    e[j] = 1.0;
    model.reconstruct(&e)
}

fn weighted_sum(terms: &[DMatrix<f64>], theta: &[f64], out: &mut DMatrix<f64>) {
    out.fill(0.0);
    for (t, &c) in terms.iter().zip(theta) {
        for (o, v) in out.as_mut_slice().iter_mut().zip(t.as_slice()) {
            *o += c * v;
        }
    }
}

fn weighted_sum_vec(terms: &[DVector<f64>], theta: &[f64], out: &mut DVector<f64>) {
    out.fill(0.0);
    for (t, &c) in terms.iter().zip(theta) {
        out.axpy(c, t, 1.0);
    }
}

impl RomModel {
    pub fn build(basis: AggregatedBasis, deim: DeimSet, d: &Discretization, alpha: f64) -> Result<Self> {
        let n = d.n();
        if basis.v_yp.nrows() != n || basis.v_u.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "basis of length {} for N = {n}",
                basis.v_yp.nrows()
            )));
        }
        let (vyp, vu) = (&basis.v_yp, &basis.v_u);
        let mut a_terms = Vec::new();
        for j in 0..deim.a.m() {
            a_terms.push(project(vyp, &mode_matrix(&deim.a, d, j)?, vyp));
        }
        let (mut m_yy, mut m_uu, mut m_yu) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..deim.m.m() {
            let u = mode_matrix(&deim.m, d, j)?;
            m_yy.push(project(vyp, &u, vyp));
            m_uu.push(project(vu, &u, vu));
            m_yu.push(project(vyp, &u, vu));
        }
        let b_terms = (0..deim.b.m()).map(|j| project_vec(vyp, &mode_vector(&deim.b, j))).collect();
        let c_terms = (0..deim.c.m()).map(|j| project_vec(vyp, &mode_vector(&deim.c, j))).collect();
        Ok(Self {
            basis,
            deim,
            alpha,
            a_terms,
            m_yy,
            m_uu,
            m_yu,
            b_terms,
            c_terms,
        })
    }

    /// Stored matrix term families, `m_A + m_M`.
    pub fn q_a(&self) -> usize {
        self.a_terms.len() + self.m_yy.len()
    }

    /// Stored vector terms, `m_b + m_c`.
    pub fn q_beta(&self) -> usize {
        self.b_terms.len() + self.c_terms.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.basis.v_yp.ncols(), self.basis.v_u.ncols())
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.reduced_dim()
    }

    /// DEIM coefficients of the four components at `mu`.
    pub fn coefficients(&self, d: &Discretization, case: &ProblemCase, mu: f64) -> [Vec<f64>; 4] {
        Component::ALL.map(|c| {
            let m = self.deim.get(c);
            m.coefficients(&m.sample(d, case, mu))
        })
    }

    /// Reduced blocks for given DEIM coefficients.
    pub fn blocks(&self, theta: &[Vec<f64>; 4]) -> ReducedBlocks {
        let (a, b) = self.dims();
        let mut out = ReducedBlocks {
            a: DMatrix::zeros(a, a),
            m_yy: DMatrix::zeros(a, a),
            m_uu: DMatrix::zeros(b, b),
            m_yu: DMatrix::zeros(a, b),
            b: DVector::zeros(a),
            c: DVector::zeros(a),
        };
        weighted_sum(&self.a_terms, &theta[0], &mut out.a);
        weighted_sum(&self.m_yy, &theta[1], &mut out.m_yy);
        weighted_sum(&self.m_uu, &theta[1], &mut out.m_uu);
        weighted_sum(&self.m_yu, &theta[1], &mut out.m_yu);
        weighted_sum_vec(&self.b_terms, &theta[2], &mut out.b);
        weighted_sum_vec(&self.c_terms, &theta[3], &mut out.c);
        out
    }

    pub fn solve(&self, d: &Discretization, case: &ProblemCase, mu: f64, lift: bool) -> Result<RomSolution> {
        let sw = Stopwatch::start();
        let theta = self.coefficients(d, case, mu);
        let t_coef = sw.seconds();
        let sw = Stopwatch::start();
        let (k, rhs) = self.blocks(&theta).system(self.alpha);
        let t_mult = sw.seconds();
        let mut sol = self.solve_system(k, rhs, mu)?;
        sol.timings.coefficients = t_coef;
        sol.timings.multiply = t_mult;
        if lift {
            self.lift(&mut sol);
        }
        Ok(sol)
    }

    /// Reduced solve with DEIM bypassed: exact operators projected directly.
    pub fn solve_exact(&self, ops: &ParametricOperators, lift: bool) -> Result<RomSolution> {
        let (k, rhs) = ReducedBlocks::from_operators(&self.basis, ops).system(self.alpha);
        let mut sol = self.solve_system(k, rhs, ops.mu)?;
        if lift {
            self.lift(&mut sol);
        }
        Ok(sol)
    }

    fn solve_system(&self, k: DMatrix<f64>, rhs: DVector<f64>, mu: f64) -> Result<RomSolution> {
        let sw = Stopwatch::start();
        let x = dense_solve(k, &rhs).map_err(|e| e.at_stage("reduced solve", Some(mu)))?;
        let t_solve = sw.seconds();
        let (a, b) = self.dims();
        Ok(RomSolution {
            mu,
            y_n: x.rows(0, a).into_owned(),
            u_n: x.rows(a, b).into_owned(),
            p_n: x.rows(a + b, a).into_owned(),
            lifted: None,
            timings: OnlineTimings {
                solve: t_solve,
                ..Default::default()
            },
        })
    }

    pub fn lift(&self, sol: &mut RomSolution) {
        let sw = Stopwatch::start();
        let y = &self.basis.v_yp * &sol.y_n;
        let u = &self.basis.v_u * &sol.u_n;
        let p = &self.basis.v_yp * &sol.p_n;
        sol.lifted = Some((y.data.into(), u.data.into(), p.data.into()));
        sol.timings.lift = sw.seconds();
    }
}

/// Dense LU with partial pivoting. A zero pivot reports its position.
pub fn dense_solve(k: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = k.lu();
    let u = lu.u();
    for i in 0..u.nrows() {
        if u[(i, i)] == 0.0 || !u[(i, i)].is_finite() {
            return Err(Error::SingularMatrix { pivot: i });
        }
    }
    lu.solve(rhs).ok_or(Error::SingularMatrix { pivot: 0 })
}

/// `[[M, 0, A^T], [0, alpha M, -M^T], [A, -M, 0]]` without inactive-DOF
/// regularization, as a dense matrix.
pub fn dense_block_operator(ops: &ParametricOperators, alpha: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = ops.n();
    let a = ops.a.to_dense();
    let m = ops.m.to_dense();
    let mut k = DMatrix::zeros(3 * n, 3 * n);
    k.view_mut((0, 0), (n, n)).copy_from(&m);
    k.view_mut((0, 2 * n), (n, n)).copy_from(&a.transpose());
    k.view_mut((n, n), (n, n)).copy_from(&(&m * alpha));
    k.view_mut((n, 2 * n), (n, n)).copy_from(&(-m.transpose()));
    k.view_mut((2 * n, 0), (n, n)).copy_from(&a);
    k.view_mut((2 * n, n), (n, n)).copy_from(&(-&m));
    let mut rhs = DVector::zeros(3 * n);
    rhs.rows_mut(0, n).copy_from_slice(&ops.b);
    rhs.rows_mut(2 * n, n).copy_from_slice(&ops.c);
    (k, rhs)
}

/// Relative errors in the exact `M_mu` norm; a zero reference norm yields
/// the absolute error and sets the flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorTriple {
    pub y: f64,
    pub u: f64,
    pub p: f64,
    pub absolute: [bool; 3],
}

pub fn relative_error(m_mu: &CsrMatrix, full: [&[f64]; 3], rom: [&[f64]; 3]) -> ErrorTriple {
    let mut e = [0.0; 3];
    let mut absolute = [false; 3];
    for k in 0..3 {
        let diff: Vec<f64> = full[k].iter().zip(rom[k]).map(|(a, b)| a - b).collect();
        let num = m_mu.bilinear(&diff, &diff).max(0.0).sqrt();
        let den = m_mu.bilinear(full[k], full[k]).max(0.0).sqrt();
        if den > 0.0 {
            e[k] = num / den;
        } else {
            e[k] = num;
            absolute[k] = true;
        }
    }
    ErrorTriple {
        y: e[0],
        u: e[1],
        p: e[2],
        absolute,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_operators;
    use crate::deim::collect_operator_snapshots;
    use crate::kkt::solve_full;
    use crate::mesh::{BackgroundMesh, Diagonal};
    use crate::pod::{aggregate_basis, compute_snapshots, pod_basis, sample_parameters};

    fn disc(h: f64) -> Discretization {
        Discretization::new(BackgroundMesh::build_with([-0.3, -0.3], [2.3, 2.3], h, Diagonal::UnionJack).unwrap())
    }

    struct Fixture {
        d: Discretization,
        case: ProblemCase,
        rom: RomModel,
        params: Vec<f64>,
    }

    fn fixture(h: f64, eps_pod: f64) -> Fixture {
        let d = disc(h);
        let case = ProblemCase::square_poisson();
        let params = sample_parameters(0.4, 0.5, 30, 5).unwrap();
        let s = compute_snapshots(&d, &case, &params).unwrap();
        let w = &s.inner_product;
        let by = pod_basis(&s.s_y, w, eps_pod).unwrap();
        let bu = pod_basis(&s.s_u, w, eps_pod).unwrap();
        let bp = pod_basis(&s.s_p, w, eps_pod).unwrap();
        let basis = aggregate_basis(&by.vectors, &bu.vectors, &bp.vectors, w).unwrap();
        let ops = collect_operator_snapshots(&d, &case, &params).unwrap();
        let deim = DeimSet::build(&d, &ops, 1e-10).unwrap();
        let rom = RomModel::build(basis, deim, &d, case.alpha).unwrap();
        Fixture { d, case, rom, params }
    }

    #[test]
    fn reduced_system_matches_dense_projection() {
        let f = fixture(0.18, 1e-6);
        let vb = f.rom.basis.block();
        for mu in [0.4, 0.433, 0.47, 0.5] {
            let ops = assemble_operators(&f.d, &f.case, mu).unwrap();
            let (k, rhs) = ReducedBlocks::from_operators(&f.rom.basis, &ops).system(f.case.alpha);
            let (kf, rf) = dense_block_operator(&ops, f.case.alpha);
            let k_oracle = vb.transpose() * kf * &vb;
            let r_oracle = vb.transpose() * rf;
            assert!((&k - &k_oracle).amax() <= 1e-10 * (1.0 + k_oracle.amax()));
            assert!((&rhs - &r_oracle).amax() <= 1e-10 * (1.0 + r_oracle.amax()));
        }
    }

    #[test]
    fn term_counts_and_shapes() {
        let f = fixture(0.18, 1e-6);
        let dims = f.rom.deim.dims();
        assert_eq!(f.rom.q_a(), dims[0] + dims[1]);
        assert_eq!(f.rom.q_beta(), dims[2] + dims[3]);
        let (a, b) = f.rom.dims();
        assert!(f.rom.a_terms.iter().all(|t| t.shape() == (a, a)));
        assert!(f.rom.m_yu.iter().all(|t| t.shape() == (a, b)));
        assert_eq!(f.rom.reduced_dim(), 2 * a + b);
    }

    #[test]
    fn training_parameter_errors_are_small() {
        let f = fixture(0.18, 1e-8);
        for &mu in &[f.params[3], f.params[17]] {
            let ops = assemble_operators(&f.d, &f.case, mu).unwrap();
            let full = solve_full(&ops, f.case.alpha).unwrap();
            let rom = f.rom.solve(&f.d, &f.case, mu, true).unwrap();
            let (y, u, p) = rom.lifted.as_ref().unwrap();
            let e = relative_error(&ops.m, [&full.y, &full.u, &full.p], [y, u, p]);
            assert!(e.y <= 1e-2 && e.u <= 1e-2 && e.p <= 1e-2, "{e:?}");
        }
    }

    #[test]
    fn reduced_control_row_holds() {
        let f = fixture(0.18, 1e-6);
        let rom = f.rom.solve(&f.d, &f.case, 0.4444, false).unwrap();
        let theta = f.rom.coefficients(&f.d, &f.case, 0.4444);
        let blk = f.rom.blocks(&theta);
        let lhs = &blk.m_uu * &rom.u_n * f.case.alpha;
        let rhs = blk.m_yu.transpose() * &rom.p_n;
        assert!((&lhs - &rhs).amax() <= 1e-8 * (lhs.amax() + rhs.amax() + 1e-30));
    }

    #[test]
    fn full_rank_basis_reproduces_full_solution() {
        // Identity-like basis: W-orthonormalized unit vectors on every DOF.
        let d = disc(0.36);
        let case = ProblemCase::square_poisson();
        let w = d.background_mass();
        let n = d.n();
        let eye = DMatrix::<f64>::identity(n, n);
        let basis = aggregate_basis(&eye, &eye, &eye, &w).unwrap();
        assert_eq!(basis.v_yp.ncols(), n);
        let params = sample_parameters(0.4, 0.5, 6, 1).unwrap();
        let deim = DeimSet::build(&d, &collect_operator_snapshots(&d, &case, &params).unwrap(), 0.0).unwrap();
        let rom = RomModel::build(basis, deim, &d, case.alpha).unwrap();
        let mu = 0.45;
        let ops = assemble_operators(&d, &case, mu).unwrap();
        let full = solve_full(&ops, case.alpha).unwrap();
        // The unregularized reduced system is singular on inactive DOFs, so
        // restrict to a basis of active unit vectors instead.
        let act: Vec<usize> = (0..n).filter(|&k| ops.active_dofs[k]).collect();
        let sub = DMatrix::from_fn(n, act.len(), |i, j| if i == act[j] { 1.0 } else { 0.0 });
        let basis = aggregate_basis(&sub, &sub, &sub, &w).unwrap();
        let rom = RomModel::build(basis, rom.deim.clone(), &d, case.alpha).unwrap();
        let sol = rom.solve_exact(&ops, true).unwrap();
        let (y, u, p) = sol.lifted.unwrap();
        let e = relative_error(&ops.m, [&full.y, &full.u, &full.p], [&y, &u, &p]);
        assert!(e.y < 1e-8 && e.u < 1e-8 && e.p < 1e-8, "{e:?}");
    }

    #[test]
    fn relative_error_basics() {
        let m = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, 2.0)]);
        let x = [1.0, 1.0];
        let e = relative_error(&m, [&x, &x, &[0.0, 0.0]], [&x, &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(e.y, 0.0);
        assert!((e.u - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(e.absolute, [false, false, true]);
        assert!((e.p - 2f64.sqrt()).abs() < 1e-15);
    }
}
