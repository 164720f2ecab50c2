//! Parameter sampling, solution snapshots and POD by the method of snapshots.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{assemble_operators, Discretization, ProblemCase};
use crate::error::{Error, Result};
use crate::kkt::solve_full;
use crate::sparse::CsrMatrix;
use crate::timing::timed;

/// Relative cut below which eigenvalues count as numerically zero.
pub const RANK_TOL: f64 = 1e-12;
/// Columns whose norm falls below this after projection are dropped.
pub const DROP_TOL: f64 = 1e-10;
const DUPLICATE_TOL: f64 = 1e-12;

fn draw_distinct(rng: &mut ChaCha8Rng, lo: f64, hi: f64, mut out: Vec<f64>, count: usize) -> Vec<f64> {
    out.sort_by(f64::total_cmp);
    while out.len() < count {
        let v = rng.random_range(lo..hi);
        let pos = out.partition_point(|&x| x < v);
        let clash = out.get(pos).is_some_and(|&x| x - v <= DUPLICATE_TOL)
            || (pos > 0 && v - out[pos - 1] <= DUPLICATE_TOL);
        if !clash {
            out.insert(pos, v);
        }
    }
    out
}

/// Training parameters: both endpoints plus `count - 2` uniform draws from
/// stream 0 of a ChaCha8 generator, sorted and free of duplicates.
pub fn sample_parameters(lo: f64, hi: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidInput(format!("empty parameter range [{lo}, {hi}]")));
    }
    if count < 2 {
        return Err(Error::InvalidInput(format!(
            "{count} training parameters cannot include both endpoints"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    Ok(draw_distinct(&mut rng, lo, hi, vec![lo, hi], count))
}

/// Test parameters: `count` uniform draws from stream 1, sorted.
pub fn sample_test_parameters(lo: f64, hi: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::InvalidInput(format!("empty parameter range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(draw_distinct(&mut rng, lo, hi, Vec::new(), count))
}

#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub params: Vec<f64>,
    pub s_y: DMatrix<f64>,
    pub s_u: DMatrix<f64>,
    pub s_p: DMatrix<f64>,
    pub inner_product: CsrMatrix,
    pub assembly_times: Vec<f64>,
    pub solve_times: Vec<f64>,
}

/// One full solve per parameter, run concurrently.
pub fn compute_snapshots(d: &Discretization, case: &ProblemCase, params: &[f64]) -> Result<SnapshotSet> {
    let n = d.n();
    let solved = crate::par_map(params, |&mu| -> Result<_> {
        let (ops, ta) = timed(|| assemble_operators(d, case, mu));
        let sol = solve_full(&ops?, case.alpha)?;
        Ok((sol, ta))
    });
    let m = params.len();
    let mut set = SnapshotSet {
        params: params.to_vec(),
        s_y: DMatrix::zeros(n, m),
        s_u: DMatrix::zeros(n, m),
        s_p: DMatrix::zeros(n, m),
        inner_product: d.background_mass(),
        assembly_times: Vec::with_capacity(m),
        solve_times: Vec::with_capacity(m),
    };
    for (k, r) in solved.into_iter().enumerate() {
        let (sol, ta) = r.map_err(|e| e.at_stage("snapshots", Some(params[k])))?;
        set.s_y.set_column(k, &DVector::from_vec(sol.y));
        set.s_u.set_column(k, &DVector::from_vec(sol.u));
        set.s_p.set_column(k, &DVector::from_vec(sol.p));
        set.assembly_times.push(ta);
        set.solve_times.push(sol.solve_time);
    }
    Ok(set)
}

#[derive(Debug, Clone)]
pub struct PodBasis {
    /// `N × retained`, orthonormal in the inner product.
    pub vectors: DMatrix<f64>,
    /// Non-increasing, nonnegative, one per snapshot.
    pub eigenvalues: Vec<f64>,
    pub retained: usize,
    pub tolerance: f64,
}

impl PodBasis {
    /// Basis restricted to its leading `k` vectors.
    pub fn truncated(&self, k: usize) -> DMatrix<f64> {
        self.vectors.columns(0, k.min(self.retained)).into_owned()
    }
}

/// Minimal `n` with `sum_{i<n} lambda_i >= (1 - eps) sum lambda`, capped at
/// the numerical rank.
pub fn energy_truncation(eigenvalues: &[f64], eps: f64) -> usize {
    energy_truncation_with(eigenvalues, eps, RANK_TOL)
}

/// As `energy_truncation`, with eigenvalues at or below `rank_tol * lambda_1`
/// never retained.
pub fn energy_truncation_with(eigenvalues: &[f64], eps: f64, rank_tol: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let rank = eigenvalues
        .iter()
        .take_while(|&&l| l > rank_tol * eigenvalues[0])
        .count();
    let target = (1.0 - eps) * total;
    let mut acc = 0.0;
    for (k, &l) in eigenvalues.iter().enumerate() {
        acc += l;
        if acc >= target {
            return (k + 1).min(rank);
        }
    }
    rank
}

/// Sorted eigenpairs of the symmetric matrix `c`, largest first.
pub fn sorted_eigen(c: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |i, j| {
        eig.eigenvectors[(i, order[j])]
    });
    (values, vectors)
}

/// `C = S^T W S / M`, eigendecomposed; vectors `S x_i / sqrt(M lambda_i)`.
pub fn pod_basis(s: &DMatrix<f64>, w: &CsrMatrix, eps: f64) -> Result<PodBasis> {
    let m = s.ncols();
    if m == 0 {
        return Err(Error::InvalidInput("no snapshots".into()));
    }
    if w.n() != s.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "inner product of size {} for snapshots of length {}",
            w.n(),
            s.nrows()
        )));
    }
    let ws = w.mul_dense(s);
    let mut c = s.transpose() * &ws / m as f64;
    c = (&c + c.transpose()) * 0.5;
    let (eigenvalues, x) = sorted_eigen(c);
    let retained = energy_truncation(&eigenvalues, eps);
    if retained == 0 {
        log::warn!("all-zero snapshot matrix, POD basis is empty");
    }
    let mut vectors = DMatrix::zeros(s.nrows(), retained);
    for k in 0..retained {
        let v = s * x.column(k) / (m as f64 * eigenvalues[k]).sqrt();
        vectors.set_column(k, &v);
    }
    let vectors = orthonormalize(&vectors, w, 0.0)?;
    if vectors.ncols() != retained {
        return Err(Error::RankCollapse(format!(
            "{} of {retained} POD vectors are dependent",
            retained - vectors.ncols()
        )));
    }
    Ok(PodBasis {
        vectors,
        eigenvalues,
        retained,
        tolerance: eps,
    })
}

/// Modified Gram-Schmidt in the `w` inner product with one reorthogonalization
/// pass. Columns whose norm after projection is at most `drop_tol` times
/// their original norm, or exactly zero, are dropped.
pub fn orthonormalize(v: &DMatrix<f64>, w: &CsrMatrix, drop_tol: f64) -> Result<DMatrix<f64>> {
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut w_kept: Vec<DVector<f64>> = Vec::new();
    for col in v.column_iter() {
        let mut x = col.into_owned();
        let norm0 = w.mul_dvec(&x).dot(&x).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for (q, wq) in kept.iter().zip(&w_kept) {
                let c = wq.dot(&x);
                x.axpy(-c, q, 1.0);
            }
        }
        let wx = w.mul_dvec(&x);
        let norm = wx.dot(&x).sqrt();
        if !norm.is_finite() {
            return Err(Error::RankCollapse("non-finite basis vector".into()));
        }
        if norm <= drop_tol * norm0 || norm == 0.0 {
            continue;
        }
        kept.push(x / norm);
        w_kept.push(wx / norm);
    }
    Ok(if kept.is_empty() {
        DMatrix::zeros(v.nrows(), 0)
    } else {
        DMatrix::from_columns(&kept)
    })
}

/// State and adjoint share the trial/test space `V_yp`.
#[derive(Debug, Clone)]
pub struct AggregatedBasis {
    pub v_yp: DMatrix<f64>,
    pub v_u: DMatrix<f64>,
}

impl AggregatedBasis {
    /// Dimension of the reduced optimality system, `2 dim(V_yp) + dim(V_u)`.
    pub fn reduced_dim(&self) -> usize {
        2 * self.v_yp.ncols() + self.v_u.ncols()
    }

    /// `V_yp ⊕ V_u ⊕ V_yp`.
    pub fn block(&self) -> DMatrix<f64> {
        let n = self.v_yp.nrows();
        let (a, b) = (self.v_yp.ncols(), self.v_u.ncols());
        let mut v = DMatrix::zeros(3 * n, 2 * a + b);
        v.view_mut((0, 0), (n, a)).copy_from(&self.v_yp);
        v.view_mut((n, a), (n, b)).copy_from(&self.v_u);
        v.view_mut((2 * n, a + b), (n, a)).copy_from(&self.v_yp);
        v
    }
}

pub fn aggregate_basis(
    v_y: &DMatrix<f64>,
    v_u: &DMatrix<f64>,
    v_p: &DMatrix<f64>,
    w: &CsrMatrix,
) -> Result<AggregatedBasis> {
    let n = w.n();
    if v_y.nrows() != n || v_u.nrows() != n || v_p.nrows() != n {
        return Err(Error::DimensionMismatch("basis lengths differ".into()));
    }
    let mut cat = DMatrix::zeros(n, v_y.ncols() + v_p.ncols());
    cat.columns_mut(0, v_y.ncols()).copy_from(v_y);
    cat.columns_mut(v_y.ncols(), v_p.ncols()).copy_from(v_p);
    let v_yp = orthonormalize(&cat, w, DROP_TOL)?;
    if v_yp.ncols() == 0 {
        return Err(Error::RankCollapse("aggregated state/adjoint space is empty".into()));
    }
    if v_u.ncols() == 0 {
        return Err(Error::RankCollapse("control space is empty".into()));
    }
    Ok(AggregatedBasis {
        v_yp,
        v_u: v_u.clone(),
    })
}

/// `max |V^T W V - I|`.
pub fn orthonormality_defect(v: &DMatrix<f64>, w: &CsrMatrix) -> f64 {
    let g = v.transpose() * w.mul_dense(v);
    let mut d: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let e = if i == j { 1.0 } else { 0.0 };
            d = d.max((g[(i, j)] - e).abs());
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{BackgroundMesh, Diagonal};

    fn weight(n: usize) -> CsrMatrix {
        // SPD tridiagonal.
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i + 1 < n {
                t.push((i, i + 1, 1.0));
                t.push((i + 1, i, 1.0));
            }
        }
        CsrMatrix::from_triplets(n, &t)
    }

    #[test]
    fn sampling_policy() {
        assert_eq!(sample_parameters(0.4, 0.5, 2, 1).unwrap(), vec![0.4, 0.5]);
        let a = sample_parameters(0.4, 0.5, 370, 9).unwrap();
        assert_eq!(a, sample_parameters(0.4, 0.5, 370, 9).unwrap());
        assert_ne!(a, sample_parameters(0.4, 0.5, 370, 10).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&m| (0.4..=0.5).contains(&m)));
        assert_eq!((a[0], a[369]), (0.4, 0.5));
        let mut buckets: Vec<i64> = a.iter().map(|m| (m * 1e6).round() as i64).collect();
        buckets.dedup();
        assert!(buckets.len() >= 300);
        assert!(sample_parameters(0.4, 0.5, 1, 0).is_err());
        assert!(sample_parameters(0.5, 0.4, 5, 0).is_err());
        let t = sample_test_parameters(0.4, 0.5, 30, 9).unwrap();
        assert_eq!(t.len(), 30);
        assert!(t.iter().all(|x| !a.contains(x)));
    }

    #[test]
    fn rank_one_snapshot() {
        let w = weight(5);
        let s = DMatrix::from_column_slice(5, 1, &[1.0, -2.0, 0.5, 0.0, 3.0]);
        let b = pod_basis(&s, &w, 0.0).unwrap();
        let norm2 = w.bilinear(s.as_slice(), s.as_slice());
        assert_eq!(b.retained, 1);
        assert!((b.eigenvalues[0] - norm2).abs() < 1e-12 * norm2);
        let v = b.vectors.column(0);
        let expected = s.column(0) / norm2.sqrt();
        assert!((v - &expected).amax() < 1e-12 || (v + &expected).amax() < 1e-12);
    }

    #[test]
    fn two_column_energy_criterion() {
        // Columns of W-norm 2 and 1, W-orthogonal: lambda proportional to {4, 1}.
        let w = CsrMatrix::from_triplets(3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]);
        let s = DMatrix::from_column_slice(3, 2, &[2.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let retained = |eps| pod_basis(&s, &w, eps).unwrap().retained;
        assert_eq!(retained(0.19), 2);
        assert_eq!(retained(0.21), 1);
        assert_eq!(retained(0.3), 1);
        assert_eq!(retained(0.0), 2);
        let b = pod_basis(&s, &w, 0.0).unwrap();
        assert!((b.eigenvalues[0] / b.eigenvalues[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_snapshots_give_empty_basis() {
        let b = pod_basis(&DMatrix::zeros(4, 3), &weight(4), 1e-5).unwrap();
        assert_eq!(b.retained, 0);
        assert_eq!(b.vectors.ncols(), 0);
    }

    fn random_snapshots(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Decaying spectrum: column k mixes modes with weights 2^-j.
        DMatrix::from_fn(n, m, |i, _| {
            let mode = (i % 7) as i32;
            rng.random_range(-1.0..1.0) * 2f64.powi(-mode)
        })
    }

    #[test]
    fn trace_identity_and_orthonormality() {
        let n = 30;
        let w = weight(n);
        let s = random_snapshots(n, 12, 3);
        let b = pod_basis(&s, &w, 1e-3).unwrap();
        let sum: f64 = b.eigenvalues.iter().sum();
        let direct: f64 = s
            .column_iter()
            .map(|c| w.bilinear(c.as_slice(), c.as_slice()))
            .sum::<f64>()
            / 12.0;
        assert!((sum - direct).abs() <= 1e-10 * direct);
        assert!(b.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
        assert!(orthonormality_defect(&b.vectors, &w) < 1e-10);
    }

    #[test]
    fn projection_optimality_over_snapshots() {
        let n = 30;
        let w = weight(n);
        let s = random_snapshots(n, 12, 5);
        let full = pod_basis(&s, &w, 0.0).unwrap();
        let k = 4;
        let err = |v: &DMatrix<f64>| -> f64 {
            let proj = v * (v.transpose() * w.mul_dense(&s));
            let r = &s - proj;
            r.column_iter().map(|c| w.bilinear(c.as_slice(), c.as_slice())).sum()
        };
        let best = err(&full.truncated(k));
        // Tail identity: the summed error equals M times the discarded eigenvalues.
        let tail: f64 = full.eigenvalues[k..].iter().sum::<f64>() * 12.0;
        assert!((best - tail).abs() <= 1e-9 * tail.max(1e-30));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let mut idx: Vec<usize> = (0..full.retained).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let z = DMatrix::from_columns(
                &idx[..k].iter().map(|&c| full.vectors.column(c).into_owned()).collect::<Vec<_>>(),
            );
            assert!(best <= err(&z) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn aggregation() {
        let n = 20;
        let w = weight(n);
        let s = random_snapshots(n, 8, 2);
        let b = pod_basis(&s, &w, 0.0).unwrap();
        let v = b.truncated(3);
        let dup = aggregate_basis(&v, &v, &v, &w).unwrap();
        assert_eq!(dup.v_yp.ncols(), 3);
        let v2 = b.vectors.columns(3, 2).into_owned();
        let agg = aggregate_basis(&v, &v, &v2, &w).unwrap();
        assert_eq!(agg.v_yp.ncols(), 5);
        assert_eq!(agg.reduced_dim(), 13);
        let blk = agg.block();
        let w3 = {
            let t: Vec<_> = (0..3)
                .flat_map(|k| {
                    w.pattern()
                        .entries()
                        .zip(w.values())
                        .map(move |((i, j), &x)| (k * n + i, k * n + j, x))
                })
                .collect();
            CsrMatrix::from_triplets(3 * n, &t)
        };
        assert!(orthonormality_defect(&blk, &w3) < 1e-10);
    }

    #[test]
    fn snapshots_smoke() {
        let d = Discretization::new(
            BackgroundMesh::build_with([-0.3, -0.3], [2.3, 2.3], 0.18, Diagonal::UnionJack).unwrap(),
        );
        let case = ProblemCase::square_poisson();
        let params = [0.41, 0.41, 0.47];
        let set = compute_snapshots(&d, &case, &params).unwrap();
        assert_eq!(set.s_y.column(0), set.s_y.column(1));
        let single = solve_full(&assemble_operators(&d, &case, 0.47).unwrap(), case.alpha).unwrap();
        assert_eq!(set.s_p.column(2).as_slice(), &single.p[..]);
        let geom = d.geometry(0.41);
        for k in 0..d.n() {
            if !geom.active_dofs[k] {
                assert_eq!(set.s_u[(k, 0)], 0.0);
            }
        }
    }
}
