//! Discrete empirical interpolation of the four parameter-dependent operator
//! components, with reduced-mesh partial assembly for the online stage.
//!
//! Matrix components are vectorized on their fixed union pattern: offset `p`
//! of the CSR value array corresponds to the pair `(i, j)` with linear index
//! `N i + j`, and the CSR order is exactly the lexicographic order of those
//! indices. Basis vectors vanish outside the entries that are nonzero in some
//! training snapshot (the support), so only the support is stored.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::assembly::{
    assemble_operators, facet_patch, local_dirichlet, local_ghost, local_load, local_mass,
    local_stiffness, Discretization, ParametricOperators, ProblemCase,
};
use crate::error::{Error, Result};
use crate::geometry::{is_ghost_facet, ElementTag, LevelSetSquare};
use crate::pod::{energy_truncation_with, orthonormalize};
use crate::sparse::{CsrMatrix, SparsityPattern};

/// Greedy residuals below this are treated as rank deficiency.
const RESIDUAL_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    A,
    M,
    B,
    C,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::A, Component::M, Component::B, Component::C];

    pub fn is_matrix(self) -> bool {
        matches!(self, Component::A | Component::M)
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::A => "A",
            Component::M => "M",
            Component::B => "b",
            Component::C => "c",
        }
    }

    /// The union pattern of a matrix component.
    pub fn pattern(self, d: &Discretization) -> Option<&Arc<SparsityPattern>> {
        match self {
            Component::A => Some(&d.stiffness_pattern),
            Component::M => Some(&d.mass_pattern),
            _ => None,
        }
    }

    pub fn pattern_len(self, d: &Discretization) -> usize {
        self.pattern(d).map_or(d.n(), |p| p.nnz())
    }

    /// The component's value array taken from assembled operators.
    pub fn values(self, ops: &ParametricOperators) -> &[f64] {
        match self {
            Component::A => ops.a.values(),
            Component::M => ops.m.values(),
            Component::B => &ops.b,
            Component::C => &ops.c,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Component::A),
            "M" | "m" => Ok(Component::M),
            "b" | "B" => Ok(Component::B),
            "c" | "C" => Ok(Component::C),
            _ => Err(Error::InvalidInput(format!("unknown component `{s}`"))),
        }
    }
}

/// Vectorized operator values, one column per training parameter.
#[derive(Debug, Clone)]
pub struct OperatorSnapshots {
    pub params: Vec<f64>,
    pub a: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl OperatorSnapshots {
    pub fn get(&self, c: Component) -> &DMatrix<f64> {
        match c {
            Component::A => &self.a,
            Component::M => &self.m,
            Component::B => &self.b,
            Component::C => &self.c,
        }
    }
}

pub fn collect_operator_snapshots(
    d: &Discretization,
    case: &ProblemCase,
    params: &[f64],
) -> Result<OperatorSnapshots> {
    let ops = crate::par_map(params, |&mu| assemble_operators(d, case, mu));
    let k = params.len();
    let mut out = OperatorSnapshots {
        params: params.to_vec(),
        a: DMatrix::zeros(Component::A.pattern_len(d), k),
        m: DMatrix::zeros(Component::M.pattern_len(d), k),
        b: DMatrix::zeros(d.n(), k),
        c: DMatrix::zeros(d.n(), k),
    };
    for (col, o) in ops.into_iter().enumerate() {
        let o = o?;
        for comp in Component::ALL {
            let target = match comp {
                Component::A => &mut out.a,
                Component::M => &mut out.m,
                Component::B => &mut out.b,
                Component::C => &mut out.c,
            };
            target.column_mut(col).copy_from_slice(comp.values(&o));
        }
    }
    Ok(out)
}

/// Rows that are nonzero in at least one snapshot.
pub fn support_rows(s: &DMatrix<f64>) -> Vec<usize> {
    (0..s.nrows())
        .filter(|&r| s.row(r).iter().any(|&v| v != 0.0))
        .collect()
}

/// Euclidean POD of the ensemble, computed from a thin SVD so that modes
/// down to roundoff relative to the largest singular value stay accurate.
/// Returns the orthonormal basis and the correlation eigenvalues
/// `sigma_i^2 / M`.
pub fn deim_basis(s: &DMatrix<f64>, eps: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let m = s.ncols();
    if m == 0 || s.iter().all(|&v| v == 0.0) {
        return Err(Error::RankCollapse("empty or all-zero operator ensemble".into()));
    }
    let svd = s.clone().svd(true, false);
    let u_all = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order
        .iter()
        .map(|&k| svd.singular_values[k].powi(2) / m as f64)
        .collect();
    // Singular values below this relative level are roundoff.
    let sigma_tol = f64::EPSILON * s.nrows().max(m) as f64;
    let k = energy_truncation_with(&eigenvalues, eps, sigma_tol * sigma_tol);
    let u = DMatrix::from_fn(s.nrows(), k, |i, j| u_all[(i, order[j])]);
    let eye = CsrMatrix::from_triplets(
        s.nrows(),
        &(0..s.nrows()).map(|i| (i, i, 1.0)).collect::<Vec<_>>(),
    );
    Ok((orthonormalize(&u, &eye, 0.0)?, eigenvalues))
}

fn argmax_abs(v: impl Iterator<Item = f64>) -> (usize, f64) {
    // Strict comparison keeps the lowest index among equal magnitudes.
    let mut best = (0, -1.0);
    for (k, x) in v.enumerate() {
        if x.abs() > best.1 {
            best = (k, x.abs());
        }
    }
    best
}

/// Greedy interpolation indices (rows of `u`). Stops early, with a warning,
/// when the residual vanishes.
pub fn deim_select(u: &DMatrix<f64>) -> Vec<usize> {
    let mut idx = Vec::with_capacity(u.ncols());
    if u.ncols() == 0 {
        return idx;
    }
    idx.push(argmax_abs(u.column(0).iter().copied()).0);
    for l in 1..u.ncols() {
        let pu = DMatrix::from_fn(l, l, |r, c| u[(idx[r], c)]);
        let rhs = DVector::from_fn(l, |r, _| u[(idx[r], l)]);
        let Some(c) = pu.lu().solve(&rhs) else {
            log::warn!("singular interpolation matrix after {l} indices");
            break;
        };
        let r = u.column(l) - u.columns(0, l) * c;
        let (p, mag) = argmax_abs(r.iter().copied());
        if mag <= RESIDUAL_TOL {
            log::warn!("DEIM residual vanished after {l} indices, truncating");
            break;
        }
        idx.push(p);
    }
    idx
}

/// Elements and ghost-facet candidates whose local contributions reach the
/// selected entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReducedMesh {
    /// Elements whose DOFs contain a selected pair (or index).
    pub elements: Vec<usize>,
    /// Interior faces whose two-element patch contains a selected pair.
    pub facets: Vec<usize>,
    /// `elements` plus both neighbors of every facet, sorted.
    pub classified: Vec<usize>,
}

/// `(row, col)` for matrix components, `(i, i)` for vectors.
pub fn index_pair(comp: Component, d: &Discretization, offset: usize) -> (usize, usize) {
    match comp.pattern(d) {
        Some(p) => p.entry(offset),
        None => (offset, offset),
    }
}

pub fn build_reduced_mesh(comp: Component, d: &Discretization, pattern_indices: &[usize]) -> Result<ReducedMesh> {
    let v2e = d.mesh.vertex_to_elements();
    let mut elements = Vec::new();
    let mut facets = Vec::new();
    for &off in pattern_indices {
        let (i, j) = index_pair(comp, d, off);
        let before = (elements.len(), facets.len());
        for &e in &v2e[i] {
            if d.mesh.elements[e].contains(&j) {
                elements.push(e);
            }
        }
        if comp == Component::A {
            for (f, face) in d.faces.faces.iter().enumerate() {
                if face.is_interior() {
                    let p = facet_patch(&d.mesh, face);
                    if p.contains(&i) && p.contains(&j) {
                        facets.push(f);
                    }
                }
            }
        }
        if (elements.len(), facets.len()) == before {
            return Err(Error::UncoveredIndex { row: i, col: j });
        }
    }
    elements.sort_unstable();
    elements.dedup();
    facets.sort_unstable();
    facets.dedup();
    let mut classified = elements.clone();
    for &f in &facets {
        let face = &d.faces.faces[f];
        classified.push(face.left);
        classified.extend(face.right);
    }
    classified.sort_unstable();
    classified.dedup();
    Ok(ReducedMesh {
        elements,
        facets,
        classified,
    })
}

/// Where each selected entry collects its local contributions.
#[derive(Debug, Clone, Default)]
struct GatherPlan {
    /// Per selected index: (slot in `elements`, local row, local col).
    element_terms: Vec<Vec<(usize, u8, u8)>>,
    /// Per selected index: (slot in `facets`, patch row, patch col).
    facet_terms: Vec<Vec<(usize, u8, u8)>>,
    /// Slot in `classified` of every element and facet neighbor.
    element_class_slot: Vec<usize>,
    facet_class_slots: Vec<(usize, usize)>,
}

impl GatherPlan {
    fn new(comp: Component, d: &Discretization, indices: &[usize], rm: &ReducedMesh) -> Self {
        let slot = |e: usize| rm.classified.binary_search(&e).expect("classified superset");
        let mut plan = GatherPlan {
            element_class_slot: rm.elements.iter().map(|&e| slot(e)).collect(),
            facet_class_slots: rm
                .facets
                .iter()
                .map(|&f| {
                    let face = &d.faces.faces[f];
                    (slot(face.left), slot(face.right.expect("interior facet")))
                })
                .collect(),
            ..Default::default()
        };
        for &off in indices {
            let (i, j) = index_pair(comp, d, off);
            let mut et = Vec::new();
            for (s, &e) in rm.elements.iter().enumerate() {
                let el = &d.mesh.elements[e];
                if let (Some(li), Some(lj)) = (el.iter().position(|&v| v == i), el.iter().position(|&v| v == j)) {
                    et.push((s, li as u8, lj as u8));
                }
            }
            let mut ft = Vec::new();
            if comp == Component::A {
                for (s, &f) in rm.facets.iter().enumerate() {
                    let p = facet_patch(&d.mesh, &d.faces.faces[f]);
                    if let (Some(pi), Some(pj)) = (p.iter().position(|&v| v == i), p.iter().position(|&v| v == j)) {
                        ft.push((s, pi as u8, pj as u8));
                    }
                }
            }
            plan.element_terms.push(et);
            plan.facet_terms.push(ft);
        }
        plan
    }
}

/// Hyper-reduced model of one operator component.
#[derive(Debug, Clone)]
pub struct DeimModel {
    pub component: Component,
    /// Length of the full vectorized component.
    pub pattern_len: usize,
    /// Pattern offsets where the basis can be nonzero.
    pub support: Vec<usize>,
    /// Orthonormal basis restricted to `support`, `support.len() × m`.
    pub basis: DMatrix<f64>,
    /// Selected pattern offsets, in greedy order.
    pub indices: Vec<usize>,
    /// `(P^T U)^{-1}`.
    pub pt_u_inv: DMatrix<f64>,
    /// `U (P^T U)^{-1}` restricted to `support`.
    pub projector: DMatrix<f64>,
    pub reduced_mesh: ReducedMesh,
    /// Correlation eigenvalues of the training ensemble.
    pub eigenvalues: Vec<f64>,
    plan: GatherPlan,
}

impl DeimModel {
    /// POD with tolerance `eps`, greedy selection and reduced mesh.
    pub fn build(comp: Component, d: &Discretization, snapshots: &DMatrix<f64>, eps: f64) -> Result<Self> {
        let stage = |e: Error| e.at_stage(&format!("deim {comp}"), None);
        if snapshots.nrows() != comp.pattern_len(d) {
            return Err(stage(Error::DimensionMismatch(format!(
                "{} rows for a pattern of length {}",
                snapshots.nrows(),
                comp.pattern_len(d)
            ))));
        }
        let support = support_rows(snapshots);
        let restricted = snapshots.select_rows(&support);
        let (u, eigenvalues) = deim_basis(&restricted, eps).map_err(stage)?;
        Self::from_basis(comp, d, support, u, eigenvalues).map_err(stage)
    }

    pub fn from_basis(
        comp: Component,
        d: &Discretization,
        support: Vec<usize>,
        basis: DMatrix<f64>,
        eigenvalues: Vec<f64>,
    ) -> Result<Self> {
        let local = deim_select(&basis);
        let basis = basis.columns(0, local.len()).into_owned();
        let indices: Vec<usize> = local.iter().map(|&r| support[r]).collect();
        let m = local.len();
        let pu = DMatrix::from_fn(m, m, |r, c| basis[(local[r], c)]);
        let pt_u_inv = pu
            .try_inverse()
            .ok_or_else(|| Error::RankCollapse("P^T U is singular".into()))?;
        if pt_u_inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankCollapse("P^T U is numerically singular".into()));
        }
        let projector = &basis * &pt_u_inv;
        let reduced_mesh = build_reduced_mesh(comp, d, &indices)?;
        let plan = GatherPlan::new(comp, d, &indices, &reduced_mesh);
        Ok(Self {
            component: comp,
            pattern_len: comp.pattern_len(d),
            support,
            basis,
            indices,
            pt_u_inv,
            projector,
            reduced_mesh,
            eigenvalues,
            plan,
        })
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    /// The model with only the leading `m` modes; indices are nested, so this
    /// is the model DEIM would have built for `m`.
    pub fn truncated(&self, m: usize, d: &Discretization) -> Result<Self> {
        let m = m.min(self.m());
        let basis = self.basis.columns(0, m).into_owned();
        let model = Self::from_basis(self.component, d, self.support.clone(), basis, self.eigenvalues.clone())?;
        debug_assert_eq!(model.indices[..], self.indices[..m]);
        Ok(model)
    }

    /// The component's entries at the selected indices, by partial assembly
    /// on the reduced mesh.
    pub fn sample(&self, d: &Discretization, case: &ProblemCase, mu: f64) -> Vec<f64> {
        let ls = LevelSetSquare::new(mu);
        let rm = &self.reduced_mesh;
        // Facet-only neighbors need just their tag for the ghost test.
        let tags: Vec<ElementTag> = rm.classified.iter().map(|&e| d.element_tag(e, &ls)).collect();
        let elem_local: Vec<Option<[[f64; 3]; 3]>> = rm
            .elements
            .iter()
            .zip(&self.plan.element_class_slot)
            .map(|(&e, &s)| {
                if !tags[s].is_active() {
                    return None;
                }
                let cut = d.element_cut(e, &ls);
                let tri = d.mesh.element_vertices(e);
                Some(match self.component {
                    Component::A => local_stiffness(&tri, &cut.interior, &cut.boundary, case.gamma_d, d.h),
                    Component::M => local_mass(&tri, &cut.interior),
                    Component::B => diag(local_load(&tri, &cut.interior, case.target)),
                    Component::C => {
                        let mut v = local_load(&tri, &cut.interior, case.forcing);
                        let g = local_dirichlet(&tri, &cut.boundary, case.dirichlet, case.gamma_d, d.h);
                        for k in 0..3 {
                            v[k] += g[k];
                        }
                        diag(v)
                    }
                })
            })
            .collect();
        let facet_local: Vec<Option<[[f64; 4]; 4]>> = rm
            .facets
            .iter()
            .zip(&self.plan.facet_class_slots)
            .map(|(&f, &(l, r))| {
                is_ghost_facet(tags[l], Some(tags[r]))
                    .then(|| local_ghost(&d.mesh, &d.faces.faces[f], case.gamma_1, d.h).1)
            })
            .collect();
        self.plan
            .element_terms
            .iter()
            .zip(&self.plan.facet_terms)
            .map(|(et, ft)| {
                let mut v = 0.0;
                for &(s, li, lj) in et {
                    if let Some(k) = &elem_local[s] {
                        v += k[li as usize][lj as usize];
                    }
                }
                for &(s, pi, pj) in ft {
                    if let Some(g) = &facet_local[s] {
                        v += g[pi as usize][pj as usize];
                    }
                }
                v
            })
            .collect()
    }

    /// DEIM coefficients `(P^T U)^{-1} theta_tilde`.
    pub fn coefficients(&self, sampled: &[f64]) -> Vec<f64> {
        (&self.pt_u_inv * DVector::from_column_slice(sampled)).as_slice().to_vec()
    }

    /// Full-length vectorized approximation `U theta`.
    pub fn reconstruct(&self, theta: &[f64]) -> Vec<f64> {
        let on_support = &self.basis * DVector::from_column_slice(theta);
        let mut out = vec![0.0; self.pattern_len];
        for (k, &r) in self.support.iter().enumerate() {
            out[r] = on_support[k];
        }
        out
    }

    /// `projector * theta_tilde` written into `out` (full length, zeroed
    /// outside the support).
    pub fn reconstruct_into(&self, sampled: &[f64], out: &mut [f64]) {
        let rows = self.support.len();
        let mut acc = vec![0.0; rows];
        if rows > 0 {
            for (col, &s) in self.projector.as_slice().chunks_exact(rows).zip(sampled) {
                for (a, &p) in acc.iter_mut().zip(col) {
                    *a += p * s;
                }
            }
        }
        for (&r, &a) in self.support.iter().zip(&acc) {
            out[r] = a;
        }
    }

    /// Partial assembly, coefficients and reconstruction in one call.
    pub fn online(&self, d: &Discretization, case: &ProblemCase, mu: f64) -> Vec<f64> {
        let sampled = self.sample(d, case, mu);
        let mut out = vec![0.0; self.pattern_len];
        self.reconstruct_into(&sampled, &mut out);
        out
    }

    /// Reconstruction as a sparse matrix on the union pattern.
    pub fn to_matrix(&self, d: &Discretization, values: Vec<f64>) -> Result<CsrMatrix> {
        let p = self
            .component
            .pattern(d)
            .ok_or_else(|| Error::InvalidInput(format!("component {} is a vector", self.component)))?;
        CsrMatrix::from_values(p.clone(), values)
    }
}

fn diag(v: [f64; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for k in 0..3 {
        m[k][k] = v[k];
    }
    m
}

/// `||approx - exact||_2 / ||exact||_2`, or the absolute error if `exact` is zero.
pub fn relative_l2(approx: &[f64], exact: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, e) in approx.iter().zip(exact) {
        num += (a - e) * (a - e);
        den += e * e;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// The four hyper-reduced components.
#[derive(Debug, Clone)]
pub struct DeimSet {
    pub a: DeimModel,
    pub m: DeimModel,
    pub b: DeimModel,
    pub c: DeimModel,
}

impl DeimSet {
    pub fn build(d: &Discretization, snaps: &OperatorSnapshots, eps: f64) -> Result<Self> {
        let models = crate::par_map(&Component::ALL, |&c| DeimModel::build(c, d, snaps.get(c), eps));
        let mut it = models.into_iter();
        let mut next = || it.next().expect("four components");
        Ok(Self {
            a: next()?,
            m: next()?,
            b: next()?,
            c: next()?,
        })
    }

    pub fn get(&self, c: Component) -> &DeimModel {
        match c {
            Component::A => &self.a,
            Component::M => &self.m,
            Component::B => &self.b,
            Component::C => &self.c,
        }
    }

    /// Each component truncated to the given dimension (clamped).
    pub fn truncated(&self, dims: [usize; 4], d: &Discretization) -> Result<Self> {
        Ok(Self {
            a: self.a.truncated(dims[0], d)?,
            m: self.m.truncated(dims[1], d)?,
            b: self.b.truncated(dims[2], d)?,
            c: self.c.truncated(dims[3], d)?,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.a.m(), self.m.m(), self.b.m(), self.c.m()]
    }
}
