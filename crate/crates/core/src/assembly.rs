//! CutFEM operators on the fixed background numbering: stiffness with Nitsche
//! and ghost-penalty terms, cut mass matrix, target and forcing vectors.
//!
//! Rows of inactive DOFs stay zero here; the optimality system regularizes
//! them.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{
    barycentric, classify_values, cut_element, p1_gradients, snap_tolerance, snapped_eval, BoundaryQuadPoint,
    CutGeometry, ElementCut, ElementTag, LevelSet, LevelSetSquare, QuadPoint,
};
use crate::mesh::{dist, BackgroundMesh, Face, FaceTable, Point};
use crate::sparse::{CsrMatrix, SparsityPattern};

pub type ScalarField = fn(f64, f64) -> f64;

pub type LocalMatrix = [[f64; 3]; 3];
pub type LocalVector = [f64; 3];
pub type FacetMatrix = [[f64; 4]; 4];

#[derive(Clone, Copy)]
pub struct ProblemCase {
    pub forcing: ScalarField,
    pub target: ScalarField,
    pub dirichlet: ScalarField,
    /// Tikhonov weight.
    pub alpha: f64,
    /// Nitsche penalty.
    pub gamma_d: f64,
    /// Ghost penalty.
    pub gamma_1: f64,
}

impl std::fmt::Debug for ProblemCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemCase")
            .field("alpha", &self.alpha)
            .field("gamma_d", &self.gamma_d)
            .field("gamma_1", &self.gamma_1)
            .finish_non_exhaustive()
    }
}

pub fn zero_field(_: f64, _: f64) -> f64 {
    0.0
}

pub fn unit_field(_: f64, _: f64) -> f64 {
    1.0
}

fn bilinear_forcing(x: f64, y: f64) -> f64 {
    x * y
}

fn oscillating_target(x: f64, _y: f64) -> f64 {
    (PI * x).sin() * (PI * x).cos() / (2.0 * PI)
}

impl ProblemCase {
    /// Forcing `xy`, target `sin(pi x) cos(pi x) / (2 pi)`, homogeneous
    /// Dirichlet data.
    pub fn square_poisson() -> Self {
        Self {
            forcing: bilinear_forcing,
            target: oscillating_target,
            dirichlet: zero_field,
            alpha: 1e-4,
            gamma_d: 10.0,
            gamma_1: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma_d", self.gamma_d),
            ("gamma_1", self.gamma_1),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sorted union of the vertices of the two elements adjacent to an interior face.
pub fn facet_patch(mesh: &BackgroundMesh, face: &Face) -> [usize; 4] {
    let r = face.right.expect("facet patch of a boundary face");
    let left = mesh.elements[face.left];
    let apex = mesh.elements[r]
        .into_iter()
        .find(|v| !left.contains(v))
        .expect("two triangles sharing an edge span four vertices");
    let mut p = [left[0], left[1], left[2], apex];
    p.sort_unstable();
    p
}

/// Level set that is negative on the whole plane.
struct Everywhere;

impl LevelSet for Everywhere {
    fn eval(&self, _: Point) -> f64 {
        -1.0
    }
}

/// Mesh, faces and the parameter-independent union sparsity patterns.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub mesh: BackgroundMesh,
    pub faces: FaceTable,
    /// Global mesh size used in the penalty scalings.
    pub h: f64,
    /// Element pairs plus pairs coupled through any interior face.
    pub stiffness_pattern: Arc<SparsityPattern>,
    /// Element pairs.
    pub mass_pattern: Arc<SparsityPattern>,
}

impl Discretization {
    pub fn new(mesh: BackgroundMesh) -> Self {
        let faces = FaceTable::build(&mesh);
        let n = mesh.dof_count();
        let element_pairs = mesh
            .elements
            .iter()
            .flat_map(|el| el.iter().flat_map(move |&i| el.iter().map(move |&j| (i, j))));
        let mass_pattern = Arc::new(SparsityPattern::from_pairs(n, element_pairs.clone()));
        let facet_pairs: Vec<(usize, usize)> = faces
            .faces
            .iter()
            .filter(|f| f.is_interior())
            .flat_map(|f| {
                let p = facet_patch(&mesh, f);
                p.into_iter().flat_map(move |i| p.into_iter().map(move |j| (i, j)))
            })
            .collect();
        let stiffness_pattern = Arc::new(SparsityPattern::from_pairs(
            n,
            element_pairs.chain(facet_pairs),
        ));
        let h = mesh.h();
        Self {
            mesh,
            faces,
            h,
            stiffness_pattern,
            mass_pattern,
        }
    }

    pub fn n(&self) -> usize {
        self.mesh.dof_count()
    }

    pub fn geometry(&self, mu: f64) -> CutGeometry {
        CutGeometry::classify(&self.mesh, &self.faces, &LevelSetSquare::new(mu))
    }

    pub fn geometry_with<L: LevelSet + ?Sized>(&self, ls: &L) -> CutGeometry {
        CutGeometry::classify(&self.mesh, &self.faces, ls)
    }

    /// Mass matrix of the whole background box; the fixed inner product of
    /// the reduced bases.
    pub fn background_mass(&self) -> CsrMatrix {
        let geom = self.geometry_with(&Everywhere);
        assemble_mass(self, &geom).expect("the background box is never empty")
    }

    /// Cut data for a single element, identical to what `geometry` computes
    /// for that element.
    pub fn element_cut<L: LevelSet + ?Sized>(&self, e: usize, ls: &L) -> ElementCut {
        let tol = snap_tolerance(&self.mesh);
        let el = self.mesh.elements[e];
        let phi = el.map(|v| snapped_eval(ls, self.mesh.vertices[v], tol));
        cut_element(&self.mesh.element_vertices(e), &phi)
    }

    /// Classification of element `e` alone, without quadrature.
    pub fn element_tag<L: LevelSet + ?Sized>(&self, e: usize, ls: &L) -> ElementTag {
        let tol = snap_tolerance(&self.mesh);
        let el = self.mesh.elements[e];
        classify_values(&el.map(|v| snapped_eval(ls, self.mesh.vertices[v], tol)))
    }
}

/// Diffusion over the clipped region plus the symmetric Nitsche terms on the
/// boundary segment.
pub fn local_stiffness(
    tri: &[Point; 3],
    interior: &[QuadPoint],
    boundary: &[BoundaryQuadPoint],
    gamma_d: f64,
    h: f64,
) -> LocalMatrix {
    let (g, _) = p1_gradients(tri);
    let area: f64 = interior.iter().map(|q| q.weight).sum();
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
        }
    }
    let pen = gamma_d / h;
    for q in boundary {
        let phi = barycentric(tri, q.point);
        let dn = g.map(|gi| gi[0] * q.normal[0] + gi[1] * q.normal[1]);
        for i in 0..3 {
            for j in 0..3 {
                k[i][j] += q.weight * (-dn[j] * phi[i] - phi[j] * dn[i] + pen * phi[i] * phi[j]);
            }
        }
    }
    k
}

pub fn local_mass(tri: &[Point; 3], interior: &[QuadPoint]) -> LocalMatrix {
    let mut m = [[0.0; 3]; 3];
    for q in interior {
        let phi = barycentric(tri, q.point);
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += q.weight * phi[i] * phi[j];
            }
        }
    }
    m
}

/// `(field, phi_i)` over the clipped region.
pub fn local_load(tri: &[Point; 3], interior: &[QuadPoint], field: ScalarField) -> LocalVector {
    let mut v = [0.0; 3];
    for q in interior {
        let phi = barycentric(tri, q.point);
        let fq = field(q.point[0], q.point[1]);
        for i in 0..3 {
            v[i] += q.weight * fq * phi[i];
        }
    }
    v
}

/// Nitsche data terms `(g, gamma_d / h phi_i + n . grad phi_i)` on the segment.
pub fn local_dirichlet(
    tri: &[Point; 3],
    boundary: &[BoundaryQuadPoint],
    g_d: ScalarField,
    gamma_d: f64,
    h: f64,
) -> LocalVector {
    let (g, _) = p1_gradients(tri);
    let mut v = [0.0; 3];
    for q in boundary {
        let phi = barycentric(tri, q.point);
        let gq = g_d(q.point[0], q.point[1]);
        for i in 0..3 {
            let dn = g[i][0] * q.normal[0] + g[i][1] * q.normal[1];
            v[i] += q.weight * gq * (gamma_d / h * phi[i] + dn);
        }
    }
    v
}

/// Ghost penalty `gamma_1 h |F| [n_F . grad phi_i][n_F . grad phi_j]` on one
/// interior face, in the numbering of `facet_patch`.
pub fn local_ghost(mesh: &BackgroundMesh, face: &Face, gamma_1: f64, h: f64) -> ([usize; 4], FacetMatrix) {
    let patch = facet_patch(mesh, face);
    let right = face.right.expect("ghost facet must be interior");
    let a = mesh.vertices[face.vertices[0]];
    let b = mesh.vertices[face.vertices[1]];
    let len = dist(a, b);
    let n = [(b[1] - a[1]) / len, (a[0] - b[0]) / len];
    let mut jump = [0.0; 4];
    for (e, sign) in [(face.left, 1.0), (right, -1.0)] {
        let (g, _) = p1_gradients(&mesh.element_vertices(e));
        for (k, &v) in mesh.elements[e].iter().enumerate() {
            let slot = patch.iter().position(|&p| p == v).expect("vertex in patch");
            jump[slot] += sign * (g[k][0] * n[0] + g[k][1] * n[1]);
        }
    }
    let scale = gamma_1 * h * len;
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = scale * jump[i] * jump[j];
        }
    }
    (patch, m)
}

/// Operators of the cut problem at one parameter value.
#[derive(Debug, Clone)]
pub struct ParametricOperators {
    pub a: CsrMatrix,
    pub m: CsrMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub mu: f64,
    pub active_dofs: Vec<bool>,
}

impl ParametricOperators {
    pub fn n(&self) -> usize {
        self.b.len()
    }
}

fn require_active(geom: &CutGeometry) -> Result<()> {
    if geom.active_elements.is_empty() {
        Err(Error::EmptyActiveSet)
    } else {
        Ok(())
    }
}

fn scatter_matrix(out: &mut CsrMatrix, el: &[usize; 3], k: &LocalMatrix) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            out.add(el[i], el[j], k[i][j])?;
        }
    }
    Ok(())
}

pub fn assemble_stiffness(d: &Discretization, geom: &CutGeometry, case: &ProblemCase) -> Result<CsrMatrix> {
    require_active(geom)?;
    let local = crate::par_map(&geom.active_elements, |&e| {
        local_stiffness(
            &d.mesh.element_vertices(e),
            &geom.interior_quadrature[e],
            &geom.boundary_quadrature[e],
            case.gamma_d,
            d.h,
        )
    });
    let mut a = CsrMatrix::zeros(d.stiffness_pattern.clone());
    for (&e, k) in geom.active_elements.iter().zip(&local) {
        scatter_matrix(&mut a, &d.mesh.elements[e], k)?;
    }
    for &f in &geom.ghost_facets {
        let (patch, g) = local_ghost(&d.mesh, &d.faces.faces[f], case.gamma_1, d.h);
        for i in 0..4 {
            for j in 0..4 {
                a.add(patch[i], patch[j], g[i][j])?;
            }
        }
    }
    Ok(a)
}

pub fn assemble_mass(d: &Discretization, geom: &CutGeometry) -> Result<CsrMatrix> {
    require_active(geom)?;
    let local = crate::par_map(&geom.active_elements, |&e| {
        local_mass(&d.mesh.element_vertices(e), &geom.interior_quadrature[e])
    });
    let mut m = CsrMatrix::zeros(d.mass_pattern.clone());
    for (&e, k) in geom.active_elements.iter().zip(&local) {
        scatter_matrix(&mut m, &d.mesh.elements[e], k)?;
    }
    Ok(m)
}

fn assemble_vector(
    d: &Discretization,
    geom: &CutGeometry,
    kernel: impl Fn(usize) -> LocalVector + Sync + Send,
) -> Result<Vec<f64>> {
    require_active(geom)?;
    let local = crate::par_map(&geom.active_elements, |&e| kernel(e));
    let mut v = vec![0.0; d.n()];
    for (&e, l) in geom.active_elements.iter().zip(&local) {
        for (k, &i) in d.mesh.elements[e].iter().enumerate() {
            v[i] += l[k];
        }
    }
    Ok(v)
}

pub fn assemble_rhs_target(d: &Discretization, geom: &CutGeometry, case: &ProblemCase) -> Result<Vec<f64>> {
    assemble_vector(d, geom, |e| {
        local_load(&d.mesh.element_vertices(e), &geom.interior_quadrature[e], case.target)
    })
}

pub fn assemble_rhs_forcing(d: &Discretization, geom: &CutGeometry, case: &ProblemCase) -> Result<Vec<f64>> {
    assemble_vector(d, geom, |e| {
        let tri = d.mesh.element_vertices(e);
        let mut v = local_load(&tri, &geom.interior_quadrature[e], case.forcing);
        let g = local_dirichlet(&tri, &geom.boundary_quadrature[e], case.dirichlet, case.gamma_d, d.h);
        for k in 0..3 {
            v[k] += g[k];
        }
        v
    })
}

pub fn assemble_operators_with(
    d: &Discretization,
    geom: &CutGeometry,
    case: &ProblemCase,
    mu: f64,
) -> Result<ParametricOperators> {
    let wrap = |e: Error| e.at_stage("assembly", Some(mu));
    Ok(ParametricOperators {
        a: assemble_stiffness(d, geom, case).map_err(wrap)?,
        m: assemble_mass(d, geom).map_err(wrap)?,
        b: assemble_rhs_target(d, geom, case).map_err(wrap)?,
        c: assemble_rhs_forcing(d, geom, case).map_err(wrap)?,
        mu,
        active_dofs: geom.active_dofs.clone(),
    })
}

/// All four operators for the square of half side `mu`.
pub fn assemble_operators(d: &Discretization, case: &ProblemCase, mu: f64) -> Result<ParametricOperators> {
    let geom = d.geometry(mu);
    assemble_operators_with(d, &geom, case, mu)
}
