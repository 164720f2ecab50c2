//! Structured background triangulation and its face adjacency.
//!
//! The background mesh is fixed for every parameter value: all snapshots and
//! operators share its vertex numbering, so P1 degrees of freedom are simply
//! vertex indices.

use crate::error::{Error, Result};

/// A point in the plane.
pub type Point = [f64; 2];

/// How each grid cell is split into two triangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Diagonal {
    /// Every cell split along its main (lower-left to upper-right) diagonal.
    #[default]
    Main,
    /// Diagonals point away from the box center, giving a mesh symmetric
    /// under reflections through the center lines.
    UnionJack,
}

impl std::str::FromStr for Diagonal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Diagonal::Main),
            "union_jack" => Ok(Diagonal::UnionJack),
            _ => Err(Error::InvalidInput(format!("unknown diagonal pattern `{s}`"))),
        }
    }
}

impl std::fmt::Display for Diagonal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Diagonal::Main => "main",
            Diagonal::UnionJack => "union_jack",
        })
    }
}

/// Fixed triangulation of the embedding box.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundMesh {
    pub box_min: Point,
    pub box_max: Point,
    pub h_target: f64,
    pub diagonal: Diagonal,
    pub nx: usize,
    pub ny: usize,
    pub vertices: Vec<Point>,
    pub elements: Vec<[usize; 3]>,
}

impl BackgroundMesh {
    /// Builds an `nx × ny` grid with `n = ⌈L/h⌉` cells per direction, each cell
    /// split along its main diagonal into two counter-clockwise triangles.
    pub fn build(box_min: Point, box_max: Point, h_target: f64) -> Result<Self> {
        Self::build_with(box_min, box_max, h_target, Diagonal::Main)
    }

    pub fn build_with(
        box_min: Point,
        box_max: Point,
        h_target: f64,
        diagonal: Diagonal,
    ) -> Result<Self> {
        if !(h_target > 0.0) || !h_target.is_finite() {
            return Err(Error::InvalidInput(format!(
                "mesh size must be positive, got {h_target}"
            )));
        }
        let lx = box_max[0] - box_min[0];
        let ly = box_max[1] - box_min[1];
        if !(lx > 0.0 && ly > 0.0) || !lx.is_finite() || !ly.is_finite() {
            return Err(Error::InvalidInput(format!(
                "degenerate box {box_min:?}..{box_max:?}"
            )));
        }
        let cells = |len: f64| ((len / h_target) - 1e-9).ceil().max(1.0) as usize;
        let nx = cells(lx);
        let ny = cells(ly);
        let dx = lx / nx as f64;
        let dy = ly / ny as f64;

        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            let y = if j == ny { box_max[1] } else { box_min[1] + j as f64 * dy };
            for i in 0..=nx {
                let x = if i == nx { box_max[0] } else { box_min[0] + i as f64 * dx };
                vertices.push([x, y]);
            }
        }
        let vid = |i: usize, j: usize| j * (nx + 1) + i;
        // Integer offsets of the cell center from the box center, in half cells.
        let off = |i: usize, n: usize| 2 * i as i64 + 1 - n as i64;
        let mut elements = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let v00 = vid(i, j);
                let v10 = vid(i + 1, j);
                let v01 = vid(i, j + 1);
                let v11 = vid(i + 1, j + 1);
                let main = match diagonal {
                    Diagonal::Main => true,
                    Diagonal::UnionJack => off(i, nx) * off(j, ny) >= 0,
                };
                if main {
                    elements.push([v00, v10, v11]);
                    elements.push([v00, v11, v01]);
                } else {
                    elements.push([v00, v10, v01]);
                    elements.push([v10, v11, v01]);
                }
            }
        }
        Ok(Self {
            box_min,
            box_max,
            h_target,
            diagonal,
            nx,
            ny,
            vertices,
            elements,
        })
    }

    /// Number of P1 degrees of freedom.
    pub fn dof_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn element_vertices(&self, e: usize) -> [Point; 3] {
        let [a, b, c] = self.elements[e];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Signed area (positive for counter-clockwise ordering).
    pub fn signed_area(&self, e: usize) -> f64 {
        triangle_signed_area(&self.element_vertices(e))
    }

    /// Global mesh size `max_T diam(T)`.
    pub fn h(&self) -> f64 {
        (0..self.element_count())
            .map(|e| {
                let [a, b, c] = self.element_vertices(e);
                dist(a, b).max(dist(b, c)).max(dist(c, a))
            })
            .fold(0.0, f64::max)
    }

    /// SHA-256 of the vertex coordinates and connectivity, hex encoded.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for v in &self.vertices {
            hasher.update(v[0].to_le_bytes());
            hasher.update(v[1].to_le_bytes());
        }
        for el in &self.elements {
            for &k in el {
                hasher.update((k as u64).to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Elements incident to each vertex.
    pub fn vertex_to_elements(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.dof_count()];
        for (e, el) in self.elements.iter().enumerate() {
            for &v in el {
                out[v].push(e);
            }
        }
        out
    }
}

pub fn triangle_signed_area(t: &[Point; 3]) -> f64 {
    let [a, b, c] = t;
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// One undirected mesh edge with its incident elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    /// Sorted vertex pair.
    pub vertices: [usize; 2],
    pub left: usize,
    pub right: Option<usize>,
}

impl Face {
    pub fn is_interior(&self) -> bool {
        self.right.is_some()
    }

    /// The element across this face from `e`, if any.
    pub fn neighbor_of(&self, e: usize) -> Option<usize> {
        if self.left == e {
            self.right
        } else if self.right == Some(e) {
            Some(self.left)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceTable {
    pub faces: Vec<Face>,
    /// Local face `k` of element `e` is opposite local vertex `k`.
    pub element_to_faces: Vec<[usize; 3]>,
}

impl FaceTable {
    pub fn build(mesh: &BackgroundMesh) -> Self {
        use std::collections::HashMap;
        let mut index: HashMap<[usize; 2], usize> = HashMap::new();
        let mut faces: Vec<Face> = Vec::new();
        let mut element_to_faces = Vec::with_capacity(mesh.element_count());
        for (e, el) in mesh.elements.iter().enumerate() {
            let mut local = [0usize; 3];
            for k in 0..3 {
                let a = el[(k + 1) % 3];
                let b = el[(k + 2) % 3];
                let key = if a < b { [a, b] } else { [b, a] };
                let f = *index.entry(key).or_insert_with(|| {
                    faces.push(Face {
                        vertices: key,
                        left: e,
                        right: None,
                    });
                    faces.len() - 1
                });
                if faces[f].left != e {
                    debug_assert!(faces[f].right.is_none(), "non-manifold edge");
                    faces[f].right = Some(e);
                }
                local[k] = f;
            }
            element_to_faces.push(local);
        }
        Self {
            faces,
            element_to_faces,
        }
    }

    pub fn interior_count(&self) -> usize {
        self.faces.iter().filter(|f| f.is_interior()).count()
    }
}
