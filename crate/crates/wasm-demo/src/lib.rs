//! Browser bindings. `Session` holds the logic and is testable natively;
//! `Demo` is the thin `wasm_bindgen` wrapper the page talks to.

use cutrom::assembly::assemble_operators;
use cutrom::config::RunConfig;
use cutrom::deim::Component;
use cutrom::geometry::ElementTag;
use cutrom::kkt::solve_full;
use cutrom::pipeline::{compute_offline, Offline};
use cutrom::rom::relative_error;
use wasm_bindgen::prelude::*;

pub struct Session {
    cfg: RunConfig,
    off: Offline,
}

/// Nodal state, control and adjoint.
pub struct Fields {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

impl Fields {
    pub fn get(&self, which: &str) -> cutrom::Result<&[f64]> {
        match which {
            "y" => Ok(&self.y),
            "u" => Ok(&self.u),
            "p" => Ok(&self.p),
            _ => Err(cutrom::Error::InvalidInput(format!("unknown field `{which}` (y, u, p)"))),
        }
    }
}

impl Session {
    /// Offline stage at browser-friendly size.
    pub fn new(h: f64, m_train: usize) -> cutrom::Result<Self> {
        let cfg = RunConfig {
            h,
            m_train,
            m_test: 1,
            ..RunConfig::default()
        };
        let (off, _, _) = compute_offline(&cfg)?;
        Ok(Self { cfg, off })
    }

    pub fn dofs(&self) -> usize {
        self.off.disc.n()
    }

    pub fn reduced_dim(&self) -> usize {
        self.off.rom.reduced_dim()
    }

    /// Interleaved `x, y` coordinates.
    pub fn vertices(&self) -> Vec<f64> {
        self.off.disc.mesh.vertices.iter().flat_map(|v| [v[0], v[1]]).collect()
    }

    pub fn triangles(&self) -> Vec<u32> {
        self.off
            .disc
            .mesh
            .elements
            .iter()
            .flat_map(|e| e.map(|v| v as u32))
            .collect()
    }

    /// Per element: 0 inside, 1 cut, 2 outside.
    pub fn classification(&self, mu: f64) -> Vec<u8> {
        self.off
            .disc
            .geometry(mu)
            .classification
            .iter()
            .map(|t| match t {
                ElementTag::Inside => 0,
                ElementTag::Cut => 1,
                ElementTag::Outside => 2,
            })
            .collect()
    }

    pub fn full(&self, mu: f64) -> cutrom::Result<Fields> {
        let case = self.cfg.problem_case();
        let ops = assemble_operators(&self.off.disc, &case, mu)?;
        let s = solve_full(&ops, case.alpha)?;
        Ok(Fields { y: s.y, u: s.u, p: s.p })
    }

    pub fn reduced(&self, mu: f64) -> cutrom::Result<Fields> {
        let s = self.off.rom.solve(&self.off.disc, &self.cfg.problem_case(), mu, true)?;
        let (y, u, p) = s.lifted.expect("lifted");
        Ok(Fields { y, u, p })
    }

    /// Relative `M_mu`-norm errors of the reduced solution, `[y, u, p]`.
    pub fn errors(&self, mu: f64) -> cutrom::Result<[f64; 3]> {
        let case = self.cfg.problem_case();
        let ops = assemble_operators(&self.off.disc, &case, mu)?;
        let full = solve_full(&ops, case.alpha)?;
        let rom = self.reduced(mu)?;
        let e = relative_error(&ops.m, [&full.y, &full.u, &full.p], [&rom.y, &rom.u, &rom.p]);
        Ok([e.y, e.u, e.p])
    }

    /// Elements of the DEIM reduced mesh of `component` (A, M, b or c).
    pub fn reduced_mesh(&self, component: &str) -> cutrom::Result<Vec<u32>> {
        let c: Component = component.parse()?;
        Ok(self.off.rom.deim.get(c).reduced_mesh.elements.iter().map(|&e| e as u32).collect())
    }
}

fn js(e: cutrom::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(h: f64, m_train: usize) -> Result<Demo, JsError> {
        Session::new(h, m_train).map(Demo).map_err(js)
    }

    pub fn dofs(&self) -> usize {
        self.0.dofs()
    }

    #[wasm_bindgen(js_name = reducedDim)]
    pub fn reduced_dim(&self) -> usize {
        self.0.reduced_dim()
    }

    pub fn vertices(&self) -> Vec<f64> {
        self.0.vertices()
    }

    pub fn triangles(&self) -> Vec<u32> {
        self.0.triangles()
    }

    pub fn classification(&self, mu: f64) -> Vec<u8> {
        self.0.classification(mu)
    }

    /// Nodal values of `which` (y, u or p) from the full or the reduced solve.
    pub fn field(&self, mu: f64, which: &str, reduced: bool) -> Result<Vec<f64>, JsError> {
        let f = if reduced { self.0.reduced(mu) } else { self.0.full(mu) }.map_err(js)?;
        f.get(which).map(<[f64]>::to_vec).map_err(js)
    }

    pub fn errors(&self, mu: f64) -> Result<Vec<f64>, JsError> {
        self.0.errors(mu).map(|e| e.to_vec()).map_err(js)
    }

    #[wasm_bindgen(js_name = reducedMesh)]
    pub fn reduced_mesh(&self, component: &str) -> Result<Vec<u32>, JsError> {
        self.0.reduced_mesh(component).map_err(js)
    }
}
