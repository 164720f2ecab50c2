//! Offline and online stages, the artifact bundle, CSV reports and the
//! invariant suite behind `verify`.
//!
//! Output directory layout:
//! ```text
//! out/.lock                  held while a stage runs
//! out/bundle/                manifest.txt, config.txt and ROMB containers
//! out/offline_summary.csv    dimensions and term counts (deterministic)
//! out/pod_eigenvalues.csv    variable, index, eigenvalue, cumulative energy
//! out/deim_summary.csv       per component: m, support, reduced mesh sizes
//! out/offline_timings.csv    stage wall times
//! out/errors.csv             per test mu: ROM and DEIM errors
//! out/modes_sweep.csv        mean ROM errors versus POD dimension
//! out/deim_sweep.csv         mean DEIM errors and reduced meshes versus m
//! out/timings.csv            online timings and speedups
//! ```
//! All CSVs except the two timing files are bitwise reproducible.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::assembly::{assemble_operators, Discretization, ParametricOperators};
use crate::config::RunConfig;
use crate::deim::{collect_operator_snapshots, relative_l2, Component, DeimModel, DeimSet};
use crate::error::{Error, Result};
use crate::io::{load_indices, load_matrix, load_vector, save_indices, save_matrix, save_vector};
use crate::kkt::{assemble_kkt, optimality_residual, solve_full, solve_kkt, FullSolution};
use crate::mesh::BackgroundMesh;
use crate::pod::{
    aggregate_basis, compute_snapshots, energy_truncation, orthonormality_defect, pod_basis, sample_parameters,
    sample_test_parameters, PodBasis, SnapshotSet,
};
use crate::rom::{dense_block_operator, relative_error, ErrorTriple, ReducedBlocks, RomModel};
use crate::timing::{median_sorted, median_time, single_threaded, timed};

const BUNDLE_FORMAT: &str = "cutrom-bundle 1";
const VARS: [&str; 3] = ["y", "u", "p"];

/// Exclusive ownership of an output directory for the lifetime of a stage.
#[derive(Debug)]
pub struct OutputLock(PathBuf);

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io(std::io::Error::new(
                e.kind(),
                format!("{} is held by another run (remove it if stale)", path.display()),
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn discretization(cfg: &RunConfig) -> Result<Discretization> {
    let mesh = BackgroundMesh::build_with(cfg.box_min, cfg.box_max, cfg.h, cfg.diagonal)?;
    Ok(Discretization::new(mesh))
}

/// Everything the online stage needs.
#[derive(Debug, Clone)]
pub struct Offline {
    pub disc: Discretization,
    pub params: Vec<f64>,
    /// Bases up to numerical rank.
    pub pod: [PodBasis; 3],
    /// Energy-criterion dimensions at `eps_pod`.
    pub retained: [usize; 3],
    /// All DEIM modes passing `eps_deim`.
    pub deim: DeimSet,
    /// Reduced model at the configured truncation.
    pub rom: RomModel,
    pub modes: [usize; 3],
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineTimings {
    pub snapshots: f64,
    pub operator_snapshots: f64,
    pub pod: f64,
    pub deim: f64,
    pub precompute: f64,
}

/// Per-variable POD dimensions: the override clamped to the rank, or the
/// energy-criterion dimension.
pub fn select_modes(cfg: &RunConfig, pod: &[PodBasis; 3], retained: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|k| match cfg.modes {
        Some(m) => {
            if m > pod[k].retained {
                log::warn!(
                    "{} modes requested for {} but the snapshot rank is {}",
                    m,
                    VARS[k],
                    pod[k].retained
                );
            }
            m.min(pod[k].retained)
        }
        None => retained[k],
    })
}

pub fn select_deim_dims(cfg: &RunConfig, deim: &DeimSet) -> [usize; 4] {
    let avail = deim.dims();
    match cfg.deim_dims {
        Some(req) => std::array::from_fn(|k| {
            if req[k] > avail[k] {
                log::warn!(
                    "DEIM {}: {} modes requested, {} available",
                    Component::ALL[k],
                    req[k],
                    avail[k]
                );
            }
            req[k].min(avail[k])
        }),
        None => avail,
    }
}

pub fn build_rom(
    disc: &Discretization,
    pod: &[PodBasis; 3],
    deim: &DeimSet,
    modes: [usize; 3],
    deim_dims: [usize; 4],
    alpha: f64,
) -> Result<RomModel> {
    let w = disc.background_mass();
    let basis = aggregate_basis(
        &pod[0].truncated(modes[0]),
        &pod[1].truncated(modes[1]),
        &pod[2].truncated(modes[2]),
        &w,
    )?;
    RomModel::build(basis, deim.truncated(deim_dims, disc)?, disc, alpha)
}

/// The offline computation without any file output.
pub fn compute_offline(cfg: &RunConfig) -> Result<(Offline, SnapshotSet, OfflineTimings)> {
    cfg.validate()?;
    let case = cfg.problem_case();
    let disc = discretization(cfg)?;
    let [lo, hi] = cfg.mu_range;
    let params = sample_parameters(lo, hi, cfg.m_train, cfg.seed)?;
    let mut t = OfflineTimings::default();

    let (snaps, dt) = timed(|| compute_snapshots(&disc, &case, &params));
    let snaps = snaps?;
    t.snapshots = dt;

    let (pod, dt) = timed(|| -> Result<[PodBasis; 3]> {
        let w = &snaps.inner_product;
        let stage = |e: Error| e.at_stage("pod", None);
        Ok([
            pod_basis(&snaps.s_y, w, 0.0).map_err(stage)?,
            pod_basis(&snaps.s_u, w, 0.0).map_err(stage)?,
            pod_basis(&snaps.s_p, w, 0.0).map_err(stage)?,
        ])
    });
    let pod = pod?;
    t.pod = dt;
    let retained = pod.each_ref().map(|b| energy_truncation(&b.eigenvalues, cfg.eps_pod));

    let (ops, dt) = timed(|| collect_operator_snapshots(&disc, &case, &params));
    let ops = ops?;
    t.operator_snapshots = dt;
    let (deim, dt) = timed(|| DeimSet::build(&disc, &ops, cfg.eps_deim));
    let deim = deim?;
    t.deim = dt;
    drop(ops);

    let modes = select_modes(cfg, &pod, retained);
    let dims = select_deim_dims(cfg, &deim);
    let (rom, dt) = timed(|| build_rom(&disc, &pod, &deim, modes, dims, case.alpha));
    let rom = rom.map_err(|e| e.at_stage("precompute", None))?;
    t.precompute = dt;

    Ok((
        Offline {
            disc,
            params,
            pod,
            retained,
            deim,
            rom,
            modes,
        },
        snaps,
        t,
    ))
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn stack(terms: &[DMatrix<f64>], rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows * terms.len(), cols);
    for (j, t) in terms.iter().enumerate() {
        out.view_mut((j * rows, 0), (rows, cols)).copy_from(t);
    }
    out
}

fn unstack(m: &DMatrix<f64>, count: usize, rows: usize, name: &str) -> Result<Vec<DMatrix<f64>>> {
    if m.nrows() != count * rows {
        return Err(Error::Format {
            path: name.into(),
            msg: format!("expected {} rows, found {}", count * rows, m.nrows()),
        });
    }
    Ok((0..count).map(|j| m.rows(j * rows, rows).into_owned()).collect())
}

pub fn bundle_dir(out: &Path) -> PathBuf {
    out.join("bundle")
}

fn offline_summary_rows(off: &Offline) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut push = |k: String, v: String| rows.push(vec![k, v]);
    push("dofs".into(), off.disc.n().to_string());
    push("elements".into(), off.disc.mesh.element_count().to_string());
    push("m_train".into(), off.params.len().to_string());
    for (v, p) in VARS.iter().zip(&off.pod) {
        push(format!("pod_rank_{v}"), p.retained.to_string());
    }
    for (v, r) in VARS.iter().zip(off.retained) {
        push(format!("retained_{v}"), r.to_string());
    }
    for (v, m) in VARS.iter().zip(off.modes) {
        push(format!("modes_{v}"), m.to_string());
    }
    let (a, b) = off.rom.dims();
    push("n_yp".into(), a.to_string());
    push("n_u".into(), b.to_string());
    push("reduced_dim".into(), off.rom.reduced_dim().to_string());
    for (c, m) in Component::ALL.iter().zip(off.deim.dims()) {
        push(format!("deim_available_{c}"), m.to_string());
    }
    for (c, m) in Component::ALL.iter().zip(off.rom.deim.dims()) {
        push(format!("deim_m_{c}"), m.to_string());
    }
    push("q_a".into(), off.rom.q_a().to_string());
    push("q_beta".into(), off.rom.q_beta().to_string());
    rows
}

/// Writes the bundle and offline CSVs into `out`.
pub fn write_offline(out: &Path, cfg: &RunConfig, off: &Offline, snaps: &SnapshotSet, t: &OfflineTimings) -> Result<()> {
    let dir = bundle_dir(out);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;

    let (a, b) = off.rom.dims();
    let mut manifest = String::new();
    let mut kv = |k: &str, v: String| manifest.push_str(&format!("{k} = {v}\n"));
    kv("format", BUNDLE_FORMAT.into());
    kv("mesh_fingerprint", off.disc.mesh.fingerprint());
    kv("dofs", off.disc.n().to_string());
    kv("m_train", off.params.len().to_string());
    kv("pod_rank", join(&off.pod.each_ref().map(|p| p.retained)));
    kv("pod_retained", join(&off.retained));
    kv("modes", join(&off.modes));
    kv("n_yp", a.to_string());
    kv("n_u", b.to_string());
    kv("components", join(&Component::ALL));
    kv("deim_available", join(&off.deim.dims()));
    kv("deim_dims", join(&off.rom.deim.dims()));
    kv("q_a", off.rom.q_a().to_string());
    kv("q_beta", off.rom.q_beta().to_string());
    fs::write(dir.join("manifest.txt"), manifest)?;

    save_vector(&dir.join("params.romb"), &off.params)?;
    for (k, s) in [&snaps.s_y, &snaps.s_u, &snaps.s_p].into_iter().enumerate() {
        save_matrix(&dir.join(format!("snapshots_{}.romb", VARS[k])), s)?;
        save_matrix(&dir.join(format!("pod_{}.romb", VARS[k])), &off.pod[k].vectors)?;
        save_vector(&dir.join(format!("pod_eigs_{}.romb", VARS[k])), &off.pod[k].eigenvalues)?;
    }
    for c in Component::ALL {
        let m = off.deim.get(c);
        save_matrix(&dir.join(format!("deim_{c}_basis.romb")), &m.basis)?;
        save_indices(&dir.join(format!("deim_{c}_support.romb")), &m.support)?;
        save_indices(&dir.join(format!("deim_{c}_indices.romb")), &m.indices)?;
        save_vector(&dir.join(format!("deim_{c}_eigs.romb")), &m.eigenvalues)?;
        save_indices(&dir.join(format!("deim_{c}_elements.romb")), &m.reduced_mesh.elements)?;
        save_indices(&dir.join(format!("deim_{c}_facets.romb")), &m.reduced_mesh.facets)?;
    }
    let rom = &off.rom;
    save_matrix(&dir.join("rom_v_yp.romb"), &rom.basis.v_yp)?;
    save_matrix(&dir.join("rom_v_u.romb"), &rom.basis.v_u)?;
    save_matrix(&dir.join("rom_a_terms.romb"), &stack(&rom.a_terms, a, a))?;
    save_matrix(&dir.join("rom_m_yy.romb"), &stack(&rom.m_yy, a, a))?;
    save_matrix(&dir.join("rom_m_uu.romb"), &stack(&rom.m_uu, b, b))?;
    save_matrix(&dir.join("rom_m_yu.romb"), &stack(&rom.m_yu, a, b))?;
    let vec_stack = |v: &[nalgebra::DVector<f64>]| DMatrix::from_fn(v.len(), a, |j, i| v[j][i]);
    save_matrix(&dir.join("rom_b_terms.romb"), &vec_stack(&rom.b_terms))?;
    save_matrix(&dir.join("rom_c_terms.romb"), &vec_stack(&rom.c_terms))?;

    write_csv(&out.join("offline_summary.csv"), &["quantity", "value"], &offline_summary_rows(off))?;

    let mut rows = Vec::new();
    for (k, p) in off.pod.iter().enumerate() {
        let total: f64 = p.eigenvalues.iter().sum();
        let mut acc = 0.0;
        for (i, &l) in p.eigenvalues.iter().enumerate() {
            acc += l;
            let frac = if total > 0.0 { acc / total } else { 0.0 };
            rows.push(vec![VARS[k].into(), (i + 1).to_string(), fmt(l), fmt(frac)]);
        }
    }
    write_csv(
        &out.join("pod_eigenvalues.csv"),
        &["variable", "index", "eigenvalue", "cumulative_energy"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = Component::ALL
        .iter()
        .map(|&c| {
            let m = off.rom.deim.get(c);
            vec![
                c.to_string(),
                m.m().to_string(),
                off.deim.get(c).m().to_string(),
                m.support.len().to_string(),
                m.reduced_mesh.elements.len().to_string(),
                m.reduced_mesh.facets.len().to_string(),
                m.reduced_mesh.classified.len().to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("deim_summary.csv"),
        &["component", "m", "available", "support", "elements", "facets", "classified"],
        &rows,
    )?;

    let rows = [
        ("snapshots", t.snapshots),
        ("operator_snapshots", t.operator_snapshots),
        ("pod", t.pod),
        ("deim", t.deim),
        ("precompute", t.precompute),
    ]
    .map(|(k, v)| vec![k.to_string(), fmt(v)]);
    write_csv(&out.join("offline_timings.csv"), &["stage", "seconds"], &rows)?;
    Ok(())
}

pub fn run_offline(cfg: &RunConfig) -> Result<Offline> {
    let _lock = OutputLock::acquire(&cfg.output)?;
    let (off, snaps, t) = compute_offline(cfg)?;
    write_offline(&cfg.output, cfg, &off, &snaps, &t).map_err(|e| e.at_stage("write bundle", None))?;
    Ok(off)
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn manifest_list<const K: usize>(m: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<[usize; K]> {
    let bad = || Error::Format {
        path: path.display().to_string(),
        msg: format!("missing or malformed `{key}`"),
    };
    let v: Vec<usize> = m
        .get(key)
        .ok_or_else(bad)?
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| bad())
}

/// Loads the bundle written by `run_offline`. The mesh is rebuilt from the
/// config and must match the stored fingerprint; the ROM terms are reused
/// when the configured truncation matches, and re-projected otherwise.
pub fn load_offline(cfg: &RunConfig) -> Result<Offline> {
    let dir = bundle_dir(&cfg.output);
    let mpath = dir.join("manifest.txt");
    let manifest = read_manifest(&mpath)?;
    let bad = |msg: String| Error::Format {
        path: mpath.display().to_string(),
        msg,
    };
    if manifest.get("format").map(String::as_str) != Some(BUNDLE_FORMAT) {
        return Err(bad("not a cutrom bundle".into()));
    }
    let disc = discretization(cfg)?;
    if manifest.get("mesh_fingerprint") != Some(&disc.mesh.fingerprint()) {
        return Err(bad("bundle was built on a different mesh than the config describes".into()));
    }
    let params = load_vector(&dir.join("params.romb"))?;
    let mut pod = Vec::new();
    for v in VARS {
        let vectors = load_matrix(&dir.join(format!("pod_{v}.romb")))?;
        let eigenvalues = load_vector(&dir.join(format!("pod_eigs_{v}.romb")))?;
        if vectors.nrows() != disc.n() {
            return Err(bad(format!("POD basis for {v} has {} rows", vectors.nrows())));
        }
        pod.push(PodBasis {
            retained: vectors.ncols(),
            vectors,
            eigenvalues,
            tolerance: 0.0,
        });
    }
    let pod: [PodBasis; 3] = pod.try_into().expect("three variables");
    let retained = pod.each_ref().map(|b| energy_truncation(&b.eigenvalues, cfg.eps_pod));

    let load_deim = |c: Component| -> Result<DeimModel> {
        let basis = load_matrix(&dir.join(format!("deim_{c}_basis.romb")))?;
        let support = load_indices(&dir.join(format!("deim_{c}_support.romb")))?;
        let eigs = load_vector(&dir.join(format!("deim_{c}_eigs.romb")))?;
        let indices = load_indices(&dir.join(format!("deim_{c}_indices.romb")))?;
        let model = DeimModel::from_basis(c, &disc, support, basis, eigs)?;
        if model.indices != indices {
            return Err(bad(format!("DEIM {c}: stored indices disagree with the stored basis")));
        }
        Ok(model)
    };
    let deim = DeimSet {
        a: load_deim(Component::A)?,
        m: load_deim(Component::M)?,
        b: load_deim(Component::B)?,
        c: load_deim(Component::C)?,
    };

    let modes = select_modes(cfg, &pod, retained);
    let dims = select_deim_dims(cfg, &deim);
    let stored_modes: [usize; 3] = manifest_list(&manifest, "modes", &mpath)?;
    let stored_dims: [usize; 4] = manifest_list(&manifest, "deim_dims", &mpath)?;
    let rom = if modes == stored_modes && dims == stored_dims {
        load_rom(&dir, &disc, deim.truncated(dims, &disc)?, cfg.alpha)?
    } else {
        build_rom(&disc, &pod, &deim, modes, dims, cfg.alpha)?
    };
    Ok(Offline {
        disc,
        params,
        pod,
        retained,
        deim,
        rom,
        modes,
    })
}

fn load_rom(dir: &Path, disc: &Discretization, deim: DeimSet, alpha: f64) -> Result<RomModel> {
    let v_yp = load_matrix(&dir.join("rom_v_yp.romb"))?;
    let v_u = load_matrix(&dir.join("rom_v_u.romb"))?;
    if v_yp.nrows() != disc.n() || v_u.nrows() != disc.n() {
        return Err(Error::Format {
            path: dir.display().to_string(),
            msg: "reduced basis length differs from the mesh".into(),
        });
    }
    let (a, b) = (v_yp.ncols(), v_u.ncols());
    let [ma, mm, mb, mc] = deim.dims();
    let get = |name: &str, count: usize, rows: usize| -> Result<Vec<DMatrix<f64>>> {
        let path = dir.join(name);
        unstack(&load_matrix(&path)?, count, rows, &path.display().to_string())
    };
    let vecs = |name: &str, count: usize| -> Result<Vec<nalgebra::DVector<f64>>> {
        let m = load_matrix(&dir.join(name))?;
        if m.nrows() != count || m.ncols() != a {
            return Err(Error::Format {
                path: name.into(),
                msg: format!("expected {count} x {a}"),
            });
        }
        Ok((0..count).map(|j| m.row(j).transpose()).collect())
    };
    Ok(RomModel {
        a_terms: get("rom_a_terms.romb", ma, a)?,
        m_yy: get("rom_m_yy.romb", mm, a)?,
        m_uu: get("rom_m_uu.romb", mm, b)?,
        m_yu: get("rom_m_yu.romb", mm, a)?,
        b_terms: vecs("rom_b_terms.romb", mb)?,
        c_terms: vecs("rom_c_terms.romb", mc)?,
        basis: crate::pod::AggregatedBasis { v_yp, v_u },
        deim,
        alpha,
    })
}

#[derive(Debug, Clone)]
pub struct ErrorRow {
    pub mu: f64,
    pub errors: ErrorTriple,
    /// Relative vectorized 2-norm DEIM errors `[A, M, b, c]`.
    pub deim: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k: usize,
    pub modes: [usize; 3],
    pub reduced_dim: usize,
    pub mean: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct DeimSweepRow {
    pub component: Component,
    pub m_requested: usize,
    pub m: usize,
    pub elements: usize,
    pub facets: usize,
    pub classified: usize,
    pub mean_error: f64,
}

/// Medians over test parameters of per-parameter medians.
#[derive(Debug, Clone, Copy, Default)]
pub struct OnlineTimings {
    pub full_assembly: f64,
    pub full_solve: f64,
    pub rom_coefficients: f64,
    pub rom_multiply: f64,
    pub rom_solve: f64,
    pub rom_lift: f64,
    pub full_assembly_a: f64,
    pub deim_online_a: f64,
}

impl OnlineTimings {
    /// Coefficients, multiply and solve; the lift is excluded.
    pub fn rom_online(&self) -> f64 {
        self.rom_coefficients + self.rom_multiply + self.rom_solve
    }

    pub fn speedup_total(&self) -> f64 {
        (self.full_assembly + self.full_solve) / self.rom_online()
    }

    pub fn speedup_solver(&self) -> f64 {
        self.full_solve / self.rom_solve
    }

    pub fn speedup_online(&self) -> f64 {
        self.full_solve / self.rom_online()
    }

    pub fn deim_speedup_a(&self) -> f64 {
        self.full_assembly_a / self.deim_online_a
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("full_assembly", self.full_assembly),
            ("full_solve", self.full_solve),
            ("rom_coefficients", self.rom_coefficients),
            ("rom_multiply", self.rom_multiply),
            ("rom_solve", self.rom_solve),
            ("rom_lift", self.rom_lift),
            ("rom_online", self.rom_online()),
            ("full_assembly_a", self.full_assembly_a),
            ("deim_online_a", self.deim_online_a),
            ("speedup_including_assembly", self.speedup_total()),
            ("speedup_excluding_assembly", self.speedup_solver()),
            ("speedup_full_solve_vs_rom_online", self.speedup_online()),
            ("speedup_deim_a", self.deim_speedup_a()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct OnlineReport {
    pub test_params: Vec<f64>,
    pub rows: Vec<ErrorRow>,
    pub sweep: Vec<SweepRow>,
    pub deim_sweep: Vec<DeimSweepRow>,
    pub timings: OnlineTimings,
}

impl OnlineReport {
    pub fn mean_errors(&self) -> [f64; 3] {
        let n = self.rows.len().max(1) as f64;
        let mut m = [0.0; 3];
        for r in &self.rows {
            m[0] += r.errors.y / n;
            m[1] += r.errors.u / n;
            m[2] += r.errors.p / n;
        }
        m
    }
}

fn mean_rom_errors(rom: &RomModel, off: &Offline, cfg: &RunConfig, truth: &[(ParametricOperators, FullSolution)]) -> Result<[f64; 3]> {
    let case = cfg.problem_case();
    let mut m = [0.0; 3];
    let n = truth.len() as f64;
    for (ops, full) in truth {
        let sol = rom.solve(&off.disc, &case, ops.mu, true)?;
        let (y, u, p) = sol.lifted.as_ref().expect("lifted");
        let e = relative_error(&ops.m, [&full.y, &full.u, &full.p], [y, u, p]);
        m[0] += e.y / n;
        m[1] += e.u / n;
        m[2] += e.p / n;
    }
    Ok(m)
}

/// Full and reduced solves over the test set, sweeps and timings.
pub fn evaluate_online(off: &Offline, cfg: &RunConfig) -> Result<OnlineReport> {
    let case = cfg.problem_case();
    let d = &off.disc;
    let [lo, hi] = cfg.mu_range;
    let test = sample_test_parameters(lo, hi, cfg.m_test, cfg.seed)?;

    let truth: Vec<(ParametricOperators, FullSolution)> = crate::par_map(&test, |&mu| -> Result<_> {
        let ops = assemble_operators(d, &case, mu)?;
        let full = solve_full(&ops, case.alpha)?;
        Ok((ops, full))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(test.len());
    for (ops, full) in &truth {
        let mu = ops.mu;
        let sol = off.rom.solve(d, &case, mu, true)?;
        let (y, u, p) = sol.lifted.as_ref().expect("lifted");
        let errors = relative_error(&ops.m, [&full.y, &full.u, &full.p], [y, u, p]);
        let deim = Component::ALL.map(|c| relative_l2(&off.rom.deim.get(c).online(d, &case, mu), c.values(ops)));
        rows.push(ErrorRow { mu, errors, deim });
    }

    let dims = off.rom.deim.dims();
    let mut sweep = Vec::new();
    for &k in &cfg.sweep_modes {
        let modes: [usize; 3] = std::array::from_fn(|v| k.min(off.pod[v].retained));
        let rom = build_rom(d, &off.pod, &off.deim, modes, dims, case.alpha)?;
        let mean = mean_rom_errors(&rom, off, cfg, &truth)?;
        sweep.push(SweepRow {
            k,
            modes,
            reduced_dim: rom.reduced_dim(),
            mean,
        });
    }

    let mut deim_sweep = Vec::new();
    for c in Component::ALL {
        for &m in &cfg.deim_sweep {
            let model = off.deim.get(c).truncated(m, d)?;
            let err: f64 = truth
                .iter()
                .map(|(ops, _)| relative_l2(&model.online(d, &case, ops.mu), c.values(ops)))
                .sum::<f64>()
                / truth.len() as f64;
            deim_sweep.push(DeimSweepRow {
                component: c,
                m_requested: m,
                m: model.m(),
                elements: model.reduced_mesh.elements.len(),
                facets: model.reduced_mesh.facets.len(),
                classified: model.reduced_mesh.classified.len(),
                mean_error: err,
            });
        }
    }

    let timings = time_online(off, cfg, &test)?;
    Ok(OnlineReport {
        test_params: test,
        rows,
        sweep,
        deim_sweep,
        timings,
    })
}

/// Single-threaded medians of `cfg.timing_reps` repetitions per parameter,
/// then the median over parameters.
pub fn time_online(off: &Offline, cfg: &RunConfig, test: &[f64]) -> Result<OnlineTimings> {
    let case = cfg.problem_case();
    let d = &off.disc;
    let reps = cfg.timing_reps;
    single_threaded(|| -> Result<OnlineTimings> {
        let mut per: [Vec<f64>; 8] = Default::default();
        for &mu in test {
            let (ops, t_asm) = median_time(reps, || assemble_operators(d, &case, mu));
            let ops = ops?;
            let (sol, t_solve) = median_time(reps, || -> Result<FullSolution> {
                let sys = assemble_kkt(&ops, case.alpha)?;
                solve_kkt(&sys, mu)
            });
            sol?;
            let mut phases: [Vec<f64>; 4] = Default::default();
            for _ in 0..reps {
                let mut s = off.rom.solve(d, &case, mu, false)?;
                off.rom.lift(&mut s);
                let t = s.timings;
                for (k, v) in [t.coefficients, t.multiply, t.solve, t.lift].into_iter().enumerate() {
                    phases[k].push(v);
                }
            }
            let (_, t_a) = median_time(reps, || {
                let g = d.geometry(mu);
                crate::assembly::assemble_stiffness(d, &g, &case)
            });
            let deim_a = &off.rom.deim.a;
            let (_, t_da) = median_time(reps, || deim_a.online(d, &case, mu));
            per[0].push(t_asm);
            per[1].push(t_solve);
            for k in 0..4 {
                phases[k].sort_by(f64::total_cmp);
                per[2 + k].push(median_sorted(&phases[k]));
            }
            per[6].push(t_a);
            per[7].push(t_da);
        }
        let med = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            median_sorted(v)
        };
        Ok(OnlineTimings {
            full_assembly: med(&mut per[0]),
            full_solve: med(&mut per[1]),
            rom_coefficients: med(&mut per[2]),
            rom_multiply: med(&mut per[3]),
            rom_solve: med(&mut per[4]),
            rom_lift: med(&mut per[5]),
            full_assembly_a: med(&mut per[6]),
            deim_online_a: med(&mut per[7]),
        })
    })
}

pub fn write_online(out: &Path, rep: &OnlineReport) -> Result<()> {
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| {
            let e = &r.errors;
            let mut v = vec![fmt(r.mu), fmt(e.y), fmt(e.u), fmt(e.p)];
            v.extend(e.absolute.iter().map(|&f| u8::from(f).to_string()));
            v.extend(r.deim.iter().map(|&x| fmt(x)));
            v
        })
        .collect();
    write_csv(
        &out.join("errors.csv"),
        &[
            "mu", "e_y", "e_u", "e_p", "absolute_y", "absolute_u", "absolute_p", "deim_A", "deim_M", "deim_b", "deim_c",
        ],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = rep
        .sweep
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.modes[0].to_string(),
                r.modes[1].to_string(),
                r.modes[2].to_string(),
                r.reduced_dim.to_string(),
                fmt(r.mean[0]),
                fmt(r.mean[1]),
                fmt(r.mean[2]),
            ]
        })
        .collect();
    write_csv(
        &out.join("modes_sweep.csv"),
        &["k", "n_y", "n_u", "n_p", "reduced_dim", "mean_e_y", "mean_e_u", "mean_e_p"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = rep
        .deim_sweep
        .iter()
        .map(|r| {
            vec![
                r.component.to_string(),
                r.m_requested.to_string(),
                r.m.to_string(),
                r.elements.to_string(),
                r.facets.to_string(),
                r.classified.to_string(),
                fmt(r.mean_error),
            ]
        })
        .collect();
    write_csv(
        &out.join("deim_sweep.csv"),
        &["component", "m_requested", "m", "elements", "facets", "classified", "mean_error"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = rep
        .timings
        .rows()
        .into_iter()
        .map(|(k, v)| vec![k.to_string(), fmt(v)])
        .collect();
    write_csv(&out.join("timings.csv"), &["quantity", "value"], &rows)?;
    Ok(())
}

pub fn run_online(cfg: &RunConfig) -> Result<OnlineReport> {
    let _lock = OutputLock::acquire(&cfg.output)?;
    let off = load_offline(cfg)?;
    let rep = evaluate_online(&off, cfg)?;
    write_online(&cfg.output, &rep).map_err(|e| e.at_stage("write reports", None))?;
    Ok(rep)
}

/// Renders every CSV present in `out` as an aligned text table.
pub fn report(out: &Path) -> Result<String> {
    let files = [
        ("Offline summary", "offline_summary.csv"),
        ("Reduced meshes", "deim_summary.csv"),
        ("DEIM accuracy trade-off", "deim_sweep.csv"),
        ("Mean ROM errors versus POD dimension", "modes_sweep.csv"),
        ("Errors per test parameter", "errors.csv"),
        ("Online timings (seconds) and speedups", "timings.csv"),
        ("Offline timings (seconds)", "offline_timings.csv"),
    ];
    let mut s = String::new();
    let mut found = 0;
    for (title, name) in files {
        let path = out.join(name);
        if !path.exists() {
            continue;
        }
        found += 1;
        let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let header: Vec<String> = r.headers().map_err(|e| csv_error(&path, e))?.iter().map(String::from).collect();
        let mut table = vec![header];
        for rec in r.records() {
            table.push(rec.map_err(|e| csv_error(&path, e))?.iter().map(String::from).collect());
        }
        let cols = table[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|j| table.iter().map(|row| row.get(j).map_or(0, |c| c.len())).max().unwrap_or(0))
            .collect();
        s.push_str(&format!("{title}\n"));
        for row in &table {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
            s.push_str(&format!("  {}\n", cells.join("  ")));
        }
        s.push('\n');
    }
    if found == 0 {
        return Err(Error::Format {
            path: out.display().to_string(),
            msg: "no reports found; run `offline` and `online` first".into(),
        });
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Invariant checks against a persisted bundle.
pub fn verify(cfg: &RunConfig) -> Result<Vec<Check>> {
    let off = load_offline(cfg)?;
    let case = cfg.problem_case();
    let d = &off.disc;
    let [lo, hi] = cfg.mu_range;
    let test = sample_test_parameters(lo, hi, cfg.m_test.min(5), cfg.seed)?;
    let mut checks = Vec::new();

    let mut worst = [0.0f64; 2];
    for &mu in &test {
        let g = d.geometry(mu);
        worst[0] = worst[0].max((g.interior_area() - 4.0 * mu * mu).abs() / (4.0 * mu * mu));
        worst[1] = worst[1].max((g.boundary_length() - 8.0 * mu).abs() / (8.0 * mu));
    }
    checks.push(Check {
        name: "geometry",
        passed: worst[0] <= 0.02 && worst[1] <= 0.02,
        detail: format!("max relative area error {:.2e}, length error {:.2e}", worst[0], worst[1]),
    });

    let mut kkt = [0.0f64; 2];
    let mut deim_worst = 0.0f64;
    let mut oracle = 0.0f64;
    let vb = off.rom.basis.block();
    for &mu in test.iter().take(3) {
        let ops = assemble_operators(d, &case, mu)?;
        let full = solve_full(&ops, case.alpha)?;
        let (r, scale) = optimality_residual(&ops, case.alpha, &full);
        kkt[0] = kkt[0].max(full.relative_residual);
        kkt[1] = kkt[1].max(r / scale.max(f64::MIN_POSITIVE));
        for c in Component::ALL {
            let model = off.deim.get(c);
            let approx = model.online(d, &case, mu);
            let exact = c.values(&ops);
            let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            for &i in &model.indices {
                deim_worst = deim_worst.max((approx[i] - exact[i]).abs() / scale);
            }
        }
        let (k, rhs) = ReducedBlocks::from_operators(&off.rom.basis, &ops).system(case.alpha);
        let (kf, rf) = dense_block_operator(&ops, case.alpha);
        let ko = vb.transpose() * kf * &vb;
        let ro = vb.transpose() * rf;
        oracle = oracle
            .max((&k - &ko).amax() / (1.0 + ko.amax()))
            .max((&rhs - &ro).amax() / (1.0 + ro.amax()));
    }
    checks.push(Check {
        name: "kkt residuals",
        passed: kkt[0] <= 1e-9 && kkt[1] <= 1e-8,
        detail: format!("relative residual {:.2e}, optimality {:.2e}", kkt[0], kkt[1]),
    });
    checks.push(Check {
        name: "deim interpolation",
        passed: deim_worst <= 1e-12,
        detail: format!("max relative mismatch at selected indices {deim_worst:.2e}"),
    });
    checks.push(Check {
        name: "oracle equivalence",
        passed: oracle <= 1e-10,
        detail: format!("max entrywise deviation {oracle:.2e}"),
    });

    let w = d.background_mass();
    let dir = bundle_dir(&cfg.output);
    let mut pod_ok = true;
    let mut detail = Vec::new();
    for (k, p) in off.pod.iter().enumerate() {
        let s = load_matrix(&dir.join(format!("snapshots_{}.romb", VARS[k])))?;
        let monotone = p.eigenvalues.windows(2).all(|x| x[1] <= x[0]);
        let ws = w.mul_dense(&s);
        let energy = s.iter().zip(ws.iter()).map(|(a, b)| a * b).sum::<f64>() / s.ncols() as f64;
        let trace: f64 = p.eigenvalues.iter().sum();
        let trace_err = (trace - energy).abs() / energy.abs().max(f64::MIN_POSITIVE);
        let defect = orthonormality_defect(&p.vectors, &w);
        let ok = monotone && trace_err <= 1e-10 && defect <= 1e-10;
        pod_ok &= ok;
        detail.push(format!(
            "{} trace {:.1e} orth {:.1e} retained {}",
            VARS[k], trace_err, defect, off.retained[k]
        ));
    }
    checks.push(Check {
        name: "pod spectra",
        passed: pod_ok,
        detail: detail.join("; "),
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        RunConfig::parse(&format!(
            "h = 0.3\nm_train = 6\nm_test = 3\ntiming_reps = 1\nsweep_modes = 1,2\ndeim_sweep = 1,3\noutput = {}\n",
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn bundle_round_trip_preserves_reduced_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let off = run_offline(&cfg).unwrap();
        let loaded = load_offline(&cfg).unwrap();
        assert_eq!(loaded.modes, off.modes);
        assert_eq!(loaded.rom.deim.dims(), off.rom.deim.dims());
        assert_eq!(loaded.rom.a_terms, off.rom.a_terms);
        assert_eq!(loaded.rom.m_yu, off.rom.m_yu);
        assert_eq!(loaded.rom.c_terms, off.rom.c_terms);
        assert_eq!(loaded.params, off.params);
        let case = cfg.problem_case();
        let a = off.rom.solve(&off.disc, &case, 0.45, false).unwrap();
        let b = loaded.rom.solve(&loaded.disc, &case, 0.45, false).unwrap();
        assert_eq!(a.y_n, b.y_n);
    }

    #[test]
    fn mismatched_mesh_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_offline(&cfg).unwrap();
        let mut other = cfg.clone();
        other.h = 0.25;
        assert!(matches!(load_offline(&other), Err(Error::Format { .. })));
    }

    #[test]
    fn retained_dims_match_persisted_eigenvalues() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_offline(&cfg).unwrap();
        let summary = fs::read_to_string(dir.path().join("offline_summary.csv")).unwrap();
        for v in VARS {
            let eigs = load_vector(&bundle_dir(dir.path()).join(format!("pod_eigs_{v}.romb"))).unwrap();
            let line = format!("retained_{v},{}", energy_truncation(&eigs, cfg.eps_pod));
            assert!(summary.lines().any(|l| l == line), "{line}");
        }
    }

    #[test]
    fn modes_override_rebuilds_reduced_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_offline(&cfg).unwrap();
        let mut c = cfg.clone();
        c.modes = Some(1);
        c.deim_dims = Some([2, 1, 1, 1]);
        let off = load_offline(&c).unwrap();
        assert_eq!(off.modes, [1, 1, 1]);
        assert_eq!(off.rom.deim.dims(), [2, 1, 1, 1]);
    }
}
