//! Acceptance suite: one PASS/FAIL line per criterion at the stated
//! tolerances, with wall times. Exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use cutrom::assembly::assemble_operators;
use cutrom::config::RunConfig;
use cutrom::deim::Component;
use cutrom::kkt::{optimality_residual, solve_full};
use cutrom::pipeline::{self, compute_offline, evaluate_online, Offline, OnlineReport};
use cutrom::pod::{orthonormality_defect, sample_test_parameters, SnapshotSet};
use cutrom::rom::{dense_block_operator, ReducedBlocks};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Shared {
    cfg: RunConfig,
    off: Offline,
    snaps: SnapshotSet,
    offline_secs: f64,
    online: OnlineReport,
    online_secs: f64,
}

fn config() -> RunConfig {
    RunConfig {
        deim_sweep: vec![5, 10, 30],
        ..RunConfig::default()
    }
}

fn geometry(cfg: &RunConfig) -> Outcome {
    let d = pipeline::discretization(cfg).unwrap();
    let mus = sample_test_parameters(0.4, 0.5, 20, 101).unwrap();
    let (mut ea, mut el) = (0.0f64, 0.0f64);
    for &mu in &mus {
        let g = d.geometry(mu);
        ea = ea.max((g.interior_area() - 4.0 * mu * mu).abs() / (4.0 * mu * mu));
        el = el.max((g.boundary_length() - 8.0 * mu).abs() / (8.0 * mu));
    }
    outcome(
        ea <= 0.02 && el <= 0.02,
        format!("20 mu at h = {}: max relative area error {ea:.2e}, length error {el:.2e} (tol 2e-2)", cfg.h),
    )
}

fn kkt(cfg: &RunConfig) -> Outcome {
    let d = pipeline::discretization(cfg).unwrap();
    let case = cfg.problem_case();
    let mus = sample_test_parameters(0.4, 0.5, 10, 202).unwrap();
    let (mut res, mut opt) = (0.0f64, 0.0f64);
    for &mu in &mus {
        let ops = assemble_operators(&d, &case, mu).unwrap();
        let sol = solve_full(&ops, case.alpha).unwrap();
        let (r, scale) = optimality_residual(&ops, case.alpha, &sol);
        res = res.max(sol.relative_residual);
        opt = opt.max(r / scale);
    }
    outcome(
        res <= 1e-9 && opt <= 1e-8,
        format!("10 mu: max KKT relative residual {res:.2e} (tol 1e-9), max ||aMu - Mp|| / scale {opt:.2e} (tol 1e-8)"),
    )
}

fn deim_exactness(s: &Shared) -> Outcome {
    let case = s.cfg.problem_case();
    let d = &s.off.disc;
    let mus = sample_test_parameters(0.4, 0.5, 10, 303).unwrap();
    let mut worst = [0.0f64; 4];
    for &mu in &mus {
        let ops = assemble_operators(d, &case, mu).unwrap();
        for (k, c) in Component::ALL.into_iter().enumerate() {
            let model = s.off.deim.get(c);
            let approx = model.online(d, &case, mu);
            let exact = c.values(&ops);
            let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for &i in &model.indices {
                worst[k] = worst[k].max((approx[i] - exact[i]).abs() / scale);
            }
        }
    }
    outcome(
        worst.iter().all(|&w| w <= 1e-12),
        format!(
            "10 unseen mu, dims {:?}: max mismatch at selected entries A {:.1e} M {:.1e} b {:.1e} c {:.1e} (tol 1e-12)",
            s.off.deim.dims(),
            worst[0],
            worst[1],
            worst[2],
            worst[3]
        ),
    )
}

fn deim_accuracy(s: &Shared) -> Outcome {
    let targets = [(Component::A, 30, 0.05), (Component::M, 10, 5e-3), (Component::B, 10, 5e-3), (Component::C, 10, 5e-3)];
    let mut pass = s.offline_secs <= 900.0 && s.online_secs <= 120.0;
    let mut parts = Vec::new();
    for (c, m, tol) in targets {
        let row = s
            .online
            .deim_sweep
            .iter()
            .find(|r| r.component == c && r.m_requested == m)
            .expect("sweep row");
        pass &= row.mean_error <= tol;
        parts.push(format!("{c} m={}/{} {:.2e} (tol {tol:.0e})", row.m, m, row.mean_error));
    }
    outcome(
        pass,
        format!(
            "M_train = {}, 30 unseen mu; used/requested m: {}; offline {:.1} s, online {:.1} s; ensemble rank caps m",
            s.cfg.m_train,
            parts.join(", "),
            s.offline_secs,
            s.online_secs
        ),
    )
}

fn rom_decay(s: &Shared) -> Outcome {
    let sweep = &s.online.sweep;
    let at = |k: usize| sweep.iter().find(|r| r.k == k).expect("sweep row");
    let k9 = at(9).mean;
    let k1 = at(1).mean;
    let mut monotone = true;
    for w in sweep.windows(2) {
        for v in 0..3 {
            monotone &= w[1].mean[v] <= 1.1 * w[0].mean[v];
        }
    }
    let line: Vec<String> = sweep
        .iter()
        .map(|r| format!("k={} [{:.1e} {:.1e} {:.1e}]", r.k, r.mean[0], r.mean[1], r.mean[2]))
        .collect();
    outcome(
        k9.iter().all(|&e| e <= 2e-2) && k1.iter().all(|&e| e > 0.1) && monotone,
        format!(
            "mean (y u p) errors: {}; k=9 tol 2e-2, k=1 > 0.1, ripple 10%: {}; k=25 uses rank {:?}",
            line.join(" "),
            if monotone { "ok" } else { "violated" },
            at(25).modes
        ),
    )
}

fn oracle(s: &Shared) -> Outcome {
    let case = s.cfg.problem_case();
    let d = &s.off.disc;
    let vb = s.off.rom.basis.block();
    let mut worst = 0.0f64;
    for &mu in &[0.4, 0.4321, 0.45, 0.4757, 0.5] {
        let ops = assemble_operators(d, &case, mu).unwrap();
        let (k, rhs) = ReducedBlocks::from_operators(&s.off.rom.basis, &ops).system(case.alpha);
        let (kf, rf) = dense_block_operator(&ops, case.alpha);
        let ko = vb.transpose() * kf * &vb;
        let ro = vb.transpose() * rf;
        worst = worst.max((&k - &ko).amax()).max((&rhs - &ro).amax());
    }
    outcome(
        worst <= 1e-10,
        format!("5 mu, reduced dim {}: max entrywise deviation {worst:.2e} (tol 1e-10)", s.off.rom.reduced_dim()),
    )
}

fn pod_spectra(s: &Shared) -> Outcome {
    let w = &s.snaps.inner_product;
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, snap) in [&s.snaps.s_y, &s.snaps.s_u, &s.snaps.s_p].into_iter().enumerate() {
        let p = &s.off.pod[k];
        let monotone = p.eigenvalues.windows(2).all(|x| x[1] <= x[0]);
        let ws = w.mul_dense(snap);
        let energy = snap.iter().zip(ws.iter()).map(|(a, b)| a * b).sum::<f64>() / snap.ncols() as f64;
        let trace: f64 = p.eigenvalues.iter().sum();
        let terr = (trace - energy).abs() / energy;
        let retained = s.off.retained[k];
        let orth = orthonormality_defect(&p.vectors, w);
        pass &= monotone && terr <= 1e-10 && (5..=80).contains(&retained);
        parts.push(format!(
            "{}: retained {retained}, trace err {terr:.1e}, orth {orth:.1e}, monotone {monotone}",
            ["y", "u", "p"][k]
        ));
    }
    outcome(
        pass,
        format!("eps = {:e}, M_train = {}: {}", s.cfg.eps_pod, s.cfg.m_train, parts.join("; ")),
    )
}

fn speedup(s: &Shared) -> Outcome {
    let t = &s.online.timings;
    let n = s.off.disc.n();
    let dim = s.off.rom.reduced_dim();
    let rom = t.speedup_online();
    let da = t.deim_speedup_a();
    let m_a = s.off.rom.deim.a.m();
    outcome(
        n >= 900 && dim <= 133 && m_a <= 30 && rom >= 3.0 && da >= 5.0,
        format!(
            "N = {n}, reduced dim {dim}: full KKT solve {:.2e} s vs ROM online {:.2e} s = {rom:.1}x (min 3); \
             A assembly {:.2e} s vs DEIM m_A = {m_a} {:.2e} s = {da:.1}x (min 5); medians of {}, one thread",
            t.full_solve,
            t.rom_online(),
            t.full_assembly_a,
            t.deim_online_a,
            s.cfg.timing_reps
        ),
    )
}

fn reproducibility() -> Outcome {
    let files = [
        "errors.csv",
        "modes_sweep.csv",
        "deim_sweep.csv",
        "offline_summary.csv",
        "pod_eigenvalues.csv",
        "deim_summary.csv",
    ];
    let mut contents = Vec::new();
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &dirs {
        let cfg = RunConfig {
            output: dir.path().to_path_buf(),
            timing_reps: 1,
            ..RunConfig::default()
        };
        pipeline::run_offline(&cfg).unwrap();
        pipeline::run_online(&cfg).unwrap();
        contents.push(files.map(|f| std::fs::read(dir.path().join(f)).unwrap()));
    }
    let same: Vec<bool> = (0..files.len()).map(|k| contents[0][k] == contents[1][k]).collect();
    let bytes: usize = contents[0].iter().map(Vec::len).sum();
    outcome(
        same.iter().all(|&b| b) && bytes > 0,
        format!(
            "two offline+online runs from one config: {} of {} report files byte-identical ({bytes} bytes, timings excluded)",
            same.iter().filter(|&&b| b).count(),
            files.len()
        ),
    )
}

fn main() -> ExitCode {
    let cfg = config();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id} {name} [{secs:.2} s]: {}", o.detail);
        results.push((id, name, o, secs));
    };

    run(1, "geometry consistency", &|| {
        let t = Instant::now();
        let mut o = geometry(&cfg);
        let secs = t.elapsed().as_secs_f64();
        o.pass &= secs < 10.0;
        o
    });
    run(2, "KKT optimality", &|| {
        let t = Instant::now();
        let mut o = kkt(&cfg);
        o.pass &= t.elapsed().as_secs_f64() < 30.0;
        o
    });

    let t = Instant::now();
    let (off, snaps, _) = compute_offline(&cfg).expect("offline stage");
    let offline_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let online = evaluate_online(&off, &cfg).expect("online stage");
    let online_secs = t.elapsed().as_secs_f64();
    println!("shared stages for criteria 3-8: offline {offline_secs:.2} s, online evaluation {online_secs:.2} s");
    let shared = Shared {
        cfg: cfg.clone(),
        off,
        snaps,
        offline_secs,
        online,
        online_secs,
    };

    run(3, "DEIM interpolation exactness", &|| deim_exactness(&shared));
    run(4, "DEIM accuracy decay", &|| deim_accuracy(&shared));
    run(5, "ROM error decay", &|| rom_decay(&shared));
    run(6, "oracle equivalence", &|| oracle(&shared));
    run(7, "POD spectra", &|| pod_spectra(&shared));
    run(8, "speedup", &|| speedup(&shared));
    run(9, "reproducibility", &reproducibility);

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
