use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cutrom::config::RunConfig;
use cutrom::pipeline;
use cutrom::Error;

#[derive(Parser)]
#[command(name = "cutrom", version, about = "CutFEM optimal control with a POD-DEIM reduced order model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Snapshots, POD, DEIM and reduced-term precomputation; writes the bundle.
    Offline(Opts),
    /// Full and reduced solves on fresh parameters; writes error and timing CSVs.
    Online(Opts),
    /// Prints the CSV reports in the output directory.
    Report(Opts),
    /// Runs the invariant suite against the bundle.
    Verify(Opts),
}

#[derive(Args)]
struct Opts {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// POD modes per variable, overriding the energy criterion.
    #[arg(long)]
    modes: Option<usize>,
    /// Seed for training and test parameter streams.
    #[arg(long)]
    seed: Option<u64>,
    /// DEIM dimensions as "a,m,b,c".
    #[arg(long, value_name = "A,M,B,C")]
    deim_dims: Option<String>,
}

fn load_config(o: &Opts) -> cutrom::Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &o.out {
        cfg.output = out.clone();
    }
    if let Some(m) = o.modes {
        cfg.modes = Some(m);
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(d) = &o.deim_dims {
        let v: Vec<usize> = d
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Config {
                line: 0,
                msg: format!("--deim-dims expects four integers, got `{d}`"),
            })?;
        let dims: [usize; 4] = v.try_into().map_err(|_| Error::Config {
            line: 0,
            msg: format!("--deim-dims expects four integers, got `{d}`"),
        })?;
        cfg.deim_dims = Some(dims);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> cutrom::Result<bool> {
    match cli.command {
        Command::Offline(o) => {
            let cfg = load_config(&o)?;
            let off = pipeline::run_offline(&cfg)?;
            let (a, b) = off.rom.dims();
            println!(
                "offline done: N = {}, retained (y, u, p) = {:?}, reduced dim {} (V_yp {a}, V_u {b}), DEIM dims {:?}",
                off.disc.n(),
                off.retained,
                off.rom.reduced_dim(),
                off.rom.deim.dims()
            );
            println!("bundle written to {}", pipeline::bundle_dir(&cfg.output).display());
        }
        Command::Online(o) => {
            let cfg = load_config(&o)?;
            let rep = pipeline::run_online(&cfg)?;
            let e = rep.mean_errors();
            let t = &rep.timings;
            println!(
                "online done: {} test parameters, mean errors y {:.3e} u {:.3e} p {:.3e}",
                rep.rows.len(),
                e[0],
                e[1],
                e[2]
            );
            println!(
                "speedup {:.1}x including assembly, {:.1}x excluding assembly",
                t.speedup_total(),
                t.speedup_solver()
            );
        }
        Command::Report(o) => {
            let cfg = load_config(&o)?;
            print!("{}", pipeline::report(&cfg.output)?);
        }
        Command::Verify(o) => {
            let cfg = load_config(&o)?;
            let checks = pipeline::verify(&cfg)?;
            for c in &checks {
                println!("{c}");
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
