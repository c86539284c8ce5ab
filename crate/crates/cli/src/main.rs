//! `gnshoot` experiment driver.
//!
//! Exit codes: 0 converged / completed, 1 configuration error, 2 iteration
//! limit or stalled line search, 3 divergence or unstable rollout.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use gnshoot::bench::{self, ContractionConfig};
use gnshoot::nmpc::{run_closed_loop, NmpcController, NmpcSettings, Plant};
use gnshoot::solver::initialize;
use gnshoot::{Error, Solver, Status, Variant};

use crate::config::{RunConfig, VariantConfig};

#[derive(Debug, Parser)]
#[command(name = "gnshoot", version, about = "Gauss-Newton shooting solvers and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Solver variant: SS, iLQR, GNMS, GNMS(M), iLQR-GNMS(M)
    #[arg(long)]
    variant: Option<String>,
    /// Number of shooting intervals M (combines with --variant)
    #[arg(long)]
    intervals: Option<usize>,
    /// Worker threads (fallback: config, then GNSHOOT_THREADS, then all cores)
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one optimal control problem and log every iteration
    Solve {
        #[command(flatten)]
        common: Common,
        /// Write the LQ subproblem assembled at an iteration, e.g. `iter=1`
        #[arg(long, value_name = "iter=K")]
        dump_lq: Option<String>,
        /// Enable the merit-function line search
        #[arg(long)]
        line_search: bool,
    },
    /// Closed-loop NMPC simulation
    Mpc {
        #[command(flatten)]
        common: Common,
        /// Simulated seconds
        #[arg(long)]
        duration: Option<f64>,
        /// Shift trajectories by one stage per cycle
        #[arg(long)]
        shift: bool,
    },
    /// Contraction-rate study over perturbed initial states
    Contraction {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
}

/// Error carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_error(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

/// Maps a library error to its exit code.
fn classify(e: Error) -> Failure {
    let code = match e {
        Error::Config(_) | Error::Dimension { .. } | Error::NotPositiveDefinite { .. } => 1,
        _ => 3,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let common = match &cli.command {
        Command::Solve { common, .. }
        | Command::Mpc { common, .. }
        | Command::Contraction { common, .. } => common,
    };
    let mut cfg = RunConfig::load(&common.config).map_err(config_error)?;
    apply_common(&mut cfg, common).map_err(config_error)?;
    let threads = resolve_threads(common.threads, cfg.threads).map_err(config_error)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| config_error(anyhow!("cannot start {threads} worker threads: {e}")))?;

    pool.install(|| match &cli.command {
        Command::Solve {
            common,
            dump_lq,
            line_search,
        } => {
            if *line_search {
                cfg.line_search.enabled = true;
            }
            let dump = dump_lq.as_deref().map(parse_dump_lq).transpose().map_err(config_error)?;
            cmd_solve(&cfg, &common.out, dump)
        }
        Command::Mpc {
            common,
            duration,
            shift,
        } => {
            if let Some(d) = duration {
                cfg.mpc.duration = *d;
            }
            if *shift {
                cfg.mpc.shift = true;
            }
            cmd_mpc(&cfg, &common.out)
        }
        Command::Contraction { common, samples } => {
            if let Some(s) = samples {
                cfg.contraction.samples = *s;
            }
            cmd_contraction(&cfg, &common.out)
        }
    })
}

fn apply_common(cfg: &mut RunConfig, common: &Common) -> anyhow::Result<()> {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.variant.is_some() || common.intervals.is_some() {
        let base = cfg.variant(Variant::GNMS)?;
        let v = override_variant(common.variant.as_deref(), common.intervals, base)?;
        cfg.variant = Some(VariantConfig::from_variant(v));
        if common.variant.is_some() {
            cfg.contraction.variants = vec![v.to_string()];
        }
    }
    Ok(())
}

/// `--variant` accepts the canonical names and, together with
/// `--intervals`, the bare forms `gnms-m` and `ilqr-gnms`.
fn override_variant(name: Option<&str>, intervals: Option<usize>, base: Variant) -> anyhow::Result<Variant> {
    let mut v = match name.map(|n| n.trim().to_ascii_lowercase()) {
        None => base,
        Some(n) if n == "gnms-m" || n == "gnms_m" => Variant::gnms_m(
            intervals.ok_or_else(|| anyhow!("--variant {n} requires --intervals"))?,
        ),
        Some(n) if n == "ilqr-gnms" || n == "ilqr_gnms_m" || n == "ilqr-gnms-m" => Variant::ilqr_gnms_m(
            intervals.ok_or_else(|| anyhow!("--variant {n} requires --intervals"))?,
        ),
        Some(n) => n.parse::<Variant>().map_err(|e| anyhow!("--variant: {e}"))?,
    };
    if let Some(m) = intervals {
        if m == 0 {
            bail!("--intervals: must be at least 1");
        }
        v.intervals = Some(m);
    }
    Ok(v)
}

fn resolve_threads(flag: Option<usize>, config: Option<usize>) -> anyhow::Result<usize> {
    let from_env = match std::env::var("GNSHOOT_THREADS") {
        Ok(s) if !s.trim().is_empty() => Some(
            s.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("GNSHOOT_THREADS: expected a positive integer, got '{s}'"))?,
        ),
        _ => None,
    };
    let n = flag
        .or(config)
        .or(from_env)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        bail!("threads: must be at least 1");
    }
    Ok(n)
}

fn parse_dump_lq(spec: &str) -> anyhow::Result<usize> {
    let k = spec
        .trim()
        .strip_prefix("iter=")
        .ok_or_else(|| anyhow!("--dump-lq: expected iter=K, got '{spec}'"))?;
    let k: usize = k
        .parse()
        .map_err(|_| anyhow!("--dump-lq: iteration must be a positive integer, got '{k}'"))?;
    if k == 0 {
        bail!("--dump-lq: iterations count from 1");
    }
    Ok(k)
}

/// Identity of a run: hash of the effective configuration (thread count
/// excluded, it does not change results) and the seed.
fn provenance(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.threads = None;
    format!("# config_hash={} seed={}", c.hash(), cfg.seed)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(config_error)
}

fn io(e: std::io::Error) -> Failure {
    config_error(anyhow!("write failed: {e}"))
}

fn cmd_solve(cfg: &RunConfig, out: &Path, dump_lq: Option<usize>) -> Result<u8, Failure> {
    let bench = cfg.benchmark().map_err(config_error)?;
    let problem = bench.problem.clone();
    let variant = cfg.variant(Variant::GNMS).map_err(config_error)?;
    cfg.check_variant(variant, problem.horizon).map_err(config_error)?;
    let settings = cfg.solver_settings().map_err(config_error)?;
    let init = cfg.init_strategy(&bench).map_err(config_error)?;

    let mut solver = Solver::new(problem, variant, settings, &init).map_err(classify)?;
    let mut w = create(out)?;
    writeln!(w, "{}", provenance(cfg)).map_err(io)?;
    writeln!(w, "iter,cost,defect_l1,update_norm,alpha,wall_ms").map_err(io)?;
    let mut dumped = false;
    while solver.status() == Status::Running {
        let before = solver.records().len();
        solver.iterate().map_err(classify)?;
        if let (Some(k), Some(lq)) = (dump_lq, solver.last_lq()) {
            if !dumped && solver.records().len() == k {
                let path = out.with_extension(format!("lq_iter{k}.json"));
                let f = create(&path)?;
                serde_json::to_writer(f, lq)
                    .map_err(|e| config_error(anyhow!("cannot write {}: {e}", path.display())))?;
                dumped = true;
            }
        }
        if solver.records().len() > before {
            let r = solver.records().last().expect("record pushed");
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iter, r.cost, r.defect_l1, r.update_norm, r.alpha, r.wall_ms
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    if let (Some(k), false) = (dump_lq, dumped) {
        eprintln!("warning: solve ended before iteration {k}; no LQ subproblem written");
    }

    let status = solver.status();
    let records = solver.records();
    eprintln!(
        "{}: {} after {} iterations, cost {}, defect {}",
        variant,
        status,
        records.len(),
        solver.cost(),
        solver.defect_l1()
    );
    Ok(match status {
        Status::Converged => 0,
        Status::MaxIters | Status::Stalled | Status::Running => 2,
        Status::Diverged | Status::UnstableRollout => 3,
    })
}

fn cmd_mpc(cfg: &RunConfig, out: &Path) -> Result<u8, Failure> {
    let bench = cfg.benchmark().map_err(config_error)?;
    let problem = bench.problem.clone();
    let variant = cfg
        .variant(Variant::ilqr_gnms_m(5))
        .map_err(config_error)?;
    cfg.check_variant(variant, problem.horizon).map_err(config_error)?;
    let mpc = &cfg.mpc;
    if !(mpc.duration >= 0.0 && mpc.duration.is_finite()) {
        return Err(config_error(anyhow!(
            "mpc.duration: must be a nonnegative number of seconds, got {}",
            mpc.duration
        )));
    }
    if !(mpc.noise_std >= 0.0) {
        return Err(config_error(anyhow!("mpc.noise_std: must be nonnegative")));
    }
    let init = cfg.init_strategy(&bench).map_err(config_error)?;
    let (states, controls, gains) = if mpc.warm_start_converged {
        let settings = cfg.solver_settings().map_err(config_error)?;
        let r = gnshoot::solver::solve(&problem, variant, &settings, &init).map_err(classify)?;
        let gains = r.policy().map(|p| p.gains.clone());
        (r.trajectory.states, r.trajectory.controls, gains)
    } else {
        let (traj, _) = initialize(&problem, variant, &init).map_err(classify)?;
        (traj.states, traj.controls, None)
    };
    let settings = NmpcSettings {
        shift: mpc.shift,
        ..NmpcSettings::default()
    };
    let mut controller = NmpcController::new(problem.clone(), variant, settings, states, controls, gains)
        .map_err(classify)?;
    let mut plant = Plant::new(
        problem.dynamics.clone(),
        problem.integrator,
        problem.x_init.clone(),
        mpc.noise_std,
        cfg.seed,
    )
    .map_err(classify)?;
    let report = run_closed_loop(&mut plant, &mut controller, mpc.duration).map_err(classify)?;

    let m = problem.state_dim();
    let mut w = create(out)?;
    writeln!(w, "{}", provenance(cfg)).map_err(io)?;
    let x_cols: Vec<String> = (0..m).map(|i| format!("x_meas_{i}")).collect();
    writeln!(w, "cycle,t_sim,{},cost_stage,feedback_ms,prep_ms", x_cols.join(",")).map_err(io)?;
    for c in &report.cycles {
        let xs: Vec<String> = c.x_meas.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.cycle,
            c.t_sim,
            xs.join(","),
            c.cost_stage,
            c.feedback_ms,
            c.prep_ms
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;

    let fallbacks = report.cycles.iter().filter(|c| c.fallback).count();
    println!(
        "variant={} cycles={} accumulated_cost={} mean_cycle_ms={:.4} mean_frequency_hz={:.1} fallback_cycles={} x_final={:?}",
        variant,
        report.cycles.len(),
        report.accumulated_cost,
        report.mean_cycle_ms,
        report.frequency_hz,
        fallbacks,
        report.final_state.as_slice()
    );
    if let Some(e) = report.aborted {
        eprintln!("error: plant diverged: {e}");
        return Ok(3);
    }
    Ok(0)
}

fn cmd_contraction(cfg: &RunConfig, out: &Path) -> Result<u8, Failure> {
    let bench = cfg.benchmark().map_err(config_error)?;
    let horizon = bench.problem.horizon;
    let section = &cfg.contraction;
    if section.samples == 0 {
        return Err(config_error(anyhow!("contraction.samples: must be at least 1")));
    }
    if !(section.scale >= 0.0) {
        return Err(config_error(anyhow!("contraction.scale: must be nonnegative")));
    }
    if section.last_k < 2 {
        return Err(config_error(anyhow!("contraction.last_k: must be at least 2")));
    }
    if section.variants.is_empty() {
        return Err(config_error(anyhow!("contraction.variants: must not be empty")));
    }
    let variants = section
        .variants
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v: Variant = s
                .parse()
                .map_err(|e| anyhow!("contraction.variants[{i}]: {e}"))?;
            cfg.check_variant(v, horizon)
                .map_err(|e| anyhow!("contraction.variants[{i}]: {e}"))?;
            Ok(v)
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(config_error)?;
    let settings = cfg.solver_settings().map_err(config_error)?;
    let study = ContractionConfig {
        samples: section.samples,
        scale: section.scale,
        seed: cfg.seed,
        last_k: section.last_k,
        ..ContractionConfig::default()
    };
    let summaries = bench::run_contraction_study(&bench, &variants, &study, &settings).map_err(classify)?;

    let mut w = create(out)?;
    writeln!(w, "{}", provenance(cfg)).map_err(io)?;
    writeln!(w, "variant,M,mean_rate,std_rate,n_converged,n_excluded").map_err(io)?;
    for s in &summaries {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.variant, s.intervals, s.mean_rate, s.std_rate, s.n_converged, s.n_excluded
        )
        .map_err(io)?;
        if s.n_degenerate > 0 {
            eprintln!(
                "{}: {} converged samples had no measurable contraction (degenerate)",
                s.variant, s.n_degenerate
            );
        }
    }
    w.flush().map_err(io)?;

    let json_path = out.with_extension("json");
    let summary = serde_json::json!({
        "config_hash": provenance(cfg).trim_start_matches("# config_hash=").split(' ').next(),
        "seed": cfg.seed,
        "system": cfg.system,
        "samples": section.samples,
        "scale": section.scale,
        "variants": summaries,
    });
    let f = create(&json_path)?;
    serde_json::to_writer_pretty(f, &summary)
        .map_err(|e| config_error(anyhow!("cannot write {}: {e}", json_path.display())))?;
    Ok(0)
}
