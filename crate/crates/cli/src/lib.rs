//! Command implementations behind the `kf2c` binary: analyze, sweep,
//! schedule, simulate, replay, and manifest-driven reruns.

pub mod gridspec;
pub mod manifest;
pub mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use kf2c::model::{build_polytope, ModelConfig, SystemModel};
use kf2c::scheduler::{optimize_rates, CandidateSet, Schedule};
use kf2c::sim::{grid_sweep, run, write_measurement_log, write_result_csv, SimConfig, SimMode};
use kf2c::stability::{
    check_boundedness_with, critical_lambda, trace_bound, Dynamics, FixedChannel, RatePair,
    TraceBoundStatus,
};

use manifest::RunManifest;

/// Exit codes: 0 success, 1 solver/numerical failure, 2 infeasible,
/// 64 usage, 66 missing input.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingInput(String),
    Infeasible(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 64,
            CliError::MissingInput(_) => 66,
            CliError::Infeasible(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::MissingInput(m)
            | CliError::Infeasible(m)
            | CliError::Failure(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message())
    }
}

impl std::error::Error for CliError {}

/// Format with six significant digits for terminal output; files keep
/// full precision.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Parser, Debug)]
#[command(name = "kf2c", version, about = "Two-channel intermittent-measurement filtering toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Model configuration file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: $KF2C_OUT_DIR or the current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Boundedness feasibility and trace bound at one rate pair, or
    /// bisection for a critical rate.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        l1: f64,
        #[arg(long)]
        l2: f64,
        /// linear | polytopic (default: linear for constant dynamics,
        /// polytopic otherwise).
        #[arg(long)]
        mode: Option<String>,
        /// Bisect this channel's rate (1 or 2) with the other fixed.
        #[arg(long)]
        bisect: Option<u8>,
        /// Fixed value of the other channel during bisection.
        #[arg(long)]
        fixed: Option<f64>,
        /// Bisection tolerance.
        #[arg(long, default_value_t = 0.005)]
        tol: f64,
        /// Use the four-block LMI without the open-loop row (comparison
        /// only; blind at low rates).
        #[arg(long)]
        paper_lmi: bool,
        /// Write the assembled feasibility SDP in sparse text form.
        #[arg(long)]
        dump_sdp: bool,
    },
    /// Analytical bound and Monte-Carlo steady trace over a rate grid.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Channel-1 rates: `0:0.1:1` (range) or `0,0.1,0.5` (list).
        #[arg(long)]
        grid: String,
        /// Channel-2 rates (defaults to the channel-1 spec).
        #[arg(long)]
        grid2: Option<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seed_base: u64,
    },
    /// Select a rate pair (static) or run the iterative relinearizing
    /// scheduler, then simulate with the resulting periods.
    Schedule {
        #[command(flatten)]
        common: CommonArgs,
        /// Candidate rates per channel, `spec1;spec2` with the grid
        /// syntax of `--grid` (semicolon optional when shared).
        #[arg(long)]
        candidates: String,
        /// static | iterative
        #[arg(long, default_value = "static")]
        mode: String,
        /// Relinearization threshold for iterative mode.
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Force the linear or polytopic analysis in static mode.
        #[arg(long)]
        analysis: Option<String>,
    },
    /// Run one simulation with stochastic arrivals or scheduled reads.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// stochastic | scheduled
        #[arg(long, default_value = "stochastic")]
        mode: String,
        #[arg(long)]
        l1: f64,
        #[arg(long)]
        l2: f64,
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the generated measurement log.
        #[arg(long)]
        log: bool,
    },
    /// Drive the filter from a recorded measurement log.
    Replay {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Re-execute a command from its run manifest (bit-exact outputs).
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(opt: &Option<PathBuf>) -> PathBuf {
    opt.clone()
        .or_else(|| std::env::var_os("KF2C_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_model(path: &Path) -> Result<(SystemModel, serde_json::Value), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| CliError::MissingInput(format!("model config not found: {}", path.display())))?;
    let cfg = ModelConfig::from_json(&text)
        .map_err(|e| CliError::Usage(format!("bad model config {}: {e}", path.display())))?;
    let resolved: serde_json::Value =
        serde_json::from_str(&text).unwrap_or(serde_json::Value::Null);
    let model = cfg
        .build()
        .map_err(|e| CliError::Usage(format!("bad model config {}: {e}", path.display())))?;
    Ok((model, resolved))
}

enum DynamicsStorage {
    Linear(nalgebra::DMatrix<f64>),
    Polytope(Vec<nalgebra::DMatrix<f64>>),
}

impl DynamicsStorage {
    fn as_dynamics(&self) -> Dynamics<'_> {
        match self {
            DynamicsStorage::Linear(a) => Dynamics::Linear(a),
            DynamicsStorage::Polytope(v) => Dynamics::Polytopic(v),
        }
    }
}

fn dynamics_for(model: &SystemModel, mode: Option<&str>) -> Result<DynamicsStorage, CliError> {
    let polytopic = match mode {
        Some("linear") => false,
        Some("polytopic") => true,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown analysis mode {other:?} (expected linear | polytopic)"
            )))
        }
        None => !model.is_linear(),
    };
    if polytopic {
        let poly = build_polytope(model, model.default_envelope(), 1 << 15)
            .map_err(|e| CliError::Failure(format!("polytope construction failed: {e}")))?;
        Ok(DynamicsStorage::Polytope(poly.vertices))
    } else {
        let a = model.jacobian(&DVector::zeros(model.n_x()));
        Ok(DynamicsStorage::Linear(a))
    }
}

pub fn dispatch(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze {
            common,
            l1,
            l2,
            mode,
            bisect,
            fixed,
            tol,
            paper_lmi,
            dump_sdp,
        } => cmd_analyze(
            &common, l1, l2, mode.as_deref(), bisect, fixed, tol, paper_lmi, dump_sdp, argv,
        ),
        Command::Sweep {
            common,
            grid,
            grid2,
            seeds,
            duration,
            seed_base,
        } => cmd_sweep(&common, &grid, grid2.as_deref(), seeds, duration, seed_base, argv),
        Command::Schedule {
            common,
            candidates,
            mode,
            delta,
            duration,
            seed,
            analysis,
        } => cmd_schedule(
            &common,
            &candidates,
            &mode,
            delta,
            duration,
            seed,
            analysis.as_deref(),
            argv,
        ),
        Command::Simulate {
            common,
            mode,
            l1,
            l2,
            duration,
            seed,
            log,
        } => cmd_simulate(&common, &mode, l1, l2, duration, seed, log, argv),
        Command::Replay {
            common,
            log,
            duration,
        } => cmd_replay(&common, &log, duration, argv),
        Command::Rerun { manifest, out } => cmd_rerun(&manifest, out),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    common: &CommonArgs,
    l1: f64,
    l2: f64,
    mode: Option<&str>,
    bisect: Option<u8>,
    fixed: Option<f64>,
    tol: f64,
    paper_lmi: bool,
    dump_sdp: bool,
    argv: &[String],
) -> Result<(), CliError> {
    let (model, resolved) = load_model(&common.config)?;
    let storage = dynamics_for(&model, mode)?;
    let dynamics = storage.as_dynamics();
    let dir = out_dir(&common.out);
    let mut manifest = RunManifest::start(argv, resolved, vec![]);

    if let Some(channel) = bisect {
        let fixed_value = fixed.ok_or_else(|| {
            CliError::Usage("--bisect requires --fixed for the other channel".into())
        })?;
        let fixed_channel = match channel {
            1 => FixedChannel::Two,
            2 => FixedChannel::One,
            other => {
                return Err(CliError::Usage(format!(
                    "--bisect takes 1 or 2, got {other}"
                )))
            }
        };
        let lc = critical_lambda(dynamics, &model, fixed_channel, fixed_value, tol)
            .map_err(|e| CliError::Failure(format!("bisection failed: {e}")))?;
        if lc > 1.0 {
            println!("critical lambda{channel}: infeasible even at 1 (other channel fixed at {})", sig6(fixed_value));
        } else {
            println!("critical lambda{channel}: {} (other channel fixed at {})", sig6(lc), sig6(fixed_value));
        }
        let report = serde_json::json!({
            "bisect_channel": channel,
            "fixed_value": fixed_value,
            "critical_lambda": lc,
            "tol": tol,
        });
        write_json(&dir.join("analyze.json"), &report)?;
        manifest.outputs.push("analyze.json".into());
        manifest.finish_into(&dir)?;
        return Ok(());
    }

    let rates = RatePair::new(l1, l2)
        .map_err(|e| CliError::Usage(format!("bad rates: {e}")))?;

    if dump_sdp {
        let structure = kf2c::stability::assemble_psi(dynamics, &model, rates, !paper_lmi);
        let path = dir.join("psi_sdp.txt");
        let mut buf = Vec::new();
        structure
            .problem
            .dump(&mut buf)
            .map_err(|e| CliError::Failure(format!("sdp dump failed: {e}")))?;
        std::fs::create_dir_all(&dir).ok();
        std::fs::write(&path, buf)
            .map_err(|e| CliError::Failure(format!("writing {}: {e}", path.display())))?;
        manifest.outputs.push("psi_sdp.txt".into());
    }

    let feas = check_boundedness_with(dynamics, &model, rates, !paper_lmi)
        .map_err(|e| CliError::Failure(format!("boundedness check failed: {e}")))?;
    let (feasible, margin) = match &feas {
        kf2c::stability::BoundednessResult::Feasible(cert) => (true, Some(cert.margin)),
        kf2c::stability::BoundednessResult::Infeasible => (false, None),
    };

    let tb = if feasible {
        Some(
            trace_bound(dynamics, &model, rates)
                .map_err(|e| CliError::Failure(format!("trace bound failed: {e}")))?,
        )
    } else {
        None
    };

    println!(
        "rates ({}, {}): {}",
        sig6(l1),
        sig6(l2),
        if feasible { "FEASIBLE" } else { "INFEASIBLE" }
    );
    if let Some(m) = margin {
        println!("certificate margin: {}", sig6(m));
    }
    let mut tau_json = serde_json::Value::Null;
    let mut status_str = if feasible { "feasible" } else { "infeasible" }.to_string();
    if let Some(tb) = &tb {
        match tb.status {
            TraceBoundStatus::Feasible => {
                let tau = tb.tau.expect("feasible bound has tau");
                println!("trace bound tau: {}", sig6(tau));
                tau_json = serde_json::json!(tau);
            }
            TraceBoundStatus::Unbounded => {
                println!("trace bound: UNBOUNDED");
                status_str = "unbounded".into();
            }
            TraceBoundStatus::Infeasible => {
                println!("trace bound: INFEASIBLE");
                status_str = "infeasible".into();
            }
        }
    }

    let report = serde_json::json!({
        "lambda1": l1,
        "lambda2": l2,
        "feasible": feasible,
        "margin": margin,
        "tau": tau_json,
        "status": status_str,
        "open_loop_block": !paper_lmi,
    });
    write_json(&dir.join("analyze.json"), &report)?;
    manifest.outputs.push("analyze.json".into());
    manifest.finish_into(&dir)?;

    if !feasible || status_str == "unbounded" {
        return Err(CliError::Infeasible(format!(
            "rates ({}, {}) not certified bounded",
            sig6(l1),
            sig6(l2)
        )));
    }
    Ok(())
}

fn cmd_sweep(
    common: &CommonArgs,
    grid1: &str,
    grid2: Option<&str>,
    seeds: usize,
    duration: f64,
    seed_base: u64,
    argv: &[String],
) -> Result<(), CliError> {
    let (model, resolved) = load_model(&common.config)?;
    let v1 = gridspec::parse(grid1).map_err(CliError::Usage)?;
    let v2 = match grid2 {
        Some(g) => gridspec::parse(g).map_err(CliError::Usage)?,
        None => v1.clone(),
    };
    let grid = CandidateSet::from_grid(&v1, &v2)
        .map_err(|e| CliError::Usage(format!("bad grid: {e}")))?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| seed_base + i).collect();

    let rows = grid_sweep(&model, &grid, duration, &seed_list)
        .map_err(|e| CliError::Failure(format!("sweep failed: {e}")))?;

    let dir = out_dir(&common.out);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Failure(format!("creating {}: {e}", dir.display())))?;
    let csv_path = dir.join("sweep.csv");
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&csv_path)
                .map_err(|e| CliError::Failure(format!("writing sweep.csv: {e}")))?,
        );
        writeln!(f, "lambda1,lambda2,analysis,tau,sim_steady_trace")
            .map_err(|e| CliError::Failure(e.to_string()))?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.lambda1,
                r.lambda2,
                r.analysis.replace(',', ";"),
                r.tau.map(|t| format!("{t}")).unwrap_or_default(),
                r.sim_steady_trace
                    .map(|t| format!("{t}"))
                    .unwrap_or_default()
            )
            .map_err(|e| CliError::Failure(e.to_string()))?;
        }
    }

    let heat = svg::sweep_heatmap(&v1, &v2, &rows);
    let svg_path = dir.join("sweep.svg");
    std::fs::write(&svg_path, heat)
        .map_err(|e| CliError::Failure(format!("writing sweep.svg: {e}")))?;

    for r in &rows {
        println!(
            "({}, {}): bound={} sim={}",
            sig6(r.lambda1),
            sig6(r.lambda2),
            r.tau.map(sig6).unwrap_or_else(|| r.analysis.clone()),
            r.sim_steady_trace.map(sig6).unwrap_or_default()
        );
    }

    let mut manifest = RunManifest::start(argv, resolved, seed_list);
    manifest.outputs.push("sweep.csv".into());
    manifest.outputs.push("sweep.svg".into());
    manifest.finish_into(&dir)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_schedule(
    common: &CommonArgs,
    candidates: &str,
    mode: &str,
    delta: f64,
    duration: f64,
    seed: u64,
    analysis: Option<&str>,
    argv: &[String],
) -> Result<(), CliError> {
    let (model, resolved) = load_model(&common.config)?;
    let (v1, v2) = match candidates.split_once(';') {
        Some((a, b)) => (
            gridspec::parse(a).map_err(CliError::Usage)?,
            gridspec::parse(b).map_err(CliError::Usage)?,
        ),
        None => {
            let v = gridspec::parse(candidates).map_err(CliError::Usage)?;
            (v.clone(), v)
        }
    };
    let set = CandidateSet::from_grid(&v1, &v2)
        .map_err(|e| CliError::Usage(format!("bad candidates: {e}")))?;
    let dir = out_dir(&common.out);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Failure(format!("creating {}: {e}", dir.display())))?;
    let mut manifest = RunManifest::start(argv, resolved, vec![seed]);

    let result = match mode {
        "static" => {
            let storage = dynamics_for(&model, analysis)?;
            let (schedule, reports) =
                match optimize_rates(storage.as_dynamics(), &model, &set) {
                    Ok(x) => x,
                    Err(kf2c::scheduler::SchedulerError::AllExcluded(reports)) => {
                        for r in &reports {
                            println!(
                                "  ({}, {}): {}",
                                sig6(r.pair.lambda1),
                                sig6(r.pair.lambda2),
                                r.outcome
                            );
                        }
                        return Err(CliError::Infeasible(
                            "all candidate pairs are excluded".into(),
                        ));
                    }
                    Err(e) => return Err(CliError::Failure(format!("scheduling failed: {e}"))),
                };
            println!(
                "chosen rates: ({}, {})  periods: ({}, {})  tau: {}  objective: {}",
                sig6(schedule.chosen.lambda1),
                sig6(schedule.chosen.lambda2),
                schedule.period1,
                schedule.period2,
                sig6(schedule.tau),
                sig6(schedule.objective_value)
            );
            for r in &reports {
                println!(
                    "  ({}, {}): {}",
                    sig6(r.pair.lambda1),
                    sig6(r.pair.lambda2),
                    r.outcome
                );
            }
            let tau = schedule.tau;
            let cfg = SimConfig {
                model: model.clone(),
                mode: SimMode::Scheduled(schedule.clone()),
                duration,
                seed,
                x0: None,
                p0: None,
            };
            let mut res = run(&cfg).map_err(|e| CliError::Failure(format!("simulation failed: {e}")))?;
            res.summary.tau = Some(tau);
            let report = serde_json::json!({
                "mode": "static",
                "chosen": [schedule.chosen.lambda1, schedule.chosen.lambda2],
                "period1": schedule.period1.as_steps(),
                "period2": schedule.period2.as_steps(),
                "tau": tau,
                "objective": schedule.objective_value,
            });
            write_json(&dir.join("schedule.json"), &report)?;
            manifest.outputs.push("schedule.json".into());
            res
        }
        "iterative" => {
            let cfg = SimConfig {
                model: model.clone(),
                mode: SimMode::Iterative {
                    candidates: set,
                    delta,
                },
                duration,
                seed,
                x0: None,
                p0: None,
            };
            let res = run(&cfg).map_err(|e| match e {
                kf2c::sim::SimError::Scheduler(kf2c::scheduler::SchedulerError::AllExcluded(
                    reports,
                )) => {
                    for r in &reports {
                        eprintln!(
                            "  ({}, {}): {}",
                            sig6(r.pair.lambda1),
                            sig6(r.pair.lambda2),
                            r.outcome
                        );
                    }
                    CliError::Infeasible("all candidate pairs are excluded".into())
                }
                other => CliError::Failure(format!("simulation failed: {other}")),
            })?;
            // per-step periods reproduce the feedback-period figure
            let periods_path = dir.join("periods.csv");
            {
                use std::io::Write;
                let mut f = std::io::BufWriter::new(
                    std::fs::File::create(&periods_path)
                        .map_err(|e| CliError::Failure(format!("writing periods.csv: {e}")))?,
                );
                writeln!(f, "k,period1,period2").map_err(|e| CliError::Failure(e.to_string()))?;
                for r in &res.records {
                    if let Some((p1, p2)) = &r.periods {
                        writeln!(f, "{},{},{}", r.k, p1, p2)
                            .map_err(|e| CliError::Failure(e.to_string()))?;
                    }
                }
            }
            let plot = svg::period_plot(&res.records);
            std::fs::write(dir.join("periods.svg"), plot)
                .map_err(|e| CliError::Failure(format!("writing periods.svg: {e}")))?;
            manifest.outputs.push("periods.csv".into());
            manifest.outputs.push("periods.svg".into());
            res
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown schedule mode {other:?} (expected static | iterative)"
            )))
        }
    };

    write_result_csv(&dir.join("result.csv"), &result)
        .map_err(|e| CliError::Failure(format!("writing result.csv: {e}")))?;
    write_json(&dir.join("summary.json"), &result.summary)?;
    println!(
        "steady trace: {}  reads: ({}, {})",
        sig6(result.summary.steady_trace),
        result.summary.reads1,
        result.summary.reads2
    );
    manifest.outputs.push("result.csv".into());
    manifest.outputs.push("summary.json".into());
    manifest.finish_into(&dir)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    common: &CommonArgs,
    mode: &str,
    l1: f64,
    l2: f64,
    duration: f64,
    seed: u64,
    log: bool,
    argv: &[String],
) -> Result<(), CliError> {
    let (model, resolved) = load_model(&common.config)?;
    let rates = RatePair::new(l1, l2).map_err(|e| CliError::Usage(format!("bad rates: {e}")))?;
    let sim_mode = match mode {
        "stochastic" => SimMode::Stochastic(rates),
        "scheduled" => SimMode::Scheduled(Schedule {
            period1: kf2c::scheduler::rate_to_period(l1),
            period2: kf2c::scheduler::rate_to_period(l2),
            chosen: rates,
            objective_value: f64::NAN,
            tau: f64::NAN,
        }),
        other => {
            return Err(CliError::Usage(format!(
                "unknown simulate mode {other:?} (expected stochastic | scheduled)"
            )))
        }
    };
    let cfg = SimConfig {
        model,
        mode: sim_mode,
        duration,
        seed,
        x0: None,
        p0: None,
    };
    let res = run(&cfg).map_err(|e| CliError::Failure(format!("simulation failed: {e}")))?;
    let dir = out_dir(&common.out);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Failure(format!("creating {}: {e}", dir.display())))?;
    write_result_csv(&dir.join("result.csv"), &res)
        .map_err(|e| CliError::Failure(format!("writing result.csv: {e}")))?;
    write_json(&dir.join("summary.json"), &res.summary)?;
    let mut manifest = RunManifest::start(argv, resolved, vec![seed]);
    manifest.outputs.push("result.csv".into());
    manifest.outputs.push("summary.json".into());
    if log {
        write_measurement_log(&dir.join("measurements.csv"), &res.measurements)
            .map_err(|e| CliError::Failure(format!("writing measurements.csv: {e}")))?;
        manifest.outputs.push("measurements.csv".into());
    }
    let plot = svg::trace_plot(&res.records);
    std::fs::write(dir.join("trace.svg"), plot)
        .map_err(|e| CliError::Failure(format!("writing trace.svg: {e}")))?;
    manifest.outputs.push("trace.svg".into());
    println!(
        "steady trace: {}  reads: ({}, {})",
        sig6(res.summary.steady_trace),
        res.summary.reads1,
        res.summary.reads2
    );
    manifest.finish_into(&dir)?;
    Ok(())
}

fn cmd_replay(
    common: &CommonArgs,
    log: &Path,
    duration: Option<f64>,
    argv: &[String],
) -> Result<(), CliError> {
    let (model, resolved) = load_model(&common.config)?;
    if !log.exists() {
        return Err(CliError::MissingInput(format!(
            "measurement log not found: {}",
            log.display()
        )));
    }
    let ts = model.ts();
    let cfg = SimConfig {
        model,
        mode: SimMode::Replay {
            log: log.to_path_buf(),
        },
        duration: duration.unwrap_or(ts), // extended to cover the log
        seed: 0,
        x0: None,
        p0: None,
    };
    let res = run(&cfg).map_err(|e| CliError::Failure(format!("replay failed: {e}")))?;
    let dir = out_dir(&common.out);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Failure(format!("creating {}: {e}", dir.display())))?;
    write_result_csv(&dir.join("result.csv"), &res)
        .map_err(|e| CliError::Failure(format!("writing result.csv: {e}")))?;
    write_json(&dir.join("summary.json"), &res.summary)?;
    println!(
        "replayed {} steps, reads ({}, {}), steady trace {}",
        res.records.len(),
        res.summary.reads1,
        res.summary.reads2,
        sig6(res.summary.steady_trace)
    );
    let mut manifest = RunManifest::start(argv, resolved, vec![]);
    manifest.outputs.push("result.csv".into());
    manifest.outputs.push("summary.json".into());
    manifest.finish_into(&dir)?;
    Ok(())
}

fn cmd_rerun(manifest_path: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|_| {
        CliError::MissingInput(format!("manifest not found: {}", manifest_path.display()))
    })?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad manifest: {e}")))?;
    let mut argv = manifest.command.clone();
    if let Some(dir) = out {
        // replace or append the --out argument
        if let Some(pos) = argv.iter().position(|a| a == "--out") {
            argv[pos + 1] = dir.display().to_string();
        } else {
            argv.push("--out".into());
            argv.push(dir.display().to_string());
        }
    }
    let mut full = vec!["kf2c".to_string()];
    full.extend(argv.iter().cloned());
    let cli = Cli::try_parse_from(&full)
        .map_err(|e| CliError::Usage(format!("manifest command invalid: {e}")))?;
    dispatch(cli, &argv)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Failure(format!("creating {}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Failure(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Failure(format!("writing {}: {e}", path.display())))?;
    Ok(())
}
