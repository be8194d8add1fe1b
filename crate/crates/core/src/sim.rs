//! Monte-Carlo and deterministic simulation harness: seeded truth +
//! measurement generation, stochastic arrivals or scheduled reads, the
//! iterative scheduler loop, grid sweeps, and measurement-log replay.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{predict, update_2c, ArrivalPair, FilterError, FilterState};
use crate::model::{build_polytope, ModelError, SystemModel};
use crate::scheduler::{CandidateSet, IterativeState, Period, Schedule, SchedulerError};
use crate::stability::{trace_bound, Dynamics, RatePair, StabilityError, TraceBoundStatus};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("filter failed at step {step}: {source}")]
    Filter {
        step: usize,
        #[source]
        source: FilterError,
    },
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("measurement log {path}, line {line}: {msg}")]
    MalformedLog {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How measurements arrive during a run.
#[derive(Debug, Clone)]
pub enum SimMode {
    /// Bernoulli arrivals at the given rates.
    Stochastic(RatePair),
    /// Deterministic periodic reads.
    Scheduled(Schedule),
    /// The iterative relinearizing scheduler.
    Iterative {
        candidates: CandidateSet,
        delta: f64,
    },
    /// Drive the filter from a recorded measurement log.
    Replay { log: PathBuf },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: SystemModel,
    pub mode: SimMode,
    /// Simulated wall time in seconds; the step count is duration / Ts.
    pub duration: f64,
    pub seed: u64,
    /// Initial estimate, zero when absent.
    pub x0: Option<DVector<f64>>,
    /// Initial covariance, identity when absent.
    pub p0: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    /// Absent in replay mode.
    pub x_true: Option<DVector<f64>>,
    pub x_hat: DVector<f64>,
    /// Trace of the predicted covariance P_{k|k-1}, the quantity the
    /// analytical bound speaks about.
    pub trace: f64,
    pub gamma1: bool,
    pub gamma2: bool,
    /// Periods in force (iterative mode only).
    pub periods: Option<(Period, Period)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSummary {
    /// Mean predicted-covariance trace over the final 20% of steps.
    pub steady_trace: f64,
    /// Per-state RMSE against the truth; empty for replay.
    pub rmse: Vec<f64>,
    pub reads1: usize,
    pub reads2: usize,
    /// Analytical bound attached by the caller when one was computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Per-channel innovation RMS (replay only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub innovation_rms: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub records: Vec<StepRecord>,
    pub summary: SimSummary,
    /// Measurements generated during the run (empty in replay mode);
    /// rows only exist for channels that were actually read.
    pub measurements: Vec<MeasurementRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub k: usize,
    pub channel: u8,
    pub y: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha12Rng, chol_l: &DMatrix<f64>) -> DVector<f64> {
    let n = chol_l.nrows();
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    chol_l * z
}

struct PeriodTracker {
    last1: Option<usize>,
    last2: Option<usize>,
}

impl PeriodTracker {
    fn due(last: Option<usize>, k: usize, period: Period) -> bool {
        match period {
            Period::Never => false,
            Period::Every(t) => last.map_or(true, |l| k - l >= t),
        }
    }
}

/// Run one simulation. The truth evolves by the model dynamics with
/// process noise; measurement noise is drawn every step regardless of
/// arrivals so truth and measurements match across modes for a seed.
pub fn run(config: &SimConfig) -> Result<SimResult, SimError> {
    if !(config.duration > 0.0) {
        return Err(SimError::BadDuration(config.duration));
    }
    let model = &config.model;
    let steps = (config.duration / model.ts()).floor() as usize;
    let n = model.n_x();

    if let SimMode::Replay { log } = &config.mode {
        let rows = read_measurement_log(log, model)?;
        return replay(model, &rows, config);
    }

    let mut rng_proc = ChaCha12Rng::seed_from_u64(config.seed);
    rng_proc.set_stream(0);
    let mut rng_meas = ChaCha12Rng::seed_from_u64(config.seed);
    rng_meas.set_stream(1);
    let mut rng_arr = ChaCha12Rng::seed_from_u64(config.seed);
    rng_arr.set_stream(2);

    let lq = model
        .q()
        .clone()
        .cholesky()
        .expect("Q validated at model construction")
        .l();
    let lr = model
        .r()
        .clone()
        .cholesky()
        .expect("R validated at model construction")
        .l();

    let x0 = config.x0.clone().unwrap_or_else(|| DVector::zeros(n));
    let p0 = config
        .p0
        .clone()
        .unwrap_or_else(|| DMatrix::identity(n, n));
    let mut state = FilterState::new(x0.clone(), p0, 0)
        .map_err(|source| SimError::Filter { step: 0, source })?;
    let mut truth = x0;
    let u0 = DVector::zeros(model.n_u());

    let mut tracker = PeriodTracker {
        last1: None,
        last2: None,
    };
    let mut iter_state = match &config.mode {
        SimMode::Iterative { delta, .. } => Some(IterativeState::new(*delta)?),
        _ => None,
    };

    let mut records = Vec::with_capacity(steps);
    let mut measurements = Vec::new();
    let mut reads1 = 0usize;
    let mut reads2 = 0usize;

    for k in 0..steps {
        // measurement noise is drawn unconditionally
        let v = gaussian(&mut rng_meas, &lr);
        let y_full = model.c() * &truth + &v;
        let y1_all = y_full.rows(0, model.n_y1()).clone_owned();
        let y2_all = y_full.rows(model.n_y1(), model.n_y2()).clone_owned();

        let (g1, g2, periods) = match &config.mode {
            SimMode::Stochastic(rates) => {
                let d1: f64 = rng_arr.random();
                let d2: f64 = rng_arr.random();
                (d1 < rates.lambda1, d2 < rates.lambda2, None)
            }
            SimMode::Scheduled(schedule) => {
                let g1 = PeriodTracker::due(tracker.last1, k, schedule.period1);
                let g2 = PeriodTracker::due(tracker.last2, k, schedule.period2);
                if g1 {
                    tracker.last1 = Some(k);
                }
                if g2 {
                    tracker.last2 = Some(k);
                }
                (g1, g2, None)
            }
            SimMode::Iterative { candidates, .. } => {
                let it = iter_state.as_mut().expect("iterative state initialized");
                let (g1, g2) = it.step(k, &state.x_hat, model, candidates)?;
                let sched = it.schedule.as_ref().expect("schedule set at k = 0");
                (g1, g2, Some((sched.period1, sched.period2)))
            }
            SimMode::Replay { .. } => unreachable!("replay handled above"),
        };

        let y1 = g1.then_some(&y1_all);
        let y2 = g2.then_some(&y2_all);
        if g1 {
            reads1 += 1;
            measurements.push(MeasurementRow {
                k,
                channel: 1,
                y: y1_all.iter().copied().collect(),
            });
        }
        if g2 {
            reads2 += 1;
            measurements.push(MeasurementRow {
                k,
                channel: 2,
                y: y2_all.iter().copied().collect(),
            });
        }

        let predicted_trace = state.p.trace();
        let updated = update_2c(model, &state, ArrivalPair::new(g1, g2), y1, y2)
            .map_err(|source| SimError::Filter { step: k, source })?;

        records.push(StepRecord {
            k,
            x_true: Some(truth.clone()),
            x_hat: updated.x_hat.clone(),
            trace: predicted_trace,
            gamma1: g1,
            gamma2: g2,
            periods,
        });

        // advance truth, then predict
        let w = gaussian(&mut rng_proc, &lq);
        truth = model.f(&truth) + w;
        state = predict(model, &updated, &u0)
            .map_err(|source| SimError::Filter { step: k, source })?;
    }

    let summary = summarize(&records, reads1, reads2, None);
    Ok(SimResult {
        records,
        summary,
        measurements,
    })
}

fn summarize(
    records: &[StepRecord],
    reads1: usize,
    reads2: usize,
    innovation_rms: Option<[f64; 2]>,
) -> SimSummary {
    let steps = records.len();
    let tail_start = steps - steps / 5;
    let tail = &records[tail_start.min(steps.saturating_sub(1))..];
    let steady_trace = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().map(|r| r.trace).sum::<f64>() / tail.len() as f64
    };
    let rmse = match records.first().and_then(|r| r.x_true.as_ref()) {
        Some(first_truth) => {
            let n = first_truth.len();
            let mut acc = vec![0.0f64; n];
            for r in records {
                let t = r.x_true.as_ref().expect("truth present throughout");
                for i in 0..n {
                    let e = r.x_hat[i] - t[i];
                    acc[i] += e * e;
                }
            }
            acc.into_iter()
                .map(|s| (s / steps as f64).sqrt())
                .collect()
        }
        None => Vec::new(),
    };
    SimSummary {
        steady_trace,
        rmse,
        reads1,
        reads2,
        tau: None,
        innovation_rms,
    }
}

/// Drive the filter from recorded measurements; the truth column is absent.
fn replay(
    model: &SystemModel,
    rows: &[MeasurementRow],
    config: &SimConfig,
) -> Result<SimResult, SimError> {
    let steps = (config.duration / model.ts()).floor() as usize;
    let n = model.n_x();
    let x0 = config.x0.clone().unwrap_or_else(|| DVector::zeros(n));
    let p0 = config
        .p0
        .clone()
        .unwrap_or_else(|| DMatrix::identity(n, n));
    let mut state = FilterState::new(x0, p0, 0)
        .map_err(|source| SimError::Filter { step: 0, source })?;
    let u0 = DVector::zeros(model.n_u());

    let last_k = rows.last().map(|r| r.k + 1).unwrap_or(0);
    let steps = steps.max(last_k);

    let mut records = Vec::with_capacity(steps);
    let mut reads1 = 0usize;
    let mut reads2 = 0usize;
    let mut inno_acc = [0.0f64; 2];
    let mut inno_cnt = [0usize; 2];
    let mut cursor = 0usize;

    for k in 0..steps {
        let mut y1: Option<DVector<f64>> = None;
        let mut y2: Option<DVector<f64>> = None;
        while cursor < rows.len() && rows[cursor].k == k {
            let row = &rows[cursor];
            let y = DVector::from_vec(row.y.clone());
            match row.channel {
                1 => y1 = Some(y),
                _ => y2 = Some(y),
            }
            cursor += 1;
        }
        let (g1, g2) = (y1.is_some(), y2.is_some());
        if g1 {
            reads1 += 1;
        }
        if g2 {
            reads2 += 1;
        }
        if let Some(y) = &y1 {
            let inno = y - model.c1() * &state.x_hat;
            inno_acc[0] += inno.norm_squared();
            inno_cnt[0] += 1;
        }
        if let Some(y) = &y2 {
            let inno = y - model.c2() * &state.x_hat;
            inno_acc[1] += inno.norm_squared();
            inno_cnt[1] += 1;
        }

        let predicted_trace = state.p.trace();
        let updated = update_2c(
            model,
            &state,
            ArrivalPair::new(g1, g2),
            y1.as_ref(),
            y2.as_ref(),
        )
        .map_err(|source| SimError::Filter { step: k, source })?;

        records.push(StepRecord {
            k,
            x_true: None,
            x_hat: updated.x_hat.clone(),
            trace: predicted_trace,
            gamma1: g1,
            gamma2: g2,
            periods: None,
        });

        state = predict(model, &updated, &u0)
            .map_err(|source| SimError::Filter { step: k, source })?;
    }

    let innovation_rms = Some([
        if inno_cnt[0] > 0 {
            (inno_acc[0] / inno_cnt[0] as f64).sqrt()
        } else {
            0.0
        },
        if inno_cnt[1] > 0 {
            (inno_acc[1] / inno_cnt[1] as f64).sqrt()
        } else {
            0.0
        },
    ]);
    let summary = summarize(&records, reads1, reads2, innovation_rms);
    Ok(SimResult {
        records,
        summary,
        measurements: Vec::new(),
    })
}

/// One sweep cell: analysis outcome plus the Monte-Carlo steady trace.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    /// "tau" when the bound exists, otherwise INFEASIBLE / UNBOUNDED /
    /// an error description.
    pub analysis: String,
    pub tau: Option<f64>,
    pub sim_steady_trace: Option<f64>,
}

/// Analytical bound and mean simulated steady trace for every grid pair.
/// Per-cell failures are recorded in the row and the sweep continues.
pub fn grid_sweep(
    model: &SystemModel,
    grid: &CandidateSet,
    duration: f64,
    seeds: &[u64],
) -> Result<Vec<SweepRow>, SimError> {
    // polytope built once for nonlinear models
    let poly = if model.is_linear() {
        None
    } else {
        Some(build_polytope(model, model.default_envelope(), 1 << 15)?)
    };
    let a_lin = model.jacobian(&DVector::zeros(model.n_x()));
    let dynamics = match &poly {
        None => Dynamics::Linear(&a_lin),
        Some(p) => Dynamics::Polytopic(&p.vertices),
    };

    let mut rows = Vec::with_capacity(grid.pairs().len());
    for &pair in grid.pairs() {
        let (analysis, tau) = match trace_bound(dynamics, model, pair) {
            Ok(tb) => match tb.status {
                TraceBoundStatus::Feasible => {
                    let t = tb.tau.expect("feasible bound carries tau");
                    (format!("{t}"), Some(t))
                }
                TraceBoundStatus::Infeasible => ("INFEASIBLE".to_string(), None),
                TraceBoundStatus::Unbounded => ("UNBOUNDED".to_string(), None),
            },
            Err(e) => (format!("error: {e}"), None),
        };
        let mut traces = Vec::with_capacity(seeds.len());
        let mut sim_err = None;
        for &seed in seeds {
            let cfg = SimConfig {
                model: model.clone(),
                mode: SimMode::Stochastic(pair),
                duration,
                seed,
                x0: None,
                p0: None,
            };
            match run(&cfg) {
                Ok(res) => traces.push(res.summary.steady_trace),
                Err(e) => {
                    sim_err = Some(e.to_string());
                    break;
                }
            }
        }
        let sim_steady_trace = if traces.is_empty() {
            None
        } else {
            Some(traces.iter().sum::<f64>() / traces.len() as f64)
        };
        let analysis = match sim_err {
            Some(e) => format!("{analysis}; sim error: {e}"),
            None => analysis,
        };
        rows.push(SweepRow {
            lambda1: pair.lambda1,
            lambda2: pair.lambda2,
            analysis,
            tau,
            sim_steady_trace,
        });
    }
    Ok(rows)
}

/// Measurement log schema: header `k,channel,y0,...` with one row per
/// received channel packet, step-indexed with non-decreasing k.
pub fn write_measurement_log(path: &Path, rows: &[MeasurementRow]) -> Result<(), SimError> {
    let io_err = |source| SimError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let width = rows.iter().map(|r| r.y.len()).max().unwrap_or(1);
    let header: Vec<String> = (0..width).map(|i| format!("y{i}")).collect();
    writeln!(f, "k,channel,{}", header.join(",")).map_err(io_err)?;
    for row in rows {
        let mut cells: Vec<String> = vec![row.k.to_string(), row.channel.to_string()];
        for i in 0..width {
            cells.push(row.y.get(i).map(|v| format!("{v}")).unwrap_or_default());
        }
        writeln!(f, "{}", cells.join(",")).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_measurement_log(
    path: &Path,
    model: &SystemModel,
) -> Result<Vec<MeasurementRow>, SimError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| SimError::Io {
        path: p.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    let mut last_k: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| SimError::Io {
            path: p.clone(),
            source,
        })?;
        if idx == 0 {
            if !line.starts_with("k,channel") {
                return Err(SimError::MalformedLog {
                    path: p,
                    line: 1,
                    msg: "missing `k,channel,...` header".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let bad = |msg: &str| SimError::MalformedLog {
            path: p.clone(),
            line: lineno,
            msg: msg.into(),
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 3 {
            return Err(bad("expected k,channel,y..."));
        }
        let k: usize = cells[0].parse().map_err(|_| bad("bad step index"))?;
        let channel: u8 = cells[1].parse().map_err(|_| bad("bad channel"))?;
        if channel != 1 && channel != 2 {
            return Err(bad("channel must be 1 or 2"));
        }
        if let Some(prev) = last_k {
            if k < prev {
                return Err(bad("step index regressed"));
            }
        }
        last_k = Some(k);
        let dim = if channel == 1 {
            model.n_y1()
        } else {
            model.n_y2()
        };
        let mut y = Vec::with_capacity(dim);
        for cell in &cells[2..] {
            if cell.is_empty() {
                continue;
            }
            y.push(cell.parse::<f64>().map_err(|_| bad("bad measurement value"))?);
        }
        if y.len() != dim {
            return Err(bad(&format!(
                "channel {channel} expects {dim} values, got {}",
                y.len()
            )));
        }
        rows.push(MeasurementRow { k, channel, y });
    }
    Ok(rows)
}

/// Result CSV: `k,trace,gamma1,gamma2,xhat_*` plus `err_*` columns when
/// the truth is known. Full float precision (shortest round-trip form).
pub fn write_result_csv(path: &Path, result: &SimResult) -> Result<(), SimError> {
    let io_err = |source| SimError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let n = result
        .records
        .first()
        .map(|r| r.x_hat.len())
        .unwrap_or(0);
    let with_truth = result
        .records
        .first()
        .map(|r| r.x_true.is_some())
        .unwrap_or(false);
    let mut header = vec!["k".into(), "trace".into(), "gamma1".into(), "gamma2".into()];
    for i in 1..=n {
        header.push(format!("xhat_{i}"));
    }
    if with_truth {
        for i in 1..=n {
            header.push(format!("err_{i}"));
        }
    }
    writeln!(f, "{}", header.join(",")).map_err(io_err)?;
    for r in &result.records {
        let mut cells = vec![
            r.k.to_string(),
            format!("{}", r.trace),
            u8::from(r.gamma1).to_string(),
            u8::from(r.gamma2).to_string(),
        ];
        for v in r.x_hat.iter() {
            cells.push(format!("{v}"));
        }
        if with_truth {
            let t = r.x_true.as_ref().expect("truth present");
            for i in 0..n {
                cells.push(format!("{}", r.x_hat[i] - t[i]));
            }
        }
        writeln!(f, "{}", cells.join(",")).map_err(io_err)?;
    }
    Ok(())
}
