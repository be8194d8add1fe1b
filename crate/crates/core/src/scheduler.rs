//! Rate-pair selection, deterministic read periods, and the iterative
//! relinearizing scheduler.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::model::SystemModel;
use crate::stability::{
    check_boundedness_cached, trace_bound_cached, ActiveSetCache, Dynamics, RatePair,
    StabilityError, TraceBoundStatus,
};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("recomputation threshold must be positive, got {0}")]
    BadDelta(f64),
    #[error("all candidate pairs are excluded:\n{}", render_reports(.0))]
    AllExcluded(Vec<CandidateReport>),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

fn render_reports(reports: &[CandidateReport]) -> String {
    reports
        .iter()
        .map(|r| format!("  ({:.4}, {:.4}): {}", r.pair.lambda1, r.pair.lambda2, r.outcome))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Finitely many rate pairs to optimize over.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pairs: Vec<RatePair>,
}

impl CandidateSet {
    pub fn new(pairs: Vec<RatePair>) -> Result<Self, SchedulerError> {
        if pairs.is_empty() {
            return Err(SchedulerError::EmptyCandidates);
        }
        Ok(Self { pairs })
    }

    /// Cartesian product of per-channel rate values.
    pub fn from_grid(values1: &[f64], values2: &[f64]) -> Result<Self, SchedulerError> {
        let mut pairs = Vec::with_capacity(values1.len() * values2.len());
        for &l1 in values1 {
            for &l2 in values2 {
                pairs.push(RatePair::new(l1, l2).map_err(SchedulerError::from)?);
            }
        }
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[RatePair] {
        &self.pairs
    }
}

/// Deterministic read period for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Period {
    Every(usize),
    Never,
}

impl std::fmt::Display for Period {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Period::Every(t) => write!(f, "{t}"),
            Period::Never => write!(f, "never"),
        }
    }
}

impl Period {
    pub fn as_steps(&self) -> Option<usize> {
        match self {
            Period::Every(t) => Some(*t),
            Period::Never => None,
        }
    }
}

/// floor(1 / lambda) steps, with a tiny snap-to-integer so rates like 0.05
/// give 20 rather than 19; lambda = 0 means the channel is never read.
pub fn rate_to_period(lambda: f64) -> Period {
    assert!((0.0..=1.0).contains(&lambda), "rate outside [0, 1]");
    if lambda == 0.0 {
        return Period::Never;
    }
    let raw = 1.0 / lambda;
    let nearest = raw.round();
    let steps = if (raw - nearest).abs() <= 1e-9 * nearest {
        nearest
    } else {
        raw.floor()
    };
    Period::Every(steps as usize)
}

/// Penalty e^{1/(1-lambda)}, saturated so lambda = 1 stays selectable.
pub fn rate_penalty(lambda: f64) -> f64 {
    let inner = if lambda >= 1.0 {
        50.0
    } else {
        (1.0 / (1.0 - lambda)).min(50.0)
    };
    inner.exp()
}

/// Selection objective tau + e^{1/(1-l1)} + e^{1/(1-l2)}.
pub fn schedule_objective(tau: f64, rates: RatePair) -> f64 {
    tau + rate_penalty(rates.lambda1) + rate_penalty(rates.lambda2)
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub period1: Period,
    pub period2: Period,
    pub chosen: RatePair,
    pub objective_value: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateOutcome {
    Feasible { tau: f64, objective: f64 },
    Infeasible,
    Unbounded,
    Failed(String),
}

impl std::fmt::Display for CandidateOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CandidateOutcome::Feasible { tau, objective } => {
                write!(f, "feasible, tau={tau:.6}, objective={objective:.6}")
            }
            CandidateOutcome::Infeasible => write!(f, "infeasible"),
            CandidateOutcome::Unbounded => write!(f, "trace bound unbounded"),
            CandidateOutcome::Failed(e) => write!(f, "solver failure: {e}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CandidateReport {
    pub pair: RatePair,
    pub outcome: CandidateOutcome,
}

fn evaluate_candidate(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    pair: RatePair,
    cache: &mut ActiveSetCache,
) -> CandidateOutcome {
    match check_boundedness_cached(dynamics, model, pair, true, cache) {
        Err(e) => CandidateOutcome::Failed(e.to_string()),
        Ok(res) if !res.is_feasible() => CandidateOutcome::Infeasible,
        Ok(_) => match trace_bound_cached(dynamics, model, pair, cache) {
            Err(e) => CandidateOutcome::Failed(e.to_string()),
            Ok(tb) => match tb.status {
                TraceBoundStatus::Feasible => {
                    let tau = tb.tau.expect("feasible trace bound carries tau");
                    let objective = schedule_objective(tau, pair);
                    CandidateOutcome::Feasible { tau, objective }
                }
                TraceBoundStatus::Infeasible => CandidateOutcome::Infeasible,
                TraceBoundStatus::Unbounded => CandidateOutcome::Unbounded,
            },
        },
    }
}

/// Evaluate every candidate pair (boundedness LMI, then trace bound) and
/// pick the feasible one minimizing the objective. Ties within 1e-12 break
/// toward smaller l1 + l2, then smaller l1. Candidates are independent and
/// evaluated on a small thread pool, one solver instance per task.
pub fn optimize_rates(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    candidates: &CandidateSet,
) -> Result<(Schedule, Vec<CandidateReport>), SchedulerError> {
    let n = candidates.pairs.len();
    // cheap candidates first within each worker so active-set caches warm
    // up on well-conditioned problems
    let mut order: Vec<usize> = (0..n).collect();
    let penalty_sum = |p: &RatePair| rate_penalty(p.lambda1) + rate_penalty(p.lambda2);
    order.sort_by(|&a, &b| {
        (candidates.pairs[a].lambda1 + candidates.pairs[a].lambda2)
            .total_cmp(&(candidates.pairs[b].lambda1 + candidates.pairs[b].lambda2))
            .reverse()
    });
    let _ = penalty_sum;

    let workers = std::thread::available_parallelism()
        .map(|v| v.get())
        .unwrap_or(1)
        .min(n)
        .max(1);

    let mut outcomes: Vec<Option<CandidateOutcome>> = vec![None; n];
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let slice: Vec<usize> = order.iter().copied().skip(w).step_by(workers).collect();
            let pairs = &candidates.pairs;
            handles.push(scope.spawn(move || {
                let mut cache = ActiveSetCache::default();
                slice
                    .into_iter()
                    .map(|idx| {
                        (
                            idx,
                            evaluate_candidate(dynamics, model, pairs[idx], &mut cache),
                        )
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            for (idx, outcome) in handle.join().expect("candidate worker panicked") {
                outcomes[idx] = Some(outcome);
            }
        }
    });

    let reports: Vec<CandidateReport> = candidates
        .pairs
        .iter()
        .zip(outcomes)
        .map(|(&pair, outcome)| CandidateReport {
            pair,
            outcome: outcome.expect("every candidate evaluated"),
        })
        .collect();

    let mut best: Option<(f64, RatePair, f64)> = None; // objective, pair, tau
    for r in &reports {
        if let CandidateOutcome::Feasible { tau, objective } = r.outcome {
            let better = match best {
                None => true,
                Some((best_obj, best_pair, _)) => {
                    if (objective - best_obj).abs() <= 1e-12 {
                        let (s_new, s_old) = (
                            r.pair.lambda1 + r.pair.lambda2,
                            best_pair.lambda1 + best_pair.lambda2,
                        );
                        s_new < s_old || (s_new == s_old && r.pair.lambda1 < best_pair.lambda1)
                    } else {
                        objective < best_obj
                    }
                }
            };
            if better {
                best = Some((objective, r.pair, tau));
            }
        }
    }

    match best {
        Some((objective, chosen, tau)) => Ok((
            Schedule {
                period1: rate_to_period(chosen.lambda1),
                period2: rate_to_period(chosen.lambda2),
                chosen,
                objective_value: objective,
                tau,
            },
            reports,
        )),
        None => Err(SchedulerError::AllExcluded(reports)),
    }
}

/// State of the iterative relinearizing scheduler: last reads per channel,
/// last relinearization, and the schedule in force.
#[derive(Debug, Clone)]
pub struct IterativeState {
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub k_lin: usize,
    pub a_lin: Option<DMatrix<f64>>,
    pub delta: f64,
    pub schedule: Option<Schedule>,
    /// Reports from the most recent recomputation.
    pub last_reports: Vec<CandidateReport>,
}

impl IterativeState {
    pub fn new(delta: f64) -> Result<Self, SchedulerError> {
        if !(delta > 0.0) {
            return Err(SchedulerError::BadDelta(delta));
        }
        Ok(Self {
            k1: None,
            k2: None,
            k_lin: 0,
            a_lin: None,
            delta,
            schedule: None,
            last_reports: Vec::new(),
        })
    }

    /// One scheduling decision: relinearize and re-optimize when the
    /// dynamics moved by at least delta (2-norm) and a measurement was
    /// taken since the last recomputation, then fire the periodic reads.
    pub fn step(
        &mut self,
        k: usize,
        x_hat: &DVector<f64>,
        model: &SystemModel,
        candidates: &CandidateSet,
    ) -> Result<(bool, bool), SchedulerError> {
        let a_k = model.jacobian(x_hat);
        let drift = self
            .a_lin
            .as_ref()
            .map(|a_lin| linalg::spectral_norm(&(&a_k - a_lin)))
            .unwrap_or(f64::INFINITY);
        let read_since_lin = match (self.k1, self.k2) {
            (None, None) => false,
            (a, b) => self.k_lin <= a.max(b).unwrap(),
        };
        if k == 0 || (drift >= self.delta && read_since_lin) {
            let (schedule, reports) =
                optimize_rates(Dynamics::Linear(&a_k), model, candidates)?;
            self.schedule = Some(schedule);
            self.last_reports = reports;
            self.k_lin = k;
            self.a_lin = Some(a_k);
        }
        let schedule = self.schedule.as_ref().expect("schedule set at k = 0");
        let due = |last: Option<usize>, period: Period| -> bool {
            match period {
                Period::Never => false,
                Period::Every(t) => last.map_or(true, |l| k - l >= t),
            }
        };
        let read1 = due(self.k1, schedule.period1);
        let read2 = due(self.k2, schedule.period2);
        if read1 {
            self.k1 = Some(k);
        }
        if read2 {
            self.k2 = Some(k);
        }
        Ok((read1, read2))
    }
}
