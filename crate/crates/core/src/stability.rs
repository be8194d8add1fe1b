//! Analysis operators and LMI-based certificates for the two-channel
//! filter: the expected-covariance map g, the gain-parameterized upper
//! bound phi, the linear operator L, boundedness feasibility (with
//! per-vertex conditions for polytopic Jacobian sets), bisection for
//! critical arrival rates, and semidefinite trace bounds.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg;
use crate::model::SystemModel;
use crate::sdp::{LmiBlock, Objective, SdpError, SdpProblem, SdpStatus, VarId, VarKind};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("arrival rate {0} outside [0, 1]")]
    BadRate(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular inner block in {block} (condition {cond:.3e})")]
    SingularBlock { block: &'static str, cond: f64 },
    #[error("sdp: {0}")]
    Sdp(#[from] SdpError),
    #[error("solver failure in {what}: {diagnostics}")]
    SolverFailure { what: String, diagnostics: String },
    #[error("vertex screening did not settle after {rounds} rounds")]
    ScreeningDiverged { rounds: usize },
}

/// Bernoulli arrival probabilities for the two channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePair {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl RatePair {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, StabilityError> {
        for l in [lambda1, lambda2] {
            if !(0.0..=1.0).contains(&l) || !l.is_finite() {
                return Err(StabilityError::BadRate(l));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }

    /// Branch probabilities (both, ch1 only, ch2 only, none).
    pub fn branch_weights(&self) -> [f64; 4] {
        let (l1, l2) = (self.lambda1, self.lambda2);
        [
            l1 * l2,
            l1 * (1.0 - l2),
            (1.0 - l1) * l2,
            (1.0 - l1) * (1.0 - l2),
        ]
    }
}

/// Stacked, channel-1 and channel-2 gains.
#[derive(Debug, Clone)]
pub struct GainTriple {
    pub k: DMatrix<f64>,
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
}

/// The family of linearized dynamics under analysis.
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    /// A single constant state matrix (exact conditions).
    Linear(&'a DMatrix<f64>),
    /// Vertex matrices of a polytope containing every A_k (shared-Y
    /// per-vertex conditions).
    Polytopic(&'a [DMatrix<f64>]),
}

impl<'a> Dynamics<'a> {
    pub fn vertices(&self) -> &'a [DMatrix<f64>] {
        match self {
            Dynamics::Linear(a) => std::slice::from_ref(*a),
            Dynamics::Polytopic(v) => v,
        }
    }
    pub fn is_polytopic(&self) -> bool {
        matches!(self, Dynamics::Polytopic(_))
    }
}

/// Y together with the per-vertex Z blocks proving LMI feasibility.
#[derive(Debug, Clone)]
pub struct FeasibilityCertificate {
    pub y: DMatrix<f64>,
    pub z: Vec<DMatrix<f64>>,
    pub z1: Vec<DMatrix<f64>>,
    pub z2: Vec<DMatrix<f64>>,
    /// Smallest eigenvalue achieved across the verified conditions.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub enum BoundednessResult {
    Feasible(Box<FeasibilityCertificate>),
    Infeasible,
}

impl BoundednessResult {
    pub fn is_feasible(&self) -> bool {
        matches!(self, BoundednessResult::Feasible(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceBoundStatus {
    Feasible,
    Infeasible,
    Unbounded,
}

/// Worst-case asymptotic covariance certificate: V and tau = Trace(V).
#[derive(Debug, Clone)]
pub struct TraceBoundResult {
    pub status: TraceBoundStatus,
    pub v: Option<DMatrix<f64>>,
    pub tau: Option<f64>,
}

fn spd_solve_named(
    s: &DMatrix<f64>,
    b: &DMatrix<f64>,
    block: &'static str,
) -> Result<DMatrix<f64>, StabilityError> {
    let cond = linalg::spd_condition(s);
    if !cond.is_finite() || cond > crate::filter::INNOVATION_COND_LIMIT {
        return Err(StabilityError::SingularBlock { block, cond });
    }
    linalg::spd_solve(s, b).ok_or(StabilityError::SingularBlock { block, cond })
}

fn check_state_dims(a_k: &DMatrix<f64>, model: &SystemModel, x: &DMatrix<f64>) -> Result<(), StabilityError> {
    let n = model.n_x();
    if a_k.nrows() != n || a_k.ncols() != n || x.nrows() != n || x.ncols() != n {
        return Err(StabilityError::Dimension(format!(
            "A_k and X must be {n}x{n}"
        )));
    }
    Ok(())
}

/// Expected one-step covariance map under random arrivals.
pub fn g_operator(
    a_k: &DMatrix<f64>,
    model: &SystemModel,
    rates: RatePair,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>, StabilityError> {
    check_state_dims(a_k, model, x)?;
    let [w_both, w1, w2, _] = rates.branch_weights();
    let mut inner = x.clone();
    if w_both > 0.0 {
        let s = linalg::symmetrize(&(linalg::sandwich(model.c(), x) + model.r()));
        let cx = model.c() * x;
        let sol = spd_solve_named(&s, &cx, "stacked (C, R)")?;
        inner -= cx.transpose() * sol * w_both;
    }
    if w1 > 0.0 {
        let s = linalg::symmetrize(&(linalg::sandwich(model.c1(), x) + model.r11()));
        let cx = model.c1() * x;
        let sol = spd_solve_named(&s, &cx, "channel 1 (C1, R11)")?;
        inner -= cx.transpose() * sol * w1;
    }
    if w2 > 0.0 {
        let s = linalg::symmetrize(&(linalg::sandwich(model.c2(), x) + model.r22()));
        let cx = model.c2() * x;
        let sol = spd_solve_named(&s, &cx, "channel 2 (C2, R22)")?;
        inner -= cx.transpose() * sol * w2;
    }
    Ok(linalg::symmetrize(
        &(linalg::sandwich(a_k, &inner) + model.q()),
    ))
}

/// Closed-form gains minimizing phi at X.
pub fn optimal_gains(
    a_k: &DMatrix<f64>,
    model: &SystemModel,
    x: &DMatrix<f64>,
) -> Result<GainTriple, StabilityError> {
    check_state_dims(a_k, model, x)?;
    let gain = |c: &DMatrix<f64>, r: &DMatrix<f64>, block: &'static str| {
        let s = linalg::symmetrize(&(linalg::sandwich(c, x) + r));
        let cx_at = c * x * a_k.transpose();
        spd_solve_named(&s, &cx_at, block).map(|sol| -sol.transpose())
    };
    Ok(GainTriple {
        k: gain(model.c(), model.r(), "stacked (C, R)")?,
        k1: gain(model.c1(), &model.r11(), "channel 1 (C1, R11)")?,
        k2: gain(model.c2(), &model.r22(), "channel 2 (C2, R22)")?,
    })
}

/// Gain-parameterized upper-bounding map.
pub fn phi_operator(
    a_k: &DMatrix<f64>,
    model: &SystemModel,
    rates: RatePair,
    gains: &GainTriple,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>, StabilityError> {
    check_state_dims(a_k, model, x)?;
    let [w_both, w1, w2, w0] = rates.branch_weights();
    let q = model.q();
    let mut out = (linalg::sandwich(a_k, x) + q) * w0;
    let f = a_k + &gains.k * model.c();
    out += (linalg::sandwich(&f, x) + q + linalg::sandwich(&gains.k, model.r())) * w_both;
    let f1 = a_k + &gains.k1 * model.c1();
    out += (linalg::sandwich(&f1, x) + q + linalg::sandwich(&gains.k1, &model.r11())) * w1;
    let f2 = a_k + &gains.k2 * model.c2();
    out += (linalg::sandwich(&f2, x) + q + linalg::sandwich(&gains.k2, &model.r22())) * w2;
    Ok(linalg::symmetrize(&out))
}

/// The linear (in Y) part of phi.
pub fn l_operator(
    a_k: &DMatrix<f64>,
    model: &SystemModel,
    rates: RatePair,
    gains: &GainTriple,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>, StabilityError> {
    check_state_dims(a_k, model, y)?;
    let [w_both, w1, w2, w0] = rates.branch_weights();
    let mut out = linalg::sandwich(a_k, y) * w0;
    let f = a_k + &gains.k * model.c();
    out += linalg::sandwich(&f, y) * w_both;
    let f1 = a_k + &gains.k1 * model.c1();
    out += linalg::sandwich(&f1, y) * w1;
    let f2 = a_k + &gains.k2 * model.c2();
    out += linalg::sandwich(&f2, y) * w2;
    Ok(linalg::symmetrize(&out))
}

/// Strictness margin for the LMIs.
fn epsilon_for(vertices: &[DMatrix<f64>]) -> f64 {
    let a_norm = vertices
        .iter()
        .map(linalg::spectral_norm)
        .fold(0.0f64, f64::max);
    1e-8 * (1.0 + a_norm)
}

const Y_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiBranch {
    Both,
    Ch1Only,
    Ch2Only,
    OpenLoop,
}

/// Handles into an assembled boundedness LMI.
pub struct PsiStructure {
    pub problem: SdpProblem,
    pub y: VarId,
    /// Per vertex: (branch, sqrt-coefficient, Z variable when the branch
    /// carries one).
    pub branches: Vec<Vec<(PsiBranch, f64, Option<VarId>)>>,
    /// Margin variable when assembled for feasibility deciding.
    pub margin: Option<VarId>,
}

/// Assemble the boundedness LMI(s): one symmetric block per vertex with a
/// shared Y and per-vertex Z blocks, plus eps*I <= Y <= I. With
/// `open_loop_block` the no-measurement branch gets its own block row
/// (sqrt((1-l1)(1-l2)) * Y A, no Z); without it the printed four-block
/// form is produced for comparison.
pub fn assemble_psi(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    rates: RatePair,
    open_loop_block: bool,
) -> PsiStructure {
    assemble_psi_inner(dynamics, model, rates, open_loop_block, false)
}

fn assemble_psi_inner(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    rates: RatePair,
    open_loop_block: bool,
    with_margin: bool,
) -> PsiStructure {
    let n = model.n_x();
    let vertices = dynamics.vertices();
    let eps = epsilon_for(vertices);
    let [w_both, w1, w2, w0] = rates.branch_weights();

    let mut problem = SdpProblem::new();
    let y = problem.add_var("Y", VarKind::Symmetric(n));
    let margin = with_margin.then(|| problem.add_var("t", VarKind::Symmetric(1)));

    let mut branches_all = Vec::with_capacity(vertices.len());
    for (j, a_j) in vertices.iter().enumerate() {
        let mut branches: Vec<(PsiBranch, f64, Option<VarId>)> = Vec::new();
        if w_both > 0.0 {
            let z = problem.add_var(format!("Z[{j}]"), VarKind::Rectangular(n, model.n_y()));
            branches.push((PsiBranch::Both, w_both.sqrt(), Some(z)));
        }
        if w1 > 0.0 {
            let z1 = problem.add_var(format!("Z1[{j}]"), VarKind::Rectangular(n, model.n_y1()));
            branches.push((PsiBranch::Ch1Only, w1.sqrt(), Some(z1)));
        }
        if w2 > 0.0 {
            let z2 = problem.add_var(format!("Z2[{j}]"), VarKind::Rectangular(n, model.n_y2()));
            branches.push((PsiBranch::Ch2Only, w2.sqrt(), Some(z2)));
        }
        if open_loop_block && w0 > 0.0 {
            branches.push((PsiBranch::OpenLoop, w0.sqrt(), None));
        }

        let dim = n * (1 + branches.len());
        let mut block = LmiBlock::new(dim, format!("Psi[{j}]")).diag_var(y, 1.0, 0, n);
        if !with_margin {
            block = block.constant(0, 0, &(-DMatrix::identity(dim, dim) * eps));
        }
        let eye = DMatrix::identity(n, n);
        for (b, (branch, coeff, z)) in branches.iter().enumerate() {
            let off = n * (b + 1);
            block = block.diag_var(y, 1.0, off, n);
            block = block.pair_term(y, *coeff, 0, off, eye.clone(), a_j.clone());
            if let Some(z) = z {
                let c = match branch {
                    PsiBranch::Both => model.c(),
                    PsiBranch::Ch1Only => model.c1(),
                    PsiBranch::Ch2Only => model.c2(),
                    PsiBranch::OpenLoop => unreachable!(),
                };
                block = block.pair_term(*z, *coeff, 0, off, eye.clone(), c.clone());
            }
        }
        if let Some(t) = margin {
            // the margin only needs the first diagonal block: the others
            // equal Y, which the floor constraint already keeps definite
            block = block.scalar_times_identity(t, -1.0, 0, n);
        }
        problem.add_constraint(block);
        branches_all.push(branches);
    }

    // eps*I <= Y <= I
    problem.add_constraint(
        LmiBlock::new(n, "Y floor")
            .diag_var(y, 1.0, 0, n)
            .constant(0, 0, &(-DMatrix::identity(n, n) * Y_FLOOR)),
    );
    problem.add_constraint(
        LmiBlock::new(n, "Y cap")
            .constant(0, 0, &DMatrix::identity(n, n))
            .diag_var(y, -1.0, 0, n),
    );

    if let Some(t) = margin {
        problem.set_objective(Objective::MaximizeTrace(t));
    }

    PsiStructure {
        problem,
        y,
        branches: branches_all,
        margin,
    }
}

/// Gains minimizing the noise-free closed-loop quadratic at X; singular
/// C X C^T is handled by an eigenvalue pseudo-inverse.
fn screening_gain(a: &DMatrix<f64>, c: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let s = linalg::symmetrize(&linalg::sandwich(c, x));
    let cxa = c * x * a.transpose();
    if let Some(sol) = linalg::spd_solve(&s, &cxa) {
        return -sol.transpose();
    }
    let dim = s.nrows();
    let eig = s.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let cut = lmax * 1e-12 + f64::MIN_POSITIVE;
    let mut inv = DMatrix::zeros(dim, dim);
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut {
            let v = eig.eigenvectors.column(idx);
            inv += v * v.transpose() / lam;
        }
    }
    -(a * x * c.transpose() * inv)
}

/// X minus the gain-minimized noise-free branch map at vertex `a`;
/// nonnegative eigenvalues certify the vertex under the shared X = Y^{-1}.
fn screening_residual(
    a: &DMatrix<f64>,
    model: &SystemModel,
    rates: RatePair,
    x: &DMatrix<f64>,
) -> (DMatrix<f64>, GainTriple) {
    let [w_both, w1, w2, w0] = rates.branch_weights();
    let n = model.n_x();
    let mut acc = DMatrix::zeros(n, n);
    let k = screening_gain(a, model.c(), x);
    let k1 = screening_gain(a, model.c1(), x);
    let k2 = screening_gain(a, model.c2(), x);
    if w0 > 0.0 {
        acc += linalg::sandwich(a, x) * w0;
    }
    if w_both > 0.0 {
        let f = a + &k * model.c();
        acc += linalg::sandwich(&f, x) * w_both;
    }
    if w1 > 0.0 {
        let f = a + &k1 * model.c1();
        acc += linalg::sandwich(&f, x) * w1;
    }
    if w2 > 0.0 {
        let f = a + &k2 * model.c2();
        acc += linalg::sandwich(&f, x) * w2;
    }
    (linalg::symmetrize(&(x - acc)), GainTriple { k, k1, k2 })
}

const PSI_DIRECT_LIMIT: usize = 8;
const SCREEN_ROUNDS: usize = 60;
const SCREEN_ADD: usize = 16;
const SCREEN_SEEDS: usize = 16;
/// Vertex-generation work budget: candidates whose binding structure
/// exceeds this are reported as solver failures rather than ground out.
const MAX_ACTIVE: usize = 48;
const SDP_TOL: f64 = 1e-8;

/// Active vertex sets carried between related solves (viz. candidate
/// grids over one polytope): the binding vertices barely move with the
/// rates, so reusing them collapses the screening loop to one round.
#[derive(Debug, Default, Clone)]
pub struct ActiveSetCache {
    psi: Vec<usize>,
    gamma: Vec<usize>,
}

/// Deterministic spread seed: start from the extreme-signature vertices
/// and grow by farthest-point selection.
fn seed_active(vertices: &[DMatrix<f64>], want: usize) -> Vec<usize> {
    let mut active = vec![0usize];
    if vertices.len() > 1 {
        active.push(vertices.len() - 1);
    }
    while active.len() < want.min(vertices.len()) {
        let far = farthest_from(vertices, &active);
        let before = active.len();
        for j in far {
            if active.len() < want && !active.contains(&j) {
                active.push(j);
            }
        }
        if active.len() == before {
            break;
        }
    }
    active
}

/// Decide boundedness of the covariance iteration at the given rates via
/// LMI feasibility. Polytopes beyond a few vertices are handled by outer
/// vertex generation: solve on an active set, screen every vertex with the
/// closed-form residual, and grow the set until all vertices certify.
pub fn check_boundedness(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    rates: RatePair,
) -> Result<BoundednessResult, StabilityError> {
    check_boundedness_with(dynamics, model, rates, true)
}

/// Same decision with the open-loop block optional (paper-printed form
/// for comparison only).
pub fn check_boundedness_with(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    rates: RatePair,
    open_loop_block: bool,
) -> Result<BoundednessResult, StabilityError> {
    let mut cache = ActiveSetCache::default();
    check_boundedness_cached(dynamics, model, rates, open_loop_block, &mut cache)
}

pub fn check_boundedness_cached(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    rates: RatePair,
    open_loop_block: bool,
    cache: &mut ActiveSetCache,
) -> Result<BoundednessResult, StabilityError> {
    let vertices = dynamics.vertices();
    let eps = epsilon_for(vertices);

    if vertices.len() <= PSI_DIRECT_LIMIT {
        let structure = assemble_psi_inner(dynamics, model, rates, open_loop_block, true);
        return solve_margin(&structure, model, rates, vertices, eps, open_loop_block);
    }

    // outer vertex generation (always with the open-loop block; the
    // screening residual is its exact Schur complement)
    let mut active: Vec<usize> = cache
        .psi
        .iter()
        .copied()
        .filter(|&j| j < vertices.len())
        .collect();
    if active.is_empty() {
        active = seed_active(vertices, SCREEN_SEEDS);
    }

    let debug = std::env::var("KF2C_DEBUG_SCREEN").is_ok();
    for round in 0..SCREEN_ROUNDS {
        let active_mats: Vec<DMatrix<f64>> = active.iter().map(|&j| vertices[j].clone()).collect();
        let t_solve = std::time::Instant::now();
        let structure =
            assemble_psi_inner(Dynamics::Polytopic(&active_mats), model, rates, true, true);
        let solved = solve_margin(&structure, model, rates, &active_mats, eps, true)?;
        if debug {
            eprintln!("  psi round {round}: n_act={} solve={:?}", active.len(), t_solve.elapsed());
        }
        match solved {
            BoundednessResult::Infeasible => return Ok(BoundednessResult::Infeasible),
            BoundednessResult::Feasible(cert) => {
                let x = cert
                    .y
                    .clone()
                    .cholesky()
                    .map(|c| c.inverse())
                    .ok_or_else(|| StabilityError::SolverFailure {
                        what: "certificate inversion".into(),
                        diagnostics: "Y not positive definite".into(),
                    })?;
                let scale = linalg::max_abs(&x).max(1.0);
                let mut scores: Vec<(usize, f64)> = Vec::new();
                for (j, a_j) in vertices.iter().enumerate() {
                    let (res, _) = screening_residual(a_j, model, rates, &x);
                    let m = linalg::min_eig(&res);
                    if m < -1e-10 * scale {
                        scores.push((j, m));
                    }
                }
                if debug {
                    let worst = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
                    eprintln!(
                        "  psi round {round}: violators={} worst={worst:.3e}",
                        scores.len()
                    );
                }
                if scores.is_empty() {
                    cache.psi = active.clone();
                    return Ok(BoundednessResult::Feasible(Box::new(
                        certificate_from_x(&cert.y, &x, vertices, model, rates),
                    )));
                }
                scores.sort_by(|a, b| a.1.total_cmp(&b.1));
                for (j, _) in scores.into_iter().take(SCREEN_ADD) {
                    if !active.contains(&j) {
                        active.push(j);
                    }
                }
                if active.len() > MAX_ACTIVE {
                    return Err(StabilityError::ScreeningDiverged {
                        rounds: active.len(),
                    });
                }
            }
        }
    }
    Err(StabilityError::ScreeningDiverged {
        rounds: SCREEN_ROUNDS,
    })
}

fn solve_margin(
    structure: &PsiStructure,
    model: &SystemModel,
    rates: RatePair,
    vertices: &[DMatrix<f64>],
    eps: f64,
    open_loop_block: bool,
) -> Result<BoundednessResult, StabilityError> {
    let sol = structure.problem.solve(SDP_TOL)?;
    match sol.status {
        SdpStatus::Optimal | SdpStatus::Feasible => {}
        SdpStatus::Infeasible => return Ok(BoundednessResult::Infeasible),
        other => {
            return Err(StabilityError::SolverFailure {
                what: format!("boundedness LMI ({other})"),
                diagnostics: sol.diagnostics,
            })
        }
    }
    let t = sol.objective_value.unwrap_or(f64::NEG_INFINITY);
    if t < eps {
        return Ok(BoundednessResult::Infeasible);
    }
    let y = sol.var(structure.y).clone();

    // rebuild Z blocks from the solution for the certificate
    let n = model.n_x();
    let mut z = Vec::with_capacity(vertices.len());
    let mut z1 = Vec::with_capacity(vertices.len());
    let mut z2 = Vec::with_capacity(vertices.len());
    for branches in &structure.branches {
        let mut zj = DMatrix::zeros(n, model.n_y());
        let mut z1j = DMatrix::zeros(n, model.n_y1());
        let mut z2j = DMatrix::zeros(n, model.n_y2());
        for (branch, _, zvar) in branches {
            if let Some(zvar) = zvar {
                match branch {
                    PsiBranch::Both => zj = sol.var(*zvar).clone(),
                    PsiBranch::Ch1Only => z1j = sol.var(*zvar).clone(),
                    PsiBranch::Ch2Only => z2j = sol.var(*zvar).clone(),
                    PsiBranch::OpenLoop => {}
                }
            }
        }
        z.push(zj);
        z1.push(z1j);
        z2.push(z2j);
    }

    // solver-independent re-verification of the margin via the plain
    // assembly (assignment order matches declaration order: Y, then the
    // per-vertex Z blocks of branches with nonzero weight)
    let margin = {
        let dynamics = if vertices.len() == 1 {
            Dynamics::Linear(&vertices[0])
        } else {
            Dynamics::Polytopic(vertices)
        };
        let plain = assemble_psi(dynamics, model, rates, open_loop_block);
        let mut assignment = vec![y.clone()];
        for (j, branches) in plain.branches.iter().enumerate() {
            for (branch, _, zvar) in branches {
                if zvar.is_some() {
                    assignment.push(match branch {
                        PsiBranch::Both => z[j].clone(),
                        PsiBranch::Ch1Only => z1[j].clone(),
                        PsiBranch::Ch2Only => z2[j].clone(),
                        PsiBranch::OpenLoop => unreachable!(),
                    });
                }
            }
        }
        let report = plain.problem.verify(&assignment)?;
        // the plain assembly subtracts eps, so shift back to raw Psi margins
        report
            .margins
            .iter()
            .filter(|m| m.label.starts_with("Psi"))
            .map(|m| m.min_eigenvalue + eps)
            .fold(f64::INFINITY, f64::min)
    };
    if margin < -1e-9 * (1.0 + linalg::max_abs(&y)) {
        return Err(StabilityError::SolverFailure {
            what: "boundedness LMI".into(),
            diagnostics: format!("claimed margin {t:.3e} failed re-verification ({margin:.3e})"),
        });
    }

    Ok(BoundednessResult::Feasible(Box::new(FeasibilityCertificate {
        y,
        z,
        z1,
        z2,
        margin,
    })))
}

/// Certificate with closed-form per-vertex gains from the screened X.
fn certificate_from_x(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    vertices: &[DMatrix<f64>],
    model: &SystemModel,
    rates: RatePair,
) -> FeasibilityCertificate {
    let mut z = Vec::with_capacity(vertices.len());
    let mut z1 = Vec::with_capacity(vertices.len());
    let mut z2 = Vec::with_capacity(vertices.len());
    let mut margin = f64::INFINITY;
    for a_j in vertices {
        let (res, gains) = screening_residual(a_j, model, rates, x);
        margin = margin.min(linalg::min_eig(&res));
        z.push(y * &gains.k);
        z1.push(y * &gains.k1);
        z2.push(y * &gains.k2);
    }
    FeasibilityCertificate {
        y: y.clone(),
        z,
        z1,
        z2,
        margin,
    }
}

/// Which channel's rate is held fixed during bisection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedChannel {
    One,
    Two,
}

/// Smallest free rate (within tol) keeping the covariance iteration
/// certified bounded, holding the other channel's rate fixed. Returns 0
/// when feasible at zero and 1 + tol when infeasible even at one.
pub fn critical_lambda(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    fixed: FixedChannel,
    fixed_value: f64,
    tol: f64,
) -> Result<f64, StabilityError> {
    if tol <= 0.0 {
        return Err(StabilityError::BadTolerance(tol));
    }
    if !(0.0..=1.0).contains(&fixed_value) {
        return Err(StabilityError::BadRate(fixed_value));
    }
    let rates_at = |free: f64| match fixed {
        FixedChannel::One => RatePair::new(fixed_value, free),
        FixedChannel::Two => RatePair::new(free, fixed_value),
    };
    let feasible = |free: f64| -> Result<bool, StabilityError> {
        Ok(check_boundedness(dynamics, model, rates_at(free)?)?.is_feasible())
    };
    if feasible(0.0)? {
        return Ok(0.0);
    }
    if !feasible(1.0)? {
        return Ok(1.0 + tol);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

const GAMMA_DIRECT_LIMIT: usize = 24;

/// Worst-case asymptotic covariance bound: maximize Trace(V) subject to
/// the per-vertex Gamma conditions. The linear case uses the exact
/// quadratic blocks; polytopes use the tangent linearization at the
/// polytope center (affine in the vertex, hence vertex-checkable), which
/// reduces to the exact form for a single vertex.
pub fn trace_bound(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    rates: RatePair,
) -> Result<TraceBoundResult, StabilityError> {
    let mut cache = ActiveSetCache::default();
    trace_bound_cached(dynamics, model, rates, &mut cache)
}

pub fn trace_bound_cached(
    dynamics: Dynamics<'_>,
    model: &SystemModel,
    rates: RatePair,
    cache: &mut ActiveSetCache,
) -> Result<TraceBoundResult, StabilityError> {
    let vertices = dynamics.vertices();
    let eps = epsilon_for(vertices);
    let cap = 1e8 * (1.0 + model.q().trace() + model.r().trace());

    let n = vertices[0].nrows();
    let mut center = DMatrix::zeros(n, n);
    for v in vertices {
        center += v;
    }
    center /= vertices.len() as f64;

    let finish = |solved: GammaSolve| -> TraceBoundResult {
        match solved {
            GammaSolve::Infeasible => TraceBoundResult {
                status: TraceBoundStatus::Infeasible,
                v: None,
                tau: None,
            },
            GammaSolve::UnboundedRay => TraceBoundResult {
                status: TraceBoundStatus::Unbounded,
                v: None,
                tau: None,
            },
            GammaSolve::Solved { v, tau } => TraceBoundResult {
                status: TraceBoundStatus::Feasible,
                v: Some(v),
                tau: Some(tau),
            },
        }
    };

    if vertices.len() <= GAMMA_DIRECT_LIMIT {
        let idx: Vec<usize> = (0..vertices.len()).collect();
        let solved = solve_gamma(
            &idx,
            vertices,
            &center,
            model,
            rates,
            eps,
            cap,
            dynamics.is_polytopic(),
        )?;
        return Ok(finish(solved));
    }

    let mut active: Vec<usize> = cache
        .gamma
        .iter()
        .copied()
        .filter(|&j| j < vertices.len())
        .collect();
    if active.is_empty() {
        active = seed_active(vertices, SCREEN_SEEDS);
    }
    let debug = std::env::var("KF2C_DEBUG_SCREEN").is_ok();
    for round in 0..SCREEN_ROUNDS {
        let t_solve = std::time::Instant::now();
        let solved = solve_gamma(&active, vertices, &center, model, rates, eps, cap, true)?;
        if debug {
            eprintln!("  gamma round {round}: n_act={} solve={:?}", active.len(), t_solve.elapsed());
        }
        match &solved {
            // infeasible on a subset implies infeasible on the full set
            GammaSolve::Infeasible => return Ok(finish(solved)),
            // a ray may be blocked by inactive vertices: widen the active
            // set with far-apart vertices before concluding
            GammaSolve::UnboundedRay => {
                if active.len() >= vertices.len().min(64) {
                    return Ok(finish(solved));
                }
                let next = farthest_from(vertices, &active);
                for j in next {
                    if !active.contains(&j) {
                        active.push(j);
                    }
                }
            }
            GammaSolve::Solved { v, .. } => {
                // violations below the solver's own accuracy are noise;
                // chasing them only inflates the active set
                let tol = 1e-5 * (1.0 + linalg::max_abs(v));
                let mut scores: Vec<(usize, f64)> = Vec::new();
                for (j, a_j) in vertices.iter().enumerate() {
                    let m = gamma_screening_margin(a_j, &center, v, model, rates)?;
                    if m < -tol {
                        scores.push((j, m));
                    }
                }
                if debug {
                    let worst = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
                    eprintln!("  gamma round {round}: violators={} worst={worst:.3e}", scores.len());
                }
                if scores.is_empty() {
                    cache.gamma = active.clone();
                    return Ok(finish(solved));
                }
                scores.sort_by(|a, b| a.1.total_cmp(&b.1));
                for (j, _) in scores.into_iter().take(SCREEN_ADD) {
                    if !active.contains(&j) {
                        active.push(j);
                    }
                }
                if active.len() > MAX_ACTIVE {
                    return Err(StabilityError::ScreeningDiverged {
                        rounds: active.len(),
                    });
                }
            }
        }
    }
    Err(StabilityError::ScreeningDiverged {
        rounds: SCREEN_ROUNDS,
    })
}

/// Indices of a few vertices farthest (Frobenius) from the active set.
fn farthest_from(vertices: &[DMatrix<f64>], active: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = (0..vertices.len())
        .filter(|j| !active.contains(j))
        .map(|j| {
            let d = active
                .iter()
                .map(|&a| (&vertices[j] - &vertices[a]).norm())
                .fold(f64::INFINITY, f64::min);
            (j, d)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.into_iter().take(SCREEN_ADD).map(|(j, _)| j).collect()
}

enum GammaSolve {
    Solved { v: DMatrix<f64>, tau: f64 },
    Infeasible,
    UnboundedRay,
}

#[allow(clippy::too_many_arguments)]
fn solve_gamma(
    active: &[usize],
    vertices: &[DMatrix<f64>],
    center: &DMatrix<f64>,
    model: &SystemModel,
    rates: RatePair,
    eps: f64,
    cap: f64,
    polytopic: bool,
) -> Result<GammaSolve, StabilityError> {
    let n = model.n_x();
    let [w_both, w1, w2, _] = rates.branch_weights();
    let mut problem = SdpProblem::new();
    let v = problem.add_var("V", VarKind::Symmetric(n));

    for &j in active {
        let a_j = &vertices[j];
        // branch blocks with nonzero weight
        let mut blocks: Vec<(f64, &DMatrix<f64>, DMatrix<f64>)> = Vec::new();
        if w_both > 0.0 {
            blocks.push((w_both.sqrt(), model.c(), model.r().clone()));
        }
        if w1 > 0.0 {
            blocks.push((w1.sqrt(), model.c1(), model.r11()));
        }
        if w2 > 0.0 {
            blocks.push((w2.sqrt(), model.c2(), model.r22()));
        }
        let schur_rows: usize = blocks.iter().map(|(_, c, _)| c.nrows()).sum();
        let dim = n + schur_rows + if polytopic { n } else { 0 };

        let mut block = LmiBlock::new(dim, format!("Gamma[{j}]"))
            .constant(0, 0, model.q())
            .diag_var(v, -1.0, 0, n);
        if polytopic {
            // tangent of A V A^T at the polytope center
            block = block.pair_term(v, 1.0, 0, 0, a_j.clone() * 0.5, center.transpose());
            block = block.pair_term(v, 1.0, 0, 0, center.clone() * 0.5, a_j.transpose());
            let off = n + schur_rows;
            block = block.pair_term(v, 1.0, 0, off, center.clone(), DMatrix::identity(n, n));
            block = block.diag_var(v, 1.0, off, n);
        } else {
            block = block.sym_term(v, 1.0, 0, a_j.clone(), a_j.transpose());
        }
        let mut off = n;
        for (coeff, c, r) in &blocks {
            block = block.pair_term(v, *coeff, 0, off, a_j.clone(), c.transpose());
            block = block.sym_term(v, 1.0, off, (*c).clone(), c.transpose());
            block = block.constant(off, off, r);
            off += c.nrows();
        }
        problem.add_constraint(block);
    }

    problem.add_constraint(
        LmiBlock::new(n, "V floor")
            .diag_var(v, 1.0, 0, n)
            .constant(0, 0, &(-DMatrix::identity(n, n) * eps)),
    );
    problem.set_objective(Objective::MaximizeTrace(v));

    let sol = problem.solve(SDP_TOL)?;
    match sol.status {
        SdpStatus::Optimal | SdpStatus::Feasible => {
            let tau = sol.objective_value.unwrap_or(f64::NAN);
            if !tau.is_finite() || tau >= 0.5 * cap {
                return Ok(GammaSolve::UnboundedRay);
            }
            Ok(GammaSolve::Solved {
                v: sol.var(v).clone(),
                tau,
            })
        }
        SdpStatus::Unbounded => Ok(GammaSolve::UnboundedRay),
        SdpStatus::Infeasible => Ok(GammaSolve::Infeasible),
        other => {
            // a stalled climb with an already-huge objective is a ray in
            // everything but the final certificate
            if sol.objective_value.unwrap_or(0.0) >= 0.5 * cap {
                return Ok(GammaSolve::UnboundedRay);
            }
            Err(StabilityError::SolverFailure {
                what: format!("trace bound ({other})"),
                diagnostics: sol.diagnostics,
            })
        }
    }
}

/// Schur residual of the tangent Gamma condition at one vertex.
fn gamma_screening_margin(
    a_j: &DMatrix<f64>,
    center: &DMatrix<f64>,
    v: &DMatrix<f64>,
    model: &SystemModel,
    rates: RatePair,
) -> Result<f64, StabilityError> {
    let [w_both, w1, w2, _] = rates.branch_weights();
    let mut res = a_j * v * center.transpose() + center * v * a_j.transpose()
        - center * v * center.transpose()
        + model.q()
        - v;
    let mut correct = |w: f64,
                       c: &DMatrix<f64>,
                       r: &DMatrix<f64>,
                       block: &'static str|
     -> Result<(), StabilityError> {
        if w > 0.0 {
            let s = linalg::symmetrize(&(linalg::sandwich(c, v) + r));
            let cva = c * v * a_j.transpose();
            let sol = spd_solve_named(&s, &cva, block)?;
            res -= cva.transpose() * sol * w;
        }
        Ok(())
    };
    correct(w_both, model.c(), model.r(), "stacked (C, R)")?;
    correct(w1, model.c1(), &model.r11(), "channel 1 (C1, R11)")?;
    correct(w2, model.c2(), &model.r22(), "channel 2 (C2, R22)")?;
    Ok(linalg::min_eig(&linalg::symmetrize(&res)))
}

/// Assignment vector (declaration order) for re-verifying a certificate
/// against an assembled boundedness LMI.
pub fn certificate_assignment(
    structure: &PsiStructure,
    cert: &FeasibilityCertificate,
) -> Vec<DMatrix<f64>> {
    let mut assignment = vec![cert.y.clone()];
    for (j, branches) in structure.branches.iter().enumerate() {
        for (branch, _, zvar) in branches {
            if zvar.is_some() {
                assignment.push(match branch {
                    PsiBranch::Both => cert.z[j].clone(),
                    PsiBranch::Ch1Only => cert.z1[j].clone(),
                    PsiBranch::Ch2Only => cert.z2[j].clone(),
                    PsiBranch::OpenLoop => unreachable!(),
                });
            }
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{covariance_recursion, ArrivalPair};
    use crate::model::{DynamicsKind, SystemModel};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_psd(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * 1e-3
    }

    /// Scalar model with both channels reading the state directly.
    fn scalar_model(a: f64) -> SystemModel {
        SystemModel::new(
            DynamicsKind::Linear {
                a: DMatrix::from_element(1, 1, a),
            },
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::identity(2, 2),
            1.0,
            vec![(-1.0, 1.0)],
        )
        .unwrap()
    }

    fn random_model(rng: &mut StdRng, n: usize, stable: bool) -> SystemModel {
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let rho = crate::linalg::spectral_norm(&a).max(1e-6);
        let target = if stable {
            rng.random_range(0.3..0.9)
        } else {
            rng.random_range(1.1..2.0)
        };
        a *= target / rho;
        let c1 = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
        let c2 = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
        let q = random_psd(rng, n);
        let r = random_psd(rng, 2) + DMatrix::identity(2, 2) * 0.1;
        SystemModel::new(
            DynamicsKind::Linear { a },
            DMatrix::zeros(n, 0),
            c1,
            c2,
            q,
            r,
            1.0,
            vec![(-1.0, 1.0); n],
        )
        .unwrap()
    }

    fn model_a(model: &SystemModel) -> DMatrix<f64> {
        model.jacobian(&DVector::zeros(model.n_x()))
    }

    #[test]
    fn g_at_zero_rates_is_open_loop() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let mut rng = StdRng::seed_from_u64(1);
        let x = random_psd(&mut rng, 2);
        let g = g_operator(&a, &m, RatePair::new(0.0, 0.0).unwrap(), &x).unwrap();
        let expect = crate::linalg::sandwich(&a, &x) + m.q();
        assert_relative_eq!((g - expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn g_equals_branch_enumeration() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..100 {
            let x = random_psd(&mut rng, 2);
            let rates =
                RatePair::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)).unwrap();
            let g = g_operator(&a, &m, rates, &x).unwrap();
            let [wb, w1, w2, w0] = rates.branch_weights();
            let pats = [
                (ArrivalPair::BOTH, wb),
                (ArrivalPair::new(true, false), w1),
                (ArrivalPair::new(false, true), w2),
                (ArrivalPair::NONE, w0),
            ];
            let mut sum = DMatrix::zeros(2, 2);
            for (pat, w) in pats {
                if w > 0.0 {
                    sum += covariance_recursion(&m, &a, &x, pat).unwrap() * w;
                }
            }
            let scale = crate::linalg::max_abs(&g).max(1.0);
            assert!(
                crate::linalg::max_abs(&(g - sum)) <= 1e-10 * scale,
                "enumeration identity failed"
            );
        }
    }

    #[test]
    fn g_at_full_rates_is_stacked_riccati() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_psd(&mut rng, 2);
            let g = g_operator(&a, &m, RatePair::new(1.0, 1.0).unwrap(), &x).unwrap();
            // textbook Riccati step with stacked (C, R)
            let c = m.c();
            let s = c * &x * c.transpose() + m.r();
            let corr =
                &a * &x * c.transpose() * s.try_inverse().unwrap() * c * &x * a.transpose();
            let expect = crate::linalg::sandwich(&a, &x) + m.q() - corr;
            assert!(crate::linalg::max_abs(&(g - expect)) <= 1e-10);
        }
    }

    #[test]
    fn optimal_gains_vanish_at_zero_x() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let gains = optimal_gains(&a, &m, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(crate::linalg::max_abs(&gains.k), 0.0);
        assert_eq!(crate::linalg::max_abs(&gains.k1), 0.0);
        assert_eq!(crate::linalg::max_abs(&gains.k2), 0.0);
    }

    #[test]
    fn scalar_gain_closed_form() {
        let m = scalar_model(2.0);
        let a = DMatrix::from_element(1, 1, 2.0);
        let x = DMatrix::from_element(1, 1, 1.0);
        let gains = optimal_gains(&a, &m, &x).unwrap();
        // K1 = -a x c / (c x c + r) = -2 / 2 = -1
        assert_relative_eq!(gains.k1[(0, 0)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(gains.k2[(0, 0)], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_at_optimal_gains_equals_g() {
        let mut rng = StdRng::seed_from_u64(4);
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        for _ in 0..50 {
            let x = random_psd(&mut rng, 2);
            let rates =
                RatePair::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)).unwrap();
            let gains = optimal_gains(&a, &m, &x).unwrap();
            let phi = phi_operator(&a, &m, rates, &gains, &x).unwrap();
            let g = g_operator(&a, &m, rates, &x).unwrap();
            let scale = crate::linalg::max_abs(&g).max(1.0);
            assert!(crate::linalg::max_abs(&(phi - g)) <= 1e-10 * scale);
        }
    }

    #[test]
    fn phi_open_loop_ignores_gains() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let mut rng = StdRng::seed_from_u64(5);
        let x = random_psd(&mut rng, 2);
        let gains = GainTriple {
            k: DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)),
            k1: DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0)),
            k2: DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0)),
        };
        let phi = phi_operator(&a, &m, RatePair::new(0.0, 0.0).unwrap(), &gains, &x).unwrap();
        let expect = crate::linalg::sandwich(&a, &x) + m.q();
        assert_relative_eq!((phi - expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_is_minimized_by_optimal_gains() {
        let mut rng = StdRng::seed_from_u64(6);
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let x = random_psd(&mut rng, 2);
        let rates = RatePair::new(0.6, 0.3).unwrap();
        let gains = optimal_gains(&a, &m, &x).unwrap();
        let base = phi_operator(&a, &m, rates, &gains, &x).unwrap().trace();
        for _ in 0..200 {
            let perturbed = GainTriple {
                k: &gains.k + DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.5..0.5)),
                k1: &gains.k1 + DMatrix::from_fn(2, 1, |_, _| rng.random_range(-0.5..0.5)),
                k2: &gains.k2 + DMatrix::from_fn(2, 1, |_, _| rng.random_range(-0.5..0.5)),
            };
            let t = phi_operator(&a, &m, rates, &perturbed, &x).unwrap().trace();
            assert!(t >= base - 1e-10, "perturbed gains beat the optimum");
        }
    }

    #[test]
    fn l_operator_linear_and_decomposition() {
        let mut rng = StdRng::seed_from_u64(7);
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let rates = RatePair::new(0.4, 0.7).unwrap();
        let x = random_psd(&mut rng, 2);
        let gains = optimal_gains(&a, &m, &x).unwrap();

        let zero = l_operator(&a, &m, rates, &gains, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(crate::linalg::max_abs(&zero), 0.0);

        let y = random_psd(&mut rng, 2);
        let twice = l_operator(&a, &m, rates, &gains, &(&y * 2.0)).unwrap();
        let once = l_operator(&a, &m, rates, &gains, &y).unwrap();
        assert!(crate::linalg::max_abs(&(twice - &once * 2.0)) <= 1e-12);

        // phi(X) = L(X) + U with U the probability-weighted noise offset
        let [wb, w1, w2, w0] = rates.branch_weights();
        let u = m.q() * w0
            + (m.q() + crate::linalg::sandwich(&gains.k, m.r())) * wb
            + (m.q() + crate::linalg::sandwich(&gains.k1, &m.r11())) * w1
            + (m.q() + crate::linalg::sandwich(&gains.k2, &m.r22())) * w2;
        let phi = phi_operator(&a, &m, rates, &gains, &x).unwrap();
        let l = l_operator(&a, &m, rates, &gains, &x).unwrap();
        assert!(crate::linalg::max_abs(&(phi - (l + u))) <= 1e-10);
    }

    #[test]
    fn g_monotone_concave_and_lower_bounded() {
        let mut rng = StdRng::seed_from_u64(8);
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        for _ in 0..100 {
            let rates =
                RatePair::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)).unwrap();
            let x1 = random_psd(&mut rng, 2);
            let x2 = &x1 + random_psd(&mut rng, 2); // x2 >= x1
            let g1 = g_operator(&a, &m, rates, &x1).unwrap();
            let g2 = g_operator(&a, &m, rates, &x2).unwrap();
            assert!(
                crate::linalg::min_eig(&(&g2 - &g1)) >= -1e-9,
                "monotonicity violated"
            );

            let mid = (&x1 + &x2) * 0.5;
            let gmid = g_operator(&a, &m, rates, &mid).unwrap();
            let avg = (&g1 + &g2) * 0.5;
            assert!(
                crate::linalg::min_eig(&(gmid - avg)) >= -1e-9,
                "concavity violated"
            );

            let [_, _, _, w0] = rates.branch_weights();
            let lower = crate::linalg::sandwich(&a, &x1) * w0 + m.q();
            assert!(
                crate::linalg::min_eig(&(&g1 - lower)) >= -1e-9,
                "lower bound violated"
            );
        }
    }

    /// Divergence-iteration oracle: bounded iff iterating g stays finite.
    fn g_iteration_bounded(model: &SystemModel, rates: RatePair, steps: usize) -> bool {
        let a = model_a(model);
        let n = model.n_x();
        let mut x = DMatrix::identity(n, n);
        for _ in 0..steps {
            x = match g_operator(&a, model, rates, &x) {
                Ok(next) => next,
                Err(_) => return false,
            };
            if crate::linalg::max_abs(&x) > 1e12 {
                return false;
            }
        }
        true
    }

    #[test]
    fn boundedness_matches_scalar_critical_rate() {
        let m = scalar_model(2.0);
        let a = model_a(&m);
        let dynamics = Dynamics::Linear(&a);
        // critical rate 1 - 1/a^2 = 0.75
        let lo = check_boundedness(dynamics, &m, RatePair::new(0.7, 0.0).unwrap()).unwrap();
        assert!(!lo.is_feasible());
        assert!(!g_iteration_bounded(&m, RatePair::new(0.7, 0.0).unwrap(), 10_000));
        let hi = check_boundedness(dynamics, &m, RatePair::new(0.8, 0.0).unwrap()).unwrap();
        assert!(hi.is_feasible());
        assert!(g_iteration_bounded(&m, RatePair::new(0.8, 0.0).unwrap(), 10_000));
    }

    #[test]
    fn boundedness_open_loop_unstable_infeasible() {
        let m = scalar_model(2.0);
        let a = model_a(&m);
        let res = check_boundedness(Dynamics::Linear(&a), &m, RatePair::new(0.0, 0.0).unwrap())
            .unwrap();
        assert!(!res.is_feasible());
    }

    #[test]
    fn paper_form_without_open_loop_block_is_blind_at_zero_rates() {
        // the printed four-block LMI is trivially feasible at (0,0) even for
        // an unstable system; the comparison flag reproduces that
        let m = scalar_model(2.0);
        let a = model_a(&m);
        let res = check_boundedness_with(
            Dynamics::Linear(&a),
            &m,
            RatePair::new(0.0, 0.0).unwrap(),
            false,
        )
        .unwrap();
        assert!(res.is_feasible());
    }

    #[test]
    fn linear_benchmark_feasible_at_selected_rates() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let res = check_boundedness(Dynamics::Linear(&a), &m, RatePair::new(0.1, 0.0).unwrap())
            .unwrap();
        assert!(res.is_feasible());
    }

    #[test]
    fn certificates_verify_against_assembled_lmi() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut feasible_seen = 0;
        for trial in 0..120 {
            let stable = trial % 2 == 0;
            let m = random_model(&mut rng, 1 + trial % 3, stable);
            let a = model_a(&m);
            let rates =
                RatePair::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)).unwrap();
            match check_boundedness(Dynamics::Linear(&a), &m, rates) {
                Ok(BoundednessResult::Feasible(cert)) => {
                    feasible_seen += 1;
                    let structure = assemble_psi(Dynamics::Linear(&a), &m, rates, true);
                    let assignment = certificate_assignment(&structure, &cert);
                    let report = structure.problem.verify(&assignment).unwrap();
                    assert!(
                        report.passes(),
                        "certificate failed re-verification: {:?}",
                        report.worst()
                    );
                }
                Ok(BoundednessResult::Infeasible) => {}
                Err(StabilityError::SolverFailure { .. }) => {}
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
        assert!(feasible_seen >= 30, "too few feasible cases ({feasible_seen})");
    }

    #[test]
    fn lmi_decision_matches_divergence_oracle() {
        let mut rng = StdRng::seed_from_u64(10);
        for trial in 0..20 {
            let m = random_model(&mut rng, 2, trial % 2 == 0);
            let a = model_a(&m);
            let rates =
                RatePair::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)).unwrap();
            let lmi = match check_boundedness(Dynamics::Linear(&a), &m, rates) {
                Ok(r) => r.is_feasible(),
                Err(_) => continue,
            };
            let oracle = g_iteration_bounded(&m, rates, 3000);
            // near-critical instances may disagree within solver margins;
            // require agreement away from the boundary
            let margin_probe = g_iteration_bounded(&m, rates, 300);
            if oracle == margin_probe {
                assert_eq!(lmi, oracle, "LMI and iteration disagree (trial {trial})");
            }
        }
    }

    #[test]
    fn single_channel_reduction_matches_oracle() {
        // independently assembled single-channel LMI:
        // [[Y, sqrt(l)(YA+ZC), sqrt(1-l) YA]; diag Y] > 0
        let single_channel_feasible = |a: &DMatrix<f64>, c: &DMatrix<f64>, l: f64| -> bool {
            let n = a.nrows();
            let mut p = SdpProblem::new();
            let y = p.add_var("Y", VarKind::Symmetric(n));
            let z = p.add_var("Z", VarKind::Rectangular(n, c.nrows()));
            let t = p.add_var("t", VarKind::Symmetric(1));
            let eye = DMatrix::identity(n, n);
            let mut block = LmiBlock::new(3 * n, "single")
                .diag_var(y, 1.0, 0, n)
                .diag_var(y, 1.0, n, n)
                .diag_var(y, 1.0, 2 * n, n)
                .pair_term(y, l.sqrt(), 0, n, eye.clone(), a.clone())
                .pair_term(z, l.sqrt(), 0, n, eye.clone(), c.clone())
                .pair_term(y, (1.0 - l).sqrt(), 0, 2 * n, eye.clone(), a.clone());
            block = block.scalar_times_identity(t, -1.0, 0, 3 * n);
            p.add_constraint(block);
            p.add_constraint(
                LmiBlock::new(n, "floor")
                    .diag_var(y, 1.0, 0, n)
                    .constant(0, 0, &(-DMatrix::identity(n, n) * Y_FLOOR)),
            );
            p.add_constraint(
                LmiBlock::new(n, "cap")
                    .constant(0, 0, &DMatrix::identity(n, n))
                    .diag_var(y, -1.0, 0, n),
            );
            p.set_objective(Objective::MaximizeTrace(t));
            let sol = p.solve(1e-8).unwrap();
            matches!(sol.status, SdpStatus::Optimal | SdpStatus::Feasible)
                && sol.objective_value.unwrap_or(f64::NEG_INFINITY)
                    >= 1e-8 * (1.0 + crate::linalg::spectral_norm(a))
        };

        let mut rng = StdRng::seed_from_u64(11);
        for trial in 0..20 {
            let m = random_model(&mut rng, 2, trial % 2 == 0);
            let a = model_a(&m);
            let l = rng.random_range(0.0..=1.0);
            let ours = check_boundedness(Dynamics::Linear(&a), &m, RatePair::new(l, 0.0).unwrap())
                .unwrap()
                .is_feasible();
            let oracle = single_channel_feasible(&a, m.c1(), l);
            assert_eq!(ours, oracle, "single-channel reduction mismatch");
        }
    }

    #[test]
    fn critical_lambda_scalar_is_three_quarters() {
        let m = scalar_model(2.0);
        let a = model_a(&m);
        let lc = critical_lambda(Dynamics::Linear(&a), &m, FixedChannel::Two, 0.0, 0.005).unwrap();
        assert!((lc - 0.75).abs() <= 0.01, "critical rate {lc}");
    }

    #[test]
    fn critical_lambda_zero_for_stable() {
        let m = scalar_model(0.5);
        let a = model_a(&m);
        let lc = critical_lambda(Dynamics::Linear(&a), &m, FixedChannel::Two, 0.3, 0.01).unwrap();
        assert_eq!(lc, 0.0);
    }

    #[test]
    fn critical_lambda_linear_benchmark_at_most_tenth() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let lc = critical_lambda(Dynamics::Linear(&a), &m, FixedChannel::Two, 0.0, 0.01).unwrap();
        assert!(lc <= 0.1, "critical lambda1 {lc}");
    }

    #[test]
    fn trace_bound_scalar_lyapunov_fixed_point() {
        let m = SystemModel::new(
            DynamicsKind::Linear {
                a: DMatrix::from_element(1, 1, 0.5),
            },
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::identity(2, 2),
            1.0,
            vec![(-1.0, 1.0)],
        )
        .unwrap();
        let a = model_a(&m);
        let res = trace_bound(Dynamics::Linear(&a), &m, RatePair::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(res.status, TraceBoundStatus::Feasible);
        assert_relative_eq!(res.tau.unwrap(), 4.0 / 3.0, epsilon = 1e-4);
    }

    #[test]
    fn trace_bound_linear_benchmark() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let res = trace_bound(Dynamics::Linear(&a), &m, RatePair::new(0.1, 0.0).unwrap()).unwrap();
        assert_eq!(res.status, TraceBoundStatus::Feasible);
        let tau = res.tau.unwrap();
        assert!(
            (0.0090..=0.0135).contains(&tau),
            "tau {tau} outside the published band"
        );
        // certificate satisfies V <= g(V)
        let v = res.v.unwrap();
        let gv = g_operator(&a, &m, RatePair::new(0.1, 0.0).unwrap(), &v).unwrap();
        assert!(crate::linalg::min_eig(&(gv - &v)) >= -1e-6);
    }

    #[test]
    fn trace_bound_unbounded_for_marginal_open_loop() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let res = trace_bound(Dynamics::Linear(&a), &m, RatePair::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(res.status, TraceBoundStatus::Unbounded);
    }

    #[test]
    fn polytopic_single_vertex_matches_linear() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let verts = vec![a.clone()];
        let rates = RatePair::new(0.3, 0.2).unwrap();
        let lin = trace_bound(Dynamics::Linear(&a), &m, rates).unwrap();
        let poly = trace_bound(Dynamics::Polytopic(&verts), &m, rates).unwrap();
        assert_eq!(lin.status, TraceBoundStatus::Feasible);
        assert_eq!(poly.status, TraceBoundStatus::Feasible);
        assert_relative_eq!(lin.tau.unwrap(), poly.tau.unwrap(), epsilon = 1e-4);

        let fl = check_boundedness(Dynamics::Linear(&a), &m, rates).unwrap();
        let fp = check_boundedness(Dynamics::Polytopic(&verts), &m, rates).unwrap();
        assert_eq!(fl.is_feasible(), fp.is_feasible());
    }

    #[test]
    fn polytopic_two_vertices_is_more_conservative() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let mut a_hi = a.clone();
        a_hi[(0, 1)] += 0.02;
        let mut a_lo = a.clone();
        a_lo[(0, 1)] -= 0.02;
        let verts = vec![a_lo, a_hi];
        let rates = RatePair::new(0.4, 0.2).unwrap();
        let lin = trace_bound(Dynamics::Linear(&a), &m, rates).unwrap();
        let poly = trace_bound(Dynamics::Polytopic(&verts), &m, rates).unwrap();
        assert_eq!(poly.status, TraceBoundStatus::Feasible);
        // a V feasible for every vertex is feasible for the center, so the
        // family bound can only shrink
        assert!(poly.tau.unwrap() <= lin.tau.unwrap() + 1e-9);
        assert!(poly.tau.unwrap() > 0.0);
    }

    #[test]
    fn psi_structure_drops_zero_weight_branches() {
        let m = SystemModel::linear_benchmark();
        let a = model_a(&m);
        let full = assemble_psi(Dynamics::Linear(&a), &m, RatePair::new(1.0, 1.0).unwrap(), true);
        // only the both-channels branch survives at (1,1)
        assert_eq!(full.branches[0].len(), 1);
        assert_eq!(full.branches[0][0].0, PsiBranch::Both);

        let single =
            assemble_psi(Dynamics::Linear(&a), &m, RatePair::new(0.1, 0.0).unwrap(), true);
        let kinds: Vec<PsiBranch> = single.branches[0].iter().map(|b| b.0).collect();
        assert_eq!(kinds, vec![PsiBranch::Ch1Only, PsiBranch::OpenLoop]);

        let paper =
            assemble_psi(Dynamics::Linear(&a), &m, RatePair::new(0.1, 0.0).unwrap(), false);
        let kinds: Vec<PsiBranch> = paper.branches[0].iter().map(|b| b.0).collect();
        assert_eq!(kinds, vec![PsiBranch::Ch1Only]);
    }
}


#[cfg(test)]
mod probe_single {
    use super::*;
    use crate::model::{build_polytope, RowConvention, SystemModel};

    #[test]
    #[ignore]
    fn probe_one_margin_solve() {
        let m = SystemModel::kinematic_5dof(RowConvention::Corrected);
        let poly = build_polytope(&m, m.default_envelope(), 1 << 15).unwrap();
        let rates = RatePair::new(0.1, 0.1).unwrap();
        let two = vec![poly.vertices[0].clone(), poly.vertices[16383].clone()];
        let t = std::time::Instant::now();
        let s = assemble_psi_inner(Dynamics::Polytopic(&two), &m, rates, true, true);
        eprintln!("assembled in {:?}; coords={}", t.elapsed(), s.problem.n_coords);
        let t = std::time::Instant::now();
        let sol = s.problem.solve(1e-8).unwrap();
        eprintln!("solved in {:?}: {:?} obj={:?} iters={} diag={}", t.elapsed(), sol.status, sol.objective_value, sol.iterations, sol.diagnostics);
    }
}
