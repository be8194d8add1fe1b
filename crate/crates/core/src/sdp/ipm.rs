//! Embedded primal-dual interior-point method for LMI-form SDPs.
//!
//! Solves  max q^T y  s.t.  S_c = C_c + sum_i y_i F_ci >= 0  with HKM
//! directions and Mehrotra predictor-corrector. The Schur complement is
//! assembled block-wise from the term placements, so structured LMIs stay
//! cheap without any sparse machinery.

use nalgebra::DMatrix;

use super::{Objective, SdpProblem, SdpSolution, SdpStatus, VarKind};
use crate::linalg;

const MAX_ITER: usize = 120;
const STEP_FRACTION: f64 = 0.98;
const UNBOUNDED_OBJECTIVE: f64 = 1e12;

/// One side of a term after hermitian-pair expansion.
#[derive(Clone)]
struct Atomic {
    var: usize,
    coeff: f64,
    row: usize,
    col: usize,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
    transpose_var: bool,
}

/// Placement of one variable's coordinates in the block-arrow Schur
/// system: shared across constraints, or local to a single constraint.
#[derive(Clone, Copy, Debug)]
enum VarLoc {
    Shared(usize),
    Local { constraint: usize, pos: usize },
}

struct Compiled<'a> {
    problem: &'a SdpProblem,
    /// Per-constraint scaled constants.
    constants: Vec<DMatrix<f64>>,
    /// Per-constraint atomics (scaled).
    atomics: Vec<Vec<Atomic>>,
    /// Objective vector over scalar coordinates, unit scaled.
    q: Vec<f64>,
    q_scale: f64,
    dims: Vec<usize>,
    m: usize,
    /// Arrow layout: variables used by at most one constraint are
    /// eliminated block-wise from the Schur system.
    var_loc: Vec<VarLoc>,
    shared_dim: usize,
    local_dims: Vec<usize>,
}

fn compile(problem: &SdpProblem) -> Compiled<'_> {
    let mut constants = Vec::new();
    let mut atomics = Vec::new();
    let mut dims = Vec::new();
    for c in &problem.constraints {
        let mut scale = linalg::max_abs(&c.constant);
        for t in &c.terms {
            scale = scale
                .max(t.coeff.abs() * linalg::max_abs(&t.left) * linalg::max_abs(&t.right));
        }
        let scale = if scale > 0.0 { scale } else { 1.0 };
        constants.push(&c.constant / scale);
        let mut list = Vec::new();
        for t in &c.terms {
            let coeff = t.coeff / scale;
            list.push(Atomic {
                var: t.var,
                coeff,
                row: t.row,
                col: t.col,
                left: t.left.clone(),
                right: t.right.clone(),
                transpose_var: t.transpose_var,
            });
            if t.hermitian_pair {
                list.push(Atomic {
                    var: t.var,
                    coeff,
                    row: t.col,
                    col: t.row,
                    left: t.right.transpose(),
                    right: t.left.transpose(),
                    transpose_var: !t.transpose_var,
                });
            }
        }
        atomics.push(list);
        dims.push(c.dim);
    }

    let m = problem.n_coords;
    let mut q = vec![0.0; m];
    let mut q_scale = 1.0;
    if let Objective::MaximizeTrace(vid) = problem.objective {
        let v = &problem.vars[vid.0];
        match v.kind {
            VarKind::Symmetric(n) => {
                for i in 0..n {
                    q[v.offset + coord_sym(i, i, n)] = 1.0;
                }
            }
            VarKind::Rectangular(r, c) => {
                for i in 0..r.min(c) {
                    q[v.offset + i * c + i] = 1.0;
                }
            }
        }
        q_scale = 1.0;
    }

    // arrow layout: count constraint usage per variable
    let n_vars = problem.vars.len();
    let mut usage: Vec<Vec<usize>> = vec![Vec::new(); n_vars];
    for (c, list) in atomics.iter().enumerate() {
        for a in list {
            if usage[a.var].last() != Some(&c) {
                usage[a.var].push(c);
            }
        }
    }
    let mut var_loc = vec![VarLoc::Shared(0); n_vars];
    let mut shared_dim = 0usize;
    let mut local_dims = vec![0usize; atomics.len()];
    for (vi, v) in problem.vars.iter().enumerate() {
        let d = v.kind.dim();
        if usage[vi].len() == 1 {
            let c = usage[vi][0];
            var_loc[vi] = VarLoc::Local {
                constraint: c,
                pos: local_dims[c],
            };
            local_dims[c] += d;
        } else {
            var_loc[vi] = VarLoc::Shared(shared_dim);
            shared_dim += d;
        }
    }

    Compiled {
        problem,
        constants,
        atomics,
        q,
        q_scale,
        dims,
        m,
        var_loc,
        shared_dim,
        local_dims,
    }
}

/// Coordinate index of entry (i, j), i <= j, in the packed upper triangle
/// (row-major over i <= j).
fn coord_sym(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - i * (i + 1) / 2 + j
}

/// Entries (with weights) represented by one scalar coordinate.
fn coord_entries(kind: VarKind, k: usize) -> ([(usize, usize); 2], usize) {
    match kind {
        VarKind::Symmetric(n) => {
            // invert coord_sym
            let mut i = 0;
            let mut k2 = k;
            while k2 >= n - i {
                k2 -= n - i;
                i += 1;
            }
            let j = i + k2;
            if i == j {
                ([(i, i), (0, 0)], 1)
            } else {
                ([(i, j), (j, i)], 2)
            }
        }
        VarKind::Rectangular(_, c) => ([(k / c, k % c), (0, 0)], 1),
    }
}

fn mat_from_coords(kind: VarKind, coords: &[f64]) -> DMatrix<f64> {
    match kind {
        VarKind::Symmetric(n) => {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = coords[coord_sym(i, j, n)];
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            m
        }
        VarKind::Rectangular(r, c) => DMatrix::from_row_slice(r, c, coords),
    }
}

impl Compiled<'_> {
    /// S_c(y) = C_c + sum_i y_i F_ci.
    fn eval(&self, c: usize, y: &[f64]) -> DMatrix<f64> {
        let mut out = self.constants[c].clone();
        for a in &self.atomics[c] {
            let v = &self.problem.vars[a.var];
            let coords = &y[v.offset..v.offset + v.kind.dim()];
            let vm = mat_from_coords(v.kind, coords);
            let vm = if a.transpose_var { vm.transpose() } else { vm };
            let p = &a.left * vm * &a.right * a.coeff;
            out.view_mut((a.row, a.col), (p.nrows(), p.ncols()))
                .zip_apply(&p, |o, x| *o += x);
        }
        linalg::symmetrize(&out)
    }

    /// Accumulate the adjoint A_c^*(W) into `out` (W symmetric).
    fn adjoint(&self, c: usize, w: &DMatrix<f64>, out: &mut [f64]) {
        for a in &self.atomics[c] {
            let v = &self.problem.vars[a.var];
            let h = a.left.nrows();
            let wd = a.right.ncols();
            let w_sub = w.view((a.row, a.col), (h, wd));
            // gradient of coeff * tr((L V^t R)^T W_sub) with respect to V
            let grad = if a.transpose_var {
                (&a.right * w_sub.transpose() * &a.left) * a.coeff
            } else {
                (a.left.transpose() * w_sub * a.right.transpose()) * a.coeff
            };
            match v.kind {
                VarKind::Symmetric(n) => {
                    for i in 0..n {
                        for j in i..n {
                            let g = if i == j {
                                grad[(i, i)]
                            } else {
                                grad[(i, j)] + grad[(j, i)]
                            };
                            out[v.offset + coord_sym(i, j, n)] += g;
                        }
                    }
                }
                VarKind::Rectangular(r, cc) => {
                    for i in 0..r {
                        for j in 0..cc {
                            out[v.offset + i * cc + j] += grad[(i, j)];
                        }
                    }
                }
            }
        }
    }

    /// Block-arrow Schur system M_ij = sum_c tr(F_ci X_c F_cj S_c^{-1}),
    /// stored as shared/cross/local blocks.
    fn schur_arrow(&self, xs: &[DMatrix<f64>], sinvs: &[DMatrix<f64>]) -> ArrowMats {
        let mut mats = ArrowMats {
            ss: DMatrix::zeros(self.shared_dim, self.shared_dim),
            cross: self
                .local_dims
                .iter()
                .map(|&l| DMatrix::zeros(l, self.shared_dim))
                .collect(),
            loc: self
                .local_dims
                .iter()
                .map(|&l| DMatrix::zeros(l, l))
                .collect(),
        };
        for c in 0..self.atomics.len() {
            let x = &xs[c];
            let sinv = &sinvs[c];
            let list = &self.atomics[c];
            for p in list {
                let (hp, wp) = (p.left.nrows(), p.right.ncols());
                for qa in list {
                    let (hq, wq) = (qa.left.nrows(), qa.right.ncols());
                    // U = R_p X[col_p, row_q] L_q ; Z = R_q Sinv[col_q, row_p] L_p
                    let x_sub = x.view((p.col, qa.row), (wp, hq));
                    let s_sub = sinv.view((qa.col, p.row), (wq, hp));
                    let u = &p.right * x_sub * &qa.left;
                    let z = &qa.right * s_sub * &p.left;
                    let scale = p.coeff * qa.coeff;
                    self.fill_pair(
                        &mut mats,
                        c,
                        p.var,
                        qa.var,
                        p.transpose_var,
                        qa.transpose_var,
                        &u,
                        &z,
                        scale,
                    );
                }
            }
        }
        linalg::symmetrize_in_place(&mut mats.ss);
        for l in &mut mats.loc {
            linalg::symmetrize_in_place(l);
        }
        mats
    }

    /// Accumulate scale * tr(Vp^{tp} U Vq^{tq} Z) over coordinate bases of
    /// the two variable blocks into the arrow storage.
    #[allow(clippy::too_many_arguments)]
    fn fill_pair(
        &self,
        mats: &mut ArrowMats,
        c: usize,
        pvar: usize,
        qvar: usize,
        tp: bool,
        tq: bool,
        u: &DMatrix<f64>,
        z: &DMatrix<f64>,
        scale: f64,
    ) {
        let kp = self.problem.vars[pvar].kind;
        let kq = self.problem.vars[qvar].kind;
        let dp = kp.dim();
        let dq = kq.dim();
        let lp = self.var_loc[pvar];
        let lq = self.var_loc[qvar];
        for k in 0..dp {
            let (ep, np) = coord_entries(kp, k);
            for l in 0..dq {
                let (eq, nq) = coord_entries(kq, l);
                let mut acc = 0.0;
                for &(pi, pj) in &ep[..np] {
                    // effective entry of Vp^{tp}
                    let (a, b) = if tp { (pj, pi) } else { (pi, pj) };
                    for &(qi, qj) in &eq[..nq] {
                        let (cc, d) = if tq { (qj, qi) } else { (qi, qj) };
                        // tr(E_ab U E_cd Z) = U[b, c] * Z[d, a]
                        acc += u[(b, cc)] * z[(d, a)];
                    }
                }
                let v = scale * acc;
                match (lp, lq) {
                    (VarLoc::Shared(ps), VarLoc::Shared(qs)) => {
                        mats.ss[(ps + k, qs + l)] += v;
                    }
                    (VarLoc::Local { pos, .. }, VarLoc::Shared(qs)) => {
                        // M is exactly symmetric, so both orders carry the
                        // same value; average into the single cross block
                        mats.cross[c][(pos + k, qs + l)] += 0.5 * v;
                    }
                    (VarLoc::Shared(ps), VarLoc::Local { pos, .. }) => {
                        mats.cross[c][(pos + l, ps + k)] += 0.5 * v;
                    }
                    (VarLoc::Local { pos: pp, .. }, VarLoc::Local { pos: qp, .. }) => {
                        mats.loc[c][(pp + k, qp + l)] += v;
                    }
                }
            }
        }
    }
}

struct ArrowMats {
    ss: DMatrix<f64>,
    /// Per constraint: M[local, shared].
    cross: Vec<DMatrix<f64>>,
    loc: Vec<DMatrix<f64>>,
}

struct ArrowFactor {
    chol_loc: Vec<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>>,
    /// Per constraint: Mloc^{-1} Mcross (local x shared).
    t: Vec<DMatrix<f64>>,
    chol_red: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl ArrowFactor {
    fn new(mats: &ArrowMats) -> Option<Self> {
        let base = {
            let mut d = mats.ss.diagonal().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            for l in &mats.loc {
                d = d.max(l.diagonal().iter().fold(0.0f64, |a, &v| a.max(v.abs())));
            }
            d * 1e-13 + 1e-300
        };
        let mut ridge = 0.0f64;
        'attempt: loop {
            let mut chol_loc = Vec::with_capacity(mats.loc.len());
            let mut t = Vec::with_capacity(mats.loc.len());
            let mut red = mats.ss.clone();
            for i in 0..red.nrows() {
                red[(i, i)] += ridge;
            }
            for (l, cr) in mats.loc.iter().zip(&mats.cross) {
                if l.nrows() == 0 {
                    chol_loc.push(None);
                    t.push(DMatrix::zeros(0, mats.ss.nrows()));
                    continue;
                }
                let mut lr = l.clone();
                for i in 0..lr.nrows() {
                    lr[(i, i)] += ridge;
                }
                match lr.cholesky() {
                    Some(ch) => {
                        let tc = ch.solve(cr);
                        red -= cr.transpose() * &tc;
                        chol_loc.push(Some(ch));
                        t.push(tc);
                    }
                    None => {
                        ridge = if ridge == 0.0 { base } else { ridge * 100.0 };
                        if ridge > base * 1e12 {
                            return None;
                        }
                        continue 'attempt;
                    }
                }
            }
            linalg::symmetrize_in_place(&mut red);
            match red.cholesky() {
                Some(chol_red) => {
                    return Some(ArrowFactor {
                        chol_loc,
                        t,
                        chol_red,
                    })
                }
                None => {
                    ridge = if ridge == 0.0 { base } else { ridge * 100.0 };
                    if ridge > base * 1e12 {
                        return None;
                    }
                }
            }
        }
    }
}

impl Compiled<'_> {
    fn split_rhs(&self, rhs: &[f64]) -> (nalgebra::DVector<f64>, Vec<nalgebra::DVector<f64>>) {
        let mut rs = nalgebra::DVector::zeros(self.shared_dim);
        let mut rl: Vec<nalgebra::DVector<f64>> = self
            .local_dims
            .iter()
            .map(|&l| nalgebra::DVector::zeros(l))
            .collect();
        for (vi, v) in self.problem.vars.iter().enumerate() {
            let d = v.kind.dim();
            match self.var_loc[vi] {
                VarLoc::Shared(ps) => {
                    for k in 0..d {
                        rs[ps + k] = rhs[v.offset + k];
                    }
                }
                VarLoc::Local { constraint, pos } => {
                    for k in 0..d {
                        rl[constraint][pos + k] = rhs[v.offset + k];
                    }
                }
            }
        }
        (rs, rl)
    }

    fn arrow_solve(&self, factor: &ArrowFactor, rhs: &[f64]) -> Vec<f64> {
        let (rs, rl) = self.split_rhs(rhs);
        let mut rhs_red = rs.clone();
        let mut u: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(rl.len());
        for (c, rc) in rl.iter().enumerate() {
            match &factor.chol_loc[c] {
                Some(ch) => {
                    let uc = ch.solve(rc);
                    rhs_red -= factor.t[c].transpose() * rc;
                    u.push(uc);
                }
                None => u.push(nalgebra::DVector::zeros(0)),
            }
        }
        let xs = factor.chol_red.solve(&rhs_red);
        let mut out = vec![0.0; self.m];
        let mut xc_cache: Vec<Option<nalgebra::DVector<f64>>> = vec![None; u.len()];
        for (vi, v) in self.problem.vars.iter().enumerate() {
            let d = v.kind.dim();
            match self.var_loc[vi] {
                VarLoc::Shared(ps) => {
                    for k in 0..d {
                        out[v.offset + k] = xs[ps + k];
                    }
                }
                VarLoc::Local { constraint, pos } => {
                    let xc = xc_cache[constraint]
                        .get_or_insert_with(|| &u[constraint] - &factor.t[constraint] * &xs);
                    for k in 0..d {
                        out[v.offset + k] = xc[pos + k];
                    }
                }
            }
        }
        out
    }
}

fn hsym(m: DMatrix<f64>) -> DMatrix<f64> {
    linalg::symmetrize(&m)
}

/// Largest alpha in (0, 1] with P + alpha * dP staying positive definite,
/// found by Cholesky backtracking (cheaper than an eigendecomposition and
/// conservative by at most one backtracking factor).
fn step_length(p: &DMatrix<f64>, dp: &DMatrix<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for _ in 0..120 {
        let trial = p + dp * (alpha / STEP_FRACTION);
        if trial.cholesky().is_some() {
            return alpha.min(1.0);
        }
        alpha *= 0.8;
    }
    0.0
}

pub(super) fn solve(problem: &SdpProblem, tol: f64) -> SdpSolution {
    let cp = compile(problem);
    let n_cones = cp.dims.len();
    let total_dim: usize = cp.dims.iter().sum();
    if cp.m == 0 || n_cones == 0 {
        return SdpSolution {
            status: SdpStatus::Feasible,
            assignment: extract(problem, &vec![0.0; cp.m]),
            objective_value: None,
            min_eigenvalue_margin: None,
            iterations: 0,
            diagnostics: "empty problem".into(),
        };
    }

    let mut y = vec![0.0; cp.m];
    let mut ss: Vec<DMatrix<f64>> = Vec::with_capacity(n_cones);
    let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(n_cones);
    for c in 0..n_cones {
        let beta = 1.0 + linalg::max_abs(&cp.constants[c]);
        ss.push(DMatrix::identity(cp.dims[c], cp.dims[c]) * beta);
        xs.push(DMatrix::identity(cp.dims[c], cp.dims[c]));
    }

    let q_norm = cp.q.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
    let mut status = SdpStatus::NumericalFailure;
    let mut iterations = 0;
    let mut diag = String::new();
    let mut small_steps = 0usize;

    // best-merit iterate, kept because degenerate problems can destroy the
    // multiplier side after the variable side has converged
    let mut best_merit = f64::INFINITY;
    let mut best_y = y.clone();
    let mut stall = 0usize;
    let mut prev_obj = 0.0f64;
    let mut prev_xnorm = 0.0f64;
    let debug = std::env::var("KF2C_DEBUG_IPM").is_ok();
    let mut t_iter = std::time::Instant::now();

    for iter in 0..MAX_ITER {
        iterations = iter + 1;

        // residuals: stationarity A*(X) + q = 0 and Rd_c = C_c + A_c(y) - S_c
        let mut astar_x = vec![0.0; cp.m];
        for c in 0..n_cones {
            cp.adjoint(c, &xs[c], &mut astar_x);
        }
        let rp: Vec<f64> = cp
            .q
            .iter()
            .zip(&astar_x)
            .map(|(qi, ai)| -qi - ai)
            .collect();

        let rds: Vec<DMatrix<f64>> = (0..n_cones)
            .map(|c| cp.eval(c, &y) - &ss[c])
            .collect();

        let gap: f64 = (0..n_cones).map(|c| (&xs[c] * &ss[c]).trace()).sum();
        let mu = gap / total_dim as f64;

        let rp_norm = rp.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let rd_norm = rds
            .iter()
            .fold(0.0f64, |a, r| a.max(linalg::max_abs(r)));

        let obj: f64 = cp.q.iter().zip(&y).map(|(qi, yi)| qi * yi).sum();
        if debug {
            eprintln!(
                "    ipm iter {iter}: m={} mu={mu:.3e} rp={rp_norm:.3e} rd={rd_norm:.3e} obj={obj:.6e} dt={:?}",
                cp.m,
                t_iter.elapsed()
            );
            t_iter = std::time::Instant::now();
        }

        let merit = (rp_norm / q_norm).max(rd_norm).max(mu / (1.0 + obj.abs()));
        if merit < 0.999 * best_merit {
            best_merit = merit;
            best_y = y.clone();
            stall = 0;
        } else {
            stall += 1;
        }

        // convergence
        if rp_norm <= tol * q_norm && rd_norm <= tol && mu <= tol * (1.0 + obj.abs()) {
            status = match problem.objective {
                Objective::Feasibility => SdpStatus::Feasible,
                Objective::MaximizeTrace(_) => SdpStatus::Optimal,
            };
            diag = format!("converged: mu={mu:.3e} rp={rp_norm:.3e} rd={rd_norm:.3e}");
            best_y = y.clone();
            break;
        }

        // unboundedness: objective runs away while staying feasible-ish
        if obj > UNBOUNDED_OBJECTIVE * cp.q_scale {
            status = SdpStatus::Unbounded;
            diag = format!("objective exceeded {UNBOUNDED_OBJECTIVE:.1e} after scaling");
            break;
        }

        // infeasibility: X grows into a Farkas certificate
        let x_norm: f64 = xs.iter().map(|x| x.trace()).sum();
        if x_norm > 1e6 {
            let astar_rel = astar_x.iter().fold(0.0f64, |a, &v| a.max(v.abs())) / x_norm;
            let c_dot_x: f64 = (0..n_cones)
                .map(|c| (&cp.constants[c] * &xs[c]).trace())
                .sum();
            if astar_rel < 1e-9 && c_dot_x / x_norm < -1e-9 {
                status = SdpStatus::Infeasible;
                diag = format!("Farkas certificate: |A*(X)|/|X|={astar_rel:.3e}");
                break;
            }
        }

        // a ray in the objective or the multipliers is still evidence
        // gathering, not stagnation
        let ray_like = (obj > 1e3 && obj > 1.2 * prev_obj.abs().max(1.0))
            || (x_norm > 1e3 && x_norm > 1.2 * prev_xnorm.max(1.0));
        prev_obj = obj;
        prev_xnorm = x_norm;

        // stagnation or multiplier breakdown: fall back to the best iterate
        if !ray_like && (stall >= 15 || rp_norm > 1e6 * q_norm) {
            diag = format!(
                "stopped early: merit={best_merit:.3e} mu={mu:.3e} rp={rp_norm:.3e} rd={rd_norm:.3e}"
            );
            break;
        }

        // factorizations
        let mut sinvs = Vec::with_capacity(n_cones);
        let mut ok = true;
        for s in &ss {
            match s.clone().cholesky() {
                Some(ch) => sinvs.push(ch.inverse()),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            diag = "slack lost positive definiteness".into();
            break;
        }

        let mats = cp.schur_arrow(&xs, &sinvs);
        let factor = match ArrowFactor::new(&mats) {
            Some(f) => f,
            None => {
                diag = "Schur complement factorization failed".into();
                break;
            }
        };

        // rhs pieces common to predictor and corrector
        let rhs_with = |sigma_mu: f64,
                        correction: Option<(&[DMatrix<f64>], &[DMatrix<f64>])>|
         -> Vec<f64> {
            let mut rhs: Vec<f64> = rp.iter().map(|v| -v).collect();
            for c in 0..n_cones {
                let mut w = &sinvs[c] * sigma_mu - &xs[c]
                    - hsym(&xs[c] * &rds[c] * &sinvs[c]);
                if let Some((dxa, dsa)) = correction {
                    w -= hsym(&dxa[c] * &dsa[c] * &sinvs[c]);
                }
                cp.adjoint(c, &w, &mut rhs);
            }
            rhs
        };

        let solve_direction = |rhs: &[f64]| -> (Vec<f64>, Vec<DMatrix<f64>>) {
            let dy = cp.arrow_solve(&factor, rhs);
            let dss: Vec<DMatrix<f64>> = (0..n_cones)
                .map(|c| {
                    // A_c(dy) + Rd_c
                    let s_at_dy = {
                        // evaluate the linear part only: eval includes the constant
                        let full = cp.eval(c, &dy);
                        full - &cp.constants[c]
                    };
                    s_at_dy + &rds[c]
                })
                .collect();
            (dy, dss)
        };

        // predictor (sigma = 0)
        let rhs_aff = rhs_with(0.0, None);
        let (_dy_aff, ds_aff) = solve_direction(&rhs_aff);
        let dx_aff: Vec<DMatrix<f64>> = (0..n_cones)
            .map(|c| -(&xs[c]) - hsym(&xs[c] * &ds_aff[c] * &sinvs[c]))
            .collect();

        let alpha_p_aff = (0..n_cones)
            .map(|c| step_length(&xs[c], &dx_aff[c]))
            .fold(1.0f64, f64::min);
        let alpha_d_aff = (0..n_cones)
            .map(|c| step_length(&ss[c], &ds_aff[c]))
            .fold(1.0f64, f64::min);

        let mut gap_aff = 0.0;
        for c in 0..n_cones {
            let xa = &xs[c] + &dx_aff[c] * alpha_p_aff;
            let sa = &ss[c] + &ds_aff[c] * alpha_d_aff;
            gap_aff += (xa * sa).trace();
        }
        let mu_aff = (gap_aff / total_dim as f64).max(0.0);
        let mut sigma = ((mu_aff / mu).powi(3)).clamp(1e-8, 1.0);
        // keep the barrier up while stationarity or dual feasibility lag,
        // otherwise mu collapses before the residuals contract
        if rp_norm > 10.0 * tol * q_norm || rd_norm > 10.0 * tol {
            sigma = sigma.max(0.2);
        }

        // corrector
        let rhs_cor = rhs_with(sigma * mu, Some((&dx_aff, &ds_aff)));
        let (dy, dss) = solve_direction(&rhs_cor);
        let dxs: Vec<DMatrix<f64>> = (0..n_cones)
            .map(|c| {
                &sinvs[c] * (sigma * mu)
                    - &xs[c]
                    - hsym(&xs[c] * &dss[c] * &sinvs[c])
                    - hsym(&dx_aff[c] * &ds_aff[c] * &sinvs[c])
            })
            .collect();

        let alpha_p = (0..n_cones)
            .map(|c| step_length(&xs[c], &dxs[c]))
            .fold(1.0f64, f64::min);
        let alpha_d = (0..n_cones)
            .map(|c| step_length(&ss[c], &dss[c]))
            .fold(1.0f64, f64::min);

        // joint step, backtracked until no cone's average complementarity
        // collapses relative to the global mean
        let mut alpha = alpha_p.min(alpha_d);
        for _ in 0..40 {
            let mut cone_gaps = Vec::with_capacity(n_cones);
            let mut total = 0.0;
            for c in 0..n_cones {
                let xa = &xs[c] + &dxs[c] * alpha;
                let sa = &ss[c] + &dss[c] * alpha;
                let g = (xa * sa).trace();
                cone_gaps.push(g / cp.dims[c] as f64);
                total += g;
            }
            let mu_new = total / total_dim as f64;
            let balanced = cone_gaps.iter().all(|&g| g >= 1e-4 * mu_new);
            if balanced && mu_new <= 2.0 * mu + tol {
                break;
            }
            alpha *= 0.7;
        }

        if alpha < 1e-8 {
            small_steps += 1;
            if small_steps >= 3 {
                diag = format!(
                    "stalled: alpha={alpha:.2e} mu={mu:.3e} rp={rp_norm:.3e} rd={rd_norm:.3e}"
                );
                break;
            }
        } else {
            small_steps = 0;
        }

        for (yi, di) in y.iter_mut().zip(&dy) {
            *yi += alpha * di;
        }
        for c in 0..n_cones {
            xs[c] = hsym(&xs[c] + &dxs[c] * alpha);
            ss[c] = hsym(&ss[c] + &dss[c] * alpha);
        }

        if iter + 1 == MAX_ITER {
            diag = format!("iteration limit: mu={mu:.3e} rp={rp_norm:.3e} rd={rd_norm:.3e}");
        }
    }

    // accept a near-converged best iterate on degenerate problems; the
    // verification below still gates every feasibility claim
    if status == SdpStatus::NumericalFailure && best_merit <= (1e-6f64).max(tol) {
        status = match problem.objective {
            Objective::Feasibility => SdpStatus::Feasible,
            Objective::MaximizeTrace(_) => SdpStatus::Optimal,
        };
        diag = format!("{diag}; accepted best iterate (merit {best_merit:.3e})");
    }

    let assignment = extract(problem, &best_y);
    let objective_value = match problem.objective {
        Objective::Feasibility => None,
        Objective::MaximizeTrace(_) => {
            Some(cp.q.iter().zip(&best_y).map(|(qi, yi)| qi * yi).sum::<f64>() * cp.q_scale)
        }
    };

    // Re-verify feasible/optimal claims independently of the iteration.
    let mut margin = None;
    if matches!(status, SdpStatus::Feasible | SdpStatus::Optimal) {
        if let Ok(report) = problem.verify(&assignment) {
            margin = Some(report.worst());
            if !report.passes() {
                status = SdpStatus::NumericalFailure;
                diag = format!("{diag}; verification margin {:.3e}", report.worst());
            }
        }
    }

    SdpSolution {
        status,
        assignment,
        objective_value,
        min_eigenvalue_margin: margin,
        iterations,
        diagnostics: diag,
    }
}

fn extract(problem: &SdpProblem, y: &[f64]) -> Vec<DMatrix<f64>> {
    problem
        .vars
        .iter()
        .map(|v| mat_from_coords(v.kind, &y[v.offset..v.offset + v.kind.dim()]))
        .collect()
}
