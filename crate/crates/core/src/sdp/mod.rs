//! Semidefinite feasibility and trace-maximization backend.
//!
//! Problems are stated in LMI form: named matrix variable blocks, a list of
//! symmetric constraint blocks affine in the variables (each required PSD),
//! and an objective that either maximizes the trace of one variable or is
//! pure feasibility. `solve` runs an embedded primal-dual interior-point
//! method for the PSD cone; `verify` re-checks any assignment with plain
//! symmetric eigendecompositions and no solver involvement.

mod ipm;

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("unknown variable id {0}")]
    UnknownVar(usize),
    #[error("constraint {label}: {msg}")]
    BadConstraint { label: String, msg: String },
    #[error("assignment for {name} has wrong shape")]
    BadAssignment { name: String },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Handle to a declared variable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Symmetric(usize),
    Rectangular(usize, usize),
}

impl VarKind {
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            VarKind::Symmetric(n) => (n, n),
            VarKind::Rectangular(r, c) => (r, c),
        }
    }
    /// Number of scalar coordinates.
    pub fn dim(&self) -> usize {
        match *self {
            VarKind::Symmetric(n) => n * (n + 1) / 2,
            VarKind::Rectangular(r, c) => r * c,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct VarDef {
    pub name: String,
    pub kind: VarKind,
    pub offset: usize,
}

/// One affine term of a constraint block: `coeff * L * V^(T) * R` placed
/// with its top-left corner at (row, col). With `hermitian_pair` the
/// transposed image is added at (col, row) as well.
#[derive(Debug, Clone)]
pub(crate) struct Term {
    pub var: usize,
    pub coeff: f64,
    pub row: usize,
    pub col: usize,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub transpose_var: bool,
    pub hermitian_pair: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Constraint {
    pub label: String,
    pub dim: usize,
    pub constant: DMatrix<f64>,
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Feasibility,
    MaximizeTrace(VarId),
}

/// An SDP in LMI form. Every constraint block is symmetric by construction
/// for any variable assignment.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub(crate) vars: Vec<VarDef>,
    pub(crate) constraints: Vec<Constraint>,
    pub(crate) objective: Objective,
    pub(crate) n_coords: usize,
}

impl Default for SdpProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl SdpProblem {
    pub fn new() -> Self {
        Self {
            vars: Vec::new(),
            constraints: Vec::new(),
            objective: Objective::Feasibility,
            n_coords: 0,
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind) -> VarId {
        let offset = self.n_coords;
        self.n_coords += kind.dim();
        self.vars.push(VarDef {
            name: name.into(),
            kind,
            offset,
        });
        VarId(self.vars.len() - 1)
    }

    pub fn set_objective(&mut self, objective: Objective) {
        self.objective = objective;
    }

    pub fn var_kind(&self, id: VarId) -> VarKind {
        self.vars[id.0].kind
    }

    pub fn var_name(&self, id: VarId) -> &str {
        &self.vars[id.0].name
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraint_label(&self, idx: usize) -> &str {
        &self.constraints[idx].label
    }

    pub fn add_constraint(&mut self, block: LmiBlock) {
        self.constraints.push(block.into_constraint());
    }

    /// Evaluate one constraint block at an assignment (one matrix per
    /// declared variable, in declaration order).
    pub fn eval_constraint(
        &self,
        idx: usize,
        assignment: &[DMatrix<f64>],
    ) -> Result<DMatrix<f64>, SdpError> {
        self.check_assignment(assignment)?;
        Ok(self.eval_unchecked(idx, assignment))
    }

    fn check_assignment(&self, assignment: &[DMatrix<f64>]) -> Result<(), SdpError> {
        if assignment.len() != self.vars.len() {
            return Err(SdpError::BadAssignment {
                name: format!("expected {} matrices, got {}", self.vars.len(), assignment.len()),
            });
        }
        for (v, m) in self.vars.iter().zip(assignment) {
            if (m.nrows(), m.ncols()) != v.kind.shape() {
                return Err(SdpError::BadAssignment {
                    name: v.name.clone(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn eval_unchecked(&self, idx: usize, assignment: &[DMatrix<f64>]) -> DMatrix<f64> {
        let c = &self.constraints[idx];
        let mut out = c.constant.clone();
        for t in &c.terms {
            let v = &assignment[t.var];
            let vt = if t.transpose_var {
                v.transpose()
            } else {
                v.clone()
            };
            let p = &t.left * vt * &t.right * t.coeff;
            out.view_mut((t.row, t.col), (p.nrows(), p.ncols()))
                .zip_apply(&p, |o, x| *o += x);
            if t.hermitian_pair {
                let pt = p.transpose();
                out.view_mut((t.col, t.row), (pt.nrows(), pt.ncols()))
                    .zip_apply(&pt, |o, x| *o += x);
            }
        }
        linalg::symmetrize(&out)
    }

    /// Per-constraint minimum eigenvalues of an assignment, computed by
    /// symmetric eigendecomposition.
    pub fn verify(&self, assignment: &[DMatrix<f64>]) -> Result<VerifyReport, SdpError> {
        self.check_assignment(assignment)?;
        let margins = (0..self.constraints.len())
            .map(|idx| {
                let m = self.eval_unchecked(idx, assignment);
                ConstraintMargin {
                    label: self.constraints[idx].label.clone(),
                    min_eigenvalue: linalg::min_eig(&m),
                    scale: linalg::max_abs(&m).max(1.0),
                }
            })
            .collect();
        Ok(VerifyReport { margins })
    }

    /// Dump the scalarized problem in a sparse text format, one line per
    /// coefficient: `constraint block_row block_col variable coefficient`
    /// (variable `CONST` for the constant part).
    pub fn dump(&self, mut w: impl Write) -> Result<(), SdpError> {
        writeln!(w, "# sdp dump: {} vars, {} constraints", self.n_coords, self.constraints.len())?;
        for v in &self.vars {
            let (r, c) = v.kind.shape();
            let kind = match v.kind {
                VarKind::Symmetric(_) => "sym",
                VarKind::Rectangular(..) => "rect",
            };
            writeln!(w, "var {} {} {} {}", v.name, kind, r, c)?;
        }
        for (ci, cons) in self.constraints.iter().enumerate() {
            writeln!(w, "constraint {} dim {} # {}", ci, cons.dim, cons.label)?;
            for i in 0..cons.dim {
                for j in i..cons.dim {
                    let v = cons.constant[(i, j)];
                    if v != 0.0 {
                        writeln!(w, "{ci} {i} {j} CONST {v}")?;
                    }
                }
            }
            // expand each term entry-wise against the variable coordinates
            for t in &cons.terms {
                let var = &self.vars[t.var];
                let (vr, vc) = var.kind.shape();
                for p in 0..vr {
                    for q in 0..vc {
                        let mut probe = DMatrix::zeros(vr, vc);
                        probe[(p, q)] = 1.0;
                        if let VarKind::Symmetric(_) = var.kind {
                            probe[(q, p)] = 1.0;
                        }
                        if matches!(var.kind, VarKind::Symmetric(_)) && p > q {
                            continue;
                        }
                        let vt = if t.transpose_var {
                            probe.transpose()
                        } else {
                            probe.clone()
                        };
                        let img = &t.left * vt * &t.right * t.coeff;
                        for bi in 0..img.nrows() {
                            for bj in 0..img.ncols() {
                                let val = img[(bi, bj)];
                                if val != 0.0 {
                                    writeln!(
                                        w,
                                        "{ci} {} {} {}[{p},{q}] {val}",
                                        t.row + bi,
                                        t.col + bj,
                                        var.name
                                    )?;
                                    if t.hermitian_pair {
                                        writeln!(
                                            w,
                                            "{ci} {} {} {}[{p},{q}] {val}",
                                            t.col + bj,
                                            t.row + bi,
                                            var.name
                                        )?;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Solve with the embedded interior-point method.
    pub fn solve(&self, tol: f64) -> Result<SdpSolution, SdpError> {
        if tol <= 0.0 {
            return Err(SdpError::BadTolerance(tol));
        }
        for c in &self.constraints {
            if c.constant.nrows() != c.dim || c.constant.ncols() != c.dim {
                return Err(SdpError::BadConstraint {
                    label: c.label.clone(),
                    msg: "constant block has wrong shape".into(),
                });
            }
            for t in &c.terms {
                if t.var >= self.vars.len() {
                    return Err(SdpError::UnknownVar(t.var));
                }
                let (vr, vc) = self.vars[t.var].kind.shape();
                let (ar, ac) = if t.transpose_var { (vc, vr) } else { (vr, vc) };
                if t.left.ncols() != ar || t.right.nrows() != ac {
                    return Err(SdpError::BadConstraint {
                        label: c.label.clone(),
                        msg: format!("term on {} has inconsistent shapes", self.vars[t.var].name),
                    });
                }
                if t.row + t.left.nrows() > c.dim || t.col + t.right.ncols() > c.dim {
                    return Err(SdpError::BadConstraint {
                        label: c.label.clone(),
                        msg: "term placement exceeds block".into(),
                    });
                }
            }
        }
        Ok(ipm::solve(self, tol))
    }
}

/// Builder for one symmetric PSD constraint block.
pub struct LmiBlock {
    label: String,
    dim: usize,
    constant: DMatrix<f64>,
    terms: Vec<Term>,
}

impl LmiBlock {
    pub fn new(dim: usize, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            dim,
            constant: DMatrix::zeros(dim, dim),
            terms: Vec::new(),
        }
    }

    /// Add a constant block at (row, col); off-diagonal placements get the
    /// mirrored transpose automatically.
    pub fn constant(mut self, row: usize, col: usize, m: &DMatrix<f64>) -> Self {
        self.constant
            .view_mut((row, col), (m.nrows(), m.ncols()))
            .zip_apply(m, |o, x| *o += x);
        if row != col {
            let mt = m.transpose();
            self.constant
                .view_mut((col, row), (mt.nrows(), mt.ncols()))
                .zip_apply(&mt, |o, x| *o += x);
        }
        self
    }

    /// coeff * L V R placed at (row, col) together with its mirror at
    /// (col, row). Use for off-diagonal placements.
    pub fn pair_term(
        mut self,
        var: VarId,
        coeff: f64,
        row: usize,
        col: usize,
        left: DMatrix<f64>,
        right: DMatrix<f64>,
    ) -> Self {
        self.terms.push(Term {
            var: var.0,
            coeff,
            row,
            col,
            left,
            right,
            transpose_var: false,
            hermitian_pair: true,
        });
        self
    }

    /// coeff * L V R placed at (row, col) only; the caller guarantees the
    /// image is symmetric (diagonal placements of symmetric variables).
    pub fn sym_term(
        mut self,
        var: VarId,
        coeff: f64,
        row: usize,
        left: DMatrix<f64>,
        right: DMatrix<f64>,
    ) -> Self {
        self.terms.push(Term {
            var: var.0,
            coeff,
            row,
            col: row,
            left,
            right,
            transpose_var: false,
            hermitian_pair: false,
        });
        self
    }

    /// coeff * V placed on the diagonal entries (row..row+n) for a
    /// symmetric variable of size n.
    pub fn diag_var(self, var: VarId, coeff: f64, row: usize, n: usize) -> Self {
        self.sym_term(var, coeff, row, DMatrix::identity(n, n), DMatrix::identity(n, n))
    }

    /// coeff * v * I_n on the diagonal starting at `row`, for a 1x1 variable:
    /// one term per diagonal entry keeps every term rank-consistent.
    pub fn scalar_times_identity(mut self, var: VarId, coeff: f64, row: usize, n: usize) -> Self {
        for k in 0..n {
            let mut left = DMatrix::zeros(n, 1);
            left[(k, 0)] = 1.0;
            let mut right = DMatrix::zeros(1, n);
            right[(0, k)] = 1.0;
            self.terms.push(Term {
                var: var.0,
                coeff,
                row,
                col: row,
                left,
                right,
                transpose_var: false,
                hermitian_pair: false,
            });
        }
        self
    }

    fn into_constraint(self) -> Constraint {
        Constraint {
            label: self.label,
            dim: self.dim,
            constant: linalg::symmetrize(&self.constant),
            terms: self.terms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Feasible,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl fmt::Display for SdpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SdpStatus::Optimal => "optimal",
            SdpStatus::Feasible => "feasible",
            SdpStatus::Infeasible => "infeasible",
            SdpStatus::Unbounded => "unbounded",
            SdpStatus::NumericalFailure => "numerical_failure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintMargin {
    pub label: String,
    pub min_eigenvalue: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub margins: Vec<ConstraintMargin>,
}

impl VerifyReport {
    pub fn worst(&self) -> f64 {
        self.margins
            .iter()
            .map(|m| m.min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }
    /// All margins at least -1e-7 relative to each block's scale.
    pub fn passes(&self) -> bool {
        self.margins
            .iter()
            .all(|m| m.min_eigenvalue >= -1e-7 * m.scale)
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// One matrix per declared variable, in declaration order.
    pub assignment: Vec<DMatrix<f64>>,
    pub objective_value: Option<f64>,
    pub min_eigenvalue_margin: Option<f64>,
    pub iterations: usize,
    pub diagnostics: String,
}

impl SdpSolution {
    pub fn var(&self, id: VarId) -> &DMatrix<f64> {
        &self.assignment[id.0]
    }
}
