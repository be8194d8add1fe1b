//! System models: dynamics, Jacobians, the two-channel measurement
//! partition, noise covariances, the two benchmark models, and polytopic
//! over-approximation of the Jacobian set.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} is not symmetric positive definite")]
    NotSpd(&'static str),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("envelope interval {index} has inverted bounds [{lo}, {hi}]")]
    InvertedEnvelope { index: usize, lo: f64, hi: f64 },
    #[error("envelope has {got} intervals, model has {expected} states")]
    EnvelopeLength { got: usize, expected: usize },
    #[error("polytope needs {required} vertices ({params} varying parameters), limit is {max}")]
    VertexOverflow {
        required: u64,
        params: usize,
        max: u64,
    },
    #[error("config: {0}")]
    Config(String),
}

/// Row convention for the 5-DOF kinematics. The published model prints the
/// x and y position rows identically; `Corrected` uses distinct rigid-body
/// rows and is the default everywhere quantitative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowConvention {
    #[default]
    Corrected,
    PaperDuplicate,
}

/// Discrete-time dynamics, one step per call.
#[derive(Debug, Clone)]
pub enum DynamicsKind {
    /// x' = A x.
    Linear { a: DMatrix<f64> },
    /// 13-state constant-acceleration kinematics with roll/heading angles.
    Kinematic5Dof { ts: f64, rows: RowConvention },
}

/// A discrete-time model observed through two measurement channels.
///
/// Immutable after construction; dynamics evaluation is pure.
#[derive(Debug, Clone)]
pub struct SystemModel {
    dynamics: DynamicsKind,
    b: DMatrix<f64>,
    c1: DMatrix<f64>,
    c2: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    ts: f64,
    default_envelope: Vec<(f64, f64)>,
}

impl SystemModel {
    pub fn new(
        dynamics: DynamicsKind,
        b: DMatrix<f64>,
        c1: DMatrix<f64>,
        c2: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        ts: f64,
        default_envelope: Vec<(f64, f64)>,
    ) -> Result<Self, ModelError> {
        let n_x = c1.ncols();
        if c2.ncols() != n_x || q.nrows() != n_x || q.ncols() != n_x || b.nrows() != n_x {
            return Err(ModelError::Dimension(format!(
                "C1/C2/Q/B must share the state dimension {n_x}"
            )));
        }
        let n_y = c1.nrows() + c2.nrows();
        if r.nrows() != n_y || r.ncols() != n_y {
            return Err(ModelError::Dimension(format!(
                "R must be {n_y}x{n_y} for the stacked output"
            )));
        }
        if linalg::asymmetry(&q) > 1e-12 * (1.0 + linalg::max_abs(&q))
            || q.clone().cholesky().is_none()
        {
            return Err(ModelError::NotSpd("Q"));
        }
        if linalg::asymmetry(&r) > 1e-12 * (1.0 + linalg::max_abs(&r))
            || r.clone().cholesky().is_none()
        {
            return Err(ModelError::NotSpd("R"));
        }
        if default_envelope.len() != n_x {
            return Err(ModelError::EnvelopeLength {
                got: default_envelope.len(),
                expected: n_x,
            });
        }
        let mut c = DMatrix::zeros(n_y, n_x);
        c.view_mut((0, 0), (c1.nrows(), n_x)).copy_from(&c1);
        c.view_mut((c1.nrows(), 0), (c2.nrows(), n_x)).copy_from(&c2);
        Ok(Self {
            dynamics,
            b,
            c1,
            c2,
            c,
            q,
            r,
            ts,
            default_envelope,
        })
    }

    /// The linear one-dimensional motion benchmark: position + velocity,
    /// position on channel 1, velocity on channel 2.
    pub fn linear_benchmark() -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.05, 0.0, 0.995]);
        Self::new(
            DynamicsKind::Linear { a },
            DMatrix::zeros(2, 0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::identity(2, 2) * 1e-4,
            DMatrix::identity(2, 2) * 1e-2,
            0.05,
            vec![(-1.0, 1.0); 2],
        )
        .expect("benchmark model is well formed")
    }

    /// The 13-state constant-acceleration kinematic benchmark.
    ///
    /// State: [x, y, z, phi, psi, vx, vy, vz, vphi, vpsi, ax, ay, az].
    /// Channel 1 reads angles, linear velocities and angular velocities
    /// (states 3..=9); channel 2 reads the position (states 0..=2).
    pub fn kinematic_5dof(rows: RowConvention) -> Self {
        let n = 13;
        let ts = 0.05;
        let mut c1 = DMatrix::zeros(7, n);
        for i in 0..7 {
            c1[(i, 3 + i)] = 1.0;
        }
        let mut c2 = DMatrix::zeros(3, n);
        for i in 0..3 {
            c2[(i, i)] = 1.0;
        }
        let mut envelope = vec![(-1.0, 1.0); n];
        envelope[3] = (-std::f64::consts::PI, std::f64::consts::PI);
        envelope[4] = (-std::f64::consts::PI, std::f64::consts::PI);
        for idx in 5..10 {
            envelope[idx] = (-2.0, 2.0);
        }
        Self::new(
            DynamicsKind::Kinematic5Dof { ts, rows },
            DMatrix::zeros(n, 0),
            c1,
            c2,
            DMatrix::identity(n, n) * 1e-4,
            DMatrix::identity(10, 10) * 1e-2,
            ts,
            envelope,
        )
        .expect("benchmark model is well formed")
    }

    pub fn n_x(&self) -> usize {
        self.c1.ncols()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_y1(&self) -> usize {
        self.c1.nrows()
    }
    pub fn n_y2(&self) -> usize {
        self.c2.nrows()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c1(&self) -> &DMatrix<f64> {
        &self.c1
    }
    pub fn c2(&self) -> &DMatrix<f64> {
        &self.c2
    }
    /// Stacked [C1; C2].
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    /// Full measurement covariance for the stacked output.
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn r11(&self) -> DMatrix<f64> {
        let m = self.n_y1();
        self.r.view((0, 0), (m, m)).clone_owned()
    }
    pub fn r22(&self) -> DMatrix<f64> {
        let m = self.n_y1();
        let p = self.n_y2();
        self.r.view((m, m), (p, p)).clone_owned()
    }
    pub fn ts(&self) -> f64 {
        self.ts
    }
    pub fn dynamics(&self) -> &DynamicsKind {
        &self.dynamics
    }
    pub fn default_envelope(&self) -> &[(f64, f64)] {
        &self.default_envelope
    }
    /// True when the Jacobian does not depend on the state.
    pub fn is_linear(&self) -> bool {
        matches!(self.dynamics, DynamicsKind::Linear { .. })
    }

    /// One dynamics step x -> f(x).
    pub fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.dynamics {
            DynamicsKind::Linear { a } => a * x,
            DynamicsKind::Kinematic5Dof { ts, rows } => {
                let (phi, psi) = (x[3], x[4]);
                let (vx, vy, vz) = (x[5], x[6], x[7]);
                let (vphi, vpsi) = (x[8], x[9]);
                let (ax, ay, az) = (x[10], x[11], x[12]);
                let (sphi, cphi) = phi.sin_cos();
                let (spsi, cpsi) = psi.sin_cos();
                let xdot = vx * cpsi - vy * spsi * cphi + vz * spsi * sphi;
                let ydot = match rows {
                    RowConvention::Corrected => vx * spsi + vy * cpsi * cphi - vz * cpsi * sphi,
                    RowConvention::PaperDuplicate => xdot,
                };
                let mut out = x.clone();
                out[0] += ts * xdot;
                out[1] += ts * ydot;
                out[2] += ts * (vy * sphi + vz * cphi);
                out[3] += ts * vphi;
                out[4] += ts * vpsi * cphi;
                out[5] += ts * ax;
                out[6] += ts * ay;
                out[7] += ts * az;
                out
            }
        }
    }

    /// Analytical Jacobian of `f` at `x`.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.dynamics {
            DynamicsKind::Linear { a } => a.clone(),
            DynamicsKind::Kinematic5Dof { ts, rows } => {
                let n = 13;
                let (phi, psi) = (x[3], x[4]);
                let (vx, vy, vz) = (x[5], x[6], x[7]);
                let vpsi = x[9];
                let (sphi, cphi) = phi.sin_cos();
                let (spsi, cpsi) = psi.sin_cos();
                let mut a = DMatrix::identity(n, n);
                let t = *ts;
                // x row
                a[(0, 3)] = t * (vy * spsi * sphi + vz * spsi * cphi);
                a[(0, 4)] = t * (-vx * spsi - vy * cpsi * cphi + vz * cpsi * sphi);
                a[(0, 5)] = t * cpsi;
                a[(0, 6)] = -t * spsi * cphi;
                a[(0, 7)] = t * spsi * sphi;
                // y row
                match rows {
                    RowConvention::Corrected => {
                        a[(1, 3)] = t * (-vy * cpsi * sphi - vz * cpsi * cphi);
                        a[(1, 4)] = t * (vx * cpsi - vy * spsi * cphi + vz * spsi * sphi);
                        a[(1, 5)] = t * spsi;
                        a[(1, 6)] = t * cpsi * cphi;
                        a[(1, 7)] = -t * cpsi * sphi;
                    }
                    RowConvention::PaperDuplicate => {
                        for col in 3..8 {
                            a[(1, col)] = a[(0, col)];
                        }
                    }
                }
                // z row
                a[(2, 3)] = t * (vy * cphi - vz * sphi);
                a[(2, 6)] = t * sphi;
                a[(2, 7)] = t * cphi;
                // angle rows
                a[(3, 8)] = t;
                a[(4, 3)] = -t * vpsi * sphi;
                a[(4, 9)] = t * cphi;
                // velocity rows
                a[(5, 10)] = t;
                a[(6, 11)] = t;
                a[(7, 12)] = t;
                a
            }
        }
    }
}

/// Central-difference Jacobian, the oracle for [`SystemModel::jacobian`].
pub fn jacobian_finite_diff(
    model: &SystemModel,
    x: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>, ModelError> {
    if h <= 0.0 {
        return Err(ModelError::BadStep(h));
    }
    let n = model.n_x();
    if x.len() != n {
        return Err(ModelError::Dimension(format!(
            "state has {} entries, model expects {n}",
            x.len()
        )));
    }
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[j] += h;
        lo[j] -= h;
        let col = (model.f(&hi) - model.f(&lo)) / (2.0 * h);
        out.set_column(j, &col);
    }
    Ok(out)
}

/// Vertex matrices over-approximating the set of linearized dynamics over a
/// state envelope. A constant Jacobian yields a single vertex.
#[derive(Debug, Clone)]
pub struct JacobianPolytope {
    pub vertices: Vec<DMatrix<f64>>,
    pub envelope: Vec<(f64, f64)>,
}

impl JacobianPolytope {
    /// Matrix at the parameter midpoints (entry-wise center of the box).
    pub fn center(&self) -> DMatrix<f64> {
        let n = self.vertices[0].nrows();
        let mut c = DMatrix::zeros(n, n);
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len() as f64
    }
}

// Sampling-derived bounds get a small inflation so that fresh uniform draws
// stay inside the hull.
const BOUND_INFLATION: f64 = 0.02;

/// Over-approximate { A(x) : x in envelope } by a box polytope.
///
/// Varying Jacobian entries are bounded by dense deterministic/random
/// sampling of the envelope; entries that are equal (or negated) as
/// functions of the state share one parameter. Vertices are all extreme
/// combinations of the parameters.
pub fn build_polytope(
    model: &SystemModel,
    envelope: &[(f64, f64)],
    max_vertices: u64,
) -> Result<JacobianPolytope, ModelError> {
    let n = model.n_x();
    if envelope.len() != n {
        return Err(ModelError::EnvelopeLength {
            got: envelope.len(),
            expected: n,
        });
    }
    for (i, &(lo, hi)) in envelope.iter().enumerate() {
        if lo > hi {
            return Err(ModelError::InvertedEnvelope { index: i, lo, hi });
        }
    }

    let samples = sample_envelope(envelope);
    let evals: Vec<DMatrix<f64>> = samples.iter().map(|x| model.jacobian(x)).collect();

    let mut lo = evals[0].clone();
    let mut hi = evals[0].clone();
    for a in &evals[1..] {
        lo.zip_apply(a, |l, v| *l = l.min(v));
        hi.zip_apply(a, |h, v| *h = h.max(v));
    }

    let scale = 1.0 + linalg::max_abs(&hi).max(linalg::max_abs(&lo));
    let var_tol = 1e-11 * scale;
    let mut varying: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if hi[(i, j)] - lo[(i, j)] > var_tol {
                varying.push((i, j));
            }
        }
    }

    // Group entries whose sampled traces are equal or exactly negated.
    let group_tol = 1e-9 * scale;
    let mut groups: Vec<Vec<((usize, usize), f64)>> = Vec::new();
    'entries: for &(i, j) in &varying {
        for group in groups.iter_mut() {
            let (rep, _) = group[0];
            let mut same = true;
            let mut negated = true;
            for a in &evals {
                let d = a[(i, j)] - a[rep];
                let s = a[(i, j)] + a[rep];
                if d.abs() > group_tol {
                    same = false;
                }
                if s.abs() > group_tol {
                    negated = false;
                }
                if !same && !negated {
                    break;
                }
            }
            if same || negated {
                group.push(((i, j), if same { 1.0 } else { -1.0 }));
                continue 'entries;
            }
        }
        groups.push(vec![((i, j), 1.0)]);
    }

    let params = groups.len();
    if params >= 63 {
        return Err(ModelError::VertexOverflow {
            required: u64::MAX,
            params,
            max: max_vertices,
        });
    }
    let required = 1u64 << params;
    if required > max_vertices {
        return Err(ModelError::VertexOverflow {
            required,
            params,
            max: max_vertices,
        });
    }

    let mut mid = lo.clone();
    mid.zip_apply(&hi, |m, h| *m = 0.5 * (*m + h));
    let mut rad = hi.clone();
    rad.zip_apply(&lo, |r, l| *r = 0.5 * (*r - l) * (1.0 + BOUND_INFLATION) + 1e-12);

    let mut vertices = Vec::with_capacity(required as usize);
    for mask in 0..required {
        let mut v = mid.clone();
        for (g, group) in groups.iter().enumerate() {
            let sigma = if mask >> g & 1 == 1 { 1.0 } else { -1.0 };
            for &((i, j), member_sign) in group {
                v[(i, j)] = mid[(i, j)] + sigma * member_sign * rad[(i, j)];
            }
        }
        vertices.push(v);
    }

    Ok(JacobianPolytope {
        vertices,
        envelope: envelope.to_vec(),
    })
}

/// Deterministic envelope sampling: biased random draws plus 1-D and 2-D
/// coordinate sweeps so single-coordinate and pairwise extremes are hit.
fn sample_envelope(envelope: &[(f64, f64)]) -> Vec<DVector<f64>> {
    let n = envelope.len();
    let mid = DVector::from_iterator(n, envelope.iter().map(|&(lo, hi)| 0.5 * (lo + hi)));
    let mut samples = vec![mid.clone()];

    let active: Vec<usize> = (0..n)
        .filter(|&i| envelope[i].1 - envelope[i].0 > 0.0)
        .collect();

    let sweep = |idx: usize, t: f64| -> f64 {
        let (lo, hi) = envelope[idx];
        lo + t * (hi - lo)
    };

    for &i in &active {
        for step in 0..33 {
            let mut x = mid.clone();
            x[i] = sweep(i, step as f64 / 32.0);
            samples.push(x);
        }
    }
    for (ai, &i) in active.iter().enumerate() {
        for &j in &active[ai + 1..] {
            for si in 0..17 {
                for sj in 0..17 {
                    let mut x = mid.clone();
                    x[i] = sweep(i, si as f64 / 16.0);
                    x[j] = sweep(j, sj as f64 / 16.0);
                    samples.push(x);
                }
            }
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(0x2c_001);
    for _ in 0..20_000 {
        let mut x = mid.clone();
        for &i in &active {
            let (lo, hi) = envelope[i];
            let u: f64 = rng.random();
            x[i] = if u < 0.3 {
                lo
            } else if u < 0.6 {
                hi
            } else {
                lo + rng.random::<f64>() * (hi - lo)
            };
        }
        samples.push(x);
    }
    samples
}

/// Declarative model description (JSON file). Matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(rename = "C1", default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<Vec<Vec<f64>>>,
    #[serde(rename = "C2", default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Q_diag", default, skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    #[serde(rename = "R_diag", default, skip_serializing_if = "Option::is_none")]
    pub r_diag: Option<Vec<f64>>,
    #[serde(rename = "Ts", default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Vec<[f64; 2]>>,
    /// 5-DOF only: "corrected" (default) or "paper_duplicate".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinematic_rows: Option<RowConvention>,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::Config(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ModelError::Config(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }

    /// Build the model, applying overrides on top of the named benchmark.
    pub fn build(&self) -> Result<SystemModel, ModelError> {
        let base = match self.kind.as_str() {
            "linear" => Some(SystemModel::linear_benchmark()),
            "kinematic5dof" => Some(SystemModel::kinematic_5dof(
                self.kinematic_rows.unwrap_or_default(),
            )),
            "custom_linear" => None,
            other => {
                return Err(ModelError::Config(format!(
                    "unknown model type {other:?} (expected linear | kinematic5dof | custom_linear)"
                )))
            }
        };

        let (dynamics, c1, c2, n_x) = match (&base, &self.a) {
            (Some(m), None) => (
                m.dynamics().clone(),
                self.c1
                    .as_deref()
                    .map(|r| rows_to_matrix(r, "C1"))
                    .transpose()?
                    .unwrap_or_else(|| m.c1().clone()),
                self.c2
                    .as_deref()
                    .map(|r| rows_to_matrix(r, "C2"))
                    .transpose()?
                    .unwrap_or_else(|| m.c2().clone()),
                m.n_x(),
            ),
            (None, Some(a_rows)) => {
                let a = rows_to_matrix(a_rows, "A")?;
                if a.nrows() != a.ncols() {
                    return Err(ModelError::Config("A must be square".into()));
                }
                let n = a.nrows();
                let c1 = rows_to_matrix(
                    self.c1
                        .as_deref()
                        .ok_or_else(|| ModelError::Config("custom_linear requires C1".into()))?,
                    "C1",
                )?;
                let c2 = rows_to_matrix(
                    self.c2
                        .as_deref()
                        .ok_or_else(|| ModelError::Config("custom_linear requires C2".into()))?,
                    "C2",
                )?;
                (DynamicsKind::Linear { a }, c1, c2, n)
            }
            (Some(_), Some(_)) => {
                return Err(ModelError::Config(
                    "A may only be given for custom_linear".into(),
                ))
            }
            (None, None) => {
                return Err(ModelError::Config("custom_linear requires A".into()));
            }
        };

        let n_y = c1.nrows() + c2.nrows();
        let q = match &self.q_diag {
            Some(d) => DMatrix::from_diagonal(&DVector::from_vec(d.clone())),
            None => base
                .as_ref()
                .map(|m| m.q().clone())
                .ok_or_else(|| ModelError::Config("custom_linear requires Q_diag".into()))?,
        };
        let r = match &self.r_diag {
            Some(d) => DMatrix::from_diagonal(&DVector::from_vec(d.clone())),
            None => base
                .as_ref()
                .map(|m| m.r().clone())
                .ok_or_else(|| ModelError::Config("custom_linear requires R_diag".into()))?,
        };
        if r.nrows() != n_y {
            return Err(ModelError::Config(format!(
                "R_diag has {} entries, stacked output needs {n_y}",
                r.nrows()
            )));
        }
        let ts = self
            .ts
            .or(base.as_ref().map(|m| m.ts()))
            .ok_or_else(|| ModelError::Config("custom_linear requires Ts".into()))?;
        let b = match &self.b {
            Some(rows) => rows_to_matrix(rows, "B")?,
            None => base
                .as_ref()
                .map(|m| m.b().clone())
                .unwrap_or_else(|| DMatrix::zeros(n_x, 0)),
        };
        let envelope = match &self.envelope {
            Some(e) => e.iter().map(|&[lo, hi]| (lo, hi)).collect(),
            None => base
                .as_ref()
                .map(|m| m.default_envelope().to_vec())
                .unwrap_or_else(|| vec![(-1.0, 1.0); n_x]),
        };
        SystemModel::new(dynamics, b, c1, c2, q, r, ts, envelope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;

    fn random_state(rng: &mut StdRng, model: &SystemModel) -> DVector<f64> {
        DVector::from_iterator(
            model.n_x(),
            (0..model.n_x()).map(|_| rng.random_range(-1.5..1.5)),
        )
    }

    #[test]
    fn linear_benchmark_matches_published_matrices() {
        let m = SystemModel::linear_benchmark();
        let a = m.jacobian(&DVector::zeros(2));
        assert_eq!(a[(0, 1)], 0.05);
        assert_eq!(a[(1, 1)], 0.995);
        assert_eq!(m.q()[(0, 0)], 1e-4);
        assert_eq!(m.r()[(1, 1)], 1e-2);
        assert_eq!(m.ts(), 0.05);
        let fx = m.f(&DVector::from_vec(vec![1.0, 1.0]));
        assert_relative_eq!(fx[0], 1.05, epsilon = 1e-15);
        assert_relative_eq!(fx[1], 0.995, epsilon = 1e-15);
    }

    #[test]
    fn linear_jacobian_is_constant() {
        let m = SystemModel::linear_benchmark();
        let mut rng = StdRng::seed_from_u64(7);
        let a0 = m.jacobian(&DVector::zeros(2));
        for _ in 0..5 {
            let x = random_state(&mut rng, &m);
            assert_eq!(m.jacobian(&x), a0);
        }
    }

    #[test]
    fn kinematic_positions_fixed_at_zero_velocity() {
        let m = SystemModel::kinematic_5dof(RowConvention::Corrected);
        let mut x = DVector::zeros(13);
        x[0] = 0.4;
        x[3] = 0.9;
        x[4] = -0.3;
        x[10] = 0.5; // nonzero acceleration only moves velocities
        let fx = m.f(&x);
        for idx in 0..5 {
            assert_eq!(fx[idx], x[idx]);
        }
        assert_relative_eq!(fx[5], 0.025, epsilon = 1e-15);
    }

    #[test]
    fn kinematic_jacobian_at_zero_angles() {
        let m = SystemModel::kinematic_5dof(RowConvention::Corrected);
        let mut x = DVector::zeros(13);
        x[5] = 0.7; // vx
        x[6] = -0.2; // vy
        x[7] = 0.4; // vz
        let a = m.jacobian(&x);
        let t = m.ts();
        assert_relative_eq!(a[(0, 5)], t, epsilon = 1e-15);
        assert_relative_eq!(a[(0, 6)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(a[(1, 5)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(a[(1, 6)], t, epsilon = 1e-15);
        assert_relative_eq!(a[(2, 7)], t, epsilon = 1e-15);
        assert_relative_eq!(a[(4, 9)], t, epsilon = 1e-15);
        // velocity couplings at zero angles
        assert_relative_eq!(a[(0, 4)], -t * x[6], epsilon = 1e-15);
        assert_relative_eq!(a[(1, 4)], t * x[5], epsilon = 1e-15);
        assert_relative_eq!(a[(2, 3)], t * x[6], epsilon = 1e-15);
    }

    #[test]
    fn c2_selects_position() {
        let m = SystemModel::kinematic_5dof(RowConvention::Corrected);
        let x = DVector::from_iterator(13, (0..13).map(|i| i as f64));
        let y2 = m.c2() * &x;
        assert_eq!(y2.as_slice(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn finite_diff_matches_analytical_jacobian() {
        let mut rng = StdRng::seed_from_u64(42);
        for model in [
            SystemModel::linear_benchmark(),
            SystemModel::kinematic_5dof(RowConvention::Corrected),
            SystemModel::kinematic_5dof(RowConvention::PaperDuplicate),
        ] {
            for _ in 0..100 {
                let x = random_state(&mut rng, &model);
                let fd = jacobian_finite_diff(&model, &x, 1e-6).unwrap();
                let err = linalg::max_abs(&(model.jacobian(&x) - fd));
                assert!(err <= 1e-5, "jacobian mismatch {err}");
            }
        }
    }

    #[test]
    fn finite_diff_rejects_zero_step() {
        let m = SystemModel::linear_benchmark();
        assert!(jacobian_finite_diff(&m, &DVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn polytope_of_linear_model_is_single_vertex() {
        let m = SystemModel::linear_benchmark();
        let p = build_polytope(&m, m.default_envelope(), 1024).unwrap();
        assert_eq!(p.vertices.len(), 1);
        assert_relative_eq!(
            (p.vertices[0].clone() - m.jacobian(&DVector::zeros(2))).norm(),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn polytope_overflow_errors() {
        let m = SystemModel::kinematic_5dof(RowConvention::Corrected);
        let err = build_polytope(&m, m.default_envelope(), 1).unwrap_err();
        assert!(matches!(err, ModelError::VertexOverflow { .. }));
    }

    #[test]
    fn polytope_soundness_sampled() {
        let m = SystemModel::kinematic_5dof(RowConvention::Corrected);
        let envelope = m.default_envelope().to_vec();
        let p = build_polytope(&m, &envelope, 1 << 15).unwrap();
        assert_eq!(p.vertices.len(), 1 << 14);

        let mut lo = p.vertices[0].clone();
        let mut hi = p.vertices[0].clone();
        for v in &p.vertices[1..] {
            lo.zip_apply(v, |l, x| *l = l.min(x));
            hi.zip_apply(v, |h, x| *h = h.max(x));
        }
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..10_000 {
            let x = DVector::from_iterator(
                13,
                envelope.iter().map(|&(a, b)| rng.random_range(a..=b)),
            );
            let a = m.jacobian(&x);
            for i in 0..13 {
                for j in 0..13 {
                    assert!(
                        a[(i, j)] >= lo[(i, j)] - 1e-12 && a[(i, j)] <= hi[(i, j)] + 1e-12,
                        "entry ({i},{j}) = {} outside [{}, {}]",
                        a[(i, j)],
                        lo[(i, j)],
                        hi[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn paper_duplicate_rows_shrink_polytope() {
        let m = SystemModel::kinematic_5dof(RowConvention::PaperDuplicate);
        let p = build_polytope(&m, m.default_envelope(), 1 << 15).unwrap();
        // duplicated y-row entries share parameters with the x-row
        assert!(p.vertices.len() < 1 << 14);
    }

    #[test]
    fn config_roundtrip_linear() {
        let cfg = ModelConfig::from_json(r#"{ "type": "linear" }"#).unwrap();
        let m = cfg.build().unwrap();
        assert_eq!(m.n_x(), 2);
        assert!(m.is_linear());
    }

    #[test]
    fn config_custom_linear_requires_matrices() {
        let cfg = ModelConfig::from_json(r#"{ "type": "custom_linear" }"#).unwrap();
        assert!(cfg.build().is_err());
        let cfg = ModelConfig::from_json(
            r#"{
              "type": "custom_linear",
              "A": [[2.0]], "C1": [[1.0]], "C2": [[1.0]],
              "Q_diag": [1.0], "R_diag": [1.0, 1.0], "Ts": 1.0
            }"#,
        )
        .unwrap();
        let m = cfg.build().unwrap();
        assert_eq!(m.n_x(), 1);
        assert_eq!(m.n_y(), 2);
    }

    #[test]
    fn config_rejects_bad_kind() {
        let cfg = ModelConfig::from_json(r#"{ "type": "nope" }"#).unwrap();
        assert!(cfg.build().is_err());
    }

    #[test]
    fn model_noise_matrices_are_spd() {
        for m in [
            SystemModel::linear_benchmark(),
            SystemModel::kinematic_5dof(RowConvention::Corrected),
        ] {
            assert!(m.q().clone().cholesky().is_some());
            assert!(m.r().clone().cholesky().is_some());
            assert!(m.r11().cholesky().is_some());
            assert!(m.r22().cholesky().is_some());
        }
    }
}
