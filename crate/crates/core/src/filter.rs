//! Two-channel (E)KF recursions: prediction, arrival-dependent update, and
//! the covariance recursion used by the stability analysis.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::model::SystemModel;

/// Condition-number ceiling beyond which an innovation covariance is
/// treated as singular.
pub const INNOVATION_COND_LIMIT: f64 = 1e14;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance asymmetry {0:.3e} exceeds tolerance")]
    Asymmetric(f64),
    #[error("covariance lost positive semidefiniteness (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },
    #[error("singular innovation covariance in {block} (condition {cond:.3e})")]
    SingularInnovation { block: &'static str, cond: f64 },
    #[error("measurement y{channel} must be present iff gamma{channel} is set")]
    InconsistentArrival { channel: u8 },
}

/// Which channels delivered a measurement this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrivalPair {
    pub gamma1: bool,
    pub gamma2: bool,
}

impl ArrivalPair {
    pub const fn new(gamma1: bool, gamma2: bool) -> Self {
        Self { gamma1, gamma2 }
    }
    pub const NONE: ArrivalPair = ArrivalPair::new(false, false);
    pub const BOTH: ArrivalPair = ArrivalPair::new(true, true);
}

/// State estimate and covariance at a time step.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

impl FilterState {
    /// Validates symmetry and positive semidefiniteness of `p`.
    pub fn new(x_hat: DVector<f64>, p: DMatrix<f64>, k: usize) -> Result<Self, FilterError> {
        if p.nrows() != x_hat.len() || p.ncols() != x_hat.len() {
            return Err(FilterError::Dimension(format!(
                "P is {}x{}, state has {} entries",
                p.nrows(),
                p.ncols(),
                x_hat.len()
            )));
        }
        let scale = 1.0 + linalg::max_abs(&p);
        let asym = linalg::asymmetry(&p);
        if asym > 1e-12 * scale {
            return Err(FilterError::Asymmetric(asym));
        }
        let p = linalg::symmetrize(&p);
        check_psd(&p)?;
        Ok(Self { x_hat, p, k })
    }
}

fn check_psd(p: &DMatrix<f64>) -> Result<(), FilterError> {
    let scale = linalg::max_abs(p);
    if linalg::is_psd_within(p, 1e-10 * scale + f64::MIN_POSITIVE) {
        return Ok(());
    }
    Err(FilterError::NotPsd {
        min_eig: linalg::min_eig(p),
    })
}

/// Time update: x' = f(x) + B u, P' = A P A^T + Q with A the Jacobian at x.
pub fn predict(
    model: &SystemModel,
    s: &FilterState,
    u: &DVector<f64>,
) -> Result<FilterState, FilterError> {
    if s.x_hat.len() != model.n_x() {
        return Err(FilterError::Dimension(format!(
            "state has {} entries, model expects {}",
            s.x_hat.len(),
            model.n_x()
        )));
    }
    if u.len() != model.n_u() {
        return Err(FilterError::Dimension(format!(
            "input has {} entries, model expects {}",
            u.len(),
            model.n_u()
        )));
    }
    let a = model.jacobian(&s.x_hat);
    let mut x = model.f(&s.x_hat);
    if model.n_u() > 0 {
        x += model.b() * u;
    }
    let mut p = linalg::sandwich(&a, &s.p) + model.q();
    linalg::symmetrize_in_place(&mut p);
    check_psd(&p)?;
    Ok(FilterState {
        x_hat: x,
        p,
        k: s.k + 1,
    })
}

struct Correction {
    gain: DMatrix<f64>,
    c: DMatrix<f64>,
}

/// Kalman gain K = P C^T S^{-1} with S = C P C^T + R, via Cholesky.
fn gain_for(
    p: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    block: &'static str,
) -> Result<Correction, FilterError> {
    let mut s = linalg::sandwich(c, p) + r;
    linalg::symmetrize_in_place(&mut s);
    let cond = linalg::spd_condition(&s);
    if !cond.is_finite() || cond > INNOVATION_COND_LIMIT {
        return Err(FilterError::SingularInnovation { block, cond });
    }
    let cp = c * p;
    let sol = linalg::spd_solve(&s, &cp)
        .ok_or(FilterError::SingularInnovation { block, cond })?;
    Ok(Correction {
        gain: sol.transpose(),
        c: c.clone(),
    })
}

/// Measurement update with the three-branch correction: both channels use
/// the stacked (C, R); single channels use (C1, R11) or (C2, R22); no
/// arrivals leave the state untouched.
pub fn update_2c(
    model: &SystemModel,
    s: &FilterState,
    arrivals: ArrivalPair,
    y1: Option<&DVector<f64>>,
    y2: Option<&DVector<f64>>,
) -> Result<FilterState, FilterError> {
    if arrivals.gamma1 != y1.is_some() {
        return Err(FilterError::InconsistentArrival { channel: 1 });
    }
    if arrivals.gamma2 != y2.is_some() {
        return Err(FilterError::InconsistentArrival { channel: 2 });
    }
    if let Some(y) = y1 {
        if y.len() != model.n_y1() {
            return Err(FilterError::Dimension(format!(
                "y1 has {} entries, channel 1 expects {}",
                y.len(),
                model.n_y1()
            )));
        }
    }
    if let Some(y) = y2 {
        if y.len() != model.n_y2() {
            return Err(FilterError::Dimension(format!(
                "y2 has {} entries, channel 2 expects {}",
                y.len(),
                model.n_y2()
            )));
        }
    }

    let (correction, y) = match (y1, y2) {
        (Some(y1), Some(y2)) => {
            let mut y = DVector::zeros(model.n_y());
            y.rows_mut(0, model.n_y1()).copy_from(y1);
            y.rows_mut(model.n_y1(), model.n_y2()).copy_from(y2);
            (gain_for(&s.p, model.c(), model.r(), "stacked (C, R)")?, y)
        }
        (Some(y1), None) => (
            gain_for(&s.p, model.c1(), &model.r11(), "channel 1 (C1, R11)")?,
            y1.clone(),
        ),
        (None, Some(y2)) => (
            gain_for(&s.p, model.c2(), &model.r22(), "channel 2 (C2, R22)")?,
            y2.clone(),
        ),
        (None, None) => return Ok(s.clone()),
    };

    let innovation = y - &correction.c * &s.x_hat;
    let x = &s.x_hat + &correction.gain * innovation;
    let mut p = &s.p - &correction.gain * &correction.c * &s.p;
    linalg::symmetrize_in_place(&mut p);
    check_psd(&p)?;
    Ok(FilterState { x_hat: x, p, k: s.k })
}

/// One step of the predicted-covariance recursion for a given arrival
/// pattern: P_{k+1} = A (P - corrections) A^T + Q.
pub fn covariance_recursion(
    model: &SystemModel,
    a_k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    arrivals: ArrivalPair,
) -> Result<DMatrix<f64>, FilterError> {
    let n = model.n_x();
    if a_k.nrows() != n || a_k.ncols() != n || p.nrows() != n || p.ncols() != n {
        return Err(FilterError::Dimension(
            "A_k and P must match the state dimension".into(),
        ));
    }
    let corrected = match (arrivals.gamma1, arrivals.gamma2) {
        (false, false) => p.clone(),
        (true, true) => {
            let c = gain_for(p, model.c(), model.r(), "stacked (C, R)")?;
            p - c.gain * c.c * p
        }
        (true, false) => {
            let c = gain_for(p, model.c1(), &model.r11(), "channel 1 (C1, R11)")?;
            p - c.gain * c.c * p
        }
        (false, true) => {
            let c = gain_for(p, model.c2(), &model.r22(), "channel 2 (C2, R22)")?;
            p - c.gain * c.c * p
        }
    };
    let mut out = linalg::sandwich(a_k, &corrected) + model.q();
    linalg::symmetrize_in_place(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_psd(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * 1e-6
    }

    /// Textbook single-sensor Kalman update, written independently of the
    /// implementation path it checks.
    fn oracle_update(
        p: &DMatrix<f64>,
        c: &DMatrix<f64>,
        r: &DMatrix<f64>,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let s = c * p * c.transpose() + r;
        let k = p * c.transpose() * s.try_inverse().unwrap();
        let x_new = x + &k * (y - c * x);
        let p_new = p - &k * c * p;
        (x_new, crate::linalg::symmetrize(&p_new))
    }

    #[test]
    fn predict_from_zero_covariance() {
        let m = SystemModel::linear_benchmark();
        let s = FilterState::new(DVector::from_vec(vec![1.0, 1.0]), DMatrix::zeros(2, 2), 0)
            .unwrap();
        let out = predict(&m, &s, &DVector::zeros(0)).unwrap();
        assert_relative_eq!(out.x_hat[0], 1.05, epsilon = 1e-15);
        assert_relative_eq!(out.x_hat[1], 0.995, epsilon = 1e-15);
        assert_relative_eq!((out.p - m.q()).norm(), 0.0, epsilon = 1e-15);
        assert_eq!(out.k, 1);
    }

    #[test]
    fn predict_dominates_process_noise() {
        let m = SystemModel::linear_benchmark();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let s = FilterState::new(DVector::zeros(2), random_psd(&mut rng, 2), 0).unwrap();
            let out = predict(&m, &s, &DVector::zeros(0)).unwrap();
            assert!(crate::linalg::min_eig(&(out.p - m.q())) >= -1e-12);
        }
    }

    #[test]
    fn kinematic_predict_at_origin_is_fixed() {
        let m = crate::model::SystemModel::kinematic_5dof(Default::default());
        let s = FilterState::new(DVector::zeros(13), DMatrix::identity(13, 13), 0).unwrap();
        let out = predict(&m, &s, &DVector::zeros(0)).unwrap();
        assert_eq!(out.x_hat, DVector::zeros(13));
    }

    #[test]
    fn no_arrivals_is_identity() {
        let m = SystemModel::linear_benchmark();
        let mut rng = StdRng::seed_from_u64(5);
        let s = FilterState::new(
            DVector::from_vec(vec![0.3, -0.7]),
            random_psd(&mut rng, 2),
            4,
        )
        .unwrap();
        let out = update_2c(&m, &s, ArrivalPair::NONE, None, None).unwrap();
        assert_eq!(out.x_hat, s.x_hat);
        assert_eq!(out.p, s.p);
        assert_eq!(out.k, 4);
    }

    #[test]
    fn single_channel_update_matches_oracle() {
        let m = SystemModel::linear_benchmark();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let p = random_psd(&mut rng, 2);
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_vec(vec![rng.random_range(-1.0..1.0)]);
            let s = FilterState::new(x.clone(), p.clone(), 0).unwrap();
            let got = update_2c(&m, &s, ArrivalPair::new(true, false), Some(&y), None).unwrap();
            let (ox, op) = oracle_update(&p, m.c1(), &m.r11(), &x, &y);
            assert_relative_eq!((got.x_hat - ox).norm(), 0.0, epsilon = 1e-11);
            assert_relative_eq!((got.p - op).norm(), 0.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn both_channels_update_matches_stacked_oracle() {
        let m = SystemModel::linear_benchmark();
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..50 {
            let p = random_psd(&mut rng, 2);
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let y1 = DVector::from_vec(vec![rng.random_range(-1.0..1.0)]);
            let y2 = DVector::from_vec(vec![rng.random_range(-1.0..1.0)]);
            let s = FilterState::new(x.clone(), p.clone(), 0).unwrap();
            let got = update_2c(&m, &s, ArrivalPair::BOTH, Some(&y1), Some(&y2)).unwrap();
            let y = DVector::from_vec(vec![y1[0], y2[0]]);
            let (ox, op) = oracle_update(&p, m.c(), m.r(), &x, &y);
            assert_relative_eq!((got.x_hat - ox).norm(), 0.0, epsilon = 1e-11);
            assert_relative_eq!((got.p - op).norm(), 0.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn update_never_increases_covariance() {
        let m = SystemModel::linear_benchmark();
        let mut rng = StdRng::seed_from_u64(17);
        let patterns = [
            ArrivalPair::NONE,
            ArrivalPair::new(true, false),
            ArrivalPair::new(false, true),
            ArrivalPair::BOTH,
        ];
        for _ in 0..100 {
            let p = random_psd(&mut rng, 2);
            let s = FilterState::new(DVector::zeros(2), p.clone(), 0).unwrap();
            for pat in patterns {
                let y1 = pat.gamma1.then(|| DVector::from_vec(vec![0.1]));
                let y2 = pat.gamma2.then(|| DVector::from_vec(vec![-0.2]));
                let out = update_2c(&m, &s, pat, y1.as_ref(), y2.as_ref()).unwrap();
                let diff = &p - &out.p;
                assert!(
                    crate::linalg::min_eig(&diff) >= -1e-9,
                    "update increased covariance"
                );
            }
        }
    }

    #[test]
    fn recursion_open_loop_and_zero_cases() {
        let m = SystemModel::linear_benchmark();
        let a = m.jacobian(&DVector::zeros(2));
        let mut rng = StdRng::seed_from_u64(19);
        let p = random_psd(&mut rng, 2);
        let open = covariance_recursion(&m, &a, &p, ArrivalPair::NONE).unwrap();
        let expect = crate::linalg::sandwich(&a, &p) + m.q();
        assert_relative_eq!((open - expect).norm(), 0.0, epsilon = 1e-12);

        for pat in [ArrivalPair::NONE, ArrivalPair::BOTH, ArrivalPair::new(true, false)] {
            let out = covariance_recursion(&m, &a, &DMatrix::zeros(2, 2), pat).unwrap();
            assert_relative_eq!((out - m.q()).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn recursion_equals_update_then_predict() {
        let m = SystemModel::linear_benchmark();
        let a = m.jacobian(&DVector::zeros(2));
        let mut rng = StdRng::seed_from_u64(23);
        let patterns = [
            ArrivalPair::NONE,
            ArrivalPair::new(true, false),
            ArrivalPair::new(false, true),
            ArrivalPair::BOTH,
        ];
        for _ in 0..25 {
            let p = random_psd(&mut rng, 2);
            for pat in patterns {
                let direct = covariance_recursion(&m, &a, &p, pat).unwrap();
                let s = FilterState::new(DVector::zeros(2), p.clone(), 0).unwrap();
                let y1 = pat.gamma1.then(|| DVector::zeros(1));
                let y2 = pat.gamma2.then(|| DVector::zeros(1));
                let upd = update_2c(&m, &s, pat, y1.as_ref(), y2.as_ref()).unwrap();
                let composed = predict(&m, &upd, &DVector::zeros(0)).unwrap();
                assert_relative_eq!((direct - composed.p).norm(), 0.0, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn single_channel_trajectory_matches_intermittent_kf_oracle() {
        // gamma2 identically zero must reproduce a single-channel
        // intermittent KF step for step.
        let m = SystemModel::linear_benchmark();
        let a = m.jacobian(&DVector::zeros(2));
        let mut rng = StdRng::seed_from_u64(29);
        let mut s = FilterState::new(DVector::zeros(2), DMatrix::identity(2, 2), 0).unwrap();
        let mut p_oracle = s.p.clone();
        let mut x_oracle = s.x_hat.clone();
        for step in 0..200 {
            let arrived = rng.random::<f64>() < 0.4;
            let y = arrived.then(|| DVector::from_vec(vec![rng.random_range(-0.5..0.5)]));
            let pat = ArrivalPair::new(arrived, false);
            s = update_2c(&m, &s, pat, y.as_ref(), None).unwrap();
            if let Some(y) = &y {
                let (ox, op) = oracle_update(&p_oracle, m.c1(), &m.r11(), &x_oracle, y);
                x_oracle = ox;
                p_oracle = op;
            }
            assert_relative_eq!((s.p.clone() - &p_oracle).norm(), 0.0, epsilon = 1e-9);
            assert_relative_eq!((s.x_hat.clone() - &x_oracle).norm(), 0.0, epsilon = 1e-9);
            s = predict(&m, &s, &DVector::zeros(0)).unwrap();
            x_oracle = &a * x_oracle;
            p_oracle = crate::linalg::symmetrize(&(&a * &p_oracle * a.transpose() + m.q()));
            assert_eq!(s.k, step + 1);
        }
    }

    #[test]
    fn inconsistent_arrival_is_rejected() {
        let m = SystemModel::linear_benchmark();
        let s = FilterState::new(DVector::zeros(2), DMatrix::identity(2, 2), 0).unwrap();
        let y = DVector::zeros(1);
        assert!(matches!(
            update_2c(&m, &s, ArrivalPair::NONE, Some(&y), None),
            Err(FilterError::InconsistentArrival { channel: 1 })
        ));
        assert!(matches!(
            update_2c(&m, &s, ArrivalPair::new(false, true), None, None),
            Err(FilterError::InconsistentArrival { channel: 2 })
        ));
    }

    #[test]
    fn asymmetric_covariance_is_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(matches!(
            FilterState::new(DVector::zeros(2), p, 0),
            Err(FilterError::Asymmetric(_))
        ));
    }
}
