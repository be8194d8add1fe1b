//! Shared fixtures for the criterion benchmarks.

use nalgebra::{DMatrix, DVector};

use kf2c::model::{RowConvention, SystemModel};
use kf2c::stability::RatePair;

pub fn linear_model() -> SystemModel {
    SystemModel::linear_benchmark()
}

pub fn kinematic_model() -> SystemModel {
    SystemModel::kinematic_5dof(RowConvention::Corrected)
}

pub fn benchmark_rates() -> RatePair {
    RatePair::new(0.1, 0.1).expect("valid rates")
}

/// A representative positive definite covariance for a model.
pub fn sample_covariance(model: &SystemModel) -> DMatrix<f64> {
    let n = model.n_x();
    DMatrix::identity(n, n) * 0.5
}

pub fn zero_state(model: &SystemModel) -> DVector<f64> {
    DVector::zeros(model.n_x())
}
