use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use kf2c::filter::{predict, update_2c, ArrivalPair, FilterState};
use kf2c::model::build_polytope;
use kf2c::scheduler::{optimize_rates, CandidateSet};
use kf2c::sim::{run, SimConfig, SimMode};
use kf2c::stability::{check_boundedness, g_operator, trace_bound, Dynamics};
use kf2c_bench::{benchmark_rates, kinematic_model, linear_model, sample_covariance, zero_state};
use nalgebra::DVector;

fn filter_steps(c: &mut Criterion) {
    let model = kinematic_model();
    let state = FilterState::new(
        zero_state(&model),
        sample_covariance(&model),
        0,
    )
    .unwrap();
    let u = DVector::zeros(0);
    c.bench_function("predict_13_state", |b| {
        b.iter(|| predict(black_box(&model), black_box(&state), &u).unwrap())
    });
    let y1 = DVector::zeros(model.n_y1());
    let y2 = DVector::zeros(model.n_y2());
    c.bench_function("update_both_channels_13_state", |b| {
        b.iter(|| {
            update_2c(
                black_box(&model),
                black_box(&state),
                ArrivalPair::BOTH,
                Some(&y1),
                Some(&y2),
            )
            .unwrap()
        })
    });
}

fn expected_covariance_map(c: &mut Criterion) {
    let model = kinematic_model();
    let a = model.jacobian(&zero_state(&model));
    let x = sample_covariance(&model);
    let rates = benchmark_rates();
    c.bench_function("g_operator_13_state", |b| {
        b.iter(|| g_operator(black_box(&a), &model, rates, black_box(&x)).unwrap())
    });
}

fn lmi_solvers(c: &mut Criterion) {
    let model = linear_model();
    let a = model.jacobian(&zero_state(&model));
    let rates = kf2c::stability::RatePair::new(0.1, 0.0).unwrap();
    c.bench_function("boundedness_lmi_linear_benchmark", |b| {
        b.iter(|| check_boundedness(Dynamics::Linear(black_box(&a)), &model, rates).unwrap())
    });
    c.bench_function("trace_bound_linear_benchmark", |b| {
        b.iter(|| trace_bound(Dynamics::Linear(black_box(&a)), &model, rates).unwrap())
    });

    let kin = kinematic_model();
    let a13 = kin.jacobian(&zero_state(&kin));
    let rates13 = benchmark_rates();
    c.bench_function("boundedness_lmi_13_state", |b| {
        b.iter(|| check_boundedness(Dynamics::Linear(black_box(&a13)), &kin, rates13).unwrap())
    });
}

fn polytope_and_scheduling(c: &mut Criterion) {
    let model = kinematic_model();
    c.bench_function("build_polytope_5dof_default", |b| {
        b.iter(|| build_polytope(&model, model.default_envelope(), 1 << 15).unwrap())
    });

    let lin = linear_model();
    let a = lin.jacobian(&zero_state(&lin));
    let set = CandidateSet::from_grid(&[0.0, 0.1, 0.5], &[0.0, 0.1, 0.5]).unwrap();
    c.bench_function("optimize_rates_9_candidates_linear", |b| {
        b.iter(|| optimize_rates(Dynamics::Linear(black_box(&a)), &lin, &set).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let cfg = SimConfig {
        model: linear_model(),
        mode: SimMode::Stochastic(kf2c::stability::RatePair::new(0.5, 0.5).unwrap()),
        duration: 60.0,
        seed: 1,
        x0: None,
        p0: None,
    };
    c.bench_function("simulate_1200_steps_linear", |b| {
        b.iter(|| run(black_box(&cfg)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = filter_steps, expected_covariance_map, lmi_solvers, polytope_and_scheduling, simulation
}
criterion_main!(benches);
