use std::hint::black_box;

use chemoplan::calibration::{default_regimens, regimen_to_effective_concentration, simulated_response, trial_grid, Drift};
use chemoplan::dynamics::{rk4_reference, simulate_all};
use chemoplan::scenarios::{simulate_branching, BranchingConfig};
use chemoplan::{default_params, TreatmentPlan, WbcSampling};
use criterion::{criterion_group, criterion_main, Criterion};

fn simulate(c: &mut Criterion) {
    let p = default_params();
    let doses = TreatmentPlan::zero(&p).doses;
    c.bench_function("simulate_all 21 days h=1h", |b| {
        b.iter(|| simulate_all(black_box(&p), black_box(&doses), WbcSampling::DayStart).unwrap())
    });
    let mut short = p.clone();
    short.grid = short.grid.with_horizon(5);
    let d = vec![vec![0.0; short.grid.n_steps() + 1]; short.drugs.len()];
    let vol = short.grid.compartment_volume;
    c.bench_function("rk4 reference 5 days", |b| {
        b.iter(|| rk4_reference(&short.tumor, &short.drugs, black_box(&d), &short.grid, vol, 1.0 / 1440.0).unwrap())
    });
}

fn branching(c: &mut Criterion) {
    let cfg = BranchingConfig {
        replications: 1000,
        ..Default::default()
    };
    c.bench_function("branching 1000 x 30 generations", |b| b.iter(|| simulate_branching(black_box(&cfg)).unwrap()));
}

fn calibration(c: &mut Criterion) {
    let p = default_params();
    let spec = default_regimens().into_iter().find(|r| r.drug == "docetaxel").unwrap();
    let drug = &p.drugs[p.drug_index("docetaxel").unwrap()];
    let grid = trial_grid(&spec, &p.grid).unwrap();
    let e = regimen_to_effective_concentration(&spec, drug, &grid).unwrap().values;
    let drift = Drift::from_tumor(&p.tumor, grid.h());
    let etas: Vec<f64> = (0..1000).map(|i| 6e-3 + i as f64 * 4e-6).collect();
    c.bench_function("docetaxel response 1000 trials", |b| {
        b.iter(|| simulated_response(black_box(&e), black_box(&etas), &drift, drift.p0 - 8f64.ln()))
    });
}

criterion_group!(benches, simulate, branching, calibration);
criterion_main!(benches);
