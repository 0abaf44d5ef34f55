use std::hint::black_box;

use chemoplan::solver::mps::to_mps_string;
use chemoplan::solver::{solve_builtin, BuiltinLimits};
use chemoplan::transcription::build_deterministic;
use chemoplan::validate::micro_chemo_params;
use chemoplan::{default_params, Bilinear, BuildOptions};
use criterion::{criterion_group, criterion_main, Criterion};

fn build(c: &mut Criterion) {
    let mut p = default_params();
    p.grid = p.grid.with_step_minutes(240).unwrap();
    let o = BuildOptions::new(&p).with_bilinear(Bilinear::discrete(&p, 20));
    c.bench_function("build deterministic h=4h", |b| b.iter(|| build_deterministic(black_box(&p), &o).unwrap()));
    let m = build_deterministic(&p, &o).unwrap();
    c.bench_function("write mps h=4h", |b| b.iter(|| to_mps_string(black_box(&m))));
}

fn micro(c: &mut Criterion) {
    let p = micro_chemo_params(&default_params()).unwrap();
    let m = build_deterministic(&p, &BuildOptions::new(&p).with_bilinear(Bilinear::discrete(&p, 4))).unwrap();
    c.bench_function("builtin b&b micro chemo", |b| {
        b.iter(|| solve_builtin(black_box(&m), BuiltinLimits::default()).unwrap())
    });
}

criterion_group!(benches, build, micro);
criterion_main!(benches);
