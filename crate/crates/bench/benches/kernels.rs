use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use harmonize_bench::{gompertz_q, ipf2_case, ipf3_case, mortality_scenario, weights};
use harmonize_core::disagg::huntington_hill;
use harmonize_core::fit::{fit_mortality, mortality_moments, MortalityFitTarget, MortalityInputs};
use harmonize_core::ipf::{ipf2, ipf3};
use harmonize_core::lifetable::life_expectancy;
use harmonize_core::rates::AlphaProfile;
use harmonize_core::simulate::{run, ScenarioConfig};

fn apportionment(c: &mut Criterion) {
    let p = weights(1000);
    c.bench_function("huntington_hill 1000 cells, 10^5 seats", |b| b.iter(|| huntington_hill(black_box(1e5), &p).unwrap()));
}

fn fitting(c: &mut Criterion) {
    let (m0, a, b) = ipf2_case(50, 50);
    c.bench_function("ipf2 50x50", |bn| bn.iter(|| ipf2(&m0, &a, &b, 1e-10, 10_000).unwrap()));
    let (t0, a3, b3, c3) = ipf3_case([50, 20, 50]);
    c.bench_function("ipf3 50x20x50", |bn| bn.iter(|| ipf3(&t0, &a3, &b3, &c3, 1e-4, 200).unwrap()));
}

fn life_tables(c: &mut Criterion) {
    let q = gompertz_q();
    let alpha = AlphaProfile::mortality();
    c.bench_function("life_expectancy 101 ages", |b| b.iter(|| life_expectancy(black_box(&q), 0, &alpha, 100).unwrap()));
    let inputs = MortalityInputs {
        qref_m: q.iter().map(|v| v * 1.2).collect(),
        qref_f: q.clone(),
        pop_m: vec![1000.0; 101],
        pop_f: vec![1000.0; 101],
        alpha,
    };
    let (deaths, le) = mortality_moments(&[1.1, 0.9, 1.0, 1.05, 0.95, 0.9], &inputs).unwrap();
    let target = MortalityFitTarget { deaths, le_m_0: le[0], le_f_0: le[1], le_m_65: le[2], le_f_65: le[3] };
    let mut group = c.benchmark_group("fits");
    group.sample_size(10);
    group.bench_function("fit_mortality exact target", |b| b.iter(|| fit_mortality(&target, &inputs).unwrap()));
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let params = mortality_scenario(100.0, 0.02);
    let cfg = ScenarioConfig::new(2000, 2005);
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    group.bench_function("40k persons, 5 years", |b| b.iter(|| run(&cfg, &params).unwrap()));
    group.finish();
}

criterion_group!(benches, apportionment, fitting, life_tables, simulation);
criterion_main!(benches);
