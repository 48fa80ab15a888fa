use criterion::{criterion_group, criterion_main, Criterion};

use saedesign::allocate::{solve_direct, solve_fixed_point};
use saedesign::estimator::{monte_carlo_mse, McConfig};
use saedesign::presets::preset;
use saedesign::sampler::{self, CubeOptions};

fn allocation(c: &mut Criterion) {
    let p = preset("exp1").unwrap();
    let pop = p.population().unwrap();
    let problem = p.design_problem(&pop).unwrap();
    let mut g = c.benchmark_group("allocate");
    g.bench_function("direct", |b| b.iter(|| solve_direct(&problem).unwrap()));
    g.bench_function("fixed_point", |b| b.iter(|| solve_fixed_point(&problem).unwrap()));
    g.finish();
}

fn selection(c: &mut Criterion) {
    let p = preset("exp1").unwrap();
    let pop = p.population().unwrap();
    let problem = p.design_problem(&pop).unwrap();
    let alloc = solve_direct(&problem).unwrap();
    let mut seed = 0u64;
    let mut g = c.benchmark_group("select");
    g.sample_size(10);
    g.bench_function("cube", |b| {
        b.iter(|| {
            seed += 1;
            sampler::select(&pop.frame, &alloc, seed, CubeOptions::default()).unwrap()
        })
    });
    g.finish();
}

fn simulation(c: &mut Criterion) {
    let p = preset("exp1").unwrap();
    let pop = p.population().unwrap();
    let alloc = solve_direct(&p.design_problem(&pop).unwrap()).unwrap();
    let config = McConfig { replicates: 20, seed: 1, sample_seed: None };
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    g.bench_function("20_replicates", |b| b.iter(|| monte_carlo_mse(&p.population, &alloc, &config).unwrap()));
    g.finish();
}

criterion_group!(benches, allocation, selection, simulation);
criterion_main!(benches);
