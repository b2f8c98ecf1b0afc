use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, Criterion};
use socfault_core::{campaign, programs, run, MacConfig, MacPolicy, Scenario, SocConfig, SweepParams};

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap()
}

fn runs(c: &mut Criterion) {
    let img = programs::loop_image();
    c.bench_function("loop_fault_free", |b| b.iter(|| run(&SocConfig::default(), &img, None, 200_000).unwrap()));

    let mac = SocConfig { mac: Some(MacConfig::with_policy(7, MacPolicy::Proactive)), ..SocConfig::default() };
    c.bench_function("loop_proactive_mac", |b| b.iter(|| run(&mac, &img, None, 200_000).unwrap()));

    let s1 = scenario("s1_l1i.json");
    let s1_img = s1.image().unwrap();
    c.bench_function("s1_l1i_faulted", |b| b.iter(|| campaign::execute(&s1, &s1_img, s1.fault.clone()).unwrap()));
}

fn sweeps(c: &mut Criterion) {
    let s = scenario("s1_sweep.json");
    let img = s.image().unwrap();
    let params = SweepParams { delay_start: 1420, delay_end: 1460, step: 10, trials: 4, seed_base: 1 };
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    g.bench_function("s1_5x4", |b| b.iter(|| campaign::sweep(&s, &img, &params).unwrap()));
    g.finish();
}

criterion_group!(benches, runs, sweeps);
criterion_main!(benches);
