use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use softstep::{Integrator, IntegratorConfig, Method, SimState};
use softstep_bench::{bent_state, clamped_beam};

fn single_step(c: &mut Criterion) {
    let model = clamped_beam([8, 2, 2]);
    let q = bent_state(&model);
    let state = SimState {
        v: q.clone() * 0.0,
        q,
        t: 0.0,
        history: None,
    };
    let mut g = c.benchmark_group("step");
    g.sample_size(10);
    for method in [Method::Be, Method::Bdf2, Method::TrBdf2, Method::Siere, Method::StrSbdf2Ere] {
        let cfg = IntegratorConfig::new(method, 1.0 / 60.0).with_modes(10);
        g.bench_with_input(BenchmarkId::from_parameter(method.name()), &cfg, |b, cfg| {
            b.iter(|| {
                let mut it = Integrator::new(&model, *cfg, state.clone()).unwrap();
                it.step().unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, single_step);
criterion_main!(benches);
