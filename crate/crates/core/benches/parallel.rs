//! Sequential against data-parallel execution of the scenario-level work.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dsdp::baselines::{IdmFixedPolicy, IdmStyleTable};
use dsdp::datasets::{
    generate_synthetic, group_by_vehicle, preprocess, PreprocessConfig, Split, SyntheticSpec,
};
use dsdp::eval::{
    build_scenarios, density_coverage, evaluate_crash, evaluate_f1, EvalConfig, LeaderMode,
};
use dsdp::par::{self, Exec};
use dsdp::policy::{
    Conditioning, ContextSource, DiffusionNet, DiffusionPolicy, PolicyConfig, SamplerKind,
};
use dsdp::seeding::{item_rng, SimRng};
use rand::{Rng, SeedableRng};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn split() -> Split {
    let data = generate_synthetic(&SyntheticSpec::four_styles(80, 0)).unwrap();
    let raw = group_by_vehicle(&data.records).unwrap();
    preprocess(&raw, Some(&data.labels), &PreprocessConfig::default()).unwrap()
}

fn rollouts(c: &mut Criterion) {
    let s = split();
    let cfg = EvalConfig::default();
    let net = DiffusionNet::new(
        &PolicyConfig::default().diffusion(Conditioning::None),
        &mut SimRng::seed_from_u64(0),
    )
    .unwrap();
    let diffusion = DiffusionPolicy::new(
        "uncond",
        net,
        ContextSource::None,
        s.stats.clone(),
        SamplerKind::Ddpm,
    )
    .unwrap();
    let f1_set = build_scenarios(&s.test, LeaderMode::Replay, 8, false, &cfg, 0).unwrap();
    let idm = IdmFixedPolicy::new(IdmStyleTable::bundled()).unwrap();
    let crash_set =
        build_scenarios(&s.test, LeaderMode::Idm, cfg.crash_scenarios, true, &cfg, 0).unwrap();

    let mut g = c.benchmark_group("diffusion_f1_8_scenarios");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_f1(&diffusion, &s.stats, &f1_set, cfg.k, 1, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("idm_crash_100_scenarios");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_crash(&idm, &s.stats, &crash_set, 1, exec).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let cloud = |rng: &mut SimRng, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..5).map(|_| rng.random::<f64>()).collect())
            .collect()
    };
    let mut g = c.benchmark_group("density_coverage_64_pairs");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::try_map_with(exec, 64, |i| {
                    let mut rng = item_rng(7, i);
                    let (real, fake) = (cloud(&mut rng, 150), cloud(&mut rng, 150));
                    density_coverage(&real, &fake, 5)
                })
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, rollouts, metrics);
criterion_main!(benches);
