mod common;

use std::sync::OnceLock;

use common::{cloud, oracle_density_coverage, ConstantPolicy};
use dsdp::baselines::{IdmFixedPolicy, IdmStyleTable};
use dsdp::datasets::{
    generate_synthetic, group_by_vehicle, preprocess, PreprocessConfig, Split, Step, SyntheticSpec,
};
use dsdp::eval::{
    aggregate, build_scenarios, density, density_coverage, evaluate_crash, evaluate_f1, f1,
    knn_radius, EvalConfig, EvalReport, LeaderMode, Metric,
};
use dsdp::par::Exec;
use dsdp::policy::{Episode, Policy, StepContext};
use dsdp::seeding::SimRng;
use dsdp::trafficsim::{DT, GRAVITY};
use dsdp::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn split() -> &'static Split {
    static S: OnceLock<Split> = OnceLock::new();
    S.get_or_init(|| {
        let data = generate_synthetic(&SyntheticSpec::four_styles(60, 8)).unwrap();
        let raw = group_by_vehicle(&data.records).unwrap();
        preprocess(&raw, Some(&data.labels), &PreprocessConfig::default()).unwrap()
    })
}

/// Tracks the logged ego speed of whichever test trajectory the warm-up came from.
struct LogReplay {
    logs: Vec<(Vec<Step>, Vec<f64>)>,
}

struct Tracker {
    speeds: Vec<f64>,
    k: usize,
}

impl Episode for Tracker {
    fn accel(&mut self, ctx: &StepContext<'_>, _: &mut SimRng) -> Result<f64> {
        self.k += 1;
        let target = self.speeds[self.k.min(self.speeds.len() - 1)];
        Ok((target - ctx.scenario.ego().velocity) / DT)
    }
}

impl Policy for LogReplay {
    fn name(&self) -> String {
        "log_replay".into()
    }

    fn warmup_len(&self) -> usize {
        0
    }

    fn begin<'p>(&'p self, warmup: &[Step], _: &mut SimRng) -> Result<Box<dyn Episode + 'p>> {
        let (_, speeds) = self
            .logs
            .iter()
            .find(|(w, _)| w.as_slice() == warmup)
            .expect("warm-up comes from a test trajectory");
        Ok(Box::new(Tracker {
            speeds: speeds.clone(),
            k: 0,
        }))
    }
}

fn log_replay(cfg: &EvalConfig) -> LogReplay {
    LogReplay {
        logs: split()
            .test
            .iter()
            .map(|t| {
                (
                    t.steps[..cfg.warmup].to_vec(),
                    t.kinematics[cfg.warmup..]
                        .iter()
                        .map(|k| k.velocity)
                        .collect(),
                )
            })
            .collect(),
    }
}

#[test]
fn replaying_the_log_scores_near_one() {
    let cfg = EvalConfig::default();
    let s = split();
    let set = build_scenarios(&s.test, LeaderMode::Replay, 50, false, &cfg, 0).unwrap();
    let r = evaluate_f1(&log_replay(&cfg), &s.stats, &set, cfg.k, 0, Exec::Parallel).unwrap();
    assert!(r.f1.unwrap() >= 0.9, "{:?}", r.f1);
    assert!(r.coverage.unwrap() >= 0.9, "{:?}", r.coverage);
    assert_eq!(r.crash_pct, 0.0);
}

#[test]
fn braking_to_a_stop_covers_little() {
    let cfg = EvalConfig::default();
    let s = split();
    let set = build_scenarios(&s.test, LeaderMode::Replay, 50, false, &cfg, 0).unwrap();
    let brake = evaluate_f1(
        &ConstantPolicy(-GRAVITY),
        &s.stats,
        &set,
        cfg.k,
        0,
        Exec::Parallel,
    )
    .unwrap();
    let replay = evaluate_f1(&log_replay(&cfg), &s.stats, &set, cfg.k, 0, Exec::Parallel).unwrap();
    assert!(brake.coverage.unwrap() < 0.2, "{:?}", brake.coverage);
    assert!(brake.f1.unwrap() < replay.f1.unwrap());
}

#[test]
fn idm_never_crashes() {
    let cfg = EvalConfig::default();
    let s = split();
    let idm = IdmFixedPolicy::new(IdmStyleTable::bundled()).unwrap();
    for mode in [LeaderMode::Idm, LeaderMode::Stopped] {
        let set = build_scenarios(&s.test, mode, cfg.crash_scenarios, true, &cfg, 3).unwrap();
        assert_eq!(set.scenarios.len(), 100);
        let r = evaluate_crash(&idm, &s.stats, &set, 3, Exec::Parallel).unwrap();
        assert_eq!(r.crash_pct, 0.0, "{mode:?}");
        assert!(r.rows.iter().all(|row| row.steps == cfg.crash_steps));
    }
}

#[test]
fn flooring_it_hits_every_stopped_leader() {
    let cfg = EvalConfig::default();
    let s = split();
    let set = build_scenarios(
        &s.test,
        LeaderMode::Stopped,
        cfg.crash_scenarios,
        true,
        &cfg,
        3,
    )
    .unwrap();
    let r = evaluate_crash(&ConstantPolicy(GRAVITY), &s.stats, &set, 3, Exec::Parallel).unwrap();
    assert_eq!(r.crash_pct, 100.0);
    assert!(r.rows.iter().all(|row| row.crash_step.is_some()));
}

#[test]
fn stopped_leader_starts_beyond_stopping_distance() {
    let cfg = EvalConfig::default();
    let set = build_scenarios(&split().test, LeaderMode::Stopped, 20, true, &cfg, 1).unwrap();
    for sc in &set.scenarios {
        let ego = sc.scenario.ego();
        let gap = sc.scenario.gap(sc.scenario.ego_index).unwrap();
        assert!(
            gap >= ego.velocity.powi(2) / (2.0 * cfg.stopped_leader_decel)
                + cfg.stopped_leader_margin
                - 1e-9
        );
        assert_eq!(
            sc.scenario
                .leader_of(sc.scenario.ego_index)
                .unwrap()
                .velocity,
            0.0
        );
    }
}

#[test]
fn evaluation_is_reproducible_and_parallelism_free() {
    let cfg = EvalConfig::default();
    let s = split();
    let set = build_scenarios(&s.test, LeaderMode::Idm, 30, true, &cfg, 5).unwrap();
    let idm = IdmFixedPolicy::new(IdmStyleTable::bundled()).unwrap();
    let a = evaluate_crash(&idm, &s.stats, &set, 9, Exec::Parallel)
        .unwrap()
        .to_json()
        .unwrap();
    let b = evaluate_crash(&idm, &s.stats, &set, 9, Exec::Sequential)
        .unwrap()
        .to_json()
        .unwrap();
    assert_eq!(a, b);
    let set = build_scenarios(&s.test, LeaderMode::Replay, 10, false, &cfg, 5).unwrap();
    let a = evaluate_f1(&idm, &s.stats, &set, cfg.k, 9, Exec::Parallel).unwrap();
    let b = evaluate_f1(&idm, &s.stats, &set, cfg.k, 9, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(EvalReport::from_json(&a.to_json().unwrap()).unwrap(), a);
}

#[test]
fn scenario_sets_depend_only_on_the_seed() {
    let cfg = EvalConfig::default();
    let a = build_scenarios(&split().test, LeaderMode::Replay, 8, false, &cfg, 2).unwrap();
    let b = build_scenarios(&split().test, LeaderMode::Replay, 8, false, &cfg, 2).unwrap();
    assert_eq!(a, b);
    let c = build_scenarios(&split().test, LeaderMode::Replay, 8, false, &cfg, 3).unwrap();
    assert_ne!(
        a.scenarios.iter().map(|s| s.driver_id).collect::<Vec<_>>(),
        c.scenarios.iter().map(|s| s.driver_id).collect::<Vec<_>>()
    );
}

#[test]
fn aggregate_groups_by_policy() {
    let cfg = EvalConfig::default();
    let s = split();
    let set = build_scenarios(&s.test, LeaderMode::Replay, 5, false, &cfg, 0).unwrap();
    let reports: Vec<EvalReport> = (0..3)
        .flat_map(|seed| {
            [
                evaluate_f1(
                    &ConstantPolicy(0.0),
                    &s.stats,
                    &set,
                    cfg.k,
                    seed,
                    Exec::Sequential,
                )
                .unwrap(),
                evaluate_f1(
                    &ConstantPolicy(-GRAVITY),
                    &s.stats,
                    &set,
                    cfg.k,
                    seed,
                    Exec::Sequential,
                )
                .unwrap(),
            ]
        })
        .collect();
    let rows = aggregate(&reports);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.seeds == 3 && r.metric == Metric::F1));
}

#[test]
fn metrics_match_brute_force_oracle() {
    let mut rng = SimRng::seed_from_u64(42);
    for case in 0..500 {
        let dim = rng.random_range(1..=5);
        let k = rng.random_range(1..=5);
        let (n_real, n_fake, shift) = (
            rng.random_range(k + 1..=200),
            rng.random_range(1..=200),
            rng.random_range(-0.5..0.5),
        );
        let real = cloud(&mut rng, n_real, dim, 0.0);
        let fake = cloud(&mut rng, n_fake, dim, shift);
        assert_eq!(
            density_coverage(&real, &fake, k).unwrap(),
            oracle_density_coverage(&real, &fake, k),
            "case {case}"
        );
    }
}

#[test]
fn identical_clouds_are_fully_covered() {
    let mut rng = SimRng::seed_from_u64(7);
    for _ in 0..50 {
        let real = cloud(&mut rng, 60, 3, 0.0);
        let (_, c) = density_coverage(&real, &real, 5).unwrap();
        assert_eq!(c, 1.0);
    }
}

#[test]
fn metric_preconditions() {
    let real = vec![vec![0.0], vec![1.0]];
    assert!(density(&real, &[vec![0.0]], 2).is_err());
    assert!(density(&real, &[], 1).is_err());
    assert!(density(&real, &[vec![0.0, 1.0]], 1).is_err());
    assert!(knn_radius(&real, 5, 1).is_err());
}

proptest! {
    #[test]
    fn f1_is_a_bounded_harmonic_mean(d in 0.0f64..3.0, c in 0.0f64..=1.0) {
        let v = f1(d, c);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(v <= d.min(1.0).max(c) + 1e-12);
        prop_assert!(v >= d.min(1.0).min(c) - 1e-12);
    }

    #[test]
    fn coverage_is_a_fraction(seed in 0u64..500, k in 1usize..4) {
        let mut rng = SimRng::seed_from_u64(seed);
        let real = cloud(&mut rng, 30, 2, 0.0);
        let fake = cloud(&mut rng, 20, 2, 0.3);
        let (d, c) = density_coverage(&real, &fake, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!(d >= 0.0 && d <= real.len() as f64 / k as f64);
    }
}
