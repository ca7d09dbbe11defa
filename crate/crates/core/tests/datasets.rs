use std::collections::BTreeSet;

use dsdp::cluster::{kmeans, purity};
use dsdp::datasets::{
    generate_synthetic, group_by_vehicle, load_jsonl, preprocess, sample_subtrajectory_pair,
    save_jsonl, savgol, NormStats, PreprocessConfig, RawRecord, SyntheticSpec, OBS_DIM,
    STEP_CHANNELS,
};
use dsdp::trafficsim::{idm_accel, GRAVITY};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Least-squares polynomial through `ys` (abscissae 0..n) evaluated at `at`, via SVD.
fn lstsq_eval(ys: &[f64], order: usize, at: f64) -> f64 {
    let n = ys.len();
    let a = DMatrix::from_fn(n, order + 1, |r, c| (r as f64).powi(c as i32));
    let b = DVector::from_column_slice(ys);
    let coef = a.svd(true, true).solve(&b, 1e-14).unwrap();
    (0..=order).map(|c| coef[c] * at.powi(c as i32)).sum()
}

fn savgol_oracle(ys: &[f64], window: usize, order: usize) -> Vec<f64> {
    let n = ys.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let start = i.saturating_sub(half).min(n - window);
            lstsq_eval(&ys[start..start + window], order, (i - start) as f64)
        })
        .collect()
}

#[test]
fn savgol_matches_sliding_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..40 {
        let (window, order) = [(7, 2), (5, 2), (9, 3), (7, 1), (11, 4)][case % 5];
        let n = rng.random_range(window..window + 40);
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = savgol(&ys, window, order).unwrap();
        for (g, o) in got.iter().zip(savgol_oracle(&ys, window, order)) {
            assert!(
                (g - o).abs() < 1e-10,
                "window {window} order {order}: {g} vs {o}"
            );
        }
    }
}

#[test]
fn subtrajectory_pairs_cover_every_placement() {
    let l_c = 5;
    let len = 4 * l_c;
    let mut valid = BTreeSet::new();
    for x in 0..=len - l_c {
        for y in 0..=len - l_c {
            if x + l_c <= y || y + l_c <= x {
                valid.insert((x, y));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = BTreeSet::new();
    for _ in 0..10_000 {
        let p = sample_subtrajectory_pair(len, l_c, &mut rng).unwrap();
        assert!(valid.contains(&p), "overlapping pair {p:?}");
        seen.insert(p);
    }
    assert_eq!(seen, valid);
}

proptest! {
    #[test]
    fn normalization_round_trip(lo in -50.0f64..50.0, width in 0.01f64..100.0, u in 0.0f64..=1.0) {
        let rows = [[lo; STEP_CHANNELS], [lo + width; STEP_CHANNELS]];
        let s = NormStats::fit(rows.iter(), 1.0, 10.0, 0.1).unwrap();
        let x = lo + u * width;
        for i in 0..STEP_CHANNELS {
            prop_assert!((s.denormalize(i, s.normalize(i, x)) - x).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

fn rec(
    vehicle_id: u64,
    frame_id: u64,
    velocity: f64,
    acceleration: f64,
    space_headway: f64,
    preceding_id: u64,
) -> RawRecord {
    RawRecord {
        vehicle_id,
        frame_id,
        position: 0.0,
        velocity,
        acceleration,
        lane_id: 1,
        space_headway,
        preceding_id,
        vehicle_length: 4.5,
    }
}

/// Leader 1 at 12 m/s, follower 2 at 10 m/s 30 m behind, solo vehicle 3 with no leader.
fn toy_records(n: u64) -> Vec<RawRecord> {
    let mut out = Vec::new();
    for f in 1..=n {
        out.push(rec(1, f, 12.0, 0.0, 0.0, 0));
        out.push(rec(2, f, 10.0, 0.0, 30.0, 1));
        out.push(rec(3, f, 10.0, 0.0, 0.0, 0));
    }
    for f in 1..=n {
        out.push(rec(4, 100 + f, 8.0, 0.0, 50.0, 5));
        out.push(rec(5, 100 + f, 8.0, 0.0, 0.0, 0));
    }
    out
}

fn raw_features(
    split: &dsdp::datasets::Split,
    t: &dsdp::datasets::Trajectory,
) -> Vec<[f64; STEP_CHANNELS]> {
    t.steps
        .iter()
        .map(|s| {
            let mut r = [0.0; STEP_CHANNELS];
            for i in 0..OBS_DIM {
                r[i] = split.stats.denormalize(i, s.obs.0[i]);
            }
            r[OBS_DIM] = split.stats.denormalize(OBS_DIM, s.action.0);
            r
        })
        .collect()
}

#[test]
fn preprocess_headways_and_fill() {
    let raw = group_by_vehicle(&toy_records(10)).unwrap();
    let cfg = PreprocessConfig {
        require_leader: false,
        train_fraction: 1.0,
        ..Default::default()
    };
    let split = preprocess(&raw, None, &cfg).unwrap();
    let s = &split.stats;
    let follower = split.train.iter().find(|t| t.driver_id == 2).unwrap();
    let obs = follower.steps[4].obs.0;
    assert!((s.denormalize(2, obs[2]) - 3.0).abs() < 1e-9);
    assert_eq!(s.headway_fill, 50.0);
    let solo = split.train.iter().find(|t| t.driver_id == 3).unwrap();
    assert!((s.denormalize(1, solo.steps[0].obs.0[1]) - 50.0).abs() < 1e-9);
    assert!((s.denormalize(3, solo.steps[0].obs.0[3]) - 10.0).abs() < 1e-9);
}

#[test]
fn preprocess_caps_acceleration_before_smoothing() {
    let mut recs = toy_records(12);
    for r in recs.iter_mut().filter(|r| r.vehicle_id == 2) {
        r.acceleration = 15.0;
    }
    let raw = group_by_vehicle(&recs).unwrap();
    let split = preprocess(&raw, None, &PreprocessConfig::default()).unwrap();
    assert_eq!(split.report.capped_samples, 12);
    let t = split
        .train
        .iter()
        .chain(&split.test)
        .find(|t| t.driver_id == 2)
        .unwrap();
    for k in &t.kinematics {
        assert!((k.accel - GRAVITY).abs() < 1e-9);
    }
}

#[test]
fn short_segments_are_dropped_and_counted() {
    let raw = group_by_vehicle(&toy_records(6)).unwrap();
    assert!(preprocess(&raw, None, &PreprocessConfig::default()).is_err());
    let mut recs = toy_records(10);
    recs.retain(|r| !(r.vehicle_id == 2 && r.frame_id == 5));
    let split = preprocess(
        &group_by_vehicle(&recs).unwrap(),
        None,
        &PreprocessConfig::default(),
    )
    .unwrap();
    assert_eq!(split.report.dropped_short, 2);
}

fn synthetic_split(
    n_drivers: usize,
    seed: u64,
) -> (dsdp::datasets::Split, dsdp::datasets::SyntheticData) {
    let data = generate_synthetic(&SyntheticSpec::four_styles(n_drivers, seed)).unwrap();
    let raw = group_by_vehicle(&data.records).unwrap();
    (
        preprocess(&raw, Some(&data.labels), &PreprocessConfig::default()).unwrap(),
        data,
    )
}

#[test]
fn stats_come_from_train_split_only() {
    let (split, _) = synthetic_split(20, 4);
    assert_eq!(split.report.dropped_leaderless, 20);
    let rows: Vec<_> = split
        .train
        .iter()
        .flat_map(|t| raw_features(&split, t))
        .collect();
    for i in 0..STEP_CHANNELS {
        let lo = rows.iter().map(|r| r[i]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - split.stats.min[i]).abs() < 1e-9, "feature {i} min");
        assert!((hi - split.stats.max[i]).abs() < 1e-9, "feature {i} max");
    }
    let first_test = split.test.iter().map(|t| t.start_frame).min().unwrap();
    assert!(split.train.iter().all(|t| t.start_frame <= first_test));
    assert_eq!(split.train.len(), 16);
}

#[test]
fn training_view_ignores_hidden_labels() {
    let (split, _) = synthetic_split(8, 5);
    let t = &split.train[0];
    assert!(t.hidden_style_label().is_some());
    let stripped = t.clone().with_hidden_label(None);
    assert!(t.observations().eq(stripped.observations()));
    assert!(t.actions().eq(stripped.actions()));
    assert_eq!(
        t.window_values(0, 5).unwrap(),
        stripped.window_values(0, 5).unwrap()
    );
}

#[test]
fn synthetic_styles_are_recoverable_by_kmeans() {
    let (split, _) = synthetic_split(80, 9);
    let all: Vec<_> = split.train.iter().chain(&split.test).collect();
    // Mean action alone is set by the leader's speed changes; the headway channels carry the style.
    let feats: Vec<Vec<f64>> = all
        .iter()
        .map(|t| {
            let n = t.len() as f64;
            let mean =
                |f: &dyn Fn(&dsdp::datasets::Step) -> f64| t.steps.iter().map(f).sum::<f64>() / n;
            vec![
                mean(&|s| s.obs.0[1]),
                mean(&|s| s.obs.0[2]),
                mean(&|s| s.action.0),
            ]
        })
        .collect();
    let labels: Vec<u32> = all
        .iter()
        .map(|t| t.hidden_style_label().unwrap())
        .collect();
    let best = (0..5)
        .map(|s| {
            let km = kmeans(&feats, 4, 100, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            (km.inertia, purity(&km.assignments, &labels))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    assert!(best.1 > 0.9, "purity {}", best.1);
}

#[test]
fn noiseless_single_style_follows_idm_exactly() {
    let mut spec = SyntheticSpec::four_styles(3, 2);
    spec.styles.truncate(1);
    spec.styles[0].spread = 0.0;
    spec.action_noise = 0.0;
    let data = generate_synthetic(&spec).unwrap();
    let p = spec.styles[0].mean;
    let by = group_by_vehicle(&data.records).unwrap();
    assert!(data.params.iter().all(|q| *q == p));
    for (lead, ego) in [(1u64, 2u64), (3, 4), (5, 6)] {
        for (l, e) in by[&lead].iter().zip(&by[&ego]) {
            let gap = l.position - l.vehicle_length - e.position;
            let a = idm_accel(&p, e.velocity, gap, e.velocity - l.velocity).unwrap();
            assert!((a.clamp(-GRAVITY, GRAVITY) - e.acceleration).abs() < 1e-12);
        }
    }
}

#[test]
fn synthetic_dataset_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let (split, _) = synthetic_split(12, 21);
        let p = dir.path().join(format!("d{run}.jsonl"));
        save_jsonl(&p, &split.train, "fp").unwrap();
        bytes.push(std::fs::read(&p).unwrap());
        let (back, fp) = load_jsonl(&p).unwrap();
        assert_eq!(back, split.train);
        assert_eq!(fp, "fp");
    }
    assert_eq!(bytes[0], bytes[1]);
    let (a, _) = synthetic_split(12, 21);
    let (b, _) = synthetic_split(12, 22);
    assert_ne!(a.train, b.train);
}
