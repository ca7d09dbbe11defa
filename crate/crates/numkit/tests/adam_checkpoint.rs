use numkit::{Adam, AdamConfig, Checkpoint, CheckpointHeader, Linear, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn adam_minimises_square() {
    // reference loop: plain scalar Adam on f(x) = x^2
    let (mut x_ref, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * x_ref;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x_ref -= 0.1 * mh / (vh.sqrt() + 1e-8);
    }
    assert!(x_ref.abs() < 0.05);

    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(1.0));
    let mut opt = Adam::new(&store, AdamConfig::with_lr(0.1)).unwrap();
    for _ in 0..100 {
        let grads = {
            let mut tape = Tape::new(&store);
            let xv = tape.param(x);
            let y = tape.square(xv).unwrap();
            tape.backprop_scalar(y).unwrap()
        };
        store.accumulate(&grads);
        opt.step(&mut store);
    }
    let got = store.value(x).item();
    assert!(got.abs() < 0.05);
    assert!((got - x_ref).abs() < 1e-12);
    assert_eq!(opt.steps_taken(), 100);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let _ = Linear::new(&mut store, "a", 17, 9, &mut rng);
    let _ = Linear::new(&mut store, "b", 9, 3, &mut rng);
    for p in store.iter_mut() {
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v += (i as f64 * 1e-17).sin() / 3.0;
        }
    }
    let mut header = CheckpointHeader {
        kind: "test".into(),
        fingerprint: "abc".into(),
        seed: 42,
        meta: Default::default(),
    };
    header.meta.insert("k".into(), serde_json::json!(256));
    let ck = Checkpoint::new(header).with_group("model", &store);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let mut fresh = ParamStore::new();
    let mut rng2 = ChaCha8Rng::seed_from_u64(99);
    let _ = Linear::new(&mut fresh, "a", 17, 9, &mut rng2);
    let _ = Linear::new(&mut fresh, "b", 9, 3, &mut rng2);
    loaded.restore_group("model", &mut fresh).unwrap();
    assert_eq!(fresh.checksum(), store.checksum());
    assert_eq!(loaded.meta::<u32>("k").unwrap(), 256);
}

#[test]
fn checkpoint_rejects_wrong_architecture() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let _ = Linear::new(&mut store, "a", 4, 4, &mut rng);
    let ck = Checkpoint::new(CheckpointHeader {
        kind: "t".into(),
        fingerprint: String::new(),
        seed: 0,
        meta: Default::default(),
    })
    .with_group("m", &store);
    let mut other = ParamStore::new();
    let _ = Linear::new(&mut other, "a", 4, 5, &mut rng);
    assert!(ck.restore_group("m", &mut other).is_err());
    assert!(ck.restore_group("missing", &mut store).is_err());
}
