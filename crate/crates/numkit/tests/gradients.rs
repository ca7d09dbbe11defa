use numkit::gradcheck::{random_layer_case, LAYER_KINDS};
use numkit::{Linear, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_layer_matches_finite_differences(seed in any::<u64>(), kind_idx in 0..LAYER_KINDS.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = LAYER_KINDS[kind_idx];
        let report = random_layer_case(kind, &mut rng, 1e-5).unwrap();
        prop_assert!(report.max_rel_err < 1e-4, "{kind}: {report:?}");
    }
}

#[test]
fn backprop_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
    let x = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
    let grads = {
        let mut tape = Tape::new(&store);
        let xv = tape.input(x.clone());
        let y = lin.forward(&mut tape, xv).unwrap();
        let y = tape.square(y).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backprop_scalar(l).unwrap()
    };
    store.accumulate(&grads);
    let once: Vec<f64> = store.get(lin.weight).grad.data().to_vec();
    store.accumulate(&grads);
    let twice = store.get(lin.weight).grad.data();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}
