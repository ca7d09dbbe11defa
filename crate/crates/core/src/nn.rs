//! Shared network plumbing: conv encoders, a training step and checkpoint headers.

use std::collections::BTreeMap;

use numkit::{
    Activation, Adam, CheckpointHeader, Conv1d, Layer, Linear, ParamStore, Sequential, Tape, Var,
};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;

/// `conv(k3) → ReLU → conv(k3) → ReLU → flatten → [Linear → ReLU] → Linear`
/// over `[B, in_ch, len]`, length-preserving padding.
pub fn conv_encoder(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    channels: usize,
    len: usize,
    hidden: Option<usize>,
    out: usize,
    rng: &mut impl Rng,
) -> Sequential {
    let mut layers = vec![
        Layer::Conv1d(Conv1d::new(
            store,
            &format!("{name}.conv0"),
            in_ch,
            channels,
            3,
            1,
            1,
            rng,
        )),
        Layer::Act(Activation::Relu),
        Layer::Conv1d(Conv1d::new(
            store,
            &format!("{name}.conv1"),
            channels,
            channels,
            3,
            1,
            1,
            rng,
        )),
        Layer::Act(Activation::Relu),
        Layer::Flatten,
    ];
    let mut width = channels * len;
    if let Some(h) = hidden {
        layers.push(Layer::Linear(Linear::new(
            store,
            &format!("{name}.fc0"),
            width,
            h,
            rng,
        )));
        layers.push(Layer::Act(Activation::Relu));
        width = h;
    }
    layers.push(Layer::Linear(Linear::new(
        store,
        &format!("{name}.out"),
        width,
        out,
        rng,
    )));
    Sequential::new(layers)
}

/// Builds a scalar loss on a fresh tape, backpropagates and applies one Adam step.
pub fn train_step<F>(store: &mut ParamStore, adam: &mut Adam, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let (loss, grads) = {
        let mut tape = Tape::new(store);
        let out = build(&mut tape)?;
        (tape.value(out).item(), tape.backprop_scalar(out)?)
    };
    store.accumulate(&grads);
    adam.step(store);
    Ok(loss)
}

/// Header with `meta` taken from the fields of a serializable value.
pub fn header(
    kind: &str,
    fingerprint: &str,
    seed: u64,
    meta: &impl Serialize,
) -> Result<CheckpointHeader> {
    let meta = match serde_json::to_value(meta)? {
        serde_json::Value::Object(m) => m.into_iter().collect(),
        other => BTreeMap::from([("value".to_string(), other)]),
    };
    Ok(CheckpointHeader {
        kind: kind.into(),
        fingerprint: fingerprint.into(),
        seed,
        meta,
    })
}

/// Reads the whole meta map back as `T`.
pub fn meta_as<T: serde::de::DeserializeOwned>(h: &CheckpointHeader) -> Result<T> {
    let obj: serde_json::Map<String, serde_json::Value> = h.meta.clone().into_iter().collect();
    Ok(serde_json::from_value(serde_json::Value::Object(obj))?)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Draws an index from `probs` (summing to 1).
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, p) in probs.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
