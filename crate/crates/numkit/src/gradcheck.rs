//! Central finite-difference checks of tape gradients.
//!
//! The difference quotients here only call forward passes, so they stay
//! independent of the backward formulas they check.

use rand::Rng;

use crate::error::Result;
use crate::layers::{Conv1d, Linear};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Below this magnitude errors are measured absolutely (scaled by the floor).
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar `loss` with central differences of step `h`.
pub fn check_gradients<F>(store: &mut ParamStore, loss: F, h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let out = loss(&mut tape)?;
        tape.backprop_scalar(out)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let out = loss(&mut tape)?;
        Ok(tape.value(out).item())
    };
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = store
        .iter()
        .map(|p| (p.id, p.name.clone(), p.value.len()))
        .collect();
    for (id, name, n) in ids {
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Layer families covered by [`random_layer_case`].
pub const LAYER_KINDS: &[&str] = &[
    "linear",
    "conv1d",
    "relu",
    "gelu",
    "tanh",
    "sigmoid",
    "exp_log_div",
    "concat_slice",
    "l2_normalize",
    "cross_entropy",
    "binary_entropy",
    "reductions",
    "mlp_stack",
];

fn rand_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values in `±[0.05, 1.5]`, away from the ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds one randomized case of layer family `kind` and checks it.
///
/// A fixed random projection turns each layer output into a scalar loss so
/// every output element contributes.
pub fn random_layer_case(kind: &str, rng: &mut impl Rng, h: f64) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let rows = rng.random_range(1..5);
    let cols = rng.random_range(1..6);
    let project = |tape: &mut Tape<'_>, y: Var, proj: &Tensor| -> Result<Var> {
        let p = tape.input(proj.clone());
        let m = tape.mul(y, p)?;
        tape.sum_all(m)
    };
    match kind {
        "linear" => {
            let out = rng.random_range(1..6);
            let lin = Linear::new(&mut store, "lin", cols, out, rng);
            let b = lin.bias;
            store.get_mut(b).value = rand_tensor(&[out], rng, -1.0, 1.0);
            let x = store.add("x", rand_tensor(&[rows, cols], rng, -1.0, 1.0));
            let proj = rand_tensor(&[rows, out], rng, -1.0, 1.0);
            check_gradients(
                &mut store,
                |t| {
                    let xv = t.param(x);
                    let y = lin.forward(t, xv)?;
                    project(t, y, &proj)
                },
                h,
            )
        }
        "conv1d" => {
            let cin = rng.random_range(1..4);
            let cout = rng.random_range(1..4);
            let k = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let len = rng.random_range(k..k + 6);
            let conv = Conv1d::new(&mut store, "conv", cin, cout, k, stride, pad, rng);
            let b = conv.bias;
            store.get_mut(b).value = rand_tensor(&[cout], rng, -1.0, 1.0);
            let x = store.add("x", rand_tensor(&[rows, cin, len], rng, -1.0, 1.0));
            let lout = conv.out_len(len);
            let proj = rand_tensor(&[rows, cout, lout], rng, -1.0, 1.0);
            check_gradients(
                &mut store,
                |t| {
                    let xv = t.param(x);
                    let y = conv.forward(t, xv)?;
                    project(t, y, &proj)
                },
                h,
            )
        }
        "relu" | "gelu" | "tanh" | "sigmoid" => {
            let x = store.add("x", away_from_zero(&[rows, cols], rng));
            let proj = rand_tensor(&[rows, cols], rng, -1.0, 1.0);
            let kind = kind.to_string();
            check_gradients(
                &mut store,
                |t| {
                    let xv = t.param(x);
                    let y = match kind.as_str() {
                        "relu" => t.relu(xv)?,
                        "gelu" => t.gelu(xv)?,
                        "tanh" => t.tanh(xv)?,
                        _ => t.sigmoid(xv)?,
                    };
                    project(t, y, &proj)
                },
                h,
            )
        }
        "exp_log_div" => {
            let a = store.add("a", rand_tensor(&[rows, cols], rng, 0.5, 2.0));
            let b = store.add("b", rand_tensor(&[rows, cols], rng, 0.5, 2.0));
            check_gradients(
                &mut store,
                |t| {
                    let (av, bv) = (t.param(a), t.param(b));
                    let q = t.div(av, bv)?;
                    let l = t.log(q)?;
                    let e = t.exp(l)?;
                    let s = t.square(e)?;
                    let s = t.sqrt(s)?;
                    let d = t.sub(s, av)?;
                    let m = t.mul(d, bv)?;
                    let sc = t.scale(m, 0.7)?;
                    let sh = t.add_scalar(sc, 0.3)?;
                    let sum = t.add(sh, av)?;
                    t.mean_all(sum)
                },
                h,
            )
        }
        "concat_slice" => {
            let c2 = rng.random_range(1..4);
            let a = store.add("a", rand_tensor(&[rows, cols], rng, -1.0, 1.0));
            let b = store.add("b", rand_tensor(&[rows, c2], rng, -1.0, 1.0));
            let start = rng.random_range(0..cols + c2 - 1);
            let end = rng.random_range(start + 1..=cols + c2);
            let proj = rand_tensor(&[rows, end - start], rng, -1.0, 1.0);
            check_gradients(
                &mut store,
                |t| {
                    let (av, bv) = (t.param(a), t.param(b));
                    let c = t.concat_cols(&[av, bv, av])?;
                    let s = t.slice_cols(c, start, end)?;
                    let sq = t.tanh(s)?;
                    project(t, sq, &proj)
                },
                h,
            )
        }
        "l2_normalize" => {
            let a = store.add("a", rand_tensor(&[rows, cols + 1], rng, -1.0, 1.0));
            let b = store.add("b", rand_tensor(&[rows + 1, cols + 1], rng, -1.0, 1.0));
            check_gradients(
                &mut store,
                |t| {
                    let (av, bv) = (t.param(a), t.param(b));
                    let na = t.l2_normalize_rows(av)?;
                    let nb = t.l2_normalize_rows(bv)?;
                    let bt = t.transpose(nb)?;
                    let sim = t.matmul(na, bt)?;
                    let sim = t.scale(sim, 1.0 / 0.1)?;
                    let targets: Vec<usize> = (0..rows).map(|r| r % (rows + 1)).collect();
                    t.cross_entropy(sim, &targets)
                },
                h,
            )
        }
        "cross_entropy" => {
            let classes = cols + 1;
            let l = store.add("logits", rand_tensor(&[rows, classes], rng, -2.0, 2.0));
            let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            check_gradients(
                &mut store,
                |t| {
                    let lv = t.param(l);
                    t.cross_entropy(lv, &targets)
                },
                h,
            )
        }
        "binary_entropy" => {
            let z = store.add("z", rand_tensor(&[rows + 1, cols], rng, -2.0, 2.0));
            check_gradients(
                &mut store,
                |t| {
                    let zv = t.param(z);
                    let z2 = t.scale(zv, 2.0)?;
                    let per = t.binary_entropy_logits(z2)?;
                    let first = t.mean_all(per)?;
                    let p = t.sigmoid(z2)?;
                    let pbar = t.mean_rows(p)?;
                    let hbar = t.binary_entropy_prob(pbar)?;
                    let second = t.sum_all(hbar)?;
                    t.sub(first, second)
                },
                h,
            )
        }
        "reductions" => {
            let a = store.add("a", rand_tensor(&[rows, cols], rng, -1.0, 1.0));
            let r = store.add("r", rand_tensor(&[1, cols], rng, -1.0, 1.0));
            let proj = rand_tensor(&[rows, 1], rng, -1.0, 1.0);
            check_gradients(
                &mut store,
                |t| {
                    let (av, rv) = (t.param(a), t.param(r));
                    let rep = t.repeat_rows(rv, rows)?;
                    let prod = t.mul(av, rep)?;
                    let sc = t.sum_cols(prod)?;
                    let m = t.mean_rows(av)?;
                    let mm = t.mul(m, rv)?;
                    let s1 = project(t, sc, &proj)?;
                    let s2 = t.sum_all(mm)?;
                    let s2 = t.reshape(s2, &[])?;
                    t.add(s1, s2)
                },
                h,
            )
        }
        "mlp_stack" => {
            // conv → flatten → linear → gelu → linear, the style-encoder shape.
            let len = rng.random_range(3..7);
            let conv = Conv1d::new(&mut store, "conv", 2, 3, 3, 1, 1, rng);
            let l1 = Linear::new(&mut store, "l1", 3 * len, 4, rng);
            let l2 = Linear::new(&mut store, "l2", 4, 2, rng);
            let x = store.add("x", rand_tensor(&[rows, 2, len], rng, -1.0, 1.0));
            let proj = rand_tensor(&[rows, 2], rng, -1.0, 1.0);
            check_gradients(
                &mut store,
                |t| {
                    let xv = t.param(x);
                    let y = conv.forward(t, xv)?;
                    let y = t.tanh(y)?;
                    let y = t.reshape(y, &[rows, 3 * len])?;
                    let y = l1.forward(t, y)?;
                    let y = t.gelu(y)?;
                    let y = l2.forward(t, y)?;
                    project(t, y, &proj)
                },
                h,
            )
        }
        other => Err(crate::NumError::Invalid(format!(
            "unknown layer kind {other}"
        ))),
    }
}
