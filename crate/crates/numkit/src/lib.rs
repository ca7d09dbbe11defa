//! Dense `f64` tensors, a reverse-mode tape, the handful of layers the
//! driving-style models need, Adam, and a checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod param;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, ParamRecord};
pub use error::{NumError, Result};
pub use layers::{
    kaiming_uniform, sinusoidal_embedding, Activation, Conv1d, Layer, Linear, Mlp, Sequential,
};
pub use param::{Gradients, Param, ParamId, ParamStore};
pub use tape::{gelu, Tape, Var};
pub use tensor::{checked_mode, Tensor};

/// Unbatched cross-correlation of `[channels, length]` with `[out, channels, width]` kernels.
pub fn conv1d(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c, l) = input.require_2d("conv1d")?;
    let out_ch = kernels.shape().first().copied().unwrap_or(0);
    let mut tape = Tape::detached();
    let x = tape.input(input.clone().reshape(vec![1, c, l])?);
    let w = tape.input(kernels.clone());
    let b = tape.input(bias.cloned().unwrap_or_else(|| Tensor::zeros(&[out_ch])));
    let y = tape.conv1d(x, w, b, stride, padding)?;
    let out = tape.value(y).clone();
    let lout = out.shape()[2];
    out.reshape(vec![out_ch, lout])
}
