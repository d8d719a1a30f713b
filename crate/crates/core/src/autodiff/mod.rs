//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation with its eagerly computed value. Binary
//! elementwise ops broadcast 1×n rows, n×1 columns and 1×1 scalars; the
//! backward pass sums adjoints back over broadcast axes. Dropout masks are
//! recorded nodes drawn from the tape's own seeded RNG, so rebuilding a graph
//! on a tape with the same seed reproduces it bit for bit.

mod tape;
mod tensor;

pub use tape::{sigmoid, softplus, Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences at `point`.
///
/// Returns max over coordinates of `|analytic − numeric| / max(1, |analytic|)`.
/// `f` is rebuilt on a fresh tape with the same seed for every evaluation, so
/// dropout masks (if any) are held fixed.
pub fn gradcheck<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("gradcheck step must be > 0, got {step}")));
    }
    const SEED: u64 = 0x6772_6164;

    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new(SEED);
        let input = tape.param(x.clone());
        let out = f(&mut tape, input)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::Contract("gradcheck function must return a scalar".into()))
    };

    let mut tape = Tape::new(SEED);
    let input = tape.param(point.clone());
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let (rows, cols) = point.shape();
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(rows, cols));

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
