use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::loss::PROB_CLAMP;
use super::{DenseNet, OptimizerState, OutputActivation, Trace};

/// Training target for one example. The variant fixes the loss: a
/// reconstruction target is scored with MSE against a linear output, a class
/// label with cross-entropy against a softmax output.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Reconstruct(&'a [f64]),
    Label(u8),
}

/// Where the targets for a set of rows come from.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// Each row is its own target (autoencoder training).
    Inputs,
    Labels(&'a [u8]),
}

impl<'a> Targets<'a> {
    fn for_row(&self, inputs: &'a Matrix, i: usize) -> Target<'a> {
        match self {
            Targets::Inputs => Target::Reconstruct(inputs.row(i)),
            Targets::Labels(l) => Target::Label(l[i]),
        }
    }
}

/// Forward + backward for one example, adding `scale * grad` into `grad`.
/// Returns the example's loss.
pub(crate) fn accumulate_example(
    net: &DenseNet,
    x: &[f64],
    target: Target<'_>,
    scale: f64,
    grad: &mut [f64],
    trace: &mut Trace,
    scratch: &mut (Vec<f64>, Vec<f64>),
) -> Result<f64> {
    net.forward_into(x, trace)?;
    let out = trace.output();
    let (loss, delta) = match (target, net.output_activation()) {
        (Target::Reconstruct(t), OutputActivation::Linear) => {
            if t.len() != out.len() {
                return Err(Error::shape(format!(
                    "target has {} values, network outputs {}",
                    t.len(),
                    out.len()
                )));
            }
            let n = out.len() as f64;
            let mut loss = 0.0;
            let delta: Vec<f64> = out
                .iter()
                .zip(t)
                .map(|(y, t)| {
                    let d = y - t;
                    loss += d * d;
                    2.0 * d / n
                })
                .collect();
            (loss / n, delta)
        }
        (Target::Label(label), OutputActivation::Softmax) => {
            if out.len() != 2 || label > 1 {
                return Err(Error::shape(format!(
                    "binary label {label} against {} outputs",
                    out.len()
                )));
            }
            let loss = -out[label as usize].clamp(PROB_CLAMP, 1.0).ln();
            let mut delta = out.to_vec();
            delta[label as usize] -= 1.0;
            (loss, delta)
        }
        (Target::Reconstruct(_), OutputActivation::Softmax) => {
            return Err(Error::config("MSE target paired with a softmax output"));
        }
        (Target::Label(_), OutputActivation::Linear) => {
            return Err(Error::config("cross-entropy target paired with a linear output"));
        }
    };
    net.accumulate_gradient(trace, &delta, scale, grad, scratch);
    Ok(loss)
}

/// One optimizer step on the mean gradient of a batch. Returns the mean loss
/// measured before the step.
pub fn train_batch(
    net: &mut DenseNet,
    inputs: &[&[f64]],
    targets: &[Target<'_>],
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("training batch has no examples".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} inputs with {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let mut grad = vec![0.0; net.param_count()];
    let mut trace = Trace::default();
    let mut scratch = Default::default();
    let mut loss = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        loss += accumulate_example(net, x, *t, 1.0, &mut grad, &mut trace, &mut scratch)?;
    }
    let n = inputs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    optimizer.step(net.params_mut(), &grad)?;
    Ok(loss / n)
}

/// Trains on `order` in consecutive mini-batches of `batch_size` (the last
/// one may be short). Returns the mean pre-step batch loss.
pub(crate) fn train_rows(
    net: &mut DenseNet,
    inputs: &Matrix,
    targets: Targets<'_>,
    order: &[usize],
    batch_size: usize,
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut total = 0.0;
    let mut batches = 0usize;
    let mut xs = Vec::with_capacity(batch_size);
    let mut ts = Vec::with_capacity(batch_size);
    for chunk in order.chunks(batch_size) {
        xs.clear();
        ts.clear();
        for &i in chunk {
            xs.push(inputs.row(i));
            ts.push(targets.for_row(inputs, i));
        }
        total += train_batch(net, &xs, &ts, optimizer)?;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Plain centralised training: `epochs` passes, reshuffled from `rng` at the
/// start of every epoch. Returns the mean batch loss of the final epoch.
pub fn train_epochs<R: Rng + ?Sized>(
    net: &mut DenseNet,
    inputs: &Matrix,
    targets: Targets<'_>,
    epochs: usize,
    batch_size: usize,
    optimizer: &mut OptimizerState,
    rng: &mut R,
) -> Result<f64> {
    if inputs.rows() == 0 {
        return Err(Error::EmptyInput("no training rows".into()));
    }
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    let mut last = 0.0;
    for _ in 0..epochs {
        order.shuffle(rng);
        last = train_rows(net, inputs, targets, &order, batch_size, optimizer)?;
    }
    Ok(last)
}
