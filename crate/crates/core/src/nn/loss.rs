use crate::error::{Error, Result};

use super::DenseNet;

/// Lower clamp applied to class probabilities before taking the log.
pub const PROB_CLAMP: f64 = 1e-12;

pub fn mse_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(format!(
            "mse over vectors of length {} and {}",
            x.len(),
            x_hat.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput("mse of empty vectors".into()));
    }
    let sum: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// `-ln(probs[label])` with the probability clamped to `[PROB_CLAMP, 1]`.
pub fn cross_entropy_loss(probs: &[f64], label: u8) -> Result<f64> {
    if probs.len() != 2 {
        return Err(Error::shape(format!(
            "cross entropy expects 2 class probabilities, got {}",
            probs.len()
        )));
    }
    if label > 1 {
        return Err(Error::shape(format!("label {label} is not binary")));
    }
    let p = probs[label as usize].clamp(PROB_CLAMP, 1.0);
    Ok(-p.ln())
}

/// Per-feature squared error between `x` and the autoencoder's reconstruction.
pub fn reconstruction_error(net: &DenseNet, x: &[f64]) -> Result<Vec<f64>> {
    if !net.is_autoencoder() {
        return Err(Error::config("reconstruction error needs an autoencoder"));
    }
    let x_hat = net.forward(x)?;
    Ok(x.iter().zip(&x_hat).map(|(a, b)| (a - b) * (a - b)).collect())
}
