//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "FDIDSNET"
//! version      u32      currently 1
//! n_sizes      u32
//! sizes        n_sizes x u32
//! hidden       u8       0 relu, 1 sigmoid, 2 tanh
//! output       u8       0 linear, 1 softmax
//! n_params     u64
//! params       n_params x f64 (IEEE-754 bits, LE)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{param_count, Activation, DenseNet, OutputActivation};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDIDSNET";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(net: &DenseNet, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(net.layer_sizes().len() as u32).to_le_bytes())?;
    for &s in net.layer_sizes() {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    let hidden = match net.hidden_activation() {
        Activation::Relu => 0u8,
        Activation::Sigmoid => 1,
        Activation::Tanh => 2,
    };
    let output = match net.output_activation() {
        OutputActivation::Linear => 0u8,
        OutputActivation::Softmax => 1,
    };
    w.write_all(&[hidden, output])?;
    w.write_all(&(net.param_count() as u64).to_le_bytes())?;
    for p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Parse(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<DenseNet> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if n > 1024 {
        return Err(Error::Parse(format!("implausible layer count {n}")));
    }
    let sizes = (0..n)
        .map(|_| read_array(&mut r).map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<Vec<_>>>()?;
    let [hidden, output] = read_array(&mut r)?;
    let hidden = match hidden {
        0 => Activation::Relu,
        1 => Activation::Sigmoid,
        2 => Activation::Tanh,
        other => return Err(Error::Parse(format!("unknown hidden activation {other}"))),
    };
    let output = match output {
        0 => OutputActivation::Linear,
        1 => OutputActivation::Softmax,
        other => return Err(Error::Parse(format!("unknown output activation {other}"))),
    };
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if count != param_count(&sizes) {
        return Err(Error::Parse(format!(
            "checkpoint declares {count} parameters for topology {sizes:?}"
        )));
    }
    let mut net = DenseNet::zeros(&sizes, hidden, output)?;
    for p in net.params_mut() {
        *p = f64::from_le_bytes(read_array(&mut r)?);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_exact(seed in any::<u64>(), hidden in 1usize..6, width in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sizes = [width, hidden.min(width - 1).max(1), width];
            let mut net = DenseNet::autoencoder(&sizes, Activation::Sigmoid, &mut rng).unwrap();
            // odd bit patterns survive too
            net.params_mut()[0] = -0.0;
            net.params_mut()[1] = f64::MIN_POSITIVE / 3.0;
            let mut buf = Vec::new();
            write_checkpoint(&net, &mut buf).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.layer_sizes(), net.layer_sizes());
            let a: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = net.params().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_checkpoint(&b"NOTAMODEL..."[..]).is_err());
        let net = DenseNet::zeros(&[2, 2], Activation::Relu, OutputActivation::Softmax).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
