//! Round strategies and parameter fusion.
//!
//! Three ways for a client to spend one round:
//!
//! - multi-epoch: `E` full passes over the local data (plain FedAvg);
//! - FedMMB: the next `batch_count` mini-batches of an ordered, per-epoch
//!   shuffled sequence that carries over between rounds;
//! - FedSam: a fresh random sample of `sample_size` rows, one pass.
//!
//! The server fuses the returned vectors with [`fed_avg`].

use std::cmp::Ordering;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{train_rows, DenseNet, OptimizerState, ParamVector, Targets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StrategyKind {
    #[serde(rename = "fedavg")]
    FedAvgMultiEpoch { epochs: usize },
    #[serde(rename = "fedmmb")]
    FedMmb { batch_count: usize },
    #[serde(rename = "fedsam")]
    FedSam { sample_size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStrategy {
    #[serde(flatten)]
    pub kind: StrategyKind,
    pub batch_size: usize,
}

impl FusionStrategy {
    pub fn fedavg(epochs: usize, batch_size: usize) -> Self {
        Self {
            kind: StrategyKind::FedAvgMultiEpoch { epochs },
            batch_size,
        }
    }

    pub fn fedmmb(batch_count: usize, batch_size: usize) -> Self {
        Self {
            kind: StrategyKind::FedMmb { batch_count },
            batch_size,
        }
    }

    pub fn fedsam(sample_size: usize, batch_size: usize) -> Self {
        Self {
            kind: StrategyKind::FedSam { sample_size },
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        match self.kind {
            StrategyKind::FedAvgMultiEpoch { epochs: 0 } => Err(Error::config("epochs must be at least 1")),
            StrategyKind::FedMmb { batch_count: 0 } => Err(Error::config("batch_count must be at least 1")),
            StrategyKind::FedSam { sample_size } if sample_size < self.batch_size => Err(Error::config(format!(
                "sample_size {sample_size} is smaller than batch_size {}",
                self.batch_size
            ))),
            _ => Ok(()),
        }
    }
}

fn canonical_order(a: &ParamVector, b: &ParamVector) -> Ordering {
    a.count.cmp(&b.count).then_with(|| {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Example-weighted mean of the updates, with `count` the total examples.
///
/// Updates are first put in a canonical order (by count, then values), so the
/// result does not depend on argument order down to the last bit. The mean
/// is computed as `x_ref + sum_k (n_k / N) (x_k - x_ref)` around the first
/// update in that order, which makes a single update, or a set of identical
/// updates, come back unchanged.
pub fn fed_avg(updates: &[ParamVector]) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::EmptyInput("no updates to fuse".into()))?;
    let len = first.len();
    let mut total: u64 = 0;
    for (k, u) in updates.iter().enumerate() {
        if u.len() != len {
            return Err(Error::shape(format!("update {k} has {} values, expected {len}", u.len())));
        }
        if u.count == 0 {
            return Err(Error::config(format!("update {k} has a zero example count")));
        }
        total = total
            .checked_add(u.count)
            .ok_or_else(|| Error::config("example counts overflow"))?;
    }
    let mut sorted: Vec<&ParamVector> = updates.iter().collect();
    sorted.sort_by(|a, b| canonical_order(a, b));
    let reference = sorted[0];
    let n = total as f64;
    let mut out = reference.values.clone();
    for u in &sorted[1..] {
        let w = u.count as f64 / n;
        for (o, (x, r)) in out.iter_mut().zip(u.values.iter().zip(&reference.values)) {
            *o += w * (x - r);
        }
    }
    Ok(ParamVector::new(out, total))
}

/// FedMMB bookkeeping: a shuffled row order walked in fixed-size batches
/// across rounds. The order is reshuffled the moment its last batch is taken.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientCursor {
    pub shuffled_order: Vec<usize>,
    pub next_batch_index: usize,
    pub epoch_count: usize,
}

impl ClientCursor {
    pub fn new<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Result<Self> {
        if rows == 0 {
            return Err(Error::EmptyInput("cursor over an empty dataset".into()));
        }
        let mut shuffled_order: Vec<usize> = (0..rows).collect();
        shuffled_order.shuffle(rng);
        Ok(Self {
            shuffled_order,
            next_batch_index: 0,
            epoch_count: 0,
        })
    }

    pub fn total_batches(&self, batch_size: usize) -> usize {
        self.shuffled_order.len().div_ceil(batch_size)
    }
}

/// Takes the next `batch_count` batches. Crossing the end of an epoch
/// reshuffles and continues in the new order.
pub fn fedmmb_select<R: Rng + ?Sized>(
    cursor: &mut ClientCursor,
    batch_size: usize,
    batch_count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let total = cursor.total_batches(batch_size);
    let n = cursor.shuffled_order.len();
    let mut batches = Vec::with_capacity(batch_count);
    for _ in 0..batch_count {
        let start = cursor.next_batch_index * batch_size;
        batches.push(cursor.shuffled_order[start..(start + batch_size).min(n)].to_vec());
        cursor.next_batch_index += 1;
        if cursor.next_batch_index == total {
            cursor.next_batch_index = 0;
            cursor.epoch_count += 1;
            cursor.shuffled_order.shuffle(rng);
        }
    }
    Ok(batches)
}

/// Row indices for one FedSam round: without replacement when the client has
/// enough rows, with replacement (and a warning) otherwise.
pub fn fedsam_sample<R: Rng + ?Sized>(rows: usize, sample_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if rows == 0 {
        return Err(Error::EmptyInput("sampling from an empty dataset".into()));
    }
    if sample_size == 0 {
        return Err(Error::config("sample_size must be positive"));
    }
    if sample_size <= rows {
        let mut picked = index::sample(rng, rows, sample_size).into_vec();
        picked.shuffle(rng);
        Ok(picked)
    } else {
        log::warn!("sample_size {sample_size} exceeds {rows} local rows; sampling with replacement");
        Ok((0..sample_size).map(|_| rng.random_range(0..rows)).collect())
    }
}

/// Per-client training state that survives between rounds.
#[derive(Clone, Debug)]
pub struct LocalTrainer {
    pub cursor: ClientCursor,
    pub optimizer: OptimizerState,
    pub persist_optimizer: bool,
}

#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub update: ParamVector,
    /// Mean pre-step batch loss over the round.
    pub train_loss: f64,
}

/// Trains `net` (already holding the global parameters) for one round and
/// returns its parameters weighted by the number of rows visited.
pub fn client_round<R: Rng + ?Sized>(
    net: &mut DenseNet,
    strategy: &FusionStrategy,
    inputs: &Matrix,
    targets: Targets<'_>,
    trainer: &mut LocalTrainer,
    rng: &mut R,
) -> Result<RoundOutput> {
    strategy.validate()?;
    if inputs.rows() == 0 {
        return Err(Error::EmptyInput("client has no training rows".into()));
    }
    if !trainer.persist_optimizer {
        trainer.optimizer.reset();
    }
    let bs = strategy.batch_size;
    let (loss, count) = match strategy.kind {
        StrategyKind::FedAvgMultiEpoch { epochs } => {
            let total = trainer.cursor.total_batches(bs);
            let mut loss = 0.0;
            for _ in 0..epochs {
                // resume mid-epoch if a previous strategy left the cursor there
                let remaining = total - trainer.cursor.next_batch_index;
                let order: Vec<usize> = fedmmb_select(&mut trainer.cursor, bs, remaining, rng)?
                    .concat();
                loss += train_rows(net, inputs, targets, &order, bs, &mut trainer.optimizer)?;
            }
            (loss / epochs as f64, epochs * inputs.rows())
        }
        StrategyKind::FedMmb { batch_count } => {
            let batches = fedmmb_select(&mut trainer.cursor, bs, batch_count, rng)?;
            let mut loss = 0.0;
            let mut used = 0;
            for b in &batches {
                loss += train_rows(net, inputs, targets, b, bs, &mut trainer.optimizer)?;
                used += b.len();
            }
            (loss / batches.len() as f64, used)
        }
        StrategyKind::FedSam { sample_size } => {
            let rows = fedsam_sample(inputs.rows(), sample_size, rng)?;
            let loss = train_rows(net, inputs, targets, &rows, bs, &mut trainer.optimizer)?;
            (loss, sample_size)
        }
    };
    Ok(RoundOutput {
        update: net.flatten(count as u64),
        train_loss: loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, OptimizerConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn pv(v: &[f64], n: u64) -> ParamVector {
        ParamVector::new(v.to_vec(), n)
    }

    #[test]
    fn fed_avg_examples() {
        assert_eq!(fed_avg(&[pv(&[1.0, 2.0], 5), pv(&[3.0, 4.0], 5)]).unwrap(), pv(&[2.0, 3.0], 10));
        assert_eq!(fed_avg(&[pv(&[0.0, 0.0], 1), pv(&[4.0, 8.0], 3)]).unwrap(), pv(&[3.0, 6.0], 4));
        assert_eq!(fed_avg(&[pv(&[0.1, -7.3], 9)]).unwrap(), pv(&[0.1, -7.3], 9));
    }

    #[test]
    fn fed_avg_errors() {
        assert!(matches!(fed_avg(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(fed_avg(&[pv(&[1.0], 1), pv(&[1.0, 2.0], 1)]), Err(Error::Shape(_))));
        assert!(fed_avg(&[pv(&[1.0], 0)]).is_err());
    }

    #[test]
    fn fedmmb_walks_pairs_then_reshuffles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = ClientCursor::new(100, &mut rng).unwrap();
        let first_order = c.shuffled_order.clone();
        for round in 0..5 {
            let b = fedmmb_select(&mut c, 10, 2, &mut rng).unwrap();
            assert_eq!(b[0], first_order[round * 20..round * 20 + 10]);
            assert_eq!(b[1], first_order[round * 20 + 10..round * 20 + 20]);
        }
        assert_eq!(c.epoch_count, 1);
        assert_eq!(c.next_batch_index, 0);
        assert_ne!(c.shuffled_order, first_order);
    }

    #[test]
    fn fedmmb_full_epoch_per_round() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = ClientCursor::new(35, &mut rng).unwrap();
        let b = fedmmb_select(&mut c, 10, 4, &mut rng).unwrap();
        let seen: HashSet<usize> = b.concat().into_iter().collect();
        assert_eq!(seen.len(), 35);
        assert_eq!(b[3].len(), 5);
        assert_eq!(c.epoch_count, 1);
    }

    #[test]
    fn fedmmb_imbalance_after_five_rounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut big = ClientCursor::new(100, &mut rng).unwrap();
        let mut small = ClientCursor::new(40, &mut rng).unwrap();
        for _ in 0..5 {
            fedmmb_select(&mut big, 10, 2, &mut rng).unwrap();
            fedmmb_select(&mut small, 10, 2, &mut rng).unwrap();
        }
        assert_eq!((big.epoch_count, small.epoch_count), (1, 2));
    }

    #[test]
    fn fedsam_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = fedsam_sample(100_000, 5000, &mut rng).unwrap();
        assert_eq!(s.len(), 5000);
        assert_eq!(s.len().div_ceil(20), 250);
        assert_eq!(fedsam_sample(30_000, 5000, &mut rng).unwrap().len(), 5000);
        let mut all = fedsam_sample(50, 50, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        let over = fedsam_sample(3, 10, &mut rng).unwrap();
        assert!(over.len() == 10 && over.iter().all(|&i| i < 3));
        assert!(fedsam_sample(0, 1, &mut rng).is_err());
    }

    #[test]
    fn strategy_validation() {
        assert!(FusionStrategy::fedsam(10, 20).validate().is_err());
        assert!(FusionStrategy::fedmmb(0, 20).validate().is_err());
        assert!(FusionStrategy::fedavg(0, 20).validate().is_err());
        assert!(FusionStrategy::fedsam(20, 20).validate().is_ok());
        let s: FusionStrategy = toml::from_str("kind = \"fedsam\"\nsample_size = 1000\nbatch_size = 20").unwrap();
        assert_eq!(s, FusionStrategy::fedsam(1000, 20));
    }

    fn toy_setup(rows: usize, lr: f64) -> (DenseNet, Matrix, LocalTrainer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::autoencoder(&[4, 2, 4], Activation::Tanh, &mut rng).unwrap();
        let data: Vec<f64> = (0..rows * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = Matrix::new(data, 4).unwrap();
        let cfg = OptimizerConfig::rmsprop(lr);
        let trainer = LocalTrainer {
            cursor: ClientCursor::new(rows, &mut rng).unwrap(),
            optimizer: OptimizerState::new(cfg, net.param_count()).unwrap(),
            persist_optimizer: false,
        };
        (net, m, trainer, rng)
    }

    #[test]
    fn round_counts_follow_strategy() {
        let (mut net, m, mut t, mut rng) = toy_setup(45, 1e-3);
        let s = FusionStrategy::fedmmb(2, 10);
        let counts: Vec<u64> = (0..5)
            .map(|_| client_round(&mut net, &s, &m, Targets::Inputs, &mut t, &mut rng).unwrap().update.count)
            .collect();
        // 5 batches per epoch: 10+10, 10+10, 5+10 (epoch boundary), 10+10, 10+5
        assert_eq!(counts, vec![20, 20, 15, 20, 15]);
        let s = FusionStrategy::fedsam(30, 10);
        for _ in 0..3 {
            assert_eq!(client_round(&mut net, &s, &m, Targets::Inputs, &mut t, &mut rng).unwrap().update.count, 30);
        }
        let s = FusionStrategy::fedavg(2, 10);
        assert_eq!(client_round(&mut net, &s, &m, Targets::Inputs, &mut t, &mut rng).unwrap().update.count, 90);
    }

    #[test]
    fn zero_learning_rate_returns_global() {
        let (mut net, m, mut t, mut rng) = toy_setup(20, 0.0);
        let before = net.params().to_vec();
        for s in [FusionStrategy::fedavg(1, 5), FusionStrategy::fedmmb(2, 5), FusionStrategy::fedsam(10, 5)] {
            let out = client_round(&mut net, &s, &m, Targets::Inputs, &mut t, &mut rng).unwrap();
            assert_eq!(out.update.values, before);
        }
    }

    fn updates_strategy() -> impl Strategy<Value = Vec<ParamVector>> {
        (1usize..6).prop_flat_map(|len| {
            prop::collection::vec(
                (prop::collection::vec(-1e3f64..1e3, len), 1u64..1000).prop_map(|(v, n)| ParamVector::new(v, n)),
                1..6,
            )
        })
    }

    proptest! {
        #[test]
        fn fed_avg_permutation_invariant(mut ups in updates_strategy(), seed in any::<u64>()) {
            let a = fed_avg(&ups).unwrap();
            ups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = fed_avg(&ups).unwrap();
            let bits = |p: &ParamVector| p.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
            prop_assert_eq!(a.count, ups.iter().map(|u| u.count).sum::<u64>());
            // weighted-mean oracle
            let n = a.count as f64;
            for i in 0..a.len() {
                let direct: f64 = ups.iter().map(|u| u.count as f64 * u.values[i]).sum::<f64>() / n;
                prop_assert!((a.values[i] - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
            }
        }

        #[test]
        fn fed_avg_identical_updates(v in prop::collection::vec(-1e6f64..1e6, 1..8), counts in prop::collection::vec(1u64..100, 1..6)) {
            let ups: Vec<_> = counts.iter().map(|&n| ParamVector::new(v.clone(), n)).collect();
            prop_assert_eq!(fed_avg(&ups).unwrap().values, v);
        }

        #[test]
        fn fedsam_has_no_duplicates(rows in 1usize..500, frac in 0.01f64..1.0, seed in any::<u64>()) {
            let k = ((rows as f64 * frac).ceil() as usize).max(1);
            let s = fedsam_sample(rows, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let set: HashSet<_> = s.iter().collect();
            prop_assert_eq!(set.len(), k);
        }

        #[test]
        fn fedmmb_epoch_covers_every_row(rows in 1usize..200, bs in 1usize..30, bc in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = ClientCursor::new(rows, &mut rng).unwrap();
            let total = c.total_batches(bs);
            let mut taken = Vec::new();
            while taken.len() < total {
                taken.extend(fedmmb_select(&mut c, bs, bc, &mut rng).unwrap());
            }
            let mut epoch: Vec<usize> = taken[..total].concat();
            epoch.sort();
            prop_assert_eq!(epoch, (0..rows).collect::<Vec<_>>());
        }
    }
}
