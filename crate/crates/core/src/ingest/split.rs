use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::FlowDataset;

/// Row counts for the three per-client partitions. Classifier rows are
/// balanced by down-sampling each class to the requested count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ae_train_benign: usize,
    #[serde(default)]
    pub clf_train_benign: usize,
    #[serde(default)]
    pub clf_train_attack: usize,
    #[serde(default)]
    pub test_benign: usize,
    #[serde(default)]
    pub test_attack: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn cic_ids2017() -> Self {
        Self {
            ae_train_benign: 1_136_538,
            clf_train_benign: 61_000,
            clf_train_attack: 60_400,
            test_benign: 8_000,
            test_attack: 8_000,
            seed: 0,
        }
    }

    pub fn cic_ids2018() -> Self {
        Self {
            ae_train_benign: 2_279_560,
            clf_train_benign: 23_375,
            clf_train_attack: 23_375,
            test_benign: 8_000,
            test_attack: 8_000,
            seed: 0,
        }
    }

    pub fn ncc_dc() -> Self {
        Self {
            ae_train_benign: 79_848,
            clf_train_benign: 10_000,
            clf_train_attack: 10_000,
            test_benign: 8_000,
            test_attack: 8_000,
            seed: 0,
        }
    }

    /// Benign-only capture used purely for autoencoder training.
    pub fn mawi() -> Self {
        Self {
            ae_train_benign: 59_138,
            clf_train_benign: 0,
            clf_train_attack: 0,
            test_benign: 0,
            test_attack: 0,
            seed: 0,
        }
    }

    pub fn benign_total(&self) -> usize {
        self.ae_train_benign + self.clf_train_benign + self.test_benign
    }

    pub fn attack_total(&self) -> usize {
        self.clf_train_attack + self.test_attack
    }

    fn needs_labels(&self) -> bool {
        self.clf_train_benign + self.clf_train_attack + self.test_benign + self.test_attack > 0
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub ae_train: FlowDataset,
    /// Absent for unlabeled sources.
    pub clf_train: Option<FlowDataset>,
    pub test: Option<FlowDataset>,
    /// Source row indices of each partition, for audit.
    pub indices: [Vec<usize>; 3],
}

/// Partitions `dataset` into disjoint autoencoder, classifier and test sets.
/// Within each class, rows are drawn from one seeded permutation, so
/// partitions never overlap and the same seed gives the same rows.
pub fn split(dataset: &FlowDataset, spec: &SplitSpec) -> Result<Splits> {
    if !dataset.is_labeled() && spec.needs_labels() {
        return Err(Error::config(format!(
            "{} is unlabeled; only ae_train_benign may be requested",
            dataset.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut benign = dataset.class_indices(0);
    let mut attack = dataset.class_indices(1);
    if benign.len() < spec.benign_total() {
        return Err(Error::Capacity {
            class: "benign".into(),
            requested: spec.benign_total(),
            available: benign.len(),
        });
    }
    if attack.len() < spec.attack_total() {
        return Err(Error::Capacity {
            class: "attack".into(),
            requested: spec.attack_total(),
            available: attack.len(),
        });
    }
    benign.shuffle(&mut rng);
    attack.shuffle(&mut rng);

    let (ae_idx, rest) = benign.split_at(spec.ae_train_benign);
    let (clf_b, rest) = rest.split_at(spec.clf_train_benign);
    let test_b = &rest[..spec.test_benign];
    let (clf_a, rest) = attack.split_at(spec.clf_train_attack);
    let test_a = &rest[..spec.test_attack];

    let clf_idx: Vec<usize> = clf_b.iter().chain(clf_a).copied().collect();
    let test_idx: Vec<usize> = test_b.iter().chain(test_a).copied().collect();

    let ae_train = dataset.subset(ae_idx, format!("{}/ae_train", dataset.name));
    let (clf_train, test) = if dataset.is_labeled() {
        (
            Some(dataset.subset(&clf_idx, format!("{}/clf_train", dataset.name))),
            Some(dataset.subset(&test_idx, format!("{}/test", dataset.name))),
        )
    } else {
        (None, None)
    };
    Ok(Splits {
        ae_train,
        clf_train,
        test,
        indices: [ae_idx.to_vec(), clf_idx, test_idx],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::FeatureSchema;
    use crate::matrix::Matrix;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    fn toy(labels: Vec<u8>) -> FlowDataset {
        let n = labels.len();
        let data: Vec<f64> = (0..n * 75).map(|i| (i / 75) as f64).collect();
        FlowDataset::new(
            "toy",
            Matrix::new(data, 75).unwrap(),
            Some(labels),
            Arc::new(FeatureSchema::cic()),
        )
        .unwrap()
    }

    fn spec(ae: usize, cb: usize, ca: usize, tb: usize, ta: usize, seed: u64) -> SplitSpec {
        SplitSpec {
            ae_train_benign: ae,
            clf_train_benign: cb,
            clf_train_attack: ca,
            test_benign: tb,
            test_attack: ta,
            seed,
        }
    }

    #[test]
    fn six_row_toy_split() {
        let ds = toy(vec![0, 0, 0, 0, 1, 1]);
        let s = split(&ds, &spec(2, 1, 1, 1, 1, 3)).unwrap();
        assert_eq!(s.ae_train.rows(), 2);
        assert_eq!(s.clf_train.as_ref().unwrap().rows(), 2);
        assert_eq!(s.test.as_ref().unwrap().rows(), 2);
        assert!(s.ae_train.labels.as_ref().unwrap().iter().all(|&l| l == 0));
        let mut clf_labels = s.clf_train.unwrap().labels.unwrap();
        clf_labels.sort();
        assert_eq!(clf_labels, vec![0, 1]);
    }

    #[test]
    fn seeded_split_is_reproducible() {
        let ds = toy((0..40).map(|i| (i % 3 == 0) as u8).collect());
        let a = split(&ds, &spec(10, 5, 5, 5, 5, 9)).unwrap();
        let b = split(&ds, &spec(10, 5, 5, 5, 5, 9)).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn capacity_error_names_class() {
        let ds = toy(vec![0, 0, 1]);
        match split(&ds, &spec(1, 0, 2, 0, 0, 0)) {
            Err(Error::Capacity { class, requested: 2, available: 1 }) => assert_eq!(class, "attack"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(split(&ds, &spec(3, 0, 0, 0, 0, 0)), Err(Error::Capacity { .. })));
    }

    #[test]
    fn table_one_presets() {
        let s = SplitSpec::cic_ids2017();
        assert_eq!(
            (s.ae_train_benign, s.clf_train_benign, s.clf_train_attack, s.test_benign, s.test_attack),
            (1_136_538, 61_000, 60_400, 8_000, 8_000)
        );
        assert_eq!(SplitSpec::cic_ids2018().clf_train_attack, 23_375);
        assert_eq!(SplitSpec::ncc_dc().ae_train_benign, 79_848);
        assert_eq!(SplitSpec::mawi().ae_train_benign, 59_138);
    }

    #[test]
    fn unlabeled_only_feeds_autoencoder() {
        let mut ds = toy(vec![0; 5]);
        ds.labels = None;
        let s = split(&ds, &spec(4, 0, 0, 0, 0, 0)).unwrap();
        assert_eq!(s.ae_train.rows(), 4);
        assert!(s.clf_train.is_none());
        assert!(split(&ds, &spec(1, 1, 0, 0, 0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint(n_b in 5usize..30, n_a in 2usize..20, seed in any::<u64>()) {
            let labels: Vec<u8> = (0..n_b).map(|_| 0).chain((0..n_a).map(|_| 1)).collect();
            let ds = toy(labels);
            let sp = spec(n_b / 3, n_b / 3, n_a / 2, n_b / 4, n_a / 3, seed);
            let s = split(&ds, &sp).unwrap();
            let mut seen = HashSet::new();
            for part in &s.indices {
                for &i in part {
                    prop_assert!(seen.insert(i));
                }
            }
            prop_assert_eq!(s.indices[1].len(), sp.clf_train_benign + sp.clf_train_attack);
        }
    }
}
