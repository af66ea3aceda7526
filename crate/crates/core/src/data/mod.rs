//! Datasets: splits, synthetic generators, IDX and CSV ingestion, and
//! train-time augmentation.

mod augment;
mod csv_file;
mod idx;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment_batch, Augmentation, BatchStream, Normalization};
pub use csv_file::load_csv;
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, IdxImages};
pub use synth::{gen_blobs, gen_spirals};

/// Labelled samples: `inputs` is `N × feature-shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Normalization already applied to `inputs`, if any.
    pub normalization: Option<Normalization>,
}

impl DatasetSplit {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::shape(
                "dataset",
                format!("inputs must be N × features, got {:?}", inputs.shape()),
            ));
        }
        if inputs.batch() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} inputs but {} labels", inputs.batch(), labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label {
                index,
                label,
                classes,
            });
        }
        Ok(DatasetSplit {
            inputs,
            labels,
            classes,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetSplit {
        DatasetSplit {
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            normalization: self.normalization.clone(),
        }
    }

    pub(crate) fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyDataset(what.to_string()))
        } else {
            Ok(())
        }
    }
}

/// Train/validation/test partition of one dataset. The three index sets are
/// disjoint by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    /// Splits 80/10/10 along a seeded permutation. Small datasets keep at
    /// least one training sample; val and test may then be empty.
    pub fn split(all: DatasetSplit, seed: u64) -> Dataset {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = all.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, crate::stream::SPLIT)));
        let val = n / 10;
        let test = n / 10;
        let train = n - val - test;
        Dataset {
            train: all.subset(&order[..train]),
            val: all.subset(&order[train..train + val]),
            test: all.subset(&order[train + val..]),
        }
    }

    /// Standardizes every split with statistics fitted on the training split.
    pub fn normalized(&self) -> Result<Dataset> {
        let norm = Normalization::fit(&self.train)?;
        Ok(Dataset {
            train: norm.apply(&self.train)?,
            val: norm.apply(&self.val)?,
            test: norm.apply(&self.test)?,
        })
    }
}

/// Dataset sources understood by experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    SyntheticSpirals {
        n_per_class: usize,
        noise: f64,
        seed: u64,
    },
    SyntheticBlobs {
        n_per_class: usize,
        classes: usize,
        spread: f64,
        seed: u64,
    },
    IdxFiles {
        images: String,
        labels: String,
        seed: u64,
    },
    Csv {
        path: String,
        /// Name of the label column; every other column is a feature.
        label_column: String,
        seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::SyntheticSpirals {
                n_per_class,
                noise,
                seed,
            } => Ok(gen_spirals(*n_per_class, *noise, *seed)),
            DatasetSource::SyntheticBlobs {
                n_per_class,
                classes,
                spread,
                seed,
            } => Ok(gen_blobs(*n_per_class, *classes, *spread, *seed)),
            DatasetSource::IdxFiles {
                images,
                labels,
                seed,
            } => Ok(Dataset::split(load_idx(images, labels)?, *seed)),
            DatasetSource::Csv {
                path,
                label_column,
                seed,
            } => Ok(Dataset::split(load_csv(path, label_column)?, *seed)),
        }
    }

    /// Short identifier recorded in entropy reports.
    pub fn id(&self) -> String {
        match self {
            DatasetSource::SyntheticSpirals {
                n_per_class,
                noise,
                seed,
            } => format!("spirals-n{n_per_class}-noise{noise}-seed{seed}"),
            DatasetSource::SyntheticBlobs {
                n_per_class,
                classes,
                seed,
                ..
            } => format!("blobs-n{n_per_class}-c{classes}-seed{seed}"),
            DatasetSource::IdxFiles { images, .. } => format!("idx:{images}"),
            DatasetSource::Csv { path, .. } => format!("csv:{path}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_uses_train_statistics() {
        let data = gen_blobs(30, 3, 0.5, 4);
        let norm = data.normalized().unwrap();
        let fitted = Normalization::fit(&norm.train).unwrap();
        assert!(fitted.mean.iter().all(|m| m.abs() < 1e-10));
        let direct = Normalization::fit(&data.train).unwrap().apply(&data.val).unwrap();
        assert_eq!(norm.val, direct);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let n = 57;
        let inputs = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let all = DatasetSplit::new(inputs, vec![0; n], 1).unwrap();
        let ds = Dataset::split(all, 3);
        let mut seen: Vec<f64> = [&ds.train, &ds.val, &ds.test]
            .iter()
            .flat_map(|s| s.inputs.data().to_vec())
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (47, 5, 5));
    }

    #[test]
    fn rejects_bad_labels() {
        let inputs = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            DatasetSplit::new(inputs, vec![0, 3], 2),
            Err(Error::Label { index: 1, .. })
        ));
    }
}
