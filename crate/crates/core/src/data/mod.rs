//! Datasets: MNIST in IDX format, a synthetic detection task with a known
//! Bayes posterior, and seeded splitting.

mod idx;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::one_hot_classes;
use crate::tensor::{Matrix, Rng};

pub use idx::{
    load_idx, parse_idx, parse_idx_images, parse_idx_labels, write_idx, IdxImages, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use synth::{bayes_posterior, synth_detection, SynthDetection, SynthDetectionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// One-hot rows, one class per example.
    Multiclass,
    /// Independent binary targets per location.
    Multibox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    provenance: String,
    mode: TargetMode,
    features: Matrix,
    targets: Matrix,
}

impl Dataset {
    /// Multiclass features must lie in `[0, 1]` with one-hot targets.
    /// Multibox features only need to be finite; targets are 0 or 1.
    pub fn new(
        name: impl Into<String>,
        provenance: impl Into<String>,
        mode: TargetMode,
        features: Matrix,
        targets: Matrix,
    ) -> Result<Self> {
        if features.rows() != targets.rows() {
            return Err(Error::invalid(format!(
                "{} feature rows vs {} target rows",
                features.rows(),
                targets.rows()
            )));
        }
        match mode {
            TargetMode::Multiclass => {
                if features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid("multiclass features must lie in [0, 1]"));
                }
                one_hot_classes(&targets)?;
            }
            TargetMode::Multibox => {
                if !features.is_finite() {
                    return Err(Error::invalid("features must be finite"));
                }
                if targets.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid("multibox targets must be 0 or 1"));
                }
            }
        }
        Ok(Dataset {
            name: name.into(),
            provenance: provenance.into(),
            mode,
            features,
            targets,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn mode(&self) -> TargetMode {
        self.mode
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of classes (multiclass) or locations (multibox).
    pub fn num_outputs(&self) -> usize {
        self.targets.cols()
    }

    /// Class index per example. Multiclass only.
    pub fn classes(&self) -> Result<Vec<usize>> {
        if self.mode != TargetMode::Multiclass {
            return Err(Error::invalid("class indices need multiclass targets"));
        }
        one_hot_classes(&self.targets)
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            provenance: self.provenance.clone(),
            mode: self.mode,
            features: self.features.select_rows(indices),
            targets: self.targets.select_rows(indices),
        }
    }

    /// `n` examples drawn without replacement, kept in their original order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::invalid(format!(
                "cannot sample {n} of {} examples",
                self.len()
            )));
        }
        let mut idx = Rng::new(seed).permutation(self.len());
        idx.truncate(n);
        idx.sort_unstable();
        Ok(self.subset(&idx, format!("{}[{n}]", self.name)))
    }

    /// Same examples with replaced targets of the same shape.
    pub fn with_targets(&self, targets: Matrix) -> Result<Dataset> {
        if targets.shape() != self.targets.shape() {
            return Err(Error::invalid(format!(
                "targets {:?} for a dataset with targets {:?}",
                targets.shape(),
                self.targets.shape()
            )));
        }
        Dataset::new(
            self.name.clone(),
            self.provenance.clone(),
            self.mode,
            self.features.clone(),
            targets,
        )
    }
}

/// Train, validation and test parts of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Disjoint seeded split by `fractions` (train, validation, test), which
/// must sum to one. Multiclass data is stratified: each class is divided
/// separately, validation and test sizes rounded to nearest and train taking
/// the remainder. Each part keeps the original example order.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let parts = split_indices(dataset, fractions, seed)?;
    let name = dataset.name();
    Ok(Split {
        train: dataset.subset(&parts[0], format!("{name}/train")),
        validation: dataset.subset(&parts[1], format!("{name}/validation")),
        test: dataset.subset(&parts[2], format!("{name}/test")),
    })
}

/// Row indices of the parts [`split`] would produce, each sorted.
pub fn split_indices(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::invalid(format!(
            "fractions {fractions:?} must lie in [0, 1]"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("fractions {fractions:?} sum to {total}")));
    }

    let groups: Vec<Vec<usize>> = match dataset.mode {
        TargetMode::Multiclass => {
            let classes = dataset.classes()?;
            let mut g = vec![Vec::new(); dataset.num_outputs()];
            for (i, &c) in classes.iter().enumerate() {
                g[c].push(i);
            }
            g
        }
        TargetMode::Multibox => vec![(0..dataset.len()).collect()],
    };

    let mut rng = Rng::new(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut group in groups {
        rng.shuffle(&mut group);
        let n = group.len() as f64;
        let n_val = (fractions[1] * n).round() as usize;
        let n_test = ((fractions[2] * n).round() as usize).min(group.len() - n_val);
        let n_train = group.len() - n_val - n_test;
        parts[0].extend_from_slice(&group[..n_train]);
        parts[1].extend_from_slice(&group[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&group[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}
