//! Label corruption: class-conditional flips through a fixed derangement or
//! a general confusion matrix, and random removal of positive annotations.
//!
//! Every process is a pure function of its inputs and seed. Corruption is
//! applied once to build a static noisy training set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseMode {
    /// With probability `corrupt_prob` an example of class `c` is relabeled
    /// `permutation[c]`.
    Permutation {
        permutation: Vec<usize>,
        corrupt_prob: f64,
    },
    /// Row `c` is the distribution of the observed label for clean class `c`.
    Confusion { confusion: Matrix },
    /// Each positive target entry is zeroed with probability `drop_prob`.
    AnnotationDrop { drop_prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn permutation(permutation: Vec<usize>, corrupt_prob: f64, seed: u64) -> Self {
        NoiseSpec {
            mode: NoiseMode::Permutation {
                permutation,
                corrupt_prob,
            },
            seed,
        }
    }

    pub fn confusion(confusion: Matrix, seed: u64) -> Self {
        NoiseSpec {
            mode: NoiseMode::Confusion { confusion },
            seed,
        }
    }

    pub fn annotation_drop(drop_prob: f64, seed: u64) -> Self {
        NoiseSpec {
            mode: NoiseMode::AnnotationDrop { drop_prob },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            NoiseMode::Permutation {
                permutation,
                corrupt_prob,
            } => {
                check_prob("corrupt_prob", *corrupt_prob)?;
                check_bijection(permutation)
            }
            NoiseMode::Confusion { confusion } => check_row_stochastic(confusion),
            NoiseMode::AnnotationDrop { drop_prob } => check_prob("drop_prob", *drop_prob),
        }
    }

    /// Number of classes the spec is defined over, if it fixes one.
    pub fn num_classes(&self) -> Option<usize> {
        match &self.mode {
            NoiseMode::Permutation { permutation, .. } => Some(permutation.len()),
            NoiseMode::Confusion { confusion } => Some(confusion.rows()),
            NoiseMode::AnnotationDrop { .. } => None,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_bijection(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

fn check_row_stochastic(m: &Matrix) -> Result<()> {
    if m.rows() != m.cols() || m.rows() == 0 {
        return Err(Error::invalid(format!(
            "confusion matrix must be square, got {:?}",
            m.shape()
        )));
    }
    for (r, row) in m.row_iter().enumerate() {
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(format!(
                "confusion row {r} has entries outside [0, 1]"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("confusion row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// Class index of every row of a one-hot matrix.
pub fn one_hot_classes(labels: &Matrix) -> Result<Vec<usize>> {
    labels
        .row_iter()
        .enumerate()
        .map(|(r, row)| {
            let mut class = None;
            for (k, &v) in row.iter().enumerate() {
                if v == 1.0 && class.is_none() {
                    class = Some(k);
                } else if v != 0.0 {
                    class = None;
                    break;
                }
            }
            class.ok_or_else(|| Error::invalid(format!("label row {r} is not one-hot")))
        })
        .collect()
}

pub fn one_hot(classes: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(classes.len(), num_classes);
    for (r, &c) in classes.iter().enumerate() {
        m.set(r, c, 1.0);
    }
    m
}

/// Uniformly random permutation of `0..num_classes` without fixed points.
pub fn make_permutation(num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::invalid(format!(
            "a derangement needs at least 2 classes, got {num_classes}"
        )));
    }
    // Rejection from uniform permutations; about e draws on average.
    let mut rng = Rng::new(seed);
    loop {
        let p = rng.permutation(num_classes);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return Ok(p);
        }
    }
}

/// Corrupts one-hot `labels` per `spec`. Returns the noisy labels and, per
/// row, whether the label changed.
pub fn corrupt_labels(labels: &Matrix, spec: &NoiseSpec) -> Result<(Matrix, Vec<bool>)> {
    spec.validate()?;
    let classes = one_hot_classes(labels)?;
    let l = labels.cols();
    if spec.num_classes().is_some_and(|k| k != l) {
        return Err(Error::invalid(format!(
            "noise spec over {} classes applied to {l}-class labels",
            spec.num_classes().unwrap_or(0)
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let noisy: Vec<usize> = match &spec.mode {
        NoiseMode::Permutation {
            permutation,
            corrupt_prob,
        } => classes
            .iter()
            .map(|&c| {
                if rng.uniform() < *corrupt_prob {
                    permutation[c]
                } else {
                    c
                }
            })
            .collect(),
        NoiseMode::Confusion { confusion } => classes
            .iter()
            .map(|&c| sample_row(confusion.row(c), rng.uniform()))
            .collect(),
        NoiseMode::AnnotationDrop { .. } => {
            return Err(Error::invalid(
                "annotation dropping applies to multibox targets, not class labels",
            ))
        }
    };
    let mask = noisy.iter().zip(&classes).map(|(a, b)| a != b).collect();
    Ok((one_hot(&noisy, l), mask))
}

fn sample_row(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the final partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Zeroes each positive entry of binary `targets` with probability
/// `drop_prob`. Returns the thinned targets and a row-major mask of the
/// entries that were dropped.
pub fn drop_annotations(targets: &Matrix, drop_prob: f64, seed: u64) -> Result<(Matrix, Vec<bool>)> {
    check_prob("drop_prob", drop_prob)?;
    if targets.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("annotation targets must be 0 or 1"));
    }
    let mut rng = Rng::new(seed);
    let mut out = targets.clone();
    let mut mask = vec![false; targets.data().len()];
    for (v, m) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
        if *v == 1.0 && rng.uniform() < drop_prob {
            *v = 0.0;
            *m = true;
        }
    }
    Ok((out, mask))
}

/// Applies whichever process `spec` describes. `mask` has one entry per row
/// for class noise and one per target entry for annotation dropping.
pub fn apply_noise(targets: &Matrix, spec: &NoiseSpec) -> Result<(Matrix, Vec<bool>)> {
    match spec.mode {
        NoiseMode::AnnotationDrop { drop_prob } => drop_annotations(targets, drop_prob, spec.seed),
        _ => corrupt_labels(targets, spec),
    }
}

/// `C[r][c]`: fraction of clean-class-`c` examples observed as class `r`.
/// Columns of classes absent from `clean` are left at zero.
pub fn empirical_confusion(noisy: &Matrix, clean: &Matrix) -> Result<Matrix> {
    if noisy.shape() != clean.shape() {
        return Err(Error::invalid(format!(
            "noisy labels {:?} vs clean labels {:?}",
            noisy.shape(),
            clean.shape()
        )));
    }
    if noisy.rows() == 0 {
        return Err(Error::invalid("no labels to compare"));
    }
    let l = noisy.cols();
    let observed = one_hot_classes(noisy)?;
    let truth = one_hot_classes(clean)?;
    let mut counts = Matrix::zeros(l, l);
    let mut totals = vec![0usize; l];
    for (&o, &t) in observed.iter().zip(&truth) {
        counts.set(o, t, counts.get(o, t) + 1.0);
        totals[t] += 1;
    }
    Ok(Matrix::from_fn(l, l, |r, c| {
        if totals[c] == 0 {
            0.0
        } else {
            counts.get(r, c) / totals[c] as f64
        }
    }))
}

/// `P[perm[c]][c] = 1`, the confusion a fully applied permutation produces.
pub fn permutation_matrix(perm: &[usize]) -> Matrix {
    let l = perm.len();
    Matrix::from_fn(l, l, |r, c| if perm[c] == r { 1.0 } else { 0.0 })
}

/// Writes a corruption mask as `index,corrupted` rows.
pub fn write_mask_csv(path: &Path, mask: &[bool]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["index", "corrupted"])
        .map_err(|e| Error::csv(path, e))?;
    for (i, &m) in mask.iter().enumerate() {
        w.write_record([i.to_string(), u8::from(m).to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
