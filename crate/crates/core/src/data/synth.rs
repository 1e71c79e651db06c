//! Synthetic detection data with a closed-form Bayes posterior.
//!
//! Generative process, all draws from one seeded stream:
//!
//! 1. `L` signatures `u_1..u_L` in `R^D`: Gaussian vectors orthonormalized
//!    by Gram-Schmidt.
//! 2. Per instance, an object count `m` uniform on `min_objects..=max_objects`
//!    and then an active set `A` of `m` distinct priors, uniform among all
//!    subsets of that size.
//! 3. Features `x = s · Σ_{k∈A} u_k + ε` with `ε ~ N(0, σ² I)`.
//!    Targets are 1 exactly at the active priors.
//!
//! Because the signatures are orthonormal the likelihood factorizes over
//! priors, `p(x | A) ∝ Π_{k∈A} λ_k` with `ln λ_k = (s·u_kᵀx − s²/2) / σ²`,
//! and the posterior marginal of prior `k` is
//!
//! `P(k ∈ A | x) = Σ_m π_m λ_k e_{m−1}(λ_{−k}) / Σ_m π_m e_m(λ)`
//!
//! where `e_m` is the elementary symmetric polynomial of degree `m` and
//! `π_m = 1 / (M · C(L, m))` is the prior weight of one size-`m` set.

use serde::{Deserialize, Serialize};

use super::{Dataset, TargetMode};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDetectionSpec {
    pub num_priors: usize,
    pub feature_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub signal_strength: f64,
    #[serde(default = "unit")]
    pub clutter_sigma: f64,
    pub num_instances: usize,
    pub seed: u64,
}

fn unit() -> f64 {
    1.0
}

impl SynthDetectionSpec {
    pub fn validate(&self) -> Result<()> {
        let (l, d) = (self.num_priors, self.feature_dim);
        if l < 2 || d < l {
            return Err(Error::invalid(format!(
                "need 2 <= num_priors <= feature_dim, got L={l}, D={d}"
            )));
        }
        if self.min_objects > self.max_objects || self.max_objects > l {
            return Err(Error::invalid(format!(
                "objects per instance {}..={} must lie within 0..={l}",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return Err(Error::invalid("signal_strength must be finite and >= 0"));
        }
        if !(self.clutter_sigma.is_finite() && self.clutter_sigma > 0.0) {
            return Err(Error::invalid("clutter_sigma must be finite and > 0"));
        }
        if self.num_instances == 0 {
            return Err(Error::invalid("num_instances must be positive"));
        }
        Ok(())
    }
}

/// Generated data together with what the generator knows.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDetection {
    pub dataset: Dataset,
    /// `L×D`, one orthonormal signature per row.
    pub signatures: Matrix,
    /// `n×L` exact posterior `P(k ∈ A | x)`.
    pub posterior: Matrix,
}

fn orthonormal_rows(l: usize, d: usize, rng: &mut Rng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(l);
    while basis.len() < l {
        let mut v = rng.gaussian_vec(d, 1.0);
        // Two passes keep the basis orthogonal to rounding precision.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Matrix::from_fn(l, d, |r, c| basis[r][c])
}

pub fn synth_detection(spec: &SynthDetectionSpec) -> Result<SynthDetection> {
    spec.validate()?;
    let (l, d, n) = (spec.num_priors, spec.feature_dim, spec.num_instances);
    let mut rng = Rng::new(spec.seed);
    let signatures = orthonormal_rows(l, d, &mut rng);

    let mut features = Matrix::zeros(n, d);
    let mut targets = Matrix::zeros(n, l);
    let span = spec.max_objects - spec.min_objects + 1;
    for i in 0..n {
        let m = spec.min_objects + rng.below(span);
        let order = rng.permutation(l);
        let x = features.row_mut(i);
        for &k in &order[..m] {
            targets.set(i, k, 1.0);
            for (xv, &u) in x.iter_mut().zip(signatures.row(k)) {
                *xv += spec.signal_strength * u;
            }
        }
        for xv in x.iter_mut() {
            *xv += rng.gaussian(spec.clutter_sigma);
        }
    }

    let posterior = bayes_posterior(spec, &signatures, &features)?;
    let dataset = Dataset::new(
        format!("synth-detection-L{l}-D{d}"),
        format!("synth_detection seed={} s={}", spec.seed, spec.signal_strength),
        TargetMode::Multibox,
        features,
        targets,
    )?;
    Ok(SynthDetection {
        dataset,
        signatures,
        posterior,
    })
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + (-(a - b).abs()).exp().ln_1p()
}

/// `ln e_j` for `j = 0..=len`, skipping index `skip`.
fn log_esp(log_lambda: &[f64], skip: Option<usize>) -> Vec<f64> {
    let mut e = vec![f64::NEG_INFINITY; log_lambda.len() + 1];
    e[0] = 0.0;
    let mut count = 0;
    for (k, &ll) in log_lambda.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        count += 1;
        for j in (1..=count).rev() {
            e[j] = log_add(e[j], e[j - 1] + ll);
        }
    }
    e
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64 / (k - i) as f64).ln()).sum()
}

/// Exact posterior marginals for features produced by the generator with
/// `spec` and `signatures`. Evaluated in log space, so any signal strength
/// is safe.
pub fn bayes_posterior(spec: &SynthDetectionSpec, signatures: &Matrix, features: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    let (l, d) = (spec.num_priors, spec.feature_dim);
    if signatures.shape() != (l, d) || features.cols() != d {
        return Err(Error::invalid(format!(
            "signatures {:?} and features {:?} do not fit L={l}, D={d}",
            signatures.shape(),
            features.shape()
        )));
    }
    let sizes = spec.min_objects..=spec.max_objects;
    let log_pi: Vec<(usize, f64)> = sizes.map(|m| (m, -ln_choose(l, m))).collect();

    let s = spec.signal_strength;
    let var = spec.clutter_sigma * spec.clutter_sigma;
    let proj = features.matmul_t(signatures)?;
    let mut post = Matrix::zeros(features.rows(), l);
    for i in 0..features.rows() {
        let log_lambda: Vec<f64> = proj.row(i).iter().map(|&y| (s * y - 0.5 * s * s) / var).collect();
        let all = log_esp(&log_lambda, None);
        let denom = log_pi
            .iter()
            .fold(f64::NEG_INFINITY, |acc, &(m, lp)| log_add(acc, lp + all[m]));
        for k in 0..l {
            let rest = log_esp(&log_lambda, Some(k));
            let num = log_pi
                .iter()
                .filter(|&&(m, _)| m >= 1)
                .fold(f64::NEG_INFINITY, |acc, &(m, lp)| {
                    log_add(acc, lp + log_lambda[k] + rest[m - 1])
                });
            post.set(i, k, (num - denom).exp().min(1.0));
        }
    }
    Ok(post)
}
