//! Finite-difference audit of every objective.
//!
//! Each trial draws a small random instance (n ≤ 3 rows, L ≤ 5 classes,
//! D ≤ 6 input features) and random hyperparameters, evaluates the analytic
//! gradients through [`losses::evaluate`] and compares them with central
//! differences. Bootstrap targets are frozen at the evaluation point, so the
//! numeric side differentiates the plain cross-entropy against those fixed
//! targets.

use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    self, hard_targets, masked_binary_cross_entropy, multibox_hard_targets, noise_marginal,
    soft_target_cross_entropy, soft_targets, temperature_targets, topk_keep_mask, AuxHeads, LossKind,
    LossSpec, NoiseAdapter, ReconHead,
};
use crate::mlp::Head;
use crate::tensor::{finite_diff_grad, logistic, max_relative_error, softmax_rows, Matrix, Rng};

/// Step for the central differences.
pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub kind: LossKind,
    pub trials: usize,
    /// Worst relative error over all trials and parameter blocks.
    pub max_relative_error: f64,
    /// Worst relative error per block: logits, adapter weights and bias,
    /// reconstruction weights.
    pub blocks: Vec<(String, f64)>,
}

struct Instance {
    x: Matrix,
    logits: Matrix,
    targets: Matrix,
    adapter: NoiseAdapter,
    recon: ReconHead,
    spec: LossSpec,
}

fn instance(kind: LossKind, rng: &mut Rng) -> Instance {
    let n = 1 + rng.below(3);
    let l = 2 + rng.below(4);
    let d = 1 + rng.below(6);
    let logits = Matrix::new(n, l, rng.gaussian_vec(n * l, 1.5)).expect("shape");
    let targets = if kind.is_multibox() {
        Matrix::from_fn(n, l, |_, _| if rng.bernoulli(0.4) { 1.0 } else { 0.0 })
    } else {
        let labels: Vec<usize> = (0..n).map(|_| rng.below(l)).collect();
        Matrix::from_fn(n, l, |r, c| if labels[r] == c { 1.0 } else { 0.0 })
    };
    let adapter = NoiseAdapter {
        weights: Matrix::new(l, l, rng.gaussian_vec(l * l, 1.0)).expect("shape"),
        bias: rng.gaussian_vec(l, 0.5),
    };
    let recon = ReconHead {
        weights: Matrix::new(d, l, rng.gaussian_vec(d * l, 1.0)).expect("shape"),
    };
    let x = Matrix::new(n, d, rng.uniform_vec(n * d)).expect("shape");
    let spec = LossSpec::new(kind)
        .with_beta(rng.uniform())
        .with_temperature(0.5 + 3.0 * rng.uniform())
        .with_k_drop(rng.below(l + 1))
        .with_recon_weight(0.05 + rng.uniform());
    Instance {
        x,
        logits,
        targets,
        adapter,
        recon,
        spec,
    }
}

fn probs(head: Head, z: &Matrix) -> Matrix {
    match head {
        Head::Softmax => softmax_rows(z, 1.0).expect("unit temperature"),
        Head::Logistic => logistic(z),
    }
}

type Frozen<'a> = Box<dyn Fn(&Matrix) -> f64 + 'a>;

/// Loss as a function of the head output with everything else frozen.
fn frozen_loss<'a>(inst: &'a Instance, aux: &AuxHeads) -> Result<Frozen<'a>> {
    let s = &inst.spec;
    let t = &inst.targets;
    let q = probs(s.kind.head(), &inst.logits);
    let fixed = |y: Matrix| -> Frozen<'a> {
        Box::new(move |p: &Matrix| soft_target_cross_entropy(p, &y).expect("shapes").loss)
    };
    let fixed_binary = |y: Matrix, mask: Option<Vec<bool>>| -> Frozen<'a> {
        Box::new(move |p: &Matrix| {
            masked_binary_cross_entropy(p, &y, mask.as_deref())
                .expect("shapes")
                .loss
        })
    };
    Ok(match s.kind {
        LossKind::CeBaseline => fixed(t.clone()),
        LossKind::BootstrapSoft => fixed(soft_targets(&q, t, s.beta)?),
        LossKind::BootstrapHard => fixed(hard_targets(&q, t, s.beta)?),
        LossKind::BootstrapTemperature => fixed(temperature_targets(&inst.logits, t, s.beta, s.temperature)?),
        LossKind::NoiseMarginal => {
            let a = inst.adapter.clone();
            Box::new(move |p: &Matrix| noise_marginal(p, t, &a).expect("shapes").loss)
        }
        LossKind::BootstrapRecon => {
            let aux = aux.clone();
            Box::new(move |p: &Matrix| {
                let r = aux.recon.as_ref().expect("recon head");
                losses::bootstrap_recon(&inst.x, p, t, r, s.recon_weight, aux.adapter.as_ref())
                    .expect("shapes")
                    .loss
            })
        }
        LossKind::MultiboxBaseline => fixed_binary(t.clone(), None),
        LossKind::MultiboxHard => fixed_binary(multibox_hard_targets(&q, t, s.beta)?, None),
        LossKind::MultiboxSoft => fixed_binary(soft_targets(&q, t, s.beta)?, None),
        LossKind::MultiboxTopk => fixed_binary(t.clone(), Some(topk_keep_mask(&q, s.k_drop)?)),
    })
}

fn objective(inst: &Instance, aux: &AuxHeads) -> Result<f64> {
    let head = inst.spec.kind.head();
    let q = probs(head, &inst.logits);
    Ok(losses::evaluate(&inst.spec, &inst.x, &inst.logits, &q, &inst.targets, aux)?.loss)
}

fn record(blocks: &mut Vec<(String, f64)>, name: &str, err: f64) {
    match blocks.iter_mut().find(|(b, _)| b == name) {
        Some((_, e)) => *e = e.max(err),
        None => blocks.push((name.to_string(), err)),
    }
}

/// Runs `trials` random instances of one objective. Reconstruction is
/// checked with and without the noise adapter on alternate trials.
pub fn check_kind(kind: LossKind, trials: usize, seed: u64) -> Result<GradReport> {
    let mut rng = Rng::with_stream(seed, kind as u64);
    let mut blocks = Vec::new();
    for trial in 0..trials {
        let inst = instance(kind, &mut rng);
        let aux = AuxHeads {
            adapter: (kind == LossKind::NoiseMarginal || (kind.uses_recon() && trial % 2 == 1))
                .then(|| inst.adapter.clone()),
            recon: kind.uses_recon().then(|| inst.recon.clone()),
        };
        let head = kind.head();
        let q = probs(head, &inst.logits);
        let out = losses::evaluate(&inst.spec, &inst.x, &inst.logits, &q, &inst.targets, &aux)?;

        let at = frozen_loss(&inst, &aux)?;
        let numeric = finite_diff_grad(|z| at(&probs(head, z)), &inst.logits, FD_EPS);
        record(&mut blocks, "logits", max_relative_error(&out.dlogits, &numeric));

        if let (Some(adapter), Some(d)) = (&aux.adapter, &out.d_adapter) {
            let numeric = finite_diff_grad(
                |w| {
                    let mut a = aux.clone();
                    a.adapter = Some(NoiseAdapter {
                        weights: w.clone(),
                        bias: adapter.bias.clone(),
                    });
                    objective(&inst, &a).expect("shapes")
                },
                &adapter.weights,
                FD_EPS,
            );
            record(
                &mut blocks,
                "adapter_weights",
                max_relative_error(&d.weights, &numeric),
            );
            let bias = Matrix::row_vector(&adapter.bias);
            let numeric = finite_diff_grad(
                |b| {
                    let mut a = aux.clone();
                    a.adapter = Some(NoiseAdapter {
                        weights: adapter.weights.clone(),
                        bias: b.data().to_vec(),
                    });
                    objective(&inst, &a).expect("shapes")
                },
                &bias,
                FD_EPS,
            );
            record(
                &mut blocks,
                "adapter_bias",
                max_relative_error(&Matrix::row_vector(&d.bias), &numeric),
            );
        }
        if let (Some(recon), Some(d)) = (&aux.recon, &out.d_recon) {
            let numeric = finite_diff_grad(
                |w| {
                    let mut a = aux.clone();
                    a.recon = Some(ReconHead { weights: w.clone() });
                    objective(&inst, &a).expect("shapes")
                },
                &recon.weights,
                FD_EPS,
            );
            record(&mut blocks, "recon_weights", max_relative_error(d, &numeric));
        }
    }
    let max_relative_error = blocks.iter().map(|b| b.1).fold(0.0, f64::max);
    Ok(GradReport {
        kind,
        trials,
        max_relative_error,
        blocks,
    })
}

/// [`check_kind`] for every objective.
pub fn check_all(trials: usize, seed: u64) -> Result<Vec<GradReport>> {
    LossKind::ALL
        .into_iter()
        .map(|k| check_kind(k, trials, seed))
        .collect()
}
