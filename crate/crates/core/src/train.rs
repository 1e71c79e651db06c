//! Two-phase training: the network is first trained with the plain
//! objective of its head, then fine-tuned with the configured loss.
//!
//! Random streams are derived from `TrainConfig::seed`: the network
//! initialization uses `Rng::new(seed)`, mini-batch shuffling stream 1 and
//! the reconstruction head initialization stream 2. Label noise has its own
//! seed inside the noise spec.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TargetMode};
use crate::error::{Error, Result};
use crate::losses::{self, AuxHeads, LossKind, LossSpec, NoiseAdapter, ReconHead};
use crate::metrics::{accuracy, average_precision, pr_curve_matrix, predict, recall_at_precision};
use crate::mlp::{backward, forward, init_mlp, sgd_step, Head, MlpParams};
use crate::noise::{apply_noise, NoiseSpec};
use crate::run::{EpochMetrics, MetricKind, Phase, RunRecord, SCHEMA_VERSION};
use crate::tensor::{Matrix, Rng};

const SHUFFLE_STREAM: u64 = 1;
const RECON_STREAM: u64 = 2;

/// Learning rate per epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · gamma^⌊(epoch − 1) / every⌋`, with epochs counted across both
    /// phases.
    Step { every: usize, gamma: f64 },
}

impl LrSchedule {
    /// Rate for the 1-based global `epoch`.
    pub fn rate(&self, lr: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => lr,
            LrSchedule::Step { every, gamma } => lr * gamma.powi(((epoch - 1) / every) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: Vec<usize>,
    pub loss: LossSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Standard deviation of the reconstruction head's initial weights.
    #[serde(default = "default_recon_init_std")]
    pub recon_init_std: f64,
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_recon_init_std() -> f64 {
    0.01
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dims: vec![784, 500, 300, 10],
            loss: LossSpec::new(LossKind::CeBaseline),
            lr: 0.01,
            batch_size: 100,
            epochs_pretrain: 20,
            epochs_finetune: 30,
            weight_decay: default_weight_decay(),
            seed: 0,
            noise: None,
            lr_schedule: LrSchedule::Constant,
            recon_init_std: default_recon_init_std(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.epochs_pretrain + self.epochs_finetune == 0 {
            return Err(Error::invalid("no epochs to train"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.recon_init_std >= 0.0 && self.recon_init_std.is_finite()) {
            return Err(Error::invalid("recon_init_std must be >= 0"));
        }
        if let LrSchedule::Step { every, gamma } = self.lr_schedule {
            if every == 0 || !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::invalid(format!(
                    "step schedule needs every > 0 and gamma > 0, got {every} and {gamma}"
                )));
            }
        }
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {:?}", self.dims)));
        }
        self.loss.validate()?;
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        Ok(())
    }

    /// The same configuration with the loss replaced by its head's baseline.
    /// Two configs with equal baselines share their whole first phase.
    pub fn phase_one(&self) -> TrainConfig {
        TrainConfig {
            loss: LossSpec::new(self.loss.kind.baseline()),
            ..self.clone()
        }
    }

    fn check_data(&self, train: &Dataset, test: &Dataset) -> Result<()> {
        let want = if self.loss.kind.is_multibox() {
            TargetMode::Multibox
        } else {
            TargetMode::Multiclass
        };
        for d in [train, test] {
            if d.mode() != want {
                return Err(Error::invalid(format!(
                    "{} needs {want:?} data, {} is {:?}",
                    self.loss.kind,
                    d.name(),
                    d.mode()
                )));
            }
            if d.feature_dim() != self.dims[0] || d.num_outputs() != *self.dims.last().unwrap() {
                return Err(Error::invalid(format!(
                    "{} has {} features and {} outputs, network is {:?}",
                    d.name(),
                    d.feature_dim(),
                    d.num_outputs(),
                    self.dims
                )));
            }
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::invalid("training and test sets must be non-empty"));
        }
        if let (TargetMode::Multibox, Some(NoiseSpec { mode, .. })) = (want, &self.noise) {
            if !matches!(mode, crate::noise::NoiseMode::AnnotationDrop { .. }) {
                return Err(Error::invalid("multibox data only takes annotation dropping"));
            }
        }
        Ok(())
    }
}

/// Parameters and everything else the fine-tuning phase continues from.
#[derive(Debug, Clone)]
pub struct Pretrained {
    config: TrainConfig,
    params: MlpParams,
    shuffle: Rng,
    targets: Matrix,
    corrupted_fraction: f64,
    epochs: Vec<EpochMetrics>,
    wall_ms: u64,
}

impl Pretrained {
    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    /// Training targets after corruption.
    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn corrupted_fraction(&self) -> f64 {
        self.corrupted_fraction
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub aux: AuxHeads,
    pub record: RunRecord,
}

pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    let pre = pretrain(config, train_set, test_set)?;
    finetune(config, pre, train_set, test_set)
}

/// Phase one: corrupts the training targets and trains `epochs_pretrain`
/// epochs with the baseline objective.
pub fn pretrain(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<Pretrained> {
    config.validate()?;
    config.check_data(train_set, test_set)?;
    let start = Instant::now();

    let (targets, corrupted_fraction) = match &config.noise {
        None => (train_set.targets().clone(), 0.0),
        Some(spec) => {
            let (noisy, mask) = apply_noise(train_set.targets(), spec)?;
            let hits = mask.iter().filter(|&&m| m).count() as f64;
            let denom = match train_set.mode() {
                TargetMode::Multiclass => train_set.len() as f64,
                TargetMode::Multibox => train_set.targets().sum(),
            };
            (noisy, if denom > 0.0 { hits / denom } else { 0.0 })
        }
    };

    let mut state = State {
        config,
        features: train_set.features(),
        targets: &targets,
        test: test_set,
        params: init_mlp(&config.dims, config.seed)?,
        aux: AuxHeads::default(),
        shuffle: Rng::with_stream(config.seed, SHUFFLE_STREAM),
        corrupted_fraction,
        epochs: Vec::new(),
        start,
    };
    let baseline = LossSpec::new(config.loss.kind.baseline());
    state.run_phase(&baseline, Phase::Pretrain, config.epochs_pretrain)?;
    let State {
        params,
        shuffle,
        epochs,
        ..
    } = state;
    Ok(Pretrained {
        config: config.phase_one(),
        params,
        shuffle,
        targets,
        corrupted_fraction,
        epochs,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Phase two: fine-tunes a phase-one result with `config.loss`. The config
/// must agree with the one used for pretraining in everything but the loss.
pub fn finetune(
    config: &TrainConfig,
    pretrained: Pretrained,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_data(train_set, test_set)?;
    if config.phase_one() != pretrained.config {
        return Err(Error::invalid(
            "fine-tuning config differs from the pretraining config beyond the loss",
        ));
    }
    let start = Instant::now();
    let l = *config.dims.last().unwrap();
    let aux = AuxHeads {
        adapter: config.loss.kind.uses_adapter().then(|| NoiseAdapter::identity(l)),
        recon: config.loss.kind.uses_recon().then(|| {
            let mut rng = Rng::with_stream(config.seed, RECON_STREAM);
            let d = config.dims[0];
            ReconHead {
                weights: Matrix::from_fn(d, l, |_, _| rng.gaussian(config.recon_init_std)),
            }
        }),
    };
    let mut state = State {
        config,
        features: train_set.features(),
        targets: &pretrained.targets,
        test: test_set,
        params: pretrained.params,
        aux,
        shuffle: pretrained.shuffle,
        corrupted_fraction: pretrained.corrupted_fraction,
        epochs: pretrained.epochs,
        start,
    };
    state.run_phase(&config.loss, Phase::Finetune, config.epochs_finetune)?;

    let head = config.loss.kind.head();
    let probs = predict(&state.params, test_set.features(), head)?;
    let mut final_metrics = BTreeMap::new();
    let metric = MetricKind::for_mode(test_set.mode());
    match metric {
        MetricKind::TestAccuracy => {
            final_metrics.insert(metric.name().to_string(), accuracy(&probs, test_set.targets())?);
        }
        MetricKind::AveragePrecision => {
            let curve = pr_curve_matrix(&probs, test_set.targets())?;
            final_metrics.insert(metric.name().to_string(), average_precision(&curve));
            final_metrics.insert("recall_at_60p".to_string(), recall_at_precision(&curve, 0.6));
        }
    }
    if let Some(last) = state.epochs.last() {
        final_metrics.insert("train_loss".to_string(), last.train_loss);
    }
    final_metrics.insert("corrupted_fraction".to_string(), state.corrupted_fraction);

    let wall_ms = pretrained.wall_ms + start.elapsed().as_millis() as u64;
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        train_set: train_set.name().to_string(),
        test_set: test_set.name().to_string(),
        provenance: train_set.provenance().to_string(),
        metric,
        epochs: state.epochs,
        final_metrics,
        wall_ms,
        checksums: BTreeMap::new(),
    };
    Ok(TrainOutcome {
        params: state.params,
        aux: state.aux,
        record,
    })
}

struct State<'a> {
    config: &'a TrainConfig,
    features: &'a Matrix,
    targets: &'a Matrix,
    test: &'a Dataset,
    params: MlpParams,
    aux: AuxHeads,
    shuffle: Rng,
    corrupted_fraction: f64,
    epochs: Vec<EpochMetrics>,
    start: Instant,
}

impl State<'_> {
    fn run_phase(&mut self, loss: &LossSpec, phase: Phase, epochs: usize) -> Result<()> {
        let n = self.features.rows();
        let bs = self.config.batch_size;
        let head = loss.kind.head();
        for _ in 0..epochs {
            let epoch = self.epochs.len() + 1;
            let lr = self.config.lr_schedule.rate(self.config.lr, epoch);
            let order = self.shuffle.permutation(n);
            let mut loss_sum = 0.0;
            for (b, idx) in order.chunks(bs).enumerate() {
                let value = self
                    .step(loss, head, idx, lr)
                    .map_err(|message| Error::Training {
                        epoch,
                        batch: b,
                        message,
                    })?;
                loss_sum += value * idx.len() as f64;
            }
            let test_metric = self.test_metric(head)?;
            self.epochs.push(EpochMetrics {
                epoch,
                phase,
                train_loss: loss_sum / n as f64,
                test_metric,
                corrupted_fraction: self.corrupted_fraction,
                wall_ms: self.start.elapsed().as_millis() as u64,
            });
        }
        Ok(())
    }

    /// One SGD step; the error is a divergence message.
    fn step(
        &mut self,
        loss: &LossSpec,
        head: Head,
        idx: &[usize],
        lr: f64,
    ) -> std::result::Result<f64, String> {
        let x = self.features.select_rows(idx);
        let t = self.targets.select_rows(idx);
        let inner = |e: Error| e.to_string();
        let trace = forward(&self.params, &x, head, 1.0).map_err(inner)?;
        let out = losses::evaluate(loss, &x, trace.logits(), &trace.probs, &t, &self.aux).map_err(inner)?;
        if !out.loss.is_finite() {
            return Err(format!("loss is {}", out.loss));
        }
        if !out.dlogits.is_finite() {
            return Err("non-finite logit gradient".to_string());
        }
        let grads = backward(&self.params, &trace, &out.dlogits).map_err(inner)?;
        sgd_step(&mut self.params, &grads, lr, self.config.weight_decay).map_err(inner)?;
        if let (Some(a), Some(d)) = (self.aux.adapter.as_mut(), out.d_adapter.as_ref()) {
            a.weights.add_scaled_assign(&d.weights, -lr).map_err(inner)?;
            for (b, g) in a.bias.iter_mut().zip(&d.bias) {
                *b -= lr * g;
            }
        }
        if let (Some(r), Some(d)) = (self.aux.recon.as_mut(), out.d_recon.as_ref()) {
            r.weights.add_scaled_assign(d, -lr).map_err(inner)?;
        }
        if !self.params.is_finite() {
            return Err("parameters became non-finite".to_string());
        }
        Ok(out.loss)
    }

    fn test_metric(&self, head: Head) -> Result<f64> {
        let probs = predict(&self.params, self.test.features(), head)?;
        match self.test.mode() {
            TargetMode::Multiclass => accuracy(&probs, self.test.targets()),
            TargetMode::Multibox => Ok(average_precision(&pr_curve_matrix(&probs, self.test.targets())?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_detection, SynthDetectionSpec};
    use crate::noise::one_hot;

    /// Four well-separated Gaussian blobs in [0, 1]^6.
    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let classes: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let features = Matrix::from_fn(n, 6, |r, c| {
            let centre = if c % 4 == classes[r] { 0.8 } else { 0.2 };
            (centre + rng.gaussian(0.05)).clamp(0.0, 1.0)
        });
        Dataset::new(
            "blobs",
            "test",
            TargetMode::Multiclass,
            features,
            one_hot(&classes, 4),
        )
        .unwrap()
    }

    fn config(kind: LossKind) -> TrainConfig {
        TrainConfig {
            dims: vec![6, 12, 4],
            loss: LossSpec::reported(kind),
            lr: 0.2,
            batch_size: 16,
            epochs_pretrain: 3,
            epochs_finetune: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_blobs() {
        let (tr, te) = (blobs(200, 1), blobs(100, 2));
        let out = train(&config(LossKind::CeBaseline), &tr, &te).unwrap();
        assert!(out.record.final_metrics["test_accuracy"] > 0.95);
        assert_eq!(out.record.epochs.len(), 6);
        assert_eq!(out.record.epochs[2].phase, Phase::Pretrain);
        assert_eq!(out.record.epochs[3].phase, Phase::Finetune);
    }

    #[test]
    fn deterministic() {
        let (tr, te) = (blobs(100, 1), blobs(50, 2));
        let mut c = config(LossKind::BootstrapRecon);
        c.noise = Some(NoiseSpec::permutation(vec![1, 2, 3, 0], 0.3, 5));
        let a = train(&c, &tr, &te).unwrap();
        let b = train(&c, &tr, &te).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.aux, b.aux);
        assert_eq!(a.record.final_metrics, b.record.final_metrics);
        assert!(a.aux.adapter.is_some() && a.aux.recon.is_some());
    }

    #[test]
    fn beta_one_continues_baseline() {
        let (tr, te) = (blobs(100, 1), blobs(50, 2));
        let base = train(&config(LossKind::CeBaseline), &tr, &te).unwrap();
        for kind in [
            LossKind::BootstrapHard,
            LossKind::BootstrapSoft,
            LossKind::BootstrapTemperature,
        ] {
            let mut c = config(kind);
            c.loss.beta = 1.0;
            let out = train(&c, &tr, &te).unwrap();
            assert_eq!(out.params, base.params, "{kind}");
            for (a, b) in out.record.epochs.iter().zip(&base.record.epochs) {
                assert_eq!((a.train_loss, a.test_metric), (b.train_loss, b.test_metric));
            }
        }
    }

    #[test]
    fn shared_pretraining_equals_full_run() {
        let (tr, te) = (blobs(100, 1), blobs(50, 2));
        let hard = config(LossKind::BootstrapHard);
        let pre = pretrain(&config(LossKind::BootstrapSoft), &tr, &te).unwrap();
        let split = finetune(&hard, pre, &tr, &te).unwrap();
        let full = train(&hard, &tr, &te).unwrap();
        assert_eq!(split.params, full.params);
        assert_eq!(split.record.final_metrics, full.record.final_metrics);

        let mut other = hard.clone();
        other.lr = 0.1;
        let pre = pretrain(&hard, &tr, &te).unwrap();
        assert!(finetune(&other, pre, &tr, &te).is_err());
    }

    #[test]
    fn no_finetune_is_baseline() {
        let (tr, te) = (blobs(100, 1), blobs(50, 2));
        let mut a = config(LossKind::BootstrapHard);
        a.epochs_finetune = 0;
        let mut b = config(LossKind::CeBaseline);
        b.epochs_finetune = 0;
        assert_eq!(
            train(&a, &tr, &te).unwrap().params,
            train(&b, &tr, &te).unwrap().params
        );
    }

    #[test]
    fn divergence_reports_position() {
        let (tr, te) = (blobs(100, 1), blobs(50, 2));
        let mut c = config(LossKind::CeBaseline);
        c.lr = 1e200;
        match train(&c, &tr, &te).unwrap_err() {
            Error::Training { epoch, batch, .. } => assert_eq!((epoch, batch), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::Step { every: 2, gamma: 0.5 };
        let rates: Vec<f64> = (1..=5).map(|e| s.rate(0.8, e)).collect();
        assert_eq!(rates, [0.8, 0.8, 0.4, 0.4, 0.2]);
        assert_eq!(LrSchedule::Constant.rate(0.8, 40), 0.8);

        let (tr, te) = (blobs(100, 1), blobs(50, 2));
        let flat = train(&config(LossKind::BootstrapHard), &tr, &te).unwrap();
        let mut c = config(LossKind::BootstrapHard);
        c.lr_schedule = LrSchedule::Step { every: 1, gamma: 1.0 };
        assert_eq!(train(&c, &tr, &te).unwrap().params, flat.params);
        c.lr_schedule = LrSchedule::Step { every: 4, gamma: 0.1 };
        let stepped = train(&c, &tr, &te).unwrap();
        let curve = |r: &RunRecord| -> Vec<(f64, f64)> {
            r.epochs.iter().map(|e| (e.train_loss, e.test_metric)).collect()
        };
        assert_eq!(curve(&stepped.record)[..4], curve(&flat.record)[..4]);
        assert_ne!(stepped.params, flat.params);
        for bad in [
            LrSchedule::Step { every: 0, gamma: 0.5 },
            LrSchedule::Step { every: 2, gamma: 0.0 },
        ] {
            c.lr_schedule = bad;
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn rejects_mismatched_data() {
        let (tr, te) = (blobs(20, 1), blobs(20, 2));
        assert!(train(&config(LossKind::MultiboxHard), &tr, &te).is_err());
        let mut c = config(LossKind::CeBaseline);
        c.dims = vec![5, 4];
        assert!(train(&c, &tr, &te).is_err());
        c = config(LossKind::CeBaseline);
        c.batch_size = 0;
        assert!(train(&c, &tr, &te).is_err());
    }

    #[test]
    fn multibox_runs_with_dropping() {
        let g = synth_detection(&SynthDetectionSpec {
            num_priors: 4,
            feature_dim: 6,
            min_objects: 1,
            max_objects: 2,
            signal_strength: 3.0,
            clutter_sigma: 1.0,
            num_instances: 200,
            seed: 3,
        })
        .unwrap();
        let s = crate::data::split(&g.dataset, [0.5, 0.0, 0.5], 1).unwrap();
        let mut c = config(LossKind::MultiboxTopk);
        c.dims = vec![6, 8, 4];
        c.loss.k_drop = 1;
        c.noise = Some(NoiseSpec::annotation_drop(0.3, 2));
        let out = train(&c, &s.train, &s.test).unwrap();
        let frac = out.record.final_metrics["corrupted_fraction"];
        assert!(frac > 0.15 && frac < 0.45, "{frac}");
        assert!(out.record.final_metrics["average_precision"] > 0.5);
    }
}
