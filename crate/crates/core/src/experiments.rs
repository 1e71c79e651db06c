//! The two experiment drivers: accuracy against label-corruption level on a
//! multiclass dataset, and detection quality under dropped annotations on
//! synthetic data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split, split_indices, synth_detection, Dataset, SynthDetectionSpec};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec, NoiseAdapter};
use crate::metrics::{average_precision, pr_curve_matrix, predict, recall_at_precision, PrCurve};
use crate::noise::{make_permutation, NoiseSpec};
use crate::run::{save_run, RunRecord};
use crate::tensor::Matrix;
use crate::train::{finetune, pretrain, TrainConfig};

/// Losses compared by the corruption sweep, in output order.
pub const SWEEP_LOSSES: [LossKind; 4] = [
    LossKind::CeBaseline,
    LossKind::BootstrapRecon,
    LossKind::BootstrapHard,
    LossKind::BootstrapSoft,
];

/// Column-wise recovery of a permutation from a learned channel: for each
/// clean class `j`, the most likely observed class other than `j`.
pub fn recovered_permutation(channel: &Matrix) -> Vec<usize> {
    (0..channel.cols())
        .map(|j| {
            let mut best: Option<usize> = None;
            for k in (0..channel.rows()).filter(|&k| k != j) {
                if best.is_none_or(|b| channel.get(k, j) > channel.get(b, j)) {
                    best = Some(k);
                }
            }
            best.unwrap_or(j)
        })
        .collect()
}

/// Number of classes whose recovered target matches `permutation`.
pub fn permutation_hits(channel: &Matrix, permutation: &[usize]) -> usize {
    recovered_permutation(channel)
        .iter()
        .zip(permutation)
        .filter(|(a, b)| a == b)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Network, optimizer and seed shared by every cell. Its loss and noise
    /// are replaced per cell.
    pub base: TrainConfig,
    pub levels: Vec<f64>,
    pub losses: Vec<LossSpec>,
    /// Class mapping of the corruption; a seeded derangement when absent.
    #[serde(default)]
    pub permutation: Option<Vec<usize>>,
    pub noise_seed: u64,
}

impl SweepConfig {
    /// The four compared losses at their reported hyperparameters.
    pub fn new(base: TrainConfig, levels: Vec<f64>, noise_seed: u64) -> Self {
        SweepConfig {
            base,
            levels,
            losses: SWEEP_LOSSES.into_iter().map(LossSpec::reported).collect(),
            permutation: None,
            noise_seed,
        }
    }

    pub fn permutation(&self) -> Result<Vec<usize>> {
        match &self.permutation {
            Some(p) => Ok(p.clone()),
            None => make_permutation(*self.base.dims.last().unwrap_or(&0), self.base.seed),
        }
    }

    fn cell_config(&self, level: f64, loss: LossSpec, permutation: &[usize]) -> TrainConfig {
        TrainConfig {
            loss,
            noise: Some(NoiseSpec::permutation(
                permutation.to_vec(),
                level,
                self.noise_seed,
            )),
            ..self.base.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub test_accuracy: f64,
    pub corrupted_fraction: f64,
    pub record: RunRecord,
    /// Learned channel `P(observed | clean)` for runs with a noise adapter.
    pub channel: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub level: f64,
    pub loss: LossSpec,
    /// Error message of a failed cell.
    pub outcome: std::result::Result<CellResult, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub permutation: Vec<usize>,
    /// Ordered by level, then by loss as configured.
    pub cells: Vec<SweepCell>,
}

/// Trains every (level, loss) cell. All losses at one level share their
/// pretraining phase, which is identical to training each independently.
/// Training failures become failed cells; only invalid configuration
/// aborts the sweep.
pub fn run_noise_sweep(config: &SweepConfig, train_set: &Dataset, test_set: &Dataset) -> Result<SweepResult> {
    if config.levels.is_empty() || config.losses.is_empty() {
        return Err(Error::invalid("sweep needs at least one level and one loss"));
    }
    let permutation = config.permutation()?;
    let mut cells = Vec::with_capacity(config.levels.len() * config.losses.len());
    for &level in &config.levels {
        for loss in &config.losses {
            config.cell_config(level, *loss, &permutation).validate()?;
        }
        let mut shared: Vec<(TrainConfig, std::result::Result<_, String>)> = Vec::new();
        for loss in &config.losses {
            let cfg = config.cell_config(level, *loss, &permutation);
            let pre = match shared.iter().find(|(c, _)| *c == cfg.phase_one()) {
                Some((_, p)) => p.clone(),
                None => {
                    let p = pretrain(&cfg, train_set, test_set).map_err(|e| e.to_string());
                    shared.push((cfg.phase_one(), p.clone()));
                    p
                }
            };
            let outcome = pre.and_then(|p| {
                let out = finetune(&cfg, p, train_set, test_set).map_err(|e| e.to_string())?;
                Ok(CellResult {
                    test_accuracy: out.record.final_metrics["test_accuracy"],
                    corrupted_fraction: out.record.final_metrics["corrupted_fraction"],
                    channel: out.aux.adapter.as_ref().map(NoiseAdapter::channel),
                    record: out.record,
                })
            });
            cells.push(SweepCell {
                level,
                loss: *loss,
                outcome,
            });
        }
    }
    Ok(SweepResult { permutation, cells })
}

impl SweepResult {
    /// One row per cell: `level,loss,status,test_accuracy,corrupted_fraction`.
    /// Contains no timing, so equal seeds give equal bytes.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e| Error::csv("<sweep>", e);
        w.write_record(["level", "loss", "status", "test_accuracy", "corrupted_fraction"])
            .map_err(to_err)?;
        for c in &self.cells {
            let (status, acc, frac) = match &c.outcome {
                Ok(r) => (
                    "ok".to_string(),
                    r.test_accuracy.to_string(),
                    r.corrupted_fraction.to_string(),
                ),
                Err(msg) => (format!("failed: {msg}"), String::new(), String::new()),
            };
            w.write_record([c.level.to_string(), c.loss.kind.to_string(), status, acc, frac])
                .map_err(to_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::invalid(format!("csv buffer: {e}")))
    }

    /// Writes `sweep.csv`, `permutation.csv`, one record per successful run
    /// under `runs/` and the learned channel of each adapter run as
    /// `channel_<level>_<loss>.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let runs = dir.join("runs");
        fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        let sweep = dir.join("sweep.csv");
        fs::write(&sweep, self.to_csv()?).map_err(|e| Error::io(&sweep, e))?;
        let perm = dir.join("permutation.csv");
        let text: String = self
            .permutation
            .iter()
            .enumerate()
            .map(|(c, p)| format!("{c},{p}\n"))
            .collect();
        fs::write(&perm, format!("clean,observed\n{text}")).map_err(|e| Error::io(&perm, e))?;
        for c in &self.cells {
            if let Ok(r) = &c.outcome {
                let stem = format!("{}_{}", c.level, c.loss.kind);
                save_run(&r.record, &runs.join(format!("{stem}.json")))?;
                if let Some(ch) = &r.channel {
                    ch.write_csv(&dir.join(format!("channel_{stem}.csv")))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiboxConfig {
    pub data: SynthDetectionSpec,
    /// Share of instances used for training; the rest is the test set.
    pub train_fraction: f64,
    pub drop_prob: f64,
    pub drop_seed: u64,
    /// Network, optimizer and seed; loss and noise are set per method.
    pub base: TrainConfig,
    pub methods: Vec<LossSpec>,
}

impl Default for MultiboxConfig {
    /// Desk-scale regime: 16 priors, 3 to 6 objects per instance, a fifth of
    /// 5000 instances for training, 30% of positives dropped.
    fn default() -> Self {
        MultiboxConfig {
            data: SynthDetectionSpec {
                num_priors: 16,
                feature_dim: 32,
                min_objects: 3,
                max_objects: 6,
                signal_strength: 3.0,
                clutter_sigma: 1.0,
                num_instances: 5000,
                seed: 0,
            },
            train_fraction: 0.2,
            drop_prob: 0.3,
            drop_seed: 1,
            base: TrainConfig {
                dims: vec![32, 256, 16],
                loss: LossSpec::new(LossKind::MultiboxBaseline),
                lr: 0.1,
                batch_size: 20,
                epochs_pretrain: 2,
                epochs_finetune: 60,
                weight_decay: 1e-3,
                seed: 0,
                ..TrainConfig::default()
            },
            methods: vec![
                LossSpec::new(LossKind::MultiboxBaseline),
                LossSpec::new(LossKind::MultiboxHard).with_beta(0.25),
                LossSpec::new(LossKind::MultiboxSoft).with_beta(0.1),
                LossSpec::new(LossKind::MultiboxTopk).with_k_drop(4),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiboxRow {
    pub method: LossSpec,
    pub average_precision: f64,
    pub recall_at_60p: f64,
    pub curve: PrCurve,
    pub record: RunRecord,
}

#[derive(Debug, Clone)]
pub struct MultiboxResult {
    pub rows: Vec<MultiboxRow>,
    /// AP of the exact posterior on the test set, the best any detector
    /// can do in expectation.
    pub bayes_average_precision: f64,
}

/// Trains each method on the same dropped annotations and scores it against
/// the complete test targets.
pub fn run_multibox_experiment(config: &MultiboxConfig) -> Result<MultiboxResult> {
    if config.methods.iter().any(|m| !m.kind.is_multibox()) {
        return Err(Error::invalid("multibox experiment takes multibox losses only"));
    }
    let generated = synth_detection(&config.data)?;
    let f = config.train_fraction;
    let fractions = [f, 0.0, 1.0 - f];
    let parts = split(&generated.dataset, fractions, config.data.seed)?;
    let [_, _, test_idx] = split_indices(&generated.dataset, fractions, config.data.seed)?;
    let bayes = pr_curve_matrix(&generated.posterior.select_rows(&test_idx), parts.test.targets())?;

    let mut rows = Vec::with_capacity(config.methods.len());
    for method in &config.methods {
        let cfg = TrainConfig {
            loss: *method,
            noise: Some(NoiseSpec::annotation_drop(config.drop_prob, config.drop_seed)),
            ..config.base.clone()
        };
        let pre = pretrain(&cfg, &parts.train, &parts.test)?;
        let out = finetune(&cfg, pre, &parts.train, &parts.test)?;
        let probs = predict(&out.params, parts.test.features(), method.kind.head())?;
        let curve = pr_curve_matrix(&probs, parts.test.targets())?;
        rows.push(MultiboxRow {
            method: *method,
            average_precision: average_precision(&curve),
            recall_at_60p: recall_at_precision(&curve, 0.6),
            curve,
            record: out.record,
        });
    }
    Ok(MultiboxResult {
        rows,
        bayes_average_precision: average_precision(&bayes),
    })
}

impl MultiboxResult {
    /// One row per method plus a final `bayes_posterior` reference row.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e| Error::csv("<multibox>", e);
        w.write_record(["method", "beta", "k_drop", "average_precision", "recall_at_60p"])
            .map_err(to_err)?;
        for r in &self.rows {
            w.write_record([
                r.method.kind.to_string(),
                r.method.beta.to_string(),
                r.method.k_drop.to_string(),
                r.average_precision.to_string(),
                r.recall_at_60p.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.write_record([
            "bayes_posterior",
            "",
            "",
            &self.bayes_average_precision.to_string(),
            "",
        ])
        .map_err(to_err)?;
        w.into_inner()
            .map_err(|e| Error::invalid(format!("csv buffer: {e}")))
    }

    /// Every curve point of every method: `method,threshold,precision,recall`.
    pub fn pr_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e| Error::csv("<pr>", e);
        w.write_record(["method", "threshold", "precision", "recall"])
            .map_err(to_err)?;
        for r in &self.rows {
            for p in &r.curve.points {
                w.write_record([
                    r.method.kind.to_string(),
                    p.threshold.to_string(),
                    p.precision.to_string(),
                    p.recall.to_string(),
                ])
                .map_err(to_err)?;
            }
        }
        w.into_inner()
            .map_err(|e| Error::invalid(format!("csv buffer: {e}")))
    }

    /// Writes `multibox.csv`, `pr_curves.csv` and one record per method
    /// under `runs/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let runs = dir.join("runs");
        fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        for (name, bytes) in [
            ("multibox.csv", self.to_csv()?),
            ("pr_curves.csv", self.pr_csv()?),
        ] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        for r in &self.rows {
            save_run(&r.record, &runs.join(format!("{}.json", r.method.kind)))?;
        }
        Ok(())
    }
}
