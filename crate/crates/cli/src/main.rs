//! `noisyboot`: train, sweep and inspect networks on noisy labels.
//!
//! Training flags mirror the fields of the training configuration. A JSON
//! file given with `--config` is merged over the flags, so its keys win.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use noisyboot::data::{load_idx, split, synth_detection, Dataset};
use noisyboot::experiments::{
    recovered_permutation, run_multibox_experiment, run_noise_sweep, MultiboxConfig, SweepConfig,
};
use noisyboot::gradsuite::check_all;
use noisyboot::losses::{AuxHeads, LossKind, LossSpec};
use noisyboot::mlp::Checkpoint;
use noisyboot::noise::{make_permutation, NoiseSpec};
use noisyboot::run::save_run;
use noisyboot::train::{train, LrSchedule, TrainConfig};

/// Largest relative error `gradcheck` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "noisyboot", version, about = "Bootstrapped training on noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and save the model and its run record.
    Train(TrainCmd),
    /// Accuracy against label-corruption level for the four MNIST losses.
    Sweep(SweepCmd),
    /// Compare the multibox objectives on synthetic detection data.
    Multibox(MultiboxCmd),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckCmd),
    /// Dump a trained model's weights and noise channel as CSV matrices.
    Inspect(InspectCmd),
}

#[derive(Args)]
struct TrainFlags {
    /// Layer widths, input first.
    #[arg(long, value_delimiter = ',', default_value = "784,500,300,10")]
    dims: Vec<usize>,
    #[arg(long, default_value = "ce_baseline")]
    loss: String,
    /// Defaults to the reported value for the loss.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    k_drop: Option<usize>,
    #[arg(long)]
    recon_weight: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    epochs_pretrain: usize,
    #[arg(long, default_value_t = 30)]
    epochs_finetune: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiply the learning rate by `--lr-gamma` every this many epochs,
    /// counted across both phases. Constant when absent.
    #[arg(long)]
    lr_step_every: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr_gamma: f64,
}

impl TrainFlags {
    fn loss(&self) -> Result<LossSpec> {
        let kind: LossKind = self.loss.parse()?;
        let mut spec = LossSpec::reported(kind);
        if let Some(b) = self.beta {
            spec.beta = b;
        }
        if let Some(t) = self.temperature {
            spec.temperature = t;
        }
        if let Some(k) = self.k_drop {
            spec.k_drop = k;
        }
        if let Some(w) = self.recon_weight {
            spec.recon_weight = w;
        }
        Ok(spec)
    }

    fn config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            dims: self.dims.clone(),
            loss: self.loss()?,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs_pretrain: self.epochs_pretrain,
            epochs_finetune: self.epochs_finetune,
            weight_decay: self.weight_decay,
            seed: self.seed,
            lr_schedule: match self.lr_step_every {
                Some(every) => LrSchedule::Step {
                    every,
                    gamma: self.lr_gamma,
                },
                None => LrSchedule::Constant,
            },
            ..TrainConfig::default()
        })
    }
}

#[derive(Args)]
struct MnistFlags {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = "MNIST_DIR", default_value = "data/mnist")]
    mnist_dir: PathBuf,
    /// Training examples drawn from the 60k training file.
    #[arg(long, default_value_t = 10_000)]
    train_size: usize,
    #[arg(long, default_value_t = 0)]
    subset_seed: u64,
}

impl MnistFlags {
    fn load(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.mnist_dir;
        let train = load_idx(
            &d.join("train-images-idx3-ubyte"),
            &d.join("train-labels-idx1-ubyte"),
        )
        .with_context(|| format!("loading MNIST from {}", d.display()))?;
        let test = load_idx(
            &d.join("t10k-images-idx3-ubyte"),
            &d.join("t10k-labels-idx1-ubyte"),
        )
        .with_context(|| format!("loading MNIST from {}", d.display()))?;
        Ok((train.sample(self.train_size, self.subset_seed)?, test))
    }
}

#[derive(Args)]
struct Output {
    /// Output directory; defaults to `$NOISYBOOT_OUT/<command>` or
    /// `runs/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Output {
    fn dir(&self, command: &str) -> Result<PathBuf> {
        let dir = match &self.out {
            Some(d) => d.clone(),
            None => std::env::var_os("NOISYBOOT_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    flags: TrainFlags,
    /// Corrupt this fraction of training labels through a derangement.
    #[arg(long)]
    noise_level: Option<f64>,
    /// Drop this fraction of positive annotations (multibox losses).
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long, default_value_t = 1)]
    noise_seed: u64,
    /// JSON training configuration merged over the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    mnist: MnistFlags,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    flags: TrainFlags,
    /// Corruption levels.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    noise_seed: u64,
    /// JSON sweep configuration merged over the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    mnist: MnistFlags,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct MultiboxCmd {
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON experiment configuration merged over the defaults and flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct GradcheckCmd {
    /// Random instances per loss.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectCmd {
    /// Directory written by `train`.
    run: PathBuf,
    /// Where to write the CSV matrices; defaults to `<run>/inspect`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Deep merge: objects are merged key by key, anything else is replaced.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn with_overrides<T: Serialize + DeserializeOwned>(value: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(value) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !over.is_object() {
        bail!("{}: expected a JSON object", path.display());
    }
    let mut base = serde_json::to_value(value)?;
    merge(&mut base, over);
    serde_json::from_value(base).with_context(|| format!("invalid configuration in {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(cmd: &TrainCmd) -> Result<()> {
    let mut config = cmd.flags.config()?;
    let l = *config.dims.last().unwrap_or(&0);
    if let Some(level) = cmd.noise_level {
        config.noise = Some(NoiseSpec::permutation(
            make_permutation(l, cmd.noise_seed)?,
            level,
            cmd.noise_seed,
        ));
    }
    if let Some(p) = cmd.drop_prob {
        config.noise = Some(NoiseSpec::annotation_drop(p, cmd.noise_seed));
    }
    let config = with_overrides(config, cmd.config.as_deref())?;
    config.validate()?;

    let (train_set, test_set) = if config.loss.kind.is_multibox() {
        let mb = MultiboxConfig::default();
        let g = synth_detection(&mb.data)?;
        let s = split(
            &g.dataset,
            [mb.train_fraction, 0.0, 1.0 - mb.train_fraction],
            mb.data.seed,
        )?;
        (s.train, s.test)
    } else {
        cmd.mnist.load()?
    };
    let out = train(&config, &train_set, &test_set)?;
    let dir = cmd.out.dir("train")?;
    save_run(&out.record, &dir.join("run.json"))?;
    Checkpoint::new(out.params, config.loss.kind.head(), config.seed).save(&dir.join("model.json"))?;
    write_json(&dir.join("aux.json"), &out.aux)?;
    for (k, v) in &out.record.final_metrics {
        println!("{k} {v}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_sweep(cmd: &SweepCmd) -> Result<()> {
    let base = cmd.flags.config()?;
    let config = with_overrides(
        SweepConfig::new(base, cmd.levels.clone(), cmd.noise_seed),
        cmd.config.as_deref(),
    )?;
    config.base.validate()?;
    let (train_set, test_set) = cmd.mnist.load()?;
    let result = run_noise_sweep(&config, &train_set, &test_set)?;
    let dir = cmd.out.dir("sweep")?;
    result.write(&dir)?;
    write_json(&dir.join("config.json"), &config)?;
    print!("{}", String::from_utf8(result.to_csv()?)?);
    Ok(())
}

fn cmd_multibox(cmd: &MultiboxCmd) -> Result<()> {
    let mut config = MultiboxConfig::default();
    if let Some(p) = cmd.drop_prob {
        config.drop_prob = p;
    }
    if let Some(s) = cmd.seed {
        config.data.seed = s;
        config.base.seed = s;
        config.drop_seed = s + 1;
    }
    let config = with_overrides(config, cmd.config.as_deref())?;
    let result = run_multibox_experiment(&config)?;
    let dir = cmd.out.dir("multibox")?;
    result.write(&dir)?;
    write_json(&dir.join("config.json"), &config)?;
    print!("{}", String::from_utf8(result.to_csv()?)?);
    Ok(())
}

fn cmd_gradcheck(cmd: &GradcheckCmd) -> Result<()> {
    let reports = check_all(cmd.trials, cmd.seed)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!("{:<22} {:.3e}", r.kind.name(), r.max_relative_error);
        worst = worst.max(r.max_relative_error);
    }
    if worst > GRAD_TOLERANCE {
        bail!("largest relative error {worst:.3e} exceeds {GRAD_TOLERANCE:e}");
    }
    Ok(())
}

fn cmd_inspect(cmd: &InspectCmd) -> Result<()> {
    let ckpt = Checkpoint::load(&cmd.run.join("model.json"))?;
    let aux_path = cmd.run.join("aux.json");
    let aux: AuxHeads = if aux_path.exists() {
        let text =
            fs::read_to_string(&aux_path).with_context(|| format!("reading {}", aux_path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", aux_path.display()))?
    } else {
        AuxHeads::default()
    };
    let dir = cmd.out.clone().unwrap_or_else(|| cmd.run.join("inspect"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (i, layer) in ckpt.params.layers.iter().enumerate() {
        let w = dir.join(format!("layer{i}_weights.csv"));
        layer.weights.write_csv(&w)?;
        let b = dir.join(format!("layer{i}_bias.csv"));
        noisyboot::Matrix::row_vector(&layer.bias).write_csv(&b)?;
        written.extend([w, b]);
    }
    if let Some(a) = &aux.adapter {
        let channel = a.channel();
        for (name, m) in [
            ("adapter_channel.csv", channel.clone()),
            ("adapter_weights.csv", a.weights.clone()),
            ("adapter_bias.csv", noisyboot::Matrix::row_vector(&a.bias)),
        ] {
            m.write_csv(&dir.join(name))?;
            written.push(dir.join(name));
        }
        println!("recovered permutation {:?}", recovered_permutation(&channel));
    }
    if let Some(r) = &aux.recon {
        let p = dir.join("recon_weights.csv");
        r.weights.write_csv(&p)?;
        written.push(p);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Multibox(c) => cmd_multibox(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Inspect(c) => cmd_inspect(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
