//! Command-line interface. Every flag can also be given in a TOML file passed
//! with `--config`; keys are the flag names with `_` for `-`, flags win.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ablation::{
    emit_table, eval_examples, read_split, render_visualizations, run_ablation, DataSource, Preset, RunManifest,
};
use crate::data::{discover_dataset, DEFAULT_SIDE};
use crate::error::{Result, SegError};
use crate::metrics::{evaluate, DEFAULT_THRESHOLD};
use crate::model::{Backbone, BuildOptions, Variant};
use crate::synthetic::write_synthetic_dataset;
use crate::train::{load_checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ugda-seg", version, about = "Uncertainty-guided dual attention segmentation: training, evaluation and ablation")]
pub struct Cli {
    /// TOML file with default values for the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and test every backbone × variant on one shared split.
    Ablate(AblateArgs),
    /// Train and test a single backbone/variant.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (or the test part of a saved split).
    Eval(EvalArgs),
    /// Render overlays and entropy heatmaps for a checkpoint.
    Viz(VizArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

macro_rules! fill_from {
    ($dst:expr, $src:expr; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

/// Hyperparameters shared by `ablate` and `train`.
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperArgs {
    /// desk (64 synthetic images, side 128, 5 epochs, warm-up 1) or paper.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs of plain BCE before the hybrid loss.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Entropy weight strength.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Deep-supervision weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub mixed_precision: Option<bool>,
    /// Square input side (and synthetic image side).
    #[arg(long)]
    pub side: Option<usize>,
    /// Dataset root with images/ and masks/.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate N synthetic images instead of reading --data.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test images rendered per run.
    #[arg(long)]
    pub viz_samples: Option<usize>,
    /// Encoder weights (torchvision resnet34 names, safetensors); enables the pretrained encoder.
    #[arg(long)]
    pub encoder_weights: Option<PathBuf>,
}

impl HyperArgs {
    fn fill(&mut self, file: &Self) {
        fill_from!(self, file; preset, epochs, batch, lr, weight_decay, seed, warmup, beta, alpha,
            mixed_precision, side, data, synthetic, out, viz_samples, encoder_weights);
    }

    /// Resolves preset, overrides and data source into a manifest.
    pub fn manifest(&self, backbones: Vec<Backbone>, variants: Vec<Variant>) -> Result<RunManifest> {
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        let mut m = match self.preset {
            Some(p) => RunManifest::preset(p, out),
            None => {
                let mut m = RunManifest::preset(Preset::Paper, out);
                m.train = TrainConfig::default();
                m.side = DEFAULT_SIDE;
                m
            }
        };
        m.backbones = backbones;
        m.variants = variants;
        if let Some(side) = self.side {
            m.side = side;
        }
        match (&self.data, self.synthetic) {
            (Some(root), _) => m.data = DataSource::Directory(root.clone()),
            (None, Some(count)) => m.data = DataSource::Synthetic { count, side: m.side },
            (None, None) if self.preset.is_some() => {
                if let DataSource::Synthetic { count, .. } = m.data {
                    m.data = DataSource::Synthetic { count, side: m.side };
                }
            }
            (None, None) => return Err(SegError::Config("give --data DIR, --synthetic N or --preset".into())),
        }
        let t = &mut m.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.warmup {
            t.loss.warmup_epochs = v;
        }
        if let Some(v) = self.beta {
            t.loss.beta = v;
        }
        if let Some(v) = self.alpha {
            t.ds.alpha = v;
        }
        if let Some(v) = self.mixed_precision {
            t.mixed_precision = v;
        }
        if let Some(v) = self.viz_samples {
            m.viz_samples = v;
        }
        if let Some(path) = &self.encoder_weights {
            m.pretrained_encoder = true;
            m.encoder_weights = Some(path.clone());
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_delimiter = ',')]
    pub backbones: Option<Vec<Backbone>>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    /// Run the variants concurrently.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub parallel: Option<bool>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub backbone: Option<Backbone>,
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// split.json from a previous run; only its test part is scored.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Metrics CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Render at most this many images (sorted by id).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `text` as a flat TOML table for `T`, rejecting keys `T` does not know.
pub fn parse_config<T: Serialize + DeserializeOwned + Default>(text: &str) -> Result<T> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| SegError::Config(e.to_string()))?;
    let value: T = table.clone().try_into().map_err(|e: toml::de::Error| SegError::Config(e.to_string()))?;
    let known = toml::Table::try_from(&value).map_err(|e| SegError::Config(e.to_string()))?;
    let unknown: BTreeSet<&String> = table.keys().filter(|k| !known.contains_key(*k)).collect();
    if !unknown.is_empty() {
        return Err(SegError::Config(format!("unknown config keys: {unknown:?}")));
    }
    Ok(value)
}

fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => parse_config(&std::fs::read_to_string(p)?),
        None => Ok(T::default()),
    }
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| SegError::Config(format!("--{flag} is required")))
}

/// Runs the parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ablate(mut args) => {
            let file: AblateArgs = load_config(config)?;
            args.hyper.fill(&file.hyper);
            fill_from!(args, file; backbones, variants, parallel);
            let mut m = args.hyper.manifest(
                args.backbones.unwrap_or_else(|| Backbone::ALL.to_vec()),
                args.variants.unwrap_or_else(|| Variant::ALL.to_vec()),
            )?;
            m.parallel = args.parallel.unwrap_or(false);
            report(&m)
        }
        Command::Train(mut args) => {
            let file: TrainArgs = load_config(config)?;
            args.hyper.fill(&file.hyper);
            fill_from!(args, file; backbone, variant);
            let m = args.hyper.manifest(
                vec![args.backbone.unwrap_or(Backbone::Unet)],
                vec![args.variant.unwrap_or(Variant::Full)],
            )?;
            report(&m)
        }
        Command::Eval(mut args) => {
            let file: EvalArgs = load_config(config)?;
            fill_from!(args, file; checkpoint, data, split, out, threshold);
            let ckpt = required(&args.checkpoint, "checkpoint")?;
            let (model, meta) = load_checkpoint(&ckpt, &BuildOptions::default())?;
            let pairs = match (&args.split, &args.data) {
                (Some(split), _) => read_split(split)?.test,
                (None, Some(root)) => discover_dataset(root)?,
                (None, None) => return Err(SegError::Config("give --data DIR or --split FILE".into())),
            };
            let examples = eval_examples(&pairs, meta.side)?;
            let metrics = evaluate(&model, &examples, args.threshold.unwrap_or(DEFAULT_THRESHOLD))?;
            match &args.out {
                Some(path) => {
                    std::fs::write(path, metrics.to_csv())?;
                    println!("mean dsc {:.4} iou {:.4} over {} images", metrics.mean_dsc, metrics.mean_iou, examples.len());
                }
                None => print!("{}", metrics.to_csv()),
            }
            Ok(0)
        }
        Command::Viz(mut args) => {
            let file: VizArgs = load_config(config)?;
            fill_from!(args, file; checkpoint, data, out, limit);
            let ckpt = required(&args.checkpoint, "checkpoint")?;
            let root = required(&args.data, "data")?;
            let out = required(&args.out, "out")?;
            let (model, meta) = load_checkpoint(&ckpt, &BuildOptions::default())?;
            let mut pairs = discover_dataset(&root)?;
            pairs.truncate(args.limit.unwrap_or(usize::MAX));
            let examples = eval_examples(&pairs, meta.side)?;
            let written = render_visualizations(&model, &examples, &out, TrainConfig::default().loss.prob_clamp_eps)?;
            println!("wrote {} images to {}", written.len(), out.display());
            Ok(0)
        }
        Command::Synth(mut args) => {
            let file: SynthArgs = load_config(config)?;
            fill_from!(args, file; out, count, side, seed);
            let out = required(&args.out, "out")?;
            let pairs = write_synthetic_dataset(
                &out,
                args.count.unwrap_or(64),
                args.side.unwrap_or(DEFAULT_SIDE),
                args.seed.unwrap_or(42),
            )?;
            println!("wrote {} pairs to {}", pairs.len(), out.display());
            Ok(0)
        }
    }
}

fn report(m: &RunManifest) -> Result<i32> {
    let outcome = run_ablation(m)?;
    if !outcome.records.is_empty() {
        print!("{}", emit_table(&outcome.rows())?.text);
    }
    println!("split {}", outcome.split_hash);
    for f in &outcome.failures {
        eprintln!("FAILED {}_{}: {}", f.backbone.key(), f.variant.key(), f.error);
    }
    Ok(i32::from(!outcome.failures.is_empty()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keys_mirror_flags() {
        let args: AblateArgs = parse_config(
            "preset = \"desk\"\nepochs = 2\nbackbones = [\"unet\"]\nvariants = [\"baseline\", \"full\"]\nparallel = true\n",
        )
        .unwrap();
        assert_eq!(args.hyper.preset, Some(Preset::Desk));
        assert_eq!(args.hyper.epochs, Some(2));
        assert_eq!(args.variants, Some(vec![Variant::Baseline, Variant::Full]));
        assert!(parse_config::<AblateArgs>("epoch = 2\n").is_err());
    }

    #[test]
    fn flags_override_file() {
        let cli = Cli::parse_from(["ugda-seg", "ablate", "--preset", "desk", "--epochs", "3", "--variants", "ds,full"]);
        let Command::Ablate(mut args) = cli.command else { panic!("wrong subcommand") };
        let file: AblateArgs = parse_config("epochs = 9\nbatch = 2\n").unwrap();
        args.hyper.fill(&file.hyper);
        let m = args.hyper.manifest(Backbone::ALL.to_vec(), args.variants.unwrap()).unwrap();
        assert_eq!(m.train.epochs, 3);
        assert_eq!(m.train.batch_size, 2);
        assert_eq!(m.train.loss.warmup_epochs, 1);
        assert_eq!(m.variants, vec![Variant::DsOnly, Variant::Full]);
        assert_eq!(m.data, DataSource::Synthetic { count: 64, side: 128 });
    }

    #[test]
    fn missing_data_source_is_an_error() {
        assert!(HyperArgs::default().manifest(vec![Backbone::Unet], vec![Variant::Full]).is_err());
    }
}
