//! Backbone × variant ablation runs on one shared split, plus the results table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    discover_dataset, example_rng, preprocess, split_dataset, DatasetSplit, PrepMode, PreprocessedExample, SamplePair,
    SplitRatios,
};
use crate::error::{Result, SegError};
use crate::metrics::{evaluate, predict_probabilities, threshold_probabilities, MetricsRecord, DEFAULT_THRESHOLD};
use crate::model::{build_variant, Backbone, BuildOptions, SegmentationModel, Variant, VariantConfig};
use crate::synthetic::write_synthetic_dataset;
use crate::train::{fit, load_checkpoint, TrainConfig, TrainData};
use crate::viz::{render_entropy_heatmap, render_overlay, save_png};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Directory(PathBuf),
    /// Generated under `{out}/data` before the runs start.
    Synthetic { count: usize, side: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(SegError::Config(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub data: DataSource,
    pub backbones: Vec<Backbone>,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    /// Square input side after resizing.
    pub side: usize,
    pub ratios: SplitRatios,
    pub out_dir: PathBuf,
    /// Test images rendered as overlays / heatmaps, first by id.
    pub viz_samples: usize,
    pub pretrained_encoder: bool,
    pub encoder_weights: Option<PathBuf>,
    /// Run variants on separate threads.
    pub parallel: bool,
}

impl RunManifest {
    pub fn preset(preset: Preset, out_dir: PathBuf) -> Self {
        let mut train = TrainConfig::default();
        let (data, side) = match preset {
            Preset::Desk => {
                train.epochs = 5;
                train.batch_size = 4;
                train.learning_rate = 1e-3;
                train.loss.warmup_epochs = 1;
                (DataSource::Synthetic { count: 64, side: 128 }, 128)
            }
            Preset::Paper => (DataSource::Synthetic { count: 432, side: 256 }, 256),
        };
        Self {
            data,
            backbones: Backbone::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            train,
            side,
            ratios: SplitRatios::default(),
            out_dir,
            viz_samples: 4,
            pretrained_encoder: false,
            encoder_weights: None,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbones.is_empty() || self.variants.is_empty() {
            return Err(SegError::Config("an ablation needs at least one backbone and one variant".into()));
        }
        if self.side == 0 || self.side % crate::model::SIZE_DIVISOR != 0 {
            return Err(SegError::Config(format!("side must be a positive multiple of 32, got {}", self.side)));
        }
        if self.pretrained_encoder && self.encoder_weights.is_none() {
            return Err(SegError::Config("pretrained encoder requested without an encoder weight file".into()));
        }
        self.train.validate()
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions { seed: self.train.seed, encoder_weights: self.encoder_weights.clone(), ..BuildOptions::default() }
    }
}

/// One finished (backbone, variant) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub backbone: Backbone,
    pub variant: Variant,
    pub dsc: f64,
    pub iou: f64,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub split_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub backbone: Backbone,
    pub variant: Variant,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub split_hash: String,
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

impl AblationOutcome {
    pub fn rows(&self) -> Vec<TableRow> {
        self.records
            .iter()
            .map(|r| TableRow { backbone: r.backbone, variant: r.variant, dsc: r.dsc, iou: r.iou })
            .collect()
    }
}

/// Resolves the data source into sample pairs, writing synthetic data if needed.
pub fn resolve_data(source: &DataSource, out_dir: &Path, seed: u64) -> Result<Vec<SamplePair>> {
    match source {
        DataSource::Directory(root) => discover_dataset(root),
        DataSource::Synthetic { count, side } => write_synthetic_dataset(&out_dir.join("data"), *count, *side, seed),
    }
}

/// Preprocesses pairs for evaluation (resize + normalize only).
pub fn eval_examples(pairs: &[SamplePair], side: usize) -> Result<Vec<PreprocessedExample>> {
    pairs.iter().map(|p| preprocess(p, PrepMode::Eval, &mut example_rng(0, 0, &p.id), side)).collect()
}

/// Writes `{id}_overlay.png` and `{id}_entropy.png` for every example into `dir`.
pub fn render_visualizations(
    model: &SegmentationModel,
    examples: &[PreprocessedExample],
    dir: &Path,
    eps: f64,
) -> Result<Vec<PathBuf>> {
    let probs = predict_probabilities(model, examples)?;
    let mut written = Vec::with_capacity(2 * examples.len());
    for (ex, p) in examples.iter().zip(&probs) {
        let pred = threshold_probabilities(p, DEFAULT_THRESHOLD);
        let overlay = dir.join(format!("{}_overlay.png", ex.id));
        save_png(&render_overlay(&ex.image, &pred, &ex.mask)?, &overlay)?;
        let entropy = dir.join(format!("{}_entropy.png", ex.id));
        save_png(&render_entropy_heatmap(p, eps), &entropy)?;
        written.push(overlay);
        written.push(entropy);
    }
    Ok(written)
}

struct Shared<'a> {
    manifest: &'a RunManifest,
    data: &'a TrainData,
    test: &'a [PreprocessedExample],
    split_hash: &'a str,
}

fn run_one(shared: &Shared<'_>, backbone: Backbone, variant: Variant) -> Result<RunRecord> {
    let m = shared.manifest;
    let mut cfg = VariantConfig::new(backbone, variant);
    cfg.pretrained_encoder = m.pretrained_encoder;
    let opts = m.build_options();
    let model = build_variant(&cfg, &opts)?;
    let run_dir = m.out_dir.join("runs").join(cfg.run_name());
    let record = fit(&model, shared.data, &m.train, Some(&run_dir))?;
    let ckpt = record
        .checkpoint
        .as_ref()
        .ok_or_else(|| SegError::Checkpoint(format!("{} never produced a checkpoint", cfg.run_name())))?;
    let (best, _) = load_checkpoint(ckpt, &opts)?;
    let metrics = evaluate(&best, shared.test, DEFAULT_THRESHOLD)?;
    std::fs::write(run_dir.join("metrics.csv"), metrics.to_csv())?;
    let mut viz: Vec<&PreprocessedExample> = shared.test.iter().collect();
    viz.sort_by(|a, b| a.id.cmp(&b.id));
    let viz: Vec<PreprocessedExample> = viz.into_iter().take(m.viz_samples).cloned().collect();
    render_visualizations(&best, &viz, &run_dir.join("viz"), m.train.loss.prob_clamp_eps)?;
    log::info!("{}: test dice {:.4} iou {:.4}", cfg.run_name(), metrics.mean_dsc, metrics.mean_iou);
    Ok(RunRecord {
        backbone,
        variant,
        dsc: metrics.mean_dsc,
        iou: metrics.mean_iou,
        best_epoch: record.best_epoch,
        best_val_dice: record.best_val_dice,
        split_hash: shared.split_hash.to_string(),
    })
}

/// Builds one split, trains and tests every (backbone, variant) on it, and
/// writes `results.csv`, `results.md` and `ablation.json` into the output directory.
///
/// A failing run is recorded in [`AblationOutcome::failures`]; the others still run.
pub fn run_ablation(manifest: &RunManifest) -> Result<AblationOutcome> {
    manifest.validate()?;
    std::fs::create_dir_all(&manifest.out_dir)?;
    let pairs = resolve_data(&manifest.data, &manifest.out_dir, manifest.train.seed)?;
    let split = split_dataset(&pairs, manifest.ratios, manifest.train.seed)?;
    let split_hash = split.membership_hash();
    std::fs::write(manifest.out_dir.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    let data = TrainData::load(&split, manifest.side)?;
    let test = eval_examples(&split.test, manifest.side)?;
    let shared = Shared { manifest, data: &data, test: &test, split_hash: &split_hash };

    let jobs: Vec<(Backbone, Variant)> = manifest
        .backbones
        .iter()
        .flat_map(|&b| manifest.variants.iter().map(move |&v| (b, v)))
        .collect();
    let results: Vec<Result<RunRecord>> = if manifest.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.iter().map(|&(b, v)| {
                let shared = &shared;
                s.spawn(move || run_one(shared, b, v))
            }).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(SegError::Config("run thread panicked".into()))))
                .collect()
        })
    } else {
        jobs.iter().map(|&(b, v)| run_one(&shared, b, v)).collect()
    };

    let mut outcome = AblationOutcome { split_hash, records: Vec::new(), failures: Vec::new() };
    for ((backbone, variant), result) in jobs.into_iter().zip(results) {
        match result {
            Ok(r) => outcome.records.push(r),
            Err(e) => {
                log::error!("{}_{} failed: {e}", backbone.key(), variant.key());
                outcome.failures.push(RunFailure { backbone, variant, error: e.to_string() });
            }
        }
    }
    if !outcome.records.is_empty() {
        let table = emit_table(&outcome.rows())?;
        std::fs::write(manifest.out_dir.join("results.csv"), &table.csv)?;
        std::fs::write(manifest.out_dir.join("results.md"), &table.text)?;
    }
    std::fs::write(manifest.out_dir.join("ablation.json"), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

/// Loads a split written by [`run_ablation`].
pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub backbone: Backbone,
    pub variant: Variant,
    pub dsc: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub csv: String,
    /// Markdown table with the best row per backbone in bold.
    pub text: String,
    /// Index into the sorted rows of each marked row.
    pub best: Vec<usize>,
    pub rows: Vec<TableRow>,
}

/// Sorts rows by backbone then variant order and marks the highest-DSC row of
/// each backbone; ties go to the earlier variant.
pub fn emit_table(records: &[TableRow]) -> Result<Table> {
    if records.is_empty() {
        return Err(SegError::Config("emit_table needs at least one record".into()));
    }
    let mut rows = records.to_vec();
    rows.sort_by_key(|r| (r.backbone, r.variant.order()));

    let mut best = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let end = start + rows[start..].iter().take_while(|r| r.backbone == rows[start].backbone).count();
        let mut top = start;
        for i in start + 1..end {
            if rows[i].dsc > rows[top].dsc {
                top = i;
            }
        }
        best.push(top);
        start = end;
    }

    let mut csv = String::from("backbone,variant,dsc,iou\n");
    let mut text = String::from("| Backbone | Variant | DSC | IoU |\n|---|---|---|---|\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{:.4},{:.4}", r.backbone.display_name(), r.variant.display_name(), r.dsc, r.iou);
        let first = i == 0 || rows[i - 1].backbone != r.backbone;
        let backbone = if first { r.backbone.display_name() } else { "" };
        let (dsc, iou) = (format!("{:.4}", r.dsc), format!("{:.4}", r.iou));
        let (dsc, iou) = if best.contains(&i) { (format!("**{dsc}**"), format!("**{iou}**")) } else { (dsc, iou) };
        let _ = writeln!(text, "| {backbone} | {} | {dsc} | {iou} |", r.variant.display_name());
    }
    Ok(Table { csv, text, best, rows })
}

/// Parses a CSV produced by [`emit_table`].
pub fn parse_table_csv(csv: &str) -> Result<Vec<TableRow>> {
    let mut lines = csv.lines();
    if lines.next() != Some("backbone,variant,dsc,iou") {
        return Err(SegError::Config("results CSV must start with 'backbone,variant,dsc,iou'".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(SegError::Config(format!("malformed results row '{line}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| SegError::Config(format!("bad number '{s}' in '{line}'")));
            Ok(TableRow { backbone: f[0].parse()?, variant: f[1].parse()?, dsc: num(f[2])?, iou: num(f[3])? })
        })
        .collect()
}

/// Recomputes test metrics for an existing checkpoint.
pub fn evaluate_checkpoint(ckpt: &Path, examples: &[PreprocessedExample], opts: &BuildOptions) -> Result<MetricsRecord> {
    let (model, _) = load_checkpoint(ckpt, opts)?;
    evaluate(&model, examples, DEFAULT_THRESHOLD)
}
