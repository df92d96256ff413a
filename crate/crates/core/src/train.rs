//! Epoch loop, loss scheduling, AdamW updates, validation and best-checkpoint tracking.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use crate::optim::{AdamW, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    example_rng, preprocess_loaded, stack_batch, DatasetSplit, LoadedSample, PrepMode, PreprocessedExample,
};
use crate::error::{Result, SegError};
use crate::loss::{active_loss, LossConfig, LossKind};
use crate::metrics::{evaluate, DEFAULT_THRESHOLD};
use crate::model::{build_variant, BuildOptions, Mode, SegmentationModel, VariantConfig};
use crate::supervision::{total_loss_tensor, DsConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Accepted for configuration parity; CPU runs always compute in full precision.
    pub mixed_precision: bool,
    pub seed: u64,
    pub loss: LossConfig,
    pub ds: DsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            mixed_precision: false,
            seed: 42,
            loss: LossConfig::default(),
            ds: DsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(SegError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SegError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(SegError::Config("learning_rate and weight_decay must be non-negative".into()));
        }
        self.loss.validate()?;
        self.ds.validate()
    }
}

/// Loss used for every head of `variant` in `epoch`: plain BCE for variants
/// without the entropy loss, otherwise BCE during warm-up and the hybrid after.
pub fn loss_schedule(variant: &VariantConfig, epoch: usize, cfg: &LossConfig) -> LossKind {
    if variant.use_entropy_loss {
        active_loss(epoch, cfg)
    } else {
        LossKind::PlainBce
    }
}

/// A stacked mini-batch: `(N,3,S,S)` images and `(N,1,S,S)` {0,1} masks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
}

impl Batch {
    pub fn from_examples(examples: &[&PreprocessedExample], dtype: DType) -> Result<Self> {
        let (images, masks) = stack_batch(examples)?;
        let (ishape, mshape) = (images.dim(), masks.dim());
        let images = Tensor::from_vec(images.into_raw_vec_and_offset().0, ishape, &Device::Cpu)?.to_dtype(dtype)?;
        let masks = Tensor::from_vec(masks.into_raw_vec_and_offset().0, mshape, &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { images, masks })
    }
}

/// Loss values of one forward pass.
#[derive(Clone, Debug)]
pub struct StepLoss {
    pub kind: LossKind,
    pub total: Tensor,
    pub main: f64,
    pub aux: Vec<f64>,
}

/// Train-mode forward pass and the combined objective (no parameter update).
pub fn compute_loss(model: &SegmentationModel, batch: &Batch, epoch: usize, cfg: &TrainConfig) -> Result<StepLoss> {
    let outputs = model.forward(&batch.images, Mode::Train)?;
    let kind = loss_schedule(model.config(), epoch, &cfg.loss);
    let main = kind.evaluate(&outputs.main_logits, &batch.masks, &cfg.loss)?;
    let aux = outputs
        .aux_logits
        .iter()
        .map(|logits| kind.evaluate(logits, &batch.masks, &cfg.loss))
        .collect::<Result<Vec<_>>>()?;
    let total = total_loss_tensor(&main, &aux, &cfg.ds)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    Ok(StepLoss {
        kind,
        main: scalar(&main)?,
        aux: aux.iter().map(scalar).collect::<Result<Vec<_>>>()?,
        total,
    })
}

pub fn make_optimizer(model: &SegmentationModel, cfg: &TrainConfig) -> Result<AdamW> {
    let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..ParamsAdamW::default() };
    Ok(AdamW::new(model.store().trainable_vars(), params)?)
}

/// One optimizer step; returns the total loss evaluated before the update.
pub fn train_step(
    model: &SegmentationModel,
    optimizer: &mut AdamW,
    batch: &Batch,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let step = compute_loss(model, batch, epoch, cfg)?;
    let value = step.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(SegError::NonFinite(format!("training loss {value}")));
    }
    optimizer.backward_step(&step.total)?;
    Ok(value)
}

/// Decoded training samples (augmented afresh each epoch) and preprocessed validation examples.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<LoadedSample>,
    pub val: Vec<PreprocessedExample>,
    pub side: usize,
}

impl TrainData {
    pub fn from_samples(train: Vec<LoadedSample>, val: &[LoadedSample], side: usize) -> Result<Self> {
        let val = val
            .iter()
            .map(|s| preprocess_loaded(s, PrepMode::Eval, &mut example_rng(0, 0, &s.id), side))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { train, val, side })
    }

    pub fn load(split: &DatasetSplit, side: usize) -> Result<Self> {
        let train = split.train.iter().map(LoadedSample::load).collect::<Result<Vec<_>>>()?;
        let val = split.val.iter().map(LoadedSample::load).collect::<Result<Vec<_>>>()?;
        Self::from_samples(train, &val, side)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Checkpoint file name for a variant.
pub fn checkpoint_file_name(variant: &VariantConfig) -> String {
    format!("{}_best.ckpt", variant.run_name())
}

/// Runs the full training protocol. When `run_dir` is given, appends one JSON
/// line per epoch to `run_dir/log.jsonl` and stores the best checkpoint there.
pub fn fit(model: &SegmentationModel, data: &TrainData, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainingRecord> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(SegError::Dataset("training needs non-empty train and validation sets".into()));
    }
    if cfg.mixed_precision {
        log::warn!("mixed precision requested; this build computes in full precision");
    }
    let checkpoint = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let log_path = dir.join("log.jsonl");
            if log_path.exists() {
                std::fs::remove_file(&log_path)?;
            }
            Some(dir.join(checkpoint_file_name(model.config())))
        }
        None => None,
    };

    let mut optimizer = make_optimizer(model, cfg)?;
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut record = TrainingRecord { epochs: Vec::new(), best_epoch: 0, best_val_dice: f64::NEG_INFINITY, checkpoint: None };
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffler);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let examples = chunk
                .iter()
                .map(|&i| {
                    let s = &data.train[i];
                    preprocess_loaded(s, PrepMode::Train, &mut example_rng(cfg.seed, epoch as u64, &s.id), data.side)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PreprocessedExample> = examples.iter().collect();
            let batch = Batch::from_examples(&refs, model.store().dtype())?;
            let loss = train_step(model, &mut optimizer, &batch, epoch, cfg).map_err(|e| match e {
                SegError::NonFinite(msg) => SegError::NonFinite(format!("{msg} at epoch {epoch}, batch {bi}")),
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let metrics = evaluate(model, &data.val, DEFAULT_THRESHOLD)?;
        let row = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_dice: metrics.mean_dsc,
            val_iou: metrics.mean_iou,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} val dice {:.4} iou {:.4}",
            model.config().run_name(),
            row.train_loss,
            row.val_dice,
            row.val_iou
        );
        if row.val_dice > record.best_val_dice {
            record.best_val_dice = row.val_dice;
            record.best_epoch = epoch;
            if let Some(path) = &checkpoint {
                save_checkpoint(model, &CheckpointMeta { variant: *model.config(), epoch, best_val_dice: row.val_dice, side: data.side }, path)?;
                record.checkpoint = Some(path.clone());
            }
        }
        if let Some(dir) = run_dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&row)?)?;
        }
        record.epochs.push(row);
    }
    Ok(record)
}

const CKPT_FORMAT: &str = "ugda-seg-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: VariantConfig,
    pub epoch: usize,
    pub best_val_dice: f64,
    /// Input side the model was trained at.
    pub side: usize,
}

/// Writes every parameter and buffer as safetensors with the metadata in the header.
pub fn save_checkpoint(model: &SegmentationModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tensors: Vec<(String, Tensor)> =
        model.store().iter().map(|(name, p)| (name.clone(), p.var.as_tensor().clone())).collect();
    let mut info = HashMap::new();
    info.insert("format".to_string(), CKPT_FORMAT.to_string());
    info.insert("variant".to_string(), serde_json::to_string(&meta.variant)?);
    info.insert("epoch".to_string(), meta.epoch.to_string());
    info.insert("side".to_string(), meta.side.to_string());
    // exact round trip through the shortest repr
    info.insert("best_val_dice".to_string(), format!("{:?}", meta.best_val_dice));
    safetensors::serialize_to_file(tensors, Some(info), path)?;
    Ok(())
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let info = metadata
        .metadata()
        .as_ref()
        .ok_or_else(|| SegError::Checkpoint(format!("{} has no metadata", path.display())))?;
    let field = |k: &str| {
        info.get(k).ok_or_else(|| SegError::Checkpoint(format!("{} is missing '{k}'", path.display())))
    };
    if field("format")? != CKPT_FORMAT {
        return Err(SegError::Checkpoint(format!("{} is not a {CKPT_FORMAT} file", path.display())));
    }
    let parse_err = |k: &str| SegError::Checkpoint(format!("{}: malformed '{k}'", path.display()));
    Ok(CheckpointMeta {
        variant: serde_json::from_str(field("variant")?)?,
        epoch: field("epoch")?.parse().map_err(|_| parse_err("epoch"))?,
        best_val_dice: field("best_val_dice")?.parse().map_err(|_| parse_err("best_val_dice"))?,
        side: field("side")?.parse().map_err(|_| parse_err("side"))?,
    })
}

/// Rebuilds the recorded variant and restores every tensor.
pub fn load_checkpoint(path: &Path, opts: &BuildOptions) -> Result<(SegmentationModel, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let mut variant = meta.variant;
    // weights come from the checkpoint, not the pretrained file
    variant.pretrained_encoder = false;
    let model = build_variant(&variant, opts)?;
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
    if tensors.len() != model.store().len() {
        return Err(SegError::Checkpoint(format!(
            "{} holds {} tensors, model expects {}",
            path.display(),
            tensors.len(),
            model.store().len()
        )));
    }
    for (name, value) in &tensors {
        model.store().set(name, value)?;
    }
    Ok((model, meta))
}
