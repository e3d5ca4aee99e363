//! Sample preparation and the pretrain / probe / fine-tune workflow.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{ParamGrads, ParamId, ParamStore, Tape, Var};
use crate::checkpoint;
use crate::config::{to_mm, DatasetSpec, ExperimentConfig, PhaseHyper, Task};
use crate::encodings::{checksum, reference_day};
use crate::error::{Error, Result};
use crate::heads::{label_cells, ClassificationHead, SegmentationHead};
use crate::masking::sample_plan;
use crate::metrics::{top1_accuracy, weighted_f1, Confusion};
use crate::model::{Mae, ModelInput};
use crate::optim::{ema_alpha, ema_update, AdamW, AdamWConfig, Schedule};
use crate::rng::{Purpose, RngKey};
use crate::scalar::Scalar;
use crate::synth::{
    label_side, read_label, read_manifest, read_tile, render, tile_id, Label, Manifest, SyntheticRecipe, MANIFEST_VERSION,
};
use crate::temporal::{d4_transform, discretize, pixel_window, sample_crop, Phase, RawSeries};
use crate::tokenizer::patchify;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunPhase {
    Pretrain,
    Probe,
    Finetune,
}

impl RunPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            RunPhase::Pretrain => "pretrain",
            RunPhase::Probe => "probe",
            RunPhase::Finetune => "finetune",
        }
    }

    pub fn hyper(self, cfg: &ExperimentConfig) -> PhaseHyper {
        match self {
            RunPhase::Pretrain => cfg.training.pretrain,
            RunPhase::Probe => cfg.training.probe,
            RunPhase::Finetune => cfg.training.finetune,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TileData {
    pub id: String,
    pub series: Vec<Option<RawSeries>>,
    pub label: Label,
}

/// Tiles held in memory, modalities indexed like the dataset spec.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub tiles: Vec<TileData>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let tiles = manifest
            .tiles
            .par_iter()
            .map(|t| {
                let series = manifest
                    .dataset
                    .modalities
                    .iter()
                    .map(|m| if m.is_active() { read_tile(&manifest, dir, &t.id, &m.name).map(Some) } else { Ok(None) })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TileData { id: t.id.clone(), series, label: read_label(&manifest, dir, t)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, tiles })
    }

    /// Renders a recipe straight into memory.
    pub fn synthetic(recipe: &SyntheticRecipe, dataset: &DatasetSpec) -> Result<Self> {
        let tiles = render(recipe, dataset)?
            .into_iter()
            .enumerate()
            .map(|(i, (series, label))| TileData { id: tile_id(i), series, label })
            .collect();
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            dataset: dataset.clone(),
            recipe: Some(recipe.clone()),
            label_side: label_side(dataset)?,
            tiles: Vec::new(),
        };
        Ok(Self { manifest, tiles })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// The first `n` tiles and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.tiles.len());
        let mut a = self.clone();
        let b_tiles = a.tiles.split_off(n);
        let b = Dataset { manifest: self.manifest.clone(), tiles: b_tiles };
        (a, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Classes(Vec<usize>),
    /// Reference cell and class of every labelled pixel of the crop.
    Pixels { cells: Vec<usize>, classes: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub input: ModelInput,
    pub target: Target,
}

/// Crop, discretize, augment and patchify one `(tile, repetition)` pair.
pub fn prepare(cfg: &ExperimentConfig, data: &Dataset, tile: usize, rep: usize, phase: Phase, seed: u64, epoch: u64) -> Result<Sample> {
    let ds = &cfg.dataset;
    let reps = ds.repetition_factor() as u64;
    let slot = tile as u64 * reps + rep as u64;
    let key = RngKey::new(seed, epoch, slot, Purpose::Crop);
    let crop = sample_crop(ds, phase, rep, &mut key.rng());
    let d4 = match phase {
        Phase::Train => key.with_purpose(Purpose::Augment).rng().gen_range(0..8),
        Phase::Eval => 0,
    };
    let td = &data.tiles[tile];
    let mut patches = Vec::with_capacity(ds.modalities.len());
    let mut times = Vec::with_capacity(ds.modalities.len());
    for (mi, m) in ds.modalities.iter().enumerate() {
        let raw = match (m.is_active(), td.series.get(mi).and_then(Option::as_ref)) {
            (false, _) => {
                patches.push(None);
                times.push(Vec::new());
                continue;
            }
            (true, Some(r)) => r,
            (true, None) => return Err(Error::invalid(format!("tile `{}` lacks modality `{}`", td.id, m.name))),
        };
        let mkey = RngKey::new(seed, epoch, (slot << 8) | mi as u64, Purpose::Truncate);
        let disc = discretize(raw, m, pixel_window(&crop, m), phase, mkey)?;
        let img = if d4 == 0 { disc.data } else { d4_transform(&disc.data, d4) };
        patches.push(Some(patchify(img.view(), m.patch_size)?));
        times.push(disc.selected_times);
    }
    let reference_day = reference_day(times.iter().flatten()).unwrap_or(0);
    let target = match (&td.label, ds.task) {
        (Label::Classes(c), Task::Classification) => Target::Classes(c.clone()),
        (Label::Map(map), Task::Segmentation) => {
            let side = map.nrows();
            let gsd = to_mm(ds.tile_extent_m) / side as i64;
            let (r0, c0, n) = ((crop.row_mm / gsd) as usize, (crop.col_mm / gsd) as usize, (crop.extent_mm / gsd) as usize);
            let window: Array2<u16> = map.slice(s![r0..r0 + n, c0..c0 + n]).to_owned();
            let window = if d4 == 0 { window } else { d4_transform(&window, d4) };
            let reference = ds.reference_side().ok_or_else(|| Error::invalid("reference grid does not divide the crop"))?;
            let all = label_cells(reference, n);
            let (mut cells, mut classes) = (Vec::new(), Vec::new());
            for (q, &c) in window.iter().enumerate() {
                let c = c as usize;
                if c < ds.num_classes && !ds.ignored_class_ids.contains(&c) {
                    cells.push(all[q]);
                    classes.push(c);
                }
            }
            Target::Pixels { cells, classes }
        }
        _ => return Err(Error::invalid(format!("tile `{}` label does not match the task", td.id))),
    };
    Ok(Sample { input: ModelInput { patches, times, reference_day }, target })
}

#[derive(Debug, Clone)]
pub enum Head {
    Classification(ClassificationHead),
    Segmentation(SegmentationHead),
}

impl Head {
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Head::Classification(h) => h.params(),
            Head::Segmentation(h) => h.params(),
        }
    }
}

/// Autoencoder, task head and their parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub mae: Mae,
    pub head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = RngKey::new(seed, 0, 0, Purpose::Init).rng();
        let mae = Mae::new(&mut store, &cfg.dataset, &cfg.fusion, &cfg.dims, &mut rng)?;
        let width = cfg.dims.encoder_width;
        let classes = cfg.dataset.num_classes;
        let head = match cfg.dataset.task {
            Task::Classification => Head::Classification(ClassificationHead::new(&mut store, width, classes, &mut rng)),
            Task::Segmentation => {
                let side = cfg.dataset.reference_side().ok_or_else(|| Error::invalid("reference grid does not divide the crop"))?;
                Head::Segmentation(SegmentationHead::new(&mut store, width, classes, side, &mut rng))
            }
        };
        Ok(Self { store, mae, head })
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.mae.backbone_params()
    }

    pub fn trainable(&self, phase: RunPhase) -> Vec<ParamId> {
        match phase {
            RunPhase::Pretrain => {
                let mut p = self.mae.backbone_params();
                p.extend(self.mae.decoder_params());
                p
            }
            RunPhase::Probe => self.head.params(),
            RunPhase::Finetune => {
                let mut p = self.mae.backbone_params();
                p.extend(self.head.params());
                p
            }
        }
    }

    /// Hash of the encoder-side parameter values.
    pub fn backbone_checksum(&self) -> u64 {
        checksum(self.backbone_params().iter().flat_map(|&id| self.store.get(id).data.iter().map(|v| v.to_f64_lossy())))
    }

    pub fn logits(&self, tape: &mut Tape<'_, T>, input: &ModelInput) -> Result<Var> {
        let encoded = self.mae.encode_full(tape, input)?;
        Ok(match &self.head {
            Head::Classification(h) => h.forward(tape, &encoded),
            Head::Segmentation(h) => h.forward(tape, &encoded, &self.mae.layout),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Loads a checkpoint; head parameters may be missing.
    pub fn load(&mut self, path: &Path) -> Result<usize> {
        let records = checkpoint::load(path)?;
        checkpoint::restore(&mut self.store, &records, &["head."])
    }
}

fn supervised_loss<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, target: &Target, classes: usize) -> Var {
    match target {
        Target::Classes(c) => {
            let y = (0..classes).map(|k| if c.contains(&k) { T::one() } else { T::zero() }).collect();
            tape.bce_with_logits(logits, y, T::one() / T::of_usize(classes))
        }
        Target::Pixels { cells, classes: cls } => {
            let pairs: Vec<(usize, usize)> = cells.iter().copied().zip(cls.iter().copied()).collect();
            let w = if pairs.is_empty() { T::zero() } else { T::one() / T::of_usize(pairs.len()) };
            tape.cross_entropy(logits, pairs, w)
        }
    }
}

/// One sample's loss and parameter gradients.
pub fn sample_step<T: Scalar>(model: &Model<T>, cfg: &ExperimentConfig, phase: RunPhase, sample: &Sample, mask_key: RngKey) -> Result<(f64, ParamGrads<T>)> {
    let mut tape = Tape::new(&model.store);
    let loss = match phase {
        RunPhase::Pretrain => {
            let plan = sample_plan(&model.mae.layout, &cfg.fusion.structured_probs, cfg.fusion.mask_ratio, &mut mask_key.rng())?;
            model.mae.pretrain_forward(&mut tape, &sample.input, &plan, true)?.loss
        }
        RunPhase::Probe | RunPhase::Finetune => {
            let logits = model.logits(&mut tape, &sample.input)?;
            supervised_loss(&mut tape, logits, &sample.target, cfg.dataset.num_classes)
        }
    };
    let value = tape.scalar(loss).to_f64_lossy();
    Ok((value, tape.backward(loss)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub phase: RunPhase,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub weighted_f1: Option<f64>,
    pub top1: Option<f64>,
    pub miou: Option<f64>,
}

impl EvalReport {
    /// Weighted F1 for classification, mIoU for segmentation.
    pub fn headline(&self) -> Option<f64> {
        self.weighted_f1.or(self.miou)
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOptions {
    pub phase: RunPhase,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    /// Evaluate on the validation set after every epoch instead of only at
    /// the end.
    pub eval_every_epoch: bool,
}

impl PhaseOptions {
    pub fn new(phase: RunPhase, seed: u64) -> Self {
        Self { phase, seed, epochs: None, batch_size: None, eval_every_epoch: false }
    }
}

#[derive(Debug, Clone)]
pub struct PhaseReport {
    pub epochs: Vec<EpochLog>,
    pub eval: Option<EvalReport>,
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
}

/// Trains `model` for one phase. Fine-tuning replaces the weights by their
/// EMA at the end, which is also what the evaluations see.
pub fn run_phase<T: Scalar>(
    model: &mut Model<T>,
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    opts: &PhaseOptions,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<PhaseReport> {
    cfg.validate().into_result()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let hyper = opts.phase.hyper(cfg);
    let epochs = opts.epochs.unwrap_or(hyper.epochs);
    let batch = opts.batch_size.unwrap_or(hyper.batch_size).max(1);
    let reps = cfg.dataset.repetition_factor();
    let slots: Vec<(usize, usize)> = (0..train.len()).flat_map(|t| (0..reps).map(move |r| (t, r))).collect();
    let steps_per_epoch = slots.len().div_ceil(batch);
    let schedule = Schedule {
        base_lr: hyper.base_lr,
        batch_size: batch,
        warmup_fraction: cfg.training.warmup_fraction,
        final_div: hyper.final_div,
        total_steps: epochs * steps_per_epoch,
    };
    let adam_cfg = AdamWConfig {
        beta1: cfg.training.beta1,
        beta2: cfg.training.beta2,
        weight_decay: cfg.training.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(&model.store, adam_cfg);
    let trainable = model.trainable(opts.phase);
    let before = model.backbone_checksum();
    let alpha = ema_alpha(epochs);
    let mut ema = (opts.phase == RunPhase::Finetune).then(|| model.store.clone());
    let mut logs = Vec::with_capacity(epochs);
    let mut step = 0;
    let mut eval = None;
    for epoch in 0..epochs {
        let mut order = slots.clone();
        order.shuffle(&mut RngKey::new(opts.seed, epoch as u64, 0, Purpose::Shuffle).rng());
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<(f64, ParamGrads<T>)> = chunk
                .par_iter()
                .map(|&(tile, rep)| {
                    let sample = prepare(cfg, train, tile, rep, Phase::Train, opts.seed, epoch as u64)?;
                    let key = RngKey::new(opts.seed, epoch as u64, (tile * reps + rep) as u64, Purpose::Mask);
                    sample_step(model, cfg, opts.phase, &sample, key)
                })
                .collect::<Result<_>>()?;
            let mut grads = ParamGrads::empty(model.store.len());
            for (l, g) in &results {
                loss_sum += l;
                grads.accumulate(g);
            }
            grads.scale(T::one() / T::of_usize(chunk.len()));
            lr = schedule.lr(step);
            opt.update(&mut model.store, &grads, lr, &trainable);
            step += 1;
        }
        if let Some(e) = ema.as_mut() {
            ema_update(e, &model.store, alpha, &trainable);
        }
        let last = epoch + 1 == epochs;
        let metric = match (opts.phase, val) {
            (RunPhase::Pretrain, _) | (_, None) => None,
            (_, Some(v)) if opts.eval_every_epoch || last => {
                let report = match &ema {
                    Some(e) => {
                        let mut view = model.clone();
                        view.store = e.clone();
                        evaluate(&view, cfg, v)?
                    }
                    None => evaluate(model, cfg, v)?,
                };
                let h = report.headline();
                eval = Some(report);
                h
            }
            _ => None,
        };
        let log = EpochLog { phase: opts.phase, epoch: epoch + 1, lr, loss: loss_sum / slots.len() as f64, metric };
        on_epoch(&log)?;
        logs.push(log);
    }
    if let Some(e) = ema {
        model.store = e;
    }
    Ok(PhaseReport { epochs: logs, eval, backbone_checksum_before: before, backbone_checksum_after: model.backbone_checksum() })
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b })
}

/// Evaluation over every deterministic crop of every tile.
pub fn evaluate<T: Scalar>(model: &Model<T>, cfg: &ExperimentConfig, data: &Dataset) -> Result<EvalReport> {
    let reps = cfg.dataset.repetition_factor();
    let classes = cfg.dataset.num_classes;
    let slots: Vec<(usize, usize)> = (0..data.len()).flat_map(|t| (0..reps).map(move |r| (t, r))).collect();
    let outputs: Vec<(f64, Vec<f64>, Target)> = slots
        .par_iter()
        .map(|&(tile, rep)| {
            let sample = prepare(cfg, data, tile, rep, Phase::Eval, 0, 0)?;
            let mut tape = Tape::new(&model.store);
            let logits = model.logits(&mut tape, &sample.input)?;
            let loss = supervised_loss(&mut tape, logits, &sample.target, classes);
            let values = tape.value(logits).iter().map(|v| v.to_f64_lossy()).collect();
            Ok((tape.scalar(loss).to_f64_lossy(), values, sample.target))
        })
        .collect::<Result<_>>()?;
    let n = outputs.len().max(1) as f64;
    let loss = outputs.iter().map(|o| o.0).sum::<f64>() / n;
    match cfg.dataset.task {
        Task::Classification => {
            let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.1.clone()).collect();
            let labels: Vec<Vec<usize>> = outputs
                .iter()
                .map(|o| match &o.2 {
                    Target::Classes(c) => c.clone(),
                    Target::Pixels { .. } => Vec::new(),
                })
                .collect();
            Ok(EvalReport {
                loss,
                weighted_f1: Some(weighted_f1(&logits, &labels, classes)),
                top1: Some(top1_accuracy(&logits, &labels)),
                miou: None,
            })
        }
        Task::Segmentation => {
            let mut conf = Confusion::new(classes);
            for (_, logits, target) in &outputs {
                if let Target::Pixels { cells, classes: truth } = target {
                    let pred: Vec<usize> = cells.iter().map(|&c| argmax(&logits[c * classes..(c + 1) * classes])).collect();
                    conf.add(truth, &pred, &cfg.dataset.ignored_class_ids);
                }
            }
            Ok(EvalReport { loss, weighted_f1: None, top1: None, miou: Some(conf.miou(&cfg.dataset.ignored_class_ids)) })
        }
    }
}
