//! The epoch loop: weighted loss, clipping, Adam with the one-cycle
//! schedule, validation, early stopping and metrics files.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{Graph, Mode, Reduction};
use crate::data::{
    batches, read_manifest, read_tabular, sample_refs, split_dataset, standardize, Batch,
    DatasetSplit, FrameSpec, Part, Sample, SampleRef, TabularStats,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{ArchSpec, ModelParams, Prediction, NUM_CLASSES};
use crate::optim::{class_weights, clip_gradients, one_cycle_lr, AdamConfig, AdamState, OneCycleConfig};
use crate::train::checkpoint::{save_checkpoint, CheckpointInfo};
use crate::train::config::TrainConfig;

/// Clips are kept in memory across epochs when they fit in this many bytes.
const CACHE_BUDGET: usize = 1 << 30;

pub const CHECKPOINT_FILE: &str = "best.m3dc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Rate used by the last optimizer step of the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Resolved samples for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
    pub frames: FrameSpec,
    pub tabular_stats: Option<TabularStats>,
    pub class_weights: Vec<f64>,
}

impl PreparedData {
    pub fn part(&self, part: Part) -> &[SampleRef] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

fn delimiter(c: char) -> u8 {
    c as u8
}

/// Read the manifest and tabular file, split, standardize on the training
/// part and derive class weights from its label counts.
pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let spec = ArchSpec::new(cfg.arch);
    let rows = read_manifest(&cfg.manifest, delimiter(cfg.manifest_delimiter))?;
    let ids: Vec<String> = rows.iter().map(|r| r.participant_id.clone()).collect();
    let split = split_dataset(&ids, cfg.seeds.split, cfg.split_sizes)?;
    let (tabular_stats, table) = match (&cfg.tabular, spec.uses_tabular) {
        (Some(path), true) => {
            let table = read_tabular(path, delimiter(cfg.tabular_delimiter))?;
            let stats = TabularStats::fit(&table, &split.train)?;
            let map = standardize(&table, &stats);
            (Some(stats), Some(map))
        }
        (None, true) => {
            return Err(Error::Config(format!(
                "{} needs a tabular file",
                cfg.arch
            )))
        }
        (Some(_), false) => {
            return Err(Error::Config(format!(
                "{} takes no tabular input; remove the tabular path",
                cfg.arch
            )))
        }
        (None, false) => (None, None),
    };
    let refs = |ids: &[String]| sample_refs(&rows, ids, table.as_ref());
    let train = refs(&split.train)?;
    let val = refs(&split.val)?;
    let test = refs(&split.test)?;
    let mut counts = [0usize; NUM_CLASSES];
    for s in &train {
        counts[s.label] += 1;
    }
    Ok(PreparedData {
        class_weights: class_weights(&counts)?,
        split,
        train,
        val,
        test,
        frames: cfg.frame_spec(),
        tabular_stats,
    })
}

/// Samples of a part, decoded once when they fit the cache budget.
struct PartLoader<'a> {
    refs: &'a [SampleRef],
    frames: FrameSpec,
    cache: Option<Vec<Sample>>,
}

impl<'a> PartLoader<'a> {
    fn new(refs: &'a [SampleRef], frames: FrameSpec, cache: bool) -> Result<Self> {
        let cache = if cache {
            Some(
                exec::map_indices(refs.len(), |i| refs[i].load(&frames))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(PartLoader { refs, frames, cache })
    }

    fn batch(&self, indices: &[usize]) -> Result<Batch> {
        match &self.cache {
            Some(all) => Batch::collate(&indices.iter().map(|&i| &all[i]).collect::<Vec<_>>()),
            None => {
                let loaded = indices
                    .iter()
                    .map(|&i| self.refs[i].load(&self.frames))
                    .collect::<Result<Vec<_>>>()?;
                Batch::collate(&loaded.iter().collect::<Vec<_>>())
            }
        }
    }

    fn len(&self) -> usize {
        self.refs.len()
    }
}

fn clip_bytes(frames: &FrameSpec) -> usize {
    let [h, w] = frames.size.unwrap_or([480, 640]);
    4 * frames.count * h * w
}

/// `w_y * (logsumexp(x) - x_y)` with a max shift.
pub fn weighted_nll(logits: &[f64], target: usize, weight: f64) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    weight * (lse - logits[target])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Class-weighted mean loss, `sum w_y * nll / sum w_y`.
    pub loss: f64,
    pub ids: Vec<String>,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn from_predictions(
        ids: Vec<String>,
        labels: &[usize],
        predictions: Vec<Prediction>,
        loss: f64,
    ) -> Self {
        let mut confusion = [[0; NUM_CLASSES]; NUM_CLASSES];
        for (p, &y) in predictions.iter().zip(labels) {
            confusion[y][p.class] += 1;
        }
        let correct = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
        let total = labels.len();
        Evaluation {
            total,
            correct,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            confusion,
            loss,
            ids,
            predictions,
        }
    }
}

/// Inference-mode predictions, one sample at a time so that results do not
/// depend on batch composition.
fn evaluate_loader(model: &ModelParams<f32>, loader: &PartLoader<'_>, weights: &[f64]) -> Result<Evaluation> {
    if loader.len() == 0 {
        return Err(Error::EmptySplit("evaluated"));
    }
    let mut predictions = Vec::with_capacity(loader.len());
    let mut labels = Vec::with_capacity(loader.len());
    let mut ids = Vec::with_capacity(loader.len());
    let (mut loss, mut wsum) = (0.0, 0.0);
    for i in 0..loader.len() {
        let batch = loader.batch(&[i])?;
        let logits = model
            .infer(&batch.clips, batch.tabular.as_ref())
            .map_err(|e| e.in_sample(&batch.ids[0]))?;
        let row: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let y = batch.labels[0];
        loss += weighted_nll(&row, y, weights[y]);
        wsum += weights[y];
        predictions.push(Prediction::from_logits(&row));
        labels.push(y);
        ids.push(batch.ids[0].clone());
    }
    Ok(Evaluation::from_predictions(ids, &labels, predictions, loss / wsum))
}

pub fn evaluate(
    model: &ModelParams<f32>,
    refs: &[SampleRef],
    frames: &FrameSpec,
    class_weights: &[f64],
) -> Result<Evaluation> {
    evaluate_loader(model, &PartLoader::new(refs, *frames, false)?, class_weights)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    pub info: CheckpointInfo,
    pub metrics: Vec<EpochMetrics>,
    pub stopped_early: bool,
    /// Written files, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

struct MetricsFiles {
    metrics: fs::File,
    timing: fs::File,
    dir: PathBuf,
}

impl MetricsFiles {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<fs::File> {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
            Ok(f)
        };
        Ok(MetricsFiles {
            metrics: open(METRICS_FILE, "epoch,train_loss,val_loss,val_acc,lr")?,
            timing: open(TIMING_FILE, "epoch,seconds")?,
            dir: dir.to_path_buf(),
        })
    }

    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        let metrics_path = self.dir.join(METRICS_FILE);
        writeln!(
            self.metrics,
            "{},{},{},{},{}",
            m.epoch, m.train_loss, m.val_loss, m.val_acc, m.lr
        )
        .and_then(|_| self.metrics.flush())
        .map_err(|e| Error::io(&metrics_path, e))?;
        let timing_path = self.dir.join(TIMING_FILE);
        writeln!(self.timing, "{},{:.3}", m.epoch, m.seconds)
            .and_then(|_| self.timing.flush())
            .map_err(|e| Error::io(&timing_path, e))
    }
}

/// Read data per `cfg`, train, and write the best checkpoint and metrics
/// files to `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = prepare_data(cfg)?;
    train_on(cfg, &data, Some(&cfg.out_dir), |_| Control::Continue)
}

/// Train on already prepared samples. `on_epoch` sees each epoch's metrics
/// and may end the run.
pub fn train_on(
    cfg: &TrainConfig,
    data: &PreparedData,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = ArchSpec::new(cfg.arch);
    if data.train.is_empty() {
        return Err(Error::EmptySplit("training"));
    }
    if data.val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let cache = (data.train.len() + data.val.len()) * clip_bytes(&data.frames) <= CACHE_BUDGET;
    let train_loader = PartLoader::new(&data.train, data.frames, cache)?;
    let val_loader = PartLoader::new(&data.val, data.frames, cache)?;

    let mut model = ModelParams::<f32>::build(spec, cfg.seeds.init)?;
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = OneCycleConfig::new(cfg.max_lr, (cfg.max_epochs * per_epoch).max(2))?;
    let mut files = out_dir.map(MetricsFiles::create).transpose()?;

    let mut metrics = Vec::new();
    let mut best: Option<(ModelParams<f32>, CheckpointInfo)> = None;
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let mut losses = Vec::with_capacity(per_epoch);
        let mut lr = 0.0;
        for indices in batches(data.train.len(), cfg.batch_size, cfg.seeds.shuffle, epoch as u64)? {
            let batch = train_loader.batch(&indices)?;
            lr = one_cycle_lr(step, &schedule)?;
            let loss = train_step(&mut model, &mut adam, &batch, &data.class_weights, cfg.clip_value, lr)?;
            losses.push(loss);
            step += 1;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let eval = evaluate_loader(&model, &val_loader, &data.class_weights)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            val_loss: eval.loss,
            val_acc: eval.accuracy,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = files.as_mut() {
            f.append(&m)?;
        }
        if eval.loss < best_loss - cfg.min_delta || best.is_none() {
            best_loss = eval.loss;
            stale = 0;
            let info = CheckpointInfo {
                arch: cfg.arch,
                seeds: cfg.seeds,
                epoch: epoch + 1,
                tabular_stats: data.tabular_stats.clone(),
                class_weights: data.class_weights.clone(),
                split_sizes: cfg.split_sizes,
                frames: data.frames,
                best_val_loss: eval.loss,
                best_val_acc: eval.accuracy,
            };
            let mut snapshot = model.clone();
            snapshot.zero_grads();
            best = Some((snapshot, info));
        } else {
            stale += 1;
        }
        let control = on_epoch(&m);
        metrics.push(m);
        if stale >= cfg.patience {
            stopped_early = true;
            break;
        }
        if control == Control::Stop {
            break;
        }
    }
    let (best, info) = best.ok_or(Error::EmptySplit("epoch"))?;
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join(CHECKPOINT_FILE);
            save_checkpoint(&path, &best, &info)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        best,
        info,
        metrics,
        stopped_early,
        checkpoint,
    })
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    model: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    batch: &Batch,
    class_weights: &[f64],
    clip_value: f64,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &batch.clips, batch.tabular.as_ref(), Mode::Training)
        .map_err(|e| e.in_sample(&batch.ids.join(",")))?;
    let loss = g.weighted_cross_entropy(out.logits, &batch.labels, class_weights, Reduction::WeightedMean)?;
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    model.zero_grads();
    model.accumulate_grads(&g, &out.vars);
    drop(g);
    clip_gradients(model.params_mut(), clip_value)?;
    adam.step(model.params_mut(), lr)?;
    Ok(value)
}

/// Per-part evaluation of a trained model on a prepared dataset.
pub fn evaluate_part(model: &ModelParams<f32>, data: &PreparedData, part: Part) -> Result<Evaluation> {
    evaluate(model, data.part(part), &data.frames, &data.class_weights)
}

/// Standardized tabular rows keyed by id, using stored statistics.
pub fn tabular_rows(path: &Path, delim: u8, stats: &TabularStats) -> Result<HashMap<String, Vec<f32>>> {
    Ok(standardize(&read_tabular(path, delim)?, stats))
}
