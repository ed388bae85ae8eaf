use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::config::ExperimentConfig;
use crate::data::{derive_rng, read_clip, Dataset, Manifest, Mode, Split};
use crate::error::{Error, Result};
use crate::fusion::{ExportRecord, LogitExport};
use crate::model::StepNet;
use crate::params::ParamStore;
use crate::tensor::{Precision, Real, Tape, Tensor};

use super::checkpoint::{Checkpoint, EpochLog, CHECKPOINT_VERSION};
use super::metrics::Metrics;
use super::optim::AdamW;
use super::schedule::{lr_at, Schedule};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `metrics.jsonl`, `last.json` and `best.json`.
    pub out_dir: PathBuf,
    /// Keep wall-clock times out of the log so reruns are byte-identical.
    pub deterministic: bool,
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_top1: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub elapsed: Duration,
}

/// Runs the epoch loop, calling `on_epoch` after each epoch is logged.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::Single => run::<f32>(cfg, opts, on_epoch),
        Precision::Double => run::<f64>(cfg, opts, on_epoch),
    }
}

fn open_dataset(cfg: &ExperimentConfig, root: &Path) -> Result<Dataset> {
    let ds = Dataset::open(root, cfg.data.frames, cfg.data.augment)?;
    if ds.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes(),
            cfg.model.num_classes
        )));
    }
    let first = &ds.manifest().records()[0];
    let channels = read_clip(&Manifest::resolve(root, first))?.shape()[1];
    if channels != cfg.model.backbone.in_channels {
        return Err(Error::Config(format!(
            "clips have {channels} channels, backbone expects {}",
            cfg.model.backbone.in_channels
        )));
    }
    Ok(ds)
}

/// Total loss and flattened gradient for one clip.
fn clip_gradient<F: Real>(
    net: &StepNet,
    store: &ParamStore<F>,
    clip: &Tensor<F>,
    label: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape)?;
    let x = tape.constant(clip);
    let (_, loss) = net.loss(&mut tape, &p, x, label)?;
    let value = tape.item(loss).f64();
    if !value.is_finite() {
        return Err(Error::numeric("train", format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, store.flat_gradient(&p, &grads)))
}

fn final_logits<F: Real>(net: &StepNet, store: &ParamStore<F>, clip: &Tensor<F>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape)?;
    let x = tape.constant(clip);
    let fwd = net.forward(&mut tape, &p, x)?;
    let bundle = fwd.bundle(&tape)?;
    Ok(bundle.final_logits().to_vec())
}

/// Test-mode metrics and final-head logits over one split.
pub fn evaluate<F: Real>(
    net: &StepNet,
    store: &ParamStore<F>,
    dataset: &Dataset,
    split: Split,
) -> Result<(Metrics, LogitExport)> {
    let mut records = Vec::new();
    for r in dataset.records(split) {
        let clip = dataset.load(r, Mode::Test, 0, 0)?.cast::<F>();
        records.push(ExportRecord {
            clip_id: r.path.clone(),
            label: r.label,
            logits: final_logits(net, store, &clip)?,
        });
    }
    if records.is_empty() {
        return Err(Error::invalid("evaluate", format!("split {split:?} is empty")));
    }
    let export = LogitExport::new(records)?;
    Ok((export.metrics()?, export))
}

/// Mean total loss over a split without updating anything.
pub fn mean_loss<F: Real>(
    net: &StepNet,
    store: &ParamStore<F>,
    dataset: &Dataset,
    split: Split,
    mode: Mode,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let records = dataset.records(split);
    let mut sum = 0.0;
    for r in &records {
        let clip = dataset.load(r, mode, seed, epoch)?.cast::<F>();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape)?;
        let x = tape.constant(&clip);
        let (_, loss) = net.loss(&mut tape, &p, x, r.label)?;
        sum += tape.item(loss).f64();
    }
    Ok(sum / records.len() as f64)
}

/// Evaluates a saved checkpoint on `root` (or the dataset it was trained on).
pub fn evaluate_checkpoint(path: &Path, root: Option<&Path>, split: Split) -> Result<(Metrics, LogitExport)> {
    let ck = Checkpoint::load(path)?;
    let cfg = &ck.config;
    let dataset = open_dataset(cfg, root.unwrap_or(&cfg.data.root))?;
    fn go<F: Real>(ck: &Checkpoint, ds: &Dataset, split: Split) -> Result<(Metrics, LogitExport)> {
        let mut store = ParamStore::<F>::zeros();
        let net = StepNet::new(&mut store, &ck.config.model)?;
        store.load_records(&ck.params)?;
        evaluate(&net, &store, ds, split)
    }
    match cfg.precision {
        Precision::Single => go::<f32>(&ck, &dataset, split),
        Precision::Double => go::<f64>(&ck, &dataset, split),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run<F: Real>(
    cfg: &ExperimentConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let dataset = open_dataset(cfg, &cfg.data.root)?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let last_path = opts.out_dir.join("last.json");
    let best_path = opts.out_dir.join("best.json");
    let log_path = opts.out_dir.join("metrics.jsonl");

    let mut store = ParamStore::<F>::seeded(cfg.seed);
    let net = StepNet::new(&mut store, &cfg.model)?;
    let train_set: Vec<_> = dataset.records(Split::Train).into_iter().cloned().collect();
    if train_set.is_empty() {
        return Err(Error::Manifest("train split is empty".into()));
    }
    let batch = cfg.schedule.batch_size;
    let steps_per_epoch = train_set.len().div_ceil(batch) as u64;
    let sched = Schedule::new(&cfg.schedule, steps_per_epoch);
    let hash = cfg.hash();

    let mut opt = AdamW::from_config(store.trainable_count(), &cfg.schedule);
    let (mut epochs_done, mut step, mut best, mut log) = (0usize, 0u64, None::<f64>, Vec::new());
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        if ck.config_hash != hash {
            return Err(Error::Config("checkpoint was written by a different config".into()));
        }
        store.load_records(&ck.params)?;
        if ck.optimizer.m.len() != store.trainable_count() {
            return Err(Error::Config("optimizer state does not match the model".into()));
        }
        opt = ck.optimizer;
        (epochs_done, step, best, log) = (ck.epochs_done, ck.step, ck.best_top1, ck.log);
    }

    let stop = opts.stop_after.unwrap_or(cfg.schedule.epochs).min(cfg.schedule.epochs);
    while epochs_done < stop {
        let epoch = epochs_done as u64;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derive_rng("shuffle", &[cfg.seed, epoch]));

        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; store.trainable_count()];
            for &i in chunk {
                let r = &train_set[i];
                let clip = dataset.load(r, Mode::Train, cfg.seed, epoch)?.cast::<F>();
                let (loss, g) = clip_gradient(&net, &store, &clip, r.label)?;
                loss_sum += loss;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            lr = lr_at(step, &sched);
            let mut flat = store.flatten();
            opt.step(&mut flat, &grad, lr)?;
            store.unflatten(&flat)?;
            step += 1;
        }

        let (metrics, _) = evaluate(&net, &store, &dataset, Split::Test)?;
        epochs_done += 1;
        let entry = EpochLog {
            epoch: epochs_done,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            metrics,
            elapsed_s: (!opts.deterministic).then(|| start.elapsed().as_secs_f64()),
        };
        log.push(entry.clone());
        let improved = best.is_none_or(|b| metrics.top1_pi > b);
        if improved {
            best = Some(metrics.top1_pi);
        }
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: hash.clone(),
            config: cfg.clone(),
            epochs_done,
            step,
            best_top1: best,
            log: log.clone(),
            params: store.records(),
            optimizer: opt.clone(),
        };
        ck.save(&last_path)?;
        if improved {
            ck.save(&best_path)?;
        }
        write(&log_path, EpochLog::to_jsonl(&log).as_bytes())?;
        on_epoch(&entry);
    }

    Ok(TrainOutcome {
        log,
        best_top1: best.unwrap_or(0.0),
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        elapsed: start.elapsed(),
    })
}
