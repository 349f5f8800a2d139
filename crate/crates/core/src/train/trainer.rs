use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bce_loss, load_weights_for, save_weights, AdamW, Checkpoint, TrainConfig, Validation};
use crate::data::{make_pair, PairConfig, RegistrationExample};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::metrics::{EvalRecord, Summary};
use crate::model::Model;
use crate::pipeline::register;
use crate::tensor::{BnUpdate, Gradients, Graph, Mode};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: u64,
    pub step: u64,
    /// Mean loss over the epoch's examples.
    pub loss: f64,
    pub val_rr: Option<f64>,
    pub val_mie_r: Option<f64>,
    pub val_mie_t: Option<f64>,
}

/// Where training examples come from.
#[derive(Debug, Clone)]
pub enum TrainData {
    /// The same pairs every epoch, reshuffled per epoch.
    Fixed(Vec<RegistrationExample>),
    /// `per_epoch` fresh pairs per epoch drawn from labelled models.
    Generated { models: Vec<(String, PointCloud)>, pair: PairConfig, per_epoch: usize },
}

impl TrainData {
    fn is_empty(&self) -> bool {
        match self {
            TrainData::Fixed(v) => v.is_empty(),
            TrainData::Generated { models, per_epoch, .. } => models.is_empty() || *per_epoch == 0,
        }
    }

    /// Examples of `epoch` in training order; a pure function of the seed
    /// and the epoch number.
    fn epoch_examples(&self, seed: u64, epoch: u64) -> Result<Vec<RegistrationExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        match self {
            TrainData::Fixed(v) => {
                let mut order: Vec<usize> = (0..v.len()).collect();
                order.shuffle(&mut rng);
                Ok(order.into_iter().map(|i| v[i].clone()).collect())
            }
            TrainData::Generated { models, pair, per_epoch } => {
                let jobs: Vec<(usize, u64)> =
                    (0..*per_epoch).map(|_| (rng.random_range(0..models.len()), rng.random())).collect();
                jobs.into_par_iter()
                    .map(|(m, s)| {
                        let cfg = PairConfig { seed: s, ..pair.clone() };
                        make_pair(&models[m].1, &models[m].0, &cfg)
                    })
                    .collect()
            }
        }
    }
}

/// Mean loss over `batch`, its gradients and the batch-norm statistics of
/// one forward pass over the whole batch.
pub fn batch_loss(model: &Model, batch: &[RegistrationExample]) -> Result<(f64, Gradients, Vec<BnUpdate>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut g = Graph::new(Mode::Train);
    let pairs: Vec<(&PointCloud, &PointCloud)> = batch.iter().map(|ex| (&ex.source, &ex.reference)).collect();
    let outs = model.forward_batch(&mut g, &model.params, &pairs)?;
    let mut total = None;
    for (ex, out) in batch.iter().zip(outs) {
        let loss = bce_loss(&mut g, out.assignment, &ex.gt_matrix)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on example {} (seed {})", ex.label, ex.seed)));
        }
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, grads, g.take_bn_updates()))
}

/// One optimizer update on the mean loss over `batch`.
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &[RegistrationExample]) -> Result<f64> {
    let (loss, grads, bn) = batch_loss(model, batch)?;
    model.params.zero_grad();
    model.params.accumulate(&grads)?;
    model.params.apply_bn_updates(&bn)?;
    opt.step(&mut model.params)?;
    model.params.zero_grad();
    Ok(loss)
}

/// Registers every example with `iterations` passes and scores the result.
pub fn validate(
    model: &Model,
    examples: &[RegistrationExample],
    iterations: usize,
    rot_thresh_deg: f64,
    trans_thresh: f64,
    epoch: u64,
) -> Result<(Validation, Vec<EvalRecord>)> {
    let records: Vec<EvalRecord> = examples
        .par_iter()
        .map(|ex| {
            let r = register(model, &ex.source, &ex.reference, iterations)?;
            EvalRecord::new(&ex.label, &r.transform, &ex.gt_transform, &ex.source, &ex.reference, r.valid, r.correspondences.len())
        })
        .collect::<Result<_>>()?;
    let s = Summary::new(&records, rot_thresh_deg, trans_thresh)?;
    Ok((Validation { epoch, rr: s.rr, mie_r: s.mie_r, mie_t: s.mie_t }, records))
}

/// Output files of a training run; all optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// JSON-lines log, one entry per epoch.
    pub log: Option<PathBuf>,
    /// Written after every epoch.
    pub last: Option<PathBuf>,
    /// Written whenever validation improves.
    pub best: Option<PathBuf>,
    /// First log line of a fresh (not resumed) run.
    pub log_header: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Best-by-validation weights (the last ones without a validation set).
    pub best: Checkpoint,
    pub history: Vec<LogEntry>,
}

fn open_log(path: &Path, append: bool) -> Result<File> {
    let mut o = OpenOptions::new();
    o.create(true);
    if append {
        o.append(true);
    } else {
        o.write(true).truncate(true);
    }
    o.open(path).map_err(|e| Error::io(path, e))
}

/// Runs the epoch loop from `start` (a fresh model or a checkpoint to
/// resume) up to `cfg.epochs` completed epochs.
pub fn train(
    start: Checkpoint,
    data: &TrainData,
    val: &[RegistrationExample],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let resuming = start.epoch > 0;
    let mut model = start.model.clone();
    let mut opt = match &start.optimizer {
        Some(o) => AdamW { config: cfg.optimizer, ..o.clone() },
        None => AdamW::new(cfg.optimizer)?,
    };
    let mut best_val = start.best.clone();
    let mut best = match (&opts.best, resuming && best_val.is_some()) {
        (Some(p), true) if p.exists() => {
            let mut b = load_weights_for(p, &model.config)?;
            b.train = Some(cfg.clone());
            b
        }
        _ => start.clone(),
    };
    let mut log = opts.log.as_deref().map(|p| open_log(p, resuming)).transpose()?;
    if let (Some(f), Some(h), false) = (log.as_mut(), &opts.log_header, resuming) {
        writeln!(f, "{}", serde_json::to_string(h)?).map_err(|e| Error::io(opts.log.as_ref().expect("log path"), e))?;
    }
    let mut history = Vec::new();
    let mut last = start.clone();

    for epoch in start.epoch + 1..=cfg.epochs {
        let examples = data.epoch_examples(cfg.seed, epoch)?;
        let mut total = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            total += train_step(&mut model, &mut opt, batch)? * batch.len() as f64;
        }
        let loss = total / examples.len() as f64;
        let validation = if !val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let (v, _) = validate(&model, val, cfg.val_iterations, cfg.val_rot_thresh_deg, cfg.val_trans_thresh, epoch)?;
            Some(v)
        } else {
            None
        };
        let improved = match (&validation, &best_val) {
            (Some(v), Some(b)) => v.better_than(b),
            (Some(_), None) => true,
            (None, _) => val.is_empty(),
        };
        if improved && validation.is_some() {
            best_val = validation.clone();
        }
        last = Checkpoint {
            model: model.clone(),
            optimizer: Some(opt.clone()),
            train: Some(cfg.clone()),
            epoch,
            validation: validation.clone(),
            best: best_val.clone(),
        };
        if improved {
            best = last.clone();
            if let Some(p) = &opts.best {
                save_weights(&best, p)?;
            }
        }
        if let Some(p) = &opts.last {
            save_weights(&last, p)?;
        }
        let entry = LogEntry {
            epoch,
            step: opt.step,
            loss,
            val_rr: validation.as_ref().map(|v| v.rr),
            val_mie_r: validation.as_ref().and_then(|v| v.mie_r),
            val_mie_t: validation.as_ref().and_then(|v| v.mie_t),
        };
        log::info!("epoch {epoch}: loss {loss:.4} val_rr {:?}", entry.val_rr);
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io(opts.log.as_ref().expect("log path"), e))?;
        }
        history.push(entry);
    }
    Ok(TrainOutcome { last, best, history })
}
