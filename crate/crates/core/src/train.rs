//! Training loop: shuffled minibatches, one graph per example, gradients
//! averaged over the batch, Adam updates, JSONL step logs, and a checkpoint
//! per epoch. Everything is driven by seeded generators, so a run is
//! reproducible bit for bit.

use crate::body_model::BodyModelAsset;
use crate::camera::SampleMode;
use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::config::{LossConfig, RunConfig};
use crate::losses::{example_loss, LossBreakdown};
use crate::mat::Mat;
use crate::model::Model;
use crate::optim::Adam;
use crate::synth::LabeledExample;
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Seed substream for the per-epoch shuffle.
const STREAM_SHUFFLE: u64 = 201;
/// Seed substream for loss-side draws (azimuths, depth jitter).
const STREAM_LOSS: u64 = 202;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("log serialization: {0}")]
    Log(#[from] serde_json::Error),
    #[error("loss became non-finite at step {step} (epoch {epoch})")]
    NonFinite { step: u64, epoch: usize },
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: u64,
    epoch: usize,
    batch_size: usize,
    loss: &'a LossBreakdown,
}

/// Mean loss and mean parameter gradients over a batch. Each example gets
/// its own graph; gradients line up with `model.named_params()`. Entries a
/// given example never touches (e.g. the silhouette decoder on a 2d-only
/// example) contribute zero.
pub fn loss_and_grads<R: Rng>(
    model: &Model<f64>,
    asset: &BodyModelAsset<f64>,
    batch: &[&LabeledExample],
    w: &LossConfig,
    mode: SampleMode,
    rng: &mut R,
) -> (LossBreakdown, Vec<Mat<f64>>) {
    assert!(!batch.is_empty(), "empty batch");
    let mut acc: Vec<Mat<f64>> = model
        .named_params()
        .iter()
        .map(|(_, m)| Mat::zeros(m.rows, m.cols))
        .collect();
    let mut bd_sum = LossBreakdown::default();
    for ex in batch {
        let mut t = Tape::<f64>::new();
        let vars = model.register(&mut t);
        let (total, bd) = example_loss(&mut t, model, &vars, asset, ex, w, mode, rng);
        bd_sum.accumulate(&bd);
        let g = t.backward(total);
        for (slot, var) in acc.iter_mut().zip(vars.var_list()) {
            if let Some(gm) = g.get(var) {
                for (s, &x) in slot.data.iter_mut().zip(&gm.data) {
                    *s += x;
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for m in &mut acc {
        for x in &mut m.data {
            *x *= inv;
        }
    }
    bd_sum.scale_by(inv);
    (bd_sum, acc)
}

pub struct TrainReport {
    pub steps: u64,
    pub final_loss: LossBreakdown,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Run the full optimization. Writes `train_log.jsonl` (one record per
/// step), `checkpoint_epoch_N.fpck` after each epoch, and `model.fpck` at
/// the end, all under `out_dir`. Aborts with the offending step number if
/// the loss ever leaves the finite range.
pub fn train(
    model: &mut Model<f64>,
    asset: &BodyModelAsset<f64>,
    examples: &[LabeledExample],
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    assert!(!examples.is_empty(), "no training examples");
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut opt = Adam::new(cfg.training.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut loss_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    loss_rng.set_stream(STREAM_LOSS);

    let mut step: u64 = 0;
    let mut last_bd = LossBreakdown::default();
    for epoch in 0..cfg.training.epochs {
        let mut idx: Vec<usize> = (0..examples.len()).collect();
        idx.shuffle(&mut shuffle_rng);
        for chunk in idx.chunks(cfg.training.batch_size.max(1)) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (bd, grads) =
                loss_and_grads(model, asset, &batch, &cfg.losses, SampleMode::Stratified, &mut loss_rng);
            step += 1;
            if !bd.total.is_finite() {
                return Err(TrainError::NonFinite { step, epoch });
            }
            serde_json::to_writer(&mut log, &LogRecord { step, epoch, batch_size: batch.len(), loss: &bd })?;
            log.write_all(b"\n")?;
            let mut refs: Vec<&mut Mat<f64>> =
                model.named_params_mut().into_iter().map(|(_, m)| m).collect();
            opt.step_refs(&mut refs, &grads);
            last_bd = bd;
        }
        log.flush()?;
        save_checkpoint(model, cfg, &out_dir.join(format!("checkpoint_epoch_{epoch}.fpck")))?;
    }
    let final_checkpoint = out_dir.join("model.fpck");
    save_checkpoint(model, cfg, &final_checkpoint)?;
    log.flush()?;
    Ok(TrainReport { steps: step, final_loss: last_bd, final_checkpoint, log_path })
}
