//! Losses, learning-rate schedule and the training loop.

mod loss;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, DecoderModel};
use crate::numerics::optim::clip_grad_norm;
use crate::numerics::{AdamConfig, AdamState, Scalar, Tape};
use crate::synthdata::{mix_seed, Corpus, CorpusRecord};

pub use loss::{
    deepseek_loss, draw_mask_mode, group_loss, mtp_loss, ntp_loss, variant_loss, LossOutput, TrainBatch, TrainSample,
};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint every this many steps (0 disables intermediate checkpoints).
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub grad_clip: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            warmup_ratio: 0.03,
            total_steps: 5000,
            batch_size: 16,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
            grad_clip: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0,1)",
                self.warmup_ratio
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).floor() as usize
    }
}

/// Linear warmup then cosine decay to `0.01 · lr` at `total_steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warm = cfg.warmup_steps();
    let lr_min = 0.01 * cfg.lr;
    if step < warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    if step == warm {
        return cfg.lr;
    }
    let span = cfg.total_steps.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    lr_min + (cfg.lr - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce_head: Vec<f64>,
    pub wall_ms: f64,
    pub backbone_positions: usize,
}

impl LogRow {
    pub fn csv_header(n_heads: usize) -> String {
        let mut h = String::from("step,lr,loss");
        for k in 0..n_heads {
            h.push_str(&format!(",ce_head_{k}"));
        }
        h.push_str(",wall_ms,backbone_positions,schema_version");
        h
    }

    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{:e},{}", self.step, self.lr, self.loss);
        for c in &self.ce_head {
            s.push_str(&format!(",{c}"));
        }
        s.push_str(&format!(
            ",{:.3},{},{}",
            self.wall_ms, self.backbone_positions, LOG_SCHEMA_VERSION
        ));
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.log.first().map(|r| r.loss)
    }

    /// Mean loss over the last `n` logged steps.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let k = n.min(self.log.len());
        if k == 0 {
            return None;
        }
        Some(self.log[self.log.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64)
    }
}

/// Where the log goes, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log_path: Option<PathBuf>,
}

/// Draws a batch in seed-fixed order: record indices and mask modes both
/// come from `rng`.
pub fn sample_batch<R: Rng>(
    rng: &mut R,
    records: &[CorpusRecord],
    batch_size: usize,
    bos: usize,
    streaming_prob: f64,
) -> TrainBatch {
    let samples = (0..batch_size)
        .map(|_| {
            let rec = &records[rng.random_range(0..records.len())];
            let mode = draw_mask_mode(rng, streaming_prob);
            TrainSample::from_record(rec, bos, mode)
        })
        .collect();
    TrainBatch { samples }
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Trains `model` in place.
pub fn train<T: Scalar>(
    model: &mut DecoderModel<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.records.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let n_heads = model.config().n_output_heads();
    let mut log_file = match &outputs.log_path {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", LogRow::csv_header(n_heads)).map_err(|e| Error::io(p, e))?;
            Some((w, p.clone()))
        }
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7261_696e));
    let mut adam = AdamState::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        model.params().tensors(),
    );
    let n_params = model.params().len();
    let bos = model.config().bos();
    let mix = model.config().mask_mode_mix;
    let mut report = TrainReport::default();
    for step in 0..cfg.total_steps {
        let start = Instant::now();
        let batch = sample_batch(&mut rng, &corpus.records, cfg.batch_size, bos, mix);
        let mut tape = Tape::new();
        let out = variant_loss(model, &mut tape, &batch)?;
        let loss = tape.scalar(out.loss).to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(out.loss)?;
        let mut grads = tape.param_grads(n_params);
        drop(tape);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(cfg, step);
        adam.step(&mut model.params_mut().named_mut(), &grads, lr)?;
        let row = LogRow {
            step,
            lr,
            loss,
            ce_head: out.per_head,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            backbone_positions: out.backbone_positions,
        };
        if let Some((w, p)) = &mut log_file {
            writeln!(w, "{}", row.csv_line()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        report.log.push(row);
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.total_steps {
                let p = checkpoint_path(dir, step + 1);
                save_checkpoint(model, &p)?;
                report.checkpoints.push(p);
            }
        }
    }
    if let Some((w, p)) = &mut log_file {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        let p = dir.join("final.ckpt");
        save_checkpoint(model, &p)?;
        report.checkpoints.push(p);
    }
    Ok(report)
}
