//! Cached autoregressive generation, streaming, prediction statistics and
//! latency measurement.

mod bench;
mod engine;
mod eval;
mod generate;
mod stats;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{ChunkSchedule, MaskMode};
use crate::model::{ModelConfig, Variant};
use crate::numerics::Scalar;

pub use bench::{bench_latency, BenchSettings, LatencyReport};
pub use engine::{position_visible, text_needed, Engine};
pub use eval::{evaluate, EvalRow, EvalSummary};
pub use generate::{
    generate, generate_reference, generate_streaming, generate_traced, Generator, StepLogits, StreamingSession,
};
pub use stats::{entropy_of, entropy_reference, entropy_stats, EntropyStats, ENTROPY_BIN, MAX_PROB_BIN};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub seed: u64,
    pub max_speech_tokens: usize,
    /// Tokens accepted per backbone forward.
    pub m: usize,
    pub streaming: bool,
    pub chunk: ChunkSchedule,
    /// Keep generating through EOS (timing runs only).
    pub ignore_eos: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            seed: 0,
            max_speech_tokens: 512,
            m: 1,
            streaming: false,
            chunk: ChunkSchedule::default(),
            ignore_eos: false,
        }
    }
}

impl DecodeConfig {
    /// Defaults with `m` and the chunk schedule taken from the model.
    pub fn for_model(cfg: &ModelConfig, m: usize) -> Self {
        DecodeConfig {
            m,
            chunk: cfg.chunk,
            ..DecodeConfig::default()
        }
    }

    pub fn mask_mode(&self) -> MaskMode {
        if self.streaming {
            MaskMode::Streaming
        } else {
            MaskMode::NonStreaming
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let m = self.m;
        match model.variant {
            Variant::Ntp if m != 1 => return Err(Error::Config(format!("ntp accepts one token per step, got m={m}"))),
            Variant::GroupLinear | Variant::GroupTrans if m != model.n => {
                return Err(Error::Config(format!(
                    "group variants accept exactly g={} tokens per step, got m={m}",
                    model.n
                )))
            }
            Variant::MtpParallel | Variant::MtpDeepseek | Variant::MtpVocalnet if m == 0 || m > model.n => {
                return Err(Error::Config(format!("m={m} outside 1..={}", model.n)))
            }
            _ => {}
        }
        if self.max_speech_tokens == 0 {
            return Err(Error::Config("max_speech_tokens must be positive".into()));
        }
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        ChunkSchedule::new(self.chunk.speech_chunk, self.chunk.text_chunk)?;
        Ok(())
    }
}

/// Wall time per pipeline stage, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub projector_ms: f64,
    pub backbone_ms: f64,
    pub mtp_modules_ms: f64,
    pub heads_ms: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.projector_ms + self.backbone_ms + self.mtp_modules_ms + self.heads_ms
    }

    pub fn add(&mut self, o: &StageTimes) {
        self.projector_ms += o.projector_ms;
        self.backbone_ms += o.backbone_ms;
        self.mtp_modules_ms += o.mtp_modules_ms;
        self.heads_ms += o.heads_ms;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub schema_version: u32,
    pub tokens: Vec<usize>,
    pub backbone_forwards: usize,
    pub tokens_per_forward: f64,
    pub stage_ms: StageTimes,
    pub wall_ms: f64,
    /// Filled in when a pairwise `m = 1` run was measured.
    pub realized_speedup: Option<f64>,
}

/// Picks a token from one logit row.
pub(crate) fn select_token<T: Scalar, R: Rng>(
    logits: &[T],
    cfg: &DecodeConfig,
    rng: &mut R,
    step: usize,
) -> Result<usize> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLogits { step });
    }
    match cfg.mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        DecodeMode::Sample => {
            let z: Vec<f64> = logits.iter().map(|x| x.to_f64_lossy() / cfg.temperature).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut r = rng.random::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if r < *wi {
                    return Ok(i);
                }
                r -= wi;
            }
            Ok(w.len() - 1)
        }
    }
}
