//! Per-stage latency with a pairwise `m = 1` baseline.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::DecoderModel;
use crate::numerics::Scalar;

use super::eval::median;
use super::{generate, DecodeConfig, StageTimes, REPORT_SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub n_trials: usize,
    pub warmup: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { n_trials: 5, warmup: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub schema_version: u32,
    pub m: usize,
    pub n_prompts: usize,
    pub n_trials: usize,
    /// Median over trials of the per-trial sum over prompts.
    pub stage_ms: StageTimes,
    pub wall_ms: f64,
    pub tokens: usize,
    pub backbone_forwards: usize,
    pub tokens_per_forward: f64,
    pub baseline_wall_ms: Option<f64>,
    pub realized_speedup: Option<f64>,
}

struct Trial {
    stages: StageTimes,
    wall: f64,
    tokens: usize,
    forwards: usize,
}

fn run<T: Scalar>(model: &DecoderModel<T>, prompts: &[Vec<usize>], cfg: &DecodeConfig) -> Result<Trial> {
    let mut t = Trial {
        stages: StageTimes::default(),
        wall: 0.0,
        tokens: 0,
        forwards: 0,
    };
    for p in prompts {
        let r = generate(model, p, cfg)?;
        t.stages.add(&r.stage_ms);
        t.wall += r.wall_ms;
        t.tokens += r.tokens.len();
        t.forwards += r.backbone_forwards;
    }
    Ok(t)
}

/// Median stage times over `n_trials` after `warmup` discarded trials. When
/// the variant also accepts `m = 1`, each trial is paired with an `m = 1` run
/// on the same prompts and the ratio of median wall times is reported.
pub fn bench_latency<T: Scalar>(
    model: &DecoderModel<T>,
    prompts: &[Vec<usize>],
    cfg: &DecodeConfig,
    settings: &BenchSettings,
) -> Result<LatencyReport> {
    cfg.validate(model.config())?;
    let base_cfg = DecodeConfig { m: 1, ..cfg.clone() };
    let paired = cfg.m != 1 && base_cfg.validate(model.config()).is_ok();
    let mut trials = Vec::new();
    let mut base = Vec::new();
    for i in 0..settings.warmup + settings.n_trials.max(1) {
        let t = run(model, prompts, cfg)?;
        let b = if paired {
            Some(run(model, prompts, &base_cfg)?)
        } else {
            None
        };
        if i >= settings.warmup {
            trials.push(t);
            if let Some(b) = b {
                base.push(b.wall);
            }
        }
    }
    let pick = |f: &dyn Fn(&Trial) -> f64| median(&mut trials.iter().map(f).collect::<Vec<_>>());
    let stage_ms = StageTimes {
        projector_ms: pick(&|t| t.stages.projector_ms),
        backbone_ms: pick(&|t| t.stages.backbone_ms),
        mtp_modules_ms: pick(&|t| t.stages.mtp_modules_ms),
        heads_ms: pick(&|t| t.stages.heads_ms),
    };
    let wall_ms = pick(&|t| t.wall);
    let (tokens, forwards) = (trials[0].tokens, trials[0].forwards);
    let baseline_wall_ms = if paired { Some(median(&mut base)) } else { None };
    Ok(LatencyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        m: cfg.m,
        n_prompts: prompts.len(),
        n_trials: trials.len(),
        stage_ms,
        wall_ms,
        tokens,
        backbone_forwards: forwards,
        tokens_per_forward: if forwards == 0 {
            0.0
        } else {
            tokens as f64 / forwards as f64
        },
        baseline_wall_ms,
        realized_speedup: baseline_wall_ms.map(|b| b / wall_ms),
    })
}
