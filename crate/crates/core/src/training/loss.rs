//! Variant losses over a batch, recorded on a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskMode;
use crate::model::{group_count, DecoderModel, Variant, IGNORE};
use crate::numerics::{Scalar, Tape, Var};
use crate::synthdata::CorpusRecord;

/// One training instance at its true length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSample {
    /// BOS followed by the text symbols.
    pub text: Vec<usize>,
    /// Targets `s₁ … s_n, EOS`; the inputs are SOS followed by all but the last.
    pub speech: Vec<usize>,
    pub mode: MaskMode,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainBatch {
    pub samples: Vec<TrainSample>,
}

pub fn draw_mask_mode<R: Rng>(rng: &mut R, streaming_prob: f64) -> MaskMode {
    if rng.random_bool(streaming_prob) {
        MaskMode::Streaming
    } else {
        MaskMode::NonStreaming
    }
}

impl TrainSample {
    pub fn from_record(rec: &CorpusRecord, bos: usize, mode: MaskMode) -> Self {
        let mut text = Vec::with_capacity(rec.text.len() + 1);
        text.push(bos);
        text.extend_from_slice(&rec.text);
        TrainSample {
            text,
            speech: rec.speech.clone(),
            mode,
        }
    }

    /// `[SOS, s₁, …, s_n, EOS]`.
    pub fn speech_seq(&self, sos: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.speech.len() + 1);
        s.push(sos);
        s.extend_from_slice(&self.speech);
        s
    }
}

impl TrainBatch {
    /// Padded `B × max_len` target matrix for head `k` of a token-level
    /// variant: entry `t` holds `s_{t+k+1}` where defined and `IGNORE`
    /// elsewhere.
    pub fn padded_targets(&self, k: usize) -> Vec<Vec<usize>> {
        let max_len = self.samples.iter().map(|s| s.speech.len()).max().unwrap_or(0);
        self.samples
            .iter()
            .map(|s| {
                (0..max_len)
                    .map(|t| s.speech.get(t + k).copied().unwrap_or(IGNORE))
                    .collect()
            })
            .collect()
    }

    /// Backbone positions the batch costs for `model`.
    pub fn backbone_positions<T: Scalar>(&self, model: &DecoderModel<T>) -> usize {
        self.samples.iter().map(|s| s.text.len() + n_inputs(model, s)).sum()
    }
}

fn n_inputs<T: Scalar>(model: &DecoderModel<T>, s: &TrainSample) -> usize {
    if model.variant().is_group() {
        group_count(s.speech.len(), model.config().n)
    } else {
        s.speech.len()
    }
}

/// Loss node plus its per-head cross-entropies.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Var,
    pub per_head: Vec<f64>,
    pub valid_targets: Vec<usize>,
    pub backbone_positions: usize,
}

fn weighted_heads<T: Scalar>(
    model: &DecoderModel<T>,
    tape: &mut Tape<T>,
    batch: &TrainBatch,
    depth: usize,
) -> Result<LossOutput> {
    if batch.samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let cfg = model.config();
    let mut logits: Vec<Vec<Var>> = vec![Vec::new(); depth];
    let mut targets: Vec<Vec<usize>> = vec![Vec::new(); depth];
    let mut positions = 0;
    for s in &batch.samples {
        let seq = s.speech_seq(cfg.sos());
        let out = model.forward_sample(tape, &s.text, &seq, n_inputs(model, s), s.mode, depth)?;
        positions += out.backbone_len;
        for (k, (l, t)) in out.logits.into_iter().zip(out.targets).enumerate() {
            logits[k].push(l);
            targets[k].extend(t);
        }
    }
    let mut terms = Vec::with_capacity(depth);
    let mut per_head = Vec::with_capacity(depth);
    let mut valid = Vec::with_capacity(depth);
    let mut w = 1.0f64;
    for k in 0..depth {
        let all = if logits[k].len() == 1 {
            logits[k][0]
        } else {
            tape.concat_rows(&logits[k])?
        };
        let ce = tape.cross_entropy(all, &targets[k], IGNORE)?;
        per_head.push(tape.scalar(ce).to_f64_lossy());
        valid.push(targets[k].iter().filter(|&&t| t != IGNORE).count());
        terms.push((ce, T::from_f64_lossy(w)));
        w *= cfg.lambda;
    }
    let loss = tape.weighted_sum(&terms)?;
    Ok(LossOutput {
        loss,
        per_head,
        valid_targets: valid,
        backbone_positions: positions,
    })
}

fn require<T: Scalar>(model: &DecoderModel<T>, ok: bool, expected: &'static str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::VariantMismatch {
            expected,
            actual: model.variant().to_string(),
        })
    }
}

/// Head-0 next-token cross-entropy on speech positions.
pub fn ntp_loss<T: Scalar>(model: &DecoderModel<T>, tape: &mut Tape<T>, batch: &TrainBatch) -> Result<LossOutput> {
    require(model, model.variant() == Variant::Ntp, "ntp")?;
    weighted_heads(model, tape, batch, 1)
}

/// `Σ_k λ^k CE_k` where head `k` at offset `t` targets offset `t + k + 1`.
/// Also serves the parallel-head variant.
pub fn mtp_loss<T: Scalar>(model: &DecoderModel<T>, tape: &mut Tape<T>, batch: &TrainBatch) -> Result<LossOutput> {
    require(
        model,
        matches!(model.variant(), Variant::MtpVocalnet | Variant::MtpParallel),
        "mtp_vocalnet or mtp_parallel",
    )?;
    weighted_heads(model, tape, batch, model.config().n)
}

/// Teacher-forced merging chain with the same `λ^k` weights.
pub fn deepseek_loss<T: Scalar>(model: &DecoderModel<T>, tape: &mut Tape<T>, batch: &TrainBatch) -> Result<LossOutput> {
    require(model, model.variant() == Variant::MtpDeepseek, "mtp_deepseek")?;
    weighted_heads(model, tape, batch, model.config().n)
}

/// Composed-group backbone; each group output is scored against the next
/// group's tokens.
pub fn group_loss<T: Scalar>(model: &DecoderModel<T>, tape: &mut Tape<T>, batch: &TrainBatch) -> Result<LossOutput> {
    require(model, model.variant().is_group(), "group_linear or group_trans")?;
    weighted_heads(model, tape, batch, 1)
}

/// Dispatches on the model's variant.
pub fn variant_loss<T: Scalar>(model: &DecoderModel<T>, tape: &mut Tape<T>, batch: &TrainBatch) -> Result<LossOutput> {
    match model.variant() {
        Variant::Ntp => ntp_loss(model, tape, batch),
        Variant::MtpVocalnet | Variant::MtpParallel => mtp_loss(model, tape, batch),
        Variant::MtpDeepseek => deepseek_loss(model, tape, batch),
        Variant::GroupLinear | Variant::GroupTrans => group_loss(model, tape, batch),
    }
}
