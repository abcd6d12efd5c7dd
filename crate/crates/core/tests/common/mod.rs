#![allow(dead_code)]

use mtpslab::model::{DecoderModel, ModelConfig, Variant};
use mtpslab::numerics::Scalar;
use mtpslab::synthdata::SynthGrammar;

pub fn grammar() -> SynthGrammar {
    SynthGrammar::default()
}

/// Narrow config for fast structural tests.
pub fn tiny_config(variant: Variant, n: usize) -> ModelConfig {
    let mut c = ModelConfig::new(&grammar(), variant, n);
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.n_backbone_layers = 2;
    c.n_projector_layers = 1;
    c.chunk = mtpslab::masks::ChunkSchedule::new(4, 2).unwrap();
    c
}

pub fn tiny<T: Scalar>(variant: Variant, n: usize, seed: u64) -> DecoderModel<T> {
    DecoderModel::new(tiny_config(variant, n), seed).unwrap()
}

/// Scales every parameter so random models produce peaked, varied logits.
pub fn sharpen<T: Scalar>(model: &mut DecoderModel<T>, factor: f64) {
    let f = T::from_f64_lossy(factor);
    for (name, t) in model.params_mut().named_mut() {
        if name.ends_with("norm") || name.ends_with("norm_hidden") || name.ends_with("norm_embed") {
            continue;
        }
        t.data_mut().iter_mut().for_each(|x| *x *= f);
    }
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .fold(0.0, f64::max)
}

use mtpslab::masks::MaskMode;
use mtpslab::synthdata::{make_record, CorpusRecord};
use mtpslab::training::{TrainBatch, TrainSample};

pub fn records(n: usize, len_range: (usize, usize), seed: u64) -> Vec<CorpusRecord> {
    (0..n as u64)
        .map(|i| make_record(&grammar(), len_range, seed, i))
        .collect()
}

/// Alternates streaming and non-streaming samples.
pub fn mixed_batch(n: usize, len_range: (usize, usize), seed: u64) -> TrainBatch {
    let bos = grammar().bos();
    TrainBatch {
        samples: records(n, len_range, seed)
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mode = if i % 2 == 0 {
                    MaskMode::NonStreaming
                } else {
                    MaskMode::Streaming
                };
                TrainSample::from_record(r, bos, mode)
            })
            .collect(),
    }
}

use mtpslab::numerics::Tape;
use mtpslab::training::variant_loss;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Entries whose analytic gradient is below this are too flat for a
/// central difference at `FD_STEP` to resolve and are not sampled.
pub const FD_MIN_GRAD: f64 = 1e-4;

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
}

pub fn loss_value(model: &DecoderModel<f64>, batch: &TrainBatch) -> f64 {
    let mut tape = Tape::new();
    let out = variant_loss(model, &mut tape, batch).unwrap();
    tape.scalar(out.loss)
}

/// Central differences on up to `n` entries drawn from parameters whose
/// name satisfies `select`.
pub fn grad_check(
    model: &DecoderModel<f64>,
    batch: &TrainBatch,
    select: impl Fn(&str) -> bool,
    n: usize,
    seed: u64,
) -> GradCheck {
    let mut tape = Tape::new();
    let out = variant_loss(model, &mut tape, batch).unwrap();
    tape.backward(out.loss).unwrap();
    let grads = tape.param_grads(model.params().len());
    let mut pool = Vec::new();
    for (id, name) in model.params().names().enumerate() {
        if !select(name) {
            continue;
        }
        if let Some(g) = &grads[id] {
            for (e, &v) in g.iter().enumerate() {
                if v.abs() >= FD_MIN_GRAD {
                    pool.push((id, e, v));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    let mut probe = model.clone();
    let mut res = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
    };
    for (id, e, analytic) in pool {
        let base = probe.params().get(id).data()[e];
        probe.params_mut().named_mut()[id].1.data_mut()[e] = base + FD_STEP;
        let up = loss_value(&probe, batch);
        probe.params_mut().named_mut()[id].1.data_mut()[e] = base - FD_STEP;
        let down = loss_value(&probe, batch);
        probe.params_mut().named_mut()[id].1.data_mut()[e] = base;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        if rel > res.worst_rel {
            res.worst_rel = rel;
            res.worst_name = format!("{}[{e}]", model.params().names().nth(id).unwrap());
        }
        res.checked += 1;
    }
    res
}

/// Layer-type groups exercised by the finite-difference suite.
/// Label, variant, N or g, and a filter on parameter names.
pub type GradGroup = (&'static str, Variant, usize, fn(&str) -> bool);

pub fn grad_groups() -> Vec<GradGroup> {
    vec![
        ("attention", Variant::Ntp, 1, |n| {
            [".wq", ".wk", ".wv", ".wo"].iter().any(|s| n.ends_with(s))
        }),
        ("feed_forward", Variant::Ntp, 1, |n| {
            [".w_gate", ".w_up", ".w_down"].iter().any(|s| n.ends_with(s))
        }),
        ("rms_norm", Variant::Ntp, 1, |n| n.ends_with("norm")),
        ("embeddings", Variant::Ntp, 1, |n| n.starts_with("embed.")),
        ("head_ntp", Variant::Ntp, 1, |n| n.starts_with("head.")),
        ("head_parallel", Variant::MtpParallel, 3, |n| n.starts_with("head.")),
        ("head_vocalnet", Variant::MtpVocalnet, 3, |n| n.starts_with("head.")),
        ("mtp_module_vocalnet", Variant::MtpVocalnet, 3, |n| {
            n.starts_with("mtp.")
        }),
        ("head_deepseek", Variant::MtpDeepseek, 3, |n| n.starts_with("head.")),
        ("deepseek_merge", Variant::MtpDeepseek, 3, |n| {
            n.starts_with("mtp.") && (n.ends_with(".merge") || n.ends_with("norm_hidden") || n.ends_with("norm_embed"))
        }),
        ("deepseek_module_layer", Variant::MtpDeepseek, 3, |n| {
            n.contains(".layer.")
        }),
        ("head_group_linear", Variant::GroupLinear, 3, |n| n.starts_with("head.")),
        ("group_compose_linear", Variant::GroupLinear, 3, |n| {
            n == "group.compose"
        }),
        ("head_group_trans", Variant::GroupTrans, 3, |n| n.starts_with("head.")),
        ("group_compose_trans", Variant::GroupTrans, 3, |n| n == "group.compose"),
        ("group_decompose_trans", Variant::GroupTrans, 3, |n| {
            n == "group.queries" || n.starts_with("group.decoder.")
        }),
    ]
}

use mtpslab::masks::{ChunkSchedule, SequenceLayout};

/// Per-entry visibility written from the case analysis alone: text rows see
/// all text (or causal text when streaming), speech rows see their own past
/// plus a text prefix whose length grows by `C_t` each `C_s` speech rows.
pub fn visibility_by_cases(lt: usize, ls: usize, cs: usize, ct: usize, streaming: bool, i: usize, j: usize) -> bool {
    assert!(i >= 1 && j >= 1 && i <= lt + ls && j <= lt + ls);
    let row_is_text = i <= lt;
    let col_is_text = j <= lt;
    if row_is_text && col_is_text {
        return !streaming || j <= i;
    }
    if row_is_text {
        return false;
    }
    if !col_is_text {
        return j <= i;
    }
    if !streaming {
        return true;
    }
    // Speech row at offset o (SOS is offset 1) belongs to chunk ceil((o-1)/C_s).
    let o = i - lt;
    let mut chunk = 0;
    while chunk * cs < o - 1 {
        chunk += 1;
    }
    let prefix = (chunk * ct + 1).min(lt);
    j <= prefix
}

pub fn layout(lt: usize, ls: usize) -> SequenceLayout {
    SequenceLayout::new(lt, ls).unwrap()
}

pub fn sched(cs: usize, ct: usize) -> ChunkSchedule {
    ChunkSchedule::new(cs, ct).unwrap()
}

use mtpslab::inference::{generate_streaming, DecodeConfig};

pub struct CausalityProbe {
    pub trials: usize,
    pub violations: usize,
    /// Trials where a later chunk did react to the perturbation.
    pub later_changed: usize,
}

/// Perturbs one text symbol beyond chunk `c`'s budget and compares chunks
/// `0..=c` of the two streaming runs.
pub fn streaming_causality<T: Scalar>(model: &DecoderModel<T>, trials: usize, seed: u64) -> CausalityProbe {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols = grammar().symbols;
    let sched = model.config().chunk;
    let mut probe = CausalityProbe {
        trials: 0,
        violations: 0,
        later_changed: 0,
    };
    while probe.trials < trials {
        let len = rng.random_range(2..=12);
        let text: Vec<usize> = (0..len).map(|_| rng.random_range(0..symbols)).collect();
        let lt = len + 1;
        let cfg = DecodeConfig {
            m: rng.random_range(1..=model.config().n_output_heads().max(1)),
            max_speech_tokens: 60,
            streaming: true,
            chunk: sched,
            ignore_eos: true,
            ..DecodeConfig::default()
        };
        let cfg = if model.variant().is_group() {
            DecodeConfig {
                m: model.config().n,
                ..cfg
            }
        } else if model.variant() == mtpslab::model::Variant::Ntp {
            DecodeConfig { m: 1, ..cfg }
        } else {
            cfg
        };
        // Chunk c sees text positions 1..=c·C_t+1; pick c with something hidden.
        let max_c = (lt - 2) / sched.text_chunk;
        let c = rng.random_range(0..=max_c);
        let budget = c * sched.text_chunk + 1;
        let pos = rng.random_range(budget + 1..=lt);
        let mut other = text.clone();
        other[pos - 2] = (text[pos - 2] + rng.random_range(1..symbols)) % symbols;
        let a = generate_streaming(model, &text, &cfg).unwrap();
        let b = generate_streaming(model, &other, &cfg).unwrap();
        let upto = (c + 1).min(a.len()).min(b.len());
        if a[..upto] != b[..upto] {
            probe.violations += 1;
        }
        if a != b {
            probe.later_changed += 1;
        }
        probe.trials += 1;
    }
    probe
}
