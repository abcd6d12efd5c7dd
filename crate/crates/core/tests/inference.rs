mod common;

use common::{max_abs_diff, sharpen, tiny};
use mtpslab::inference::{
    generate, generate_reference, generate_streaming, generate_traced, DecodeConfig, Engine, StreamingSession,
};
use mtpslab::masks::{ChunkSchedule, MaskMode};
use mtpslab::model::{DecoderModel, Variant};
use mtpslab::Error;

fn cases() -> Vec<(Variant, usize, Vec<usize>)> {
    vec![
        (Variant::Ntp, 1, vec![1]),
        (Variant::MtpParallel, 3, vec![1, 2, 3]),
        (Variant::MtpVocalnet, 3, vec![1, 2, 3]),
        (Variant::MtpDeepseek, 3, vec![1, 2, 3]),
        (Variant::GroupLinear, 3, vec![3]),
        (Variant::GroupTrans, 2, vec![2]),
    ]
}

fn check_equivalence(model: &DecoderModel<f64>, text: &[usize], cfg: &DecodeConfig) {
    let (report, cached) = generate_traced(model, text, cfg).unwrap();
    let (tokens, reference) = generate_reference(model, text, cfg).unwrap();
    assert_eq!(report.tokens, tokens, "{} m={}", model.variant(), cfg.m);
    assert_eq!(cached.len(), reference.len());
    for (a, b) in cached.iter().zip(&reference) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!(
                max_abs_diff(x, y) <= 1e-10,
                "{} diff {}",
                model.variant(),
                max_abs_diff(x, y)
            );
        }
    }
}

#[test]
fn cached_generation_matches_full_recompute_for_every_variant() {
    for (variant, n, ms) in cases() {
        let mut model = tiny::<f64>(variant, n, 11);
        sharpen(&mut model, 8.0);
        for m in ms {
            for streaming in [false, true] {
                let cfg = DecodeConfig {
                    m,
                    max_speech_tokens: 23,
                    streaming,
                    chunk: ChunkSchedule::new(4, 2).unwrap(),
                    ..DecodeConfig::default()
                };
                check_equivalence(&model, &[3, 1, 4, 1, 5, 9, 2, 6], &cfg);
            }
        }
    }
}

#[test]
fn backbone_forward_count_is_ceiling() {
    for (variant, n, ms) in cases() {
        let model = tiny::<f32>(variant, n, 2);
        for m in ms {
            let cfg = DecodeConfig {
                m,
                max_speech_tokens: 17,
                ignore_eos: true,
                ..DecodeConfig::default()
            };
            let r = generate(&model, &[1, 2, 3], &cfg).unwrap();
            assert_eq!(r.tokens.len(), 17);
            assert_eq!(r.backbone_forwards, 17usize.div_ceil(m), "{variant} m={m}");
            assert!((r.tokens_per_forward - 17.0 / r.backbone_forwards as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn mid_block_eos_truncates() {
    // Force EOS from head 1 only: its bias dominates.
    let mut model = tiny::<f64>(Variant::MtpParallel, 3, 4);
    let eos = model.config().eos();
    let bias = model.params_mut().by_name_mut("head.1.bias").unwrap();
    bias.data_mut()[eos] = 100.0;
    let cfg = DecodeConfig {
        m: 3,
        ..DecodeConfig::default()
    };
    let r = generate(&model, &[0, 1], &cfg).unwrap();
    assert_eq!(r.tokens.len(), 2);
    assert_eq!(r.tokens[1], eos);
    assert_eq!(r.backbone_forwards, 1);
}

#[test]
fn greedy_generation_is_reproducible() {
    let mut model = tiny::<f32>(Variant::MtpVocalnet, 3, 8);
    sharpen(&mut model, 8.0);
    let cfg = DecodeConfig {
        m: 2,
        max_speech_tokens: 30,
        ..DecodeConfig::default()
    };
    let a = generate(&model, &[5, 6, 7], &cfg).unwrap();
    let b = generate(&model, &[5, 6, 7], &cfg).unwrap();
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn m_larger_than_n_is_rejected() {
    let model = tiny::<f32>(Variant::MtpVocalnet, 3, 0);
    let cfg = DecodeConfig {
        m: 4,
        ..DecodeConfig::default()
    };
    assert!(matches!(generate(&model, &[1], &cfg), Err(Error::Config(_))));
}

#[test]
fn cached_extend_contracts() {
    let model = tiny::<f64>(Variant::Ntp, 1, 1);
    let sched = ChunkSchedule::default();
    let mut e = Engine::new(&model, 3, MaskMode::NonStreaming, sched).unwrap();
    e.reveal(&[model.config().bos(), 1, 2]).unwrap();
    assert!(e.cached_extend(0..0, 0..0, &[]).unwrap().is_empty());
    let rows = e.speech_rows(&[model.config().sos()]).unwrap();
    assert!(matches!(e.cached_extend(1..3, 0..1, &rows), Err(Error::Contract(_))));
    e.cached_extend(0..3, 0..1, &rows).unwrap();
    let rows = e.speech_rows(&[4]).unwrap();
    assert!(matches!(e.cached_extend(3..3, 2..3, &rows), Err(Error::Contract(_))));
}

#[test]
fn extension_is_associative() {
    let mut model = tiny::<f64>(Variant::Ntp, 1, 3);
    sharpen(&mut model, 4.0);
    let sos = model.config().sos();
    let toks = [sos, 4, 9, 13, 20, 21];
    let sched = ChunkSchedule::default();
    let run = |splits: &[usize]| {
        let mut e = Engine::new(&model, 2, MaskMode::NonStreaming, sched).unwrap();
        e.reveal(&[model.config().bos(), 7]).unwrap();
        let mut out = Vec::new();
        let mut at = 0;
        for (i, &s) in splits.iter().enumerate() {
            let rows = e.speech_rows(&toks[at..at + s]).unwrap();
            let text = if i == 0 { 0..2 } else { 2..2 };
            let h = e.cached_extend(text, at..at + s, &rows).unwrap();
            let skip = if i == 0 { 2 * 16 } else { 0 };
            out.extend_from_slice(&h[skip..]);
            at += s;
        }
        out
    };
    let a = run(&[1, 3, 1, 1]);
    let b = run(&[1, 4, 1]);
    let c = run(&[1, 1, 1, 1, 1, 1]);
    assert!(max_abs_diff(&a, &b) <= 1e-12);
    assert!(max_abs_diff(&a, &c) <= 1e-12);
}

#[test]
fn streaming_chunks_equal_one_shot_streaming_generation() {
    for (variant, n, ms) in cases() {
        let mut model = tiny::<f64>(variant, n, 21);
        sharpen(&mut model, 8.0);
        for m in ms {
            let cfg = DecodeConfig {
                m,
                max_speech_tokens: 40,
                streaming: true,
                chunk: ChunkSchedule::new(5, 2).unwrap(),
                ..DecodeConfig::default()
            };
            let text = [2, 7, 1, 8, 2, 8, 1, 8];
            let chunks = generate_streaming(&model, &text, &cfg).unwrap();
            assert_eq!(chunks[0].len(), 1);
            let flat: Vec<usize> = chunks.concat();
            let one = generate(&model, &text, &cfg).unwrap();
            assert_eq!(flat, one.tokens, "{variant} m={m}");
        }
    }
}

#[test]
fn unrevealed_text_stalls() {
    let model = tiny::<f64>(Variant::Ntp, 1, 0);
    let cfg = DecodeConfig {
        streaming: true,
        max_speech_tokens: 40,
        chunk: ChunkSchedule::new(3, 2).unwrap(),
        ..DecodeConfig::default()
    };
    let mut s = StreamingSession::new(&model, 6, &cfg).unwrap();
    assert_eq!(s.next_chunk().unwrap().unwrap().len(), 1);
    // Chunk 1 needs two more text positions.
    assert!(matches!(s.next_chunk(), Err(Error::Stall { needed: 3, revealed: 1 })));
    s.reveal(&[4, 5]).unwrap();
    assert_eq!(s.next_chunk().unwrap().unwrap().len(), 3);
}

#[test]
fn unrevealed_text_never_reaches_emitted_chunks() {
    for (variant, n, _) in cases() {
        let mut model = tiny::<f64>(variant, n, 31);
        sharpen(&mut model, 8.0);
        let p = common::streaming_causality(&model, 20, 5);
        assert_eq!(p.violations, 0, "{variant}");
        assert!(p.later_changed > 0, "{variant}: perturbations never mattered");
    }
}

#[test]
fn first_chunk_sees_only_bos() {
    let mut model = tiny::<f64>(Variant::MtpVocalnet, 3, 2);
    sharpen(&mut model, 8.0);
    let cfg = DecodeConfig {
        m: 1,
        streaming: true,
        max_speech_tokens: 10,
        chunk: ChunkSchedule::new(4, 2).unwrap(),
        ..DecodeConfig::default()
    };
    let mut s = StreamingSession::new(&model, 8, &cfg).unwrap();
    let first = s.next_chunk().unwrap().unwrap();
    for text in [[0usize; 8], [5; 8], [1, 2, 3, 4, 5, 6, 7, 8]] {
        let chunks = generate_streaming(&model, &text, &cfg).unwrap();
        assert_eq!(chunks[0], first);
    }
}

#[test]
fn latency_report_has_stage_split_and_baseline() {
    use mtpslab::inference::{bench_latency, BenchSettings};
    let model = tiny::<f32>(Variant::MtpVocalnet, 3, 0);
    let cfg = DecodeConfig {
        m: 3,
        max_speech_tokens: 30,
        ignore_eos: true,
        ..DecodeConfig::default()
    };
    let r = bench_latency(
        &model,
        &[vec![1, 2], vec![3, 4, 5]],
        &cfg,
        &BenchSettings { n_trials: 3, warmup: 1 },
    )
    .unwrap();
    assert_eq!(r.tokens, 60);
    assert_eq!(r.backbone_forwards, 20);
    assert!(r.baseline_wall_ms.is_some() && r.realized_speedup.is_some());
    let json = serde_json::to_value(r.stage_ms).unwrap();
    let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["backbone_ms", "heads_ms", "mtp_modules_ms", "projector_ms"]);
    let ntp = tiny::<f32>(Variant::Ntp, 1, 0);
    let r = bench_latency(&ntp, &[vec![1]], &DecodeConfig::default(), &BenchSettings::default()).unwrap();
    assert!(r.baseline_wall_ms.is_none());
}
