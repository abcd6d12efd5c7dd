use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mtpslab::inference::{
    bench_latency, entropy_stats, evaluate, generate as generate_tokens, generate_streaming, BenchSettings,
    DecodeConfig, DecodeMode, EvalRow, GenerationReport, REPORT_SCHEMA_VERSION,
};
use mtpslab::masks::{build_mask, build_nonstreaming_mask_literal, ChunkSchedule, MaskMode, SequenceLayout};
use mtpslab::model::{DecoderModel, ModelConfig, Variant};
use mtpslab::numerics::Scalar;
use mtpslab::synthdata::{gen_corpus, mix_seed, read_corpus, Corpus, SynthGrammar};
use mtpslab::training::{train as run_train, TrainConfig, TrainOutputs};
use mtpslab::{Error, Result};
use serde::Serialize;

use crate::anymodel::{with_model, AnyModel};
use crate::manifest::{io_err, RunManifest};
use crate::{
    AnalyzeArgs, BenchArgs, DTypeArg, DecodeArgs, EvalArgs, GenDataArgs, GenerateArgs, MaskModeArg, MaskPrintArgs,
    TrainArgs,
};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (lo, hi) = (a.len_range[0], a.len_range[1]);
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("--len-range needs 1 <= LO <= HI, got {lo} {hi}")));
    }
    let grammar = SynthGrammar {
        symbols: a.symbols,
        max_run: a.max_run,
        p_ext: a.p_ext,
    };
    grammar.validate()?;
    let manifest = RunManifest::start("gen-data", a, Some(a.seed))?;
    create_dir(&a.out)?;
    let train = a.out.join(TRAIN_FILE);
    let eval = a.out.join(EVAL_FILE);
    gen_corpus(&grammar, a.n_train, (lo, hi), mix_seed(a.seed, 1), &train)?;
    gen_corpus(&grammar, a.n_eval, (lo, hi), mix_seed(a.seed, 2), &eval)?;
    let mut manifest = manifest;
    manifest.artifacts = vec![train.clone(), eval.clone()];
    manifest.finish(&a.out)?;
    println!("{}\n{}", train.display(), eval.display());
    Ok(())
}

fn resolve_n(variant: Variant, n: Option<usize>, g: Option<usize>) -> Result<usize> {
    match variant {
        Variant::Ntp => match (n, g) {
            (None | Some(1), None) => Ok(1),
            _ => Err(Error::Config("ntp takes neither --n nor --g".into())),
        },
        Variant::GroupLinear | Variant::GroupTrans => match (n, g) {
            (None, Some(g)) => Ok(g),
            (Some(_), _) => Err(Error::Config(format!("{variant} takes --g, not --n"))),
            (None, None) => Err(Error::Config(format!("{variant} needs --g"))),
        },
        _ => match (n, g) {
            (Some(n), None) => Ok(n),
            (_, Some(_)) => Err(Error::Config(format!("{variant} takes --n, not --g"))),
            (None, None) => Err(Error::Config(format!("{variant} needs --n"))),
        },
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let n = resolve_n(a.variant, a.n, a.g)?;
    let mut mc = ModelConfig::new(&corpus.header.grammar, a.variant, n);
    mc.d_model = a.d_model;
    mc.n_heads = a.n_heads;
    mc.d_ff = a.d_ff;
    mc.n_backbone_layers = a.backbone_layers;
    mc.n_projector_layers = a.projector_layers;
    mc.lambda = a.lambda;
    mc.mask_mode_mix = a.mask_mix;
    mc.chunk = ChunkSchedule::new(a.cs, a.ct)?;
    mc.validate()?;
    let tc = TrainConfig {
        lr: a.lr,
        warmup_ratio: a.warmup_ratio,
        total_steps: a.steps,
        batch_size: a.batch_size,
        seed: a.seed,
        eval_every: a.eval_every,
        checkpoint_dir: Some(a.out.clone()),
        grad_clip: a.grad_clip,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let manifest = RunManifest::start("train", a, Some(a.seed))?;
    create_dir(&a.out)?;
    let log = a.out.join("train_log.csv");
    let report = match a.dtype {
        DTypeArg::F32 => train_typed::<f32>(mc, &corpus, &tc, &log, a.seed)?,
        DTypeArg::F64 => train_typed::<f64>(mc, &corpus, &tc, &log, a.seed)?,
    };
    let mut manifest = manifest;
    manifest.artifacts = report.checkpoints.clone();
    manifest.artifacts.push(log);
    manifest.finish(&a.out)?;
    println!(
        "loss {:.4} -> {:.4}; checkpoint {}",
        report.initial_loss().unwrap_or(f64::NAN),
        report.tail_loss(50).unwrap_or(f64::NAN),
        report
            .checkpoints
            .last()
            .map_or(String::new(), |p| p.display().to_string())
    );
    Ok(())
}

fn train_typed<T: Scalar>(
    mc: ModelConfig,
    corpus: &Corpus,
    tc: &TrainConfig,
    log: &Path,
    seed: u64,
) -> Result<mtpslab::training::TrainReport> {
    let mut model = DecoderModel::<T>::new(mc, seed)?;
    run_train(
        &mut model,
        corpus,
        tc,
        &TrainOutputs {
            log_path: Some(log.to_path_buf()),
        },
    )
}

fn decode_config(model: &ModelConfig, d: &DecodeArgs) -> Result<DecodeConfig> {
    let m = d.m.unwrap_or(if model.variant.is_group() { model.n } else { 1 });
    let chunk = ChunkSchedule::new(
        d.cs.unwrap_or(model.chunk.speech_chunk),
        d.ct.unwrap_or(model.chunk.text_chunk),
    )?;
    let cfg = DecodeConfig {
        mode: if d.sample {
            DecodeMode::Sample
        } else {
            DecodeMode::Greedy
        },
        temperature: d.temperature,
        seed: d.decode_seed,
        max_speech_tokens: d.max_tokens,
        m,
        streaming: d.streaming,
        chunk,
        ignore_eos: false,
    };
    cfg.validate(model)?;
    Ok(cfg)
}

fn parse_text(text: &str, model: &ModelConfig) -> Result<Vec<usize>> {
    let symbols = model.bos();
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<usize>() {
            Ok(x) if x < symbols => Ok(x),
            _ => Err(Error::Config(format!("text symbol `{s}` outside 0..{symbols}"))),
        })
        .collect()
}

#[derive(Serialize)]
struct GenerateOutput {
    schema_version: u32,
    text: Vec<usize>,
    decoded_text: Vec<Option<usize>>,
    chunks: Option<Vec<Vec<usize>>>,
    report: GenerationReport,
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let model = AnyModel::load(&a.checkpoint)?;
    let mc = model.config().clone();
    let cfg = decode_config(&mc, &a.decode)?;
    let text = parse_text(&a.text, &mc)?;
    let manifest = RunManifest::start("generate", a, Some(cfg.seed))?;
    let (report, chunks) = with_model!(&model, m => {
        let report = generate_tokens(m, &text, &cfg)?;
        let chunks = if cfg.streaming { Some(generate_streaming(m, &text, &cfg)?) } else { None };
        (report, chunks)
    });
    let grammar = grammar_of(&mc);
    let decoded = grammar.decode(&report.tokens);
    let out = GenerateOutput {
        schema_version: REPORT_SCHEMA_VERSION,
        text,
        decoded_text: decoded
            .iter()
            .map(|&s| (s != mtpslab::synthdata::ERROR_SYMBOL).then_some(s))
            .collect(),
        chunks,
        report,
    };
    create_dir(&a.out)?;
    let path = a.out.join("generate.json");
    write_json(&path, &out)?;
    let mut manifest = manifest;
    manifest.artifacts = vec![path];
    manifest.finish(&a.out)?;
    let toks: Vec<String> = out.report.tokens.iter().map(|t| t.to_string()).collect();
    println!("{}", toks.join(" "));
    Ok(())
}

/// The grammar a model's vocabulary was built for.
fn grammar_of(mc: &ModelConfig) -> SynthGrammar {
    let symbols = mc.bos();
    SynthGrammar {
        symbols,
        max_run: (mc.speech_vocab - 3) / symbols,
        ..SynthGrammar::default()
    }
}

fn load_records(path: &Path, limit: Option<usize>) -> Result<Corpus> {
    let mut corpus = read_corpus(path)?;
    if let Some(n) = limit {
        corpus.records.truncate(n);
    }
    if corpus.records.is_empty() {
        return Err(Error::Config(format!("{} has no records", path.display())));
    }
    Ok(corpus)
}

fn check_grammar(corpus: &Corpus, mc: &ModelConfig) -> Result<()> {
    let g = corpus.header.grammar;
    if g.text_vocab() != mc.text_vocab || g.speech_vocab() != mc.speech_vocab {
        return Err(Error::Config(
            "corpus grammar does not match the checkpoint vocabulary".into(),
        ));
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = AnyModel::load(&a.checkpoint)?;
    let mc = model.config().clone();
    let cfg = decode_config(&mc, &a.decode)?;
    let corpus = load_records(&a.corpus, a.limit)?;
    check_grammar(&corpus, &mc)?;
    let manifest = RunManifest::start("eval", a, Some(cfg.seed))?;
    let grammar = corpus.header.grammar;
    let (rows, summary) = with_model!(&model, m => evaluate(m, &grammar, &corpus.records, &cfg)?);
    create_dir(&a.out)?;
    let csv = a.out.join("eval.csv");
    let mut text = String::from(EvalRow::CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    write_file(&csv, &text)?;
    let json = a.out.join("summary.json");
    write_json(&json, &summary)?;
    let mut manifest = manifest;
    manifest.artifacts = vec![csv, json];
    manifest.finish(&a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let model = AnyModel::load(&a.checkpoint)?;
    let corpus = load_records(&a.corpus, None)?;
    check_grammar(&corpus, model.config())?;
    let manifest = RunManifest::start("analyze", a, None)?;
    let stats = with_model!(&model, m => entropy_stats(m, &corpus.records, a.n_tokens)?);
    create_dir(&a.out)?;
    let hist = |edges: &[f64], counts: &[usize]| {
        let mut s = String::from("schema_version,bin_lower,count\n");
        for (e, c) in edges.iter().zip(counts) {
            let _ = writeln!(s, "{REPORT_SCHEMA_VERSION},{e},{c}");
        }
        s
    };
    let mp = a.out.join("max_prob_hist.csv");
    write_file(&mp, &hist(&stats.max_prob_edges, &stats.max_prob_hist))?;
    let ent = a.out.join("entropy_hist.csv");
    write_file(&ent, &hist(&stats.entropy_edges, &stats.entropy_hist))?;
    #[derive(Serialize)]
    struct Out<'a> {
        schema_version: u32,
        #[serde(flatten)]
        stats: &'a mtpslab::inference::EntropyStats,
    }
    let json = a.out.join("entropy.json");
    write_json(
        &json,
        &Out {
            schema_version: REPORT_SCHEMA_VERSION,
            stats: &stats,
        },
    )?;
    let mut manifest = manifest;
    manifest.artifacts = vec![mp, ent, json];
    manifest.finish(&a.out)?;
    println!(
        "tokens {} mean_max_prob {:.4} mean_entropy {:.4}",
        stats.n_tokens, stats.mean_max_prob, stats.mean_entropy
    );
    Ok(())
}

#[derive(Debug, Clone)]
struct BenchRow {
    method: Variant,
    size: Option<usize>,
    checkpoint: PathBuf,
    m: usize,
    tokens_per_forward: f64,
    recon_error: f64,
    median_wall_ms: f64,
    speedup_vs_m1: Option<f64>,
    speedup_vs_ntp: Option<f64>,
}

pub const BENCH_HEADER: &str = "schema_version,method,module_num_or_group_size,checkpoint,speedup_ratio,m,\
recon_error,median_wall_ms,speedup_vs_m1,speedup_vs_ntp";

impl BenchRow {
    fn csv_line(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.4}"));
        format!(
            "{},{},{},{},{:.4},{},{:.6},{:.4},{},{}",
            REPORT_SCHEMA_VERSION,
            self.method,
            self.size.map_or("-".to_string(), |s| s.to_string()),
            self.checkpoint.display(),
            self.tokens_per_forward,
            self.m,
            self.recon_error,
            self.median_wall_ms,
            opt(self.speedup_vs_m1),
            opt(self.speedup_vs_ntp),
        )
    }
}

fn bench_checkpoint(a: &BenchArgs, path: &Path, corpus: &Corpus) -> Result<Vec<BenchRow>> {
    let model = AnyModel::load(path)?;
    let mc = model.config().clone();
    check_grammar(corpus, &mc)?;
    let ms: Vec<usize> = match mc.variant {
        Variant::Ntp => vec![1],
        v if v.is_group() => vec![mc.n],
        _ => a.m.iter().copied().filter(|&m| m >= 1 && m <= mc.n).collect(),
    };
    let prompts: Vec<Vec<usize>> = corpus.records.iter().map(|r| r.text.clone()).collect();
    let settings = BenchSettings {
        n_trials: a.trials,
        warmup: a.warmup,
    };
    let mut rows = Vec::new();
    for m in ms {
        let cfg = DecodeConfig {
            m,
            max_speech_tokens: a.max_tokens,
            chunk: mc.chunk,
            ..DecodeConfig::default()
        };
        cfg.validate(&mc)?;
        let timing = DecodeConfig {
            ignore_eos: a.fixed_length.is_some(),
            max_speech_tokens: a.fixed_length.unwrap_or(a.max_tokens),
            ..cfg.clone()
        };
        let grammar = corpus.header.grammar;
        let (summary, lat) = with_model!(&model, md => (
            evaluate(md, &grammar, &corpus.records, &cfg)?.1,
            bench_latency(md, &prompts, &timing, &settings)?,
        ));
        rows.push(BenchRow {
            method: mc.variant,
            size: (mc.variant != Variant::Ntp).then_some(mc.n),
            checkpoint: path.to_path_buf(),
            m,
            tokens_per_forward: summary.mean_tokens_per_forward,
            recon_error: summary.mean_recon_error,
            median_wall_ms: lat.wall_ms,
            speedup_vs_m1: if m == 1 && !mc.variant.is_group() {
                Some(1.0)
            } else {
                lat.realized_speedup
            },
            speedup_vs_ntp: None,
        });
    }
    Ok(rows)
}

/// Worker count from `MTPSLAB_THREADS` (default 1).
fn worker_cap() -> Result<usize> {
    match std::env::var("MTPSLAB_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "MTPSLAB_THREADS must be a positive integer, got `{s}`"
            ))),
        },
        Err(_) => Ok(1),
    }
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    for p in &a.checkpoint {
        if !p.is_file() {
            return Err(io_err(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
    }
    let corpus = load_records(&a.corpus, Some(a.limit))?;
    let manifest = RunManifest::start("bench", a, None)?;
    let workers = worker_cap()?.min(a.checkpoint.len());
    let mut results: Vec<Option<Result<Vec<BenchRow>>>> = (0..a.checkpoint.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let corpus = &corpus;
                s.spawn(move || {
                    (w..a.checkpoint.len())
                        .step_by(workers)
                        .map(|i| (i, bench_checkpoint(a, &a.checkpoint[i], corpus)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("bench worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r.expect("every checkpoint benched")?);
    }
    if let Some(base) = rows.iter().find(|r| r.method == Variant::Ntp).map(|r| r.median_wall_ms) {
        for r in &mut rows {
            r.speedup_vs_ntp = Some(base / r.median_wall_ms);
        }
    }
    create_dir(&a.out)?;
    let path = a.out.join("bench.csv");
    let mut text = format!("{BENCH_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    write_file(&path, &text)?;
    let mut manifest = manifest;
    manifest.artifacts = vec![path];
    manifest.finish(&a.out)?;
    print!("{text}");
    Ok(())
}

pub fn masks_print(a: &MaskPrintArgs) -> Result<()> {
    let layout = SequenceLayout::new(a.lt, a.ls)?;
    let sched = ChunkSchedule::new(a.cs, a.ct)?;
    let mask = match (a.mode, a.literal) {
        (MaskModeArg::NonStreaming, true) => build_nonstreaming_mask_literal(layout),
        (MaskModeArg::Streaming, true) => {
            return Err(Error::Config("--literal applies to the non-streaming mask only".into()))
        }
        (MaskModeArg::NonStreaming, false) => build_mask(layout, MaskMode::NonStreaming, sched),
        (MaskModeArg::Streaming, false) => build_mask(layout, MaskMode::Streaming, sched),
    };
    print!("{}", mask.render());
    Ok(())
}
