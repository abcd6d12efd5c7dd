//! Generation loops: cached, full-recompute reference and streaming.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masks::{build_mask, SequenceLayout};
use crate::model::{deepseek_shifted_tokens, ChainMode, DecoderModel, Variant};
use crate::numerics::{Scalar, Tape};

use super::engine::Engine;
use super::{select_token, DecodeConfig, GenerationReport, REPORT_SCHEMA_VERSION};

/// Logits of every head evaluated in one step (`[head][vocab]`).
pub type StepLogits<T> = Vec<Vec<T>>;

/// Appends predictions to `tokens` until EOS or the length cap; returns the
/// committed slice length and whether generation is over.
fn commit(tokens: &mut Vec<usize>, preds: &[usize], cfg: &DecodeConfig, eos: usize) -> (usize, bool) {
    let mut n = 0;
    for &t in preds {
        tokens.push(t);
        n += 1;
        if (t == eos && !cfg.ignore_eos) || tokens.len() >= cfg.max_speech_tokens {
            return (n, true);
        }
    }
    (n, false)
}

fn with_bos<T: Scalar>(model: &DecoderModel<T>, text: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(text.len() + 1);
    t.push(model.config().bos());
    t.extend_from_slice(text);
    t
}

/// Step-wise cached generator for one prompt.
pub struct Generator<'m, T> {
    engine: Engine<'m, T>,
    cfg: DecodeConfig,
    rng: ChaCha8Rng,
    tokens: Vec<usize>,
    feed: Vec<usize>,
    started: bool,
    finished: bool,
    forwards: usize,
    trace: Option<Vec<StepLogits<T>>>,
}

impl<'m, T: Scalar> Generator<'m, T> {
    /// `text_symbols` excludes BOS; only BOS is revealed initially.
    pub fn new(model: &'m DecoderModel<T>, n_text_symbols: usize, cfg: &DecodeConfig) -> Result<Self> {
        cfg.validate(model.config())?;
        let mut engine = Engine::new(model, n_text_symbols + 1, cfg.mask_mode(), cfg.chunk)?;
        engine.reveal(&[model.config().bos()])?;
        Ok(Generator {
            engine,
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            tokens: Vec::new(),
            feed: Vec::new(),
            started: false,
            finished: false,
            forwards: 0,
            trace: None,
        })
    }

    pub fn record_logits(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn reveal(&mut self, symbols: &[usize]) -> Result<()> {
        self.engine.reveal(symbols)
    }

    /// Revealed text symbols (BOS excluded).
    pub fn revealed_symbols(&self) -> usize {
        self.engine.revealed() - 1
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn backbone_forwards(&self) -> usize {
        self.forwards
    }

    pub fn engine(&self) -> &Engine<'m, T> {
        &self.engine
    }

    fn token_at(&self, offset: usize, preds: &[usize]) -> Result<usize> {
        // Offset 0 is SOS, offset i ≥ 1 is the i-th emitted token.
        if offset == 0 {
            return Ok(self.engine.model().config().sos());
        }
        let c = self.tokens.len();
        if offset <= c {
            Ok(self.tokens[offset - 1])
        } else {
            preds
                .get(offset - c - 1)
                .copied()
                .ok_or_else(|| Error::Contract(format!("no token predicted yet for speech offset {offset}")))
        }
    }

    /// One backbone forward; returns how many tokens were committed.
    pub fn step(&mut self) -> Result<usize> {
        if self.finished {
            return Ok(0);
        }
        let model = self.engine.model();
        let cfg = model.config();
        let variant = cfg.variant;
        let d = cfg.d_model;
        let rows = if !self.started {
            self.engine.speech_rows(&[cfg.sos()])?
        } else if variant.is_group() {
            self.engine.compose_row(&self.feed)?
        } else {
            self.engine.speech_rows(&self.feed)?
        };
        let n_speech = rows.len() / d;
        self.engine.check_ready(n_speech)?;
        let text = self.engine.text_done()..self.engine.text_target(n_speech);
        let s0 = self.engine.speech_done();
        let h0 = self.engine.cached_extend(text, s0..s0 + n_speech, &rows)?;
        let step_idx = self.forwards;
        self.forwards += 1;
        let last = |h: &[T]| h[h.len() - d..].to_vec();
        let m = self.cfg.m;
        let mut preds = Vec::with_capacity(m);
        let mut logits_all: StepLogits<T> = Vec::with_capacity(m);
        match variant {
            Variant::Ntp | Variant::MtpParallel => {
                let h = last(&h0);
                for k in 0..m {
                    let z = self.engine.head(k, &h)?;
                    preds.push(select_token(&z, &self.cfg, &mut self.rng, step_idx)?);
                    logits_all.push(z);
                }
            }
            Variant::MtpVocalnet => {
                let mut h = h0;
                for k in 0..m {
                    if k > 0 {
                        h = self.engine.module_extend(k, &h)?;
                    }
                    let z = self.engine.head(k, &last(&h))?;
                    preds.push(select_token(&z, &self.cfg, &mut self.rng, step_idx)?);
                    logits_all.push(z);
                }
            }
            Variant::MtpDeepseek => {
                let lt = self.engine.text_len();
                let pad = cfg.speech_pad();
                let mut h = h0;
                for k in 0..m {
                    if k > 0 {
                        let toks = self
                            .engine
                            .last_positions()
                            .iter()
                            .map(|&p| {
                                if p < lt {
                                    Ok(pad)
                                } else {
                                    self.token_at(p - lt + k, &preds)
                                }
                            })
                            .collect::<Result<Vec<_>>>()?;
                        h = self.engine.merge_extend(k, &h, &toks)?;
                    }
                    let z = self.engine.head(k, &last(&h))?;
                    preds.push(select_token(&z, &self.cfg, &mut self.rng, step_idx)?);
                    logits_all.push(z);
                }
            }
            Variant::GroupLinear | Variant::GroupTrans => {
                for z in self.engine.decompose(&last(&h0))? {
                    preds.push(select_token(&z, &self.cfg, &mut self.rng, step_idx)?);
                    logits_all.push(z);
                }
            }
        }
        if let Some(tr) = &mut self.trace {
            tr.push(logits_all);
        }
        let before = self.tokens.len();
        let (n, done) = commit(&mut self.tokens, &preds, &self.cfg, cfg.eos());
        self.feed = self.tokens[before..].to_vec();
        self.finished = done;
        self.started = true;
        Ok(n)
    }

    pub fn report(&self, wall_ms: f64) -> GenerationReport {
        GenerationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tokens: self.tokens.clone(),
            backbone_forwards: self.forwards,
            tokens_per_forward: if self.forwards == 0 {
                0.0
            } else {
                self.tokens.len() as f64 / self.forwards as f64
            },
            stage_ms: self.engine.times,
            wall_ms,
            realized_speedup: None,
        }
    }
}

/// Cached generation from text symbols (BOS is added here).
pub fn generate<T: Scalar>(model: &DecoderModel<T>, text: &[usize], cfg: &DecodeConfig) -> Result<GenerationReport> {
    let start = Instant::now();
    let mut g = Generator::new(model, text.len(), cfg)?;
    g.reveal(text)?;
    while !g.is_finished() {
        g.step()?;
    }
    Ok(g.report(start.elapsed().as_secs_f64() * 1e3))
}

/// [`generate`] that also returns every head's logits at every step.
pub fn generate_traced<T: Scalar>(
    model: &DecoderModel<T>,
    text: &[usize],
    cfg: &DecodeConfig,
) -> Result<(GenerationReport, Vec<StepLogits<T>>)> {
    let start = Instant::now();
    let mut g = Generator::new(model, text.len(), cfg)?;
    g.record_logits();
    g.reveal(text)?;
    while !g.is_finished() {
        g.step()?;
    }
    let report = g.report(start.elapsed().as_secs_f64() * 1e3);
    Ok((report, g.trace.take().unwrap_or_default()))
}

/// Generation that recomputes the whole sequence on a fresh tape at every
/// step; the oracle for the cached engine.
pub fn generate_reference<T: Scalar>(
    model: &DecoderModel<T>,
    text: &[usize],
    cfg: &DecodeConfig,
) -> Result<(Vec<usize>, Vec<StepLogits<T>>)> {
    cfg.validate(model.config())?;
    let mc = model.config();
    let text = with_bos(model, text);
    let lt = text.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    loop {
        let step_idx = trace.len();
        let mut tape = Tape::new();
        let v_llm = model.project_text(&mut tape, &text)?;
        let mut seq = vec![mc.sos()];
        seq.extend_from_slice(&tokens);
        let (n_inputs, speech_part) = if model.variant().is_group() {
            let sos = model.embed_speech(&mut tape, &seq[..1])?;
            let n_groups = tokens.len() / mc.n;
            let part = if n_groups > 0 {
                let groups = model.group_compose(&mut tape, &tokens)?;
                tape.concat_rows(&[sos, groups])?
            } else {
                sos
            };
            (1 + n_groups, part)
        } else {
            (seq.len(), model.embed_speech(&mut tape, &seq)?)
        };
        let layout = SequenceLayout::new(lt, n_inputs)?;
        let vis = build_mask(layout, cfg.mask_mode(), cfg.chunk).to_visibility();
        let h0 = model.backbone_over(&mut tape, v_llm, speech_part, &vis)?;
        let last = lt + n_inputs - 1;
        let mut preds = Vec::new();
        let mut logits_all: StepLogits<T> = Vec::new();
        let mut emit = |tape: &mut Tape<T>, z, preds: &mut Vec<usize>, rng: &mut ChaCha8Rng| -> Result<()> {
            let v = tape.value(z);
            for r in 0..v.rows() {
                let row = v.row(r).to_vec();
                preds.push(select_token(&row, cfg, rng, step_idx)?);
                logits_all.push(row);
            }
            Ok(())
        };
        match model.variant() {
            Variant::Ntp | Variant::MtpParallel => {
                let heads = model.parallel_heads_forward(&mut tape, h0, &[last], cfg.m)?;
                for z in heads {
                    emit(&mut tape, z, &mut preds, &mut rng)?;
                }
            }
            Variant::MtpVocalnet => {
                let states = model.mtp_chain_forward_depth(&mut tape, h0, &vis, cfg.m)?;
                let heads = model.mtp_heads(&mut tape, &states, &[last])?;
                for z in heads {
                    emit(&mut tape, z, &mut preds, &mut rng)?;
                }
            }
            Variant::MtpDeepseek => {
                let mut h = h0;
                for k in 0..cfg.m {
                    if k > 0 {
                        let mut stream = seq.clone();
                        stream.extend_from_slice(&preds);
                        let toks =
                            deepseek_shifted_tokens(lt, &stream, n_inputs, k, mc.speech_pad(), ChainMode::Infer)?;
                        h = model.merge_module_forward(&mut tape, k, h, &toks, &vis)?;
                    }
                    let row = tape.select_rows(h, &[last])?;
                    let z = model.head_logits(&mut tape, k, row)?;
                    emit(&mut tape, z, &mut preds, &mut rng)?;
                }
            }
            Variant::GroupLinear | Variant::GroupTrans => {
                let row = tape.select_rows(h0, &[last])?;
                let z = model.group_decompose(&mut tape, row)?;
                emit(&mut tape, z, &mut preds, &mut rng)?;
            }
        }
        trace.push(logits_all);
        let (_, done) = commit(&mut tokens, &preds, cfg, mc.eos());
        if done {
            return Ok((tokens, trace));
        }
    }
}

/// Chunked generation against text that is revealed incrementally.
///
/// Chunk 0 is the first token; chunk `c ≥ 1` holds tokens
/// `(c−1)·C_s + 2 ..= c·C_s + 1` (1-based), the tokens whose own speech
/// offset sees `c·C_t + 1` text positions.
pub struct StreamingSession<'m, T> {
    gen: Generator<'m, T>,
    yielded: usize,
    n_symbols: usize,
}

impl<'m, T: Scalar> StreamingSession<'m, T> {
    pub fn new(model: &'m DecoderModel<T>, n_text_symbols: usize, cfg: &DecodeConfig) -> Result<Self> {
        if !cfg.streaming {
            return Err(Error::Config("streaming session needs streaming = true".into()));
        }
        Ok(StreamingSession {
            gen: Generator::new(model, n_text_symbols, cfg)?,
            yielded: 0,
            n_symbols: n_text_symbols,
        })
    }

    pub fn reveal(&mut self, symbols: &[usize]) -> Result<()> {
        self.gen.reveal(symbols)
    }

    pub fn revealed_symbols(&self) -> usize {
        self.gen.revealed_symbols()
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn chunks_yielded(&self) -> usize {
        self.yielded
    }

    pub fn generator(&self) -> &Generator<'m, T> {
        &self.gen
    }

    fn chunk_bounds(&self, c: usize) -> (usize, usize) {
        let cs = self.gen.cfg.chunk.speech_chunk;
        if c == 0 {
            (0, 1)
        } else {
            ((c - 1) * cs + 1, c * cs + 1)
        }
    }

    /// Next chunk, `None` once generation ended and every token was handed
    /// out. A step that needs unrevealed text fails with a stall error and
    /// leaves the session unchanged.
    pub fn next_chunk(&mut self) -> Result<Option<Vec<usize>>> {
        let (start, end) = self.chunk_bounds(self.yielded);
        while self.gen.tokens().len() < end && !self.gen.is_finished() {
            self.gen.step()?;
        }
        let toks = self.gen.tokens();
        if start >= toks.len() {
            return Ok(None);
        }
        let chunk = toks[start..end.min(toks.len())].to_vec();
        self.yielded += 1;
        Ok(Some(chunk))
    }
}

/// Harness: reveals `C_t` more text positions after every completed chunk
/// and collects the chunks.
pub fn generate_streaming<T: Scalar>(
    model: &DecoderModel<T>,
    text: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<usize>>> {
    let mut s = StreamingSession::new(model, text.len(), cfg)?;
    let mut chunks = Vec::new();
    loop {
        let c = s.chunks_yielded();
        let allowed = (c * cfg.chunk.text_chunk).min(text.len());
        let have = s.revealed_symbols();
        if allowed > have {
            s.reveal(&text[have..allowed])?;
        }
        match s.next_chunk()? {
            Some(ch) => chunks.push(ch),
            None => return Ok(chunks),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_truncates_at_eos_and_cap() {
        let cfg = DecodeConfig {
            max_speech_tokens: 10,
            ..DecodeConfig::default()
        };
        let mut t = vec![1, 2];
        assert_eq!(commit(&mut t, &[3, 9, 4], &cfg, 9), (2, true));
        assert_eq!(t, vec![1, 2, 3, 9]);
        let mut t = vec![0; 8];
        assert_eq!(commit(&mut t, &[1, 1, 1], &cfg, 9), (2, true));
        assert_eq!(t.len(), 10);
        let ign = DecodeConfig {
            ignore_eos: true,
            ..cfg
        };
        let mut t = vec![];
        assert_eq!(commit(&mut t, &[9, 9], &ign, 9), (2, false));
    }
}
