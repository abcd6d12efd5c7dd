//! Incremental forward over a growing `[text | speech]` sequence.
//!
//! Every decoder layer keeps keys and values indexed by absolute position.
//! The arithmetic mirrors the tape forward kernel for kernel, so cached and
//! full-recompute logits agree to rounding.

use std::ops::Range;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::masks::{visible_text_budget, ChunkSchedule, MaskMode};
use crate::model::{DecoderModel, LayerParams, Variant};
use crate::numerics::kernels;
use crate::numerics::Scalar;

use super::StageTimes;

#[derive(Debug, Clone)]
struct LayerCache<T> {
    k: Vec<T>,
    v: Vec<T>,
    filled: Vec<bool>,
    d: usize,
}

impl<T: Scalar> LayerCache<T> {
    fn new(d: usize) -> Self {
        LayerCache {
            k: Vec::new(),
            v: Vec::new(),
            filled: Vec::new(),
            d,
        }
    }

    fn ensure(&mut self, n: usize) {
        if self.filled.len() < n {
            self.k.resize(n * self.d, T::zero());
            self.v.resize(n * self.d, T::zero());
            self.filled.resize(n, false);
        }
    }
}

/// One decoder layer over `rows` new positions, reading and extending `cache`.
fn layer_cached<T: Scalar>(
    model: &DecoderModel<T>,
    lp: &LayerParams,
    cache: &mut LayerCache<T>,
    x: &[T],
    positions: &[usize],
    rotary: bool,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Result<Vec<T>> {
    let cfg = model.config();
    let (d, nh, dff) = (cfg.d_model, cfg.n_heads, cfg.d_ff);
    let rows = positions.len();
    let (xn, _) = kernels::rms_norm_forward(x, model.p(lp.attn_norm).data(), d);
    let mut q = kernels::matmul(&xn, model.p(lp.wq).data(), rows, d, d);
    let mut k = kernels::matmul(&xn, model.p(lp.wk).data(), rows, d, d);
    let v = kernels::matmul(&xn, model.p(lp.wv).data(), rows, d, d);
    if rotary {
        kernels::rotary_in_place(&mut q, positions, nh, d / nh, false);
        kernels::rotary_in_place(&mut k, positions, nh, d / nh, false);
    }
    let nk = positions.iter().max().map_or(0, |&p| p + 1);
    cache.ensure(nk);
    for (r, &p) in positions.iter().enumerate() {
        cache.k[p * d..(p + 1) * d].copy_from_slice(&k[r * d..(r + 1) * d]);
        cache.v[p * d..(p + 1) * d].copy_from_slice(&v[r * d..(r + 1) * d]);
        cache.filled[p] = true;
    }
    for &p in positions {
        if let Some(j) = (0..nk).find(|&j| visible(p, j) && !cache.filled[j]) {
            return Err(Error::Contract(format!(
                "position {p} attends to position {j}, which is not cached"
            )));
        }
    }
    let (a, _) = kernels::attention_forward(&q, &cache.k[..nk * d], &cache.v[..nk * d], rows, nk, nh, &|i, j| {
        visible(positions[i], j)
    })?;
    let o = kernels::matmul(&a, model.p(lp.wo).data(), rows, d, d);
    let x1: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
    let (xn2, _) = kernels::rms_norm_forward(&x1, model.p(lp.ffn_norm).data(), d);
    let gate = kernels::matmul(&xn2, model.p(lp.w_gate).data(), rows, d, dff);
    let up = kernels::matmul(&xn2, model.p(lp.w_up).data(), rows, d, dff);
    let h = kernels::swiglu_forward(&gate, &up);
    let f = kernels::matmul(&h, model.p(lp.w_down).data(), rows, dff, d);
    Ok(x1.iter().zip(&f).map(|(&a, &b)| a + b).collect())
}

/// Whether absolute position `i` may read absolute position `j`; agrees
/// with the mask builders entry for entry.
pub fn position_visible(text_len: usize, mode: MaskMode, sched: ChunkSchedule, i: usize, j: usize) -> bool {
    let lt = text_len;
    if i < lt {
        match mode {
            MaskMode::NonStreaming => j < lt,
            MaskMode::Streaming => j <= i,
        }
    } else if j >= lt {
        j <= i
    } else {
        match mode {
            MaskMode::NonStreaming => true,
            MaskMode::Streaming => j < visible_text_budget(sched, i - lt + 1).min(lt),
        }
    }
}

/// Text positions (count) that speech offset `o` (1-based) reads.
pub fn text_needed(text_len: usize, mode: MaskMode, sched: ChunkSchedule, o: usize) -> usize {
    match mode {
        MaskMode::NonStreaming => text_len,
        MaskMode::Streaming => visible_text_budget(sched, o).min(text_len),
    }
}

/// Incremental state for one prompt.
pub struct Engine<'m, T> {
    model: &'m DecoderModel<T>,
    text_len: usize,
    mode: MaskMode,
    sched: ChunkSchedule,
    text: Vec<usize>,
    text_done: usize,
    speech_done: usize,
    projector: Vec<LayerCache<T>>,
    backbone: Vec<LayerCache<T>>,
    modules: Vec<LayerCache<T>>,
    last_positions: Vec<usize>,
    pub times: StageTimes,
}

impl<'m, T: Scalar> Engine<'m, T> {
    /// `text_len` counts BOS; text tokens are supplied through [`Engine::reveal`].
    pub fn new(model: &'m DecoderModel<T>, text_len: usize, mode: MaskMode, sched: ChunkSchedule) -> Result<Self> {
        if text_len == 0 {
            return Err(Error::Config("text must contain at least BOS".into()));
        }
        let cfg = model.config();
        let d = cfg.d_model;
        let n_modules = match cfg.variant {
            Variant::MtpVocalnet | Variant::MtpDeepseek => cfg.n - 1,
            _ => 0,
        };
        Ok(Engine {
            model,
            text_len,
            mode,
            sched,
            text: Vec::with_capacity(text_len),
            text_done: 0,
            speech_done: 0,
            projector: (0..cfg.n_projector_layers).map(|_| LayerCache::new(d)).collect(),
            backbone: (0..cfg.n_backbone_layers).map(|_| LayerCache::new(d)).collect(),
            modules: (0..n_modules).map(|_| LayerCache::new(d)).collect(),
            last_positions: Vec::new(),
            times: StageTimes::default(),
        })
    }

    pub fn model(&self) -> &'m DecoderModel<T> {
        self.model
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn revealed(&self) -> usize {
        self.text.len()
    }

    pub fn text_done(&self) -> usize {
        self.text_done
    }

    pub fn speech_done(&self) -> usize {
        self.speech_done
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn schedule(&self) -> ChunkSchedule {
        self.sched
    }

    /// Appends revealed text tokens; never beyond `text_len`.
    pub fn reveal(&mut self, tokens: &[usize]) -> Result<()> {
        if self.text.len() + tokens.len() > self.text_len {
            return Err(Error::Contract(format!(
                "revealing {} tokens overflows the declared text length {}",
                tokens.len(),
                self.text_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.model.config().text_vocab) {
            return Err(Error::Index {
                what: "text vocabulary",
                index: t,
                bound: self.model.config().text_vocab,
            });
        }
        self.text.extend_from_slice(tokens);
        Ok(())
    }

    /// Text positions the next `n_speech` speech positions need processed.
    pub fn text_target(&self, n_speech: usize) -> usize {
        if n_speech == 0 {
            return self.text_done;
        }
        let last = self.speech_done + n_speech;
        text_needed(self.text_len, self.mode, self.sched, last).max(self.text_done)
    }

    /// Fails with a stall if the next `n_speech` speech positions would read
    /// text that has not been revealed.
    pub fn check_ready(&self, n_speech: usize) -> Result<()> {
        let need = self.text_target(n_speech);
        if need > self.text.len() {
            return Err(Error::Stall {
                needed: need,
                revealed: self.text.len(),
            });
        }
        Ok(())
    }

    /// Input embedding rows for speech tokens.
    pub fn speech_rows(&self, tokens: &[usize]) -> Result<Vec<T>> {
        let table = self.model.p(self.model.speech_embed);
        let v = table.rows();
        let mut out = Vec::with_capacity(tokens.len() * table.cols());
        for &t in tokens {
            if t >= v {
                return Err(Error::Index {
                    what: "speech vocabulary",
                    index: t,
                    bound: v,
                });
            }
            out.extend_from_slice(table.row(t));
        }
        Ok(out)
    }

    /// Runs text positions `text` and speech offsets `speech` (0-based, SOS
    /// is 0) through projector and backbone. Both ranges must continue
    /// exactly where the previous call stopped. Returns `h⁰` rows in
    /// `[text | speech]` order.
    pub fn cached_extend(&mut self, text: Range<usize>, speech: Range<usize>, speech_rows: &[T]) -> Result<Vec<T>> {
        let d = self.model.config().d_model;
        if text.start != self.text_done || speech.start != self.speech_done {
            return Err(Error::Contract(format!(
                "extension must continue at text {} / speech {}, got {} / {}",
                self.text_done, self.speech_done, text.start, speech.start
            )));
        }
        if text.end > self.text_len {
            return Err(Error::Index {
                what: "text position",
                index: text.end - 1,
                bound: self.text_len,
            });
        }
        if text.end > self.text.len() {
            return Err(Error::Stall {
                needed: text.end,
                revealed: self.text.len(),
            });
        }
        if speech_rows.len() != speech.len() * d {
            return Err(Error::dim("cached_extend", &[speech.len(), d], &[speech_rows.len()]));
        }
        if !speech.is_empty() {
            let need = text_needed(self.text_len, self.mode, self.sched, speech.end);
            if need > text.end {
                return Err(Error::Stall {
                    needed: need,
                    revealed: text.end,
                });
            }
        }
        if text.is_empty() && speech.is_empty() {
            self.last_positions.clear();
            return Ok(Vec::new());
        }
        let lt = self.text_len;
        let mut x = Vec::with_capacity((text.len() + speech.len()) * d);
        if !text.is_empty() {
            let t0 = Instant::now();
            let table = self.model.p(self.model.text_embed);
            let mut v = Vec::with_capacity(text.len() * d);
            for &tok in &self.text[text.clone()] {
                v.extend_from_slice(table.row(tok));
            }
            let positions: Vec<usize> = text.clone().collect();
            for (lp, cache) in self.model.projector.iter().zip(&mut self.projector) {
                v = layer_cached(self.model, lp, cache, &v, &positions, true, &|i, j| j <= i)?;
            }
            x.extend_from_slice(&v);
            self.times.projector_ms += t0.elapsed().as_secs_f64() * 1e3;
        }
        x.extend_from_slice(speech_rows);
        let positions: Vec<usize> = text.clone().chain(speech.clone().map(|o| lt + o)).collect();
        let t0 = Instant::now();
        let (mode, sched) = (self.mode, self.sched);
        let vis = move |i: usize, j: usize| position_visible(lt, mode, sched, i, j);
        for (lp, cache) in self.model.backbone.iter().zip(&mut self.backbone) {
            x = layer_cached(self.model, lp, cache, &x, &positions, true, &vis)?;
        }
        self.times.backbone_ms += t0.elapsed().as_secs_f64() * 1e3;
        self.text_done = text.end;
        self.speech_done = speech.end;
        self.last_positions = positions;
        Ok(x)
    }

    /// Rows produced by the last [`Engine::cached_extend`].
    pub fn last_positions(&self) -> &[usize] {
        &self.last_positions
    }

    /// Sequential module `k` (1-based) over the rows of the last extension.
    pub fn module_extend(&mut self, k: usize, h_prev: &[T]) -> Result<Vec<T>> {
        let t0 = Instant::now();
        let model = self.model;
        let lp = model
            .mtp_layers
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("no sequential module at depth {k}")))?;
        let (lt, mode, sched) = (self.text_len, self.mode, self.sched);
        let vis = move |i: usize, j: usize| position_visible(lt, mode, sched, i, j);
        let out = layer_cached(
            model,
            lp,
            &mut self.modules[k - 1],
            h_prev,
            &self.last_positions,
            true,
            &vis,
        )?;
        self.times.mtp_modules_ms += t0.elapsed().as_secs_f64() * 1e3;
        Ok(out)
    }

    /// Merging module `k` (1-based) over the rows of the last extension;
    /// `tokens[r]` is the token merged into row `r`.
    pub fn merge_extend(&mut self, k: usize, h_prev: &[T], tokens: &[usize]) -> Result<Vec<T>> {
        let t0 = Instant::now();
        let model = self.model;
        let d = model.config().d_model;
        let mp = model
            .merge_modules
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("no merging module at depth {k}")))?;
        let rows = self.last_positions.len();
        if tokens.len() != rows {
            return Err(Error::dim("merge_extend", &[rows], &[tokens.len()]));
        }
        let (hn, _) = kernels::rms_norm_forward(h_prev, model.p(mp.norm_hidden).data(), d);
        let e = self.speech_rows(tokens)?;
        let (en, _) = kernels::rms_norm_forward(&e, model.p(mp.norm_embed).data(), d);
        let mut cat = Vec::with_capacity(rows * 2 * d);
        for r in 0..rows {
            cat.extend_from_slice(&hn[r * d..(r + 1) * d]);
            cat.extend_from_slice(&en[r * d..(r + 1) * d]);
        }
        let x = kernels::matmul(&cat, model.p(mp.merge).data(), rows, 2 * d, d);
        let (lt, mode, sched) = (self.text_len, self.mode, self.sched);
        let vis = move |i: usize, j: usize| position_visible(lt, mode, sched, i, j);
        let out = layer_cached(
            model,
            &mp.layer,
            &mut self.modules[k - 1],
            &x,
            &self.last_positions,
            true,
            &vis,
        )?;
        self.times.mtp_modules_ms += t0.elapsed().as_secs_f64() * 1e3;
        Ok(out)
    }

    /// Output head `k` on one hidden row.
    pub fn head(&mut self, k: usize, h: &[T]) -> Result<Vec<T>> {
        let t0 = Instant::now();
        let out = head_row(self.model, k, h)?;
        self.times.heads_ms += t0.elapsed().as_secs_f64() * 1e3;
        Ok(out)
    }

    /// Composed input row for one full group of tokens.
    pub fn compose_row(&mut self, group: &[usize]) -> Result<Vec<T>> {
        let t0 = Instant::now();
        let model = self.model;
        let gp = model.group.as_ref().ok_or_else(|| Error::VariantMismatch {
            expected: "group_linear or group_trans",
            actual: model.variant().to_string(),
        })?;
        let g = model.config().n;
        let d = model.config().d_model;
        let mut ids = group.to_vec();
        ids.resize(g, model.config().speech_pad());
        let e = self.speech_rows(&ids)?;
        let out = kernels::matmul(&e, model.p(gp.compose).data(), 1, g * d, d);
        self.times.backbone_ms += t0.elapsed().as_secs_f64() * 1e3;
        Ok(out)
    }

    /// `g` logit rows decomposed from one group state.
    pub fn decompose(&mut self, h: &[T]) -> Result<Vec<Vec<T>>> {
        let t0 = Instant::now();
        let out = decompose_row(self.model, h)?;
        self.times.heads_ms += t0.elapsed().as_secs_f64() * 1e3;
        Ok(out)
    }
}

pub(crate) fn head_row<T: Scalar>(model: &DecoderModel<T>, k: usize, h: &[T]) -> Result<Vec<T>> {
    let hp = model.heads.get(k).ok_or(Error::Index {
        what: "output head",
        index: k,
        bound: model.heads.len(),
    })?;
    let d = model.config().d_model;
    let w = model.p(hp.weight);
    let out_dim = w.cols();
    let (hn, _) = kernels::rms_norm_forward(h, model.p(hp.norm).data(), d);
    let rows = h.len() / d;
    let z = kernels::matmul(&hn, w.data(), rows, d, out_dim);
    let b = model.p(hp.bias).data();
    Ok(z.chunks(out_dim)
        .flat_map(|row| row.iter().zip(b).map(|(&a, &c)| a + c))
        .collect())
}

pub(crate) fn decompose_row<T: Scalar>(model: &DecoderModel<T>, h: &[T]) -> Result<Vec<Vec<T>>> {
    let gp = model.group.as_ref().ok_or_else(|| Error::VariantMismatch {
        expected: "group_linear or group_trans",
        actual: model.variant().to_string(),
    })?;
    let cfg = model.config();
    let (g, v, d) = (cfg.n, cfg.speech_vocab, cfg.d_model);
    let flat = match gp.queries {
        None => head_row(model, 0, h)?,
        Some(qid) => {
            let mut x = Vec::with_capacity((g + 1) * d);
            x.extend_from_slice(h);
            x.extend_from_slice(model.p(qid).data());
            let positions: Vec<usize> = (0..=g).collect();
            for lp in &gp.decoder {
                let mut cache = LayerCache::new(d);
                x = layer_cached(model, lp, &mut cache, &x, &positions, false, &|_, _| true)?;
            }
            head_row(model, 0, &x[d..])?
        }
    };
    Ok(flat.chunks(v).map(|c| c.to_vec()).collect())
}
