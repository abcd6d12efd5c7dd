//! Differentiable forward passes on a [`Tape`].

use crate::error::{Error, Result};
use crate::masks::{build_mask, AttnMask, MaskMode, SequenceLayout, Visibility};
use crate::numerics::{Scalar, Tape, Var};

use super::{DecoderModel, LayerParams, Variant};

/// Target value skipped by the cross-entropy.
pub const IGNORE: usize = usize::MAX;

/// Where the merging modules get their shifted tokens from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    /// Ground-truth stream; offsets past its end read PAD.
    Train,
    /// Committed plus freshly predicted tokens; a missing token is an error.
    Infer,
}

/// Per-head logits over the speech rows of one sample, with aligned targets.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `logits[k]` is `rows × V_speech`.
    pub logits: Vec<Var>,
    pub targets: Vec<Vec<usize>>,
    /// Positions run through the backbone (text plus speech).
    pub backbone_len: usize,
}

/// Number of groups covering `len` tokens.
pub fn group_count(len: usize, g: usize) -> usize {
    len.div_ceil(g)
}

/// Tokens fed to merging module `k` (1-based depth) at every position of a
/// `[text | speech]` sequence: PAD on text rows, `speech_seq[t + k]` on
/// speech offset `t`.
pub fn deepseek_shifted_tokens(
    text_len: usize,
    speech_seq: &[usize],
    n_inputs: usize,
    k: usize,
    pad: usize,
    mode: ChainMode,
) -> Result<Vec<usize>> {
    let mut out = vec![pad; text_len];
    for t in 0..n_inputs {
        match speech_seq.get(t + k) {
            Some(&tok) => out.push(tok),
            None if mode == ChainMode::Train => out.push(pad),
            None => {
                return Err(Error::Contract(format!(
                    "depth {k} needs the token at speech offset {} but only {} are known",
                    t + k,
                    speech_seq.len()
                )))
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> DecoderModel<T> {
    fn bind(&self, tape: &mut Tape<T>, id: usize) -> Var {
        tape.param(id, self.p(id), true)
    }

    /// Pre-norm decoder layer: attention then SwiGLU, both residual.
    pub(crate) fn layer_forward(
        &self,
        tape: &mut Tape<T>,
        lp: &LayerParams,
        x: Var,
        positions: Option<&[usize]>,
        visible: &dyn Fn(usize, usize) -> bool,
    ) -> Result<Var> {
        let nh = self.config.n_heads;
        let g = self.bind(tape, lp.attn_norm);
        let xn = tape.rms_norm(x, g)?;
        let wq = self.bind(tape, lp.wq);
        let wk = self.bind(tape, lp.wk);
        let wv = self.bind(tape, lp.wv);
        let mut q = tape.matmul(xn, wq)?;
        let mut k = tape.matmul(xn, wk)?;
        let v = tape.matmul(xn, wv)?;
        if let Some(pos) = positions {
            q = tape.rotary(q, pos, nh)?;
            k = tape.rotary(k, pos, nh)?;
        }
        let a = tape.attention(q, k, v, nh, visible)?;
        let wo = self.bind(tape, lp.wo);
        let o = tape.matmul(a, wo)?;
        let x1 = tape.add(x, o)?;
        let g2 = self.bind(tape, lp.ffn_norm);
        let xn2 = tape.rms_norm(x1, g2)?;
        let wg = self.bind(tape, lp.w_gate);
        let wu = self.bind(tape, lp.w_up);
        let gate = tape.matmul(xn2, wg)?;
        let up = tape.matmul(xn2, wu)?;
        let h = tape.swiglu(gate, up)?;
        let wd = self.bind(tape, lp.w_down);
        let f = tape.matmul(h, wd)?;
        tape.add(x1, f)
    }

    /// `v_LLM` for `text` (BOS already prepended) through the causal projector.
    pub fn project_text(&self, tape: &mut Tape<T>, text: &[usize]) -> Result<Var> {
        if text.is_empty() {
            return Err(Error::Contract("text must contain at least BOS".into()));
        }
        let table = self.bind(tape, self.text_embed);
        let mut x = tape.gather_rows(table, text)?;
        let positions: Vec<usize> = (0..text.len()).collect();
        for lp in &self.projector {
            x = self.layer_forward(tape, lp, x, Some(&positions), &|i, j| j <= i)?;
        }
        Ok(x)
    }

    pub fn embed_speech(&self, tape: &mut Tape<T>, tokens: &[usize]) -> Result<Var> {
        let table = self.bind(tape, self.speech_embed);
        tape.gather_rows(table, tokens)
    }

    /// Backbone over `[v_LLM | speech_part]` rows under `vis`.
    pub fn backbone_over(&self, tape: &mut Tape<T>, v_llm: Var, speech_part: Var, vis: &Visibility) -> Result<Var> {
        let n = tape.value(v_llm).rows() + tape.value(speech_part).rows();
        if vis.size() != n {
            return Err(Error::dim("backbone_forward", &[vis.size()], &[n]));
        }
        let mut x = tape.concat_rows(&[v_llm, speech_part])?;
        let positions: Vec<usize> = (0..n).collect();
        for lp in &self.backbone {
            x = self.layer_forward(tape, lp, x, Some(&positions), &|i, j| vis.get(i, j))?;
        }
        Ok(x)
    }

    /// `h⁰` over all positions. `speech_inputs` must start with SOS.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape<T>,
        v_llm: Var,
        speech_inputs: &[usize],
        mask: &AttnMask,
    ) -> Result<Var> {
        if speech_inputs.first() != Some(&self.config.sos()) {
            return Err(Error::Contract("speech inputs must begin with SOS".into()));
        }
        let s = self.embed_speech(tape, speech_inputs)?;
        self.backbone_over(tape, v_llm, s, &mask.to_visibility())
    }

    /// Output head `k` on every row of `h`.
    pub fn head_logits(&self, tape: &mut Tape<T>, k: usize, h: Var) -> Result<Var> {
        let hp = self.heads.get(k).ok_or(Error::Index {
            what: "output head",
            index: k,
            bound: self.heads.len(),
        })?;
        let g = self.bind(tape, hp.norm);
        let hn = tape.rms_norm(h, g)?;
        let w = self.bind(tape, hp.weight);
        let b = self.bind(tape, hp.bias);
        let z = tape.matmul(hn, w)?;
        tape.add_bias(z, b)
    }

    /// `[h⁰, …, h^{depth-1}]` through the sequential modules.
    pub fn mtp_chain_forward_depth(
        &self,
        tape: &mut Tape<T>,
        h0: Var,
        vis: &Visibility,
        depth: usize,
    ) -> Result<Vec<Var>> {
        self.require(self.variant() == Variant::MtpVocalnet, "mtp_vocalnet")?;
        if depth == 0 || depth > self.config.n {
            return Err(Error::Config(format!(
                "chain depth {depth} outside 1..={}",
                self.config.n
            )));
        }
        let n = tape.value(h0).rows();
        let positions: Vec<usize> = (0..n).collect();
        let mut states = vec![h0];
        for lp in &self.mtp_layers[..depth - 1] {
            let prev = *states.last().expect("non-empty");
            states.push(self.layer_forward(tape, lp, prev, Some(&positions), &|i, j| vis.get(i, j))?);
        }
        Ok(states)
    }

    pub fn mtp_chain_forward(&self, tape: &mut Tape<T>, h0: Var, vis: &Visibility) -> Result<Vec<Var>> {
        self.mtp_chain_forward_depth(tape, h0, vis, self.config.n)
    }

    /// Head `k` applied to `states[k]` at the given rows.
    pub fn mtp_heads(&self, tape: &mut Tape<T>, states: &[Var], rows: &[usize]) -> Result<Vec<Var>> {
        states
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let h = tape.select_rows(s, rows)?;
                self.head_logits(tape, k, h)
            })
            .collect()
    }

    /// All heads read the same `h⁰` rows.
    pub fn parallel_heads_forward(
        &self,
        tape: &mut Tape<T>,
        h0: Var,
        rows: &[usize],
        depth: usize,
    ) -> Result<Vec<Var>> {
        self.require(
            matches!(self.variant(), Variant::MtpParallel | Variant::Ntp),
            "mtp_parallel",
        )?;
        let h = tape.select_rows(h0, rows)?;
        (0..depth).map(|k| self.head_logits(tape, k, h)).collect()
    }

    /// One merging module: `layer(merge([rms(h_prev) | rms(embed(tokens))]))`.
    pub(crate) fn merge_module_forward(
        &self,
        tape: &mut Tape<T>,
        k: usize,
        h_prev: Var,
        tokens: &[usize],
        vis: &Visibility,
    ) -> Result<Var> {
        let mp = &self.merge_modules[k - 1];
        let n = tape.value(h_prev).rows();
        if tokens.len() != n {
            return Err(Error::dim("deepseek_chain_forward", &[n], &[tokens.len()]));
        }
        let gh = self.bind(tape, mp.norm_hidden);
        let hn = tape.rms_norm(h_prev, gh)?;
        let e = self.embed_speech(tape, tokens)?;
        let ge = self.bind(tape, mp.norm_embed);
        let en = tape.rms_norm(e, ge)?;
        let cat = tape.concat_cols(&[hn, en])?;
        let wm = self.bind(tape, mp.merge);
        let x = tape.matmul(cat, wm)?;
        let positions: Vec<usize> = (0..n).collect();
        self.layer_forward(tape, &mp.layer, x, Some(&positions), &|i, j| vis.get(i, j))
    }

    /// `[h⁰, …, h^{depth-1}]` through the ground-truth-merging modules.
    /// `speech_seq` starts with SOS; the first `n_inputs` entries are the
    /// backbone's speech inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn deepseek_chain_forward(
        &self,
        tape: &mut Tape<T>,
        h0: Var,
        text_len: usize,
        speech_seq: &[usize],
        n_inputs: usize,
        vis: &Visibility,
        depth: usize,
        mode: ChainMode,
    ) -> Result<Vec<Var>> {
        self.require(self.variant() == Variant::MtpDeepseek, "mtp_deepseek")?;
        if depth == 0 || depth > self.config.n {
            return Err(Error::Config(format!(
                "chain depth {depth} outside 1..={}",
                self.config.n
            )));
        }
        let mut states = vec![h0];
        for k in 1..depth {
            let toks = deepseek_shifted_tokens(text_len, speech_seq, n_inputs, k, self.config.speech_pad(), mode)?;
            let prev = *states.last().expect("non-empty");
            states.push(self.merge_module_forward(tape, k, prev, &toks, vis)?);
        }
        Ok(states)
    }

    /// Composed embeddings of consecutive `g`-token groups; the last group
    /// is PAD-filled.
    pub fn group_compose(&self, tape: &mut Tape<T>, tokens: &[usize]) -> Result<Var> {
        let gp = self.group.as_ref().ok_or_else(|| Error::VariantMismatch {
            expected: "group_linear or group_trans",
            actual: self.variant().to_string(),
        })?;
        let g = self.config.n;
        let n_groups = group_count(tokens.len(), g);
        let mut ids = tokens.to_vec();
        ids.resize(n_groups * g, self.config.speech_pad());
        let e = self.embed_speech(tape, &ids)?;
        let d = self.config.d_model;
        let flat = tape.reshape(e, &[n_groups, g * d])?;
        let w = self.bind(tape, gp.compose);
        tape.matmul(flat, w)
    }

    /// `G × d` group states to `G·g × V` logits; row `i·g + j` is slot `j`
    /// of group `i`.
    pub fn group_decompose(&self, tape: &mut Tape<T>, group_hidden: Var) -> Result<Var> {
        let gp = self.group.as_ref().ok_or_else(|| Error::VariantMismatch {
            expected: "group_linear or group_trans",
            actual: self.variant().to_string(),
        })?;
        let g = self.config.n;
        let n_groups = tape.value(group_hidden).rows();
        let v = self.config.speech_vocab;
        match gp.queries {
            None => {
                let z = self.head_logits(tape, 0, group_hidden)?;
                tape.reshape(z, &[n_groups * g, v])
            }
            Some(qid) => {
                let queries = self.bind(tape, qid);
                let mut parts = Vec::with_capacity(2 * n_groups);
                for i in 0..n_groups {
                    parts.push(tape.select_rows(group_hidden, &[i])?);
                    parts.push(queries);
                }
                let mut x = tape.concat_rows(&parts)?;
                let block = g + 1;
                for lp in &gp.decoder {
                    x = self.layer_forward(tape, lp, x, None, &|i, j| i / block == j / block)?;
                }
                let rows: Vec<usize> = (0..n_groups)
                    .flat_map(|i| (1..=g).map(move |j| i * block + j))
                    .collect();
                let q = tape.select_rows(x, &rows)?;
                self.head_logits(tape, 0, q)
            }
        }
    }

    /// Teacher-forced forward of one sample.
    ///
    /// `text` starts with BOS. `speech_seq` is `[SOS, s1, s2, …]`; the first
    /// `n_inputs` backbone speech positions are consumed (for group variants,
    /// SOS plus `n_inputs - 1` composed groups). Heads `0..depth` are
    /// evaluated at every speech row.
    pub fn forward_sample(
        &self,
        tape: &mut Tape<T>,
        text: &[usize],
        speech_seq: &[usize],
        n_inputs: usize,
        mode: MaskMode,
        depth: usize,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if speech_seq.first() != Some(&cfg.sos()) {
            return Err(Error::Contract("speech sequence must begin with SOS".into()));
        }
        if n_inputs == 0 {
            return Err(Error::Contract("at least the SOS position is required".into()));
        }
        let lt = text.len();
        let layout = SequenceLayout::new(lt, n_inputs)?;
        let vis = build_mask(layout, mode, cfg.chunk).to_visibility();
        let v_llm = self.project_text(tape, text)?;
        let rows: Vec<usize> = (lt..lt + n_inputs).collect();

        if self.variant().is_group() {
            if depth != 1 {
                return Err(Error::Config("group variants have a single decomposition head".into()));
            }
            let g = cfg.n;
            let stream = &speech_seq[1..];
            let need = (n_inputs - 1) * g;
            if stream.len() < need {
                return Err(Error::Contract(format!(
                    "{n_inputs} group positions need {need} tokens, got {}",
                    stream.len()
                )));
            }
            let sos = self.embed_speech(tape, &speech_seq[..1])?;
            let speech_part = if n_inputs > 1 {
                let groups = self.group_compose(tape, &stream[..need])?;
                tape.concat_rows(&[sos, groups])?
            } else {
                sos
            };
            let h = self.backbone_over(tape, v_llm, speech_part, &vis)?;
            let hs = tape.select_rows(h, &rows)?;
            let logits = self.group_decompose(tape, hs)?;
            let targets = (0..n_inputs * g)
                .map(|r| stream.get(r).copied().unwrap_or(IGNORE))
                .collect();
            return Ok(ForwardOutput {
                logits: vec![logits],
                targets: vec![targets],
                backbone_len: lt + n_inputs,
            });
        }

        if speech_seq.len() < n_inputs {
            return Err(Error::Contract("fewer speech tokens than inputs".into()));
        }
        if depth == 0 || depth > cfg.n_output_heads() {
            return Err(Error::Config(format!(
                "depth {depth} outside 1..={}",
                cfg.n_output_heads()
            )));
        }
        let s = self.embed_speech(tape, &speech_seq[..n_inputs])?;
        let h0 = self.backbone_over(tape, v_llm, s, &vis)?;
        let logits = match self.variant() {
            Variant::Ntp | Variant::MtpParallel => self.parallel_heads_forward(tape, h0, &rows, depth)?,
            Variant::MtpVocalnet => {
                let states = self.mtp_chain_forward_depth(tape, h0, &vis, depth)?;
                self.mtp_heads(tape, &states, &rows)?
            }
            Variant::MtpDeepseek => {
                let states =
                    self.deepseek_chain_forward(tape, h0, lt, speech_seq, n_inputs, &vis, depth, ChainMode::Train)?;
                self.mtp_heads(tape, &states, &rows)?
            }
            Variant::GroupLinear | Variant::GroupTrans => unreachable!("handled above"),
        };
        let targets = (0..depth)
            .map(|k| {
                (0..n_inputs)
                    .map(|t| speech_seq.get(t + k + 1).copied().unwrap_or(IGNORE))
                    .collect()
            })
            .collect();
        Ok(ForwardOutput {
            logits,
            targets,
            backbone_len: lt + n_inputs,
        })
    }
}
