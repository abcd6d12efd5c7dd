//! The speech decoder: text projector, backbone and the prediction
//! machinery of each variant.

pub mod checkpoint;
mod forward;

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::ChunkSchedule;
use crate::numerics::{Scalar, Tensor};
use crate::synthdata::{mix_seed, SynthGrammar};

pub use checkpoint::{load_checkpoint, read_checkpoint_bytes, save_checkpoint, write_checkpoint_bytes};
pub use forward::{deepseek_shifted_tokens, group_count, ChainMode, ForwardOutput, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ntp,
    GroupLinear,
    GroupTrans,
    MtpParallel,
    MtpDeepseek,
    MtpVocalnet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ntp,
        Variant::GroupLinear,
        Variant::GroupTrans,
        Variant::MtpParallel,
        Variant::MtpDeepseek,
        Variant::MtpVocalnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ntp => "ntp",
            Variant::GroupLinear => "group_linear",
            Variant::GroupTrans => "group_trans",
            Variant::MtpParallel => "mtp_parallel",
            Variant::MtpDeepseek => "mtp_deepseek",
            Variant::MtpVocalnet => "mtp_vocalnet",
        }
    }

    pub fn is_group(self) -> bool {
        matches!(self, Variant::GroupLinear | Variant::GroupTrans)
    }

    pub fn is_mtp(self) -> bool {
        matches!(self, Variant::MtpParallel | Variant::MtpDeepseek | Variant::MtpVocalnet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    Normal,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub speech_vocab: usize,
    pub text_vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_backbone_layers: usize,
    pub n_projector_layers: usize,
    pub d_ff: usize,
    pub variant: Variant,
    /// Tokens predicted per step (MTP variants) or group size (group variants).
    pub n: usize,
    pub lambda: f64,
    /// Probability that a training sample uses the streaming mask.
    pub mask_mode_mix: f64,
    pub chunk: ChunkSchedule,
    pub head_init: HeadInit,
    /// Depth of the group-transformer decomposition.
    pub group_decoder_layers: usize,
}

impl ModelConfig {
    /// Desk-scale defaults sized for the given grammar.
    pub fn new(grammar: &SynthGrammar, variant: Variant, n: usize) -> Self {
        ModelConfig {
            speech_vocab: grammar.speech_vocab(),
            text_vocab: grammar.text_vocab(),
            d_model: 128,
            n_heads: 4,
            n_backbone_layers: 4,
            n_projector_layers: 2,
            d_ff: 512,
            variant,
            n: if variant == Variant::Ntp { 1 } else { n },
            lambda: 0.5,
            mask_mode_mix: 0.5,
            chunk: ChunkSchedule::default(),
            head_init: HeadInit::Normal,
            group_decoder_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if self.variant == Variant::Ntp && self.n != 1 {
            return fail("the ntp variant predicts exactly one token per step".into());
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return fail(format!("lambda must lie in (0,1), got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.mask_mode_mix) {
            return fail(format!("mask_mode_mix must lie in [0,1], got {}", self.mask_mode_mix));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return fail("head dimension must be even for rotary encoding".into());
        }
        if self.speech_vocab < 4 || self.text_vocab < 3 {
            return fail("vocabularies too small for the special tokens".into());
        }
        ChunkSchedule::new(self.chunk.speech_chunk, self.chunk.text_chunk)?;
        Ok(())
    }

    pub fn sos(&self) -> usize {
        self.speech_vocab - 3
    }

    pub fn eos(&self) -> usize {
        self.speech_vocab - 2
    }

    pub fn speech_pad(&self) -> usize {
        self.speech_vocab - 1
    }

    pub fn bos(&self) -> usize {
        self.text_vocab - 2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of output heads.
    pub fn n_output_heads(&self) -> usize {
        if self.variant.is_group() {
            1
        } else {
            self.n
        }
    }

    /// Canonical JSON (sorted keys).
    pub fn to_canonical_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }
}

/// Parameter slots of one pre-norm decoder layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// RMS normalization followed by a biased linear map to the vocabulary.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub norm: usize,
    pub weight: usize,
    pub bias: usize,
}

/// One ground-truth-merging module.
#[derive(Debug, Clone)]
pub struct MergeModuleParams {
    pub norm_hidden: usize,
    pub norm_embed: usize,
    pub merge: usize,
    pub layer: LayerParams,
}

#[derive(Debug, Clone)]
pub struct GroupParams {
    pub compose: usize,
    pub queries: Option<usize>,
    pub decoder: Vec<LayerParams>,
}

/// Ordered name → tensor registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: String, t: Tensor<T>) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        self.entries.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].0
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.entries[id].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.entries[i].1)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Mutable `(name, tensor)` pairs in registry order.
    pub fn named_mut(&mut self) -> Vec<(&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
    /// Stacked `I/g` blocks: mean of the group embeddings.
    GroupMean(usize),
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

struct Builder<T> {
    store: ParamStore<T>,
    seed: u64,
    /// Allocate zeros only; the caller overwrites every value.
    zeroed: bool,
}

impl<T: Scalar> Builder<T> {
    /// Every parameter draws from its own name-derived stream, so models of
    /// different variants built from one seed share identical values for
    /// identically named parameters.
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let numel: usize = shape.iter().product();
        let init = if self.zeroed { Init::Zeros } else { init };
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::Normal => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, name_hash(&name)));
                let dist = Normal::new(0.0, 0.02).expect("valid normal");
                (0..numel).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect()
            }
            Init::GroupMean(g) => {
                let d = shape[1];
                let w = T::from_f64_lossy(1.0 / g as f64);
                let mut data = vec![T::zero(); numel];
                for j in 0..g {
                    for i in 0..d {
                        data[(j * d + i) * d + i] = w;
                    }
                }
                data
            }
        };
        self.store
            .insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn layer(&mut self, prefix: &str, d: usize, d_ff: usize) -> LayerParams {
        LayerParams {
            attn_norm: self.add(format!("{prefix}.attn_norm"), &[d], Init::Ones),
            wq: self.add(format!("{prefix}.wq"), &[d, d], Init::Normal),
            wk: self.add(format!("{prefix}.wk"), &[d, d], Init::Normal),
            wv: self.add(format!("{prefix}.wv"), &[d, d], Init::Normal),
            wo: self.add(format!("{prefix}.wo"), &[d, d], Init::Normal),
            ffn_norm: self.add(format!("{prefix}.ffn_norm"), &[d], Init::Ones),
            w_gate: self.add(format!("{prefix}.w_gate"), &[d, d_ff], Init::Normal),
            w_up: self.add(format!("{prefix}.w_up"), &[d, d_ff], Init::Normal),
            w_down: self.add(format!("{prefix}.w_down"), &[d_ff, d], Init::Normal),
        }
    }

    fn head(&mut self, k: usize, d: usize, out: usize, init: HeadInit) -> HeadParams {
        let w_init = match init {
            HeadInit::Normal => Init::Normal,
            HeadInit::Zeros => Init::Zeros,
        };
        HeadParams {
            norm: self.add(format!("head.{k}.norm"), &[d], Init::Ones),
            weight: self.add(format!("head.{k}.weight"), &[d, out], w_init),
            bias: self.add(format!("head.{k}.bias"), &[out], Init::Zeros),
        }
    }
}

/// A variant-tagged decoder with its named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    pub(crate) text_embed: usize,
    pub(crate) speech_embed: usize,
    pub(crate) projector: Vec<LayerParams>,
    pub(crate) backbone: Vec<LayerParams>,
    /// Sequential single-layer modules (`mtp_vocalnet`), depth 1..N-1.
    pub(crate) mtp_layers: Vec<LayerParams>,
    /// Ground-truth-merging modules (`mtp_deepseek`), depth 1..N-1.
    pub(crate) merge_modules: Vec<MergeModuleParams>,
    pub(crate) group: Option<GroupParams>,
    pub(crate) heads: Vec<HeadParams>,
}

impl PartialEq for LayerParams {
    fn eq(&self, o: &Self) -> bool {
        self.wq == o.wq && self.w_down == o.w_down
    }
}

impl PartialEq for HeadParams {
    fn eq(&self, o: &Self) -> bool {
        self.weight == o.weight
    }
}

impl PartialEq for MergeModuleParams {
    fn eq(&self, o: &Self) -> bool {
        self.merge == o.merge
    }
}

impl PartialEq for GroupParams {
    fn eq(&self, o: &Self) -> bool {
        self.compose == o.compose
    }
}

impl<T: Scalar> DecoderModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Same registry as [`DecoderModel::new`] with every value zero.
    pub(crate) fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build(config, 0, true)
    }

    fn build(config: ModelConfig, seed: u64, zeroed: bool) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder::<T> {
            store: ParamStore::default(),
            seed,
            zeroed,
        };
        let text_embed = b.add("embed.text".into(), &[config.text_vocab, d], Init::Normal);
        let speech_embed = b.add("embed.speech".into(), &[config.speech_vocab, d], Init::Normal);
        let projector = (0..config.n_projector_layers)
            .map(|i| b.layer(&format!("projector.{i}"), d, config.d_ff))
            .collect();
        let backbone = (0..config.n_backbone_layers)
            .map(|i| b.layer(&format!("backbone.{i}"), d, config.d_ff))
            .collect();
        let mut mtp_layers = Vec::new();
        let mut merge_modules = Vec::new();
        let mut group = None;
        match config.variant {
            Variant::MtpVocalnet => {
                for k in 1..config.n {
                    mtp_layers.push(b.layer(&format!("mtp.{k}"), d, config.d_ff));
                }
            }
            Variant::MtpDeepseek => {
                for k in 1..config.n {
                    merge_modules.push(MergeModuleParams {
                        norm_hidden: b.add(format!("mtp.{k}.norm_hidden"), &[d], Init::Ones),
                        norm_embed: b.add(format!("mtp.{k}.norm_embed"), &[d], Init::Ones),
                        merge: b.add(format!("mtp.{k}.merge"), &[2 * d, d], Init::Normal),
                        layer: b.layer(&format!("mtp.{k}.layer"), d, config.d_ff),
                    });
                }
            }
            Variant::GroupLinear | Variant::GroupTrans => {
                let g = config.n;
                let compose = b.add("group.compose".into(), &[g * d, d], Init::GroupMean(g));
                let (queries, decoder) = if config.variant == Variant::GroupTrans {
                    let q = b.add("group.queries".into(), &[g, d], Init::Normal);
                    let layers = (0..config.group_decoder_layers)
                        .map(|i| b.layer(&format!("group.decoder.{i}"), d, config.d_ff))
                        .collect();
                    (Some(q), layers)
                } else {
                    (None, Vec::new())
                };
                group = Some(GroupParams {
                    compose,
                    queries,
                    decoder,
                });
            }
            Variant::Ntp | Variant::MtpParallel => {}
        }
        let heads = match config.variant {
            Variant::GroupLinear => vec![b.head(0, d, config.n * config.speech_vocab, config.head_init)],
            Variant::GroupTrans | Variant::Ntp => vec![b.head(0, d, config.speech_vocab, config.head_init)],
            _ => (0..config.n)
                .map(|k| b.head(k, d, config.speech_vocab, config.head_init))
                .collect(),
        };
        Ok(DecoderModel {
            config,
            params: b.store,
            text_embed,
            speech_embed,
            projector,
            backbone,
            mtp_layers,
            merge_modules,
            group,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub(crate) fn p(&self, id: usize) -> &Tensor<T> {
        self.params.get(id)
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> DecoderModel<U> {
        let mut store = ParamStore::default();
        for (n, t) in self.params.iter() {
            store.insert(n.to_string(), t.cast());
        }
        DecoderModel {
            config: self.config.clone(),
            params: store,
            text_embed: self.text_embed,
            speech_embed: self.speech_embed,
            projector: self.projector.clone(),
            backbone: self.backbone.clone(),
            mtp_layers: self.mtp_layers.clone(),
            merge_modules: self.merge_modules.clone(),
            group: self.group.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Copies every parameter whose name and shape also exist in `other`;
    /// returns how many were copied.
    pub fn copy_shared_from(&mut self, other: &DecoderModel<T>) -> usize {
        let mut copied = 0;
        for (name, t) in other.params.iter() {
            if let Some(dst) = self.params.by_name_mut(name) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub(crate) fn require(&self, ok: bool, expected: &'static str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::VariantMismatch {
                expected,
                actual: self.config.variant.to_string(),
            })
        }
    }
}
