//! Attention masks over a `[text | speech]` layout.
//!
//! Indices in this module are 1-based: position 1 is BOS, positions
//! `2..=L_t` are text states, `L_t + 1` is SOS and the remaining positions
//! are speech tokens. [`AttnMask::to_visibility`] is the only conversion
//! to the 0-based indexing used by the model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lengths of the two segments of one training or decoding instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    /// Text positions including BOS (`L_t ≥ 1`).
    pub text_len: usize,
    /// Speech positions including SOS (`L_s ≥ 0`).
    pub speech_len: usize,
}

impl SequenceLayout {
    pub fn new(text_len: usize, speech_len: usize) -> Result<Self> {
        if text_len == 0 {
            return Err(Error::Config("layout needs at least the BOS position".into()));
        }
        Ok(SequenceLayout { text_len, speech_len })
    }

    pub fn total(&self) -> usize {
        self.text_len + self.speech_len
    }
}

/// Streaming chunk sizes: every `speech_chunk` speech positions reveal
/// `text_chunk` more text positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSchedule {
    pub speech_chunk: usize,
    pub text_chunk: usize,
}

impl Default for ChunkSchedule {
    fn default() -> Self {
        ChunkSchedule {
            speech_chunk: 15,
            text_chunk: 5,
        }
    }
}

impl ChunkSchedule {
    pub fn new(speech_chunk: usize, text_chunk: usize) -> Result<Self> {
        if speech_chunk == 0 || text_chunk == 0 {
            return Err(Error::Config(format!(
                "chunk sizes must be positive (C_s={speech_chunk}, C_t={text_chunk})"
            )));
        }
        Ok(ChunkSchedule {
            speech_chunk,
            text_chunk,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    NonStreaming,
    Streaming,
}

/// Text positions visible to the speech position at 1-based offset
/// `speech_offset` within the speech segment (SOS is offset 1). Not capped
/// at `L_t`.
pub fn visible_text_budget(sched: ChunkSchedule, speech_offset: usize) -> usize {
    debug_assert!(speech_offset >= 1);
    (speech_offset.saturating_sub(1)).div_ceil(sched.speech_chunk) * sched.text_chunk + 1
}

/// Dense `n × n` visibility matrix, 1-based accessors.
#[derive(Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * n);
        for i in 1..=n {
            for j in 1..=n {
                bits.push(f(i, j));
            }
        }
        AttnMask { n, bits }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Whether position `i` may attend to position `j` (both 1-based).
    pub fn get(&self, i: usize, j: usize) -> bool {
        assert!(
            (1..=self.n).contains(&i) && (1..=self.n).contains(&j),
            "mask index ({i}, {j}) outside 1..={}",
            self.n
        );
        self.bits[(i - 1) * self.n + (j - 1)]
    }

    /// The model-facing 0-based view of this mask.
    pub fn to_visibility(&self) -> Visibility {
        Visibility {
            n: self.n,
            bits: self.bits.clone(),
        }
    }

    /// `0/1` grid, one row per line.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for row in self.bits.chunks(self.n.max(1)) {
            s.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }
}

impl fmt::Debug for AttnMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AttnMask({})\n{}", self.n, self.render())
    }
}

/// 0-based visibility over absolute sequence positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visibility {
    n: usize,
    bits: Vec<bool>,
}

impl Visibility {
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }
}

/// Non-streaming mask: text attends to all text, speech attends to all text
/// and causally to speech.
pub fn build_nonstreaming_mask(layout: SequenceLayout) -> AttnMask {
    let lt = layout.text_len;
    AttnMask::from_fn(layout.total(), |i, j| {
        if i <= lt {
            j <= lt
        } else {
            j <= lt || (lt < j && j <= i)
        }
    })
}

/// The non-streaming equation read literally: text rows see every column,
/// speech included.
pub fn build_nonstreaming_mask_literal(layout: SequenceLayout) -> AttnMask {
    let lt = layout.text_len;
    AttnMask::from_fn(layout.total(), |i, j| i <= lt || j <= lt || j <= i)
}

/// Streaming mask: causal text, causal speech, and chunk-limited text
/// visibility for speech.
pub fn build_streaming_mask(layout: SequenceLayout, sched: ChunkSchedule) -> AttnMask {
    let lt = layout.text_len;
    let n = layout.total();
    // Budgets depend only on the speech row; compute them once.
    let budgets: Vec<usize> = (1..=layout.speech_len)
        .map(|o| visible_text_budget(sched, o).min(lt))
        .collect();
    AttnMask::from_fn(n, |i, j| {
        if i <= lt || j > lt {
            j <= i
        } else {
            j <= budgets[i - lt - 1]
        }
    })
}

pub fn build_mask(layout: SequenceLayout, mode: MaskMode, sched: ChunkSchedule) -> AttnMask {
    match mode {
        MaskMode::NonStreaming => build_nonstreaming_mask(layout),
        MaskMode::Streaming => build_streaming_mask(layout, sched),
    }
}

/// Per-entry transcription of the mask definitions, written independently
/// of the builders so each can check the other.
pub fn mask_oracle(
    layout: SequenceLayout,
    sched: Option<ChunkSchedule>,
    mode: MaskMode,
    i: usize,
    j: usize,
) -> Result<bool> {
    let n = layout.text_len + layout.speech_len;
    for idx in [i, j] {
        if idx < 1 || idx > n {
            return Err(Error::Index {
                what: "mask position",
                index: idx,
                bound: n,
            });
        }
    }
    let lt = layout.text_len;
    let text_row = i <= lt;
    let text_col = j <= lt;
    Ok(match mode {
        MaskMode::NonStreaming => {
            // Text states see themselves and each other; speech sees all
            // text plus its own past.
            match (text_row, text_col) {
                (true, true) => true,
                (true, false) => false,
                (false, true) => true,
                (false, false) => i >= j,
            }
        }
        MaskMode::Streaming => {
            let sched = sched.ok_or_else(|| Error::Config("streaming oracle needs a schedule".into()))?;
            if text_row || !text_col {
                i >= j
            } else {
                let num = i - lt - 1;
                let chunks = num.div_ceil(sched.speech_chunk);
                let limit = std::cmp::min(lt, chunks * sched.text_chunk + 1);
                j <= limit
            }
        }
    })
}
