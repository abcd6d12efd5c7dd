//! Synthetic text→speech-token language.
//!
//! Each text symbol `a` at index `i` expands into a run of speech tokens
//! `a·R + 0, a·R + 1, …` whose length is `2 + ((a + i) mod 4)`, extended by
//! one with probability `p_ext`. Several fine-grained tokens per symbol and a
//! stochastic run end give the model the same kind of local ambiguity that
//! real speech tokens have, while [`decode`] recovers the text exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// Emitted by [`decode`] for a malformed segment.
pub const ERROR_SYMBOL: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthGrammar {
    /// Number of text symbols `T`.
    pub symbols: usize,
    /// Longest possible run `R_max`; also the token stride per symbol.
    pub max_run: usize,
    /// Probability that a run is one token longer than its base length.
    pub p_ext: f64,
}

impl Default for SynthGrammar {
    fn default() -> Self {
        SynthGrammar {
            symbols: 16,
            max_run: 6,
            p_ext: 0.2,
        }
    }
}

impl SynthGrammar {
    pub fn validate(&self) -> Result<()> {
        if self.symbols == 0 || self.max_run < 6 || !(0.0..=1.0).contains(&self.p_ext) {
            return Err(Error::Config(format!(
                "grammar needs symbols ≥ 1, max_run ≥ 6 and p_ext in [0,1]: {self:?}"
            )));
        }
        Ok(())
    }

    /// Core speech tokens `T·R_max`.
    pub fn core_vocab(&self) -> usize {
        self.symbols * self.max_run
    }

    pub fn sos(&self) -> usize {
        self.core_vocab()
    }

    pub fn eos(&self) -> usize {
        self.core_vocab() + 1
    }

    pub fn speech_pad(&self) -> usize {
        self.core_vocab() + 2
    }

    /// Speech vocabulary including SOS/EOS/PAD.
    pub fn speech_vocab(&self) -> usize {
        self.core_vocab() + 3
    }

    pub fn bos(&self) -> usize {
        self.symbols
    }

    pub fn text_pad(&self) -> usize {
        self.symbols + 1
    }

    /// Text vocabulary including BOS/PAD.
    pub fn text_vocab(&self) -> usize {
        self.symbols + 2
    }

    pub fn base_len(&self, symbol: usize, index: usize) -> usize {
        2 + (symbol + index) % 4
    }

    pub fn token(&self, symbol: usize, run_pos: usize) -> usize {
        symbol * self.max_run + run_pos
    }

    /// Speech expansion of `text`, EOS-terminated.
    ///
    /// # Panics
    /// If a text symbol is outside `0..symbols`.
    pub fn expand(&self, text: &[usize], seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(text.len() * 5 + 1);
        for (i, &a) in text.iter().enumerate() {
            assert!(a < self.symbols, "text symbol {a} outside 0..{}", self.symbols);
            let extended = rng.random_bool(self.p_ext);
            let len = self.base_len(a, i) + usize::from(extended);
            out.extend((0..len).map(|j| self.token(a, j)));
        }
        out.push(self.eos());
        out
    }

    /// Inverse of [`SynthGrammar::expand`], total on arbitrary streams.
    ///
    /// The stream is cut into maximal runs with a constant symbol whose run
    /// position counts up from 0. Each run yields its symbol; anything that
    /// cannot start a run (a nonzero run position, a special token) opens a
    /// malformed segment, which lasts until the next run start and yields a
    /// single [`ERROR_SYMBOL`]. Decoding stops at the first EOS.
    pub fn decode(&self, speech: &[usize]) -> Vec<usize> {
        enum State {
            Idle,
            Run { symbol: usize, next: usize },
            Malformed,
        }
        let core = self.core_vocab();
        let mut out = Vec::new();
        let mut state = State::Idle;
        for &tok in speech {
            if tok == self.eos() {
                break;
            }
            let parts = (tok < core).then(|| (tok / self.max_run, tok % self.max_run));
            state = match (state, parts) {
                (State::Run { symbol, next }, Some((a, j))) if a == symbol && j == next => {
                    State::Run { symbol, next: next + 1 }
                }
                (_, Some((a, 0))) => {
                    out.push(a);
                    State::Run { symbol: a, next: 1 }
                }
                (State::Malformed, _) => State::Malformed,
                (_, _) => {
                    out.push(ERROR_SYMBOL);
                    State::Malformed
                }
            };
        }
        out
    }
}

/// Edit distance with unit costs.
pub fn levenshtein<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by the reference length (at least 1). Not
/// symmetric: swapping the arguments changes the denominator.
pub fn reconstruction_error(reference: &[usize], hypothesis: &[usize]) -> f64 {
    levenshtein(reference, hypothesis) as f64 / reference.len().max(1) as f64
}

/// splitmix64 finalizer over a pair; used to derive independent seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub schema_version: u32,
    pub grammar: SynthGrammar,
    pub seed: u64,
    pub n_records: usize,
    pub len_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub id: u64,
    pub text: Vec<usize>,
    pub speech: Vec<usize>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: u64,
    text: Vec<usize>,
    speech: Vec<usize>,
}

/// Record `id` of the corpus identified by `seed`; independent of every
/// other record so generation order does not matter.
pub fn make_record(grammar: &SynthGrammar, len_range: (usize, usize), seed: u64, id: u64) -> CorpusRecord {
    let rec_seed = mix_seed(seed, id);
    let mut rng = ChaCha8Rng::seed_from_u64(rec_seed);
    let len = rng.random_range(len_range.0..=len_range.1);
    let text: Vec<usize> = (0..len).map(|_| rng.random_range(0..grammar.symbols)).collect();
    let speech = grammar.expand(&text, mix_seed(rec_seed, 1));
    CorpusRecord {
        id,
        text,
        speech,
        seed: rec_seed,
    }
}

/// Writes a header line and `n_records` JSON lines to `path`.
pub fn gen_corpus(
    grammar: &SynthGrammar,
    n_records: usize,
    len_range: (usize, usize),
    seed: u64,
    path: &Path,
) -> Result<()> {
    grammar.validate()?;
    if len_range.0 > len_range.1 {
        return Err(Error::Config(format!("empty length range {len_range:?}")));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CorpusHeader {
        schema_version: CORPUS_SCHEMA_VERSION,
        grammar: *grammar,
        seed,
        n_records,
        len_range,
    };
    let mut write_line = |line: String| -> Result<()> {
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    write_line(serde_json::to_string(&header)?)?;
    for id in 0..n_records as u64 {
        let r = make_record(grammar, len_range, seed, id);
        write_line(serde_json::to_string(&RecordLine {
            id: r.id,
            text: r.text,
            speech: r.speech,
        })?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Vec<CorpusRecord>,
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header: CorpusHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line.map_err(|e| Error::io(path, e))?)?,
        None => return Err(Error::Contract(format!("{} has no header line", path.display()))),
    };
    let mut records = Vec::with_capacity(header.n_records);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RecordLine = serde_json::from_str(&line)?;
        records.push(CorpusRecord {
            id: r.id,
            text: r.text,
            speech: r.speech,
            seed: mix_seed(header.seed, r.id),
        });
    }
    Ok(Corpus { header, records })
}
