//! Max-probability and entropy statistics of teacher-forced predictions.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::masks::MaskMode;
use crate::model::{group_count, DecoderModel, IGNORE};
use crate::numerics::{Scalar, Tape};
use crate::synthdata::CorpusRecord;

pub const MAX_PROB_BIN: f64 = 0.05;
pub const ENTROPY_BIN: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub n_tokens: usize,
    pub mean_max_prob: f64,
    pub mean_entropy: f64,
    /// Lower edges of the max-probability bins, width 0.05 on `[0, 1]`.
    pub max_prob_edges: Vec<f64>,
    pub max_prob_hist: Vec<usize>,
    /// Lower edges of the entropy bins, width 0.25 on `[0, ln V]`.
    pub entropy_edges: Vec<f64>,
    pub entropy_hist: Vec<usize>,
}

/// `(max probability, entropy)` of `softmax(logits)` computed in the
/// log-sum-exp form `H = lse(z) − Σ p·z`.
pub fn entropy_of<T: Scalar>(logits: &[T]) -> (f64, f64) {
    let z: Vec<f64> = logits.iter().map(|x| x.to_f64_lossy()).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    let mut expect = 0.0;
    for &x in &z {
        let p = (x - lse).exp();
        if p > 0.0 {
            expect += p * x;
        }
    }
    ((max - lse).exp(), (lse - expect).max(0.0))
}

/// Direct `−Σ p ln p` over explicit probabilities.
pub fn entropy_reference(probs: &[f64]) -> (f64, f64) {
    let mut h = 0.0;
    let mut m = 0.0f64;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
        m = m.max(p);
    }
    (m, h)
}

fn bin(x: f64, width: f64, n: usize) -> usize {
    ((x / width).floor().max(0.0) as usize).min(n - 1)
}

/// Head-0 statistics over teacher-forced forwards of `records` (non-streaming
/// mask), stopping once `n_tokens` predictions were collected.
pub fn entropy_stats<T: Scalar>(
    model: &DecoderModel<T>,
    records: &[CorpusRecord],
    n_tokens: usize,
) -> Result<EntropyStats> {
    let cfg = model.config();
    let v = cfg.speech_vocab;
    let n_mp = (1.0 / MAX_PROB_BIN).round() as usize;
    let n_h = ((v as f64).ln() / ENTROPY_BIN).ceil() as usize;
    let mut st = EntropyStats {
        n_tokens: 0,
        mean_max_prob: 0.0,
        mean_entropy: 0.0,
        max_prob_edges: (0..n_mp).map(|i| i as f64 * MAX_PROB_BIN).collect(),
        max_prob_hist: vec![0; n_mp],
        entropy_edges: (0..n_h).map(|i| i as f64 * ENTROPY_BIN).collect(),
        entropy_hist: vec![0; n_h],
    };
    let (mut sum_mp, mut sum_h) = (0.0, 0.0);
    'records: for rec in records {
        let mut text = vec![cfg.bos()];
        text.extend_from_slice(&rec.text);
        let mut seq = vec![cfg.sos()];
        seq.extend_from_slice(&rec.speech);
        let n_inputs = if model.variant().is_group() {
            group_count(rec.speech.len(), cfg.n)
        } else {
            rec.speech.len()
        };
        let mut tape = Tape::new();
        let out = model.forward_sample(&mut tape, &text, &seq, n_inputs, MaskMode::NonStreaming, 1)?;
        let logits = tape.value(out.logits[0]);
        for (r, &t) in out.targets[0].iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let (mp, h) = entropy_of(logits.row(r));
            sum_mp += mp;
            sum_h += h;
            st.max_prob_hist[bin(mp, MAX_PROB_BIN, n_mp)] += 1;
            st.entropy_hist[bin(h, ENTROPY_BIN, n_h)] += 1;
            st.n_tokens += 1;
            if st.n_tokens >= n_tokens {
                break 'records;
            }
        }
    }
    if st.n_tokens > 0 {
        st.mean_max_prob = sum_mp / st.n_tokens as f64;
        st.mean_entropy = sum_h / st.n_tokens as f64;
    }
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_cases() {
        let (mp, h) = entropy_of(&[0.0f64; 99]);
        assert!((mp - 1.0 / 99.0).abs() < 1e-15);
        assert!((h - 99f64.ln()).abs() < 1e-12);
        let mut onehot = vec![-1e30f64; 10];
        onehot[3] = 0.0;
        assert_eq!(entropy_of(&onehot), (1.0, 0.0));
        assert_eq!(entropy_reference(&[0.0, 1.0, 0.0]), (1.0, 0.0));
    }

    #[test]
    fn forms_agree() {
        let z = [0.3f64, -1.2, 2.5, 0.0, 0.7];
        let max = 2.5f64;
        let s: f64 = z.iter().map(|x| (x - max).exp()).sum();
        let p: Vec<f64> = z.iter().map(|x| (x - max).exp() / s).collect();
        let (a, b) = entropy_of(&z);
        let (c, d) = entropy_reference(&p);
        assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
    }
}
