//! Batch evaluation: generation plus reconstruction error per record.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::DecoderModel;
use crate::numerics::Scalar;
use crate::synthdata::{reconstruction_error, CorpusRecord, SynthGrammar};

use super::{generate, DecodeConfig, REPORT_SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record_id: u64,
    pub recon_error: f64,
    pub tokens: usize,
    pub backbone_forwards: usize,
    pub wall_ms: f64,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "schema_version,record_id,recon_error,tokens,backbone_forwards,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4}",
            REPORT_SCHEMA_VERSION, self.record_id, self.recon_error, self.tokens, self.backbone_forwards, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub n_records: usize,
    pub m: usize,
    pub mean_recon_error: f64,
    /// Total tokens over total backbone forwards.
    pub mean_tokens_per_forward: f64,
    pub median_wall_ms: f64,
}

/// Generates speech for every record and scores the decoded text against
/// the record's text.
pub fn evaluate<T: Scalar>(
    model: &DecoderModel<T>,
    grammar: &SynthGrammar,
    records: &[CorpusRecord],
    cfg: &DecodeConfig,
) -> Result<(Vec<EvalRow>, EvalSummary)> {
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        let r = generate(model, &rec.text, cfg)?;
        let hyp = grammar.decode(&r.tokens);
        rows.push(EvalRow {
            record_id: rec.id,
            recon_error: reconstruction_error(&rec.text, &hyp),
            tokens: r.tokens.len(),
            backbone_forwards: r.backbone_forwards,
            wall_ms: r.wall_ms,
        });
    }
    let n = rows.len().max(1) as f64;
    let tokens: usize = rows.iter().map(|r| r.tokens).sum();
    let forwards: usize = rows.iter().map(|r| r.backbone_forwards).sum();
    let mut walls: Vec<f64> = rows.iter().map(|r| r.wall_ms).collect();
    let summary = EvalSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        n_records: rows.len(),
        m: cfg.m,
        mean_recon_error: rows.iter().map(|r| r.recon_error).sum::<f64>() / n,
        mean_tokens_per_forward: if forwards == 0 {
            0.0
        } else {
            tokens as f64 / forwards as f64
        },
        median_wall_ms: median(&mut walls),
    };
    Ok((rows, summary))
}

pub(crate) fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
