//! Speedup, accept length, and output-similarity metrics.

use crate::engine::StepRecord;
use crate::error::{Error, Result};
use crate::model::Token;

/// Throughput ratio of a method against the autoregressive baseline:
/// `(tokens/time_method) / (tokens/time_ar)`.
pub fn speedup_alpha(tokens_generated: usize, time_method_s: f64, time_ar_s: f64) -> Result<f64> {
    if tokens_generated == 0 {
        return Err(Error::EmptyInput("no generated tokens"));
    }
    if !(time_method_s > 0.0) || !(time_ar_s > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "times must be positive, got {time_method_s} / {time_ar_s}"
        )));
    }
    let throughput_method = tokens_generated as f64 / time_method_s;
    let throughput_ar = tokens_generated as f64 / time_ar_s;
    Ok(throughput_method / throughput_ar)
}

/// Mean accepted tokens per verification step, zero-accept steps included.
pub fn accept_length_tau(records: &[StepRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no step records"));
    }
    let total: usize = records.iter().map(|r| r.accepted).sum();
    Ok(total as f64 / records.len() as f64)
}

/// ROUGE-L F1 on token sequences, scaled to [0, 100].
pub fn rouge_l(candidate: &[Token], reference: &[Token]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput("empty rouge input"));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let precision = lcs as f64 / candidate.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

fn lcs_len(a: &[Token], b: &[Token]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
