//! Batch-size-one latency measurement with the refine step on and off.

use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::{encode_tokens, Batch, Example, Vocabulary};
use crate::model::{LrTransformer, ModelError, Prediction};
use crate::numerics::{Graph, Mode, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        if samples_ms.is_empty() {
            return Self { mean_ms: 0.0, median_ms: 0.0, p95_ms: 0.0 };
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let at = |q: f64| s[((q * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Self { mean_ms: s.iter().sum::<f64>() / s.len() as f64, median_ms: at(0.5), p95_ms: at(0.95) }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub utterances: usize,
    pub warmup: usize,
    pub repeat: usize,
    pub with_lrm: LatencyStats,
    pub without_lrm: LatencyStats,
    /// Mean latency with the refine step over mean latency without it.
    pub ratio: f64,
    /// SHA-256 of the predictions made with the refine step.
    pub prediction_digest: String,
    /// Whether every repeat produced the same predictions.
    pub predictions_stable: bool,
}

fn digest_line(h: &mut Sha256, pred: &Prediction, vocab: &Vocabulary) {
    for (intent, tags) in pred.intents(vocab).iter().zip(pred.slot_tags(vocab)) {
        h.update(intent.as_bytes());
        h.update(b"\t");
        h.update(tags.join(" ").as_bytes());
        h.update(b"\n");
    }
}

/// Times the forward pass (embedding through classifier) one utterance at a
/// time. The two variants alternate which runs first for each utterance so
/// neither systematically benefits from a warm cache.
pub fn run_bench(
    model: &LrTransformer,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    examples: &[Example],
    warmup: usize,
    repeat: usize,
) -> Result<BenchReport, ModelError> {
    let batches: Vec<Batch> = examples.iter().map(|e| encode_tokens(&[e.tokens.as_slice()], vocab)).collect();
    let forward = |batch: &Batch, refine: bool| -> Result<(f64, Prediction), ModelError> {
        let start = Instant::now();
        let g = Graph::new(store, Mode::INFERENCE, 0);
        let out = model.encode_with(&g, batch, refine)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        Ok((elapsed, Prediction::from_heads(&g, &out.heads, &batch.lengths)?))
    };
    if !batches.is_empty() {
        for i in 0..warmup {
            let b = &batches[i % batches.len()];
            forward(b, true)?;
            forward(b, false)?;
        }
    }
    let (mut on, mut off) = (Vec::new(), Vec::new());
    let mut digests = Vec::new();
    for _ in 0..repeat.max(1) {
        let mut h = Sha256::new();
        for (i, b) in batches.iter().enumerate() {
            let on_first = i % 2 == 0;
            let first = forward(b, on_first)?;
            let second = forward(b, !on_first)?;
            let (with, without) = if on_first { (first, second) } else { (second, first) };
            on.push(with.0);
            off.push(without.0);
            digest_line(&mut h, &with.1, vocab);
        }
        digests.push(hex::encode(h.finalize()));
    }
    let with_lrm = LatencyStats::from_samples(&on);
    let without_lrm = LatencyStats::from_samples(&off);
    Ok(BenchReport {
        utterances: batches.len(),
        warmup,
        repeat: repeat.max(1),
        ratio: if without_lrm.mean_ms > 0.0 { with_lrm.mean_ms / without_lrm.mean_ms } else { f64::NAN },
        with_lrm,
        without_lrm,
        predictions_stable: digests.windows(2).all(|w| w[0] == w[1]),
        prediction_digest: digests.into_iter().next().unwrap_or_default(),
    })
}
