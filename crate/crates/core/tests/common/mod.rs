//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

pub mod checks;

use std::collections::HashMap;

use lr_transformer::corpus::{SyntheticSpec, Vocabulary};
use lr_transformer::model::{LrTransformer, ModelConfig};
use lr_transformer::numerics::{ParamId, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec { n_intents: 3, n_slot_types: 3, words_per_slot: 2, filler_words: 4, min_len: 1, max_len: 6 }
}

pub fn tiny_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 16,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 2,
        dropout: 0.0,
        d_e: 8,
        lrm_after_layer: 1,
        rel_clip: 2,
        ..ModelConfig::default()
    }
    .with_vocab(vocab)
}

pub fn tiny_model<T: Real>(seed: u64) -> (Vocabulary, LrTransformer, ParamStore<T>) {
    let vocab = tiny_spec().vocabulary();
    let mut store = ParamStore::new();
    let model = LrTransformer::new(tiny_config(&vocab), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (vocab, model, store)
}

pub fn zero_param<T: Real>(store: &mut ParamStore<T>, id: ParamId) {
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, Tensor::zeros(&shape)).unwrap();
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major `[rows, cols]` matrix read out of a store.
pub fn matrix(store: &ParamStore<f64>, id: ParamId) -> (Vec<f64>, usize, usize) {
    let v = store.value(id);
    let s = v.shape().to_vec();
    let cols = *s.last().unwrap();
    (v.to_f64_vec(), v.numel() / cols, cols)
}

/// `x [n, k] · w [k, m] + bias [m]`
pub fn affine(x: &[f64], n: usize, w: &(Vec<f64>, usize, usize), bias: &[f64]) -> Vec<f64> {
    let (wd, k, m) = (&w.0, w.1, w.2);
    assert_eq!(x.len(), n * k);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for c in 0..m {
            let mut acc = bias.get(c).copied().unwrap_or(0.0);
            for r in 0..k {
                acc += x[i * k + r] * wd[r * m + c];
            }
            out[i * m + c] = acc;
        }
    }
    out
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// One-utterance multi-head attention written loop by loop, with optional
/// relative key/value tables (`[2c+1, d_head]`) indexed by clipped `j - i`.
pub struct AttentionWeights {
    pub wq: (Vec<f64>, usize, usize),
    pub bq: Vec<f64>,
    pub wk: (Vec<f64>, usize, usize),
    pub bk: Vec<f64>,
    pub wv: (Vec<f64>, usize, usize),
    pub bv: Vec<f64>,
    pub wo: (Vec<f64>, usize, usize),
    pub bo: Vec<f64>,
    pub rel: Option<(Vec<f64>, Vec<f64>, usize)>,
    pub heads: usize,
}

pub fn naive_attention(w: &AttentionWeights, x: &[f64], len: usize, mask: &[bool], causal: bool) -> Vec<f64> {
    let d = w.wq.1;
    let dh = d / w.heads;
    let q = affine(x, len, &w.wq, &w.bq);
    let k = affine(x, len, &w.wk, &w.bk);
    let v = affine(x, len, &w.wv, &w.bv);
    let mut ctx = vec![0.0; len * d];
    for h in 0..w.heads {
        for i in 0..len {
            let allowed: Vec<usize> = (0..len).filter(|&j| mask[j] && (!causal || j <= i)).collect();
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for c in 0..dh {
                        let mut key = k[j * d + h * dh + c];
                        if let Some((rk, _, clip)) = &w.rel {
                            let off = (j as i64 - i as i64).clamp(-(*clip as i64), *clip as i64) + *clip as i64;
                            key += rk[off as usize * dh + c];
                        }
                        s += q[i * d + h * dh + c] * key;
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax(&scores);
            for (&j, pj) in allowed.iter().zip(&p) {
                for c in 0..dh {
                    let mut val = v[j * d + h * dh + c];
                    if let Some((_, rv, clip)) = &w.rel {
                        let off = (j as i64 - i as i64).clamp(-(*clip as i64), *clip as i64) + *clip as i64;
                        val += rv[off as usize * dh + c];
                    }
                    ctx[i * d + h * dh + c] += pj * val;
                }
            }
        }
    }
    affine(&ctx, len, &w.wo, &w.bo)
}

// ---- tag-sequence oracles -------------------------------------------------

fn split_tag(t: &str) -> (char, &str) {
    if t == "O" {
        ('O', "")
    } else {
        (t.chars().next().unwrap(), &t[2..])
    }
}

/// Chunks via the start/end predicates of the conlleval script.
pub fn conlleval_chunks(tags: &[String]) -> Vec<(String, usize, usize)> {
    let starts = |prev: (char, &str), cur: (char, &str)| match cur.0 {
        'B' => true,
        'I' => prev.0 == 'O' || prev.1 != cur.1,
        _ => false,
    };
    let ends = |cur: (char, &str), next: (char, &str)| match cur.0 {
        'O' => false,
        _ => next.0 != 'I' || next.1 != cur.1,
    };
    let mut out = Vec::new();
    let mut start = None;
    for j in 0..tags.len() {
        let prev = if j == 0 { ('O', "") } else { split_tag(&tags[j - 1]) };
        let cur = split_tag(&tags[j]);
        let next = if j + 1 == tags.len() { ('O', "") } else { split_tag(&tags[j + 1]) };
        if starts(prev, cur) {
            start = Some(j);
        }
        if ends(cur, next) {
            out.push((cur.1.to_string(), start.take().unwrap(), j));
        }
    }
    out
}

/// (correct, predicted, gold) chunk counts over a corpus.
pub fn chunk_counts(pred: &[Vec<String>], gold: &[Vec<String>]) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let pc = conlleval_chunks(p);
        let gc = conlleval_chunks(g);
        c.0 += pc.iter().filter(|x| gc.contains(x)).count();
        c.1 += pc.len();
        c.2 += gc.len();
    }
    c
}

/// `I-x` positions not preceded by `B-x` / `I-x`.
pub fn uncoordinated_positions(tags: &[String]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev_type: Option<&str> = None;
    for (j, t) in tags.iter().enumerate() {
        let (kind, ty) = split_tag(t);
        if kind == 'I' && prev_type != Some(ty) {
            out.push(j);
        }
        prev_type = if kind == 'O' { None } else { Some(ty) };
    }
    out
}

/// Bucket totals (bi, ib, other) by brute force over every position.
pub fn brute_buckets(pred: &[Vec<String>], gold: &[Vec<String>]) -> HashMap<&'static str, usize> {
    let mut m = HashMap::from([("bi", 0), ("ib", 0), ("other", 0)]);
    for (p, g) in pred.iter().zip(gold) {
        for j in uncoordinated_positions(p) {
            let right_here = p[j] == g[j];
            let right_before = j > 0 && p[j - 1] == g[j - 1];
            let key = match (right_before, right_here) {
                (true, false) => "bi",
                (false, true) if j > 0 => "ib",
                _ => "other",
            };
            *m.get_mut(key).unwrap() += 1;
        }
    }
    m
}

pub mod strategies {
    use proptest::prelude::*;

    pub fn tag(types: usize) -> impl Strategy<Value = String> {
        prop_oneof![
            2 => Just("O".to_string()),
            2 => (0..types).prop_map(|t| format!("B-t{t}")),
            3 => (0..types).prop_map(|t| format!("I-t{t}")),
        ]
    }

    pub fn tags(types: usize, max_len: usize) -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(tag(types), 1..=max_len)
    }

    /// Pred/gold corpora with aligned lengths; pred mutates gold at random.
    pub fn aligned_corpus(types: usize) -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<String>>)> {
        prop::collection::vec(
            tags(types, 10).prop_flat_map(move |g| {
                let n = g.len();
                (Just(g), prop::collection::vec((any::<bool>(), tag(types)), n))
            }),
            1..6,
        )
        .prop_map(|rows| {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for (g, edits) in rows {
                pred.push(g.iter().zip(&edits).map(|(t, (keep, alt))| if *keep { t.clone() } else { alt.clone() }).collect());
                gold.push(g);
            }
            (pred, gold)
        })
    }
}
