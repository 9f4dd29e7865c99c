//! Property bodies shared by the proptest suites and the acceptance runner.

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    affine, brute_buckets, chunk_counts, conlleval_chunks, matrix, max_abs_diff, naive_attention, softmax, tiny_model,
    tiny_spec, uncoordinated_positions, zero_param, AttentionWeights,
};
use lr_transformer::corpus::{encode_batch, synthetic_examples, Batch, Vocabulary};
use lr_transformer::evaluation::{
    chunks_to_tags, classify_unc_errors, extract_chunks, extract_chunks_strict, find_uncoordinated, slot_f1, UncKind,
};
use lr_transformer::model::{lrm_refine, LrTransformer, MultiHeadAttention};
use lr_transformer::numerics::{Graph, Mode, ParamStore, Tensor};

pub type Check = Result<(), TestCaseError>;

fn random_batch(vocab: &Vocabulary, seed: u64, n: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = synthetic_examples(&tiny_spec(), n, &mut rng);
    encode_batch(&examples, vocab, 64).unwrap()
}

fn heads_at_real_positions(model: &LrTransformer, store: &ParamStore<f64>, batch: &Batch) -> (Vec<f64>, Vec<Vec<f64>>) {
    let g = Graph::new(store, Mode::INFERENCE, 0);
    let out = model.encode_with(&g, batch, true).unwrap();
    let intent = g.value(out.heads.intent_logits).to_f64_vec();
    let slots = g.value(out.heads.slot_logits);
    let (t, c) = (slots.shape()[1], slots.shape()[2]);
    let rows = batch
        .lengths
        .iter()
        .enumerate()
        .map(|(b, &n)| slots.data()[b * t * c..(b * t + n) * c].to_vec())
        .collect();
    (intent, rows)
}

fn attention_weights(store: &ParamStore<f64>, a: &MultiHeadAttention) -> AttentionWeights {
    let bias = |id| store.value(id).to_f64_vec();
    AttentionWeights {
        wq: matrix(store, a.query.weight),
        bq: bias(a.query.bias),
        wk: matrix(store, a.key.weight),
        bk: bias(a.key.bias),
        wv: matrix(store, a.value.weight),
        bv: bias(a.value.bias),
        wo: matrix(store, a.output.weight),
        bo: bias(a.output.bias),
        rel: a.relative.as_ref().map(|r| (bias(r.key), bias(r.value), r.clip)),
        heads: a.n_heads,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}


pub fn padding_leaves_real_outputs_unchanged(seed: u64, n: usize, extra: usize) -> Check {
    let (vocab, model, store) = tiny_model::<f64>(seed);
    let batch = random_batch(&vocab, seed.wrapping_add(1), n);
    let (intent, slots) = heads_at_real_positions(&model, &store, &batch);
    let padded = batch.padded_to(batch.max_len + extra);
    let (intent_p, slots_p) = heads_at_real_positions(&model, &store, &padded);
    prop_assert!(max_abs_diff(&intent, &intent_p) <= 1e-5);
    for (a, b) in slots.iter().zip(&slots_p) {
        prop_assert!(max_abs_diff(a, b) <= 1e-5);
    }
    Ok(())
}

pub fn zero_refine_tables_reduce_to_plain_encoder(seed: u64, n: usize) -> Check {
    let (vocab, model, mut store) = tiny_model::<f64>(seed);
    zero_param(&mut store, model.lrm.intent_table);
    zero_param(&mut store, model.lrm.slot_table);
    let batch = random_batch(&vocab, seed ^ 3, n);
    let g = Graph::new(&store, Mode::INFERENCE, 0);
    let on = model.encode_with(&g, &batch, true).unwrap();
    let off = model.encode_with(&g, &batch, false).unwrap();
    prop_assert_eq!(on.preliminary.len(), 1);
    prop_assert_eq!(g.value(on.state.hidden).to_f64_vec(), g.value(off.state.hidden).to_f64_vec());
    prop_assert_eq!(g.value(on.heads.slot_logits).to_f64_vec(), g.value(off.heads.slot_logits).to_f64_vec());
    prop_assert_eq!(g.value(on.heads.intent_logits).to_f64_vec(), g.value(off.heads.intent_logits).to_f64_vec());
    Ok(())
}

pub fn refine_step_matches_brute_force(seed: u64, b: usize, t: usize) -> Check {
    let (_, model, store) = tiny_model::<f64>(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let d = model.config.d_model;
    let hidden = random_tensor(&mut rng, &[b, 1 + t, d], 2.0);
    let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t)).collect();
    let token_mask: Vec<bool> = lengths.iter().flat_map(|&n| (0..t).map(move |j| j < n)).collect();

    let g = Graph::new(&store, Mode::INFERENCE, 0);
    let h = g.constant(hidden.clone());
    let r = lrm_refine(&g, h, &token_mask, &model.classifier, &model.lrm, false).unwrap();
    let refined = g.value(r.hidden).to_f64_vec();
    let summary = g.value(r.slot_summary).to_f64_vec();

    let wi = matrix(&store, model.classifier.intent.weight);
    let bi = store.value(model.classifier.intent.bias).to_f64_vec();
    let ws = matrix(&store, model.classifier.slot.weight);
    let bs = store.value(model.classifier.slot.bias).to_f64_vec();
    let (ti, _, _) = matrix(&store, model.lrm.intent_table);
    let (ts, n_tags, _) = matrix(&store, model.lrm.slot_table);
    let x = hidden.data();
    let row = |bb: usize, j: usize| &x[(bb * (1 + t) + j) * d..(bb * (1 + t) + j + 1) * d];
    for bb in 0..b {
        let cls = row(bb, 0);
        let p_intent = softmax(&affine(cls, 1, &wi, &bi));
        let e_intent: Vec<f64> = (0..d).map(|c| p_intent.iter().enumerate().map(|(k, p)| p * ti[k * d + c]).sum()).collect();
        let e_slot: Vec<Vec<f64>> = (0..lengths[bb])
            .map(|j| {
                let joined: Vec<f64> = row(bb, 1 + j).iter().chain(cls).copied().collect();
                let p = softmax(&affine(&joined, 1, &ws, &bs));
                (0..d).map(|c| (0..n_tags).map(|k| p[k] * ts[k * d + c]).sum()).collect()
            })
            .collect();
        for c in 0..d {
            let column: Vec<f64> = e_slot.iter().map(|e| e[c]).collect();
            let alpha = softmax(&column);
            let s0: f64 = alpha.iter().zip(&column).map(|(a, e)| a * e).sum();
            prop_assert!((summary[bb * d + c] - s0).abs() <= 1e-5);
            let got_cls = refined[bb * (1 + t) * d + c];
            prop_assert!((got_cls - (cls[c] + e_intent[c] + s0)).abs() <= 1e-5);
        }
        for j in 0..t {
            for c in 0..d {
                let got = refined[(bb * (1 + t) + 1 + j) * d + c];
                let base = row(bb, 1 + j)[c];
                if j < lengths[bb] {
                    prop_assert!((got - (base + e_slot[j][c])).abs() <= 1e-5);
                } else {
                    prop_assert_eq!(got, base);
                }
            }
        }
    }
    Ok(())
}

pub fn relative_attention_matches_loop_oracle(seed: u64, len: usize, zero_tables: bool, causal: bool) -> Check {
    let (_, model, mut store) = tiny_model::<f64>(seed);
    let att = model.encoder[0].attention.clone();
    if zero_tables {
        let rel = att.relative.as_ref().unwrap();
        zero_param(&mut store, rel.key);
        zero_param(&mut store, rel.value);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let d = att.d_model;
    let x = random_tensor(&mut rng, &[1, len, d], 1.5);
    let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
    mask[0] = true;

    let g = Graph::new(&store, Mode::INFERENCE, 0);
    let xv = g.constant(x.clone());
    let got = g.value(att.forward(&g, xv, xv, &mask, causal).unwrap()).to_f64_vec();

    let mut w = attention_weights(&store, &att);
    if zero_tables {
        // Plain attention with no positional terms at all.
        w.rel = None;
    }
    let expect = naive_attention(&w, x.data(), len, &mask, causal);
    prop_assert!(max_abs_diff(&got, &expect) <= 1e-10);
    Ok(())
}

pub fn slot_generation_is_causal(seed: u64, n: usize) -> Check {
    let (vocab, model, store) = tiny_model::<f64>(seed);
    let batch = random_batch(&vocab, seed ^ 9, n);
    let t = batch.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
    let bb = rng.random_range(0..n);
    let j = rng.random_range(0..batch.lengths[bb]);
    let tags = vocab.slot_tags();
    let mut perturbed = batch.slot_ids.clone();
    let old = perturbed[bb * t + j];
    let new = loop {
        let cand = vocab.slot_id(&tags[rng.random_range(0..tags.len())]).unwrap();
        if cand != old {
            break cand;
        }
    };
    perturbed[bb * t + j] = new;

    let run = |gold: &[usize]| {
        let g = Graph::new(&store, Mode::TRAIN, 0);
        let enc = model.encode(&g, &batch).unwrap();
        g.value(model.slg_forward(&g, &enc.state, gold).unwrap())
    };
    let before = run(&batch.slot_ids);
    let after = run(&perturbed);
    let c = before.shape()[2];
    let at = |v: &Tensor<f64>, k: usize| v.data()[(bb * t + k) * c..(bb * t + k + 1) * c].to_vec();
    for k in 0..=j {
        prop_assert_eq!(at(&before, k), at(&after, k));
    }
    if j + 1 < batch.lengths[bb] {
        prop_assert!(max_abs_diff(&at(&before, j + 1), &at(&after, j + 1)) > 0.0);
    }
    // Other utterances are unaffected entirely.
    for other in (0..n).filter(|&o| o != bb) {
        let span = other * t * c..(other + 1) * t * c;
        prop_assert_eq!(&before.data()[span.clone()], &after.data()[span]);
    }
    Ok(())
}

pub fn probabilities_are_normalized(seed: u64, n: usize) -> Check {
    let (vocab, model, store) = tiny_model::<f64>(seed);
    let batch = random_batch(&vocab, seed ^ 5, n);
    let store32 = store.cast::<f32>();
    let pred = model.predict(&store32, &batch, true).unwrap();
    let di = pred.intent_probs.shape()[1];
    for row in pred.intent_probs.data().chunks(di) {
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
    }
    let ds = pred.slot_probs.shape()[2];
    for row in pred.slot_probs.data().chunks(ds) {
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
    }
    Ok(())
}

pub fn masked_softmax_matches_oracle(seed: u64, rows: usize, cols: usize) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut r, &[rows, cols], 20.0);
    let mut mask: Vec<bool> = (0..rows * cols).map(|_| r.random_bool(0.6)).collect();
    let keep = r.random_range(0..cols);
    for i in 0..rows {
        mask[i * cols + keep] = true;
    }
    let g = Graph::<f64>::detached(Mode::INFERENCE, 0);
    let y = g.value(g.softmax(g.constant(x.clone()), 1, Some(&mask)).unwrap());
    for i in 0..rows {
        let row = &y.data()[i * cols..(i + 1) * cols];
        let m = &mask[i * cols..(i + 1) * cols];
        let live: Vec<f64> = (0..cols).filter(|&j| m[j]).map(|j| x.data()[i * cols + j]).collect();
        let expect = softmax(&live);
        let mut k = 0;
        for j in 0..cols {
            if m[j] {
                prop_assert!((row[j] - expect[k]).abs() < 1e-12);
                k += 1;
            } else {
                prop_assert_eq!(row[j], 0.0);
            }
        }
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    Ok(())
}

pub fn chunks_match_conlleval_oracle(t: Vec<String>) -> Check {
    let got: Vec<_> = extract_chunks(&t).unwrap().into_iter().map(|c| (c.slot_type, c.start, c.end)).collect();
    prop_assert_eq!(got, conlleval_chunks(&t));
    Ok(())
}

pub fn chunks_are_disjoint_ordered_and_roundtrip(t: Vec<String>) -> Check {
    let chunks = extract_chunks(&t).unwrap();
    for w in chunks.windows(2) {
        prop_assert!(w[0].end < w[1].start);
    }
    for c in &chunks {
        prop_assert!(c.start <= c.end && c.end < t.len() && !c.slot_type.is_empty());
    }
    let rebuilt = chunks_to_tags(&chunks, t.len());
    prop_assert_eq!(extract_chunks(&rebuilt).unwrap(), chunks.clone());
    prop_assert_eq!(chunks_to_tags(&extract_chunks(&rebuilt).unwrap(), t.len()), rebuilt.clone());
    // Rebuilt tags are well formed.
    prop_assert!(find_uncoordinated(&rebuilt).is_empty());
    Ok(())
}

pub fn uncoordinated_matches_oracle_and_strict_reading(t: Vec<String>) -> Check {
    let found = find_uncoordinated(&t);
    prop_assert_eq!(&found, &uncoordinated_positions(&t));
    let strict = extract_chunks_strict(&t).unwrap();
    prop_assert_eq!(found.is_empty(), strict.orphans.is_empty());
    // A strict reader also drops the `I-x` run after an orphan, so only
    // the first event of each kind has to agree.
    prop_assert_eq!(found.first(), strict.orphans.first());
    for j in &found {
        prop_assert!(strict.orphans.contains(j));
    }
    Ok(())
}

pub fn f1_matches_counting_oracle(pred: Vec<Vec<String>>, gold: Vec<Vec<String>>) -> Check {
    let s = slot_f1(&pred, &gold).unwrap();
    let (c, p, g) = chunk_counts(&pred, &gold);
    prop_assert_eq!((s.correct, s.predicted, s.gold), (c, p, g));
    let prec = if p == 0 { 0.0 } else { c as f64 / p as f64 };
    let rec = if g == 0 { 0.0 } else { c as f64 / g as f64 };
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    prop_assert!((s.precision - prec).abs() < 1e-12);
    prop_assert!((s.recall - rec).abs() < 1e-12);
    prop_assert!((s.f1 - f1).abs() < 1e-12);
    Ok(())
}

pub fn swapping_pred_and_gold_swaps_precision_and_recall(pred: Vec<Vec<String>>, gold: Vec<Vec<String>>) -> Check {
    let ab = slot_f1(&pred, &gold).unwrap();
    let ba = slot_f1(&gold, &pred).unwrap();
    prop_assert_eq!(ab.precision, ba.recall);
    prop_assert_eq!(ab.recall, ba.precision);
    prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
    Ok(())
}

pub fn buckets_partition_and_match_brute_force(pred: Vec<Vec<String>>, gold: Vec<Vec<String>>) -> Check {
    let r = classify_unc_errors(&pred, &gold).unwrap();
    prop_assert_eq!(r.bi_errors + r.ib_errors + r.other_unc, r.uncoordinated);
    prop_assert_eq!(r.cases.len(), r.uncoordinated);
    let count = |k: UncKind| r.cases.iter().filter(|c| c.kind == k).count();
    prop_assert_eq!((count(UncKind::Bi), count(UncKind::Ib), count(UncKind::Other)), (r.bi_errors, r.ib_errors, r.other_unc));
    let brute = brute_buckets(&pred, &gold);
    prop_assert_eq!((r.bi_errors, r.ib_errors, r.other_unc), (brute["bi"], brute["ib"], brute["other"]));
    let mismatches: usize = pred.iter().zip(&gold).map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a != b).count()).sum();
    prop_assert_eq!(r.slot_errors, mismatches);
    Ok(())
}

pub fn gold_against_itself_is_perfect(gold: Vec<Vec<String>>) -> Check {
    let s = slot_f1(&gold, &gold).unwrap();
    prop_assert_eq!(s.correct, s.gold);
    let r = classify_unc_errors(&gold, &gold).unwrap();
    prop_assert_eq!(r.slot_errors, 0);
    prop_assert_eq!(r.bi_errors + r.ib_errors, 0);
    Ok(())
}
