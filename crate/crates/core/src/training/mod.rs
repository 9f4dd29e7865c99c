//! Losses, the training loop, validation-based model selection and
//! checkpoints.

mod checkpoint;
mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, BLOB_FILE, SIDECAR_FILE, VOCAB_FILE};
pub use config::{ConfigError, TrainConfig};

use crate::corpus::{bucketed_batches, encode_batch, encode_tokens, load_split, Batch, CorpusError, Example, Vocabulary};
use crate::evaluation::{evaluate, EvalError, Metrics};
use crate::model::{Heads, LrTransformer, ModelConfig, ModelError};
use crate::numerics::{Adam, AdamConfig, Graph, Mode, ParamStore, Real, Tensor, TensorError, Var};

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("split {0:?} is empty")]
    EmptySplit(String),
    #[error("no checkpoint in {0}")]
    MissingCheckpoint(PathBuf),
    #[error("vocabulary hash {found} does not match the checkpoint's {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_slu: f64,
    pub l_slg_nll: f64,
    pub l_slg_consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds the breakdown, deriving `total` from the components.
    pub fn compose(l_slu: f64, l_slg_nll: f64, l_slg_consistency: f64, alpha: f64, lambda: f64) -> Self {
        let total = l_slu + lambda * ((1.0 - alpha) * l_slg_nll + alpha * l_slg_consistency);
        Self { l_slu, l_slg_nll, l_slg_consistency, total }
    }
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub slu: Var,
    /// Absent when the generation task is switched off (`lambda = 0`).
    pub slg: Option<(Var, Var)>,
    pub total: Var,
}

fn batch_weights<T: Real>(mask: &[bool], scale: f64) -> Vec<T> {
    mask.iter().map(|&m| if m { T::of(scale) } else { T::zero() }).collect()
}

/// Mean over the batch of intent NLL plus summed per-token slot NLL.
pub fn loss_slu<T: Real>(g: &Graph<T>, heads: &Heads, batch: &Batch) -> Result<Var, TensorError> {
    let inv_b = 1.0 / batch.batch_size as f64;
    let intent = g.cross_entropy(heads.intent_logits, &batch.intent_ids, &vec![T::of(inv_b); batch.batch_size])?;
    let slots = g.cross_entropy(heads.slot_logits, &batch.slot_classes(), &batch_weights(&batch.token_mask(), inv_b))?;
    g.add(intent, slots)
}

/// Token-mean NLL of the generated distribution against gold tags, and
/// token-mean cross entropy against the argmax of the final slot head
/// (constant targets, so no gradient reaches the slot head through it).
pub fn loss_slg<T: Real>(
    g: &Graph<T>,
    slg_logits: Var,
    slot_logits: Var,
    batch: &Batch,
) -> Result<(Var, Var), TensorError> {
    let mask = batch.token_mask();
    let n = mask.iter().filter(|&&m| m).count().max(1);
    let w = batch_weights::<T>(&mask, 1.0 / n as f64);
    let nll = g.cross_entropy(slg_logits, &batch.slot_classes(), &w)?;
    let targets = g.value(slot_logits).argmax_rows();
    let consistency = g.cross_entropy(slg_logits, &targets, &w)?;
    Ok((nll, consistency))
}

/// `(1 - alpha) nll + alpha consistency`.
pub fn combine_slg<T: Real>(g: &Graph<T>, nll: Var, consistency: Var, alpha: f64) -> Result<Var, TensorError> {
    g.add(g.scale(nll, T::of(1.0 - alpha))?, g.scale(consistency, T::of(alpha))?)
}

/// `l_slu + lambda l_slg`.
pub fn total_loss<T: Real>(g: &Graph<T>, l_slu: Var, l_slg: Var, lambda: f64) -> Result<Var, TensorError> {
    g.add(l_slu, g.scale(l_slg, T::of(lambda))?)
}

/// Full forward pass with all losses.
pub fn forward_losses<T: Real>(
    model: &LrTransformer,
    g: &Graph<T>,
    batch: &Batch,
) -> Result<(LossVars, LossBreakdown), ModelError> {
    let (alpha, lambda) = (model.config.alpha, model.config.lambda);
    let out = model.encode(g, batch)?;
    let slu = loss_slu(g, &out.heads, batch)?;
    let scalar = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    if lambda == 0.0 {
        let b = LossBreakdown::compose(scalar(slu), 0.0, 0.0, alpha, lambda);
        return Ok((LossVars { slu, slg: None, total: slu }, b));
    }
    let y = model.slg_forward(g, &out.state, &batch.slot_ids)?;
    let (nll, cons) = loss_slg(g, y, out.heads.slot_logits, batch)?;
    let total = total_loss(g, slu, combine_slg(g, nll, cons, alpha)?, lambda)?;
    let b = LossBreakdown::compose(scalar(slu), scalar(nll), scalar(cons), alpha, lambda);
    Ok((LossVars { slu, slg: Some((nll, cons)), total }, b))
}

/// Predicts every example in inference mode, keeping the input tokens.
pub fn predict_corpus(
    model: &LrTransformer,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    examples: &[Example],
    batch_size: usize,
    refine: bool,
) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let toks: Vec<&[String]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let batch = encode_tokens(&toks, vocab);
        let pred = model.predict(store, &batch, refine)?;
        for ((ex, intent), tags) in chunk.iter().zip(pred.intents(vocab)).zip(pred.slot_tags(vocab)) {
            out.push(Example { tokens: ex.tokens.clone(), slot_labels: tags, intent: intent.to_string() });
        }
    }
    Ok(out)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub l_slu: f64,
    pub l_slg_nll: f64,
    pub l_slg_consistency: f64,
    pub valid_intent_accuracy: f64,
    pub valid_slot_f1: f64,
    pub valid_overall_accuracy: f64,
    pub valid_slot_errors: usize,
    pub valid_uncoordinated: usize,
    pub valid_bi_errors: usize,
    pub valid_ib_errors: usize,
    pub valid_other_unc: usize,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LrTransformer,
    /// Parameters of the best validation epoch.
    pub store: ParamStore<f32>,
    pub vocab: Vocabulary,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Seeded generator for one independent random stream of a run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn better(a: &Metrics, b: Option<&Metrics>) -> bool {
    match b {
        None => true,
        Some(b) => {
            a.overall_accuracy > b.overall_accuracy
                || (a.overall_accuracy == b.overall_accuracy && a.slot.f1 > b.slot.f1)
        }
    }
}

/// Trains on `train`, validates after every epoch and keeps the best
/// parameters. With `out_dir`, the best checkpoint and the metrics log are
/// written there as training proceeds.
pub fn train(
    cfg: &TrainConfig,
    train: &[Example],
    valid: &[Example],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, train, valid, out_dir, &mut |_| {})
}

/// [`train`] with a callback invoked after every epoch's validation.
pub fn train_with(
    cfg: &TrainConfig,
    train: &[Example],
    valid: &[Example],
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train".into()));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("valid".into()));
    }
    let vocab = Vocabulary::build(train)?;
    let model_cfg: ModelConfig = cfg.model.clone().with_vocab(&vocab);
    let mut store = ParamStore::<f32>::new();
    let model = LrTransformer::new(model_cfg, &mut store, &mut stream_rng(cfg.seed, INIT_STREAM))?;

    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut frozen = Vec::new();
    if cfg.zero_lrm_tables {
        for id in [model.lrm.intent_table, model.lrm.slot_table] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape))?;
            frozen.push(id);
        }
    }
    if model.config.lambda == 0.0 {
        frozen.extend(model.decoder_params(&store));
    }
    for &id in &frozen {
        adam.freeze(id);
    }
    store.zero_grad();

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let lengths: Vec<usize> = train.iter().map(Example::len).collect();
    for (i, ex) in train.iter().enumerate() {
        if ex.len() > cfg.max_len {
            return Err(CorpusError::SequenceTooLong { index: i, len: ex.len(), max: cfg.max_len }.into());
        }
    }
    let mut shuffle_rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream_rng(cfg.seed, DROPOUT_STREAM);
    let mut history = Vec::new();
    let mut best: Option<(Metrics, usize, ParamStore<f32>)> = None;

    for epoch in 1..=cfg.max_epochs {
        let batches = bucketed_batches(&lengths, cfg.batch_size, cfg.pool_batches, &mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        for (step, idx) in batches.iter().enumerate() {
            let examples: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            let batch = encode_batch(&examples, &vocab, cfg.max_len)?;
            let g = Graph::new(&store, Mode::TRAIN, dropout_rng.next_u64());
            let (vars, b) = forward_losses(&model, &g, &batch)?;
            if !b.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, detail: format!("{b:?}") });
            }
            let grads = g.backward(vars.total)?;
            drop(g);
            grads.accumulate_into(&mut store);
            // Frozen gradients must not count towards the clipping norm.
            for &id in &frozen {
                let shape = store.value(id).shape().to_vec();
                store.get_mut(id).grad = Some(Tensor::zeros(&shape));
            }
            let norm = store.clip_grad_norm(cfg.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, detail: format!("gradient norm {norm}") });
            }
            adam.step(&mut store)?;
            sum.l_slu += b.l_slu;
            sum.l_slg_nll += b.l_slg_nll;
            sum.l_slg_consistency += b.l_slg_consistency;
            sum.total += b.total;
        }
        let n = batches.len().max(1) as f64;
        let pred = predict_corpus(&model, &store, &vocab, valid, cfg.eval_batch_size, model.config.use_lrm)?;
        let m = evaluate(&pred, valid)?;
        let is_best = better(&m, best.as_ref().map(|b| &b.0));
        let entry = EpochLog {
            epoch,
            loss: sum.total / n,
            l_slu: sum.l_slu / n,
            l_slg_nll: sum.l_slg_nll / n,
            l_slg_consistency: sum.l_slg_consistency / n,
            valid_intent_accuracy: m.intent_accuracy,
            valid_slot_f1: m.slot.f1,
            valid_overall_accuracy: m.overall_accuracy,
            valid_slot_errors: m.errors.slot_errors,
            valid_uncoordinated: m.errors.uncoordinated,
            valid_bi_errors: m.errors.bi_errors,
            valid_ib_errors: m.errors.ib_errors,
            valid_other_unc: m.errors.other_unc,
            best: is_best,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?)?;
            w.flush()?;
        }
        if is_best {
            if let Some(dir) = out_dir {
                save_checkpoint(dir, &model.config, &store, &vocab, epoch)?;
            }
            best = Some((m, epoch, store.clone()));
        }
        on_epoch(&entry);
        history.push(entry);
    }
    let (best_epoch, best_store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, store),
    };
    Ok(TrainOutcome { model, store: best_store, vocab, history, best_epoch })
}

/// Loads `train` and the validation split (`valid`, falling back to `dev`).
pub fn load_training_data(dir: &Path) -> Result<(Vec<Example>, Vec<Example>), TrainError> {
    let train = load_split(dir, "train")?;
    let valid = if dir.join("valid").is_dir() { load_split(dir, "valid")? } else { load_split(dir, "dev")? };
    Ok((train, valid))
}
