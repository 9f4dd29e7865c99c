//! The LR-Transformer: a relative-position Transformer encoder with a
//! mid-stack refine step and joint intent / slot heads, plus a slot label
//! generation decoder that only runs during training.

mod attention;
mod decoder;
mod encoder;
mod layers;
mod lrm;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attention::{MultiHeadAttention, RelativeTables};
pub use decoder::{DecoderLayer, SlgDecoder};
pub use encoder::{Classifier, EncoderLayer, Heads};
pub use layers::{FeedForward, LayerNorm, Linear};
pub use lrm::{lrm_refine, LrmEmbeddings, Refined};

use crate::corpus::{Batch, Vocabulary};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Tensor, TensorError, Var};
use layers::ParamSource;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter {0} is missing from the checkpoint")]
    MissingParam(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("the slot label decoder only runs in training mode")]
    CalledAtInference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Width of the result embeddings; must equal `d_model`.
    pub d_e: usize,
    /// Number of encoder layers that run before the first refine step.
    pub lrm_after_layer: usize,
    /// Number of consecutive layers followed by a refine step.
    pub lrm_count: usize,
    pub use_lrm: bool,
    /// Embed the argmax label instead of the full distribution.
    pub lrm_argmax: bool,
    /// Give the refine step its own classifier instead of sharing the final one.
    pub separate_lrm_classifier: bool,
    pub rel_clip: usize,
    pub n_tokens: usize,
    /// Size of the decoder label space (slot tags plus PAD and BOS).
    pub n_slot_ids: usize,
    pub d_i: usize,
    pub d_s: usize,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            d_ff: 512,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 8,
            dropout: 0.3,
            d_e: 128,
            lrm_after_layer: 2,
            lrm_count: 1,
            use_lrm: true,
            lrm_argmax: false,
            separate_lrm_classifier: false,
            rel_clip: 16,
            n_tokens: 0,
            n_slot_ids: 0,
            d_i: 0,
            d_s: 0,
            alpha: 0.35,
            lambda: 0.75,
        }
    }
}

impl ModelConfig {
    /// Fills the label-space sizes from a vocabulary.
    pub fn with_vocab(mut self, vocab: &Vocabulary) -> Self {
        self.n_tokens = vocab.num_tokens();
        self.n_slot_ids = vocab.num_slot_ids();
        self.d_i = vocab.num_intents();
        self.d_s = vocab.num_slot_tags();
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_e != self.d_model {
            return bad(format!("d_e {} must equal d_model {}", self.d_e, self.d_model));
        }
        if self.lrm_after_layer < 1 || self.lrm_count < 1 || self.lrm_after_layer + self.lrm_count > self.n_enc_layers
        {
            return bad(format!(
                "refine after layers {}..{} does not fit {} encoder layers",
                self.lrm_after_layer,
                self.lrm_after_layer + self.lrm_count,
                self.n_enc_layers
            ));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be a finite non-negative number", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.d_ff == 0 || self.n_tokens == 0 || self.d_i == 0 || self.d_s == 0 {
            return bad("d_ff, n_tokens, d_i and d_s must be positive".into());
        }
        if self.n_slot_ids < self.d_s + Vocabulary::SLOT_OFFSET {
            return bad(format!("n_slot_ids {} cannot hold {} slot tags", self.n_slot_ids, self.d_s));
        }
        Ok(())
    }

    /// Whether a refine step follows encoder layer `layer` (1-based).
    pub fn refines_after(&self, layer: usize) -> bool {
        layer >= self.lrm_after_layer && layer < self.lrm_after_layer + self.lrm_count
    }
}

/// Final hidden states and the padding mask they were computed under.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// `[B, 1 + T, d_model]`
    pub hidden: Var,
    /// `[B * (1 + T)]`
    pub pad_mask: Vec<bool>,
    /// `[B * T]`
    pub token_mask: Vec<bool>,
    pub batch_size: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub state: EncoderState,
    /// One entry per refine step.
    pub preliminary: Vec<Heads>,
    pub heads: Heads,
}

/// Materialized distributions and their argmax, trimmed to real tokens.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B, d_i]`
    pub intent_probs: Tensor<f64>,
    /// `[B, T, d_s]`; rows at padded positions are meaningless.
    pub slot_probs: Tensor<f64>,
    pub intent_argmax: Vec<usize>,
    /// Classifier classes per utterance, one per real token.
    pub slot_argmax: Vec<Vec<usize>>,
}

impl Prediction {
    pub fn from_heads<T: Real>(g: &Graph<T>, heads: &Heads, lengths: &[usize]) -> Result<Self, TensorError> {
        let intent = g.value(g.softmax(heads.intent_logits, 1, None)?).cast::<f64>();
        let slots = g.value(g.softmax(heads.slot_logits, 2, None)?).cast::<f64>();
        let t = slots.shape()[1];
        let flat = slots.argmax_rows();
        let slot_argmax = lengths.iter().enumerate().map(|(b, &n)| flat[b * t..b * t + n].to_vec()).collect();
        Ok(Self { intent_argmax: intent.argmax_rows(), intent_probs: intent, slot_probs: slots, slot_argmax })
    }

    pub fn intents<'v>(&self, vocab: &'v Vocabulary) -> Vec<&'v str> {
        self.intent_argmax.iter().map(|&i| vocab.intent(i)).collect()
    }

    pub fn slot_tags(&self, vocab: &Vocabulary) -> Vec<Vec<String>> {
        self.slot_argmax
            .iter()
            .map(|row| row.iter().map(|&c| vocab.slot_class_tag(c).to_string()).collect())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LrTransformer {
    pub config: ModelConfig,
    pub token_embedding: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub classifier: Classifier,
    pub lrm: LrmEmbeddings,
    pub decoder: SlgDecoder,
    pub lrm_classifier: Option<Classifier>,
}

impl LrTransformer {
    /// Registers freshly initialized parameters in `store`. Parameter order
    /// does not depend on the refine flags, so the same seed gives the same
    /// shared weights whether or not the refine step is enabled.
    pub fn new<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut dyn RngCore) -> Result<Self, ModelError> {
        Self::build(config, &mut ParamSource::Init { store, rng })
    }

    /// Looks up every parameter in an existing store.
    pub fn bind<T: Real>(config: ModelConfig, store: &ParamStore<T>) -> Result<Self, ModelError> {
        Self::build(config, &mut ParamSource::Bind { store })
    }

    fn build<T: Real>(config: ModelConfig, src: &mut ParamSource<'_, T>) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let token_embedding = src.get("token_embedding", &[c.n_tokens, c.d_model], Init::Embedding)?;
        let encoder = (0..c.n_enc_layers)
            .map(|i| EncoderLayer::new(src, &format!("encoder.layer{i}"), c.d_model, c.d_ff, c.n_heads, c.rel_clip, c.dropout))
            .collect::<Result<_, _>>()?;
        let classifier = Classifier::new(src, "classifier", c.d_model, c.d_i, c.d_s)?;
        let lrm = LrmEmbeddings::new(src, "lrm", c.d_model, c.d_i, c.d_s)?;
        let decoder = SlgDecoder::new(
            src,
            "slg",
            c.n_dec_layers,
            c.d_model,
            c.d_ff,
            c.n_heads,
            c.rel_clip,
            c.dropout,
            c.n_slot_ids,
            c.d_s,
        )?;
        let lrm_classifier = if c.separate_lrm_classifier {
            Some(Classifier::new(src, "lrm_classifier", c.d_model, c.d_i, c.d_s)?)
        } else {
            None
        };
        Ok(Self { config, token_embedding, encoder, classifier, lrm, decoder, lrm_classifier })
    }

    /// Parameters of the training-only decoder.
    pub fn decoder_params<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.iter().filter(|(_, name, _)| name.starts_with("slg.")).map(|(id, _, _)| id).collect()
    }

    /// `[B, 1 + T, d_model]` scaled token embeddings with dropout.
    pub fn embed<T: Real>(&self, g: &Graph<T>, batch: &Batch) -> Result<Var, TensorError> {
        let x = g.embedding(g.param(self.token_embedding), &batch.token_ids, &[batch.batch_size, batch.seq_len()])?;
        let x = g.scale(x, T::of((self.config.d_model as f64).sqrt()))?;
        g.dropout(x, self.config.dropout)
    }

    pub fn classify<T: Real>(&self, g: &Graph<T>, hidden: Var) -> Result<Heads, TensorError> {
        self.classifier.forward(g, hidden)
    }

    pub fn encode<T: Real>(&self, g: &Graph<T>, batch: &Batch) -> Result<Encoded, ModelError> {
        self.encode_with(g, batch, self.config.use_lrm)
    }

    /// Forward pass with the refine step switched on or off explicitly.
    pub fn encode_with<T: Real>(&self, g: &Graph<T>, batch: &Batch, refine: bool) -> Result<Encoded, ModelError> {
        let token_mask = batch.token_mask();
        let mut hidden = self.embed(g, batch)?;
        let mut preliminary = Vec::new();
        let lrm_classifier = self.lrm_classifier.as_ref().unwrap_or(&self.classifier);
        for (i, layer) in self.encoder.iter().enumerate() {
            hidden = layer.forward(g, hidden, &batch.pad_mask)?;
            if refine && self.config.refines_after(i + 1) {
                let r = lrm_refine(g, hidden, &token_mask, lrm_classifier, &self.lrm, self.config.lrm_argmax)?;
                hidden = r.hidden;
                preliminary.push(r.preliminary);
            }
        }
        let heads = self.classify(g, hidden)?;
        let state = EncoderState {
            hidden,
            pad_mask: batch.pad_mask.clone(),
            token_mask,
            batch_size: batch.batch_size,
            max_len: batch.max_len,
        };
        Ok(Encoded { state, preliminary, heads })
    }

    /// Slot label generation logits `[B, T, d_s]`, teacher-forced on
    /// `gold_slots` (slot ids, `[B * T]`).
    pub fn slg_forward<T: Real>(
        &self,
        g: &Graph<T>,
        state: &EncoderState,
        gold_slots: &[usize],
    ) -> Result<Var, ModelError> {
        if !g.is_train() {
            return Err(ModelError::CalledAtInference);
        }
        Ok(self.decoder.forward(g, gold_slots, &state.token_mask, state.hidden, &state.pad_mask)?)
    }

    /// Inference-mode prediction for a batch.
    pub fn predict(&self, store: &ParamStore<f32>, batch: &Batch, refine: bool) -> Result<Prediction, ModelError> {
        let g = Graph::new(store, crate::numerics::Mode::INFERENCE, 0);
        let out = self.encode_with(&g, batch, refine)?;
        Ok(Prediction::from_heads(&g, &out.heads, &batch.lengths)?)
    }
}
