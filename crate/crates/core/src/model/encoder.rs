use super::attention::MultiHeadAttention;
use super::layers::{residual, FeedForward, LayerNorm, Linear, ParamSource};
use super::ModelError;
use crate::numerics::{Graph, Real, TensorError, Var};

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub output_norm: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub(crate) fn new<T: Real>(
        src: &mut ParamSource<'_, T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        rel_clip: usize,
        dropout: f64,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            attention: MultiHeadAttention::new(src, &format!("{name}.attention"), d_model, n_heads, Some(rel_clip))?,
            attention_norm: LayerNorm::new(src, &format!("{name}.attention_norm"), d_model)?,
            feed_forward: FeedForward::new(src, &format!("{name}.feed_forward"), d_model, d_ff)?,
            output_norm: LayerNorm::new(src, &format!("{name}.output_norm"), d_model)?,
            dropout,
        })
    }

    /// `x: [B, L, d]`, `pad_mask: [B * L]`. Shape preserving.
    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var, pad_mask: &[bool]) -> Result<Var, TensorError> {
        let a = self.attention.forward(g, x, x, pad_mask, false)?;
        let x = residual(g, x, a, &self.attention_norm, self.dropout)?;
        let f = self.feed_forward.forward(g, x)?;
        residual(g, x, f, &self.output_norm, self.dropout)
    }
}

/// Logits of the intent and slot heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    /// `[B, d_i]`
    pub intent_logits: Var,
    /// `[B, T, d_s]`
    pub slot_logits: Var,
}

/// Intent from the CLS state; slot `j` from `h_j ⊕ h_cls` through a
/// `[2 d_model, d_s]` weight.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub intent: Linear,
    pub slot: Linear,
    pub d_model: usize,
}

impl Classifier {
    pub(crate) fn new<T: Real>(
        src: &mut ParamSource<'_, T>,
        name: &str,
        d_model: usize,
        n_intents: usize,
        n_slot_tags: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            intent: Linear::new(src, &format!("{name}.intent"), d_model, n_intents)?,
            slot: Linear::new(src, &format!("{name}.slot"), 2 * d_model, n_slot_tags)?,
            d_model,
        })
    }

    /// `hidden: [B, 1 + T, d]`.
    ///
    /// The concatenation is never materialized: the token half and the CLS
    /// half of the slot weight are applied separately, and the CLS
    /// contribution is computed once per utterance and broadcast over positions.
    pub fn forward<T: Real>(&self, g: &Graph<T>, hidden: Var) -> Result<Heads, TensorError> {
        let s = g.shape(hidden);
        let (b, l, d) = (s[0], s[1], s[2]);
        let cls = g.narrow(hidden, 1, 0, 1)?;
        let tokens = g.narrow(hidden, 1, 1, l - 1)?;
        let intent_logits = self.intent.forward(g, g.reshape(cls, &[b, d])?)?;

        let w = g.param(self.slot.weight);
        let from_tokens = g.matmul_rows(tokens, w, 0)?;
        let from_cls = g.add(g.matmul_rows(cls, w, d)?, g.param(self.slot.bias))?;
        let slot_logits = g.add(from_tokens, from_cls)?;
        Ok(Heads { intent_logits, slot_logits })
    }

    /// Reference form that builds `h_j ⊕ h_cls` explicitly.
    pub fn forward_concat<T: Real>(&self, g: &Graph<T>, hidden: Var) -> Result<Heads, TensorError> {
        let s = g.shape(hidden);
        let (b, l, d) = (s[0], s[1], s[2]);
        let flat = g.reshape(hidden, &[b * l, d])?;
        let cls_rows: Vec<usize> = (0..b).flat_map(|bi| std::iter::repeat_n(bi * l, l - 1)).collect();
        let tok_rows: Vec<usize> = (0..b).flat_map(|bi| (1..l).map(move |j| bi * l + j)).collect();
        let cls = g.index_select(flat, &cls_rows)?;
        let tok = g.index_select(flat, &tok_rows)?;
        let joined = g.concat(&[tok, cls], 1)?;
        let slot = self.slot.forward(g, joined)?;
        let n_slots = g.shape(slot)[1];
        let slot_logits = g.reshape(slot, &[b, l - 1, n_slots])?;
        let cls0 = g.index_select(flat, &(0..b).map(|bi| bi * l).collect::<Vec<_>>())?;
        let intent_logits = self.intent.forward(g, cls0)?;
        Ok(Heads { intent_logits, slot_logits })
    }
}
