use super::attention::MultiHeadAttention;
use super::layers::{residual, FeedForward, LayerNorm, Linear, ParamSource};
use super::ModelError;
use crate::corpus::SPECIALS;
use crate::numerics::{Graph, Init, ParamId, Real, TensorError, Var};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub output_norm: LayerNorm,
    pub dropout: f64,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
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
            self_attention: MultiHeadAttention::new(src, &format!("{name}.self_attention"), d_model, n_heads, Some(rel_clip))?,
            self_norm: LayerNorm::new(src, &format!("{name}.self_norm"), d_model)?,
            cross_attention: MultiHeadAttention::new(src, &format!("{name}.cross_attention"), d_model, n_heads, None)?,
            cross_norm: LayerNorm::new(src, &format!("{name}.cross_norm"), d_model)?,
            feed_forward: FeedForward::new(src, &format!("{name}.feed_forward"), d_model, d_ff)?,
            output_norm: LayerNorm::new(src, &format!("{name}.output_norm"), d_model)?,
            dropout,
        })
    }

    /// `x: [B, T, d]` with `self_mask: [B * T]`; `memory: [B, L, d]` with
    /// `memory_mask: [B * L]`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        x: Var,
        self_mask: &[bool],
        memory: Var,
        memory_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let a = self.self_attention.forward(g, x, x, self_mask, true)?;
        let x = residual(g, x, a, &self.self_norm, self.dropout)?;
        let c = self.cross_attention.forward(g, x, memory, memory_mask, false)?;
        let x = residual(g, x, c, &self.cross_norm, self.dropout)?;
        let f = self.feed_forward.forward(g, x)?;
        residual(g, x, f, &self.output_norm, self.dropout)
    }
}

/// Teacher-forced slot label generator used as an auxiliary training task.
#[derive(Clone, Debug)]
pub struct SlgDecoder {
    /// `[n_slot_ids, d_model]`, indexed by slot id (PAD and BOS included).
    pub label_embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub output: Linear,
    pub d_model: usize,
    pub dropout: f64,
}

impl SlgDecoder {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Real>(
        src: &mut ParamSource<'_, T>,
        name: &str,
        n_layers: usize,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        rel_clip: usize,
        dropout: f64,
        n_slot_ids: usize,
        n_slot_tags: usize,
    ) -> Result<Self, ModelError> {
        let label_embedding = src.get(&format!("{name}.label_embedding"), &[n_slot_ids, d_model], Init::Embedding)?;
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(src, &format!("{name}.layer{i}"), d_model, d_ff, n_heads, rel_clip, dropout))
            .collect::<Result<_, _>>()?;
        let output = Linear::new(src, &format!("{name}.output"), d_model, n_slot_tags)?;
        Ok(Self { label_embedding, layers, output, d_model, dropout })
    }

    /// Decoder input ids: BOS followed by the gold labels shifted right by one.
    pub fn shifted_inputs(gold_slots: &[usize], batch_size: usize, t: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(batch_size * t);
        for b in 0..batch_size {
            ids.push(SPECIALS.slot_bos);
            if t > 0 {
                ids.extend_from_slice(&gold_slots[b * t..b * t + t - 1]);
            }
        }
        ids.truncate(batch_size * t);
        ids
    }

    /// Logits `[B, T, d_s]`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        gold_slots: &[usize],
        token_mask: &[bool],
        memory: Var,
        memory_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let b = g.shape(memory)[0];
        if b == 0 || gold_slots.len() % b != 0 || token_mask.len() != gold_slots.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} gold slots and {} mask entries for batch of {b}",
                gold_slots.len(),
                token_mask.len()
            )));
        }
        let t = gold_slots.len() / b;
        let ids = Self::shifted_inputs(gold_slots, b, t);
        let x = g.embedding(g.param(self.label_embedding), &ids, &[b, t])?;
        let x = g.scale(x, T::of((self.d_model as f64).sqrt()))?;
        let mut x = g.dropout(x, self.dropout)?;
        for layer in &self.layers {
            x = layer.forward(g, x, token_mask, memory, memory_mask)?;
        }
        self.output.forward(g, x)
    }
}
