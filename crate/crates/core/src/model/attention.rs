use super::layers::{Linear, ParamSource};
use super::ModelError;
use crate::numerics::{Graph, Init, ParamId, Real, TensorError, Var};

/// Learned embeddings of the clipped signed distance `j - i`, one table for
/// keys and one for values, shared by all heads of a layer.
#[derive(Clone, Debug)]
pub struct RelativeTables {
    pub key: ParamId,
    pub value: ParamId,
    pub clip: usize,
}

/// Multi-head scaled dot-product attention, optionally with relative
/// position terms added to the key scores and to the value sums.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub relative: Option<RelativeTables>,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new<T: Real>(
        src: &mut ParamSource<'_, T>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rel_clip: Option<usize>,
    ) -> Result<Self, ModelError> {
        let d_head = d_model / n_heads;
        let query = Linear::new(src, &format!("{name}.query"), d_model, d_model)?;
        let key = Linear::new(src, &format!("{name}.key"), d_model, d_model)?;
        let value = Linear::new(src, &format!("{name}.value"), d_model, d_model)?;
        let output = Linear::new(src, &format!("{name}.output"), d_model, d_model)?;
        let relative = match rel_clip {
            Some(clip) => Some(RelativeTables {
                key: src.get(&format!("{name}.rel_key"), &[2 * clip + 1, d_head], Init::Embedding)?,
                value: src.get(&format!("{name}.rel_value"), &[2 * clip + 1, d_head], Init::Embedding)?,
                clip,
            }),
            None => None,
        };
        Ok(Self { query, key, value, output, relative, n_heads, d_model })
    }

    fn split_heads<T: Real>(&self, g: &Graph<T>, x: Var, b: usize, l: usize) -> Result<Var, TensorError> {
        let h = self.n_heads;
        let x = g.reshape(x, &[b, l, h, self.d_model / h])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// `query: [B, Lq, d]`, `memory: [B, Lk, d]`, `key_mask: [B * Lk]` (true =
    /// attendable). With `causal`, query `i` only sees keys `j <= i`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        query: Var,
        memory: Var,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Var, TensorError> {
        let (qs, ks) = (g.shape(query), g.shape(memory));
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        if ks[0] != b || key_mask.len() != b * lk {
            return Err(TensorError::ShapeMismatch(format!(
                "attention query {qs:?}, memory {ks:?}, mask of {}",
                key_mask.len()
            )));
        }
        let (h, dk) = (self.n_heads, self.d_model / self.n_heads);
        let q = self.split_heads(g, self.query.forward(g, query)?, b, lq)?;
        let k = self.split_heads(g, self.key.forward(g, memory)?, b, lk)?;
        let v = self.split_heads(g, self.value.forward(g, memory)?, b, lk)?;

        let mut scores = g.bmm(q, k, true)?;
        if let Some(rel) = &self.relative {
            if lq != lk {
                return Err(TensorError::ShapeMismatch(format!("relative attention needs Lq == Lk, got {lq} vs {lk}")));
            }
            let table_t = g.transpose(g.param(rel.key), 0, 1)?;
            let q_rel = g.matmul(g.reshape(q, &[b * h, lq, dk])?, table_t)?;
            let rel_scores = g.reshape(g.rel_gather(q_rel, rel.clip)?, &[b, h, lq, lk])?;
            scores = g.add(scores, rel_scores)?;
        }
        let scores = g.scale(scores, T::of(1.0 / (dk as f64).sqrt()))?;

        let mut mask = Vec::with_capacity(b * h * lq * lk);
        for bi in 0..b {
            for _ in 0..h {
                for i in 0..lq {
                    mask.extend((0..lk).map(|j| key_mask[bi * lk + j] && (!causal || j <= i)));
                }
            }
        }
        let probs = g.softmax(scores, 3, Some(&mask))?;

        let mut ctx = g.bmm(probs, v, false)?;
        if let Some(rel) = &self.relative {
            let buckets = g.rel_scatter(g.reshape(probs, &[b * h, lq, lk])?, rel.clip)?;
            let rel_ctx = g.matmul(buckets, g.param(rel.value))?;
            ctx = g.add(ctx, g.reshape(rel_ctx, &[b, h, lq, dk])?)?;
        }
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, lq, self.d_model])?;
        self.output.forward(g, ctx)
    }
}
