use super::encoder::{Classifier, Heads};
use super::layers::ParamSource;
use super::ModelError;
use crate::numerics::{Graph, Init, ParamId, Real, Tensor, TensorError, Var};

/// Result-embedding tables of the refine step.
#[derive(Clone, Debug)]
pub struct LrmEmbeddings {
    /// `[d_i, d_model]`
    pub intent_table: ParamId,
    /// `[d_s, d_model]`
    pub slot_table: ParamId,
}

impl LrmEmbeddings {
    pub(crate) fn new<T: Real>(
        src: &mut ParamSource<'_, T>,
        name: &str,
        d_model: usize,
        n_intents: usize,
        n_slot_tags: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            intent_table: src.get(&format!("{name}.intent_table"), &[n_intents, d_model], Init::Embedding)?,
            slot_table: src.get(&format!("{name}.slot_table"), &[n_slot_tags, d_model], Init::Embedding)?,
        })
    }
}

/// Output of one refine step.
#[derive(Clone, Copy, Debug)]
pub struct Refined {
    pub hidden: Var,
    pub preliminary: Heads,
    /// `[B, d_model]` utterance-level slot embedding.
    pub slot_summary: Var,
}

fn one_hot<T: Real>(g: &Graph<T>, logits: Var) -> Var {
    let v = g.value(logits);
    let width = *v.shape().last().unwrap_or(&1);
    let mut data = vec![T::zero(); v.numel()];
    for (row, k) in v.argmax_rows().into_iter().enumerate() {
        data[row * width + k] = T::one();
    }
    g.constant(Tensor::new(v.shape(), data).expect("same shape"))
}

/// Classifies `hidden: [B, 1 + T, d]`, embeds the result distributions and
/// adds them back onto the hidden states. `token_mask: [B * T]`.
pub fn lrm_refine<T: Real>(
    g: &Graph<T>,
    hidden: Var,
    token_mask: &[bool],
    classifier: &Classifier,
    tables: &LrmEmbeddings,
    argmax: bool,
) -> Result<Refined, TensorError> {
    let s = g.shape(hidden);
    let (b, t, d) = (s[0], s[1] - 1, s[2]);
    if token_mask.len() != b * t {
        return Err(TensorError::ShapeMismatch(format!("token mask of {} for hidden {s:?}", token_mask.len())));
    }
    let preliminary = classifier.forward(g, hidden)?;
    let (intent_dist, slot_dist) = if argmax {
        (one_hot(g, preliminary.intent_logits), one_hot(g, preliminary.slot_logits))
    } else {
        (g.softmax(preliminary.intent_logits, 1, None)?, g.softmax(preliminary.slot_logits, 2, None)?)
    };
    let e_intent = g.matmul(intent_dist, g.param(tables.intent_table))?;
    let e_slots = g.matmul(slot_dist, g.param(tables.slot_table))?;

    let padded = token_mask.contains(&false);
    let dim_mask: Option<Vec<bool>> =
        padded.then(|| token_mask.iter().flat_map(|&m| std::iter::repeat_n(m, d)).collect());
    let weights = g.softmax(e_slots, 1, dim_mask.as_deref())?;
    let slot_summary = g.sum_axis(g.mul(weights, e_slots)?, 1)?;

    let cls_delta = g.reshape(g.add(e_intent, slot_summary)?, &[b, 1, d])?;
    let tok_delta = if padded {
        let keep = Tensor::new(&[b, t, 1], token_mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())?;
        g.mul(e_slots, g.constant(keep))?
    } else {
        e_slots
    };
    let delta = g.concat(&[cls_delta, tok_delta], 1)?;
    Ok(Refined { hidden: g.add(hidden, delta)?, preliminary, slot_summary })
}
