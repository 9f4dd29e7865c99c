use rand::RngCore;

use super::ModelError;
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, TensorError, Var};

/// Where layer constructors obtain their parameters: either freshly
/// initialized into a store, or looked up (with shape checks) in a loaded one.
pub(crate) enum ParamSource<'a, T: Real> {
    Init { store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore },
    Bind { store: &'a ParamStore<T> },
}

impl<T: Real> ParamSource<'_, T> {
    pub(crate) fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId, ModelError> {
        match self {
            ParamSource::Init { store, rng } => Ok(store.init(name, shape, init, rng)?),
            ParamSource::Bind { store } => {
                let id = store.id(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
                let found = store.value(id).shape();
                if found != shape {
                    return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
                        "{name}: checkpoint has {found:?}, config expects {shape:?}"
                    ))));
                }
                Ok(id)
            }
        }
    }
}

/// `x @ W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new<T: Real>(
        src: &mut ParamSource<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            weight: src.get(&format!("{name}.weight"), &[d_in, d_out], Init::Xavier)?,
            bias: src.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var, TensorError> {
        let y = g.matmul(x, g.param(self.weight))?;
        g.add(y, g.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub(crate) fn new<T: Real>(src: &mut ParamSource<'_, T>, name: &str, d: usize) -> Result<Self, ModelError> {
        Ok(Self {
            gamma: src.get(&format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: src.get(&format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var, TensorError> {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta), Self::EPS)
    }
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub(crate) fn new<T: Real>(
        src: &mut ParamSource<'_, T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            inner: Linear::new(src, &format!("{name}.inner"), d_model, d_ff)?,
            outer: Linear::new(src, &format!("{name}.outer"), d_ff, d_model)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var, TensorError> {
        let h = g.relu(self.inner.forward(g, x)?)?;
        self.outer.forward(g, h)
    }
}

/// Post-norm residual block: `norm(x + dropout(sublayer))`.
pub(crate) fn residual<T: Real>(
    g: &Graph<T>,
    x: Var,
    sublayer: Var,
    norm: &LayerNorm,
    dropout: f64,
) -> Result<Var, TensorError> {
    let s = g.dropout(sublayer, dropout)?;
    let sum = g.add(x, s)?;
    norm.forward(g, sum)
}
