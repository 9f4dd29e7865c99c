use super::{Graph, Mode, ParamStore, Real, TensorError, Var};

/// Relative errors are measured as `|a - n| / max(|a|, |n|, ABS_FLOOR)` so that
/// entries whose true gradient is ~0 are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// finite differences `(f(θ+eps) - f(θ-eps)) / 2eps` for every entry of every
/// trainable parameter in `store`.
///
/// `f` must be deterministic; it is evaluated on graphs in [`Mode::EVAL_GRAD`]
/// (dropout off).
pub fn grad_check<T, F>(f: F, store: &ParamStore<T>, eps: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    T: Real,
    F: Fn(&Graph<T>) -> Result<Var, TensorError>,
{
    let analytic = {
        let g = Graph::new(store, Mode::EVAL_GRAD, 0);
        let loss = f(&g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<T>| -> Result<f64, TensorError> {
        let g = Graph::new(s, Mode::EVAL_GRAD, 0);
        let loss = f(&g)?;
        Ok(g.value(loss).item().to_f64().unwrap())
    };

    let mut report = GradCheckReport::default();
    let mut worst: Option<TensorError> = None;
    let mut worst_err = 0.0;
    for (id, name, param) in store.iter() {
        if !param.requires_grad {
            continue;
        }
        let grad = analytic.param(id).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; param.value.numel()]);
        let mut check =
            ParamCheck { name: name.to_string(), max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for (k, &a) in grad.iter().enumerate() {
            let mut probe = store.clone();
            let base = param.value.data()[k].to_f64().unwrap();
            probe.get_mut(id).value.data_mut()[k] = T::of(base + eps);
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = T::of(base - eps);
            let minus = eval(&probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
            if err > tol && err > worst_err {
                worst_err = err;
                worst = Some(TensorError::GradMismatch { name: name.to_string(), index: k, analytic: a, numeric });
            }
        }
        report.params.push(check);
    }
    match worst {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("theta", Tensor::scalar(3.0)).unwrap();
        let report = grad_check(
            |g| {
                let t = g.param(id);
                let sq = g.mul(t, t)?;
                g.sum(sq)
            },
            &store,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!((report.params[0].analytic - 6.0).abs() < 1e-12);
        assert!((report.params[0].numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("theta", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let report = grad_check(
            |g| {
                let t = g.param(id);
                let z = g.scale(t, 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 7.0)
            },
            &store,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert_eq!(report.params[0].analytic, 0.0);
        assert_eq!(report.params[0].numeric, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly 0 has a one-sided derivative; the central difference sees 0.5
        let mut store = ParamStore::<f64>::new();
        store.insert("theta", Tensor::scalar(0.0)).unwrap();
        let id = store.id("theta").unwrap();
        let err = grad_check(
            |g| {
                let r = g.relu(g.param(id))?;
                g.sum(r)
            },
            &store,
            1e-3,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::GradMismatch { .. }));
    }
}
