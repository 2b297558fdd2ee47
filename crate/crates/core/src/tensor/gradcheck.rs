use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// max over coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Checks `d f / d x` for a scalar-valued graph function `f`.
///
/// `f` receives a fresh graph and the recorded input; it must return a
/// single-element output. It is evaluated once for the analytic gradient
/// and twice per coordinate for the central difference. Stop-gradient
/// nodes keep their unperturbed values in the difference quotients.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x);
    let out = f(&mut g, xv)?;
    let pinned = g.detached_values();

    let eval = |input: Tensor<T>| -> Result<f64> {
        let mut g = Graph::with_pinned_detach(pinned.clone());
        let v = g.constant(input);
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(Error::Backward(format!(
                "grad_check needs a scalar function, got shape {:?}",
                val.shape()
            )));
        }
        let y = val.item().as_f64();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(y)
    };

    let analytic: Vec<f64> = if g.requires_grad(out) {
        g.backward(out)?;
        match g.grad(xv) {
            Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; x.numel()],
        }
    } else {
        // Output independent of the input.
        vec![0.0; x.numel()]
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let step = T::lit(h);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        // Use the actually representable step width.
        let width = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        numeric.push((eval(plus)? - eval(minus)?) / width);
    }

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max);
    if !max_rel_err.is_finite() {
        return Err(Error::NonFinite("grad_check comparison".into()));
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        tol,
    })
}
