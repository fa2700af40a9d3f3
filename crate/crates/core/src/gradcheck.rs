//! Central-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest `|g_fd - g_ad| / max(1, |g_fd|)` over the entries of `x`, where
/// `build` records a scalar function of the leaf it is handed.
pub fn grad_check(x: &Tensor<f64>, step: f64, build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<f64> {
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), false);
        let y = build(&mut g, v)?;
        Ok(g.value(y).item())
    };
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let y = build(&mut g, v)?;
    if !g.value(y).shape().is_empty() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    let analytic = g.backward(y)?.wrt(v);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((fd - analytic.data()[i]).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
