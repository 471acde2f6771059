use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest disagreement between reverse-mode gradients and central
/// differences, as a normwise relative error
/// `max_j |a_j - n_j| / max(max_j |a_j|, max_j |n_j|)` taken over all inputs.
///
/// `f` builds a scalar on a fresh tape from leaves bound to `point`. Returns
/// `0` when both gradients vanish.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
    }
    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = pt.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars = point.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = point.to_vec();
    for (i, v) in vars.iter().enumerate() {
        analytic.extend(grads.wrt_or_zeros(*v, point[i].numel()));
        for j in 0..point[i].numel() {
            let x0 = point[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}
