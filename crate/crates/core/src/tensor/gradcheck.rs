//! Central finite-difference verification of tape gradients.

use super::{Graph, Tensor};
use crate::error::{CatsError, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare the tape gradient of `f` (a scalar-valued function of one input
/// tensor) against central finite differences at `x0`.
///
/// Returns the maximum relative error over coordinates, with denominator
/// max(|g_ad|, |g_fd|, 1e-8). `f` must be deterministic (dropout disabled);
/// non-finite values abort with a numeric error.
pub fn grad_check<F>(f: F, x0: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Tensor) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let x = g.leaf(x0, shape, true);
    let loss = f(&mut g, x)?;
    if g.shape(loss).iter().product::<usize>() != 1 {
        return Err(CatsError::shape("grad_check", "f must return a scalar"));
    }
    g.backward(loss)?;
    let ad = g
        .grad(x)
        .ok_or_else(|| CatsError::Numeric("no gradient reached the input".into()))?
        .to_vec();

    let eval = |pt: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(pt, shape, false);
        let loss = f(&mut g, x)?;
        let v = g.value(loss);
        if !v.is_finite() {
            return Err(CatsError::Numeric(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    let mut pt = x0.to_vec();
    for i in 0..pt.len() {
        let orig = pt[i];
        pt[i] = orig + h;
        let fp = eval(&pt)?;
        pt[i] = orig - h;
        let fm = eval(&pt)?;
        pt[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        if !fd.is_finite() || !ad[i].is_finite() {
            return Err(CatsError::Numeric(format!(
                "non-finite gradient at coordinate {i}: ad={} fd={fd}",
                ad[i]
            )));
        }
        let denom = ad[i].abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max((ad[i] - fd).abs() / denom);
    }
    Ok(max_rel)
}
