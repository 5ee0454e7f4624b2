//! Central finite-difference oracle for analytic gradients.

use super::{Tape, Tensor};
use crate::error::Result;

/// Coordinates checked per parameter tensor; bounds runtime on big tensors.
const MAX_COORDS: usize = 64;

/// Compares the analytic gradient of `f` (a deterministic scalar-valued
/// forward pass over `params`) against central finite differences, returning
/// the maximum relative error `|analytic - numeric| / max(|a| + |n|, 1e-6)`
/// over the sampled coordinates. The denominator floor keeps subtraction
/// roundoff on negligible gradient coordinates from dominating the result.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    {
        let tape = Tape::new();
        let loss = f()?;
        tape.backward(&loss)?;
    }
    let mut max_rel: f64 = 0.0;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
        let n = p.len();
        let count = n.min(MAX_COORDS);
        for c in 0..count {
            let idx = c * n / count;
            let eval = |delta: f64| -> Result<f64> {
                p.update_data(|d| d[idx] += delta);
                let v = f()?.item();
                p.update_data(|d| d[idx] -= delta);
                v
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel =
                (analytic[idx] - numeric).abs() / (analytic[idx].abs() + numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
