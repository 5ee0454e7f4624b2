//! Shape arithmetic shared by the elementwise and matmul kernels.

use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = dim_from_end(a, ndim - 1 - i);
        let db = dim_from_end(b, ndim - 1 - i);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end < shape.len() {
        shape[shape.len() - 1 - from_end]
    } else {
        1
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` viewed in an `out_ndim`-dimensional broadcast frame:
/// missing leading axes and axes of extent 1 get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_ndim: usize) -> Vec<usize> {
    let own = strides(shape);
    let mut s = vec![0usize; out_ndim];
    let offset = out_ndim - shape.len();
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Fold a gradient computed in `out_shape` back down to `in_shape` by summing
/// over broadcast axes.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let n_in: usize = in_shape.iter().product();
    let mut out = vec![0.0; n_in];
    let in_bstrides = broadcast_strides(in_shape, out_shape.len());
    let out_strides = strides(out_shape);
    let total: usize = out_shape.iter().product();
    for flat in 0..total {
        let mut rem = flat;
        let mut in_off = 0usize;
        for (d, os) in out_strides.iter().enumerate() {
            let idx = rem / os;
            rem %= os;
            in_off += idx * in_bstrides[d];
        }
        out[in_off] += grad[flat];
    }
    out
}

/// Iterate a broadcast elementwise op over two inputs.
pub(crate) fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(f64, f64) -> f64,
) -> Vec<f64> {
    let total: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape.len());
    let sb = broadcast_strides(b_shape, out_shape.len());
    let so = strides(out_shape);
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut ia = 0usize;
        let mut ib = 0usize;
        for (d, os) in so.iter().enumerate() {
            let idx = rem / os;
            rem %= os;
            ia += idx * sa[d];
            ib += idx * sb[d];
        }
        out.push(f(a[ia], b[ib]));
    }
    out
}
