//! Differentiable array operations.

use super::broadcast::{
    broadcast_shapes, broadcast_strides, reduce_to_shape, strides, zip_broadcast,
};
use super::{record, GradMap, Tensor};
use crate::error::{Error, Result};

// c[m,n] += a[m,k] @ b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m,k] += a[m,n] @ b[k,n]^T
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * k + j] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T @ b[m,n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn permute_raw(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let out_strides = strides(&out_shape);
    let total: usize = shape.iter().product();
    let mut out = vec![0.0; total];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for (d, os) in out_strides.iter().enumerate() {
            let idx = rem / os;
            rem %= os;
            src += idx * perm_strides[d];
        }
        *slot = data[src];
    }
    (out, out_shape)
}

enum BinKind {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: BinKind) -> Result<Tensor> {
        let out_shape = broadcast_shapes(self.shape(), other.shape())?;
        let a = self.data();
        let b = other.data();
        let data = match kind {
            BinKind::Add => zip_broadcast(&a, self.shape(), &b, other.shape(), &out_shape, |x, y| x + y),
            BinKind::Sub => zip_broadcast(&a, self.shape(), &b, other.shape(), &out_shape, |x, y| x - y),
            BinKind::Mul => zip_broadcast(&a, self.shape(), &b, other.shape(), &out_shape, |x, y| x * y),
        };
        drop(a);
        drop(b);
        let out = Tensor::op_output(data, out_shape.clone(), &[self, other]);
        let (lhs, rhs) = (self.clone(), other.clone());
        match kind {
            BinKind::Add => record(&out, move |gy, grads: &mut GradMap| {
                grads.accum(&lhs, &reduce_to_shape(gy, &out_shape, lhs.shape()));
                grads.accum(&rhs, &reduce_to_shape(gy, &out_shape, rhs.shape()));
            }),
            BinKind::Sub => record(&out, move |gy, grads| {
                grads.accum(&lhs, &reduce_to_shape(gy, &out_shape, lhs.shape()));
                let mut gb = reduce_to_shape(gy, &out_shape, rhs.shape());
                gb.iter_mut().for_each(|v| *v = -*v);
                grads.accum(&rhs, &gb);
            }),
            BinKind::Mul => record(&out, move |gy, grads| {
                if lhs.needs_grad() {
                    let rv = rhs.data();
                    let ga = zip_broadcast(gy, &out_shape, &rv, rhs.shape(), &out_shape, |g, y| g * y);
                    drop(rv);
                    grads.accum(&lhs, &reduce_to_shape(&ga, &out_shape, lhs.shape()));
                }
                if rhs.needs_grad() {
                    let lv = lhs.data();
                    let gb = zip_broadcast(gy, &out_shape, &lv, lhs.shape(), &out_shape, |g, x| g * x);
                    drop(lv);
                    grads.accum(&rhs, &reduce_to_shape(&gb, &out_shape, rhs.shape()));
                }
            }),
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * c).collect();
        let out = Tensor::op_output(data, self.shape().to_vec(), &[self]);
        let input = self.clone();
        record(&out, move |gy, grads| {
            let g: Vec<f64> = gy.iter().map(|&v| v * c).collect();
            grads.accum(&input, &g);
        });
        out
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let out = Tensor::op_output(vec![total], vec![], &[self]);
        let input = self.clone();
        record(&out, move |gy, grads| {
            grads.accum_with(&input, |g| {
                for v in g.iter_mut() {
                    *v += gy[0];
                }
            });
        });
        out
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let ash = self.shape();
        let bsh = other.shape();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs >=2-d operands, got {:?} x {:?}",
                ash, bsh
            )));
        }
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner extents disagree: {:?} x {:?}",
                ash, bsh
            )));
        }
        let k = ka;
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let batch = broadcast_shapes(a_batch, b_batch)?;
        let nb: usize = batch.iter().product();
        let mut a_off = broadcast_strides(a_batch, batch.len());
        let mut b_off = broadcast_strides(b_batch, batch.len());
        // Strides in scalars, not in matrices.
        a_off.iter_mut().for_each(|s| *s *= m * k);
        b_off.iter_mut().for_each(|s| *s *= k * n);
        let batch_strides = strides(&batch);
        let offsets = move |flat: usize, per_dim: &[usize]| -> usize {
            let mut rem = flat;
            let mut off = 0;
            for (d, bs) in batch_strides.iter().enumerate() {
                let idx = rem / bs;
                rem %= bs;
                off += idx * per_dim[d];
            }
            off
        };

        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; nb * m * n];
        {
            let av = self.data();
            let bv = other.data();
            for ib in 0..nb {
                let ao = offsets(ib, &a_off);
                let bo = offsets(ib, &b_off);
                gemm_nn(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut data[ib * m * n..(ib + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out = Tensor::op_output(data, out_shape, &[self, other]);
        let (lhs, rhs) = (self.clone(), other.clone());
        record(&out, move |gy, grads| {
            if lhs.needs_grad() {
                let bv = rhs.data();
                let mut ga = vec![0.0; lhs.len()];
                for ib in 0..nb {
                    let ao = offsets(ib, &a_off);
                    let bo = offsets(ib, &b_off);
                    gemm_nt(
                        &gy[ib * m * n..(ib + 1) * m * n],
                        &bv[bo..bo + k * n],
                        &mut ga[ao..ao + m * k],
                        m,
                        n,
                        k,
                    );
                }
                drop(bv);
                grads.accum(&lhs, &ga);
            }
            if rhs.needs_grad() {
                let av = lhs.data();
                let mut gb = vec![0.0; rhs.len()];
                for ib in 0..nb {
                    let ao = offsets(ib, &a_off);
                    let bo = offsets(ib, &b_off);
                    gemm_tn(
                        &av[ao..ao + m * k],
                        &gy[ib * m * n..(ib + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                        m,
                        k,
                        n,
                    );
                }
                drop(av);
                grads.accum(&rhs, &gb);
            }
        });
        Ok(out)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let ndim = self.shape().len();
        let mut seen = vec![false; ndim];
        if axes.len() != ndim || axes.iter().any(|&a| a >= ndim || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!(
                "invalid permutation {:?} for shape {:?}",
                axes,
                self.shape()
            )));
        }
        let (data, out_shape) = permute_raw(&self.data(), self.shape(), axes);
        let out = Tensor::op_output(data, out_shape.clone(), &[self]);
        let input = self.clone();
        let mut inverse = vec![0usize; ndim];
        for (d, &a) in axes.iter().enumerate() {
            inverse[a] = d;
        }
        record(&out, move |gy, grads| {
            let (g, _) = permute_raw(gy, &out_shape, &inverse);
            grads.accum(&input, &g);
        });
        Ok(out)
    }

    /// Transpose of the last two axes.
    pub fn t(&self) -> Result<Tensor> {
        let ndim = self.shape().len();
        if ndim < 2 {
            return Err(Error::Shape(format!(
                "transpose needs >=2-d, got {:?}",
                self.shape()
            )));
        }
        let mut axes: Vec<usize> = (0..ndim).collect();
        axes.swap(ndim - 2, ndim - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        let out = Tensor::op_output(self.to_vec(), shape.to_vec(), &[self]);
        let input = self.clone();
        record(&out, move |gy, grads| {
            grads.accum(&input, gy);
        });
        Ok(out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let ndim = first.shape().len();
        if axis >= ndim {
            return Err(Error::Shape(format!(
                "concat axis {} out of range for {:?}",
                axis,
                first.shape()
            )));
        }
        for p in parts {
            if p.shape().len() != ndim
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first.shape()[d])
            {
                return Err(Error::Shape(format!(
                    "concat shapes incompatible: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let axis_total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                let d = p.data();
                data.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let refs: Vec<&Tensor> = owned.iter().collect();
        let out = Tensor::op_output(data, out_shape, &refs);
        record(&out, move |gy, grads| {
            let row: usize = axis_total * inner;
            let mut start_in_row = 0usize;
            for p in &owned {
                let chunk = p.shape()[axis] * inner;
                if p.needs_grad() {
                    let mut g = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * row + start_in_row;
                        g.extend_from_slice(&gy[base..base + chunk]);
                    }
                    grads.accum(p, &g);
                }
                start_in_row += chunk;
            }
        });
        Ok(out)
    }

    /// Row gather from a `[V, D]` table; gradients scatter-add back.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if table.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be 2-d, got {:?}",
                table.shape()
            )));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let tv = table.data();
            for &id in ids {
                if id >= v {
                    return Err(Error::Index(format!(
                        "embedding id {} out of range for vocab {}",
                        id, v
                    )));
                }
                data.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let out = Tensor::op_output(data, vec![ids.len(), d], &[table]);
        let table_c = table.clone();
        let ids_c = ids.to_vec();
        record(&out, move |gy, grads| {
            grads.accum_with(&table_c, |g| {
                for (row, &id) in ids_c.iter().enumerate() {
                    let src = &gy[row * d..(row + 1) * d];
                    let dst = &mut g[id * d..(id + 1) * d];
                    for (dv, sv) in dst.iter_mut().zip(src) {
                        *dv += sv;
                    }
                }
            });
        });
        Ok(out)
    }
}
