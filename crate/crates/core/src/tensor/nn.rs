//! Neural-network primitives: softmax, layer norm, GELU, cross entropy.

use super::{record, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn lane_iter(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tensor {
    /// Numerically stabilized softmax along `axis` (max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::Shape(format!(
                "softmax axis {} out of range for {:?}",
                axis,
                self.shape()
            )));
        }
        let (outer, len, inner) = lane_iter(self.shape(), axis);
        let mut data = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[base + j * inner] /= sum;
                }
            }
        }
        let out = Tensor::op_output(data, self.shape().to_vec(), &[self]);
        let input = self.clone();
        let y = out.clone();
        record(&out, move |gy, grads| {
            let yv = y.data();
            let mut gx = vec![0.0; yv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for j in 0..len {
                        let idx = base + j * inner;
                        dot += gy[idx] * yv[idx];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        gx[idx] = yv[idx] * (gy[idx] - dot);
                    }
                }
            }
            drop(yv);
            grads.accum(&input, &gx);
        });
        Ok(out)
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            Error::Shape("layer_norm on 0-d tensor".into())
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain {:?} / bias {:?} must match last extent {}",
                gain.shape(),
                bias.shape(),
                d
            )));
        }
        let rows = self.len() / d;
        let mut data = vec![0.0; self.len()];
        let mut xhat = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; rows];
        {
            let xv = self.data();
            let gv = gain.data();
            let bv = bias.data();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
                // eps is a variance floor, not an additive term: above the
                // floor the map is exactly invariant to input scaling.
                let is = 1.0 / var.max(eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mu) * is;
                    xhat[r * d + j] = xh;
                    data[r * d + j] = gv[j] * xh + bv[j];
                }
            }
        }
        let out = Tensor::op_output(data, self.shape().to_vec(), &[self, gain, bias]);
        let (input, gain_c, bias_c) = (self.clone(), gain.clone(), bias.clone());
        record(&out, move |gy, grads| {
            let gv = gain_c.data();
            if input.needs_grad() {
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let base = r * d;
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gy[base + j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[base + j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = gy[base + j] * gv[j];
                        gx[base + j] =
                            inv_std[r] * (dxh - mean_dxhat - xhat[base + j] * mean_dxhat_xhat);
                    }
                }
                grads.accum(&input, &gx);
            }
            drop(gv);
            if gain_c.needs_grad() {
                let mut gg = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += gy[r * d + j] * xhat[r * d + j];
                    }
                }
                grads.accum(&gain_c, &gg);
            }
            if bias_c.needs_grad() {
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += gy[r * d + j];
                    }
                }
                grads.accum(&bias_c, &gb);
            }
        });
        Ok(out)
    }

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor {
        let xv = self.to_vec();
        let data: Vec<f64> = xv
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::op_output(data, self.shape().to_vec(), &[self]);
        let input = self.clone();
        record(&out, move |gy, grads| {
            let g: Vec<f64> = xv
                .iter()
                .zip(gy)
                .map(|(&x, &g)| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            grads.accum(&input, &g);
        });
        out
    }

    /// Mean negative log-likelihood of `targets` under `[T, V]` logits.
    /// Positions whose target equals `ignore_id` contribute nothing; if all
    /// positions are ignored the loss is 0 with zero gradient.
    pub fn cross_entropy(&self, targets: &[usize], ignore_id: usize) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy expects [T, V] logits, got {:?}",
                self.shape()
            )));
        }
        let (t, v) = (self.shape()[0], self.shape()[1]);
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                t
            )));
        }
        for &tg in targets {
            if tg != ignore_id && tg >= v {
                return Err(Error::Index(format!(
                    "target {} out of range for vocab {}",
                    tg, v
                )));
            }
        }
        let count = targets.iter().filter(|&&tg| tg != ignore_id).count();
        let mut loss = 0.0;
        {
            let xv = self.data();
            for (r, &tg) in targets.iter().enumerate() {
                if tg == ignore_id {
                    continue;
                }
                let row = &xv[r * v..(r + 1) * v];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
                loss += lse - row[tg];
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        let out = Tensor::op_output(vec![loss], vec![], &[self]);
        let input = self.clone();
        let targets_c = targets.to_vec();
        record(&out, move |gy, grads| {
            if count == 0 {
                return;
            }
            let xv = input.data();
            let scale = gy[0] / count as f64;
            let mut gx = vec![0.0; t * v];
            for (r, &tg) in targets_c.iter().enumerate() {
                if tg == ignore_id {
                    continue;
                }
                let row = &xv[r * v..(r + 1) * v];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                for j in 0..v {
                    let p = (row[j] - mx).exp() / sum;
                    gx[r * v + j] = scale * (p - if j == tg { 1.0 } else { 0.0 });
                }
            }
            drop(xv);
            grads.accum(&input, &gx);
        });
        Ok(out)
    }
}
