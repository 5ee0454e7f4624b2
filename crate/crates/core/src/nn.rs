//! Transformer building blocks shared by the encoder, connector, and decoder.
//!
//! Weights are initialized N(0, 0.02), biases and norm offsets at zero,
//! norm gains at one (bert convention). `freeze` replaces every parameter
//! with a constant copy so it leaves the differentiation set entirely.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

pub(crate) fn frozen_copy(t: &Tensor) -> Tensor {
    Tensor::new(t.to_vec(), t.shape()).expect("shape preserved")
}

fn make(shape: &[usize], std: f64, trainable: bool, rng: &mut impl Rng) -> Tensor {
    if trainable {
        Tensor::randn_param(shape, std, rng)
    } else {
        Tensor::randn(shape, std, rng)
    }
}

fn make_const(data: Vec<f64>, shape: &[usize], trainable: bool) -> Tensor {
    if trainable {
        Tensor::param(data, shape).expect("shape consistent")
    } else {
        Tensor::new(data, shape).expect("shape consistent")
    }
}

/// Affine map `[.., d_in] -> [.., d_out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, trainable: bool, rng: &mut impl Rng) -> Linear {
        Linear {
            weight: make(&[d_in, d_out], INIT_STD, trainable, rng),
            bias: Some(make_const(vec![0.0; d_out], &[d_out], trainable)),
        }
    }

    pub fn new_no_bias(d_in: usize, d_out: usize, trainable: bool, rng: &mut impl Rng) -> Linear {
        Linear {
            weight: make(&[d_in, d_out], INIT_STD, trainable, rng),
            bias: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }

    pub fn freeze(&mut self) {
        self.weight = frozen_copy(&self.weight);
        if let Some(b) = &self.bias {
            self.bias = Some(frozen_copy(b));
        }
    }
}

/// Gain/bias pair for layer normalization over the last axis.
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn new(d: usize, trainable: bool) -> Norm {
        Norm {
            gain: make_const(vec![1.0; d], &[d], trainable),
            bias: make_const(vec![0.0; d], &[d], trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn freeze(&mut self) {
        self.gain = frozen_copy(&self.gain);
        self.bias = frozen_copy(&self.bias);
    }
}

/// Multi-head self-attention over `[.., L, D]`.
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
}

/// Attention output plus the per-head keys captured for token merging.
pub struct AttentionOut {
    pub out: Tensor,
    /// `[.., H, L, d_h]`
    pub keys: Tensor,
}

impl Attention {
    pub fn new(d: usize, num_heads: usize, trainable: bool, rng: &mut impl Rng) -> Result<Attention> {
        if d % num_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                d, num_heads
            )));
        }
        Ok(Attention {
            wq: Linear::new(d, d, trainable, rng),
            wk: Linear::new(d, d, trainable, rng),
            wv: Linear::new(d, d, trainable, rng),
            wo: Linear::new(d, d, trainable, rng),
            num_heads,
        })
    }

    /// `logit_bias`, when given, is added to every row of attention logits
    /// (shape `[L]`, e.g. log token sizes for proportional attention).
    pub fn forward(
        &self,
        x: &Tensor,
        causal: bool,
        logit_bias: Option<&Tensor>,
    ) -> Result<AttentionOut> {
        let sh = x.shape().to_vec();
        if sh.len() < 2 {
            return Err(Error::Shape(format!("attention input {:?}", sh)));
        }
        let d = sh[sh.len() - 1];
        let l = sh[sh.len() - 2];
        let h = self.num_heads;
        let dh = d / h;
        let batch = &sh[..sh.len() - 2];

        let split = |t: &Tensor| -> Result<Tensor> {
            // [.., L, D] -> [.., H, L, d_h]
            let mut shape = batch.to_vec();
            shape.extend([l, h, dh]);
            let v = t.reshape(&shape)?;
            let ndim = shape.len();
            let mut axes: Vec<usize> = (0..ndim).collect();
            axes.swap(ndim - 3, ndim - 2);
            v.permute(&axes)
        };

        let q = split(&self.wq.forward(x)?)?;
        let k = split(&self.wk.forward(x)?)?;
        let v = split(&self.wv.forward(x)?)?;

        let mut scores = q.matmul(&k.t()?)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(bias) = logit_bias {
            scores = scores.add(bias)?;
        }
        if causal {
            let mut mask = vec![0.0; l * l];
            for i in 0..l {
                for j in i + 1..l {
                    mask[i * l + j] = f64::NEG_INFINITY;
                }
            }
            scores = scores.add(&Tensor::new(mask, &[l, l])?)?;
        }
        let attn = scores.softmax(scores.shape().len() - 1)?;
        let ctx = attn.matmul(&v)?; // [.., H, L, d_h]
        let ndim = ctx.shape().len();
        let mut axes: Vec<usize> = (0..ndim).collect();
        axes.swap(ndim - 3, ndim - 2);
        let merged = ctx.permute(&axes)?; // [.., L, H, d_h]
        let mut out_shape = batch.to_vec();
        out_shape.extend([l, d]);
        let out = self.wo.forward(&merged.reshape(&out_shape)?)?;
        Ok(AttentionOut { out, keys: k })
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.named_params(&format!("{prefix}.wq"), out);
        self.wk.named_params(&format!("{prefix}.wk"), out);
        self.wv.named_params(&format!("{prefix}.wv"), out);
        self.wo.named_params(&format!("{prefix}.wo"), out);
    }

    pub fn freeze(&mut self) {
        self.wq.freeze();
        self.wk.freeze();
        self.wv.freeze();
        self.wo.freeze();
    }
}

/// Two-layer GELU MLP with the usual width multiplier.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(d: usize, ratio: usize, trainable: bool, rng: &mut impl Rng) -> Mlp {
        Mlp {
            fc1: Linear::new(d, d * ratio, trainable, rng),
            fc2: Linear::new(d * ratio, d, trainable, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.named_params(&format!("{prefix}.fc1"), out);
        self.fc2.named_params(&format!("{prefix}.fc2"), out);
    }

    pub fn freeze(&mut self) {
        self.fc1.freeze();
        self.fc2.freeze();
    }
}

/// Standard pre-norm transformer block (attention + MLP with residuals).
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        d: usize,
        num_heads: usize,
        mlp_ratio: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Block> {
        Ok(Block {
            ln1: Norm::new(d, trainable),
            attn: Attention::new(d, num_heads, trainable, rng)?,
            ln2: Norm::new(d, trainable),
            mlp: Mlp::new(d, mlp_ratio, trainable, rng),
        })
    }

    pub fn forward(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        let attn = self.attn.forward(&self.ln1.forward(x)?, causal, None)?;
        let x = x.add(&attn.out)?;
        let mlp = self.mlp.forward(&self.ln2.forward(&x)?)?;
        x.add(&mlp)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.named_params(&format!("{prefix}.ln1"), out);
        self.attn.named_params(&format!("{prefix}.attn"), out);
        self.ln2.named_params(&format!("{prefix}.ln2"), out);
        self.mlp.named_params(&format!("{prefix}.mlp"), out);
    }

    pub fn freeze(&mut self) {
        self.ln1.freeze();
        self.attn.freeze();
        self.ln2.freeze();
        self.mlp.freeze();
    }
}
