//! Temporal attentive soft token contextualizing: per patch position,
//! attention over the frame axis with a residual add. Token counts are
//! preserved; on static input the module reduces to a uniform frame mean,
//! so every frame's stream is scaled by exactly 2 and the factor washes out
//! in the next layer normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Attention, Linear};
use crate::tensor::Tensor;

/// Video activations shaped `[B, N, L, D]`.
#[derive(Clone)]
pub struct FrameBatch {
    pub activations: Tensor,
}

impl FrameBatch {
    pub fn new(activations: Tensor) -> Result<FrameBatch> {
        if activations.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "frame batch must be [B, N, L, D], got {:?}",
                activations.shape()
            )));
        }
        Ok(FrameBatch { activations })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.activations.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// `[(B*N), L, D]` view for per-frame spatial attention.
    pub fn spatial_view(&self) -> Result<Tensor> {
        let (b, n, l, d) = self.dims();
        self.activations.reshape(&[b * n, l, d])
    }

    /// `[(B*L), N, D]` view for per-position temporal attention.
    pub fn temporal_view(&self) -> Result<Tensor> {
        let (b, n, l, d) = self.dims();
        self.activations
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * l, n, d])
    }
}

/// The two trainable maps of the temporal module. Stays trainable even when
/// the surrounding encoder is frozen.
pub struct TemporalModule {
    pub w_key: Linear,
    pub w_query: Linear,
    /// Scale attention logits by 1/sqrt(D). Off by default: the module is
    /// defined without logit scaling.
    pub scale_logits: bool,
    /// Learned per-frame position embedding `[max_frames, D]`. Off by
    /// default; enabling it sacrifices frame-permutation equivariance.
    pub frame_pos_embed: Option<Tensor>,
}

impl TemporalModule {
    pub fn new(dim: usize, rng: &mut impl Rng) -> TemporalModule {
        TemporalModule {
            w_key: Linear::new_no_bias(dim, dim, true, rng),
            w_query: Linear::new_no_bias(dim, dim, true, rng),
            scale_logits: false,
            frame_pos_embed: None,
        }
    }

    pub fn with_frame_pos_embed(mut self, max_frames: usize, rng: &mut impl Rng) -> TemporalModule {
        let dim = self.w_key.weight.shape()[0];
        self.frame_pos_embed = Some(Tensor::randn_param(
            &[max_frames, dim],
            crate::nn::INIT_STD,
            rng,
        ));
        self
    }

    /// `v'' = v' + softmax(q k^T) v'` with q/k projected per patch position
    /// across frames. Output shape always equals input shape.
    pub fn forward(&self, v: &FrameBatch) -> Result<FrameBatch> {
        let (b, n, l, d) = v.dims();
        let stream = v.temporal_view()?; // [(B*L), N, D]
        let qk_input = match &self.frame_pos_embed {
            Some(pos) => {
                if n > pos.shape()[0] {
                    return Err(Error::Config(format!(
                        "{} frames exceed the {}-frame position table",
                        n,
                        pos.shape()[0]
                    )));
                }
                let rows = Tensor::embedding(pos, &(0..n).collect::<Vec<_>>())?;
                stream.add(&rows)?
            }
            None => stream.clone(),
        };
        let q = self.w_query.forward(&qk_input)?;
        let k = self.w_key.forward(&qk_input)?;
        let mut scores = q.matmul(&k.t()?)?; // [(B*L), N, N]
        if self.scale_logits {
            scores = scores.scale(1.0 / (d as f64).sqrt());
        }
        let weights = scores.softmax(2)?;
        let mixed = weights.matmul(&stream)?;
        let out = stream.add(&mixed)?;
        let back = out.reshape(&[b, l, n, d])?.permute(&[0, 2, 1, 3])?;
        FrameBatch::new(back)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.w_key.named_params(&format!("{prefix}.w_key"), out);
        self.w_query.named_params(&format!("{prefix}.w_query"), out);
        if let Some(p) = &self.frame_pos_embed {
            out.push((format!("{prefix}.frame_pos_embed"), p.clone()));
        }
    }
}

/// Self-attention applied independently per frame through the
/// `[(B*N), L, D]` view. The caller handles pre-norm and residuals.
pub fn spatial_attend(v: &FrameBatch, attn: &Attention) -> Result<FrameBatch> {
    let (b, n, l, d) = v.dims();
    let out = attn.forward(&v.spatial_view()?, false, None)?.out;
    FrameBatch::new(out.reshape(&[b, n, l, d])?)
}
