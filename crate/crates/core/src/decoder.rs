//! Tiny causal transformer language model. Serves as the frozen decoder in
//! the caption pipeline; soft prompt vectors are consumed as a prefix in
//! embedding space, ahead of the token embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, Linear, Norm, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub max_seq: usize,
}

impl Default for DecoderConfig {
    fn default() -> DecoderConfig {
        DecoderConfig {
            vocab_size: 17,
            dim: 32,
            num_heads: 4,
            num_layers: 2,
            mlp_ratio: 4,
            max_seq: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config("empty vocabulary or context".into()));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        Ok(())
    }
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub head: Linear,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Decoder> {
        cfg.validate()?;
        let blocks = (0..cfg.num_layers)
            .map(|_| Block::new(cfg.dim, cfg.num_heads, cfg.mlp_ratio, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            tok_embed: Tensor::randn_param(&[cfg.vocab_size, cfg.dim], INIT_STD, rng),
            pos_embed: Tensor::randn_param(&[cfg.max_seq, cfg.dim], INIT_STD, rng),
            final_norm: Norm::new(cfg.dim, true),
            head: Linear::new(cfg.dim, cfg.vocab_size, true, rng),
            blocks,
            cfg,
        })
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        Tensor::embedding(&self.tok_embed, ids)
    }

    /// Causal forward over a prefix of soft prompt vectors followed by
    /// token ids. Returns logits `[P + T, vocab]`.
    pub fn forward(&self, prompt: Option<&Tensor>, ids: &[usize]) -> Result<Tensor> {
        let mut parts = Vec::new();
        if let Some(p) = prompt {
            if p.shape().len() != 2 || p.shape()[1] != self.cfg.dim {
                return Err(Error::Shape(format!(
                    "prompt {:?} must be [P, {}]",
                    p.shape(),
                    self.cfg.dim
                )));
            }
            parts.push(p.clone());
        }
        if !ids.is_empty() {
            parts.push(self.embed_tokens(ids)?);
        }
        if parts.is_empty() {
            return Err(Error::Contract("decoder forward on empty sequence".into()));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let x = Tensor::concat(&refs, 0)?;
        self.forward_embedded(&x)
    }

    pub fn forward_embedded(&self, x: &Tensor) -> Result<Tensor> {
        let total = x.shape()[0];
        if total > self.cfg.max_seq {
            return Err(Error::Contract(format!(
                "sequence of {} exceeds the {}-position context",
                total, self.cfg.max_seq
            )));
        }
        let positions: Vec<usize> = (0..total).collect();
        let mut x = x.add(&Tensor::embedding(&self.pos_embed, &positions)?)?;
        for block in &self.blocks {
            x = block.forward(&x, true)?;
        }
        self.head.forward(&self.final_norm.forward(&x)?)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.tok_embed"), self.tok_embed.clone()));
        out.push((format!("{prefix}.pos_embed"), self.pos_embed.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            block.named_params(&format!("{prefix}.block{i}"), out);
        }
        self.final_norm
            .named_params(&format!("{prefix}.final_norm"), out);
        self.head.named_params(&format!("{prefix}.head"), out);
    }

    pub fn freeze(&mut self) {
        self.tok_embed = crate::nn::frozen_copy(&self.tok_embed);
        self.pos_embed = crate::nn::frozen_copy(&self.pos_embed);
        for block in &mut self.blocks {
            block.freeze();
        }
        self.final_norm.freeze();
        self.head.freeze();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Decoder, ChaCha8Rng) {
        let cfg = DecoderConfig {
            vocab_size: 11,
            dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            max_seq: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dec = Decoder::new(cfg, &mut rng).unwrap();
        (dec, rng)
    }

    #[test]
    fn logits_shape_and_context_limit() {
        let (dec, mut rng) = tiny();
        let prompt = Tensor::randn(&[3, 8], 0.1, &mut rng);
        let logits = dec.forward(Some(&prompt), &[1, 2, 3]).unwrap();
        assert_eq!(logits.shape(), &[6, 11]);
        let long: Vec<usize> = vec![0; 17];
        assert!(dec.forward(None, &long).is_err());
        assert!(dec.forward(None, &[]).is_err());
    }

    #[test]
    fn causal_mask_blocks_future_influence() {
        let (dec, _) = tiny();
        let base = dec.forward(None, &[1, 2, 3, 4]).unwrap().to_vec();
        let changed = dec.forward(None, &[1, 2, 3, 9]).unwrap().to_vec();
        // logits at positions before the edited token are untouched
        for i in 0..3 * 11 {
            assert_eq!(base[i], changed[i], "position {}", i / 11);
        }
        assert!(base[3 * 11..] != changed[3 * 11..]);
    }

    #[test]
    fn prompt_is_visible_to_caption_positions() {
        let (dec, mut rng) = tiny();
        let prompt_a = Tensor::randn(&[2, 8], 0.5, &mut rng);
        let prompt_b = Tensor::randn(&[2, 8], 0.5, &mut rng);
        let a = dec.forward(Some(&prompt_a), &[1, 2]).unwrap().to_vec();
        let b = dec.forward(Some(&prompt_b), &[1, 2]).unwrap().to_vec();
        // every caption position sees the prompt
        assert!(a[2 * 11..] != b[2 * 11..]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (dec, _) = tiny();
        let ids = [1usize, 4, 2, 7];
        let targets = [4usize, 2, 7, 5];
        let mut params = Vec::new();
        dec.named_params("dec", &mut params);
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let err = finite_diff_check(
            || {
                let logits = dec.forward(None, &ids)?;
                logits.cross_entropy(&targets, usize::MAX)
            },
            &tensors,
            // wider step: roundoff dominates truncation on the tiny
            // embedding gradients at 1e-5
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn frozen_decoder_has_constant_bits() {
        let (mut dec, _) = tiny();
        dec.freeze();
        let mut params = Vec::new();
        dec.named_params("dec", &mut params);
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.to_vec()).collect();
        let tape = crate::tensor::Tape::new();
        let logits = dec.forward(None, &[1, 2, 3]).unwrap();
        let loss = logits.cross_entropy(&[2, 3, 4], usize::MAX).unwrap();
        tape.backward(&loss).unwrap();
        for ((name, t), orig) in params.iter().zip(&before) {
            assert!(t.grad().is_none(), "{name} got a gradient");
            assert_eq!(&t.to_vec(), orig, "{name} changed");
        }
    }
}
