//! TomeFormer: a pre-norm transformer stack with token merging between the
//! attention and MLP sublayers of every layer, plus the boundary projections
//! into and out of the connector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Linear, Mlp, Norm};
use crate::tensor::Tensor;
use crate::tokmerge::{
    apply_merge, bipartite_soft_match, schedule_counts, MergeSchedule, PartitionPolicy, TokenBatch,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomeFormerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub schedule: MergeSchedule,
    /// Prepend a learnable protected token that is exempt from merging.
    #[serde(default)]
    pub include_protected_token: bool,
    /// Seed for the random partition policy; alternating when absent.
    #[serde(default)]
    pub partition_seed: Option<u64>,
    /// Bias attention logits by log token size.
    #[serde(default)]
    pub proportional_attention: bool,
}

impl Default for TomeFormerConfig {
    fn default() -> Self {
        TomeFormerConfig {
            num_layers: 12,
            model_dim: 64,
            num_heads: 8,
            mlp_ratio: 4,
            schedule: MergeSchedule::default(),
            include_protected_token: false,
            partition_seed: None,
            proportional_attention: false,
        }
    }
}

impl TomeFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.schedule.num_layers != self.num_layers {
            return Err(Error::Config(format!(
                "schedule covers {} layers but the stack has {}",
                self.schedule.num_layers, self.num_layers
            )));
        }
        Ok(())
    }

    pub fn partition_policy(&self) -> PartitionPolicy {
        match self.partition_seed {
            Some(seed) => PartitionPolicy::SeededRandom(seed),
            None => PartitionPolicy::Alternating,
        }
    }

    /// Soft-prompt length for `l0` input tokens.
    pub fn output_len(&self, l0: usize) -> usize {
        let merged = *schedule_counts(l0, &self.schedule).last().unwrap();
        merged + usize::from(self.include_protected_token)
    }
}

/// The trainable maps at the connector boundary: encoder-dim into the
/// connector and connector out to the decoder embedding space.
pub struct ProjectionPair {
    pub proj_in: Linear,
    pub proj_out: Linear,
}

impl ProjectionPair {
    pub fn new(enc_dim: usize, model_dim: usize, dec_dim: usize, rng: &mut impl Rng) -> Self {
        ProjectionPair {
            proj_in: Linear::new(enc_dim, model_dim, true, rng),
            proj_out: Linear::new(model_dim, dec_dim, true, rng),
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj_in.named_params(&format!("{prefix}.proj_in"), out);
        self.proj_out.named_params(&format!("{prefix}.proj_out"), out);
    }
}

/// One connector layer: pre-norm attention, merge, pre-norm MLP.
pub struct TomeFormerLayer {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl TomeFormerLayer {
    fn new(cfg: &TomeFormerConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(TomeFormerLayer {
            ln1: Norm::new(cfg.model_dim, true),
            attn: Attention::new(cfg.model_dim, cfg.num_heads, true, rng)?,
            ln2: Norm::new(cfg.model_dim, true),
            mlp: Mlp::new(cfg.model_dim, cfg.mlp_ratio, true, rng),
        })
    }

    /// `quota` is this layer's effective merge count. Sizes and provenance
    /// ride through attention untouched; only the merge step changes them.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        quota: usize,
        protected: &[usize],
        policy: PartitionPolicy,
        proportional_attention: bool,
    ) -> Result<TokenBatch> {
        let bias = if proportional_attention {
            let logs: Vec<f64> = batch.sizes.iter().map(|&s| (s as f64).ln()).collect();
            Some(Tensor::new(logs, &[batch.len()])?)
        } else {
            None
        };
        let attn = self
            .attn
            .forward(&self.ln1.forward(&batch.tokens)?, false, bias.as_ref())?;
        let x = batch.tokens.add(&attn.out)?;
        let attended = TokenBatch {
            tokens: x,
            sizes: batch.sizes.clone(),
            groups: batch.groups.clone(),
        };
        let plan = bipartite_soft_match(&attn.keys, quota, protected, policy)?;
        let merged = apply_merge(&attended, &plan)?;
        let mlp = self.mlp.forward(&self.ln2.forward(&merged.tokens)?)?;
        Ok(TokenBatch {
            tokens: merged.tokens.add(&mlp)?,
            sizes: merged.sizes,
            groups: merged.groups,
        })
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.named_params(&format!("{prefix}.ln1"), out);
        self.attn.named_params(&format!("{prefix}.attn"), out);
        self.ln2.named_params(&format!("{prefix}.ln2"), out);
        self.mlp.named_params(&format!("{prefix}.mlp"), out);
    }
}

/// The vision-to-language connector stack.
pub struct TomeFormer {
    pub config: TomeFormerConfig,
    /// Learnable merge-exempt token, present when the config asks for one.
    pub protected_token: Option<Tensor>,
    pub layers: Vec<TomeFormerLayer>,
    pub final_norm: Norm,
}

impl TomeFormer {
    pub fn new(config: TomeFormerConfig, rng: &mut impl Rng) -> Result<TomeFormer> {
        config.validate()?;
        let protected_token = config
            .include_protected_token
            .then(|| Tensor::randn_param(&[1, config.model_dim], crate::nn::INIT_STD, rng));
        let layers = (0..config.num_layers)
            .map(|_| TomeFormerLayer::new(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TomeFormer {
            final_norm: Norm::new(config.model_dim, true),
            protected_token,
            layers,
            config,
        })
    }

    /// Run the merging stack over already-projected tokens `[L, D]`.
    /// Returns the final normalized tokens and the provenance batch.
    /// When a protected token is present it occupies provenance index 0 and
    /// patch `i` maps to provenance index `i + 1`.
    pub fn forward(&self, projected: &Tensor) -> Result<(Tensor, TokenBatch)> {
        self.forward_with_r(projected, self.config.schedule.r)
    }

    /// Same stack with an overridden per-layer merge count, used to merge
    /// video token sequences harder than single images.
    pub fn forward_with_r(&self, projected: &Tensor, r: usize) -> Result<(Tensor, TokenBatch)> {
        let mut batch = match &self.protected_token {
            Some(p) => TokenBatch::from_patches(Tensor::concat(&[p, projected], 0)?)?,
            None => TokenBatch::from_patches(projected.clone())?,
        };
        let protected: &[usize] = if self.protected_token.is_some() {
            &[0]
        } else {
            &[]
        };
        let policy = self.config.partition_policy();
        let schedule = MergeSchedule {
            r,
            num_layers: self.config.schedule.num_layers,
        };
        for layer in &self.layers {
            let quota = schedule.quota(batch.len() - protected.len());
            batch = layer.forward(
                &batch,
                quota,
                protected,
                policy,
                self.config.proportional_attention,
            )?;
        }
        let normed = self.final_norm.forward(&batch.tokens)?;
        Ok((normed, batch))
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(p) = &self.protected_token {
            out.push((format!("{prefix}.protected_token"), p.clone()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_params(&format!("{prefix}.layer{i}"), out);
        }
        self.final_norm.named_params(&format!("{prefix}.final_norm"), out);
    }
}

/// Full connector: projection in, TomeFormer, projection out.
pub struct Connector {
    pub projections: ProjectionPair,
    pub former: TomeFormer,
}

impl Connector {
    pub fn new(
        enc_dim: usize,
        dec_dim: usize,
        config: TomeFormerConfig,
        rng: &mut impl Rng,
    ) -> Result<Connector> {
        let projections = ProjectionPair::new(enc_dim, config.model_dim, dec_dim, rng);
        Ok(Connector {
            projections,
            former: TomeFormer::new(config, rng)?,
        })
    }

    /// Visual tokens `[L, enc_dim]` to soft prompts `[L', dec_dim]`.
    pub fn forward(&self, visual: &Tensor) -> Result<(Tensor, TokenBatch)> {
        self.forward_with_r(visual, self.former.config.schedule.r)
    }

    pub fn forward_with_r(&self, visual: &Tensor, r: usize) -> Result<(Tensor, TokenBatch)> {
        let projected = self.projections.proj_in.forward(visual)?;
        let (tokens, batch) = self.former.forward_with_r(&projected, r)?;
        let prompts = self.projections.proj_out.forward(&tokens)?;
        Ok((prompts, batch))
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.projections
            .proj_in
            .named_params(&format!("{prefix}.proj_in"), out);
        self.former.named_params(&format!("{prefix}.former"), out);
        self.projections
            .proj_out
            .named_params(&format!("{prefix}.proj_out"), out);
    }

    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.named_params("connector", &mut out);
        out.retain(|(_, t)| t.requires_grad());
        out
    }
}
