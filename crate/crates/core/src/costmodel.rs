//! Analytical multiply-accumulate accounting for the token-merging
//! connector and a query-transformer reference connector. Counts are exact
//! integers; norms, softmax, activations, and residual adds are excluded,
//! which is recorded in every report.

use serde::{Deserialize, Serialize};

use crate::connector::TomeFormerConfig;
use crate::error::{Error, Result};
use crate::tokmerge::schedule_counts;

pub const CONVENTION: &str = "one MAC is one multiply plus one add; linear maps and attention \
score/value products are counted; norms, softmax, activations, and residual adds are not; \
FLOPs = 2 x MACs";

/// One transformer layer for costing purposes. Attention runs at
/// `seq_len_in`, the MLP at `seq_len_out`; the two differ when tokens are
/// merged between the sublayers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub seq_len_in: usize,
    pub seq_len_out: usize,
    /// Context length for an extra cross-attention sublayer, if present.
    pub cross_context: Option<usize>,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Contract("layer spec with zero extent".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Contract(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.seq_len_out > self.seq_len_in {
            return Err(Error::Contract(format!(
                "seq_len_out {} exceeds seq_len_in {}",
                self.seq_len_out, self.seq_len_in
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostEntry {
    pub label: String,
    pub macs: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub convention: String,
}

impl CostReport {
    pub fn from_entries(entries: Vec<CostEntry>) -> CostReport {
        let total_macs = entries.iter().map(|e| e.macs).sum();
        CostReport {
            entries,
            total_macs,
            total_flops: 2 * total_macs,
            convention: CONVENTION.into(),
        }
    }

    pub fn entry(&self, label: &str) -> Option<u64> {
        self.entries.iter().find(|e| e.label == label).map(|e| e.macs)
    }
}

/// `L * d_in * d_out` for one dense map applied to `l` rows.
pub fn macs_linear(l: usize, d_in: usize, d_out: usize) -> u64 {
    l as u64 * d_in as u64 * d_out as u64
}

/// Self-attention at length `l`: four projections plus the score and value
/// products. Head count does not change the total since head dims sum to D.
fn macs_self_attention(l: usize, d: usize) -> u64 {
    4 * macs_linear(l, d, d) + 2 * (l as u64 * l as u64 * d as u64)
}

/// Cross-attention from `l` queries over `c` context tokens: query and
/// output maps on `l` rows, key and value maps on `c` rows, score and value
/// products of `l * c * D` each.
fn macs_cross_attention(l: usize, c: usize, d: usize) -> u64 {
    2 * macs_linear(l, d, d) + 2 * macs_linear(c, d, d) + 2 * (l as u64 * c as u64 * d as u64)
}

fn macs_mlp(l: usize, d: usize, ratio: usize) -> u64 {
    2 * macs_linear(l, d, d * ratio)
}

pub fn macs_transformer_layer(spec: &LayerSpec) -> Result<u64> {
    spec.validate()?;
    let mut total = macs_self_attention(spec.seq_len_in, spec.model_dim);
    if let Some(c) = spec.cross_context {
        total += macs_cross_attention(spec.seq_len_in, c, spec.model_dim);
    }
    total += macs_mlp(spec.seq_len_out, spec.model_dim, spec.mlp_ratio);
    Ok(total)
}

/// Per-layer cost of the merging connector: attention sees the pre-merge
/// count, the MLP only the survivors.
pub fn macs_tomeformer(config: &TomeFormerConfig, l0: usize) -> Result<CostReport> {
    config.validate()?;
    let counts = schedule_counts(l0, &config.schedule);
    let mut entries = Vec::new();
    for i in 0..config.num_layers {
        let spec = LayerSpec {
            model_dim: config.model_dim,
            num_heads: config.num_heads,
            mlp_ratio: config.mlp_ratio,
            seq_len_in: counts[i],
            seq_len_out: counts[i + 1],
            cross_context: None,
        };
        entries.push(CostEntry {
            label: format!("layer{} ({} -> {} tokens)", i, counts[i], counts[i + 1]),
            macs: macs_transformer_layer(&spec)?,
        });
    }
    Ok(CostReport::from_entries(entries))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QFormerStage {
    /// Representation learning: text-only, image-text, and generative
    /// passes summed. The generative pass covers the positive pair plus the
    /// hard negatives that share its forward.
    Stage1,
    /// One generative query pass.
    Stage2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerSpec {
    pub queries: usize,
    pub image_tokens: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub text_len: usize,
    /// Cross-attention every `cross_cadence`-th layer, starting at layer 0.
    pub cross_cadence: usize,
    /// Extra joint forwards batched into the generative pass.
    pub hard_negatives: usize,
}

impl Default for QFormerSpec {
    fn default() -> QFormerSpec {
        QFormerSpec {
            queries: 32,
            image_tokens: 257,
            layers: 12,
            model_dim: 768,
            num_heads: 12,
            mlp_ratio: 4,
            text_len: 32,
            cross_cadence: 1,
            hard_negatives: 2,
        }
    }
}

impl QFormerSpec {
    /// `cross_queries` rows cross-attend the image tokens; in the joint
    /// pass that is the query prefix only, never the text suffix.
    fn pass(&self, l: usize, cross_queries: usize) -> Result<u64> {
        let mut total = 0;
        for i in 0..self.layers {
            total += macs_transformer_layer(&LayerSpec {
                model_dim: self.model_dim,
                num_heads: self.num_heads,
                mlp_ratio: self.mlp_ratio,
                seq_len_in: l,
                seq_len_out: l,
                cross_context: None,
            })?;
            if cross_queries > 0 && i % self.cross_cadence == 0 {
                total += macs_cross_attention(cross_queries, self.image_tokens, self.model_dim);
            }
        }
        Ok(total)
    }
}

pub fn macs_qformer(spec: &QFormerSpec, stage: QFormerStage) -> Result<CostReport> {
    if spec.cross_cadence == 0 {
        return Err(Error::Contract("cross cadence of zero".into()));
    }
    let image_text = spec.pass(spec.queries, spec.queries)?;
    let entries = match stage {
        QFormerStage::Stage2 => vec![CostEntry {
            label: "generative query pass".into(),
            macs: image_text,
        }],
        QFormerStage::Stage1 => {
            let text_only = spec.pass(spec.text_len, 0)?;
            let joint = spec.pass(spec.queries + spec.text_len, spec.queries)?;
            let generative = joint * (1 + spec.hard_negatives as u64);
            vec![
                CostEntry {
                    label: "text-only pass".into(),
                    macs: text_only,
                },
                CostEntry {
                    label: "image-text pass".into(),
                    macs: image_text,
                },
                CostEntry {
                    label: "generative pass".into(),
                    macs: generative,
                },
            ]
        }
    };
    Ok(CostReport::from_entries(entries))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub r: usize,
    pub total_macs: u64,
    pub final_tokens: usize,
}

pub fn ablate_r(config: &TomeFormerConfig, l0: usize, rs: &[usize]) -> Result<Vec<AblationRow>> {
    if rs.is_empty() {
        return Err(Error::Contract("empty r list".into()));
    }
    rs.iter()
        .map(|&r| {
            let mut cfg = config.clone();
            cfg.schedule.r = r;
            let report = macs_tomeformer(&cfg, l0)?;
            let final_tokens = *schedule_counts(l0, &cfg.schedule).last().expect("nonempty");
            Ok(AblationRow {
                r,
                total_macs: report.total_macs,
                final_tokens,
            })
        })
        .collect()
}
