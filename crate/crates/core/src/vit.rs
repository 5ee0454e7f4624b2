//! Small vision transformer encoder. Images are cut into square patches,
//! linearly embedded with a learned position table, and run through pre-norm
//! blocks. For video, frames share the spatial blocks through a flattened
//! view and optional temporal modules sit between attention and MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, Linear, Norm};
use crate::temporal::{spatial_attend, FrameBatch, TemporalModule};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> VitConfig {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            dim: 32,
            num_heads: 4,
            num_layers: 2,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch length for RGB input.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Trainable position table initialized with 2D sinusoids: the first half
/// of the channels encodes the patch row, the second half the column.
/// Amplitude is matched to the patch-embedding scale so neither signal
/// drowns the other.
fn grid_pos_embed(grid: usize, dim: usize) -> Tensor {
    const AMPLITUDE: f64 = 0.05;
    let half = dim / 2;
    let mut data = vec![0.0; grid * grid * dim];
    for row in 0..grid {
        for col in 0..grid {
            let base = (row * grid + col) * dim;
            for c in 0..dim {
                let (axis_pos, axis_c, axis_dim) = if c < half {
                    (row as f64, c, half)
                } else {
                    (col as f64, c - half, dim - half)
                };
                let freq = 10_000f64.powf(-((axis_c / 2 * 2) as f64) / axis_dim as f64);
                let angle = axis_pos * freq;
                data[base + c] = AMPLITUDE * if axis_c % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    Tensor::param(data, &[grid * grid, dim]).expect("table matches its shape")
}

pub struct Vit {
    pub cfg: VitConfig,
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    /// One slot per block; a populated slot runs after that block's
    /// attention residual and before its MLP. Not touched by `freeze`.
    pub temporal: Vec<Option<TemporalModule>>,
    pub final_norm: Norm,
}

impl Vit {
    pub fn new(cfg: VitConfig, rng: &mut impl Rng) -> Result<Vit> {
        cfg.validate()?;
        let blocks = (0..cfg.num_layers)
            .map(|_| Block::new(cfg.dim, cfg.num_heads, cfg.mlp_ratio, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Vit {
            patch_embed: Linear::new(cfg.patch_dim(), cfg.dim, true, rng),
            pos_embed: grid_pos_embed(cfg.grid(), cfg.dim),
            temporal: (0..cfg.num_layers).map(|_| None).collect(),
            final_norm: Norm::new(cfg.dim, true),
            blocks,
            cfg,
        })
    }

    /// Adds a temporal module to every block.
    pub fn enable_temporal(&mut self, rng: &mut impl Rng) {
        for slot in &mut self.temporal {
            *slot = Some(TemporalModule::new(self.cfg.dim, rng));
        }
    }

    /// Like `enable_temporal`, but with learned frame position embeddings.
    /// Sacrifices frame-permutation equivariance, which is what lets the
    /// modules tell motion directions apart.
    pub fn enable_temporal_with_positions(&mut self, max_frames: usize, rng: &mut impl Rng) {
        for slot in &mut self.temporal {
            *slot =
                Some(TemporalModule::new(self.cfg.dim, rng).with_frame_pos_embed(max_frames, rng));
        }
    }

    /// Row-major `[H, W, 3]` pixels to `[L, patch_dim]` patch vectors.
    pub fn patchify(&self, pixels: &[f64]) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if pixels.len() != s * s * 3 {
            return Err(Error::Shape(format!(
                "expected {} pixel values, got {}",
                s * s * 3,
                pixels.len()
            )));
        }
        let p = self.cfg.patch_size;
        let grid = self.cfg.grid();
        let mut out = Vec::with_capacity(self.cfg.num_patches() * self.cfg.patch_dim());
        for py in 0..grid {
            for px in 0..grid {
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((py * p + dy) * s + px * p + dx) * 3;
                        out.extend_from_slice(&pixels[base..base + 3]);
                    }
                }
            }
        }
        Tensor::new(out, &[self.cfg.num_patches(), self.cfg.patch_dim()])
    }

    fn embed(&self, pixels: &[f64]) -> Result<Tensor> {
        let patches = self.patchify(pixels)?;
        self.patch_embed.forward(&patches)?.add(&self.pos_embed)
    }

    pub fn encode_image(&self, pixels: &[f64]) -> Result<Tensor> {
        Ok(self.encode_image_probed(pixels)?.0)
    }

    /// Also returns each block's post-norm pre-MLP activation, which is the
    /// point where the image and static-video paths must agree.
    pub fn encode_image_probed(&self, pixels: &[f64]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = self.embed(pixels)?;
        let mut probes = Vec::new();
        for block in &self.blocks {
            let attn = block.attn.forward(&block.ln1.forward(&x)?, false, None)?;
            x = x.add(&attn.out)?;
            let normed = block.ln2.forward(&x)?;
            probes.push(normed.clone());
            x = x.add(&block.mlp.forward(&normed)?)?;
        }
        Ok((self.final_norm.forward(&x)?, probes))
    }

    /// Encodes `N` frames into one `[N*L, D]` sequence for the connector.
    pub fn encode_video(&self, frames: &[Vec<f64>]) -> Result<Tensor> {
        Ok(self.encode_video_probed(frames)?.0)
    }

    pub fn encode_video_probed(&self, frames: &[Vec<f64>]) -> Result<(Tensor, Vec<Tensor>)> {
        if frames.is_empty() {
            return Err(Error::Contract("video with zero frames".into()));
        }
        let l = self.cfg.num_patches();
        let d = self.cfg.dim;
        let embedded = frames
            .iter()
            .map(|f| self.embed(f))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = embedded.iter().collect();
        let stacked = Tensor::concat(&refs, 0)?.reshape(&[1, frames.len(), l, d])?;
        let mut v = FrameBatch::new(stacked)?;
        let mut probes = Vec::new();
        for (block, temporal) in self.blocks.iter().zip(&self.temporal) {
            let normed = FrameBatch::new(block.ln1.forward(&v.activations)?)?;
            let attn = spatial_attend(&normed, &block.attn)?;
            v = FrameBatch::new(v.activations.add(&attn.activations)?)?;
            if let Some(t) = temporal {
                v = t.forward(&v)?;
            }
            let normed = block.ln2.forward(&v.activations)?;
            probes.push(normed.clone());
            v = FrameBatch::new(v.activations.add(&block.mlp.forward(&normed)?)?)?;
        }
        let out = self.final_norm.forward(&v.activations)?;
        Ok((out.reshape(&[frames.len() * l, d])?, probes))
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.patch_embed
            .named_params(&format!("{prefix}.patch_embed"), out);
        out.push((format!("{prefix}.pos_embed"), self.pos_embed.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            block.named_params(&format!("{prefix}.block{i}"), out);
        }
        for (i, t) in self.temporal.iter().enumerate() {
            if let Some(t) = t {
                t.named_params(&format!("{prefix}.temporal{i}"), out);
            }
        }
        self.final_norm
            .named_params(&format!("{prefix}.final_norm"), out);
    }

    /// Freezes the spatial encoder. Temporal modules are deliberately left
    /// trainable.
    pub fn freeze(&mut self) {
        self.patch_embed.freeze();
        self.pos_embed = crate::nn::frozen_copy(&self.pos_embed);
        for block in &mut self.blocks {
            block.freeze();
        }
        self.final_norm.freeze();
    }

    pub fn temporal_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.temporal.iter().enumerate() {
            if let Some(t) = t {
                t.named_params(&format!("temporal{i}"), &mut out);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
        }
    }

    fn rand_image(cfg: &VitConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = cfg.image_size * cfg.image_size * 3;
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn patchify_is_a_pixel_permutation() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vit = Vit::new(cfg.clone(), &mut rng).unwrap();
        let img = rand_image(&cfg, &mut rng);
        let patches = vit.patchify(&img).unwrap();
        assert_eq!(patches.shape(), &[4, 48]);
        let pv = patches.to_vec();
        // Index each pixel independently and compare.
        for py in 0..2 {
            for px in 0..2 {
                for dy in 0..4 {
                    for dx in 0..4 {
                        for c in 0..3 {
                            let src = ((py * 4 + dy) * 8 + px * 4 + dx) * 3 + c;
                            let dst = (py * 2 + px) * 48 + (dy * 4 + dx) * 3 + c;
                            assert_eq!(pv[dst], img[src]);
                        }
                    }
                }
            }
        }
        let mut sorted_a = pv.clone();
        let mut sorted_b = img.clone();
        sorted_a.sort_by(f64::total_cmp);
        sorted_b.sort_by(f64::total_cmp);
        assert_eq!(sorted_a, sorted_b);
    }

    #[test]
    fn image_and_video_output_shapes() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vit = Vit::new(cfg.clone(), &mut rng).unwrap();
        vit.enable_temporal(&mut rng);
        let img = rand_image(&cfg, &mut rng);
        assert_eq!(vit.encode_image(&img).unwrap().shape(), &[4, 8]);
        let frames = vec![img.clone(), rand_image(&cfg, &mut rng)];
        assert_eq!(vit.encode_video(&frames).unwrap().shape(), &[8, 8]);
    }

    #[test]
    fn static_video_matches_image_after_norm() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut vit = Vit::new(cfg.clone(), &mut rng).unwrap();
        vit.enable_temporal(&mut rng);
        let img = rand_image(&cfg, &mut rng);
        let (_, img_probes) = vit.encode_image_probed(&img).unwrap();
        let frames = vec![img.clone(), img.clone(), img.clone()];
        let (_, vid_probes) = vit.encode_video_probed(&frames).unwrap();
        // Identical frames double the stream inside each temporal module,
        // but the very next normalization removes the factor, so the first
        // post-norm activation agrees with the image path for every frame.
        let image_first = img_probes[0].to_vec();
        let video_first = vid_probes[0].to_vec();
        let per_frame = image_first.len();
        for f in 0..3 {
            for (a, b) in image_first
                .iter()
                .zip(&video_first[f * per_frame..(f + 1) * per_frame])
            {
                assert!((a - b).abs() < 1e-9, "frame {f}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn single_frame_video_matches_image_after_norm() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vit = Vit::new(cfg.clone(), &mut rng).unwrap();
        vit.enable_temporal(&mut rng);
        let img = rand_image(&cfg, &mut rng);
        let (_, img_probes) = vit.encode_image_probed(&img).unwrap();
        let (_, vid_probes) = vit.encode_video_probed(&[img]).unwrap();
        for (a, b) in img_probes[0].to_vec().iter().zip(vid_probes[0].to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn video_encoding_is_frame_permutation_equivariant() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut vit = Vit::new(cfg.clone(), &mut rng).unwrap();
        vit.enable_temporal(&mut rng);
        let frames: Vec<Vec<f64>> = (0..3).map(|_| rand_image(&cfg, &mut rng)).collect();
        let base = vit.encode_video(&frames).unwrap().to_vec();
        let perm = [2usize, 0, 1];
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| frames[i].clone()).collect();
        let out = vit.encode_video(&shuffled).unwrap().to_vec();
        let per_frame = 4 * 8;
        for (slot, &src) in perm.iter().enumerate() {
            let a = &base[src * per_frame..(src + 1) * per_frame];
            let b = &out[slot * per_frame..(slot + 1) * per_frame];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn frame_positions_are_trainable_and_order_sensitive() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut vit = Vit::new(cfg.clone(), &mut rng).unwrap();
        vit.enable_temporal_with_positions(4, &mut rng);
        let names: Vec<String> = vit.temporal_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n.ends_with("frame_pos_embed")));
        // reversing the frames must not merely permute the outputs:
        // order sensitivity is the whole point of the embeddings
        let frames: Vec<Vec<f64>> = (0..3).map(|_| rand_image(&cfg, &mut rng)).collect();
        let base = vit.encode_video(&frames).unwrap().to_vec();
        let reversed: Vec<Vec<f64>> = frames.iter().rev().cloned().collect();
        let out = vit.encode_video(&reversed).unwrap().to_vec();
        let per_frame = 4 * 8;
        let mut max_diff: f64 = 0.0;
        for f in 0..3 {
            let a = &base[f * per_frame..(f + 1) * per_frame];
            let b = &out[(2 - f) * per_frame..(3 - f) * per_frame];
            for (x, y) in a.iter().zip(b) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
        assert!(max_diff > 1e-6, "reversal was equivariant, diff {max_diff}");
    }

    #[test]
    fn frozen_encoder_keeps_temporal_trainable() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vit = Vit::new(cfg.clone(), &mut rng).unwrap();
        vit.enable_temporal(&mut rng);
        vit.freeze();
        let frames = vec![rand_image(&cfg, &mut rng), rand_image(&cfg, &mut rng)];
        let tape = Tape::new();
        let out = vit.encode_video(&frames).unwrap();
        let readout = Tensor::randn(&[8, 8], 1.0, &mut rng);
        tape.backward(&out.mul(&readout).unwrap().sum()).unwrap();
        let temporal = vit.temporal_params();
        assert!(!temporal.is_empty());
        for (name, p) in &temporal {
            let grad = p.grad().unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(grad.iter().any(|&g| g != 0.0), "zero grad for {name}");
        }
        let mut spatial = Vec::new();
        vit.blocks[0].named_params("b0", &mut spatial);
        for (name, p) in &spatial {
            assert!(p.grad().is_none(), "frozen param {name} got a gradient");
        }
    }
}
