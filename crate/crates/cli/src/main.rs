//! Batch command surface: corpus generation, training, caption generation,
//! cost reports, merge visualization, and the temporal property suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 property-suite failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use evlgen::captioner::{train, CaptionConfig, CaptionModel};
use evlgen::checkpoint;
use evlgen::connector::TomeFormerConfig;
use evlgen::costmodel::{ablate_r, macs_qformer, macs_tomeformer, CostReport, QFormerSpec, QFormerStage};
use evlgen::datagen::{
    gen_image_sample, gen_video_sample, read_corpus, read_ppm, write_ppm, Sample, Tokenizer,
    CANVAS,
};
use evlgen::temporal::{FrameBatch, TemporalModule};
use evlgen::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "evlgen", version, about = "Token-merging caption pipeline tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic corpus.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Emit videos with this many frames instead of still images.
        #[arg(long)]
        video: Option<usize>,
    },
    /// Pretrain the frozen pieces, train the connector, save checkpoint
    /// and log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured step budget.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Caption an image or video with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// PPM file for an image, or a directory of frame<k>.ppm files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
    },
    /// Analytical MACs report for the connector or the reference
    /// query transformer.
    Macs {
        /// Connector configuration document; defaults used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cost the reference query transformer instead of the connector.
        #[arg(long)]
        qformer: bool,
        /// Query-transformer stage, 1 or 2.
        #[arg(long, default_value_t = 2)]
        stage: u8,
        #[arg(long, default_value_t = 256)]
        l0: usize,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
    /// Cost and final token count over a list of per-layer merge counts.
    AblateR {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated merge counts, e.g. 10,13,16,19.
        #[arg(long)]
        r_list: String,
        #[arg(long, default_value_t = 256)]
        l0: usize,
        #[arg(long)]
        json: bool,
    },
    /// Color every image patch by its final provenance group.
    MergeViz {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the temporal module property suite.
    TemporalCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Property(String),
}

impl From<evlgen::Error> for CliError {
    fn from(e: evlgen::Error) -> CliError {
        match &e {
            evlgen::Error::Parse { .. } | evlgen::Error::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path with success
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Datagen { out, n, seed, video } => cmd_datagen(&out, n, seed, video),
        Cmd::Train {
            config,
            data,
            out,
            seed,
            steps,
        } => cmd_train(config.as_deref(), &data, &out, seed, steps),
        Cmd::Generate {
            checkpoint,
            config,
            input,
            max_len,
        } => cmd_generate(&checkpoint, config.as_deref(), &input, max_len),
        Cmd::Macs {
            config,
            qformer,
            stage,
            l0,
            json,
        } => cmd_macs(config.as_deref(), qformer, stage, l0, json),
        Cmd::AblateR {
            config,
            r_list,
            l0,
            json,
        } => cmd_ablate_r(config.as_deref(), &r_list, l0, json),
        Cmd::MergeViz {
            checkpoint,
            config,
            input,
            out,
        } => cmd_merge_viz(checkpoint.as_deref(), config.as_deref(), &input, &out),
        Cmd::TemporalCheck { config } => cmd_temporal_check(config.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Property(msg)) => {
            eprintln!("property failure: {msg}");
            ExitCode::from(3)
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn cmd_datagen(out: &Path, n: usize, seed: u64, video: Option<usize>) -> CliResult {
    if video == Some(0) {
        return Err(CliError::Usage("--video needs at least one frame".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let sample_seed = seed.wrapping_add(i);
        match video {
            None => {
                let (pixels, caption) = gen_image_sample(sample_seed);
                samples.push(Sample {
                    id: format!("img{i:05}"),
                    frames: vec![pixels],
                    caption,
                });
            }
            Some(frames) => {
                let (frames, caption) = gen_video_sample(sample_seed, frames)?;
                samples.push(Sample {
                    id: format!("vid{i:05}"),
                    frames,
                    caption,
                });
            }
        }
    }
    evlgen::datagen::write_corpus(&samples, out)?;
    println!("wrote {} samples to {}", n, out.display());
    Ok(())
}

fn build_model(cfg: &CaptionConfig) -> Result<CaptionModel, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    Ok(CaptionModel::new(
        cfg.clone(),
        Tokenizer::default_grammar(),
        &mut rng,
    )?)
}

fn resolved_json(cfg: &CaptionConfig) -> Result<String, CliError> {
    serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
) -> CliResult {
    let mut cfg: CaptionConfig = read_config(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = steps {
        cfg.train.total_steps = steps;
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(steps.saturating_sub(1));
    }
    let resolved = resolved_json(&cfg)?;
    eprintln!("{resolved}");
    let corpus = read_corpus(data)?;
    if corpus.samples.is_empty() {
        return Err(CliError::Data(format!("no samples under {}", data.display())));
    }
    let mut model = build_model(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x70726574);
    model.pretrain_and_freeze(&corpus.samples, &mut rng)?;
    let log = train(&model, &corpus.samples, &cfg.train)?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let log_path = out.join("train_log.tsv");
    std::fs::write(&log_path, log.to_tsv())
        .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, &resolved)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg_path.display())))?;
    let digest = checkpoint::config_digest(&resolved);
    checkpoint::save(&out.join("model.evlg"), &digest, &model.named_params())?;
    if let Some(last) = log.rows.last() {
        println!("final\t{}\t{:e}\t{:e}", last.step, last.loss, last.lr);
    }
    if model.truncation_warnings.get() > 0 {
        eprintln!(
            "warning: {} captions truncated to fit the decoder context",
            model.truncation_warnings.get()
        );
    }
    Ok(())
}

fn load_frames(input: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    if input.is_dir() {
        let mut frames = Vec::new();
        loop {
            let path = input.join(format!("frame{}.ppm", frames.len()));
            if !path.exists() {
                break;
            }
            frames.push(read_ppm(&path)?.0);
        }
        if frames.is_empty() {
            return Err(CliError::Data(format!(
                "no frame0.ppm under {}",
                input.display()
            )));
        }
        Ok(frames)
    } else {
        let (pixels, w, h) = read_ppm(input)?;
        if (w, h) != (CANVAS, CANVAS) {
            return Err(CliError::Data(format!(
                "{} is {w}x{h}, expected {CANVAS}x{CANVAS}",
                input.display()
            )));
        }
        Ok(vec![pixels])
    }
}

/// Rebuilds the model shell for a checkpoint: same construction path as
/// training so parameter declaration order lines up.
fn model_for_checkpoint(cfg: &CaptionConfig) -> Result<CaptionModel, CliError> {
    let mut model = build_model(cfg)?;
    if cfg.temporal_enabled {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match cfg.temporal_frame_positions {
            Some(n) => model.encoder.enable_temporal_with_positions(n, &mut rng),
            None => model.encoder.enable_temporal(&mut rng),
        }
    }
    Ok(model)
}

fn cmd_generate(
    ckpt: &Path,
    config: Option<&Path>,
    input: &Path,
    max_len: usize,
) -> CliResult {
    let cfg: CaptionConfig = read_config(config)?;
    if max_len == 0 {
        return Err(CliError::Usage("--max-len must be positive".into()));
    }
    let model = model_for_checkpoint(&cfg)?;
    let digest = checkpoint::config_digest(&resolved_json(&cfg)?);
    checkpoint::load_into(ckpt, Some(&digest), &model.named_params())?;
    let frames = load_frames(input)?;
    println!("{}", model.caption_text(&frames, max_len)?);
    Ok(())
}

#[derive(Serialize)]
struct MacsDoc<'a> {
    schema_version: u32,
    report: &'a CostReport,
}

fn print_report(report: &CostReport, json: bool) -> CliResult {
    if json {
        let doc = MacsDoc {
            schema_version: SCHEMA_VERSION,
            report,
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&doc)
                .map_err(|e| CliError::Usage(format!("serialize: {e}")))?
        );
    } else {
        for entry in &report.entries {
            println!("{}\t{}", entry.label, entry.macs);
        }
        println!("total_macs\t{}", report.total_macs);
        println!("total_flops\t{}", report.total_flops);
        println!("convention\t{}", report.convention);
    }
    Ok(())
}

fn cmd_macs(config: Option<&Path>, qformer: bool, stage: u8, l0: usize, json: bool) -> CliResult {
    let report = if qformer {
        let spec: QFormerSpec = read_config(config)?;
        let stage = match stage {
            1 => QFormerStage::Stage1,
            2 => QFormerStage::Stage2,
            other => return Err(CliError::Usage(format!("stage {other} is not 1 or 2"))),
        };
        macs_qformer(&spec, stage)?
    } else {
        let cfg: TomeFormerConfig = read_config(config)?;
        macs_tomeformer(&cfg, l0)?
    };
    print_report(&report, json)
}

#[derive(Serialize)]
struct AblationDoc {
    schema_version: u32,
    rows: Vec<evlgen::costmodel::AblationRow>,
}

fn cmd_ablate_r(config: Option<&Path>, r_list: &str, l0: usize, json: bool) -> CliResult {
    let cfg: TomeFormerConfig = read_config(config)?;
    let rs = r_list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad r value {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rows = ablate_r(&cfg, l0, &rs)?;
    if json {
        let doc = AblationDoc {
            schema_version: SCHEMA_VERSION,
            rows,
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&doc)
                .map_err(|e| CliError::Usage(format!("serialize: {e}")))?
        );
    } else {
        println!("r\ttotal_macs\tfinal_tokens");
        for row in rows {
            println!("{}\t{}\t{}", row.r, row.total_macs, row.final_tokens);
        }
    }
    Ok(())
}

/// Evenly spaced hues; distinct RGB for any group count that fits in the
/// patch grid.
fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let h = i as f64 / n.max(1) as f64 * 6.0;
            let sector = h as usize % 6;
            let f = h - h.floor();
            let (v, p, q, t) = (0.95, 0.2, 0.95 - 0.75 * f, 0.2 + 0.75 * f);
            let (r, g, b) = match sector {
                0 => (v, t, p),
                1 => (q, v, p),
                2 => (p, v, t),
                3 => (p, q, v),
                4 => (t, p, v),
                _ => (v, p, q),
            };
            [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
        })
        .collect()
}

fn cmd_merge_viz(
    ckpt: Option<&Path>,
    config: Option<&Path>,
    input: &Path,
    out: &Path,
) -> CliResult {
    let cfg: CaptionConfig = read_config(config)?;
    let model = model_for_checkpoint(&cfg)?;
    if let Some(ckpt) = ckpt {
        let digest = checkpoint::config_digest(&resolved_json(&cfg)?);
        checkpoint::load_into(ckpt, Some(&digest), &model.named_params())?;
    }
    let frames = load_frames(input)?;
    if frames.len() != 1 {
        return Err(CliError::Usage("merge-viz takes a single image".into()));
    }
    let pixels = evlgen::datagen::pixels_to_f64(&frames[0]);
    let visual = model.encoder.encode_image(&pixels)?;
    let (_, batch) = model.connector.forward(&visual)?;

    let grid = model.cfg.encoder.grid();
    let num_patches = grid * grid;
    let offset = usize::from(model.cfg.connector.include_protected_token);
    let colors = palette(batch.groups.len());
    let mut patch_color = vec![None; num_patches];
    for (g, group) in batch.groups.iter().enumerate() {
        for &idx in group {
            if idx >= offset {
                patch_color[idx - offset] = Some(colors[g]);
            }
        }
    }
    let patch = model.cfg.encoder.patch_size;
    let side = grid * patch;
    let mut image = vec![0u8; side * side * 3];
    for (p, color) in patch_color.iter().enumerate() {
        let color = color.ok_or_else(|| {
            CliError::Property(format!("patch {p} missing from the provenance partition"))
        })?;
        let (py, px) = (p / grid, p % grid);
        for dy in 0..patch {
            for dx in 0..patch {
                let base = ((py * patch + dy) * side + px * patch + dx) * 3;
                image[base..base + 3].copy_from_slice(&color);
            }
        }
    }
    write_ppm(out, &image, side, side)?;
    println!("tokens\t{}", batch.groups.len());
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TemporalCheckConfig {
    dim: usize,
    frames: usize,
    positions: usize,
    seed: u64,
    scale_logits: bool,
    frame_pos_embed: bool,
}

impl Default for TemporalCheckConfig {
    fn default() -> Self {
        TemporalCheckConfig {
            dim: 16,
            frames: 4,
            positions: 8,
            seed: 0,
            scale_logits: false,
            frame_pos_embed: false,
        }
    }
}

fn cmd_temporal_check(config: Option<&Path>) -> CliResult {
    let cfg: TemporalCheckConfig = read_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut module = TemporalModule::new(cfg.dim, &mut rng);
    module.scale_logits = cfg.scale_logits;
    if cfg.frame_pos_embed {
        module = module.with_frame_pos_embed(cfg.frames.max(8), &mut rng);
    }
    let mut failed = false;
    let mut report = |name: &str, ok: bool| {
        println!("{name}\t{}", if ok { "pass" } else { "fail" });
        failed |= !ok;
    };

    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);

    // single frame: the module always doubles the stream
    let single = Tensor::randn(&[1, 1, cfg.positions, cfg.dim], 1.0, &mut rng);
    let out = module.forward(&FrameBatch::new(single.clone())?)?;
    let doubled: Vec<f64> = single.to_vec().iter().map(|v| 2.0 * v).collect();
    report("single-frame-identity", close(&out.activations.to_vec(), &doubled));

    // static input: identical frames also reduce to a doubling
    let frame = Tensor::randn(&[cfg.positions, cfg.dim], 1.0, &mut rng).to_vec();
    let mut stacked = Vec::new();
    for _ in 0..cfg.frames {
        stacked.extend_from_slice(&frame);
    }
    let fb = FrameBatch::new(Tensor::new(
        stacked.clone(),
        &[1, cfg.frames, cfg.positions, cfg.dim],
    )?)?;
    let out = module.forward(&fb)?;
    let doubled: Vec<f64> = stacked.iter().map(|v| 2.0 * v).collect();
    report("static-frames-identity", close(&out.activations.to_vec(), &doubled));

    // permutation equivariance holds only without frame position encoding
    if cfg.frame_pos_embed {
        println!("frame-permutation\tskipped");
    } else {
        let x = Tensor::randn(&[1, cfg.frames, cfg.positions, cfg.dim], 1.0, &mut rng);
        let base = module
            .forward(&FrameBatch::new(x.clone())?)?
            .activations
            .to_vec();
        let per_frame = cfg.positions * cfg.dim;
        let xv = x.to_vec();
        let mut reversed = Vec::new();
        for f in (0..cfg.frames).rev() {
            reversed.extend_from_slice(&xv[f * per_frame..(f + 1) * per_frame]);
        }
        let out = module
            .forward(&FrameBatch::new(Tensor::new(
                reversed,
                &[1, cfg.frames, cfg.positions, cfg.dim],
            )?)?)?
            .activations
            .to_vec();
        let ok = (0..cfg.frames).all(|f| {
            let a = &base[f * per_frame..(f + 1) * per_frame];
            let b = &out[(cfg.frames - 1 - f) * per_frame..(cfg.frames - f) * per_frame];
            close(a, b)
        });
        report("frame-permutation", ok);
    }

    if failed {
        Err(CliError::Property("temporal property suite failed".into()))
    } else {
        Ok(())
    }
}
