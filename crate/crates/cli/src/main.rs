//! `vinet`: synthesize data and masks, cache flow, train, infer, evaluate and
//! render comparisons.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};

use vinet_core::compare::{compare_video, save_images};
use vinet_core::dataset::{cache_flow, prepare_out_dir, synthetic_dataset, Dataset};
use vinet_core::eval::{metric_csv, psnr_ssim, video_fid_trials, warping_error, MetricRow};
use vinet_core::flow_oracle::PyramidLucasKanade;
use vinet_core::maskgen::{object_mask, MaskKind, MaskSpec};
use vinet_core::media::{self, Clip};
use vinet_core::pipeline::{self, InferMode, TrainConfig};
use vinet_core::{Error, Result, Vinet};

const DEFAULT_CONFIG: &str = "vinet.cfg";

#[derive(Parser)]
#[command(name = "vinet", version, about = "Recurrent video inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with exact flow and occlusion supervision.
    MakeData {
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Square frame size; overridden by --height/--width.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Generate a hole-mask sequence.
    MakeMasks {
        #[arg(long, value_parser = parse_kind)]
        kind: MaskKind,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Segmentation masks for `--kind object`.
        #[arg(long)]
        segmentation: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        dilation: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Estimate and cache flow and occlusion for every clip of a dataset.
    CacheFlow {
        #[arg(long)]
        data: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: Option<u8>,
        /// Flat key=value file; defaults to ./vinet.cfg when present.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Initial weights; required for stage 2.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print a loss line every N steps (0 = silent).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Inpaint one video.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to per-frame for stage-1 checkpoints, recurrent otherwise.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Score inpainted videos against a dataset.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        /// Directory with one sub-directory of frames per dataset clip.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extractor seeds averaged for FID (default: the extractor's built-in seed).
        #[arg(long, value_delimiter = ',', default_value = "23997")]
        fid_seeds: Vec<u64>,
    },
    /// Tile videos side by side with the hole boundary on the first tile.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Recurrent,
    PerFrame,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Warp,
    Fid,
    Psnr,
}

fn parse_kind(s: &str) -> std::result::Result<MaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(explicit: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => Some(PathBuf::from(DEFAULT_CONFIG)).filter(|p| p.is_file()),
    };
    if let Some(p) = path {
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        cfg.apply_text(&text)?;
    }
    Ok(cfg)
}

/// Frames of a prediction: `<dir>/frames` when present, else `<dir>` itself.
fn load_pred(dir: &Path) -> Result<Clip> {
    let nested = dir.join("frames");
    media::load_clip(if nested.is_dir() { &nested } else { dir })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData {
            clips,
            frames,
            size,
            height,
            width,
            seed,
            out,
            force,
        } => {
            let (h, w) = (height.unwrap_or(size), width.unwrap_or(size));
            let ds = synthetic_dataset(clips, frames, h, w, seed)?;
            ds.save(&out, force)?;
            println!("wrote {clips} clips of {frames} frames ({h}x{w}) to {}", out.display());
        }
        Command::MakeMasks {
            kind,
            frames,
            height,
            width,
            seed,
            segmentation,
            dilation,
            out,
            force,
        } => {
            let masks = match kind {
                MaskKind::Object => {
                    let seg = segmentation
                        .ok_or_else(|| Error::Contract("--kind object needs --segmentation".into()))?;
                    object_mask(&seg, dilation, None)?
                }
                k => MaskSpec::new(k, seed).generate(frames, height, width)?,
            };
            prepare_out_dir(&out, force)?;
            media::save_masks(&masks, &out)?;
            println!("wrote {} {kind} masks to {}", masks.len(), out.display());
        }
        Command::CacheFlow { data } => {
            let n = cache_flow(&data, &PyramidLucasKanade::default())?;
            println!("cached flow for {n} clips");
        }
        Command::Train {
            stage,
            config,
            data,
            out,
            ckpt,
            iterations,
            seed,
            log_every,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = stage {
                cfg.stage = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dataset = Dataset::load(&data)?;
            let run = pipeline::train(&cfg, &dataset, ckpt.as_deref(), Some(&out), &mut |i, r| {
                if log_every > 0 && (i + 1) % log_every == 0 {
                    println!("step {:>6}  total {:.5}  l1 {:.5}  ssim {:.5}", i + 1, r.total, r.recon_l1, r.recon_ssim);
                }
            })?;
            println!(
                "stage {} finished after {} iterations; checkpoint at {}",
                run.stage,
                cfg.iterations,
                out.join(pipeline::FINAL_CHECKPOINT).display()
            );
        }
        Command::Infer {
            ckpt,
            frames,
            masks,
            out,
            mode,
        } => {
            let (model, meta) = Vinet::load(&ckpt, DType::F32, &Device::Cpu)?;
            let mode = match mode {
                Some(ModeArg::Recurrent) => InferMode::Recurrent,
                Some(ModeArg::PerFrame) => InferMode::PerFrame,
                None => InferMode::for_stage(meta.stage),
            };
            let clip = media::load_clip(&frames)?;
            let masks = media::load_masks(&masks)?;
            let result = pipeline::infer(&model, &clip, &masks, mode)?;
            media::save_clip(&result.frames, &out.join("frames"))?;
            if !result.flows.is_empty() {
                let dir = out.join("flow");
                fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                for (t, f) in result.flows.iter().enumerate() {
                    media::write_flow(f, &dir.join(format!("{t:05}.flo")))?;
                }
            }
            let dir = out.join("comp");
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            for (t, maps) in result.comp_masks.iter().enumerate() {
                for (m, scale) in maps.iter().zip(["s8", "s4", "s2", "s1"]) {
                    m.save(&dir.join(format!("{t:05}_{scale}.png")))?;
                }
            }
            println!("inpainted {} frames into {}", result.frames.len(), out.display());
        }
        Command::Eval {
            metric,
            pred,
            data,
            out,
            fid_seeds,
        } => {
            let dataset = Dataset::load(&data)?;
            let preds = dataset
                .clips()
                .iter()
                .map(|c| load_pred(&pred.join(&c.name)))
                .collect::<Result<Vec<_>>>()?;
            let csv = match metric {
                Metric::Warp => {
                    let rows = dataset
                        .clips()
                        .iter()
                        .zip(&preds)
                        .map(|(c, p)| {
                            Ok(MetricRow {
                                video: c.name.clone(),
                                values: vec![warping_error(p, &c.flows_bwd, &c.valid_bwd)?],
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    metric_csv(&["warping_error"], &rows)
                }
                Metric::Psnr => {
                    let rows = dataset
                        .clips()
                        .iter()
                        .zip(&preds)
                        .map(|(c, p)| {
                            let (psnr, ssim) = psnr_ssim(p, &c.frames)?;
                            Ok(MetricRow {
                                video: c.name.clone(),
                                values: vec![psnr, ssim],
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    metric_csv(&["psnr", "ssim"], &rows)
                }
                Metric::Fid => {
                    let refs: Vec<Clip> = dataset.clips().iter().map(|c| c.frames.clone()).collect();
                    let fid = video_fid_trials(&preds, &refs, &fid_seeds)?;
                    format!("video,fid\nall,{fid}\n")
                }
            };
            write_text(&out, &csv)?;
            print!("{csv}");
        }
        Command::Compare { inputs, masks, out } => {
            let clips = inputs.iter().map(|d| media::load_clip(d)).collect::<Result<Vec<_>>>()?;
            let masks = masks.as_deref().map(media::load_masks).transpose()?;
            let frames = compare_video(&clips, masks.as_ref())?;
            save_images(&frames, &out)?;
            println!("wrote {} comparison frames to {}", frames.len(), out.display());
        }
    }
    Ok(())
}

/// Exit code and stable tag for an error class.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Contract(_) | Error::DimensionMismatch(_) => (2, "contract"),
        Error::Io { .. } | Error::Decode { .. } | Error::Format { .. } => (3, "io"),
        Error::NonFinite { .. } => (1, "nonfinite"),
        Error::Tensor(_) => (1, "internal"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, tag) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}
