//! Batch sampling with stride-3 neighbor windows, two-stage training and
//! sliding-window recurrent inference.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ClipData, Dataset};
use crate::error::{contract, Error, Result};
use crate::losses::{
    flow_loss_tensor, masked_warp_loss_tensor, recon_loss_tensor, LossReport, LossTerms, LossWeights, TemporalTerms,
};
use crate::maskgen::{dilate_seq, MaskKind, MaskSpec};
use crate::media::{
    flows_to_tensor, frames_to_tensor, masks_to_tensor, tensor_to_flows, tensor_to_frames, Clip, FlowField, Frame,
    Mask, MaskSeq,
};
use crate::model::{pack_input, ModelConfig, StepInput, StepMode, Vinet};

/// Temporal offsets of the five frames around a target, before clamping.
pub const NEIGHBOR_OFFSETS: [isize; 5] = [-6, -3, 0, 3, 6];
/// Dilation applied to segmentation masks when drawing object holes.
pub const OBJECT_DILATION: usize = 5;

/// Frame indices for offsets `{−6, −3, 0, +3, +6}` around `t`, clamped to `[0, len − 1]`.
pub fn neighbor_indices(t: usize, len: usize) -> [usize; 5] {
    NEIGHBOR_OFFSETS.map(|o| (t as isize + o).clamp(0, len as isize - 1) as usize)
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Expected frame size; `None` accepts the dataset's.
    pub resolution: Option<(usize, usize)>,
    /// Consecutive targets per sample.
    pub recurrence: usize,
    /// Intermediate checkpoint period (0 disables).
    pub checkpoint_every: usize,
    /// Cut gradients through `Ŷ_{t−1}` and the memory between steps.
    pub detach_feedback: bool,
    /// Extra L1 weight on hole pixels (0 = plain full-frame loss).
    pub hole_weight: f64,
    pub mask_kinds: Vec<MaskKind>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weights: LossWeights::default(),
            batch_size: 4,
            iterations: 20_000,
            seed: 0,
            resolution: None,
            recurrence: 5,
            checkpoint_every: 1000,
            detach_feedback: false,
            hole_weight: 0.0,
            mask_kinds: MaskKind::ALL.to_vec(),
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Contract(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

impl TrainConfig {
    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "stage" => self.stage = parse(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "weight_recon" => self.weights.recon = parse(key, v)?,
            "weight_flow" => self.weights.flow = parse(key, v)?,
            "weight_warp" => self.weights.warp = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "height" => self.resolution = Some((parse(key, v)?, self.resolution.map_or(0, |r| r.1))),
            "width" => self.resolution = Some((self.resolution.map_or(0, |r| r.0), parse(key, v)?)),
            "recurrence" => self.recurrence = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "detach_feedback" => self.detach_feedback = parse(key, v)?,
            "hole_weight" => self.hole_weight = parse(key, v)?,
            "mask_kinds" => self.mask_kinds = parse_list(key, v)?,
            "widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                self.model.widths = w
                    .try_into()
                    .map_err(|_| Error::Contract("`widths` needs four comma-separated values".into()))?;
            }
            "share_reference_encoder" => self.model.share_reference_encoder = parse(key, v)?,
            other => return Err(Error::Contract(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Contract(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.stage == 1 || self.stage == 2, "stage must be 1 or 2, got {}", self.stage);
        contract!(self.batch_size >= 1, "batch_size must be positive");
        contract!(self.recurrence >= 1, "recurrence must be positive");
        contract!(self.learning_rate > 0.0, "learning_rate must be positive");
        contract!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "betas must lie in [0, 1)"
        );
        contract!(self.hole_weight >= 0.0, "hole_weight must be non-negative");
        contract!(!self.mask_kinds.is_empty(), "mask_kinds is empty");
        self.weights.validate()
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// One training sample: `recurrence` consecutive targets of one clip and the
/// hole masks for the whole clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub clip: usize,
    pub targets: Vec<usize>,
    pub mask_kind: MaskKind,
    pub masks: MaskSeq,
}

impl TrainSample {
    /// Frame preceding target `k` in the recurrence (clamped at the clip start).
    pub fn prev(&self, k: usize) -> usize {
        if k == 0 {
            self.targets[0].saturating_sub(1)
        } else {
            self.targets[k - 1]
        }
    }
}

/// Draws `batch_size` samples: uniform clip, uniform start, uniform mask kind.
/// Object holes need segmentation and are skipped for datasets without it.
pub fn sample_batch(
    dataset: &Dataset,
    kinds: &[MaskKind],
    batch_size: usize,
    recurrence: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    contract!(!dataset.is_empty(), "dataset is empty");
    let kinds: Vec<MaskKind> = kinds
        .iter()
        .copied()
        .filter(|&k| k != MaskKind::Object || dataset.has_segmentation())
        .collect();
    contract!(!kinds.is_empty(), "no usable mask kinds for this dataset");
    let (h, w) = dataset.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch_size)
        .map(|_| {
            let clip = rng.random_range(0..dataset.len());
            let data = dataset.clip(clip);
            let len = data.len();
            let start = rng.random_range(0..=len.saturating_sub(recurrence));
            let targets = (start..start + recurrence).map(|t| t.min(len - 1)).collect();
            let mask_kind = kinds[rng.random_range(0..kinds.len())];
            let mask_seed = rng.random::<u64>();
            let masks = match mask_kind {
                MaskKind::Object => dilate_seq(data.segmentation.as_ref().expect("filtered above"), OBJECT_DILATION)?,
                kind => MaskSpec::new(kind, mask_seed).generate(len, h, w)?,
            };
            Ok(TrainSample {
                clip,
                targets,
                mask_kind,
                masks,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tensor assembly

/// A target frame together with the frame treated as its predecessor.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub clip: &'a Clip,
    pub masks: &'a MaskSeq,
    pub t: usize,
    pub prev: usize,
}

fn pack_frames(items: &[(&Clip, &MaskSeq, usize)], dtype: DType, dev: &Device) -> Result<Tensor> {
    let frames: Vec<&Frame> = items.iter().map(|(c, _, t)| c.frame(*t)).collect();
    let masks: Vec<&Mask> = items.iter().map(|(_, m, t)| m.mask(*t)).collect();
    pack_input(&frames_to_tensor(&frames, dtype, dev)?, &masks_to_tensor(&masks, dtype, dev)?)
}

/// Packs neighbors (stream-major), reference and previous input for a batch of targets.
pub fn build_step_input(targets: &[Target<'_>], dtype: DType, dev: &Device) -> Result<StepInput> {
    let mut neighbors = Vec::with_capacity(4 * targets.len());
    for stream in [0, 1, 3, 4] {
        for tg in targets {
            neighbors.push((tg.clip, tg.masks, neighbor_indices(tg.t, tg.clip.len())[stream]));
        }
    }
    let at = |f: fn(&Target<'_>) -> usize| -> Vec<(&Clip, &MaskSeq, usize)> {
        targets.iter().map(|tg| (tg.clip, tg.masks, f(tg))).collect()
    };
    Ok(StepInput {
        neighbors: pack_frames(&neighbors, dtype, dev)?,
        reference: pack_frames(&at(|tg| tg.t), dtype, dev)?,
        prev_input: pack_frames(&at(|tg| tg.prev), dtype, dev)?,
    })
}

fn targets_at<'a>(dataset: &'a Dataset, batch: &'a [TrainSample], k: usize) -> Vec<Target<'a>> {
    batch
        .iter()
        .map(|s| Target {
            clip: &dataset.clip(s.clip).frames,
            masks: &s.masks,
            t: s.targets[k],
            prev: s.prev(k),
        })
        .collect()
}

fn gt_frames(targets: &[Target<'_>], pick: fn(&Target<'_>) -> usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let frames: Vec<&Frame> = targets.iter().map(|tg| tg.clip.frame(pick(tg))).collect();
    frames_to_tensor(&frames, dtype, dev)
}

fn hole_tensor(targets: &[Target<'_>], dtype: DType, dev: &Device) -> Result<Tensor> {
    let masks: Vec<&Mask> = targets.iter().map(|tg| tg.masks.mask(tg.t)).collect();
    masks_to_tensor(&masks, dtype, dev)
}

fn supervision(
    pairs: Vec<(FlowField, Mask)>,
    dtype: DType,
    dev: &Device,
) -> Result<(Tensor, Tensor)> {
    let flows: Vec<&FlowField> = pairs.iter().map(|(f, _)| f).collect();
    let masks: Vec<&Mask> = pairs.iter().map(|(_, m)| m).collect();
    Ok((flows_to_tensor(&flows, dtype, dev)?, masks_to_tensor(&masks, dtype, dev)?))
}

fn mean_of(terms: &[Tensor], dtype: DType, dev: &Device) -> Result<Tensor> {
    if terms.is_empty() {
        return Ok(Tensor::zeros((), dtype, dev)?);
    }
    Ok(Tensor::stack(terms, 0)?.mean_all()?)
}

/// Stage-1 objective: every target inpainted independently, reconstruction only.
pub fn stage1_terms(model: &Vinet, dataset: &Dataset, batch: &[TrainSample], config: &TrainConfig) -> Result<LossTerms> {
    let (dtype, dev) = (model.dtype(), model.device().clone());
    let r = batch[0].targets.len();
    let targets: Vec<Target<'_>> = (0..r).flat_map(|k| targets_at(dataset, batch, k)).collect();
    let input = build_step_input(&targets, dtype, &dev)?;
    let (h, w) = dataset.dims();
    let state = model.init_state(&Tensor::zeros((targets.len(), 3, h, w), dtype, &dev)?)?;
    let out = model.step(&input, &state, StepMode::STAGE1)?;
    let gt = gt_frames(&targets, |tg| tg.t, dtype, &dev)?;
    let holes = hole_tensor(&targets, dtype, &dev)?;
    let (recon_l1, recon_ssim) = recon_loss_tensor(&out.output, &gt, Some(&holes), config.hole_weight)?;
    Ok(LossTerms {
        recon_l1,
        recon_ssim,
        temporal: None,
    })
}

/// Stage-2 objective: the targets run as a recurrence with feedback and
/// memory; temporal terms cover every step after the first.
pub fn stage2_terms(model: &Vinet, dataset: &Dataset, batch: &[TrainSample], config: &TrainConfig) -> Result<LossTerms> {
    let (dtype, dev) = (model.dtype(), model.device().clone());
    let r = batch[0].targets.len();
    let first = targets_at(dataset, batch, 0);
    let init: Vec<(&Clip, &MaskSeq, usize)> = first.iter().map(|tg| (tg.clip, tg.masks, tg.prev)).collect();
    let mut state = model.init_state(&pack_frames(&init, dtype, &dev)?.narrow(1, 0, 3)?)?;
    let clips: Vec<&ClipData> = batch.iter().map(|s| dataset.clip(s.clip)).collect();

    let (mut l1s, mut ssims, mut epes, mut fws, mut shorts, mut longs) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for k in 0..r {
        let targets = targets_at(dataset, batch, k);
        let input = build_step_input(&targets, dtype, &dev)?;
        let out = model.step(&input, &state, StepMode::FULL)?;
        let gt = gt_frames(&targets, |tg| tg.t, dtype, &dev)?;
        let holes = hole_tensor(&targets, dtype, &dev)?;
        let (l1, ss) = recon_loss_tensor(&out.output, &gt, Some(&holes), config.hole_weight)?;
        l1s.push(l1);
        ssims.push(ss);
        if k >= 1 {
            let prev_gt = gt_frames(&targets, |tg| tg.prev, dtype, &dev)?;
            let (flow_gt, valid) = supervision(
                targets.iter().zip(&clips).map(|(tg, c)| c.consecutive(tg.t, tg.prev)).collect(),
                dtype,
                &dev,
            )?;
            let (flow_first, valid_first) = supervision(
                targets.iter().zip(&clips).map(|(tg, c)| c.to_first(tg.t)).collect(),
                dtype,
                &dev,
            )?;
            let first_gt = gt_frames(&targets, |_| 0, dtype, &dev)?;
            let flow = out.flow.as_ref().expect("feedback mode predicts a flow");
            let (epe, fw) = flow_loss_tensor(flow, &flow_gt, &gt, &prev_gt)?;
            epes.push(epe);
            fws.push(fw);
            shorts.push(masked_warp_loss_tensor(&out.output, &prev_gt, &flow_gt, &valid)?);
            longs.push(masked_warp_loss_tensor(&out.output, &first_gt, &flow_first, &valid_first)?);
        }
        state = if config.detach_feedback {
            out.new_state.detach()
        } else {
            out.new_state
        };
    }
    Ok(LossTerms {
        recon_l1: mean_of(&l1s, dtype, &dev)?,
        recon_ssim: mean_of(&ssims, dtype, &dev)?,
        temporal: Some(TemporalTerms {
            flow_epe: mean_of(&epes, dtype, &dev)?,
            flow_warp: mean_of(&fws, dtype, &dev)?,
            warp_short: mean_of(&shorts, dtype, &dev)?,
            warp_long: mean_of(&longs, dtype, &dev)?,
        }),
    })
}

// ---------------------------------------------------------------------------
// Training

/// Deterministic per-iteration batch seed.
fn batch_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stateful optimizer loop over one training stage.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    model: Vinet,
    optimizer: AdamW,
    iteration: usize,
    dump_dir: PathBuf,
}

impl<'a> Trainer<'a> {
    /// `model_stage` is the stage of the weights in `model` (0 = fresh).
    pub fn new(config: TrainConfig, dataset: &'a Dataset, model: Vinet, model_stage: u8) -> Result<Self> {
        config.validate()?;
        contract!(
            config.stage == 1 || model_stage >= 1,
            "stage-2 training needs a stage-1 checkpoint"
        );
        if let Some((h, w)) = config.resolution {
            contract!(
                dataset.dims() == (h, w),
                "dataset frames are {:?} but the configured resolution is {h}x{w}",
                dataset.dims()
            );
        }
        let optimizer = AdamW::new(
            model.stage_vars(config.stage),
            ParamsAdamW {
                lr: config.learning_rate,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self {
            config,
            dataset,
            model,
            optimizer,
            iteration: 0,
            dump_dir: std::env::temp_dir().join("vinet-nonfinite"),
        })
    }

    /// Where the offending batch is written if a loss turns non-finite.
    pub fn set_dump_dir(&mut self, dir: PathBuf) {
        self.dump_dir = dir;
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn model(&self) -> &Vinet {
        &self.model
    }

    pub fn into_model(self) -> Vinet {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// The batch the next call to [`Trainer::step`] will use.
    pub fn next_batch(&self) -> Result<Vec<TrainSample>> {
        sample_batch(
            self.dataset,
            &self.config.mask_kinds,
            self.config.batch_size,
            self.config.recurrence,
            batch_seed(self.config.seed, self.iteration),
        )
    }

    pub fn loss_terms(&self, batch: &[TrainSample]) -> Result<LossTerms> {
        match self.config.stage {
            1 => stage1_terms(&self.model, self.dataset, batch, &self.config),
            _ => stage2_terms(&self.model, self.dataset, batch, &self.config),
        }
    }

    /// One optimization step; returns the pre-update losses.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.next_batch()?;
        let terms = self.loss_terms(&batch)?;
        let report = terms.report(&self.config.weights)?;
        if !report.is_finite() {
            let dump = self.dump_dir.join(format!("step_{:06}", self.iteration));
            dump_batch(self.dataset, &batch, &dump)?;
            return Err(Error::NonFinite {
                step: self.iteration,
                dump,
            });
        }
        let total = terms.total(&self.config.weights)?;
        self.optimizer.backward_step(&total)?;
        self.iteration += 1;
        Ok(report)
    }
}

fn dump_batch(dataset: &Dataset, batch: &[TrainSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut info = String::new();
    for (i, s) in batch.iter().enumerate() {
        let clip = &dataset.clip(s.clip);
        let _ = writeln!(info, "sample {i}: clip {} targets {:?} masks {}", clip.name, s.targets, s.mask_kind);
        let sub = dir.join(format!("sample_{i:02}"));
        let frames: Vec<Frame> = s.targets.iter().map(|&t| clip.frames.frame(t).clone()).collect();
        let masks: Vec<Mask> = s.targets.iter().map(|&t| s.masks.mask(t).clone()).collect();
        crate::media::save_clip(&Clip::new(frames)?, &sub.join("frames"))?;
        crate::media::save_masks(&MaskSeq::new(masks)?, &sub.join("masks"))?;
    }
    let path = dir.join("batch.txt");
    fs::write(&path, info).map_err(|e| Error::io(path, e))
}

/// Result of [`train`].
pub struct TrainRun {
    pub model: Vinet,
    pub reports: Vec<LossReport>,
    /// Stage recorded in the final checkpoint.
    pub stage: u8,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.safetensors";
pub const LOSS_CSV: &str = "loss.csv";

/// Runs one training stage. With `out_dir`, writes `loss.csv`, periodic
/// `checkpoint_NNNNNN.safetensors` and the final `checkpoint.safetensors`.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    checkpoint_in: Option<&Path>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(usize, &LossReport),
) -> Result<TrainRun> {
    config.validate()?;
    let dev = Device::Cpu;
    let (model, in_stage) = match checkpoint_in {
        Some(p) => {
            let (m, meta) = Vinet::load(p, DType::F32, &dev)?;
            (m, meta.stage)
        }
        None => {
            contract!(config.stage == 1, "stage-2 training needs a stage-1 checkpoint");
            (Vinet::new(config.model.clone(), config.seed, DType::F32, &dev)?, 0)
        }
    };
    let mut trainer = Trainer::new(config.clone(), dataset, model, in_stage)?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            trainer.set_dump_dir(dir.join("nonfinite"));
            let path = dir.join(LOSS_CSV);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(config.iterations);
    for i in 0..config.iterations {
        let report = trainer.step()?;
        on_step(i, &report);
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", report.csv_row(i)).map_err(|e| Error::io(&*path, e))?;
        }
        if let (Some(dir), true) = (out_dir, config.checkpoint_every > 0 && (i + 1) % config.checkpoint_every == 0) {
            trainer
                .model()
                .save(&dir.join(format!("checkpoint_{:06}.safetensors", i + 1)), config.stage, i + 1)?;
        }
        reports.push(report);
    }
    let stage = if config.iterations == 0 { in_stage } else { config.stage };
    if let Some(dir) = out_dir {
        trainer.model().save(&dir.join(FINAL_CHECKPOINT), stage, config.iterations)?;
    }
    Ok(TrainRun {
        model: trainer.into_model(),
        reports,
        stage,
    })
}

// ---------------------------------------------------------------------------
// Inference

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Feedback and memory on.
    Recurrent,
    /// Every frame independently, fifth stream = masked previous input.
    PerFrame,
}

impl InferMode {
    /// Stage-1 weights run frame by frame; later stages recurrently.
    pub fn for_stage(stage: u8) -> Self {
        if stage >= 2 {
            InferMode::Recurrent
        } else {
            InferMode::PerFrame
        }
    }

    fn step_mode(self) -> StepMode {
        match self {
            InferMode::Recurrent => StepMode::FULL,
            InferMode::PerFrame => StepMode::STAGE1,
        }
    }
}

/// Real-valued single-channel map in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SoftMask {
    fn from_tensor(t: &Tensor) -> Result<Self> {
        let (_, _, h, w) = t.dims4()?;
        Ok(Self {
            height: h,
            width: w,
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        })
    }

    /// 8-bit grayscale PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes).expect("sized buffer");
        img.save(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    pub frames: Clip,
    /// Full-resolution `Ŵ_{t⇒t−1}` per frame (recurrent mode only).
    pub flows: Vec<FlowField>,
    /// Composition masks at 1/8, 1/4, 1/2 followed by the output blend mask
    /// (recurrent mode only), per frame.
    pub comp_masks: Vec<Vec<SoftMask>>,
}

/// Inpaints `clip` frame by frame in a sliding window. State is detached after
/// every step, so memory use does not grow with the clip length.
pub fn infer(model: &Vinet, clip: &Clip, masks: &MaskSeq, mode: InferMode) -> Result<InferOutput> {
    masks.check_pairs(clip)?;
    let (dtype, dev) = (model.dtype(), model.device().clone());
    let init = pack_frames(&[(clip, masks, 0)], dtype, &dev)?.narrow(1, 0, 3)?;
    let mut state = model.init_state(&init)?;
    let (mut frames, mut flows, mut comp) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..clip.len() {
        let target = Target {
            clip,
            masks,
            t,
            prev: t.saturating_sub(1),
        };
        let input = build_step_input(&[target], dtype, &dev)?;
        let out = model.step(&input, &state, mode.step_mode())?;
        frames.extend(tensor_to_frames(&out.output)?);
        if let Some(f) = &out.flow {
            flows.extend(tensor_to_flows(f)?);
        }
        let maps = out
            .comp_masks
            .iter()
            .chain(out.blend_mask.iter())
            .map(SoftMask::from_tensor)
            .collect::<Result<Vec<_>>>()?;
        comp.push(maps);
        state = out.new_state.detach();
    }
    Ok(InferOutput {
        frames: Clip::new(frames)?,
        flows,
        comp_masks: comp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_dataset;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 1,
            iterations: 2,
            resolution: Some((16, 16)),
            recurrence: 3,
            checkpoint_every: 0,
            model: ModelConfig::with_widths([4, 4, 8, 8]),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn neighbor_window_arithmetic_and_clamping() {
        // one-based {1,4,7,10,13} for t=7 is zero-based {0,3,6,9,12} for t=6
        assert_eq!(neighbor_indices(6, 32), [0, 3, 6, 9, 12]);
        assert_eq!(neighbor_indices(0, 32), [0, 0, 0, 3, 6]);
        assert_eq!(neighbor_indices(31, 32), [25, 28, 31, 31, 31]);
        assert_eq!(neighbor_indices(0, 1), [0; 5]);
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let ds = synthetic_dataset(3, 12, 16, 16, 1).unwrap();
        let a = sample_batch(&ds, &MaskKind::ALL, 6, 5, 42).unwrap();
        let b = sample_batch(&ds, &MaskKind::ALL, 6, 5, 42).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.clip < 3);
            assert_eq!(s.masks.len(), 12);
            assert!(s.targets.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(*s.targets.last().unwrap() < 12);
        }
        let short = synthetic_dataset(1, 2, 16, 16, 1).unwrap();
        let s = &sample_batch(&short, &[MaskKind::RandomSquare], 1, 5, 0).unwrap()[0];
        assert_eq!(s.targets, vec![0, 1, 1, 1, 1]);
        assert_eq!(s.prev(0), 0);
    }

    #[test]
    fn config_parsing() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\nstage = 2\nlr=0.001\nwidths=8,16,32,64\nmask_kinds=flying-square,arbitrary\n")
            .unwrap();
        assert_eq!(c.stage, 2);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.model.widths, [8, 16, 32, 64]);
        assert_eq!(c.mask_kinds, vec![MaskKind::FlyingSquare, MaskKind::Arbitrary]);
        assert!(c.apply_text("bogus=1").unwrap_err().is_contract());
        assert!(c.apply_text("stage").unwrap_err().is_contract());
        assert!(c.set("widths", "1,2").unwrap_err().is_contract());
    }

    #[test]
    fn stage2_without_checkpoint_is_contract_error() {
        let ds = synthetic_dataset(1, 8, 16, 16, 1).unwrap();
        let cfg = TrainConfig { stage: 2, ..tiny_config() };
        let err = train(&cfg, &ds, None, None, &mut |_, _| {}).err().unwrap();
        assert!(err.is_contract());
    }

    #[test]
    fn stage1_never_touches_memory_parameters() {
        let ds = synthetic_dataset(1, 8, 16, 16, 1).unwrap();
        let cfg = tiny_config();
        let model = Vinet::new(cfg.model.clone(), 3, DType::F32, &Device::Cpu).unwrap();
        let batch = sample_batch(&ds, &cfg.mask_kinds, 1, 3, 9).unwrap();
        let loss = stage1_terms(&model, &ds, &batch, &cfg).unwrap().total(&cfg.weights).unwrap();
        let grads = loss.backward().unwrap();
        for g in ["convlstm", "flow_1", "mask_1"] {
            assert!(model.group_vars(g).iter().all(|(_, v)| grads.get(v).is_none()), "{g}");
        }
        assert!(model.group_vars("decoder").iter().all(|(_, v)| grads.get(v).is_some()));
    }

    #[test]
    fn zero_iterations_round_trips_checkpoint() {
        let ds = synthetic_dataset(1, 8, 16, 16, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { iterations: 0, ..tiny_config() };
        let run = train(&cfg, &ds, None, Some(dir.path()), &mut |_, _| {}).unwrap();
        assert_eq!(run.stage, 0);
        let fresh = Vinet::new(cfg.model.clone(), cfg.seed, DType::F32, &Device::Cpu).unwrap();
        let fresh_path = dir.path().join("fresh.safetensors");
        fresh.save(&fresh_path, 0, 0).unwrap();
        assert_eq!(fs::read(&fresh_path).unwrap(), fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap());
    }

    #[test]
    fn both_stages_run_and_log() {
        let ds = synthetic_dataset(2, 8, 16, 16, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s1 = dir.path().join("s1");
        let run = train(&tiny_config(), &ds, None, Some(&s1), &mut |_, _| {}).unwrap();
        assert_eq!(run.reports.len(), 2);
        assert!(run.reports.iter().all(|r| r.flow_epe == 0.0 && r.total > 0.0));
        let csv = fs::read_to_string(s1.join(LOSS_CSV)).unwrap();
        let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(steps, vec!["0", "1"]);

        let cfg2 = TrainConfig { stage: 2, ..tiny_config() };
        let run2 = train(&cfg2, &ds, Some(&s1.join(FINAL_CHECKPOINT)), None, &mut |_, _| {}).unwrap();
        assert_eq!(run2.stage, 2);
        assert!(run2.reports.iter().all(|r| r.is_finite() && r.flow_epe > 0.0));
    }

    #[test]
    fn inference_shapes_boundaries_and_determinism() {
        let ds = synthetic_dataset(1, 4, 16, 16, 2).unwrap();
        let model = Vinet::new(ModelConfig::with_widths([4, 4, 8, 8]), 1, DType::F32, &Device::Cpu).unwrap();
        let clip = &ds.clip(0).frames;
        let masks = MaskSpec::new(MaskKind::RandomSquare, 1).generate(4, 16, 16).unwrap();
        let a = infer(&model, clip, &masks, InferMode::Recurrent).unwrap();
        assert_eq!(a.frames.len(), 4);
        assert_eq!(a.flows.len(), 4);
        assert_eq!(a.comp_masks[0].len(), 4);
        let b = infer(&model, clip, &masks, InferMode::Recurrent).unwrap();
        assert_eq!(a.frames.frames(), b.frames.frames());

        let single = Clip::new(vec![clip.frame(0).clone()]).unwrap();
        let m1 = MaskSeq::new(vec![masks.mask(0).clone()]).unwrap();
        let out = infer(&model, &single, &m1, InferMode::PerFrame).unwrap();
        assert_eq!(out.frames.len(), 1);
        assert!(out.flows.is_empty());

        assert!(infer(&model, clip, &m1, InferMode::PerFrame).unwrap_err().is_contract());
    }
}
