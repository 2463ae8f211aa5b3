//! Training objectives: reconstruction (L1 + SSIM), flow supervision,
//! short/long-term warping consistency and their weighted total.
//!
//! The tensor functions are differentiable and operate on `N×C×H×W` batches;
//! the `Frame`/`FlowField` wrappers evaluate the same math on value types.

use candle_core::{DType, Device, Tensor};

use crate::error::{contract, Error, Result};
use crate::media::{flows_to_tensor, frames_to_tensor, masks_to_tensor, Clip, FlowField, Frame, Mask};
use crate::warp::bilinear_warp;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Normalized 11×11 Gaussian kernel, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    contract!(
        a.dims() == b.dims(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.dims(),
        b.dims()
    );
    Ok(())
}

/// Per-window SSIM map over valid (unpadded) windows, `N·C × 1 × H−10 × W−10`.
pub fn ssim_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "ssim")?;
    let (n, c, h, w) = a.dims4()?;
    contract!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
    );
    let k = Tensor::from_vec(gaussian_window(), (1, 1, SSIM_WINDOW, SSIM_WINDOW), a.device())?
        .to_dtype(a.dtype())?;
    let blur = |x: &Tensor| -> Result<Tensor> { Ok(crate::conv::conv2d(&x.reshape((n * c, 1, h, w))?, &k, 1, 0)?) };
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let var_a = blur(&a.sqr()?)?.sub(&mu_a.sqr()?)?;
    let var_b = blur(&b.sqr()?)?.sub(&mu_b.sqr()?)?;
    let cov = blur(&a.mul(b)?)?.sub(&mu_a.mul(&mu_b)?)?;
    let num = mu_a
        .mul(&mu_b)?
        .affine(2.0, SSIM_C1)?
        .mul(&cov.affine(2.0, SSIM_C2)?)?;
    let den = mu_a
        .sqr()?
        .add(&mu_b.sqr()?)?
        .affine(1.0, SSIM_C1)?
        .mul(&var_a.add(&var_b)?.affine(1.0, SSIM_C2)?)?;
    Ok(num.div(&den)?)
}

/// Mean SSIM over windows and channels (scalar tensor).
pub fn ssim_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(ssim_map(a, b)?.mean_all()?)
}

/// `(mean |pred − target|, 1 − SSIM)` as scalar tensors.
///
/// With `hole_weight > 0` the L1 term weighs hole pixels by `1 + hole_weight`;
/// `holes` is `N×1×H×W` and ignored when the weight is zero.
pub fn recon_loss_tensor(
    pred: &Tensor,
    target: &Tensor,
    holes: Option<&Tensor>,
    hole_weight: f64,
) -> Result<(Tensor, Tensor)> {
    check_same(pred, target, "reconstruction loss")?;
    let diff = pred.sub(target)?.abs()?;
    let l1 = match holes {
        Some(m) if hole_weight > 0.0 => diff.broadcast_mul(&m.affine(hole_weight, 1.0)?)?.mean_all()?,
        _ => diff.mean_all()?,
    };
    let ssim_term = ssim_tensor(pred, target)?.affine(-1.0, 1.0)?;
    Ok((l1, ssim_term))
}

/// Endpoint error (per-pixel `|Δx| + |Δy|`, averaged) and the photometric
/// error of warping `gt_prev` into `gt_cur` with the predicted flow.
pub fn flow_loss_tensor(
    pred_flow: &Tensor,
    gt_flow: &Tensor,
    gt_cur: &Tensor,
    gt_prev: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_same(pred_flow, gt_flow, "flow loss")?;
    check_same(gt_cur, gt_prev, "flow loss frames")?;
    let epe = pred_flow.sub(gt_flow)?.abs()?.sum_keepdim(1)?.mean_all()?;
    let warped = bilinear_warp(gt_prev, pred_flow)?;
    let warp_err = gt_cur.sub(&warped)?.abs()?.mean_all()?;
    Ok((epe, warp_err))
}

/// Mean of `|pred − warp(reference, flow)|` over pixels with `valid = 1` and
/// all channels; zero when nothing is valid.
pub fn masked_warp_loss_tensor(pred: &Tensor, reference: &Tensor, flow: &Tensor, valid: &Tensor) -> Result<Tensor> {
    check_same(pred, reference, "warping loss")?;
    let c = pred.dim(1)? as f64;
    let warped = bilinear_warp(reference, flow)?;
    let num = pred.sub(&warped)?.abs()?.broadcast_mul(valid)?.sum_all()?;
    let support = valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    // an empty support leaves the numerator at exactly zero
    Ok(num.affine(1.0 / (c * support).max(1.0), 0.0)?)
}

/// Relative weights of the reconstruction, flow and warping terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub flow: f64,
    pub warp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            flow: 10.0,
            warp: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.recon >= 0.0 && self.flow >= 0.0 && self.warp >= 0.0,
            "loss weights must be non-negative, got ({}, {}, {})",
            self.recon,
            self.flow,
            self.warp
        );
        Ok(())
    }
}

/// Temporal terms, absent in stage-1 training.
#[derive(Debug, Clone)]
pub struct TemporalTerms {
    pub flow_epe: Tensor,
    pub flow_warp: Tensor,
    pub warp_short: Tensor,
    pub warp_long: Tensor,
}

/// Differentiable loss components of one optimization step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub recon_l1: Tensor,
    pub recon_ssim: Tensor,
    pub temporal: Option<TemporalTerms>,
}

impl LossTerms {
    /// Weighted scalar to minimize.
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        w.validate()?;
        let mut total = self.recon_l1.add(&self.recon_ssim)?.affine(w.recon, 0.0)?;
        if let Some(t) = &self.temporal {
            total = total.add(&t.flow_epe.add(&t.flow_warp)?.affine(w.flow, 0.0)?)?;
            total = total.add(&t.warp_short.add(&t.warp_long)?.affine(w.warp, 0.0)?)?;
        }
        Ok(total)
    }

    pub fn report(&self, w: &LossWeights) -> Result<LossReport> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let temporal = match &self.temporal {
            Some(t) => Some([v(&t.flow_epe)?, v(&t.flow_warp)?, v(&t.warp_short)?, v(&t.warp_long)?]),
            None => None,
        };
        total_loss(v(&self.recon_l1)?, v(&self.recon_ssim)?, temporal, w)
    }
}

/// Per-step scalar loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub recon_l1: f64,
    pub recon_ssim: f64,
    pub flow_epe: f64,
    pub flow_warp: f64,
    pub warp_short: f64,
    pub warp_long: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,total,recon_l1,recon_ssim,flow_epe,flow_warp,warp_short,warp_long";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.total, self.recon_l1, self.recon_ssim, self.flow_epe, self.flow_warp, self.warp_short, self.warp_long
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.recon_l1,
            self.recon_ssim,
            self.flow_epe,
            self.flow_warp,
            self.warp_short,
            self.warp_long,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Weighted total from scalar components; `temporal` is
/// `[flow_epe, flow_warp, warp_short, warp_long]`, `None` in stage 1.
pub fn total_loss(recon_l1: f64, recon_ssim: f64, temporal: Option<[f64; 4]>, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let [flow_epe, flow_warp, warp_short, warp_long] = temporal.unwrap_or([0.0; 4]);
    Ok(LossReport {
        total: w.recon * (recon_l1 + recon_ssim) + w.flow * (flow_epe + flow_warp) + w.warp * (warp_short + warp_long),
        recon_l1,
        recon_ssim,
        flow_epe,
        flow_warp,
        warp_short,
        warp_long,
    })
}

// ---------------------------------------------------------------------------
// Value-type wrappers

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn frame_tensor(f: &Frame) -> Result<Tensor> {
    frames_to_tensor(&[f], DType::F64, &Device::Cpu)
}

/// Mean SSIM of two frames.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!("ssim: frame sizes {:?} vs {:?}", a.dims(), b.dims())));
    }
    scalar(&ssim_tensor(&frame_tensor(a)?, &frame_tensor(b)?)?)
}

/// `(l1, 1 − SSIM)` of two frames.
pub fn recon_loss(pred: &Frame, target: &Frame) -> Result<(f64, f64)> {
    if pred.dims() != target.dims() {
        return Err(Error::Contract(format!(
            "reconstruction loss: frame sizes {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let (l1, s) = recon_loss_tensor(&frame_tensor(pred)?, &frame_tensor(target)?, None, 0.0)?;
    Ok((scalar(&l1)?, scalar(&s)?))
}

/// Flow loss over `t = 2..T`: flow lists hold `T − 1` backward flows `W_{t⇒t−1}`.
pub fn flow_loss(pred_flows: &[FlowField], gt_flows: &[FlowField], gt_frames: &Clip) -> Result<(f64, f64)> {
    let pairs = gt_frames.len() - 1;
    contract!(
        pred_flows.len() == pairs && gt_flows.len() == pairs,
        "flow loss: {} predicted / {} ground-truth flows for a {}-frame clip",
        pred_flows.len(),
        gt_flows.len(),
        gt_frames.len()
    );
    if pairs == 0 {
        return Ok((0.0, 0.0));
    }
    let dev = Device::Cpu;
    let p = flows_to_tensor(&pred_flows.iter().collect::<Vec<_>>(), DType::F64, &dev)?;
    let g = flows_to_tensor(&gt_flows.iter().collect::<Vec<_>>(), DType::F64, &dev)?;
    let frames: Vec<&Frame> = gt_frames.frames().iter().collect();
    let cur = frames_to_tensor(&frames[1..], DType::F64, &dev)?;
    let prev = frames_to_tensor(&frames[..pairs], DType::F64, &dev)?;
    let (mut epe, mut warp) = (0.0, 0.0);
    for t in 0..pairs {
        let sel = |x: &Tensor| x.narrow(0, t, 1);
        let (e, w) = flow_loss_tensor(&sel(&p)?, &sel(&g)?, &sel(&cur)?, &sel(&prev)?)?;
        epe += scalar(&e)?;
        warp += scalar(&w)?;
    }
    Ok((epe / pairs as f64, warp / pairs as f64))
}

/// Short- and long-term warping losses over `t = 2..T`, each averaged over the
/// `T − 1` terms. Flow and occlusion lists hold `T − 1` entries; the
/// occlusion masks are `1` where the flow is valid.
pub fn warping_loss(
    preds: &Clip,
    gt_frames: &Clip,
    flows_consec: &[FlowField],
    flows_to_first: &[FlowField],
    occl_consec: &[Mask],
    occl_to_first: &[Mask],
) -> Result<(f64, f64)> {
    contract!(
        preds.len() == gt_frames.len() && preds.dims() == gt_frames.dims(),
        "warping loss: prediction and target clips differ in length or size"
    );
    let pairs = gt_frames.len() - 1;
    contract!(
        [flows_consec.len(), flows_to_first.len(), occl_consec.len(), occl_to_first.len()]
            .iter()
            .all(|&n| n == pairs),
        "warping loss: expected {pairs} flows and occlusion masks per list"
    );
    if pairs == 0 {
        return Ok((0.0, 0.0));
    }
    let dev = Device::Cpu;
    let (mut short, mut long) = (0.0, 0.0);
    let first = frame_tensor(gt_frames.frame(0))?;
    for t in 1..=pairs {
        let pred = frame_tensor(preds.frame(t))?;
        let prev = frame_tensor(gt_frames.frame(t - 1))?;
        let fc = flows_to_tensor(&[&flows_consec[t - 1]], DType::F64, &dev)?;
        let ff = flows_to_tensor(&[&flows_to_first[t - 1]], DType::F64, &dev)?;
        let mc = masks_to_tensor(&[&occl_consec[t - 1]], DType::F64, &dev)?;
        let mf = masks_to_tensor(&[&occl_to_first[t - 1]], DType::F64, &dev)?;
        short += scalar(&masked_warp_loss_tensor(&pred, &prev, &fc, &mc)?)?;
        long += scalar(&masked_warp_loss_tensor(&pred, &first, &ff, &mf)?)?;
    }
    Ok((short / pairs as f64, long / pairs as f64))
}
