//! Differentiable backward warping, flow upsampling and forward-backward
//! occlusion checks.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::media::{self, axis_taps, FlowField, Frame, Mask};

/// Relative tolerance of the forward-backward consistency check.
pub const OCCLUSION_ALPHA: f32 = 0.01;
/// Absolute tolerance (squared pixels) of the consistency check.
pub const OCCLUSION_BETA: f32 = 0.5;

/// Binary map with `1` where the flow is trustworthy (non-occluded).
pub type OcclusionMask = Mask;

fn coord_grid(n: usize, h: usize, w: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let xs: Vec<f32> = (0..h * w).map(|i| (i % w) as f32).collect();
    let ys: Vec<f32> = (0..h * w).map(|i| (i / w) as f32).collect();
    let gx = Tensor::from_vec(xs, (1, 1, h, w), device)?.to_dtype(dtype)?;
    let gy = Tensor::from_vec(ys, (1, 1, h, w), device)?.to_dtype(dtype)?;
    Ok((gx.repeat((n, 1, 1, 1))?, gy.repeat((n, 1, 1, 1))?))
}

/// Lower tap index and its integer-valued coordinate for every sample position.
fn lower_taps(s: &Tensor, n_px: usize) -> Result<(Vec<usize>, Tensor)> {
    let vals: Vec<f64> = s.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let max0 = n_px.saturating_sub(2);
    let idx: Vec<usize> = vals
        .iter()
        .map(|&v| (v.floor().max(0.0) as usize).min(max0))
        .collect();
    let coords: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
    let coords = Tensor::from_vec(coords, s.shape(), s.device())?.to_dtype(s.dtype())?;
    Ok((idx, coords))
}

/// Samples `source` (`N×C×H×W`) at `p + flow(p)` with bilinear weights and
/// clamp-to-edge borders. Differentiable with respect to both inputs.
pub fn bilinear_warp(source: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = source.dims4()?;
    let fd = flow.dims4()?;
    if fd != (n, 2, h, w) {
        return Err(Error::DimensionMismatch(format!(
            "flow {fd:?} does not match source {:?}",
            (n, c, h, w)
        )));
    }
    let dtype = source.dtype();
    let device = source.device();
    let flow = flow.to_dtype(dtype)?;
    let (gx, gy) = coord_grid(n, h, w, dtype, device)?;
    let sx = flow.narrow(1, 0, 1)?.add(&gx)?.clamp(0f64, (w - 1) as f64)?;
    let sy = flow.narrow(1, 1, 1)?.add(&gy)?.clamp(0f64, (h - 1) as f64)?;

    let (x0, x0f) = lower_taps(&sx, w)?;
    let (y0, y0f) = lower_taps(&sy, h)?;
    let wx = sx.sub(&x0f)?;
    let wy = sy.sub(&y0f)?;

    let plane = h * w;
    let mut idx = [
        Vec::with_capacity(n * plane),
        Vec::with_capacity(n * plane),
        Vec::with_capacity(n * plane),
        Vec::with_capacity(n * plane),
    ];
    for (&xa, &ya) in x0.iter().zip(&y0) {
        let xb = (xa + 1).min(w - 1);
        let yb = (ya + 1).min(h - 1);
        idx[0].push((ya * w + xa) as u32);
        idx[1].push((ya * w + xb) as u32);
        idx[2].push((yb * w + xa) as u32);
        idx[3].push((yb * w + xb) as u32);
    }
    let src = source.contiguous()?.reshape((n, c, plane))?;
    let mut taps = Vec::with_capacity(4);
    for ids in idx {
        let ids = Tensor::from_vec(ids, (n, 1, plane), device)?
            .broadcast_as((n, c, plane))?
            .contiguous()?;
        taps.push(src.gather(&ids, 2)?.reshape((n, c, h, w))?);
    }
    let one_x = wx.affine(-1.0, 1.0)?;
    let one_y = wy.affine(-1.0, 1.0)?;
    let top = taps[0]
        .broadcast_mul(&one_x)?
        .add(&taps[1].broadcast_mul(&wx)?)?;
    let bottom = taps[2]
        .broadcast_mul(&one_x)?
        .add(&taps[3].broadcast_mul(&wx)?)?;
    Ok(top.broadcast_mul(&one_y)?.add(&bottom.broadcast_mul(&wy)?)?)
}

/// Warps a frame by a backward flow.
pub fn warp_frame(frame: &Frame, flow: &FlowField) -> Result<Frame> {
    media::same_dims(frame.dims(), flow.dims(), "warp frame/flow")?;
    let dev = Device::Cpu;
    let src = media::frames_to_tensor(&[frame], DType::F32, &dev)?;
    let fl = media::flows_to_tensor(&[flow], DType::F32, &dev)?;
    let out = bilinear_warp(&src, &fl)?;
    Ok(media::tensor_to_frames(&out)?.remove(0))
}

fn interp_matrix(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f32; n_out * n_in];
    for (o, (i0, i1, wt)) in axis_taps(n_in, n_out).into_iter().enumerate() {
        m[o * n_in + i0] += 1.0 - wt;
        m[o * n_in + i1] += wt;
    }
    Ok(Tensor::from_vec(m, (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Differentiable bilinear resize of `N×C×H×W` (half-pixel centers, clamped edges).
pub fn resize_bilinear_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let aw = interp_matrix(w, out_w, x.dtype(), x.device())?.t()?;
    let ah = interp_matrix(h, out_h, x.dtype(), x.device())?.t()?;
    let rows = x.contiguous()?.reshape((n * c * h, w))?.matmul(&aw)?;
    let cols = rows
        .reshape((n * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * c * out_w, h))?
        .matmul(&ah)?;
    Ok(cols
        .reshape((n * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c, out_h, out_w))?)
}

/// Doubles spatial size and displacement magnitude of an `N×2×H×W` flow.
pub fn upsample_flow_2x_tensor(flow: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = flow.dims4()?;
    Ok(resize_bilinear_tensor(flow, 2 * h, 2 * w)?.affine(2.0, 0.0)?)
}

/// Bilinear ×2 upsampling of a flow field, with vectors rescaled to the new pixel units.
pub fn upsample_flow_2x(flow: &FlowField) -> FlowField {
    let (h, w) = flow.dims();
    let data = media::resize_bilinear(flow.data(), h, w, 2, 2 * h, 2 * w)
        .into_iter()
        .map(|v| v * 2.0)
        .collect();
    FlowField::new(2 * h, 2 * w, data).expect("upsampled flow keeps finite values")
}

/// Bilinear lookup of a flow vector at a continuous location, clamped to the border.
pub fn sample_flow(flow: &FlowField, x: f32, y: f32) -> (f32, f32) {
    let (h, w) = flow.dims();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (ax, ay) = (x - x0 as f32, y - y0 as f32);
    let lerp = |a: (f32, f32), b: (f32, f32), t: f32| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
    let top = lerp(flow.get(y0, x0), flow.get(y0, x1), ax);
    let bot = lerp(flow.get(y1, x0), flow.get(y1, x1), ax);
    lerp(top, bot, ay)
}

/// Forward-backward consistency with the default tolerances.
pub fn occlusion_mask(flow_fwd: &FlowField, flow_bwd: &FlowField) -> Result<OcclusionMask> {
    occlusion_mask_with(flow_fwd, flow_bwd, OCCLUSION_ALPHA, OCCLUSION_BETA)
}

/// Marks `p` occluded when
/// `|b + f(p+b)|² > alpha·(|b|² + |f(p+b)|²) + beta` with `b = flow_bwd(p)`.
pub fn occlusion_mask_with(
    flow_fwd: &FlowField,
    flow_bwd: &FlowField,
    alpha: f32,
    beta: f32,
) -> Result<OcclusionMask> {
    media::same_dims(flow_fwd.dims(), flow_bwd.dims(), "occlusion flows")?;
    let (h, w) = flow_bwd.dims();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (bx, by) = flow_bwd.get(y, x);
            let (fx, fy) = sample_flow(flow_fwd, x as f32 + bx, y as f32 + by);
            let rx = bx + fx;
            let ry = by + fy;
            let residual = rx * rx + ry * ry;
            let bound = alpha * (bx * bx + by * by + fx * fx + fy * fy) + beta;
            data.push((residual <= bound) as u8);
        }
    }
    Mask::new(h, w, data)
}
