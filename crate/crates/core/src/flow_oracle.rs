//! Classical optical flow and synthetic sequences with analytic flow.
//!
//! The network's flow supervision and the temporal metrics need reference
//! flows. [`PyramidLucasKanade`] estimates them from frame pairs without any
//! pretrained weights; [`synth_sequence`] renders a translating textured
//! square over a static background together with its exact flows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::media::{self, Clip, FlowField, Frame, Mask};
use crate::warp;

/// A pluggable source of backward flow.
pub trait FlowEstimator {
    /// Flow `W` such that warping `frame_b` by `W` approximates `frame_a`.
    fn estimate(&self, frame_a: &Frame, frame_b: &Frame) -> Result<FlowField>;
}

/// Coarse-to-fine dense Lucas-Kanade with iterative warping.
#[derive(Debug, Clone)]
pub struct PyramidLucasKanade {
    pub levels: usize,
    pub iterations: usize,
    /// Standard deviation of the Gaussian aggregation window, in pixels.
    pub window_sigma: f32,
    /// Tikhonov term added to the structure tensor diagonal.
    pub regularization: f32,
    /// Per-iteration cap on the update magnitude, in pixels of the current level.
    pub max_step: f32,
}

impl Default for PyramidLucasKanade {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 10,
            window_sigma: 1.5,
            regularization: 1e-4,
            max_step: 1.0,
        }
    }
}

/// Planar multi-channel image used internally by the estimator.
#[derive(Clone)]
struct Planes {
    h: usize,
    w: usize,
    ch: Vec<Vec<f32>>,
}

impl Planes {
    fn from_frame(f: &Frame) -> Self {
        let ch = (0..3)
            .map(|c| f.data().iter().skip(c).step_by(3).copied().collect())
            .collect();
        Self {
            h: f.height(),
            w: f.width(),
            ch,
        }
    }

    fn half(&self) -> Self {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let ch = self
            .ch
            .iter()
            .map(|p| media::resize_bilinear(p, self.h, self.w, 1, h, w))
            .collect();
        Self { h, w, ch }
    }

    fn sample(&self, c: usize, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = (x.floor() as usize).min(self.w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.h.saturating_sub(2));
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let (ax, ay) = (x - x0 as f32, y - y0 as f32);
        let p = &self.ch[c];
        let top = p[y0 * self.w + x0] * (1.0 - ax) + p[y0 * self.w + x1] * ax;
        let bot = p[y1 * self.w + x0] * (1.0 - ax) + p[y1 * self.w + x1] * ax;
        top * (1.0 - ay) + bot * ay
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with clamped borders.
fn blur(p: &[f32], h: usize, w: usize, k: &[f32]) -> Vec<f32> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * p[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

impl PyramidLucasKanade {
    fn refine(&self, a: &Planes, b: &Planes, flow: &mut [f32]) {
        let (h, w) = (a.h, a.w);
        let kernel = gaussian_kernel(self.window_sigma);
        for _ in 0..self.iterations {
            let mut sxx = vec![0.0; h * w];
            let mut sxy = vec![0.0; h * w];
            let mut syy = vec![0.0; h * w];
            let mut sxt = vec![0.0; h * w];
            let mut syt = vec![0.0; h * w];
            for c in 0..a.ch.len() {
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let (px, py) = (x as f32 + flow[2 * i], y as f32 + flow[2 * i + 1]);
                        let v = b.sample(c, px, py);
                        let ix = 0.5 * (b.sample(c, px + 1.0, py) - b.sample(c, px - 1.0, py));
                        let iy = 0.5 * (b.sample(c, px, py + 1.0) - b.sample(c, px, py - 1.0));
                        let it = v - a.ch[c][i];
                        sxx[i] += ix * ix;
                        sxy[i] += ix * iy;
                        syy[i] += iy * iy;
                        sxt[i] += ix * it;
                        syt[i] += iy * it;
                    }
                }
            }
            let [sxx, sxy, syy, sxt, syt] =
                [sxx, sxy, syy, sxt, syt].map(|p| blur(&p, h, w, &kernel));
            for i in 0..h * w {
                let a11 = sxx[i] + self.regularization;
                let a22 = syy[i] + self.regularization;
                let a12 = sxy[i];
                let det = a11 * a22 - a12 * a12;
                if det <= f32::EPSILON * 1e-3 {
                    continue;
                }
                let mut du = (-a22 * sxt[i] + a12 * syt[i]) / det;
                let mut dv = (a12 * sxt[i] - a11 * syt[i]) / det;
                let norm = (du * du + dv * dv).sqrt();
                if norm > self.max_step {
                    du *= self.max_step / norm;
                    dv *= self.max_step / norm;
                }
                if du.is_finite() && dv.is_finite() {
                    flow[2 * i] += du;
                    flow[2 * i + 1] += dv;
                }
            }
        }
    }
}

impl FlowEstimator for PyramidLucasKanade {
    fn estimate(&self, frame_a: &Frame, frame_b: &Frame) -> Result<FlowField> {
        media::same_dims(frame_a.dims(), frame_b.dims(), "estimate_flow frames")?;
        contract!(self.levels >= 1, "flow pyramid needs at least one level");
        let mut pa = vec![Planes::from_frame(frame_a)];
        let mut pb = vec![Planes::from_frame(frame_b)];
        for _ in 1..self.levels {
            let (na, nb) = (pa.last().unwrap().half(), pb.last().unwrap().half());
            pa.push(na);
            pb.push(nb);
        }
        let mut flow: Option<FlowField> = None;
        for level in (0..self.levels).rev() {
            let (a, b) = (&pa[level], &pb[level]);
            let mut data = match flow.take() {
                None => vec![0.0; a.h * a.w * 2],
                Some(prev) => {
                    let (ph, pw) = prev.dims();
                    let sy = a.h as f32 / ph as f32;
                    let sx = a.w as f32 / pw as f32;
                    media::resize_bilinear(prev.data(), ph, pw, 2, a.h, a.w)
                        .chunks(2)
                        .flat_map(|v| [v[0] * sx, v[1] * sy])
                        .collect()
                }
            };
            self.refine(a, b, &mut data);
            flow = Some(FlowField::new(a.h, a.w, data)?);
        }
        Ok(flow.expect("at least one pyramid level"))
    }
}

/// Backward flow from `frame_a` to `frame_b` using the default estimator.
pub fn estimate_flow(frame_a: &Frame, frame_b: &Frame) -> Result<FlowField> {
    PyramidLucasKanade::default().estimate(frame_a, frame_b)
}

// ---------------------------------------------------------------------------
// Synthetic sequences

/// Parameters of a synthetic translating-square sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Displacement of the square per frame, `(dx, dy)` in pixels.
    pub velocity: (f32, f32),
    /// Side of the moving square; defaults to half the shorter canvas side.
    pub object_size: Option<usize>,
}

impl SynthSpec {
    pub fn new(height: usize, width: usize, frames: usize, velocity: (f32, f32)) -> Self {
        Self {
            height,
            width,
            frames,
            velocity,
            object_size: None,
        }
    }
}

/// Frames plus exact flows and occlusion data for a synthetic sequence.
///
/// Index `t` in every per-pair list refers to the target frame `t` (the
/// first entry is for `t = 1`, zero-based).
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub clip: Clip,
    /// `W_{t⇒t−1}` for `t = 1..T`.
    pub flows: Vec<FlowField>,
    /// `W_{t−1⇒t}` for `t = 1..T`.
    pub flows_fwd: Vec<FlowField>,
    /// `W_{t⇒0}` for `t = 1..T`.
    pub flows_to_first: Vec<FlowField>,
    /// `W_{0⇒t}` for `t = 1..T`.
    pub flows_from_first: Vec<FlowField>,
    /// Per-frame support of the moving square.
    pub object_masks: Vec<Mask>,
    /// Top-left corner of the square per frame.
    pub positions: Vec<(f32, f32)>,
}

impl SynthSequence {
    pub fn occlusion_consecutive(&self) -> Result<Vec<Mask>> {
        self.flows_fwd
            .iter()
            .zip(&self.flows)
            .map(|(f, b)| warp::occlusion_mask(f, b))
            .collect()
    }

    pub fn occlusion_to_first(&self) -> Result<Vec<Mask>> {
        self.flows_from_first
            .iter()
            .zip(&self.flows_to_first)
            .map(|(f, b)| warp::occlusion_mask(f, b))
            .collect()
    }
}

/// Smooth multi-octave value noise, one plane per channel, values in `[0,1]`.
struct Texture {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Texture {
    fn random(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut data = vec![0.0f32; h * w * 3];
        let octaves = [(8usize, 0.5f32), (4, 0.3), (2, 0.2)];
        for (period, amp) in octaves {
            let gh = h / period + 2;
            let gw = w / period + 2;
            let grid: Vec<f32> = (0..gh * gw * 3).map(|_| rng.random::<f32>()).collect();
            for y in 0..h {
                for x in 0..w {
                    let fy = y as f32 / period as f32;
                    let fx = x as f32 / period as f32;
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                    // smoothstep keeps octave seams differentiable
                    let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
                    for c in 0..3 {
                        let g = |yy: usize, xx: usize| grid[(yy * gw + xx) * 3 + c];
                        let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
                        let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
                        data[(y * w + x) * 3 + c] += amp * (top * (1.0 - ty) + bot * ty);
                    }
                }
            }
        }
        Self { h, w, data }
    }

    fn sample(&self, x: f32, y: f32, c: usize) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = (x.floor() as usize).min(self.w - 2);
        let y0 = (y.floor() as usize).min(self.h - 2);
        let (ax, ay) = (x - x0 as f32, y - y0 as f32);
        let g = |yy: usize, xx: usize| self.data[(yy * self.w + xx) * 3 + c];
        let top = g(y0, x0) * (1.0 - ax) + g(y0, x0 + 1) * ax;
        let bot = g(y0 + 1, x0) * (1.0 - ax) + g(y0 + 1, x0 + 1) * ax;
        top * (1.0 - ay) + bot * ay
    }
}

/// Reflects `u` into `[0, range]` (triangle wave).
fn bounce(u: f32, range: f32) -> f32 {
    if range <= 0.0 {
        return 0.0;
    }
    let m = u.rem_euclid(2.0 * range);
    if m <= range {
        m
    } else {
        2.0 * range - m
    }
}

fn start_coordinate(rng: &mut ChaCha8Rng, range: f32, v: f32, frames: usize) -> f32 {
    let travel = v.abs() * frames.saturating_sub(1) as f32;
    if travel <= range {
        // pick a start that never touches a wall
        let slack = range - travel;
        let s = (rng.random::<f32>() * slack).floor();
        if v >= 0.0 {
            s
        } else {
            range - s
        }
    } else {
        (rng.random::<f32>() * range).floor()
    }
}

/// Renders a textured square translating over a static textured background.
pub fn synth_sequence(spec: &SynthSpec, seed: u64) -> Result<SynthSequence> {
    let (h, w, t) = (spec.height, spec.width, spec.frames);
    media::check_dyadic(h, w)?;
    contract!(t >= 1, "synthetic sequence needs at least one frame");
    let (vx, vy) = spec.velocity;
    contract!(
        vx.is_finite() && vy.is_finite(),
        "velocity must be finite"
    );
    contract!(
        vx.abs() <= w as f32 / 2.0 && vy.abs() <= h as f32 / 2.0,
        "velocity ({vx}, {vy}) exceeds half the {h}x{w} canvas per frame"
    );
    let side = spec.object_size.unwrap_or(h.min(w) / 2);
    contract!(
        side >= 2 && side <= h.min(w),
        "object size {side} must fit in the {h}x{w} canvas"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Texture::random(h, w, &mut rng);
    let object = Texture::random(side + 2, side + 2, &mut rng);
    let range_x = (w - side) as f32;
    let range_y = (h - side) as f32;
    let sx = start_coordinate(&mut rng, range_x, vx, t);
    let sy = start_coordinate(&mut rng, range_y, vy, t);
    let positions: Vec<(f32, f32)> = (0..t)
        .map(|k| {
            (
                bounce(sx + k as f32 * vx, range_x),
                bounce(sy + k as f32 * vy, range_y),
            )
        })
        .collect();

    let inside = |pos: (f32, f32), y: usize, x: usize| {
        let u = x as f32 - pos.0;
        let v = y as f32 - pos.1;
        (0.0..side as f32).contains(&u) && (0.0..side as f32).contains(&v)
    };

    let mut frames = Vec::with_capacity(t);
    let mut object_masks = Vec::with_capacity(t);
    for &pos in &positions {
        let mut mask = Mask::empty(h, w);
        let frame = Frame::from_fn(h, w, |y, x, c| {
            if inside(pos, y, x) {
                object.sample(x as f32 - pos.0, y as f32 - pos.1, c)
            } else {
                background.data[(y * w + x) * 3 + c]
            }
        })?;
        for y in 0..h {
            for x in 0..w {
                if inside(pos, y, x) {
                    mask.set(y, x, true);
                }
            }
        }
        frames.push(frame);
        object_masks.push(mask);
    }

    // Flow from frame `to` back to frame `from`: object pixels of `to` move by
    // the position difference, background stays put.
    let pair_flow = |to: usize, from: usize| {
        let (dx, dy) = (
            positions[from].0 - positions[to].0,
            positions[from].1 - positions[to].1,
        );
        FlowField::from_fn(h, w, |y, x| {
            if inside(positions[to], y, x) {
                (dx, dy)
            } else {
                (0.0, 0.0)
            }
        })
    };
    let mut seq = SynthSequence {
        clip: Clip::new(frames)?,
        flows: Vec::new(),
        flows_fwd: Vec::new(),
        flows_to_first: Vec::new(),
        flows_from_first: Vec::new(),
        object_masks,
        positions: positions.clone(),
    };
    for k in 1..t {
        seq.flows.push(pair_flow(k, k - 1)?);
        seq.flows_fwd.push(pair_flow(k - 1, k)?);
        seq.flows_to_first.push(pair_flow(k, 0)?);
        seq.flows_from_first.push(pair_flow(0, k)?);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture_frame(seed: u64, shift: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tex = Texture::random(64, 64 + shift, &mut rng);
        // content moves right by `shift`: out(x) = tex(x - shift + shift) for the
        // translated frame, tex(x + shift) for the reference
        Frame::from_fn(64, 64, |y, x, c| tex.data[(y * tex.w + x) * 3 + c]).unwrap()
    }

    fn shifted(seed: u64, shift: usize) -> (Frame, Frame) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tex = Texture::random(64, 64 + shift, &mut rng);
        let base = Frame::from_fn(64, 64, |y, x, c| tex.data[(y * tex.w + x + shift) * 3 + c]).unwrap();
        let moved = Frame::from_fn(64, 64, |y, x, c| tex.data[(y * tex.w + x) * 3 + c]).unwrap();
        (moved, base)
    }

    #[test]
    fn identical_frames_give_near_zero_flow() {
        let f = texture_frame(3, 0);
        let flow = estimate_flow(&f, &f).unwrap();
        let mean = flow
            .data()
            .chunks(2)
            .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
            .sum::<f32>()
            / (64.0 * 64.0);
        assert!(mean < 0.1, "mean magnitude {mean}");
    }

    #[test]
    fn recovers_two_pixel_translation() {
        // `moved` is `base` translated right by two pixels, so the backward
        // flow from moved to base is -2 in x.
        let (moved, base) = shifted(11, 2);
        let flow = estimate_flow(&moved, &base).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for y in 8..56 {
            for x in 8..56 {
                sum += flow.get(y, x).0;
                n += 1;
            }
        }
        let mean_dx = sum / n as f32;
        assert!((mean_dx + 2.0).abs() <= 0.5, "mean dx {mean_dx}");
    }

    #[test]
    fn constant_frames_stay_finite() {
        let a = Frame::constant(32, 32, 0.3).unwrap();
        let b = Frame::constant(32, 32, 0.7).unwrap();
        let flow = estimate_flow(&a, &b).unwrap();
        assert!(flow.data().iter().all(|v| v.is_finite()));
        assert!(estimate_flow(&a, &Frame::constant(16, 32, 0.1).unwrap()).is_err());
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let seq = synth_sequence(&SynthSpec::new(32, 32, 4, (0.0, 0.0)), 5).unwrap();
        for f in seq.clip.frames() {
            assert_eq!(f, seq.clip.frame(0));
        }
        assert_eq!(seq.flows.len(), 3);
        assert!(seq.flows.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unit_velocity_flow_is_minus_one_on_object() {
        let seq = synth_sequence(&SynthSpec::new(64, 64, 3, (1.0, 0.0)), 9).unwrap();
        for (k, flow) in seq.flows.iter().enumerate() {
            let obj = &seq.object_masks[k + 1];
            for y in 0..64 {
                for x in 0..64 {
                    let want = if obj.get(y, x) == 1 { (-1.0, 0.0) } else { (0.0, 0.0) };
                    assert_eq!(flow.get(y, x), want);
                }
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SynthSpec::new(32, 48, 5, (1.5, -0.5));
        let a = synth_sequence(&spec, 42).unwrap();
        let b = synth_sequence(&spec, 42).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.flows, b.flows);
        let c = synth_sequence(&spec, 43).unwrap();
        assert_ne!(a.clip, c.clip);
    }

    #[test]
    fn rejects_excessive_velocity() {
        let spec = SynthSpec::new(32, 32, 3, (17.0, 0.0));
        assert!(matches!(synth_sequence(&spec, 0), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn analytic_flow_warps_previous_frame_exactly() {
        for (v, seed) in [((2.0, 1.0), 1u64), ((-3.0, 0.0), 2), ((0.0, -1.0), 3)] {
            let seq = synth_sequence(&SynthSpec::new(64, 64, 6, v), seed).unwrap();
            let occ = seq.occlusion_consecutive().unwrap();
            for k in 1..seq.clip.len() {
                let warped = warp::warp_frame(seq.clip.frame(k - 1), &seq.flows[k - 1]).unwrap();
                let target = seq.clip.frame(k);
                for y in 0..64 {
                    for x in 0..64 {
                        if occ[k - 1].get(y, x) == 0 {
                            continue;
                        }
                        for c in 0..3 {
                            assert!((warped.get(y, x, c) - target.get(y, x, c)).abs() <= 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn estimator_endpoint_error_on_synthetic_sequences() {
        for (v, seed) in [((1.0, 0.0), 4u64), ((-2.0, 1.0), 5), ((3.0, 0.0), 6), ((0.0, 2.5), 7)] {
            let seq = synth_sequence(&SynthSpec::new(64, 64, 2, v), seed).unwrap();
            let est = estimate_flow(seq.clip.frame(1), seq.clip.frame(0)).unwrap();
            let gt = &seq.flows[0];
            let mut sum = 0.0;
            let mut n = 0;
            for y in 8..56 {
                for x in 8..56 {
                    let (a, b) = (est.get(y, x), gt.get(y, x));
                    sum += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                    n += 1;
                }
            }
            let epe = sum / n as f32;
            assert!(epe <= 0.5, "velocity {v:?}: mean EPE {epe}");
        }
    }
}
