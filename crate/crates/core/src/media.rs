//! Frame, mask and flow value types plus their on-disk formats.
//!
//! Frames are interleaved `H×W×3` arrays in `[0,1]`, masks are `H×W` binary
//! arrays with `1` marking a hole, and flows are interleaved `H×W×2` backward
//! displacements in pixels. Tensor conversions use the `N×C×H×W` layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::error::{contract, Error, Result};

/// Checks that `h`, `w` can host the four dyadic scales {1, 1/2, 1/4, 1/8}.
pub fn check_dyadic(h: usize, w: usize) -> Result<()> {
    contract!(
        h >= 16 && w >= 16 && h % 8 == 0 && w % 8 == 0,
        "frame size {h}x{w} must be at least 16x16 and divisible by 8"
    );
    Ok(())
}

/// An RGB frame with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dyadic(height, width)?;
        if data.len() != height * width * 3 {
            return Err(Error::DimensionMismatch(format!(
                "frame {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        contract!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "frame values must be finite and within [0,1]"
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a frame by evaluating `f(y, x, channel)`; values are clamped to `[0,1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Copy of the frame with hole pixels set to zero.
    pub fn masked(&self, mask: &Mask) -> Result<Frame> {
        same_dims(self.dims(), mask.dims(), "frame/mask")?;
        let mut data = self.data.clone();
        for (px, &m) in data.chunks_mut(3).zip(mask.data()) {
            if m != 0 {
                px.fill(0.0);
            }
        }
        Ok(Frame { data, ..*self })
    }
}

/// Binary hole mask, `1` = hole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        contract!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    /// Number of hole pixels.
    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn coverage(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }
}

/// Ordered frames sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    frames: Vec<Frame>,
}

impl Clip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        contract!(!frames.is_empty(), "a clip needs at least one frame");
        let dims = frames[0].dims();
        for (i, f) in frames.iter().enumerate() {
            if f.dims() != dims {
                return Err(Error::DimensionMismatch(format!(
                    "frame {i} is {}x{}, expected {}x{}",
                    f.height(),
                    f.width(),
                    dims.0,
                    dims.1
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

/// Per-frame masks aligned with a [`Clip`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSeq {
    masks: Vec<Mask>,
}

impl MaskSeq {
    pub fn new(masks: Vec<Mask>) -> Result<Self> {
        contract!(!masks.is_empty(), "a mask sequence needs at least one mask");
        let dims = masks[0].dims();
        contract!(
            masks.iter().all(|m| m.dims() == dims),
            "all masks in a sequence must share one size"
        );
        Ok(Self { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn mask(&self, i: usize) -> &Mask {
        &self.masks[i]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks[0].dims()
    }

    /// Fails unless the sequence pairs element-wise with `clip`.
    pub fn check_pairs(&self, clip: &Clip) -> Result<()> {
        contract!(
            self.len() == clip.len(),
            "clip has {} frames but {} masks were given",
            clip.len(),
            self.len()
        );
        same_dims(clip.dims(), self.dims(), "clip/masks")
    }
}

/// Backward flow: the value at target pixel `p` points at source location `p + flow(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        contract!(height > 0 && width > 0, "flow field must be non-empty");
        if data.len() != height * width * 2 {
            return Err(Error::DimensionMismatch(format!(
                "flow {height}x{width}x2 needs {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        contract!(
            data.iter().all(|v| v.is_finite()),
            "flow values must be finite"
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let data = (0..height * width).flat_map(|_| [dx, dy]).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (f32, f32),
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `(dx, dy)` at pixel `(y, x)`.
    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }
}

pub(crate) fn same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize of an interleaved `h×w×c` array with half-pixel centers and
/// edge clamping.
pub fn resize_bilinear(
    data: &[f32],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for ch in 0..c {
                let v00 = data[(y0 * w + x0) * c + ch];
                let v01 = data[(y0 * w + x1) * c + ch];
                let v10 = data[(y1 * w + x0) * c + ch];
                let v11 = data[(y1 * w + x1) * c + ch];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out.push(top + (bot - top) * wy);
            }
        }
    }
    out
}

/// For each output index: the two source taps and the weight of the second.
pub(crate) fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resampling to `out_h×out_w`.
pub fn resize_frame(frame: &Frame, out_h: usize, out_w: usize) -> Result<Frame> {
    check_dyadic(out_h, out_w)?;
    let data = resize_bilinear(
        frame.data(),
        frame.height(),
        frame.width(),
        3,
        out_h,
        out_w,
    );
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Frame::new(out_h, out_w, data)
}

pub fn resize_clip(clip: &Clip, out_h: usize, out_w: usize) -> Result<Clip> {
    if clip.dims() == (out_h, out_w) {
        return Ok(clip.clone());
    }
    let frames = clip
        .frames()
        .iter()
        .map(|f| resize_frame(f, out_h, out_w))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames)
}

// ---------------------------------------------------------------------------
// PNG I/O

fn png_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Decode {
            path: dir.to_path_buf(),
            msg: "no frames found".into(),
        });
    }
    Ok(paths)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Frame::new(h, w, data)
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = frame.data().iter().map(|&v| quantize(v)).collect();
    let img = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, bytes)
        .expect("buffer length matches frame dims");
    img.save(path).map_err(|e| image_err(path, e))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    }
}

/// Loads every PNG in `dir`, ordered lexicographically.
pub fn load_clip(dir: &Path) -> Result<Clip> {
    let frames = png_paths(dir)?
        .iter()
        .map(|p| load_frame(p))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames)
}

/// Writes frames as `%05d.png`, creating `dir` if needed.
pub fn save_clip(clip: &Clip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames().iter().enumerate() {
        save_frame(f, &dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

/// Grayscale mask, thresholded at 128 (`>= 128` is a hole).
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
    Mask::new(h, w, data)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer length matches mask dims");
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_masks(dir: &Path) -> Result<MaskSeq> {
    let masks = png_paths(dir)?
        .iter()
        .map(|p| load_mask(p))
        .collect::<Result<Vec<_>>>()?;
    MaskSeq::new(masks)
}

pub fn save_masks(masks: &MaskSeq, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.masks().iter().enumerate() {
        save_mask(m, &dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Flow files: "PIEH", i32 width, i32 height, then (dx, dy) f32 pairs, little endian.

const FLOW_MAGIC: &[u8; 4] = b"PIEH";

pub fn write_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + flow.data().len() * 4);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for v in flow.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 12 {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != FLOW_MAGIC {
        return Err(bad("bad magic, expected PIEH"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(bad("non-positive dimensions"));
    }
    let (w, h) = (width as usize, height as usize);
    let body = &bytes[12..];
    if body.len() != w * h * 8 {
        return Err(bad(&format!(
            "expected {} bytes of flow data, found {}",
            w * h * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FlowField::new(h, w, data).map_err(|e| bad(&e.to_string()))
}

// ---------------------------------------------------------------------------
// Tensor conversion

/// Stacks frames into an `N×3×H×W` tensor.
pub fn frames_to_tensor(frames: &[&Frame], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = frames[0].dims();
    let mut data: Vec<f32> = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        same_dims(f.dims(), (h, w), "batched frames")?;
        for c in 0..3 {
            data.extend(f.data().iter().skip(c).step_by(3));
        }
    }
    Ok(Tensor::from_vec(data, (frames.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks masks into an `N×1×H×W` tensor of 0/1 values.
pub fn masks_to_tensor(masks: &[&Mask], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = masks[0].dims();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        same_dims(m.dims(), (h, w), "batched masks")?;
        data.extend(m.data().iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks flows into an `N×2×H×W` tensor (channel 0 = dx).
pub fn flows_to_tensor(flows: &[&FlowField], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = flows[0].dims();
    let mut data: Vec<f32> = Vec::with_capacity(flows.len() * 2 * h * w);
    for f in flows {
        same_dims(f.dims(), (h, w), "batched flows")?;
        for c in 0..2 {
            data.extend(f.data().iter().skip(c).step_by(2));
        }
    }
    Ok(Tensor::from_vec(data, (flows.len(), 2, h, w), device)?.to_dtype(dtype)?)
}

fn planar_to_interleaved(t: &Tensor, channels: usize) -> Result<Vec<Vec<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    if c != channels {
        return Err(Error::DimensionMismatch(format!(
            "expected {channels} channels, tensor has {c}"
        )));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            let base = b * c * plane;
            let mut out = Vec::with_capacity(c * plane);
            for p in 0..plane {
                for ch in 0..c {
                    out.push(flat[base + ch * plane + p]);
                }
            }
            out
        })
        .collect())
}

/// Splits an `N×3×H×W` tensor into frames, clamping to `[0,1]`.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let (_, _, h, w) = t.dims4()?;
    planar_to_interleaved(t, 3)?
        .into_iter()
        .map(|d| {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite pixel in model output".into()));
            }
            Frame::new(h, w, d.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        })
        .collect()
}

pub fn tensor_to_flows(t: &Tensor) -> Result<Vec<FlowField>> {
    let (_, _, h, w) = t.dims4()?;
    planar_to_interleaved(t, 2)?
        .into_iter()
        .map(|d| FlowField::new(h, w, d))
        .collect()
}

/// Binarizes an `N×1×H×W` tensor at 0.5.
pub fn tensor_to_masks(t: &Tensor) -> Result<Vec<Mask>> {
    let (_, _, h, w) = t.dims4()?;
    planar_to_interleaved(t, 1)?
        .into_iter()
        .map(|d| Mask::new(h, w, d.into_iter().map(|v| (v >= 0.5) as u8).collect()))
        .collect()
}
