//! The inpainting network: shared-weight source encoder, reference encoder,
//! coarse-to-fine feature flow, temporal aggregation, learned feature
//! composition, ConvLSTM memory and the decoder with output blending.
//!
//! Feature tensors for the five source streams are stacked stream-major along
//! the batch axis: row `s·B + b` is stream `s` of batch element `b`. Stream
//! order is `[t−6, t−3, t+3, t+6, previous]`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::ops::{leaky_relu, sigmoid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::warp::{bilinear_warp, upsample_flow_2x_tensor};

pub const NUM_SOURCES: usize = 5;
/// Index of the previous-output stream among the sources.
pub const PREV_STREAM: usize = 4;
const LEAKY_SLOPE: f64 = 0.2;
const CHECKPOINT_FORMAT: &str = "vinet-checkpoint/1";
const METADATA_KEY: &str = "vinet";

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature widths at scales 1, 1/2, 1/4, 1/8.
    pub widths: [usize; 4],
    /// Run the reference stream through the source encoder weights.
    pub share_reference_encoder: bool,
    /// Optional per-channel input normalization `(x − mean) / std`.
    pub input_mean: [f32; 3],
    pub input_std: [f32; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256],
            share_reference_encoder: false,
            input_mean: [0.0; 3],
            input_std: [1.0; 3],
        }
    }
}

impl ModelConfig {
    pub fn with_widths(widths: [usize; 4]) -> Self {
        Self {
            widths,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        contract!(
            self.widths.iter().all(|&c| c >= 1),
            "channel widths must be positive"
        );
        contract!(
            self.input_std.iter().all(|&s| s > 0.0),
            "input normalization std must be positive"
        );
        Ok(())
    }
}

/// Which parts of the recurrence are active in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepMode {
    /// Pass the 1/8 composite feature through the ConvLSTM.
    pub use_memory: bool,
    /// Use the previous output as the fifth stream and blend its warp into the output.
    pub feedback: bool,
}

impl StepMode {
    /// No feedback and no memory: the fifth stream is the masked previous input frame.
    pub const STAGE1: StepMode = StepMode {
        use_memory: false,
        feedback: false,
    };
    pub const FULL: StepMode = StepMode {
        use_memory: true,
        feedback: true,
    };
}

// ---------------------------------------------------------------------------
// Parameters

/// 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = crate::conv::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }

    fn act(&self, x: &Tensor) -> Result<Tensor> {
        Ok(leaky_relu(&self.forward(x)?, LEAKY_SLOPE)?)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

/// Deterministic parameter factory that files every tensor under a named group.
struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    groups: Vec<(String, Vec<(String, Var)>)>,
}

impl ParamBuilder {
    fn begin(&mut self, group: &str) {
        self.groups.push((group.to_string(), Vec::new()));
    }

    fn tensor(&mut self, name: &str, shape: &[usize], bound: f64, fill: Option<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = match fill {
            Some(v) => vec![v; n],
            None => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        };
        let t = Tensor::from_vec(vals, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let group = self.groups.last_mut().expect("begin() called before tensor()");
        group.1.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// Uniform He-style init scaled by `gain`.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize, gain: f64) -> Result<Conv> {
        self.conv_bias(name, cin, cout, stride, gain, 0.0)
    }

    fn conv_bias(&mut self, name: &str, cin: usize, cout: usize, stride: usize, gain: f64, bias: f64) -> Result<Conv> {
        let fan_in = (cin * 9) as f64;
        let bound = gain * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let weight = self.tensor(&format!("{name}.weight"), &[cout, cin, 3, 3], bound, None)?;
        let bias = self.tensor(&format!("{name}.bias"), &[cout], 0.0, Some(bias))?;
        Ok(Conv {
            weight,
            bias,
            stride,
            padding: 1,
        })
    }
}

// ---------------------------------------------------------------------------
// Sub-networks

/// Strided pyramid encoder producing features at scales 1, 1/2, 1/4, 1/8.
#[derive(Debug, Clone)]
pub struct Encoder {
    convs: Vec<Conv>,
}

impl Encoder {
    fn new(pb: &mut ParamBuilder, w: [usize; 4]) -> Result<Self> {
        let convs = vec![
            pb.conv("s1", 4, w[0], 1, 1.0)?,
            pb.conv("s2_down", w[0], w[1], 2, 1.0)?,
            pb.conv("s2", w[1], w[1], 1, 1.0)?,
            pb.conv("s4_down", w[1], w[2], 2, 1.0)?,
            pb.conv("s4", w[2], w[2], 1, 1.0)?,
            pb.conv("s8_down", w[2], w[3], 2, 1.0)?,
            pb.conv("s8", w[3], w[3], 1, 1.0)?,
        ];
        Ok(Self { convs })
    }

    /// `x`: `N×4×H×W` (RGB with holes zeroed, then the mask).
    pub fn forward(&self, x: &Tensor) -> Result<[Tensor; 4]> {
        let e1 = self.convs[0].act(x)?;
        let e2 = self.convs[2].act(&self.convs[1].act(&e1)?)?;
        let e4 = self.convs[4].act(&self.convs[3].act(&e2)?)?;
        let e8 = self.convs[6].act(&self.convs[5].act(&e4)?)?;
        Ok([e1, e2, e4, e8])
    }

    pub fn vars(&self) -> Vec<Var> {
        self.convs
            .iter()
            .flat_map(|c| [c.weight.clone(), c.bias.clone()])
            .collect()
    }
}

/// Four plain convolutions regressing a 2-channel flow (or residual).
#[derive(Debug, Clone)]
pub struct FlowNet {
    convs: Vec<Conv>,
}

impl FlowNet {
    fn new(pb: &mut ParamBuilder, cin: usize, c: usize) -> Result<Self> {
        let h = [c.max(2), (c / 2).max(2), (c / 4).max(2)];
        let convs = vec![
            pb.conv("conv1", cin, h[0], 1, 1.0)?,
            pb.conv("conv2", h[0], h[1], 1, 1.0)?,
            pb.conv("conv3", h[1], h[2], 1, 1.0)?,
            // small output init keeps initial flows near zero
            pb.conv("out", h[2], 2, 1, 0.1)?,
        ];
        Ok(Self { convs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs[..3] {
            h = conv.act(&h)?;
        }
        self.convs[3].forward(&h)
    }
}

/// Three convolutions mapping `|F_s' − F_r|` to a single-channel gate in (0,1).
#[derive(Debug, Clone)]
pub struct MaskNet {
    convs: Vec<Conv>,
}

impl MaskNet {
    fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        let (h1, h2) = ((c / 2).max(2), (c / 4).max(2));
        let convs = vec![
            pb.conv("conv1", c, h1, 1, 1.0)?,
            pb.conv("conv2", h1, h2, 1, 1.0)?,
            pb.conv("out", h2, 1, 1, 1.0)?,
        ];
        Ok(Self { convs })
    }

    pub fn forward(&self, diff: &Tensor) -> Result<Tensor> {
        let h = self.convs[1].act(&self.convs[0].act(diff)?)?;
        Ok(sigmoid(&self.convs[2].forward(&h)?)?)
    }
}

/// `(1 − m)·F_r + m·F_s'` with `m` broadcast over channels.
pub fn compose(f_sprime: &Tensor, f_ref: &Tensor, m: &Tensor) -> Result<Tensor> {
    if f_sprime.dims() != f_ref.dims() {
        return Err(Error::DimensionMismatch(format!(
            "composition inputs {:?} vs {:?}",
            f_sprime.dims(),
            f_ref.dims()
        )));
    }
    let keep = m.affine(-1.0, 1.0)?;
    Ok(f_ref.broadcast_mul(&keep)?.add(&f_sprime.broadcast_mul(m)?)?)
}

/// Convolutional LSTM cell.
#[derive(Debug, Clone)]
pub struct ConvLstm {
    gates: Conv,
    channels: usize,
}

impl ConvLstm {
    fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        let gates = pb.conv("gates", 2 * c, 4 * c, 1, 0.5)?;
        Ok(Self { gates, channels: c })
    }

    /// Returns `(hidden, cell)`.
    pub fn forward(&self, x: &Tensor, hidden: &Tensor, cell: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.channels;
        let g = self.gates.forward(&Tensor::cat(&[x, hidden], 1)?)?;
        let input = sigmoid(&g.narrow(1, 0, c)?)?;
        // +1 forget bias
        let forget = sigmoid(&g.narrow(1, c, c)?.affine(1.0, 1.0)?)?;
        let output = sigmoid(&g.narrow(1, 2 * c, c)?)?;
        let candidate = g.narrow(1, 3 * c, c)?.tanh()?;
        let cell = forget.mul(cell)?.add(&input.mul(&candidate)?)?;
        let hidden = output.mul(&cell.tanh()?)?;
        Ok((hidden, cell))
    }
}

/// Nearest-neighbour ×2 upsampling.
fn up2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    up4: Conv,
    fuse4: Conv,
    up2: Conv,
    fuse2: Conv,
    up1: Conv,
    fuse1: Conv,
    out: Conv,
}

impl Decoder {
    fn new(pb: &mut ParamBuilder, w: [usize; 4]) -> Result<Self> {
        Ok(Self {
            up4: pb.conv("up4", w[3], w[2], 1, 1.0)?,
            fuse4: pb.conv("fuse4", 2 * w[2], w[2], 1, 1.0)?,
            up2: pb.conv("up2", w[2], w[1], 1, 1.0)?,
            fuse2: pb.conv("fuse2", 2 * w[1], w[1], 1, 1.0)?,
            up1: pb.conv("up1", w[1], w[0], 1, 1.0)?,
            fuse1: pb.conv("fuse1", w[0], w[0], 1, 1.0)?,
            out: pb.conv("out", w[0], 3, 1, 1.0)?,
        })
    }

    /// Returns the raw RGB output in (0,1) and the finest decoder feature.
    pub fn forward(&self, d8: &Tensor, skip4: &Tensor, skip2: &Tensor) -> Result<(Tensor, Tensor)> {
        let u4 = self.up4.act(&up2(d8)?)?;
        let d4 = self.fuse4.act(&Tensor::cat(&[&u4, skip4], 1)?)?;
        let u2 = self.up2.act(&up2(&d4)?)?;
        let d2 = self.fuse2.act(&Tensor::cat(&[&u2, skip2], 1)?)?;
        let u1 = self.up1.act(&up2(&d2)?)?;
        let d1 = self.fuse1.act(&u1)?;
        let raw = sigmoid(&self.out.forward(&d1)?)?;
        Ok((raw, d1))
    }
}

// ---------------------------------------------------------------------------
// State and step I/O

/// Recurrent state carried between steps.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub lstm_hidden: Tensor,
    pub lstm_cell: Tensor,
    /// Previous inpainted frame `Ŷ_{t−1}`, `B×3×H×W`.
    pub prev_output: Tensor,
}

impl ModelState {
    /// Zero memory with `prev_output` as the initial previous frame.
    pub fn new(prev_output: Tensor, lstm_channels: usize) -> Result<Self> {
        let (b, _, h, w) = prev_output.dims4()?;
        let z = Tensor::zeros((b, lstm_channels, h / 8, w / 8), prev_output.dtype(), prev_output.device())?;
        Ok(Self {
            lstm_hidden: z.clone(),
            lstm_cell: z,
            prev_output,
        })
    }

    /// Cuts the autograd history of every state tensor.
    pub fn detach(&self) -> Self {
        Self {
            lstm_hidden: self.lstm_hidden.detach(),
            lstm_cell: self.lstm_cell.detach(),
            prev_output: self.prev_output.detach(),
        }
    }
}

/// Network inputs for one target frame per batch element.
#[derive(Debug, Clone)]
pub struct StepInput {
    /// `4B×4×H×W`, stream-major `[t−6, t−3, t+3, t+6]`, holes zeroed, mask in channel 3.
    pub neighbors: Tensor,
    /// `B×4×H×W` for the frame being inpainted.
    pub reference: Tensor,
    /// `B×4×H×W` masked `X_{t−1}`; the fifth stream when feedback is off.
    pub prev_input: Tensor,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Final frame `Ŷ_t`.
    pub output: Tensor,
    /// Decoder output `Ŷ'_t` before blending.
    pub raw_output: Tensor,
    /// Full-resolution `Ŵ_{t⇒t−1}` (feedback mode only).
    pub flow: Option<Tensor>,
    /// Composition masks at 1/8, 1/4, 1/2.
    pub comp_masks: [Tensor; 3],
    /// Output blending mask `m_1` (feedback mode only).
    pub blend_mask: Option<Tensor>,
    /// Feature flows of all five streams at 1/8, 1/4, 1/2.
    pub feature_flows: [Tensor; 3],
    pub new_state: ModelState,
}

/// Zeroes hole pixels and appends the mask: `(N×3×H×W, N×1×H×W) → N×4×H×W`.
pub fn pack_input(frames: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let keep = masks.affine(-1.0, 1.0)?;
    Ok(Tensor::cat(&[&frames.broadcast_mul(&keep)?, masks], 1)?)
}

/// Output blending: `(1 − m)·raw + m·warp(prev, flow)`.
pub fn blend_output(raw: &Tensor, prev: &Tensor, flow: &Tensor, m: &Tensor) -> Result<Tensor> {
    compose(&bilinear_warp(prev, flow)?, raw, m)
}

/// Parameter group names in canonical order.
pub const GROUPS: [&str; 15] = [
    "source_encoder",
    "reference_encoder",
    "flow_1_8",
    "flow_1_4",
    "flow_1_2",
    "flow_1",
    "aggregate_1_8",
    "aggregate_1_4",
    "aggregate_1_2",
    "mask_1_8",
    "mask_1_4",
    "mask_1_2",
    "mask_1",
    "convlstm",
    "decoder",
];

/// Metadata stored alongside checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub config: ModelConfig,
    /// Training stage that produced the weights (0 = untrained).
    pub stage: u8,
    pub iterations: usize,
}

// ---------------------------------------------------------------------------
// The network

#[derive(Debug)]
pub struct Vinet {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    source_encoder: Encoder,
    reference_encoder: Option<Encoder>,
    /// Flow sub-networks at 1/8, 1/4, 1/2, 1.
    flow: [FlowNet; 4],
    aggregate: [Conv; 3],
    /// Mask sub-networks at 1/8, 1/4, 1/2, 1.
    masks: [MaskNet; 4],
    lstm: ConvLstm,
    decoder: Decoder,
    groups: Vec<(String, Vec<(String, Var)>)>,
}

impl Vinet {
    /// Builds a network with weights drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let mut pb = ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            groups: Vec::new(),
        };
        pb.begin("source_encoder");
        let source_encoder = Encoder::new(&mut pb, w)?;
        pb.begin("reference_encoder");
        let reference_encoder = if config.share_reference_encoder {
            None
        } else {
            Some(Encoder::new(&mut pb, w)?)
        };
        pb.begin("flow_1_8");
        let f8 = FlowNet::new(&mut pb, 2 * w[3], w[3])?;
        pb.begin("flow_1_4");
        let f4 = FlowNet::new(&mut pb, 2 * w[2] + 2, w[2])?;
        pb.begin("flow_1_2");
        let f2 = FlowNet::new(&mut pb, 2 * w[1] + 2, w[1])?;
        pb.begin("flow_1");
        let f1 = FlowNet::new(&mut pb, 2 * w[0] + 2, w[0])?;
        let mut aggregate = Vec::new();
        for (name, c) in [("aggregate_1_8", w[3]), ("aggregate_1_4", w[2]), ("aggregate_1_2", w[1])] {
            pb.begin(name);
            // a 5×3×3 space-time kernel over stacked streams is a 3×3 kernel over 5c channels
            aggregate.push(pb.conv("conv", NUM_SOURCES * c, c, 1, 1.0)?);
        }
        let mut masks = Vec::new();
        for (name, c) in [("mask_1_8", w[3]), ("mask_1_4", w[2]), ("mask_1_2", w[1]), ("mask_1", w[0])] {
            pb.begin(name);
            masks.push(MaskNet::new(&mut pb, c)?);
        }
        pb.begin("convlstm");
        let lstm = ConvLstm::new(&mut pb, w[3])?;
        pb.begin("decoder");
        let decoder = Decoder::new(&mut pb, w)?;

        Ok(Self {
            config,
            dtype,
            device: device.clone(),
            source_encoder,
            reference_encoder,
            flow: [f8, f4, f2, f1],
            aggregate: aggregate.try_into().expect("three aggregation layers"),
            masks: masks.try_into().expect("four mask networks"),
            lstm,
            decoder,
            groups: pb.groups,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn lstm_channels(&self) -> usize {
        self.config.widths[3]
    }

    pub fn source_encoder(&self) -> &Encoder {
        &self.source_encoder
    }

    pub fn reference_encoder(&self) -> &Encoder {
        self.reference_encoder.as_ref().unwrap_or(&self.source_encoder)
    }

    pub fn flow_net(&self, scale: usize) -> &FlowNet {
        &self.flow[scale]
    }

    pub fn aggregation(&self, scale: usize) -> &Conv {
        &self.aggregate[scale]
    }

    pub fn mask_net(&self, scale: usize) -> &MaskNet {
        &self.masks[scale]
    }

    /// Parameter count per group in canonical order.
    pub fn count_parameters(&self) -> Vec<(String, usize)> {
        self.groups
            .iter()
            .map(|(name, vars)| (name.clone(), vars.iter().map(|(_, v)| v.elem_count()).sum()))
            .collect()
    }

    pub fn total_parameters(&self) -> usize {
        self.count_parameters().iter().map(|(_, n)| n).sum()
    }

    /// Named variables of one group.
    pub fn group_vars(&self, group: &str) -> Vec<(String, Var)> {
        self.groups
            .iter()
            .find(|(g, _)| g == group)
            .map(|(_, v)| v.clone())
            .unwrap_or_default()
    }

    /// Variables of every group for which `keep(name)` holds.
    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.groups
            .iter()
            .filter(|(g, _)| keep(g))
            .flat_map(|(_, v)| v.iter().map(|(_, var)| var.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars_where(|_| true)
    }

    /// Groups optimized in each training stage; stage 1 leaves the memory
    /// and the full-resolution feedback path untouched.
    pub fn stage_vars(&self, stage: u8) -> Vec<Var> {
        self.vars_where(|g| stage >= 2 || !matches!(g, "convlstm" | "flow_1" | "mask_1"))
    }

    fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        if cfg.input_mean == [0.0; 3] && cfg.input_std == [1.0; 3] {
            return Ok(x.clone());
        }
        let mut m = cfg.input_mean.map(|v| v as f64).to_vec();
        let mut s = cfg.input_std.map(|v| v as f64).to_vec();
        // the mask channel passes through
        m.push(0.0);
        s.push(1.0);
        let mean = Tensor::from_vec(m, (1, 4, 1, 1), &self.device)?.to_dtype(self.dtype)?;
        let std = Tensor::from_vec(s, (1, 4, 1, 1), &self.device)?.to_dtype(self.dtype)?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Encodes packed `N×4×H×W` inputs with the source or reference tower.
    pub fn encode(&self, packed: &Tensor, reference: bool) -> Result<[Tensor; 4]> {
        let (_, c, h, w) = packed.dims4()?;
        contract!(c == 4, "encoder input needs 4 channels (RGB + mask), got {c}");
        crate::media::check_dyadic(h, w)?;
        let x = self.normalize(packed)?;
        if reference {
            self.reference_encoder().forward(&x)
        } else {
            self.source_encoder.forward(&x)
        }
    }

    /// Coarse-to-fine flows from source to reference features at 1/8, 1/4, 1/2.
    ///
    /// Each finer flow is `upsample_flow_2x(coarser) + residual`, where the
    /// residual comes from the scale's flow network applied to
    /// `[warped source, reference, upsampled flow]`.
    pub fn feature_flows(&self, src: &[Tensor; 4], reference: &[Tensor; 4]) -> Result<[Tensor; 3]> {
        let f8 = self.flow[0].forward(&Tensor::cat(&[&src[3], &reference[3]], 1)?)?;
        let f4 = self.refine_flow(1, &f8, &src[2], &reference[2])?;
        let f2 = self.refine_flow(2, &f4, &src[1], &reference[1])?;
        Ok([f8, f4, f2])
    }

    /// One residual refinement step; `scale` indexes `flow` (1 → 1/4, 2 → 1/2, 3 → 1).
    pub fn refine_flow(&self, scale: usize, coarse: &Tensor, src: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let up = upsample_flow_2x_tensor(coarse)?;
        let warped = bilinear_warp(src, &up)?;
        let residual = self.flow[scale].forward(&Tensor::cat(&[&warped, reference, &up], 1)?)?;
        Ok(up.add(&residual)?)
    }

    /// Collapses five stream-major warped maps into `F_s'` with the scale's
    /// space-time kernel.
    pub fn aggregate(&self, scale: usize, warped: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = warped.dims4()?;
        contract!(
            n % NUM_SOURCES == 0 && n > 0,
            "aggregation needs {NUM_SOURCES} streams per batch element, got {n} maps"
        );
        let b = n / NUM_SOURCES;
        let stacked = warped
            .reshape((NUM_SOURCES, b, c, h, w))?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((b, NUM_SOURCES * c, h, w))?;
        self.aggregate[scale].forward(&stacked)
    }

    /// Initial recurrent state: `prev_output` is usually the first frame with holes zeroed.
    pub fn init_state(&self, prev_output: &Tensor) -> Result<ModelState> {
        ModelState::new(prev_output.to_dtype(self.dtype)?, self.lstm_channels())
    }

    /// One recurrent inpainting step for a batch of target frames.
    pub fn step(&self, input: &StepInput, state: &ModelState, mode: StepMode) -> Result<StepOutput> {
        let (b, c, h, w) = input.reference.dims4()?;
        contract!(c == 4, "reference input needs 4 channels");
        let nd = input.neighbors.dims4()?;
        if nd != (4 * b, 4, h, w) || input.prev_input.dims4()? != (b, 4, h, w) {
            return Err(Error::DimensionMismatch(format!(
                "neighbors {nd:?} / previous input {:?} inconsistent with reference {:?}",
                input.prev_input.dims(),
                (b, c, h, w)
            )));
        }
        let c8 = self.lstm_channels();
        if state.prev_output.dims4()? != (b, 3, h, w)
            || state.lstm_hidden.dims4()? != (b, c8, h / 8, w / 8)
            || state.lstm_cell.dims4()? != (b, c8, h / 8, w / 8)
        {
            return Err(Error::Contract(format!(
                "state dims (prev {:?}, lstm {:?}) inconsistent with {b}x{h}x{w} inputs",
                state.prev_output.dims(),
                state.lstm_hidden.dims()
            )));
        }

        let fifth = if mode.feedback {
            let zeros = Tensor::zeros((b, 1, h, w), self.dtype, &self.device)?;
            Tensor::cat(&[&state.prev_output, &zeros], 1)?
        } else {
            input.prev_input.clone()
        };
        let sources = Tensor::cat(&[&input.neighbors, &fifth], 0)?;
        let src = self.encode(&sources, false)?;
        let reference = self.encode(&input.reference, true)?;
        let ref_rep: Vec<Tensor> = reference
            .iter()
            .map(|r| r.repeat((NUM_SOURCES, 1, 1, 1)))
            .collect::<candle_core::Result<_>>()?;
        let ref_rep: [Tensor; 4] = ref_rep.try_into().expect("four scales");

        let flows = self.feature_flows(&src, &ref_rep)?;
        let mut composite = Vec::with_capacity(3);
        let mut comp_masks = Vec::with_capacity(3);
        // scale index k: 0 → 1/8, 1 → 1/4, 2 → 1/2; encoder index is 3 − k
        for (k, flow) in flows.iter().enumerate() {
            let warped = bilinear_warp(&src[3 - k], flow)?;
            let f_sprime = self.aggregate(k, &warped)?;
            let f_ref = &reference[3 - k];
            let m = self.masks[k].forward(&f_sprime.sub(f_ref)?.abs()?)?;
            composite.push(compose(&f_sprime, f_ref, &m)?);
            comp_masks.push(m);
        }

        let (dec_in, new_hidden, new_cell) = if mode.use_memory {
            let (hdn, cell) = self.lstm.forward(&composite[0], &state.lstm_hidden, &state.lstm_cell)?;
            (hdn.clone(), hdn, cell)
        } else {
            (composite[0].clone(), state.lstm_hidden.clone(), state.lstm_cell.clone())
        };
        let (raw, d1) = self.decoder.forward(&dec_in, &composite[1], &composite[2])?;

        let (output, flow, blend_mask) = if mode.feedback {
            let prev_rows = PREV_STREAM * b;
            let coarse = flows[2].narrow(0, prev_rows, b)?;
            let prev_feat = src[0].narrow(0, prev_rows, b)?;
            let full = self.refine_flow(3, &coarse, &prev_feat, &reference[0])?;
            let warped_feat = bilinear_warp(&prev_feat, &full)?;
            let m1 = self.masks[3].forward(&d1.sub(&warped_feat)?.abs()?)?;
            let out = blend_output(&raw, &state.prev_output, &full, &m1)?;
            (out, Some(full), Some(m1))
        } else {
            (raw.clone(), None, None)
        };

        let new_state = ModelState {
            lstm_hidden: new_hidden,
            lstm_cell: new_cell,
            prev_output: output.clone(),
        };
        Ok(StepOutput {
            output,
            raw_output: raw,
            flow,
            comp_masks: comp_masks.try_into().expect("three composition masks"),
            blend_mask,
            feature_flows: flows,
            new_state,
        })
    }

    // -----------------------------------------------------------------------
    // Checkpoints

    /// Writes all parameters as `group.layer.param` tensors plus metadata.
    pub fn save(&self, path: &Path, stage: u8, iterations: usize) -> Result<()> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            stage,
            iterations,
        };
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for (group, vars) in &self.groups {
            for (name, var) in vars {
                // stored as f32 regardless of the working precision
                tensors.insert(format!("{group}.{name}"), var.as_tensor().to_dtype(DType::F32)?);
            }
        }
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .iter()
            .map(|(k, t)| {
                let vals: Vec<f32> = t.flatten_all()?.to_vec1()?;
                let bytes = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
                Ok((k.clone(), t.dims().to_vec(), bytes))
            })
            .collect::<Result<_>>()?;
        let views = buffers
            .iter()
            .map(|(k, shape, bytes)| {
                let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                    .map_err(|e| Error::Contract(e.to_string()))?;
                Ok((k.clone(), view))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut metadata = std::collections::HashMap::new();
        metadata.insert(
            METADATA_KEY.to_string(),
            serde_json::to_string(&meta).expect("metadata serializes"),
        );
        let bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads checkpoint metadata without loading weights.
    pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_meta(path, &bytes)
    }

    fn parse_meta(path: &Path, bytes: &[u8]) -> Result<CheckpointMeta> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| bad("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported checkpoint format `{}`", meta.format)));
        }
        Ok(meta)
    }

    /// Builds a network from a checkpoint using the stored architecture.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, CheckpointMeta)> {
        let meta = Self::read_meta(path)?;
        let model = Self::new(meta.config.clone(), 0, dtype, device)?;
        let meta = model.load_weights(path)?;
        Ok((model, meta))
    }

    /// Overwrites the weights in place; fails if the stored architecture differs.
    pub fn load_weights(&self, path: &Path) -> Result<CheckpointMeta> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta = Self::parse_meta(path, &bytes)?;
        contract!(
            meta.config == self.config,
            "checkpoint architecture {:?} differs from model {:?}",
            meta.config,
            self.config
        );
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        for (group, vars) in &self.groups {
            for (name, var) in vars {
                let key = format!("{group}.{name}");
                let view = st.tensor(&key).map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("missing tensor {key}"),
                })?;
                if view.shape() != var.dims() || view.dtype() != safetensors::Dtype::F32 {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        msg: format!("tensor {key} has unexpected shape or dtype"),
                    });
                }
                let vals: Vec<f32> = view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                let t = Tensor::from_vec(vals, var.dims(), &self.device)?.to_dtype(self.dtype)?;
                var.set(&t)?;
            }
        }
        Ok(meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vinet {
        Vinet::new(ModelConfig::with_widths([4, 4, 8, 8]), 1, DType::F32, &Device::Cpu).unwrap()
    }

    fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn inputs(b: usize, h: usize, w: usize, seed: u64) -> StepInput {
        let mask = |n: usize, s: u64| rand_tensor((n, 1, h, w), s).ge(0.8).unwrap().to_dtype(DType::F32).unwrap();
        let pack = |n: usize, s: u64| pack_input(&rand_tensor((n, 3, h, w), s), &mask(n, s + 100)).unwrap();
        StepInput {
            neighbors: pack(4 * b, seed),
            reference: pack(b, seed + 1),
            prev_input: pack(b, seed + 2),
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.sub(b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn encoder_shapes_default_widths() {
        let m = Vinet::new(ModelConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
        let x = pack_input(&rand_tensor((1, 3, 64, 64), 3), &Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let f = m.encode(&x, false).unwrap();
        let dims: Vec<_> = f.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![1, 32, 64, 64], vec![1, 64, 32, 32], vec![1, 128, 16, 16], vec![1, 256, 8, 8]]
        );
    }

    #[test]
    fn encoder_zero_input_is_finite_and_rejects_bad_dims() {
        let m = small();
        let z = Tensor::zeros((2, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        for f in m.encode(&z, true).unwrap() {
            let v: Vec<f32> = f.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let bad = Tensor::zeros((1, 4, 20, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(m.encode(&bad, false).is_err());
    }

    #[test]
    fn source_streams_share_weights() {
        let m = small();
        let a = inputs(1, 16, 16, 4).neighbors;
        let batched = m.encode(&a, false).unwrap();
        for s in 0..4 {
            let single = m.encode(&a.narrow(0, s, 1).unwrap(), false).unwrap();
            for k in 0..4 {
                assert!(max_abs_diff(&single[k], &batched[k].narrow(0, s, 1).unwrap()) < 1e-6);
            }
        }
        // gradients of a source-stream output reach only the source tower
        let loss = batched[3].sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(m.source_encoder().vars().iter().all(|v| grads.get(v).is_some()));
        assert!(m.group_vars("reference_encoder").iter().all(|(_, v)| grads.get(v).is_none()));
    }

    #[test]
    fn feature_flow_shapes_and_residual_identity() {
        let m = small();
        let x = inputs(1, 16, 16, 7);
        let src = m.encode(&x.neighbors.narrow(0, 0, 1).unwrap(), false).unwrap();
        let rf = m.encode(&x.reference, true).unwrap();
        let flows = m.feature_flows(&src, &rf).unwrap();
        let dims: Vec<_> = flows.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 2, 2, 2], vec![1, 2, 4, 4], vec![1, 2, 8, 8]]);

        let up = upsample_flow_2x_tensor(&flows[0]).unwrap();
        let warped = bilinear_warp(&src[2], &up).unwrap();
        let raw = m.flow_net(1).forward(&Tensor::cat(&[&warped, &rf[2], &up], 1).unwrap()).unwrap();
        assert!(max_abs_diff(&flows[1].sub(&up).unwrap(), &raw) < 1e-6);

        let big = inputs(1, 32, 32, 8);
        let src = m.encode(&big.neighbors.narrow(0, 0, 1).unwrap(), false).unwrap();
        let rf = m.encode(&big.reference, true).unwrap();
        let flows = m.feature_flows(&src, &rf).unwrap();
        assert_eq!(flows[2].dims(), &[1, 2, 16, 16]);
    }

    #[test]
    fn aggregation_shapes_bias_and_order_sensitivity() {
        let m = Vinet::new(ModelConfig::default(), 2, DType::F32, &Device::Cpu).unwrap();
        let x = rand_tensor((5, 256, 8, 8), 9);
        let y = m.aggregate(0, &x).unwrap();
        assert_eq!(y.dims(), &[1, 256, 8, 8]);

        let z = m.aggregate(0, &Tensor::zeros((5, 256, 8, 8), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let bias = m.aggregation(0).bias().as_tensor().reshape((1, 256, 1, 1)).unwrap().broadcast_as((1, 256, 8, 8)).unwrap();
        assert!(max_abs_diff(&z, &bias) < 1e-7);

        let idx = Tensor::new(&[4u32, 3, 2, 1, 0], &Device::Cpu).unwrap();
        let permuted = m.aggregate(0, &x.index_select(&idx, 0).unwrap()).unwrap();
        assert!(max_abs_diff(&y, &permuted) > 1e-4);

        assert!(m.aggregate(0, &rand_tensor((4, 256, 8, 8), 1)).is_err());
    }

    #[test]
    fn composition_limits() {
        let a = rand_tensor((1, 3, 4, 4), 1);
        let b = rand_tensor((1, 3, 4, 4), 2);
        let zeros = Tensor::zeros((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let ones = zeros.ones_like().unwrap();
        assert_eq!(max_abs_diff(&compose(&a, &b, &zeros).unwrap(), &b), 0.0);
        assert_eq!(max_abs_diff(&compose(&a, &b, &ones).unwrap(), &a), 0.0);
        let m = rand_tensor((1, 1, 4, 4), 3);
        assert!(max_abs_diff(&compose(&b, &b, &m).unwrap(), &b) < 1e-6);
        assert!(compose(&a, &rand_tensor((1, 2, 4, 4), 0), &m).is_err());
    }

    #[test]
    fn blend_identities() {
        let raw = rand_tensor((1, 3, 16, 16), 1);
        let prev = rand_tensor((1, 3, 16, 16), 2);
        let flow = Tensor::zeros((1, 2, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(max_abs_diff(&blend_output(&raw, &prev, &flow, &ones).unwrap(), &prev), 0.0);
        let zeros = ones.zeros_like().unwrap();
        let moved = rand_tensor((1, 2, 16, 16), 3);
        assert_eq!(max_abs_diff(&blend_output(&raw, &prev, &moved, &zeros).unwrap(), &raw), 0.0);
    }

    #[test]
    fn step_shapes_masks_and_memory() {
        let m = small();
        let x = inputs(2, 32, 32, 11);
        let state = m.init_state(&rand_tensor((2, 3, 32, 32), 5)).unwrap();
        let out = m.step(&x, &state, StepMode::FULL).unwrap();
        assert_eq!(out.output.dims(), &[2, 3, 32, 32]);
        assert_eq!(out.flow.as_ref().unwrap().dims(), &[2, 2, 32, 32]);
        let sizes: Vec<usize> = out.comp_masks.iter().map(|t| t.dim(2).unwrap()).collect();
        assert_eq!(sizes, vec![4, 8, 16]);
        assert_eq!(out.blend_mask.as_ref().unwrap().dims(), &[2, 1, 32, 32]);
        for mk in out.comp_masks.iter().chain(out.blend_mask.iter()) {
            let v: Vec<f32> = mk.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let out2 = m.step(&x, &out.new_state, StepMode::FULL).unwrap();
        let delta = max_abs_diff(&out.new_state.lstm_hidden, &out2.new_state.lstm_hidden);
        assert!(delta > 0.0);
        let d0 = max_abs_diff(&state.lstm_hidden, &out.new_state.lstm_hidden);
        assert!(d0 > 0.0);
    }

    #[test]
    fn stage1_step_is_pure_and_deterministic() {
        let m = small();
        let x = inputs(1, 16, 16, 21);
        let s1 = m.init_state(&rand_tensor((1, 3, 16, 16), 1)).unwrap();
        let s2 = m.init_state(&rand_tensor((1, 3, 16, 16), 2)).unwrap();
        let a = m.step(&x, &s1, StepMode::STAGE1).unwrap();
        let b = m.step(&x, &s2, StepMode::STAGE1).unwrap();
        assert_eq!(max_abs_diff(&a.output, &b.output), 0.0);
        assert!(a.flow.is_none());
        let c = m.step(&x, &s1, StepMode::STAGE1).unwrap();
        let va: Vec<f32> = a.output.flatten_all().unwrap().to_vec1().unwrap();
        let vc: Vec<f32> = c.output.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vc);
    }

    #[test]
    fn step_rejects_inconsistent_state() {
        let m = small();
        let x = inputs(1, 16, 16, 2);
        let state = m.init_state(&rand_tensor((1, 3, 32, 32), 1)).unwrap();
        assert!(matches!(m.step(&x, &state, StepMode::FULL), Err(Error::Contract(_))));
    }

    #[test]
    fn parameter_groups_partition_all_vars() {
        let m = Vinet::new(ModelConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
        let counts = m.count_parameters();
        let names: Vec<&str> = counts.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, GROUPS.to_vec());
        let total: usize = m.all_vars().iter().map(|v| v.elem_count()).sum();
        assert_eq!(counts.iter().map(|(_, n)| n).sum::<usize>(), total);

        let smaller = Vinet::new(ModelConfig::with_widths([16, 32, 64, 128]), 0, DType::F32, &Device::Cpu).unwrap();
        assert!(smaller.total_parameters() < m.total_parameters());
    }

    #[test]
    fn default_parameter_counts_are_pinned() {
        let m = Vinet::new(ModelConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
        let counts: Vec<usize> = m.count_parameters().into_iter().map(|(_, n)| n).collect();
        assert_eq!(
            counts,
            vec![
                1163296, 1163296, 1549890, 390178, 98322, 24970, 2949376, 737408, 184384, 369409, 92545, 23233,
                5857, 4719616, 766243
            ]
        );
        assert_eq!(m.total_parameters(), 14238023);
        let shared = ModelConfig {
            share_reference_encoder: true,
            ..ModelConfig::default()
        };
        let s = Vinet::new(shared, 0, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.total_parameters() - s.total_parameters(), 1163296);
    }

    #[test]
    fn checkpoint_round_trip_and_config_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        let a = small();
        a.save(&p, 1, 7).unwrap();
        let (b, meta) = Vinet::load(&p, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(meta.stage, 1);
        assert_eq!(meta.iterations, 7);
        for (va, vb) in a.all_vars().iter().zip(b.all_vars()) {
            assert_eq!(max_abs_diff(va.as_tensor(), vb.as_tensor()), 0.0);
        }
        let other = Vinet::new(ModelConfig::with_widths([4, 4, 8, 16]), 0, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(other.load_weights(&p), Err(Error::Contract(_))));

        let q = dir.path().join("n.safetensors");
        b.save(&q, 1, 7).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }
}
