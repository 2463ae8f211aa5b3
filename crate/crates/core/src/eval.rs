//! Evaluation metrics: occlusion-masked flow warping error, video FID and
//! PSNR/SSIM.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::losses;
use crate::media::{Clip, FlowField, Frame, Mask};
use crate::warp::warp_frame;

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 99.0;

/// Mean over `t = 1..T` of the masked per-channel L1 between `Ŷ_t` and
/// `warp(Ŷ_{t−1}, W_{t⇒t−1})`. `valid` marks non-occluded pixels; frames with
/// empty support are left out of the mean (an all-empty clip scores 0).
pub fn warping_error(output: &Clip, flows: &[FlowField], valid: &[Mask]) -> Result<f64> {
    let pairs = output.len() - 1;
    contract!(
        flows.len() == pairs && valid.len() == pairs,
        "warping error: {} flows / {} masks for a {}-frame clip",
        flows.len(),
        valid.len(),
        output.len()
    );
    let (mut sum, mut count) = (0.0f64, 0usize);
    for t in 1..=pairs {
        let warped = warp_frame(output.frame(t - 1), &flows[t - 1])?;
        let m = &valid[t - 1];
        contract!(m.dims() == output.dims(), "warping error: mask size differs from frames");
        let support = m.area();
        if support == 0 {
            continue;
        }
        let cur = output.frame(t).data();
        let acc: f64 = m
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(p, _)| (0..3).map(|c| (cur[p * 3 + c] - warped.data()[p * 3 + c]).abs() as f64).sum::<f64>())
            .sum();
        sum += acc / (3.0 * support as f64);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Maps a clip to a fixed-length descriptor.
pub trait FeatureExtractor {
    fn features(&self, clip: &Clip) -> Result<Vec<f64>>;
}

/// One 3×3×3 convolution layer (time stride 1, spatial stride 2).
#[derive(Debug, Clone)]
struct Conv3d {
    cin: usize,
    cout: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

/// Channel-last activation volume `T×H×W×C`.
struct Volume {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl Conv3d {
    fn forward(&self, x: &Volume) -> Volume {
        let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
        let mut out = vec![0.0f32; x.t * oh * ow * self.cout];
        for t in 0..x.t {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((t * oh + y) * ow + xx) * self.cout;
                    out[o..o + self.cout].copy_from_slice(&self.bias);
                    for dt in 0..3 {
                        let st = t as isize + dt as isize - 1;
                        if st < 0 || st >= x.t as isize {
                            continue;
                        }
                        for dy in 0..3 {
                            let sy = (2 * y) as isize + dy as isize - 1;
                            if sy < 0 || sy >= x.h as isize {
                                continue;
                            }
                            for dx in 0..3 {
                                let sx = (2 * xx) as isize + dx as isize - 1;
                                if sx < 0 || sx >= x.w as isize {
                                    continue;
                                }
                                let i = ((st as usize * x.h + sy as usize) * x.w + sx as usize) * x.c;
                                let tap = (dt * 3 + dy) * 3 + dx;
                                for ci in 0..self.cin {
                                    let v = x.data[i + ci];
                                    let wrow = &self.weights[(tap * self.cin + ci) * self.cout..][..self.cout];
                                    for (acc, &wv) in out[o..o + self.cout].iter_mut().zip(wrow) {
                                        *acc += v * wv;
                                    }
                                }
                            }
                        }
                    }
                    for v in &mut out[o..o + self.cout] {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        Volume {
            t: x.t,
            h: oh,
            w: ow,
            c: self.cout,
            data: out,
        }
    }
}

/// Random-weight 3-D convolutional encoder with global average pooling of
/// every layer. Deterministic for a given seed.
#[derive(Debug, Clone)]
pub struct RandomConv3dExtractor {
    layers: Vec<Conv3d>,
}

impl RandomConv3dExtractor {
    pub const DEFAULT_SEED: u64 = 0x5EED;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3usize, 8, 16, 32];
        let layers = widths
            .windows(2)
            .map(|p| {
                let (cin, cout) = (p[0], p[1]);
                let bound = (6.0 / (27.0 * cin as f32)).sqrt();
                Conv3d {
                    cin,
                    cout,
                    weights: (0..27 * cin * cout).map(|_| rng.random_range(-bound..=bound)).collect(),
                    bias: (0..cout).map(|_| rng.random_range(-0.1..=0.1)).collect(),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn feature_len(&self) -> usize {
        self.layers.iter().map(|l| l.cout).sum()
    }
}

impl Default for RandomConv3dExtractor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for RandomConv3dExtractor {
    fn features(&self, clip: &Clip) -> Result<Vec<f64>> {
        let (h, w) = clip.dims();
        let data = clip.frames().iter().flat_map(|f| f.data().iter().map(|v| v - 0.5)).collect();
        let mut x = Volume {
            t: clip.len(),
            h,
            w,
            c: 3,
            data,
        };
        let mut feats = Vec::with_capacity(self.feature_len());
        for layer in &self.layers {
            x = layer.forward(&x);
            let n = (x.t * x.h * x.w) as f64;
            for c in 0..x.c {
                feats.push(x.data.iter().skip(c).step_by(x.c).map(|&v| v as f64).sum::<f64>() / n);
            }
        }
        Ok(feats)
    }
}

fn mean_cov(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let x = DMatrix::from_fn(set.len(), d, |i, j| set[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n);
    let centered = DMatrix::from_fn(set.len(), d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

/// Eigenvalues below this fraction of the largest are rounding noise.
const EIG_FLOOR: f64 = 1e-12;

/// Symmetric eigendecomposition with negative and noise-level eigenvalues
/// set to 0; returns `(eigenvalues, eigenvectors)`.
fn psd_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let vals = eig.eigenvalues.map(|v| if v > EIG_FLOOR * top { v } else { 0.0 });
    (vals, eig.eigenvectors)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = psd_eigen(m);
    &vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose()
}

/// `Tr((A Σ A)^{1/2})` for `A = root`.
fn trace_sqrt_product(root: &DMatrix<f64>, cov: &DMatrix<f64>) -> f64 {
    psd_eigen(&(root * cov * root)).0.map(f64::sqrt).sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets (unbiased
/// covariance). `Tr((Σa Σb)^{1/2})` is evaluated as `Tr((A Σb A)^{1/2})` with
/// `A = Σa^{1/2}`, so every root is taken of a symmetric matrix.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    contract!(
        a.len() >= 2 && b.len() >= 2,
        "Fréchet distance needs at least two samples per set (got {} and {})",
        a.len(),
        b.len()
    );
    let d = a[0].len();
    contract!(
        d > 0 && a.iter().chain(b).all(|v| v.len() == d),
        "feature vectors must share one positive length"
    );
    let (mu_a, cov_a) = mean_cov(a);
    let (mu_b, cov_b) = mean_cov(b);
    // both orderings share their spectrum; averaging them makes the result
    // exactly symmetric in its arguments
    let cross = 0.5 * (trace_sqrt_product(&sqrtm_psd(&cov_a), &cov_b) + trace_sqrt_product(&sqrtm_psd(&cov_b), &cov_a));
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

/// Standardizes every feature dimension with the mean and deviation of the
/// pooled sets; constant dimensions are only centered.
fn standardize(a: &mut [Vec<f64>], b: &mut [Vec<f64>]) {
    let d = a[0].len();
    let n = (a.len() + b.len()) as f64;
    for j in 0..d {
        let vals = || a.iter().chain(b.iter()).map(|v| v[j]);
        let mean = vals().sum::<f64>() / n;
        let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for v in a.iter_mut().chain(b.iter_mut()) {
            v[j] = (v[j] - mean) / sd;
        }
    }
}

/// Fréchet distance between extractor features of two clip sets, after
/// per-dimension standardization.
pub fn video_fid(outputs: &[Clip], references: &[Clip], extractor: &dyn FeatureExtractor) -> Result<f64> {
    contract!(
        outputs.len() >= 2 && references.len() >= 2,
        "video FID needs at least two clips per set (got {} and {})",
        outputs.len(),
        references.len()
    );
    let mut fo = outputs.iter().map(|c| extractor.features(c)).collect::<Result<Vec<_>>>()?;
    let mut fr = references.iter().map(|c| extractor.features(c)).collect::<Result<Vec<_>>>()?;
    contract!(
        fo.iter().chain(&fr).all(|v| v.len() == fo[0].len()),
        "extractor produced features of varying length"
    );
    standardize(&mut fo, &mut fr);
    frechet_distance(&fo, &fr)
}

/// Mean video FID over random extractors built from `seeds`.
pub fn video_fid_trials(outputs: &[Clip], references: &[Clip], seeds: &[u64]) -> Result<f64> {
    contract!(!seeds.is_empty(), "need at least one extractor seed");
    let mut total = 0.0;
    for &s in seeds {
        total += video_fid(outputs, references, &RandomConv3dExtractor::new(s))?;
    }
    Ok(total / seeds.len() as f64)
}

/// Peak signal-to-noise ratio (peak 1.0), capped at [`PSNR_CAP`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    contract!(a.dims() == b.dims(), "psnr: frame sizes {:?} vs {:?}", a.dims(), b.dims());
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

/// Frame-averaged PSNR and SSIM.
pub fn psnr_ssim(output: &Clip, target: &Clip) -> Result<(f64, f64)> {
    contract!(
        output.len() == target.len() && output.dims() == target.dims(),
        "psnr/ssim: clips differ in length or size"
    );
    let (mut p, mut s) = (0.0, 0.0);
    for (a, b) in output.frames().iter().zip(target.frames()) {
        p += psnr(a, b)?;
        s += losses::ssim(a, b)?;
    }
    let n = output.len() as f64;
    Ok((p / n, s / n))
}

/// One labelled metric value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub video: String,
    pub values: Vec<f64>,
}

/// Rows for each video plus a final `mean` row averaging every column.
pub fn metric_csv(columns: &[&str], rows: &[MetricRow]) -> String {
    let mut out = format!("video,{}\n", columns.join(","));
    for r in rows {
        let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{},{}\n", r.video, vals.join(",")));
    }
    if !rows.is_empty() {
        let means: Vec<String> = (0..columns.len())
            .map(|j| (rows.iter().map(|r| r.values[j]).sum::<f64>() / rows.len() as f64).to_string())
            .collect();
        out.push_str(&format!("mean,{}\n", means.join(",")));
    }
    out
}
