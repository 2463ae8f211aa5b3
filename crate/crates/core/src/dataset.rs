//! Training clips with cached supervision, their on-disk layout and the
//! synthetic dataset generator.
//!
//! ```text
//! <root>/manifest.txt            one clip directory name per line
//! <root>/<clip>/frames/%05d.png
//! <root>/<clip>/flow/%05d_bwd.flo   W_{t⇒t−1}, t ≥ 1
//! <root>/<clip>/flow/%05d_to1.flo   W_{t⇒0},   t ≥ 1
//! <root>/<clip>/occ/%05d_bwd.png    1 (white) = flow valid
//! <root>/<clip>/occ/%05d_to1.png
//! <root>/<clip>/seg/%05d.png        optional object segmentation
//! ```
//!
//! Frame indices are zero-based throughout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::flow_oracle::{synth_sequence, FlowEstimator, SynthSpec};
use crate::media::{self, Clip, FlowField, Mask, MaskSeq};
use crate::warp::occlusion_mask;

pub const MANIFEST: &str = "manifest.txt";

/// One clip with its flow supervision. Per-pair lists have `T − 1` entries;
/// entry `t − 1` belongs to target frame `t`.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub name: String,
    pub frames: Clip,
    pub flows_bwd: Vec<FlowField>,
    pub flows_to_first: Vec<FlowField>,
    pub valid_bwd: Vec<Mask>,
    pub valid_to_first: Vec<Mask>,
    pub segmentation: Option<MaskSeq>,
}

impl ClipData {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let pairs = self.frames.len() - 1;
        let dims = self.frames.dims();
        contract!(
            self.flows_bwd.len() == pairs
                && self.flows_to_first.len() == pairs
                && self.valid_bwd.len() == pairs
                && self.valid_to_first.len() == pairs,
            "clip `{}`: expected {pairs} flows and validity masks per list",
            self.name
        );
        let flow_ok = self.flows_bwd.iter().chain(&self.flows_to_first).all(|f| f.dims() == dims);
        let mask_ok = self.valid_bwd.iter().chain(&self.valid_to_first).all(|m| m.dims() == dims);
        if !flow_ok || !mask_ok {
            return Err(Error::DimensionMismatch(format!(
                "clip `{}`: flow or occlusion size differs from frames {dims:?}",
                self.name
            )));
        }
        if let Some(seg) = &self.segmentation {
            seg.check_pairs(&self.frames)?;
        }
        Ok(())
    }

    /// `W_{cur⇒prev}` and its validity for `prev ∈ {cur − 1, cur}`; equal
    /// indices give the zero flow, valid everywhere.
    pub fn consecutive(&self, cur: usize, prev: usize) -> (FlowField, Mask) {
        let (h, w) = self.frames.dims();
        if cur == prev {
            (FlowField::zeros(h, w), full_mask(h, w))
        } else {
            debug_assert_eq!(prev + 1, cur);
            (self.flows_bwd[cur - 1].clone(), self.valid_bwd[cur - 1].clone())
        }
    }

    /// `W_{t⇒0}` and its validity (identity for `t = 0`).
    pub fn to_first(&self, t: usize) -> (FlowField, Mask) {
        let (h, w) = self.frames.dims();
        if t == 0 {
            (FlowField::zeros(h, w), full_mask(h, w))
        } else {
            (self.flows_to_first[t - 1].clone(), self.valid_to_first[t - 1].clone())
        }
    }
}

fn full_mask(h: usize, w: usize) -> Mask {
    Mask::new(h, w, vec![1; h * w]).expect("binary data")
}

#[derive(Debug, Clone)]
pub struct Dataset {
    clips: Vec<ClipData>,
}

impl Dataset {
    pub fn new(clips: Vec<ClipData>) -> Result<Self> {
        contract!(!clips.is_empty(), "dataset has no clips");
        let dims = clips[0].frames.dims();
        for c in &clips {
            c.validate()?;
            if c.frames.dims() != dims {
                return Err(Error::DimensionMismatch(format!(
                    "clip `{}` is {:?}, dataset is {dims:?}",
                    c.name,
                    c.frames.dims()
                )));
            }
        }
        Ok(Self { clips })
    }

    pub fn clips(&self) -> &[ClipData] {
        &self.clips
    }

    pub fn clip(&self, i: usize) -> &ClipData {
        &self.clips[i]
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.clips[0].frames.dims()
    }

    /// True when every clip carries segmentation masks.
    pub fn has_segmentation(&self) -> bool {
        self.clips.iter().all(|c| c.segmentation.is_some())
    }

    /// Loads a dataset written by [`Dataset::save`] or completed by [`cache_flow`].
    pub fn load(root: &Path) -> Result<Self> {
        let names = read_manifest(root)?;
        let clips = names
            .iter()
            .map(|name| load_clip_data(&root.join(name), name))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips)
    }

    /// Writes the dataset layout; `root` must be absent or empty unless `force`.
    pub fn save(&self, root: &Path, force: bool) -> Result<()> {
        prepare_out_dir(root, force)?;
        let mut manifest = String::new();
        for c in &self.clips {
            let dir = root.join(&c.name);
            media::save_clip(&c.frames, &dir.join("frames"))?;
            write_supervision(&dir, &c.flows_bwd, &c.flows_to_first, &c.valid_bwd, &c.valid_to_first)?;
            if let Some(seg) = &c.segmentation {
                media::save_masks(seg, &dir.join("seg"))?;
            }
            manifest.push_str(&c.name);
            manifest.push('\n');
        }
        let path = root.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }
}

/// Fails if `dir` exists and is non-empty, unless `force` (which clears it).
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            contract!(force, "output directory {} is not empty (use --force)", dir.display());
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    contract!(!names.is_empty(), "manifest {} lists no clips", path.display());
    Ok(names)
}

fn pair_paths(dir: &Path, sub: &str, t: usize, tag: &str, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{t:05}_{tag}.{ext}"))
}

fn write_supervision(
    dir: &Path,
    bwd: &[FlowField],
    to_first: &[FlowField],
    valid_bwd: &[Mask],
    valid_first: &[Mask],
) -> Result<()> {
    for sub in ["flow", "occ"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
    }
    for t in 1..=bwd.len() {
        media::write_flow(&bwd[t - 1], &pair_paths(dir, "flow", t, "bwd", "flo"))?;
        media::write_flow(&to_first[t - 1], &pair_paths(dir, "flow", t, "to1", "flo"))?;
        media::save_mask(&valid_bwd[t - 1], &pair_paths(dir, "occ", t, "bwd", "png"))?;
        media::save_mask(&valid_first[t - 1], &pair_paths(dir, "occ", t, "to1", "png"))?;
    }
    Ok(())
}

fn load_clip_data(dir: &Path, name: &str) -> Result<ClipData> {
    let frames = media::load_clip(&dir.join("frames"))?;
    let n = frames.len();
    let flow = |t: usize, tag: &str| media::read_flow(&pair_paths(dir, "flow", t, tag, "flo"));
    let occ = |t: usize, tag: &str| media::load_mask(&pair_paths(dir, "occ", t, tag, "png"));
    let flows_bwd = (1..n).map(|t| flow(t, "bwd")).collect::<Result<Vec<_>>>()?;
    let flows_to_first = (1..n).map(|t| flow(t, "to1")).collect::<Result<Vec<_>>>()?;
    let valid_bwd = (1..n).map(|t| occ(t, "bwd")).collect::<Result<Vec<_>>>()?;
    let valid_to_first = (1..n).map(|t| occ(t, "to1")).collect::<Result<Vec<_>>>()?;
    let seg_dir = dir.join("seg");
    let segmentation = if seg_dir.is_dir() {
        Some(media::load_masks(&seg_dir)?)
    } else {
        None
    };
    Ok(ClipData {
        name: name.to_string(),
        frames,
        flows_bwd,
        flows_to_first,
        valid_bwd,
        valid_to_first,
        segmentation,
    })
}

/// Estimates and writes flow/occlusion supervision for every clip listed in
/// the manifest, overwriting existing caches. Returns the number of clips.
pub fn cache_flow(root: &Path, estimator: &dyn FlowEstimator) -> Result<usize> {
    let names = read_manifest(root)?;
    for name in &names {
        let dir = root.join(name);
        let frames = media::load_clip(&dir.join("frames"))?;
        let f = frames.frames();
        let (mut bwd, mut first, mut vb, mut vf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for t in 1..f.len() {
            let b = estimator.estimate(&f[t], &f[t - 1])?;
            let fw = estimator.estimate(&f[t - 1], &f[t])?;
            vb.push(occlusion_mask(&fw, &b)?);
            bwd.push(b);
            let b1 = estimator.estimate(&f[t], &f[0])?;
            let f1 = estimator.estimate(&f[0], &f[t])?;
            vf.push(occlusion_mask(&f1, &b1)?);
            first.push(b1);
        }
        write_supervision(&dir, &bwd, &first, &vb, &vf)?;
    }
    Ok(names.len())
}

/// Synthetic clips of a textured square bouncing over a textured background,
/// with analytic flows. Velocities are nonzero integers in `[−3, 3]` per axis.
pub fn synthetic_dataset(n_clips: usize, frames: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    contract!(n_clips >= 1, "need at least one clip");
    contract!(frames >= 1, "clips need at least one frame");
    media::check_dyadic(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips = (0..n_clips)
        .map(|i| {
            let mut v = || {
                let m: i32 = rng.random_range(1..=3);
                (if rng.random::<bool>() { m } else { -m }) as f32
            };
            let velocity = (v(), v());
            let clip_seed = rng.random::<u64>();
            synthetic_clip(&format!("clip_{i:05}"), &SynthSpec::new(height, width, frames, velocity), clip_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clips)
}

/// One synthetic clip with exact supervision; the square's support is the segmentation.
pub fn synthetic_clip(name: &str, spec: &SynthSpec, seed: u64) -> Result<ClipData> {
    let seq = synth_sequence(spec, seed)?;
    let valid_bwd = seq.occlusion_consecutive()?;
    let valid_to_first = seq.occlusion_to_first()?;
    Ok(ClipData {
        name: name.to_string(),
        segmentation: Some(MaskSeq::new(seq.object_masks.clone())?),
        frames: seq.clip,
        flows_bwd: seq.flows,
        flows_to_first: seq.flows_to_first,
        valid_bwd,
        valid_to_first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_oracle::PyramidLucasKanade;

    #[test]
    fn synthetic_counts_and_round_trip() {
        let ds = synthetic_dataset(2, 16, 64, 64, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        ds.save(&root, false).unwrap();
        let clip_dir = root.join("clip_00000");
        let count = |sub: &str, suffix: &str| {
            fs::read_dir(clip_dir.join(sub))
                .unwrap()
                .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
                .count()
        };
        assert_eq!(count("frames", ".png"), 16);
        assert_eq!(count("flow", "_bwd.flo"), 15);
        assert_eq!(count("flow", "_to1.flo"), 15);

        let back = Dataset::load(&root).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ds.clips().iter().zip(back.clips()) {
            assert_eq!(a.flows_bwd, b.flows_bwd);
            assert_eq!(a.valid_to_first, b.valid_to_first);
            assert_eq!(a.segmentation, b.segmentation);
        }
    }

    #[test]
    fn refuses_non_empty_output_without_force() {
        let ds = synthetic_dataset(1, 3, 16, 16, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("junk"), "x").unwrap();
        assert!(ds.save(dir.path(), false).unwrap_err().is_contract());
        ds.save(dir.path(), true).unwrap();
        assert!(!dir.path().join("junk").exists());
    }

    #[test]
    fn synthetic_is_deterministic_and_rejects_bad_size() {
        let a = synthetic_dataset(2, 4, 32, 32, 3).unwrap();
        let b = synthetic_dataset(2, 4, 32, 32, 3).unwrap();
        for (x, y) in a.clips().iter().zip(b.clips()) {
            assert_eq!(x.frames.frames(), y.frames.frames());
        }
        assert!(synthetic_dataset(1, 4, 50, 50, 3).unwrap_err().is_contract());
    }

    #[test]
    fn cache_flow_fills_supervision() {
        let ds = synthetic_dataset(1, 3, 32, 32, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), false).unwrap();
        let clip = dir.path().join("clip_00000");
        fs::remove_dir_all(clip.join("flow")).unwrap();
        fs::remove_dir_all(clip.join("occ")).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
        assert_eq!(cache_flow(dir.path(), &PyramidLucasKanade::default()).unwrap(), 1);
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.clip(0).flows_bwd.len(), 2);
    }

    #[test]
    fn single_frame_lookups_are_identity() {
        let ds = synthetic_dataset(1, 1, 16, 16, 0).unwrap();
        let c = ds.clip(0);
        let (f, m) = c.to_first(0);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.area(), 256);
        let (f, _) = c.consecutive(0, 0);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}
