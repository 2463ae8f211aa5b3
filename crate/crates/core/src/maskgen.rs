//! Seeded generators for the four training hole types.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::media::{self, Mask, MaskSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    RandomSquare,
    FlyingSquare,
    Arbitrary,
    Object,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::RandomSquare,
        MaskKind::FlyingSquare,
        MaskKind::Arbitrary,
        MaskKind::Object,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::RandomSquare => "random_square",
            MaskKind::FlyingSquare => "flying_square",
            MaskKind::Arbitrary => "arbitrary",
            MaskKind::Object => "object",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Contract(format!("unknown mask kind `{s}`")))
    }
}

/// Brush statistics for free-form stroke masks.
#[derive(Debug, Clone, PartialEq)]
pub struct BrushParams {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_width: f32,
    /// Upper stroke width; `None` means `H/8`.
    pub max_width: Option<f32>,
    pub min_vertices: usize,
    pub max_vertices: usize,
    /// Per-frame perturbation bounds.
    pub max_translation: f32,
    pub max_rotation_deg: f32,
    pub scale_range: (f32, f32),
    pub max_shear: f32,
}

impl Default for BrushParams {
    fn default() -> Self {
        Self {
            min_strokes: 1,
            max_strokes: 5,
            min_width: 3.0,
            max_width: None,
            min_vertices: 4,
            max_vertices: 12,
            max_translation: 5.0,
            max_rotation_deg: 5.0,
            scale_range: (0.95, 1.05),
            max_shear: 0.05,
        }
    }
}

/// Full parameter set for one generated mask sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Square side as a fraction of `min(H, W)`.
    pub min_side_frac: f64,
    pub max_side_frac: f64,
    /// Flying-square step range in pixels.
    pub min_step: usize,
    pub max_step: usize,
    pub brush: BrushParams,
    pub dilation_radius: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, seed: u64) -> Self {
        Self {
            kind,
            min_side_frac: 0.25,
            max_side_frac: 0.5,
            min_step: 2,
            max_step: 8,
            brush: BrushParams::default(),
            dilation_radius: 5,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        contract!(
            self.min_side_frac > 0.0
                && self.min_side_frac <= self.max_side_frac
                && self.max_side_frac <= 0.5,
            "side fractions must satisfy 0 < min <= max <= 0.5 (got {}, {})",
            self.min_side_frac,
            self.max_side_frac
        );
        contract!(
            self.min_step >= 1 && self.min_step <= self.max_step,
            "flying-square step range must satisfy 1 <= min <= max"
        );
        Ok(())
    }

    /// Generates `t` masks of size `h×w`. Object masks need segmentation data
    /// and are produced by [`object_mask`] or [`dilate_seq`] instead.
    pub fn generate(&self, t: usize, h: usize, w: usize) -> Result<MaskSeq> {
        self.validate()?;
        contract!(t >= 1, "mask sequences need at least one frame");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.kind {
            MaskKind::RandomSquare => random_square_impl(self, t, h, w, &mut rng),
            MaskKind::FlyingSquare => {
                let side = draw_side(self, h, w, &mut rng);
                let max_step = self.max_step.min(side).max(self.min_step);
                let step = rng.random_range(self.min_step..=max_step);
                let direction = Direction::ALL[rng.random_range(0..4)];
                let start = (
                    rng.random_range(0..=w - side),
                    rng.random_range(0..=h - side),
                );
                flying_square_path(
                    t,
                    h,
                    w,
                    &FlyingSquare {
                        start,
                        side,
                        step,
                        direction,
                    },
                )
            }
            MaskKind::Arbitrary => arbitrary_impl(t, h, w, &self.brush, &mut rng),
            MaskKind::Object => Err(Error::Contract(
                "object masks are derived from segmentation masks, not generated".into(),
            )),
        }
    }
}

fn draw_side(spec: &MaskSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> usize {
    let base = h.min(w) as f64;
    let lo = (spec.min_side_frac * base).round().max(1.0) as usize;
    let hi = (spec.max_side_frac * base).round().max(lo as f64) as usize;
    rng.random_range(lo..=hi)
}

fn fill_square(mask: &mut Mask, x0: usize, y0: usize, side: usize) {
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            mask.set(y, x, true);
        }
    }
}

fn random_square_impl(
    spec: &MaskSpec,
    t: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSeq> {
    let masks = (0..t)
        .map(|_| {
            let side = draw_side(spec, h, w, rng);
            let x0 = rng.random_range(0..=w - side);
            let y0 = rng.random_range(0..=h - side);
            let mut m = Mask::empty(h, w);
            fill_square(&mut m, x0, y0, side);
            m
        })
        .collect();
    MaskSeq::new(masks)
}

/// One independently placed square per frame, side in `[0.25, 0.5]·min(H,W)`.
pub fn random_square(t: usize, h: usize, w: usize, seed: u64) -> Result<MaskSeq> {
    MaskSpec::new(MaskKind::RandomSquare, seed).generate(t, h, w)
}

/// A square moving by a constant step in one direction.
pub fn flying_square(t: usize, h: usize, w: usize, seed: u64) -> Result<MaskSeq> {
    MaskSpec::new(MaskKind::FlyingSquare, seed).generate(t, h, w)
}

/// Free-form strokes with a small random affine drift per frame.
pub fn arbitrary_mask(t: usize, h: usize, w: usize, seed: u64, brush: &BrushParams) -> Result<MaskSeq> {
    let mut spec = MaskSpec::new(MaskKind::Arbitrary, seed);
    spec.brush = brush.clone();
    spec.generate(t, h, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    fn delta(self) -> (isize, isize) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

/// Explicit flying-square trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FlyingSquare {
    /// Top-left corner `(x, y)` in frame 0.
    pub start: (usize, usize),
    pub side: usize,
    pub step: usize,
    pub direction: Direction,
}

/// Frame `k` holds the square at `start + k·step·direction`, clamped to the canvas.
pub fn flying_square_path(t: usize, h: usize, w: usize, sq: &FlyingSquare) -> Result<MaskSeq> {
    contract!(sq.step >= 1, "flying-square step must be positive");
    contract!(
        sq.side >= 1 && sq.side <= h.min(w),
        "square side {} does not fit {h}x{w}",
        sq.side
    );
    contract!(
        sq.start.0 + sq.side <= w && sq.start.1 + sq.side <= h,
        "square start {:?} leaves the canvas",
        sq.start
    );
    let (dx, dy) = sq.direction.delta();
    let masks = (0..t)
        .map(|k| {
            let off = (k * sq.step) as isize;
            let x = (sq.start.0 as isize + dx * off).clamp(0, (w - sq.side) as isize) as usize;
            let y = (sq.start.1 as isize + dy * off).clamp(0, (h - sq.side) as isize) as usize;
            let mut m = Mask::empty(h, w);
            fill_square(&mut m, x, y, sq.side);
            m
        })
        .collect();
    MaskSeq::new(masks)
}

/// A polyline brush stroke in pixel coordinates `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stroke {
    pub points: Vec<(f32, f32)>,
    pub width: f32,
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * abx, a.1 + t * aby);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Marks every pixel whose center lies within `width/2` of a stroke.
pub fn rasterize_strokes(h: usize, w: usize, strokes: &[Stroke]) -> Mask {
    let mut mask = Mask::empty(h, w);
    for s in strokes {
        let r = s.width / 2.0;
        for seg in s.points.windows(2).map(|p| (p[0], p[1])).chain(
            (s.points.len() == 1).then(|| (s.points[0], s.points[0])),
        ) {
            let (a, b) = seg;
            let x_lo = (a.0.min(b.0) - r).floor().max(0.0) as usize;
            let x_hi = ((a.0.max(b.0) + r).ceil() as usize).min(w.saturating_sub(1));
            let y_lo = (a.1.min(b.1) - r).floor().max(0.0) as usize;
            let y_hi = ((a.1.max(b.1) + r).ceil() as usize).min(h.saturating_sub(1));
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    if segment_distance((x as f32, y as f32), a, b) <= r {
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }
    mask
}

/// Row-major 2×3 affine map acting on `(x, y)`.
#[derive(Debug, Clone, Copy)]
struct Affine([f32; 6]);

impl Affine {
    const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    fn then(self, next: Affine) -> Affine {
        let [a, b, c, d, e, f] = self.0;
        let [p, q, r, s, t, u] = next.0;
        Affine([
            p * a + q * d,
            p * b + q * e,
            p * c + q * f + r,
            s * a + t * d,
            s * b + t * e,
            s * c + t * f + u,
        ])
    }

    fn inverse(self) -> Affine {
        let [a, b, c, d, e, f] = self.0;
        let det = a * e - b * d;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Affine([ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)])
    }

    fn apply(self, x: f32, y: f32) -> (f32, f32) {
        let [a, b, c, d, e, f] = self.0;
        (a * x + b * y + c, d * x + e * y + f)
    }
}

fn random_perturbation(brush: &BrushParams, cx: f32, cy: f32, rng: &mut ChaCha8Rng) -> Affine {
    let angle = rng.random_range(-brush.max_rotation_deg..=brush.max_rotation_deg).to_radians();
    let scale = rng.random_range(brush.scale_range.0..=brush.scale_range.1);
    let shear = rng.random_range(-brush.max_shear..=brush.max_shear);
    let dir = rng.random_range(0.0..std::f32::consts::TAU);
    let mag = rng.random_range(0.0..=brush.max_translation);
    let (sin, cos) = angle.sin_cos();
    // about the canvas center: translate to origin, shear, rotate+scale, translate back
    let to_origin = Affine([1.0, 0.0, -cx, 0.0, 1.0, -cy]);
    let shear_m = Affine([1.0, shear, 0.0, 0.0, 1.0, 0.0]);
    let rot = Affine([scale * cos, -scale * sin, 0.0, scale * sin, scale * cos, 0.0]);
    let back = Affine([1.0, 0.0, cx + mag * dir.cos(), 0.0, 1.0, cy + mag * dir.sin()]);
    to_origin.then(shear_m).then(rot).then(back)
}

fn transform_mask(base: &Mask, m: Affine) -> Mask {
    let (h, w) = base.dims();
    let inv = m.inverse();
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f32, y as f32);
            let (ix, iy) = (sx.round(), sy.round());
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h && base.get(iy as usize, ix as usize) == 1 {
                out.set(y, x, true);
            }
        }
    }
    out
}

fn random_strokes(h: usize, w: usize, brush: &BrushParams, rng: &mut ChaCha8Rng) -> Result<Vec<Stroke>> {
    contract!(
        brush.min_strokes >= 1 && brush.min_strokes <= brush.max_strokes,
        "stroke count range must satisfy 1 <= min <= max"
    );
    contract!(
        brush.min_vertices >= 2 && brush.min_vertices <= brush.max_vertices,
        "vertex count range must satisfy 2 <= min <= max"
    );
    let max_width = brush.max_width.unwrap_or(h as f32 / 8.0).max(brush.min_width);
    let max_len = (h.min(w) as f32 / 4.0).max(4.0);
    let n = rng.random_range(brush.min_strokes..=brush.max_strokes);
    (0..n)
        .map(|_| {
            let width = rng.random_range(brush.min_width..=max_width);
            let nv = rng.random_range(brush.min_vertices..=brush.max_vertices);
            let mut p = (
                rng.random_range(0.0..w as f32),
                rng.random_range(0.0..h as f32),
            );
            let mut points = vec![p];
            for _ in 1..nv {
                let angle = rng.random_range(0.0..std::f32::consts::TAU);
                let len = rng.random_range(2.0..=max_len);
                p = (
                    (p.0 + len * angle.cos()).clamp(0.0, (w - 1) as f32),
                    (p.1 + len * angle.sin()).clamp(0.0, (h - 1) as f32),
                );
                points.push(p);
            }
            Ok(Stroke { points, width })
        })
        .collect()
}

fn arbitrary_impl(t: usize, h: usize, w: usize, brush: &BrushParams, rng: &mut ChaCha8Rng) -> Result<MaskSeq> {
    let strokes = random_strokes(h, w, brush, rng)?;
    let base = rasterize_strokes(h, w, &strokes);
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let drift_cap = h.min(w) as f32 / 4.0;
    let mut acc = Affine::IDENTITY;
    let mut masks = vec![base.clone()];
    for _ in 1..t {
        acc = acc.then(random_perturbation(brush, cx, cy, rng));
        // keep the accumulated translation bounded so strokes stay on canvas
        let (ox, oy) = acc.apply(cx, cy);
        let (dx, dy) = (ox - cx, oy - cy);
        let (kx, ky) = (dx.clamp(-drift_cap, drift_cap) - dx, dy.clamp(-drift_cap, drift_cap) - dy);
        acc.0[2] += kx;
        acc.0[5] += ky;
        masks.push(transform_mask(&base, acc));
    }
    MaskSeq::new(masks)
}

/// Morphological dilation by a Euclidean disk of `radius` pixels.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
    }
    out
}

pub fn dilate_seq(seq: &MaskSeq, radius: usize) -> Result<MaskSeq> {
    MaskSeq::new(seq.masks().iter().map(|m| dilate(m, radius)).collect())
}

/// Loads segmentation masks and dilates each by `radius`; `expected_len`
/// checks the frame count against the clip they belong to.
pub fn object_mask(segmentation_dir: &Path, radius: usize, expected_len: Option<usize>) -> Result<MaskSeq> {
    let seg = media::load_masks(segmentation_dir)?;
    if let Some(n) = expected_len {
        contract!(
            seg.len() == n,
            "{} segmentation masks for a clip of {n} frames",
            seg.len()
        );
    }
    dilate_seq(&seg, radius)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_half_side_covers_a_quarter() {
        let mut spec = MaskSpec::new(MaskKind::RandomSquare, 3);
        spec.min_side_frac = 0.5;
        let seq = spec.generate(4, 64, 64).unwrap();
        for m in seq.masks() {
            assert_eq!(m.area(), 1024);
            assert!((m.coverage() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn flying_square_explicit_path() {
        let sq = FlyingSquare {
            start: (8, 8),
            side: 16,
            step: 3,
            direction: Direction::Right,
        };
        let seq = flying_square_path(3, 64, 64, &sq).unwrap();
        for (k, m) in seq.masks().iter().enumerate() {
            let left = (0..64).find(|&x| m.get(8, x) == 1).unwrap();
            assert_eq!(left, 8 + 3 * k);
            assert_eq!(m.area(), 256);
        }
        let zero = FlyingSquare { step: 0, ..sq };
        assert!(matches!(flying_square_path(3, 64, 64, &zero), Err(Error::Contract(_))));
    }

    #[test]
    fn flying_square_clamps_at_border() {
        let sq = FlyingSquare {
            start: (40, 0),
            side: 16,
            step: 5,
            direction: Direction::Right,
        };
        let seq = flying_square_path(4, 64, 64, &sq).unwrap();
        let lefts: Vec<usize> = seq
            .masks()
            .iter()
            .map(|m| (0..64).find(|&x| m.get(0, x) == 1).unwrap())
            .collect();
        assert_eq!(lefts, vec![40, 45, 48, 48]);
    }

    #[test]
    fn horizontal_stroke_coverage() {
        let len = 40.0f32;
        let stroke = Stroke {
            points: vec![(12.0, 32.0), (12.0 + len, 32.0)],
            width: 3.0,
        };
        let m = rasterize_strokes(64, 64, &[stroke]);
        let cov = m.area() as f64 / 4096.0;
        let lo = 3.0 * len as f64 * 0.8 / 4096.0;
        let hi = 3.0 * len as f64 * 1.2 / 4096.0;
        assert!(cov >= lo && cov <= hi, "coverage {cov} outside [{lo}, {hi}]");
    }

    #[test]
    fn zero_strokes_rejected() {
        let brush = BrushParams {
            min_strokes: 0,
            max_strokes: 0,
            ..BrushParams::default()
        };
        assert!(matches!(arbitrary_mask(3, 64, 64, 1, &brush), Err(Error::Contract(_))));
    }

    #[test]
    fn generators_are_deterministic() {
        let b = BrushParams::default();
        assert_eq!(random_square(5, 64, 64, 9).unwrap(), random_square(5, 64, 64, 9).unwrap());
        assert_eq!(flying_square(5, 64, 64, 9).unwrap(), flying_square(5, 64, 64, 9).unwrap());
        assert_eq!(
            arbitrary_mask(5, 64, 64, 9, &b).unwrap(),
            arbitrary_mask(5, 64, 64, 9, &b).unwrap()
        );
    }

    #[test]
    fn dilation_examples() {
        let mut m = Mask::empty(32, 32);
        for y in 11..21 {
            for x in 11..21 {
                m.set(y, x, true);
            }
        }
        assert_eq!(dilate(&m, 0), m);
        let d = dilate(&m, 5);
        assert!(d.area() > 100 && d.area() <= 400, "area {}", d.area());
        let e = Mask::empty(16, 16);
        assert_eq!(dilate(&e, 5).area(), 0);
    }

    #[test]
    fn object_mask_checks_frame_count() {
        let dir = tempfile::tempdir().unwrap();
        let seq = MaskSeq::new(vec![Mask::empty(16, 16); 3]).unwrap();
        media::save_masks(&seq, dir.path()).unwrap();
        assert_eq!(object_mask(dir.path(), 5, Some(3)).unwrap().len(), 3);
        assert!(matches!(object_mask(dir.path(), 5, Some(4)), Err(Error::Contract(_))));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("flying_square".parse::<MaskKind>().unwrap(), MaskKind::FlyingSquare);
        assert_eq!("random-square".parse::<MaskKind>().unwrap(), MaskKind::RandomSquare);
        assert!("blob".parse::<MaskKind>().is_err());
    }
}
