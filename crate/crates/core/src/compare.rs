//! Side-by-side comparison frames.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{contract, Error, Result};
use crate::media::{Clip, MaskSeq};

/// Width of the white gap between tiles.
pub const SEPARATOR: usize = 2;
const BOUNDARY: Rgb<u8> = Rgb([255, 0, 0]);

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles the clips horizontally, frame by frame, with [`SEPARATOR`]-pixel
/// gaps. When `masks` is given, the hole boundary is drawn in red on the first
/// tile.
pub fn compare_video(tiles: &[Clip], masks: Option<&MaskSeq>) -> Result<Vec<RgbImage>> {
    contract!(!tiles.is_empty(), "comparison needs at least one clip");
    let n = tiles[0].len();
    let (h, w) = tiles[0].dims();
    for c in tiles {
        contract!(
            c.len() == n && c.dims() == (h, w),
            "comparison clips differ in frame count or size ({} frames of {:?} vs {n} of {:?})",
            c.len(),
            c.dims(),
            (h, w)
        );
    }
    if let Some(m) = masks {
        m.check_pairs(&tiles[0])?;
    }
    let width = tiles.len() * w + (tiles.len() - 1) * SEPARATOR;
    let frames = (0..n)
        .map(|t| {
            let mut img = RgbImage::from_pixel(width as u32, h as u32, Rgb([255, 255, 255]));
            for (k, clip) in tiles.iter().enumerate() {
                let x0 = k * (w + SEPARATOR);
                let f = clip.frame(t);
                for y in 0..h {
                    for x in 0..w {
                        let px = Rgb([to_u8(f.get(y, x, 0)), to_u8(f.get(y, x, 1)), to_u8(f.get(y, x, 2))]);
                        img.put_pixel((x0 + x) as u32, y as u32, px);
                    }
                }
            }
            if let Some(m) = masks {
                let m = m.mask(t);
                for y in 0..h {
                    for x in 0..w {
                        if m.get(y, x) == 0 {
                            continue;
                        }
                        let edge = (y > 0 && m.get(y - 1, x) == 0)
                            || (y + 1 < h && m.get(y + 1, x) == 0)
                            || (x > 0 && m.get(y, x - 1) == 0)
                            || (x + 1 < w && m.get(y, x + 1) == 0);
                        if edge {
                            img.put_pixel(x as u32, y as u32, BOUNDARY);
                        }
                    }
                }
            }
            img
        })
        .collect();
    Ok(frames)
}

/// Writes frames as `%05d.png` into `dir`.
pub fn save_images(frames: &[RgbImage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        let path = dir.join(format!("{i:05}.png"));
        f.save(&path).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{Frame, Mask};

    fn clip(t: usize, v: f32) -> Clip {
        Clip::new(vec![Frame::constant(64, 64, v).unwrap(); t]).unwrap()
    }

    #[test]
    fn tiled_width_and_separator() {
        let out = compare_video(&[clip(5, 0.0), clip(5, 0.5), clip(5, 1.0)], None).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].dimensions(), (3 * 64 + 2 * 2, 64));
        assert_eq!(out[0].get_pixel(64, 10), &Rgb([255, 255, 255]));
        assert_eq!(out[0].get_pixel(66, 10), &Rgb([128, 128, 128]));
    }

    #[test]
    fn single_source_gets_boundary_only() {
        let mut m = Mask::empty(64, 64);
        for y in 10..20 {
            for x in 10..20 {
                m.set(y, x, true);
            }
        }
        let masks = MaskSeq::new(vec![m]).unwrap();
        let out = compare_video(&[clip(1, 0.0)], Some(&masks)).unwrap();
        assert_eq!(out[0].dimensions(), (64, 64));
        assert_eq!(out[0].get_pixel(10, 15), &BOUNDARY);
        assert_eq!(out[0].get_pixel(15, 15), &Rgb([0, 0, 0]));
    }

    #[test]
    fn mismatches_are_contract_errors() {
        assert!(compare_video(&[], None).unwrap_err().is_contract());
        assert!(compare_video(&[clip(2, 0.0), clip(3, 0.0)], None).unwrap_err().is_contract());
    }
}
