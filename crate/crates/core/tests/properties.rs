use candle_core::{Device, Tensor};
use proptest::prelude::*;

use vinet_core::eval::{frechet_distance, psnr, PSNR_CAP};
use vinet_core::losses::{ssim, total_loss};
use vinet_core::maskgen::{flying_square_path, Direction, FlyingSquare};
use vinet_core::media::{FlowField, Frame};
use vinet_core::pipeline::neighbor_indices;
use vinet_core::warp::{bilinear_warp, warp_frame};
use vinet_core::{LossWeights, MaskKind, MaskSpec};

fn frame(h: usize, w: usize, data: Vec<f32>) -> Frame {
    Frame::new(h, w, data).unwrap()
}

fn pixels(h: usize, w: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0f32..1.0, h * w * 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_flow_warp_is_identity(data in pixels(16, 24)) {
        let f = frame(16, 24, data);
        let out = warp_frame(&f, &FlowField::zeros(16, 24)).unwrap();
        prop_assert_eq!(out.data(), f.data());
    }

    #[test]
    fn warp_stays_within_source_range(
        data in prop::collection::vec(-1f32..1.0, 5 * 7),
        flow in prop::collection::vec(-4f32..4.0, 5 * 7 * 2),
    ) {
        let dev = Device::Cpu;
        let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let src = Tensor::from_vec(data, (1, 1, 5, 7), &dev).unwrap();
        let fl = Tensor::from_vec(flow, (1, 2, 5, 7), &dev).unwrap();
        let out: Vec<f32> = bilinear_warp(&src, &fl).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for v in out {
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn warp_is_linear_in_source(
        a in prop::collection::vec(-1f32..1.0, 4 * 4),
        b in prop::collection::vec(-1f32..1.0, 4 * 4),
        flow in prop::collection::vec(-2f32..2.0, 4 * 4 * 2),
        k in -3f32..3.0,
    ) {
        let dev = Device::Cpu;
        let t = |v: &Vec<f32>| Tensor::from_vec(v.clone(), (1, 1, 4, 4), &dev).unwrap();
        let fl = Tensor::from_vec(flow, (1, 2, 4, 4), &dev).unwrap();
        let combo = t(&a).affine(k as f64, 0.0).unwrap().add(&t(&b)).unwrap();
        let lhs = bilinear_warp(&combo, &fl).unwrap();
        let rhs = bilinear_warp(&t(&a), &fl).unwrap().affine(k as f64, 0.0).unwrap()
            .add(&bilinear_warp(&t(&b), &fl).unwrap()).unwrap();
        let diff: f32 = lhs.sub(&rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        prop_assert!(diff < 1e-5);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in pixels(16, 16), b in pixels(16, 16)) {
        let (fa, fb) = (frame(16, 16, a), frame(16, 16, b));
        let ab = ssim(&fa, &fb).unwrap();
        let ba = ssim(&fb, &fa).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab <= 1.0 + 1e-9 && ab >= -1.0 - 1e-9);
        prop_assert!((ssim(&fa, &fa).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_is_symmetric_and_capped(a in pixels(16, 16), b in pixels(16, 16)) {
        let (fa, fb) = (frame(16, 16, a), frame(16, 16, b));
        prop_assert_eq!(psnr(&fa, &fb).unwrap(), psnr(&fb, &fa).unwrap());
        prop_assert_eq!(psnr(&fa, &fa).unwrap(), PSNR_CAP);
    }

    #[test]
    fn neighbors_are_clamped_and_ordered(len in 1usize..40, t_frac in 0f64..1.0) {
        let t = ((len - 1) as f64 * t_frac) as usize;
        let idx = neighbor_indices(t, len);
        prop_assert_eq!(idx[2], t);
        prop_assert!(idx.iter().all(|&i| i < len));
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn generated_masks_are_deterministic_and_in_bounds(
        seed in any::<u64>(),
        kind in prop::sample::select(vec![MaskKind::RandomSquare, MaskKind::FlyingSquare, MaskKind::Arbitrary]),
    ) {
        let spec = MaskSpec::new(kind, seed);
        let a = spec.generate(4, 32, 48).unwrap();
        prop_assert_eq!(&a, &spec.generate(4, 32, 48).unwrap());
        prop_assert_eq!(a.len(), 4);
        for m in a.masks() {
            prop_assert_eq!(m.dims(), (32, 48));
            prop_assert!(m.data().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn flying_square_moves_by_constant_step(
        side in 4usize..16,
        step in 2usize..9,
        x0 in 0usize..8,
        y0 in 0usize..8,
        dir in prop::sample::select(vec![Direction::Up, Direction::Down, Direction::Left, Direction::Right]),
    ) {
        let sq = FlyingSquare { start: (x0, y0), side, step, direction: dir };
        let seq = flying_square_path(6, 64, 64, &sq).unwrap();
        let corner = |k: usize| {
            let m = seq.mask(k);
            let mut best = None;
            'outer: for y in 0..64 {
                for x in 0..64 {
                    if m.get(y, x) == 1 { best = Some((x as isize, y as isize)); break 'outer; }
                }
            }
            best.unwrap()
        };
        for k in 0..6 {
            prop_assert_eq!(seq.mask(k).area(), side * side);
        }
        let (dx, dy) = match dir {
            Direction::Up => (0, -1), Direction::Down => (0, 1),
            Direction::Left => (-1, 0), Direction::Right => (1, 0),
        };
        for k in 1..6 {
            let (a, b) = (corner(k - 1), corner(k));
            let unclamped = (x0 as isize + (k * step) as isize * dx, y0 as isize + (k * step) as isize * dy);
            let max = 64 - side as isize;
            if (0..=max).contains(&unclamped.0) && (0..=max).contains(&unclamped.1) {
                prop_assert_eq!((b.0 - a.0, b.1 - a.1), (dx * step as isize, dy * step as isize));
            }
        }
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-2f64..2.0, 3), 2..8),
        b in prop::collection::vec(prop::collection::vec(-2f64..2.0, 3), 2..8),
    ) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()));
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn total_loss_is_weighted_sum(
        l1 in 0f64..2.0, s in 0f64..1.0,
        t in prop::array::uniform4(0f64..3.0),
        w in prop::array::uniform3(0.01f64..20.0),
    ) {
        let weights = LossWeights { recon: w[0], flow: w[1], warp: w[2] };
        let r = total_loss(l1, s, Some(t), &weights).unwrap();
        let want = w[0] * (l1 + s) + w[1] * (t[0] + t[1]) + w[2] * (t[2] + t[3]);
        prop_assert!((r.total - want).abs() <= 1e-12 * (1.0 + want));
        let r1 = total_loss(l1, s, None, &weights).unwrap();
        prop_assert!((r1.total - w[0] * (l1 + s)).abs() <= 1e-12 * (1.0 + r1.total));
    }
}
