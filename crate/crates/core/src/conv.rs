//! Square-kernel 2-D convolution as unfold + matrix product.
//!
//! candle's CPU convolution backward runs naive loops; unfolding into a
//! column matrix keeps both passes on the gemm path.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols_shape(&self) -> (usize, usize) {
        let (ho, wo) = self.out_hw();
        (self.c * self.k * self.k, self.n * ho * wo)
    }

    /// Calls `f(src, dst, len)` for every run of in-bounds taps: column
    /// entries `dst..dst + len` read input `src + j·stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let plane = ho * wo;
        let row_len = self.n * plane;
        let (s, p) = (self.stride, self.pad);
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * row_len;
                    // ox range with 0 <= ox·s + kx − p < w
                    let lo = p.saturating_sub(kx).div_ceil(s);
                    let hi = ((self.w + p).saturating_sub(kx)).div_ceil(s).min(wo);
                    if lo >= hi {
                        continue;
                    }
                    for n in 0..self.n {
                        let src = (n * self.c + c) * self.h * self.w;
                        for oy in 0..ho {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= self.h {
                                continue;
                            }
                            let src_row = src + (iy - p) * self.w + lo * s + kx - p;
                            f(src_row, row + n * plane + oy * wo + lo, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{op} expects a contiguous input"),
    }
}

struct Im2Col(Geometry);

impl Im2Col {
    fn run<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let (r, c) = self.0.cols_shape();
        let mut out = vec![T::default(); r * c];
        let s = self.0.stride;
        self.0.for_each_run(|src, dst, len| {
            let dst = &mut out[dst..dst + len];
            if s == 1 {
                dst.copy_from_slice(&x[src..src + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x[src + j * s];
                }
            }
        });
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout, "im2col")?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout, "im2col")?)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(self.0.cols_shape())))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl Col2Im {
    fn run<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let g = &self.0;
        let mut out = vec![T::default(); g.n * g.c * g.h * g.w];
        let s = g.stride;
        g.for_each_run(|src, dst, len| {
            let cols = &cols[dst..dst + len];
            if s == 1 {
                for (o, &v) in out[src..src + len].iter_mut().zip(cols) {
                    *o += v;
                }
            } else {
                for (j, &v) in cols.iter().enumerate() {
                    out[src + j * s] += v;
                }
            }
        });
        out
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout, "col2im")?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout, "col2im")?)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        let g = &self.0;
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }
}

/// Convolution of `x` (`N×C×H×W`) with `weight` (`O×C×k×k`), zero padding
/// `pad` and the given stride. Same result as `Tensor::conv2d`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
        candle_core::bail!("conv2d: input {:?} incompatible with kernel {:?}", x.dims(), weight.dims());
    }
    let g = Geometry {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    weight
        .reshape((o, c * k * k))?
        .matmul(&cols)?
        .reshape((o, n, ho, wo))?
        .transpose(0, 1)?
        .contiguous()
}
