//! Convolution as im2col followed by a matrix product.
//!
//! Candle's CPU backward pass for `conv2d` goes through a direct
//! `conv_transpose2d` loop that dominates training time on small feature
//! maps. Unfolding patches with a custom op keeps the heavy lifting inside
//! the matmul kernel, and the unfold/fold pair are exact adjoints of each
//! other so the gradients stay exact.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output positions `[lo, hi)` whose tap at kernel offset `d` lands
    /// inside an input axis of length `size`.
    #[inline]
    fn span(&self, d: usize, out: usize, size: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        // need 0 <= o*s + d - p < size
        let lo = if d >= p { 0 } else { (p - d).div_ceil(s) };
        let hi = if size + p > d { ((size + p - d - 1) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(col_offset, img_offset, len)` for every run of in-bounds
    /// taps of one batch element; the run advances by one column in the
    /// patch matrix and by `stride` pixels in the image. Out-of-bounds taps
    /// are the zero padding.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let k = self.kernel;
        for c in 0..self.channels {
            for dy in 0..k {
                let (ylo, yhi) = self.span(dy, ho, self.height);
                for dx in 0..k {
                    let (xlo, xhi) = self.span(dx, wo, self.width);
                    if xhi == xlo {
                        continue;
                    }
                    let row = (c * k + dy) * k + dx;
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + dy - self.pad;
                        let ix = xlo * self.stride + dx - self.pad;
                        f((row * ho + oy) * wo + xlo, (c * self.height + iy) * self.width + ix, xhi - xlo);
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let img = self.channels * self.height * self.width;
        let col = self.rows() * ho * wo;
        let mut out = vec![T::default(); batch * col];
        for b in 0..batch {
            let s = &src[b * img..(b + 1) * img];
            let d = &mut out[b * col..(b + 1) * col];
            let st = self.stride;
            self.for_each_run(|ci, ii, n| {
                if st == 1 {
                    d[ci..ci + n].copy_from_slice(&s[ii..ii + n]);
                } else {
                    for j in 0..n {
                        d[ci + j] = s[ii + j * st];
                    }
                }
            });
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let img = self.channels * self.height * self.width;
        let col = self.rows() * ho * wo;
        let mut out = vec![T::default(); batch * img];
        for b in 0..batch {
            let s = &src[b * col..(b + 1) * col];
            let d = &mut out[b * img..(b + 1) * img];
            let st = self.stride;
            self.for_each_run(|ci, ii, n| {
                for j in 0..n {
                    d[ii + j * st] += s[ci + j];
                }
            });
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Unfold(Geometry);
struct Fold(Geometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let (ho, wo) = g.out_hw();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.unfold(contiguous(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(g.unfold(contiguous(v, layout)?, batch)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((batch, g.rows(), ho * wo))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(contiguous(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(contiguous(v, layout)?, batch)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Unfold(self.0))?))
    }
}

/// 2-D convolution of `x (B, C, H, W)` with `weight (Co, C, k, k)`, zero
/// padding `pad` and stride `stride`. No bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(crate::Error::Dimension(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let wm = weight.reshape((co, g.rows()))?;
    let cols = if k == 1 && stride == 1 && pad == 0 {
        x.reshape((b, c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Unfold(g))?
    };
    Ok(wm.broadcast_matmul(&cols)?.reshape((b, co, ho, wo))?)
}

/// Nearest-neighbour 2x upsampling built from broadcasts, so the backward
/// pass is a plain sum.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::keyed_rng(seed, "conv-test", 0);
        let n = shape.iter().product();
        let v: Vec<f64> = crate::rng::normal_vec(&mut rng, n).into_iter().map(f64::from).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_candle_forward() {
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1), (5, 1)] {
            let x = randn(&[2, 3, 8, 10], 1);
            let w = randn(&[4, 3, k, k], 2);
            let ours = conv2d(&x, &w, stride, k / 2).unwrap();
            let reference = x.conv2d(&w, k / 2, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-10, "k={k} stride={stride}");
        }
    }

    #[test]
    fn matches_candle_gradients() {
        for &stride in &[1, 2] {
            let x = Var::from_tensor(&randn(&[2, 3, 6, 6], 3)).unwrap();
            let w = Var::from_tensor(&randn(&[5, 3, 3, 3], 4)).unwrap();
            let probe = randn(&[2, 5, 6 / stride, 6 / stride], 5);

            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, 1).unwrap();
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), 1, stride, 1, 1).unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-10);
            assert!(max_diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn upsample_matches_candle() {
        let x = randn(&[1, 2, 3, 4], 6).to_dtype(DType::F32).unwrap();
        let a = upsample2x(&x).unwrap();
        let b = x.upsample_nearest2d(6, 8).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}
