//! Patch extraction for same-size odd-kernel convolutions, with its adjoint
//! as the backward pass.

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

/// `[B, C, H, W] -> [K*K*C, B*H*W]`, rows ordered `(dy, dx, c)`, zero padded
/// by `K / 2` on every side.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    pub kernel: usize,
    pub dims: (usize, usize, usize, usize),
}

/// Adjoint of [`Im2Col`]: sums each column entry back into the pixel it was
/// read from.
#[derive(Debug, Clone, Copy)]
pub struct Col2Im {
    pub kernel: usize,
    pub dims: (usize, usize, usize, usize),
}

trait Elem: Copy + Default + std::ops::AddAssign {}
impl Elem for f32 {}
impl Elem for f64 {}

/// Calls `f(column start, image start, run length)` for every in-bounds
/// run of a patch row.
fn for_each_run(kernel: usize, (b, c, h, w): (usize, usize, usize, usize), mut f: impl FnMut(usize, usize, usize)) {
    let half = kernel as isize / 2;
    let n = b * h * w;
    for dy in 0..kernel {
        for dx in 0..kernel {
            let (oy, ox) = (dy as isize - half, dx as isize - half);
            let y0 = (-oy).max(0) as usize;
            let y1 = (h as isize - oy).clamp(0, h as isize) as usize;
            let x0 = (-ox).max(0) as usize;
            let x1 = (w as isize - ox).clamp(0, w as isize) as usize;
            if x1 <= x0 {
                continue;
            }
            for ci in 0..c {
                let row = ((dy * kernel + dx) * c + ci) * n;
                for bi in 0..b {
                    let plane = (bi * c + ci) * h * w;
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let src = plane + sy * w + (x0 as isize + ox) as usize;
                        f(row + bi * h * w + y * w + x0, src, x1 - x0);
                    }
                }
            }
        }
    }
}

fn gather<T: Elem>(src: &[T], kernel: usize, dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, c, h, w) = dims;
    let mut out = vec![T::default(); kernel * kernel * c * b * h * w];
    for_each_run(kernel, dims, |col, img, len| out[col..col + len].copy_from_slice(&src[img..img + len]));
    out
}

fn scatter<T: Elem>(src: &[T], kernel: usize, dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, c, h, w) = dims;
    let mut out = vec![T::default(); b * c * h * w];
    for_each_run(kernel, dims, |col, img, len| {
        for (o, &v) in out[img..img + len].iter_mut().zip(&src[col..col + len]) {
            *o += v;
        }
    });
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, expected: usize, name: &str) -> Result<&'a [T]> {
    let Some((start, end)) = layout.contiguous_offsets() else {
        bail!("{name} needs a contiguous input")
    };
    if end - start != expected {
        bail!("{name}: {} elements, expected {expected}", end - start)
    }
    Ok(&data[start..end])
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let n = b * c * h * w;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous(v, layout, n, "im2col")?, self.kernel, self.dims)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous(v, layout, n, "im2col")?, self.kernel, self.dims)),
            _ => bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((self.kernel * self.kernel * c, b * h * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let adjoint = Col2Im {
            kernel: self.kernel,
            dims: self.dims,
        };
        Ok(Some(grad.contiguous()?.apply_op1(adjoint)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let n = self.kernel * self.kernel * c * b * h * w;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous(v, layout, n, "col2im")?, self.kernel, self.dims)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous(v, layout, n, "col2im")?, self.kernel, self.dims)),
            _ => bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let adjoint = Im2Col {
            kernel: self.kernel,
            dims: self.dims,
        };
        Ok(Some(grad.contiguous()?.apply_op1(adjoint)?))
    }
}

/// Patch matrix of `x: [B, C, H, W]`; differentiable.
pub fn im2col(x: &Tensor, kernel: usize) -> Result<Tensor> {
    let dims = x.dims4()?;
    x.contiguous()?.apply_op1(Im2Col { kernel, dims })
}
