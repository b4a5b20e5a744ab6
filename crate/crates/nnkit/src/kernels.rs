//! Graph-free forward and backward kernels.
//!
//! Images are `[h, w, c]` row-major. Convolution weights are `[k, k, cin, cout]`
//! so that the flattened weight is the `(k·k·cin) × cout` matrix that multiplies
//! an im2col buffer whose columns are ordered `(ky, kx, ci)`.
//!
//! Work is split into fixed-size row chunks. The partition never depends on the
//! thread count and partial sums are folded in chunk order, so results are
//! bit-identical for any rayon pool size.

use rayon::prelude::*;

use crate::error::{shape_err, NnError, Result};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::Tensor;

const CHUNK_ELEMS: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x: &Tensor<impl Scalar>,
        wt: &Tensor<impl Scalar>,
        b: &Tensor<impl Scalar>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (h, w, cin) = x.hwc()?;
        let [k, k2, wcin, cout] = wt.shape()[..] else {
            return Err(shape_err(
                "conv2d",
                format!("weight must be [k, k, cin, cout], got {:?}", wt.shape()),
            ));
        };
        if k != k2 || k == 0 {
            return Err(shape_err("conv2d", format!("non-square kernel {k}x{k2}")));
        }
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if b.shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?}, expected [{cout}]", b.shape()),
            ));
        }
        if stride == 0 {
            return Err(NnError::Unsupported {
                op: "conv2d",
                detail: "stride 0".into(),
            });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("input {h}x{w} (pad {pad}) smaller than kernel {k}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.ow * self.patch_len()).max(1)).clamp(1, self.oh)
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let step = self.rows_per_chunk();
        (0..self.oh)
            .step_by(step)
            .map(|r0| (r0, (r0 + step).min(self.oh)))
            .collect()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let kl = g.patch_len();
    let cin = g.cin;
    for oy in oy0..oy1 {
        for ox in 0..g.ow {
            let row = &mut cols[((oy - oy0) * g.ow + ox) * kl..][..kl];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.k {
                    let dst = &mut row[(ky * g.k + kx) * cin..][..cin];
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * cin;
                        dst.copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [T]) {
    let kl = g.patch_len();
    let cin = g.cin;
    for oy in oy0..oy1 {
        for ox in 0..g.ow {
            let row = &cols[((oy - oy0) * g.ow + ox) * kl..][..kl];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.k + kx) * cin..][..cin];
                    let dst = &mut dx[(iy as usize * g.w + ix as usize) * cin..][..cin];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation plus per-channel bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, wt, b, stride, pad)?;
    let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
    let bias = b.data();
    for px in out.chunks_exact_mut(g.cout) {
        px.copy_from_slice(bias);
    }
    let wm = Mat::n(wt.data(), g.patch_len(), g.cout);
    if g.is_pointwise() {
        gemm(Mat::n(x.data(), g.h * g.w, g.cin), wm, T::one(), &mut out);
    } else {
        let rows = g.rows_per_chunk();
        out.par_chunks_mut(rows * g.ow * g.cout)
            .enumerate()
            .for_each(|(ci, oc)| {
                let oy0 = ci * rows;
                let oy1 = (oy0 + rows).min(g.oh);
                let p = (oy1 - oy0) * g.ow;
                let mut cols = vec![T::zero(); p * g.patch_len()];
                im2col(x.data(), &g, oy0, oy1, &mut cols);
                gemm(Mat::n(&cols, p, g.patch_len()), wm, T::one(), oc);
            });
    }
    Tensor::new([g.oh, g.ow, g.cout], out)
}

/// Gradients of [`conv2d`]. `dx` is only computed when `need_dx` is set.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x, wt, b, stride, pad)?;
    if dy.shape() != [g.oh, g.ow, g.cout] {
        return Err(shape_err("conv2d backward", format!("{:?}", dy.shape())));
    }
    let kl = g.patch_len();
    let mut db = vec![T::zero(); g.cout];
    for px in dy.data().chunks_exact(g.cout) {
        for (a, &v) in db.iter_mut().zip(px) {
            *a += v;
        }
    }
    let mut dw = vec![T::zero(); kl * g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); g.h * g.w * g.cin]);

    if g.is_pointwise() {
        let p = g.h * g.w;
        gemm(
            Mat::t(x.data(), p, g.cin),
            Mat::n(dy.data(), p, g.cout),
            T::zero(),
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::n(dy.data(), p, g.cout),
                Mat::t(wt.data(), g.cin, g.cout),
                T::zero(),
                dx,
            );
        }
    } else {
        let chunks = g.chunks();
        let group = rayon::current_num_threads().max(1);
        for batch in chunks.chunks(group) {
            let partials: Vec<(Vec<T>, Option<Vec<T>>)> = batch
                .par_iter()
                .map(|&(oy0, oy1)| {
                    let p = (oy1 - oy0) * g.ow;
                    let mut cols = vec![T::zero(); p * kl];
                    im2col(x.data(), &g, oy0, oy1, &mut cols);
                    let dyc = &dy.data()[oy0 * g.ow * g.cout..oy1 * g.ow * g.cout];
                    let mut dwc = vec![T::zero(); kl * g.cout];
                    gemm(
                        Mat::t(&cols, p, kl),
                        Mat::n(dyc, p, g.cout),
                        T::zero(),
                        &mut dwc,
                    );
                    let dcols = need_dx.then(|| {
                        gemm(
                            Mat::n(dyc, p, g.cout),
                            Mat::t(wt.data(), kl, g.cout),
                            T::zero(),
                            &mut cols,
                        );
                        cols
                    });
                    (dwc, dcols)
                })
                .collect();
            for (&(oy0, oy1), (dwc, dcols)) in batch.iter().zip(partials) {
                for (a, v) in dw.iter_mut().zip(dwc) {
                    *a += v;
                }
                if let (Some(dx), Some(dc)) = (dx.as_mut(), dcols) {
                    col2im_add(&dc, &g, oy0, oy1, dx);
                }
            }
        }
    }

    let dx = match dx {
        Some(d) => Some(Tensor::new([g.h, g.w, g.cin], d)?),
        None => None,
    };
    Ok((
        dx,
        Tensor::new(wt.shape().to_vec(), dw)?,
        Tensor::new([g.cout], db)?,
    ))
}

fn convt_dims<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (h, w, cin) = x.hwc()?;
    let [wcin, 2, 2, cout] = wt.shape()[..] else {
        return Err(NnError::Unsupported {
            op: "transposed_conv2d",
            detail: format!(
                "only kernel 2 / stride 2 with weight [cin, 2, 2, cout]; got {:?}",
                wt.shape()
            ),
        });
    };
    if wcin != cin {
        return Err(shape_err(
            "transposed_conv2d",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if b.shape() != [cout] {
        return Err(shape_err("transposed_conv2d", format!("bias {:?}", b.shape())));
    }
    Ok((h, w, cin, cout))
}

/// Kernel-2 stride-2 transposed convolution: each input pixel writes one
/// disjoint 2×2 output tile.
pub fn conv_transpose2x2<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, cin, cout) = convt_dims(x, wt, b)?;
    let mut y = vec![T::zero(); h * w * 4 * cout];
    gemm(
        Mat::n(x.data(), h * w, cin),
        Mat::n(wt.data(), cin, 4 * cout),
        T::zero(),
        &mut y,
    );
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); oh * ow * cout];
    for i in 0..h {
        for j in 0..w {
            let src = &y[(i * w + j) * 4 * cout..][..4 * cout];
            for phase in 0..4 {
                let (dy, dx) = (phase / 2, phase % 2);
                let dst = &mut out[((2 * i + dy) * ow + 2 * j + dx) * cout..][..cout];
                for ((d, &s), &bb) in dst.iter_mut().zip(&src[phase * cout..]).zip(b.data()) {
                    *d = s + bb;
                }
            }
        }
    }
    Tensor::new([oh, ow, cout], out)
}

pub fn conv_transpose2x2_backward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    b: &Tensor<T>,
    dout: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin, cout) = convt_dims(x, wt, b)?;
    let (oh, ow) = (2 * h, 2 * w);
    if dout.shape() != [oh, ow, cout] {
        return Err(shape_err("transposed_conv2d backward", format!("{:?}", dout.shape())));
    }
    let mut dyp = vec![T::zero(); h * w * 4 * cout];
    let mut db = vec![T::zero(); cout];
    for i in 0..h {
        for j in 0..w {
            let dst = &mut dyp[(i * w + j) * 4 * cout..][..4 * cout];
            for phase in 0..4 {
                let (dy, dx) = (phase / 2, phase % 2);
                let src = &dout.data()[((2 * i + dy) * ow + 2 * j + dx) * cout..][..cout];
                dst[phase * cout..(phase + 1) * cout].copy_from_slice(src);
                for (a, &v) in db.iter_mut().zip(src) {
                    *a += v;
                }
            }
        }
    }
    let mut dw = vec![T::zero(); cin * 4 * cout];
    gemm(
        Mat::t(x.data(), h * w, cin),
        Mat::n(&dyp, h * w, 4 * cout),
        T::zero(),
        &mut dw,
    );
    let dx = if need_dx {
        let mut dx = vec![T::zero(); h * w * cin];
        gemm(
            Mat::n(&dyp, h * w, 4 * cout),
            Mat::t(wt.data(), cin, 4 * cout),
            T::zero(),
            &mut dx,
        );
        Some(Tensor::new([h, w, cin], dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(wt.shape().to_vec(), dw)?,
        Tensor::new([cout], db)?,
    ))
}

/// `y = W x + b` with `W: [m, n]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, n] = wt.shape()[..] else {
        return Err(shape_err("fully_connected", format!("weight {:?}", wt.shape())));
    };
    if x.len() != n {
        return Err(shape_err(
            "fully_connected",
            format!("input length {} but weight has {n} columns", x.len()),
        ));
    }
    if b.shape() != [m] {
        return Err(shape_err("fully_connected", format!("bias {:?}", b.shape())));
    }
    let mut y = b.data().to_vec();
    gemm(Mat::n(wt.data(), m, n), Mat::n(x.data(), n, 1), T::one(), &mut y);
    Tensor::new([m], y)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (m, n) = (wt.shape()[0], wt.shape()[1]);
    let mut dw = vec![T::zero(); m * n];
    gemm(Mat::n(dy.data(), m, 1), Mat::n(x.data(), 1, n), T::zero(), &mut dw);
    let mut dx = vec![T::zero(); n];
    gemm(Mat::t(wt.data(), m, n), Mat::n(dy.data(), m, 1), T::zero(), &mut dx);
    (
        Tensor::new(x.shape().to_vec(), dx).expect("linear dx"),
        Tensor::new([m, n], dw).expect("linear dw"),
        dy.clone(),
    )
}

/// Row-major matrix operand for [`matmul`]: stored as `rows × cols`, used
/// transposed when `trans` is set.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, trans: false }
    }

    pub fn t(self) -> Self {
        MatRef { trans: !self.trans, ..self }
    }
}

/// `op(a) · op(b)` as a row-major vector.
pub fn matmul<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Result<Vec<T>> {
    let (m, ka) = if a.trans { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if b.trans { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ka != kb || a.data.len() != a.rows * a.cols || b.data.len() != b.rows * b.cols {
        return Err(shape_err(
            "matmul",
            format!("{}x{} by {}x{} operands", m, ka, kb, n),
        ));
    }
    let mut c = vec![T::zero(); m * n];
    let ma = Mat { data: a.data, rows: a.rows, cols: a.cols, trans: a.trans };
    let mb = Mat { data: b.data, rows: b.rows, cols: b.cols, trans: b.trans };
    gemm(ma, mb, T::zero(), &mut c);
    Ok(c)
}
