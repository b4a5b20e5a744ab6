//! Training objective: weighted L1, contextual loss on raw patches, and an
//! L1 penalty on the network weights.

use std::sync::Arc;

use nnkit::{matmul, CustomOp, Graph, MatRef, ParamKind, Scalar, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::L3fnet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// L1 weight before `switch_iter`.
    pub alpha1: f64,
    /// L1 weight from `switch_iter` on.
    pub alpha1_late: f64,
    pub alpha2: f64,
    pub lambda: f64,
    pub switch_iter: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 5.0,
            alpha1_late: 1.0,
            alpha2: 0.1,
            lambda: 1e-6,
            switch_iter: 20_000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha1, self.alpha1_late, self.alpha2, self.lambda];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// `(α1, α2)` in effect at iteration `iter` (0-based).
pub fn loss_schedule(iter: u64, w: &LossWeights) -> (f64, f64) {
    let a1 = if iter < w.switch_iter { w.alpha1 } else { w.alpha1_late };
    (a1, w.alpha2)
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute deviation over every element of every view.
pub fn l1_loss(out: &[Tensor<f32>], gt: &[Tensor<f32>]) -> Result<f64> {
    if out.len() != gt.len() || out.is_empty() {
        return Err(Error::Shape(format!("{} outputs vs {} targets", out.len(), gt.len())));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (a, b) in out.iter().zip(gt) {
        check_pair(a, b, "l1")?;
        sum += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>();
        n += a.len();
    }
    Ok(sum / n as f64)
}

/// `Σ|w|` over weight blocks; biases are not penalized.
pub fn param_l1_penalty<T: Scalar>(model: &L3fnet<T>) -> f64 {
    model
        .params()
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .flat_map(|(_, p)| p.value.data().iter().map(|&x| Scalar::to_f64(x).abs()))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CxConfig {
    /// Side of the square patch used as a feature (odd).
    pub patch: usize,
    /// Spacing of the target feature grid.
    pub grid_stride: usize,
    /// Bandwidth `h` of the affinity kernel.
    pub bandwidth: f64,
    pub epsilon: f64,
}

impl Default for CxConfig {
    fn default() -> Self {
        CxConfig {
            patch: 5,
            grid_stride: 4,
            bandwidth: 0.5,
            epsilon: 1e-5,
        }
    }
}

impl CxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 2 == 0 {
            return Err(Error::Config(format!("CX patch {} must be odd", self.patch)));
        }
        if self.grid_stride == 0 || !(self.bandwidth > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid CX settings {self:?}")));
        }
        Ok(())
    }
}

/// Top-left corners of a stride-`s` grid of `p`-wide windows, centred in `n`.
fn grid_positions(n: usize, p: usize, s: usize) -> Vec<usize> {
    let span = n - p;
    ((span % s) / 2..=span).step_by(s).collect()
}

struct Patches<T> {
    /// `rows × dim`, each row a patch flattened as `(dy, dx, c)`
    data: Vec<T>,
    rows: usize,
    dim: usize,
    corners: Vec<(usize, usize)>,
}

fn extract<T: Scalar>(img: &Tensor<T>, ys: &[usize], xs: &[usize], p: usize) -> Patches<T> {
    let (_, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let dim = p * p * c;
    let mut data = Vec::with_capacity(ys.len() * xs.len() * dim);
    let mut corners = Vec::with_capacity(ys.len() * xs.len());
    for &y in ys {
        for &x in xs {
            for dy in 0..p {
                data.extend_from_slice(&img.data()[((y + dy) * w + x) * c..][..p * c]);
            }
            corners.push((y, x));
        }
    }
    Patches {
        data,
        rows: corners.len(),
        dim,
        corners,
    }
}

/// Subtracts `mu` from each row and scales it to unit length. Returns the
/// pre-normalization lengths.
fn center_normalize<T: Scalar>(p: &mut Patches<T>, mu: &[T]) -> Vec<T> {
    let tiny = T::of(1e-12);
    p.data
        .chunks_exact_mut(p.dim)
        .map(|row| {
            let mut ss = T::zero();
            for (x, &m) in row.iter_mut().zip(mu) {
                *x -= m;
                ss += *x * *x;
            }
            let n = ss.sqrt().max(tiny);
            for x in row.iter_mut() {
                *x = *x / n;
            }
            n
        })
        .collect()
}

/// Per-row affinity quantities for one row of cosine similarities.
struct RowStats<T> {
    d: Vec<T>,
    w: Vec<T>,
    z: T,
    inv: T,
    kmin: usize,
}

fn row_stats<T: Scalar>(c: &[T], h: T, eps: T) -> RowStats<T> {
    let d: Vec<T> = c.iter().map(|&c| (T::one() - c).max(T::zero())).collect();
    let mut kmin = 0;
    for (k, &v) in d.iter().enumerate() {
        if v < d[kmin] {
            kmin = k;
        }
    }
    let inv = T::one() / (d[kmin] + eps);
    let w: Vec<T> = d.iter().map(|&v| ((T::one() - v * inv) / h).exp()).collect();
    let z = w.iter().copied().sum();
    RowStats { d, w, z, inv, kmin }
}

const CX_BLOCK_ELEMS: usize = 1 << 20;

struct CxForward<T> {
    loss: T,
    best: Vec<T>,
    arg: Vec<usize>,
    xhat: Patches<T>,
    xnorm: Vec<T>,
    yhat: Patches<T>,
}

fn cx_forward<T: Scalar>(out: &Tensor<T>, gt: &Tensor<T>, cfg: &CxConfig) -> Result<CxForward<T>> {
    cfg.validate()?;
    check_pair(out, gt, "contextual loss")?;
    let (h, w, _) = out.hwc()?;
    let p = cfg.patch;
    if h < p || w < p {
        return Err(Error::Precondition(format!("{h}x{w} image is smaller than a {p}x{p} patch")));
    }
    let mut yhat = extract(gt, &grid_positions(h, p, cfg.grid_stride), &grid_positions(w, p, cfg.grid_stride), p);
    let all_y: Vec<usize> = (0..=h - p).collect();
    let all_x: Vec<usize> = (0..=w - p).collect();
    let mut xhat = extract(out, &all_y, &all_x, p);
    if yhat.rows < 2 || xhat.rows < 2 {
        return Err(Error::Precondition(format!(
            "contextual loss needs at least 2 features per image, got {} and {}",
            xhat.rows, yhat.rows
        )));
    }
    let dim = yhat.dim;
    let inv_n = T::one() / T::of(yhat.rows as f64);
    let mut mu = vec![T::zero(); dim];
    for row in yhat.data.chunks_exact(dim) {
        for (m, &v) in mu.iter_mut().zip(row) {
            *m += v * inv_n;
        }
    }
    center_normalize(&mut yhat, &mu);
    let xnorm = center_normalize(&mut xhat, &mu);

    let ny = yhat.rows;
    let (hh, eps) = (T::of(cfg.bandwidth), T::of(cfg.epsilon));
    let block = (CX_BLOCK_ELEMS / ny).max(1);
    let partial: Vec<(Vec<T>, Vec<usize>)> = xhat
        .data
        .par_chunks(block * dim)
        .enumerate()
        .map(|(bi, rows)| {
            let nb = rows.len() / dim;
            let c = matmul(
                MatRef::new(rows, nb, dim),
                MatRef::new(&yhat.data, ny, dim).t(),
            )
            .expect("cx block dims");
            let mut best = vec![T::neg_infinity(); ny];
            let mut arg = vec![0usize; ny];
            for (r, crow) in c.chunks_exact(ny).enumerate() {
                let st = row_stats(crow, hh, eps);
                for k in 0..ny {
                    let v = st.w[k] / st.z;
                    if v > best[k] {
                        best[k] = v;
                        arg[k] = bi * block + r;
                    }
                }
            }
            (best, arg)
        })
        .collect();
    let mut best = vec![T::neg_infinity(); ny];
    let mut arg = vec![0usize; ny];
    for (b, a) in partial {
        for k in 0..ny {
            if b[k] > best[k] {
                best[k] = b[k];
                arg[k] = a[k];
            }
        }
    }
    let mean = best.iter().copied().sum::<T>() * inv_n;
    Ok(CxForward {
        loss: -mean.ln(),
        best,
        arg,
        xhat,
        xnorm,
        yhat,
    })
}

/// Contextual loss between two `[h, w, c]` images: `−ln` of the mean, over
/// target features, of the best normalized affinity to any output feature.
/// Target features sit on a stride grid, output features at every offset.
pub fn contextual_loss(out: &Tensor<f32>, gt: &Tensor<f32>, cfg: &CxConfig) -> Result<f64> {
    let f = cx_forward(&out.cast::<f64>(), &gt.cast::<f64>(), cfg)?;
    Ok(f.loss)
}

struct CxOp<T> {
    cfg: CxConfig,
    fwd: CxForward<T>,
    shape: Vec<usize>,
    signature: u64,
}

impl<T: Scalar> CustomOp<T> for CxOp<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let f = &self.fwd;
        let (dim, ny) = (f.yhat.dim, f.yhat.rows);
        let inv_n = T::one() / T::of(ny as f64);
        let mean = f.best.iter().copied().sum::<T>() * inv_n;
        let gbest = -grad_out.item() * inv_n / mean;

        let mut active: Vec<usize> = f.arg.clone();
        active.sort_unstable();
        active.dedup();
        let mut rows = Vec::with_capacity(active.len() * dim);
        for &i in &active {
            rows.extend_from_slice(&f.xhat.data[i * dim..][..dim]);
        }
        let na = active.len();
        let c = matmul(
            MatRef::new(&rows, na, dim),
            MatRef::new(&f.yhat.data, ny, dim).t(),
        )
        .expect("cx backward dims");
        let (hh, eps) = (T::of(self.cfg.bandwidth), T::of(self.cfg.epsilon));
        let mut gc = vec![T::zero(); na * ny];
        for (a, &i) in active.iter().enumerate() {
            let crow = &c[a * ny..][..ny];
            let st = row_stats(crow, hh, eps);
            let gcx: Vec<T> = (0..ny)
                .map(|k| if f.arg[k] == i { gbest } else { T::zero() })
                .collect();
            let dot: T = gcx.iter().zip(&st.w).map(|(&g, &w)| g * w).sum();
            let z2 = st.z * st.z;
            let grow = &mut gc[a * ny..][..ny];
            let mut dm = T::zero();
            for k in 0..ny {
                let dw = gcx[k] / st.z - dot / z2;
                let dnorm = -dw * st.w[k] / hh;
                grow[k] = dnorm * st.inv;
                dm -= dnorm * st.d[k] * st.inv * st.inv;
            }
            grow[st.kmin] += dm;
            for k in 0..ny {
                grow[k] = if crow[k] < T::one() { -grow[k] } else { T::zero() };
            }
        }
        let gx = matmul(MatRef::new(&gc, na, ny), MatRef::new(&f.yhat.data, ny, dim))
            .expect("cx backward dims");

        let (w, ch) = (self.shape[1], self.shape[2]);
        let p = self.cfg.patch;
        let mut dimg = Tensor::zeros(self.shape.clone());
        let out = dimg.data_mut();
        for (a, &i) in active.iter().enumerate() {
            let xh = &f.xhat.data[i * dim..][..dim];
            let g = &gx[a * dim..][..dim];
            let proj: T = xh.iter().zip(g).map(|(&x, &g)| x * g).sum();
            let (y0, x0) = f.xhat.corners[i];
            for dy in 0..p {
                let base = ((y0 + dy) * w + x0) * ch;
                for e in 0..p * ch {
                    let q = dy * p * ch + e;
                    out[base + e] += (g[q] - xh[q] * proj) / f.xnorm[i];
                }
            }
        }
        vec![Some(dimg)]
    }

    fn branch_signature(&self) -> u64 {
        self.signature
    }
}

fn cx_signature<T: Scalar>(f: &CxForward<T>, cfg: &CxConfig) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x100000001b3);
    };
    for &a in &f.arg {
        mix(a as u64);
    }
    let mut active = f.arg.clone();
    active.sort_unstable();
    active.dedup();
    let (dim, ny) = (f.yhat.dim, f.yhat.rows);
    for &i in &active {
        let c = matmul(
            MatRef::new(&f.xhat.data[i * dim..][..dim], 1, dim),
            MatRef::new(&f.yhat.data, ny, dim).t(),
        )
        .expect("cx signature dims");
        mix(row_stats(&c, T::of(cfg.bandwidth), T::of(cfg.epsilon)).kmin as u64);
    }
    h
}

/// Contextual loss as a graph node; only `out` receives a gradient.
pub fn contextual_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    out: Var,
    gt: Arc<Tensor<T>>,
    cfg: &CxConfig,
) -> Result<Var> {
    let fwd = cx_forward(g.value(out), &gt, cfg)?;
    let value = Tensor::scalar(fwd.loss);
    let signature = cx_signature(&fwd, cfg);
    let shape = g.shape(out).to_vec();
    Ok(g.custom(
        &[out],
        value,
        Box::new(CxOp {
            cfg: *cfg,
            fwd,
            shape,
            signature,
        }),
    ))
}
