//! Single image ↔ pseudo light field.
//!
//! The image is cut into `B × B` blocks; view `r·B + c` collects pixel `(r, c)`
//! of every block. The views form a `B × B` grid that the restoration network
//! consumes unchanged.

use nnkit::{CustomOp, Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lf::{stack_views, Image, LightField, RingLayout, ViewIndex, CHANNELS};
use crate::model::L3fnet;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLf {
    block: usize,
    lf: LightField,
}

impl PseudoLf {
    pub fn block(&self) -> usize {
        self.block
    }

    /// `(H, W)` of the source image.
    pub fn source_dims(&self) -> (usize, usize) {
        (self.lf.height() * self.block, self.lf.width() * self.block)
    }

    pub fn light_field(&self) -> &LightField {
        &self.lf
    }

    pub fn into_light_field(self) -> LightField {
        self.lf
    }

    /// Interprets a square `B × B` grid as a pseudo light field.
    pub fn from_light_field(lf: LightField) -> Result<Self> {
        let (u, v, _, _) = lf.dims();
        if u != v {
            return Err(Error::InvalidLightField(format!(
                "a pseudo light field needs a square view grid, got {u}x{v}"
            )));
        }
        Ok(PseudoLf { block: u, lf })
    }
}

/// Rearranges `image` into `B²` views of `(H/B) × (W/B)`.
pub fn pack(image: &Image, block: usize) -> Result<PseudoLf> {
    let (h, w, c) = image.hwc()?;
    if c != CHANNELS {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::Precondition(format!(
            "{h}x{w} image is not divisible into {block}x{block} blocks"
        )));
    }
    let (vh, vw) = (h / block, w / block);
    let src = image.data();
    let lf = LightField::from_fn(block, block, vh, vw, |r, col, ch, y, x| {
        src[((y * block + r) * w + x * block + col) * CHANNELS + ch]
    });
    Ok(PseudoLf { block, lf })
}

/// Inverse of [`pack`].
pub fn unpack(p: &PseudoLf) -> Result<Image> {
    let b = p.block;
    let (u, v, vh, vw) = p.lf.dims();
    if u != b || v != b {
        return Err(Error::InvalidLightField(format!("{u}x{v} views for block {b}")));
    }
    let (h, w) = (vh * b, vw * b);
    let mut out = vec![0.0f32; h * w * CHANNELS];
    for r in 0..b {
        for col in 0..b {
            for ch in 0..CHANNELS {
                for y in 0..vh {
                    for x in 0..vw {
                        out[((y * b + r) * w + x * b + col) * CHANNELS + ch] = p.lf.at(r, col, ch, y, x);
                    }
                }
            }
        }
    }
    Ok(Tensor::new([h, w, CHANNELS], out)?)
}

/// Drops the bottom rows and right columns that do not fill a whole block.
pub fn crop_to_multiple(image: &Image, block: usize) -> Result<Image> {
    let (h, w, c) = image.hwc()?;
    if block == 0 || h < block || w < block {
        return Err(Error::Precondition(format!("cannot crop {h}x{w} to multiples of {block}")));
    }
    let (ch, cw) = (h - h % block, w - w % block);
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in 0..ch {
        out.extend_from_slice(&image.data()[y * w * c..][..cw * c]);
    }
    Ok(Tensor::new([ch, cw, c], out)?)
}

/// A `k`-wide, stride-`s` filter over pseudo-LF views covers `k·B` source
/// pixels and advances by `s·B`.
pub fn receptive_field_analytic(block: usize, kernel: usize, stride: usize) -> (usize, usize) {
    (kernel * block, stride * block)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReceptiveField {
    /// Source-pixel extent `(rows, cols)` of the non-zero input gradient.
    pub extent: (usize, usize),
    /// Horizontal source-pixel shift between adjacent output pixels, if measured.
    pub stride: Option<usize>,
    /// The field touched the probe border, so `extent` is a lower bound.
    pub lower_bound: bool,
    pub probe: usize,
    pub block: usize,
}

/// Backward of "pick one element": a one-hot gradient.
struct Pick {
    index: usize,
}

impl CustomOp<f32> for Pick {
    fn backward(&self, inputs: &[&Tensor<f32>], _: &Tensor<f32>, grad_out: &Tensor<f32>) -> Vec<Option<Tensor<f32>>> {
        let mut g = Tensor::zeros(inputs[0].shape().to_vec());
        g.data_mut()[self.index] = grad_out.item();
        vec![Some(g)]
    }
}

pub const PROBE_THRESHOLD: f32 = 1e-8;

/// Source-pixel bounding box `(y0, y1, x0, x1)` (inclusive) of input entries
/// whose gradient exceeds the threshold.
fn gradient_box(grad: &Tensor<f32>, block: usize) -> Option<(usize, usize, usize, usize)> {
    let (h, w, c) = grad.hwc().ok()?;
    let mut bx: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                if grad.data()[(y * w + x) * c + ch].abs() <= PROBE_THRESHOLD {
                    continue;
                }
                let k = ch / CHANNELS;
                let (sy, sx) = (y * block + k / block, x * block + k % block);
                bx = Some(match bx {
                    None => (sy, sy, sx, sx),
                    Some((a, b, c0, d)) => (a.min(sy), b.max(sy), c0.min(sx), d.max(sx)),
                });
            }
        }
    }
    bx
}

/// Impulse-response probe. A random `probe × probe` image is packed with
/// block `B` and stacked (`[probe/B, probe/B, 3B²]`); `f` maps that stack to
/// any `[h, w, c]` output, reading its weights from `params`. The gradient of
/// the centre output pixel (channel 0) with respect to the stack is mapped
/// back to source pixels through the packing, and its bounding box is the
/// receptive field.
pub fn measure_receptive_field<F>(
    block: usize,
    probe: usize,
    seed: u64,
    with_stride: bool,
    params: &ParamSet<f32>,
    f: F,
) -> Result<ReceptiveField>
where
    F: Fn(&mut Graph<f32>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::from_fn([probe, probe, CHANNELS], |_| rng.random::<f32>());
    let stacked = stack_views(pack(&img, block)?.light_field());

    let box_for = |dx: usize| -> Result<Option<(usize, usize, usize, usize)>> {
        let mut g = Graph::new();
        let x = g.input(stacked.clone());
        let y = f(&mut g, x)?;
        let (h, w, c) = g.value(y).hwc()?;
        let (py, px) = (h / 2, (w / 2 + dx).min(w - 1));
        let index = (py * w + px) * c;
        let v = Tensor::scalar(g.value(y).data()[index]);
        let root = g.custom(&[y], v, Box::new(Pick { index }));
        let mut scratch = params.clone();
        let grads = g.backward(root, &mut scratch)?;
        Ok(grads.get(x).and_then(|gr| gradient_box(gr, block)))
    };

    let centre = box_for(0)?.ok_or_else(|| {
        Error::Precondition("output does not depend on the input (all-zero gradient)".into())
    })?;
    let (y0, y1, x0, x1) = centre;
    let stride = if with_stride {
        box_for(1)?.map(|b| b.2.abs_diff(x0).max(b.3.abs_diff(x1)))
    } else {
        None
    };
    Ok(ReceptiveField {
        extent: (y1 - y0 + 1, x1 - x0 + 1),
        stride,
        lower_bound: y0 < block || x0 < block || y1 + block >= probe || x1 + block >= probe,
        probe,
        block,
    })
}

/// Receptive field of a full network restoring the centre view of a
/// `B × B` pseudo light field whose ring is formed by edge replication.
pub fn measure_model_receptive_field(model: &L3fnet<f32>, probe: usize, seed: u64) -> Result<ReceptiveField> {
    let b = model.config().grid;
    let layout = RingLayout { nu: b, nv: b };
    // channel map from the ringed grid into the working stack
    let ring_map: Vec<usize> = (0..b + 2)
        .flat_map(|u| (0..b + 2).map(move |v| (u, v)))
        .flat_map(|(u, v)| {
            let k = u.saturating_sub(1).min(b - 1) * b + v.saturating_sub(1).min(b - 1);
            (0..CHANNELS).map(move |c| CHANNELS * k + c)
        })
        .collect();
    let centre = ViewIndex::new(b / 2, b / 2);
    measure_receptive_field(b, probe, seed, false, model.params(), |g, x| {
        let full = g.select_channels(x, &ring_map)?;
        let out = model.forward_views(g, full, layout, &[centre])?;
        Ok(out[0])
    })
}
