//! Light-field data model: sub-aperture views, stacking, neighbour selection,
//! EPI slices and patch windows.

mod container;
mod pngdir;

pub use container::{decode_lf4, encode_lf4, read_lf4, write_lf4};
pub use pngdir::{export_views, import_views, read_image, write_image};

use nnkit::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `[h, w, 3]` image.
pub type Image = Tensor<f32>;

pub const CHANNELS: usize = 3;

/// `U × V` grid of `H × W` RGB views stored planar as `[u][v][c][h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LightField {
    u: usize,
    v: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewIndex {
    pub u: usize,
    pub v: usize,
}

impl ViewIndex {
    pub fn new(u: usize, v: usize) -> Self {
        ViewIndex { u, v }
    }
}

impl std::fmt::Display for ViewIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.u, self.v)
    }
}

impl LightField {
    pub fn new(u: usize, v: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if u == 0 || v == 0 {
            return Err(Error::InvalidLightField(format!("empty view grid {u}x{v}")));
        }
        let n = u * v * CHANNELS * h * w;
        if data.len() != n {
            return Err(Error::InvalidLightField(format!(
                "{u}x{v}x{h}x{w}x3 needs {n} samples, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("light-field sample {i}")));
        }
        Ok(LightField { u, v, h, w, data })
    }

    pub fn zeros(u: usize, v: usize, h: usize, w: usize) -> Self {
        LightField {
            u,
            v,
            h,
            w,
            data: vec![0.0; u * v * CHANNELS * h * w],
        }
    }

    /// Builds a light field from `f(u, v, c, y, x)`.
    pub fn from_fn(
        u: usize,
        v: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(u * v * CHANNELS * h * w);
        for uu in 0..u {
            for vv in 0..v {
                for c in 0..CHANNELS {
                    for y in 0..h {
                        for x in 0..w {
                            data.push(f(uu, vv, c, y, x));
                        }
                    }
                }
            }
        }
        LightField { u, v, h, w, data }
    }

    /// Assembles a light field from row-major `[h, w, 3]` views.
    pub fn from_views(u: usize, v: usize, views: &[Image]) -> Result<Self> {
        if views.len() != u * v || views.is_empty() {
            return Err(Error::InvalidLightField(format!(
                "{} views for a {u}x{v} grid",
                views.len()
            )));
        }
        let (h, w, _) = views[0].hwc()?;
        let mut lf = LightField::zeros(u, v, h, w);
        for (k, img) in views.iter().enumerate() {
            lf.set_view(ViewIndex::new(k / v, k % v), img)?;
        }
        if let Some(i) = lf.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("light-field sample {i}")));
        }
        Ok(lf)
    }

    pub fn views_u(&self) -> usize {
        self.u
    }
    pub fn views_v(&self) -> usize {
        self.v
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn channels(&self) -> usize {
        CHANNELS
    }
    /// `(U, V, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.u, self.v, self.h, self.w)
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        LightField {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&mut self) {
        for x in &mut self.data {
            *x = x.clamp(0.0, 1.0);
        }
    }

    fn check(&self, at: ViewIndex) -> Result<()> {
        if at.u >= self.u || at.v >= self.v {
            return Err(Error::OutOfRange(format!(
                "view {at} outside {}x{} grid",
                self.u, self.v
            )));
        }
        Ok(())
    }

    fn view_offset(&self, at: ViewIndex) -> usize {
        (at.u * self.v + at.v) * CHANNELS * self.h * self.w
    }

    /// Planar `[c][h][w]` samples of one view.
    pub fn view_planar(&self, at: ViewIndex) -> Result<&[f32]> {
        self.check(at)?;
        let n = CHANNELS * self.h * self.w;
        Ok(&self.data[self.view_offset(at)..][..n])
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[(((u * self.v + v) * CHANNELS + c) * self.h + y) * self.w + x]
    }

    /// One view as an interleaved `[h, w, 3]` image.
    pub fn view(&self, at: ViewIndex) -> Result<Image> {
        let p = self.view_planar(at)?;
        let hw = self.h * self.w;
        let mut out = Vec::with_capacity(hw * CHANNELS);
        for i in 0..hw {
            for c in 0..CHANNELS {
                out.push(p[c * hw + i]);
            }
        }
        Ok(Tensor::new([self.h, self.w, CHANNELS], out)?)
    }

    pub fn set_view(&mut self, at: ViewIndex, img: &Image) -> Result<()> {
        self.check(at)?;
        if img.shape() != [self.h, self.w, CHANNELS] {
            return Err(Error::Shape(format!(
                "view image {:?} vs light-field view {}x{}x3",
                img.shape(),
                self.h,
                self.w
            )));
        }
        let hw = self.h * self.w;
        let off = self.view_offset(at);
        for i in 0..hw {
            for c in 0..CHANNELS {
                self.data[off + c * hw + i] = img.data()[i * CHANNELS + c];
            }
        }
        Ok(())
    }

    /// Sub-grid of views `[u0, u0+nu) × [v0, v0+nv)`.
    pub fn sub_grid(&self, u0: usize, v0: usize, nu: usize, nv: usize) -> Result<LightField> {
        if nu == 0 || nv == 0 || u0 + nu > self.u || v0 + nv > self.v {
            return Err(Error::OutOfRange(format!(
                "views [{u0}, {}) x [{v0}, {}) of a {}x{} grid",
                u0 + nu,
                v0 + nv,
                self.u,
                self.v
            )));
        }
        let n = CHANNELS * self.h * self.w;
        let mut data = Vec::with_capacity(nu * nv * n);
        for u in u0..u0 + nu {
            for v in v0..v0 + nv {
                data.extend_from_slice(&self.data[self.view_offset(ViewIndex::new(u, v))..][..n]);
            }
        }
        Ok(LightField {
            u: nu,
            v: nv,
            h: self.h,
            w: self.w,
            data,
        })
    }

    /// The same spatial window of every view.
    pub fn crop_spatial(&self, win: PatchWindow) -> Result<LightField> {
        if win.y + win.size > self.h || win.x + win.size > self.w {
            return Err(Error::OutOfRange(format!(
                "window {win:?} outside {}x{} views",
                self.h, self.w
            )));
        }
        let s = win.size;
        let mut data = Vec::with_capacity(self.u * self.v * CHANNELS * s * s);
        for plane in self.data.chunks_exact(self.h * self.w) {
            for y in win.y..win.y + s {
                data.extend_from_slice(&plane[y * self.w + win.x..][..s]);
            }
        }
        Ok(LightField {
            u: self.u,
            v: self.v,
            h: s,
            w: s,
            data,
        })
    }
}

/// Stacks every view along channels: channels `3k..3k+3` hold view `k` in
/// row-major `(u, v)` order.
pub fn stack_views(lf: &LightField) -> Tensor<f32> {
    let (u, v, h, w) = lf.dims();
    let n = u * v;
    let hw = h * w;
    let c = CHANNELS * n;
    let mut out = vec![0.0f32; hw * c];
    for (k, view) in lf.data.chunks_exact(CHANNELS * hw).enumerate() {
        for ch in 0..CHANNELS {
            let plane = &view[ch * hw..][..hw];
            for (i, &x) in plane.iter().enumerate() {
                out[i * c + CHANNELS * k + ch] = x;
            }
        }
    }
    Tensor::new([h, w, c], out).expect("stack dims")
}

/// The order of the five views fed to view reconstruction.
pub const NEIGHBOR_ORDER: [(isize, isize); 5] = [(0, 0), (0, -1), (-1, 0), (0, 1), (1, 0)];

fn neighbor_indices(u: usize, v: usize, at: ViewIndex, offset: usize) -> Option<[ViewIndex; 5]> {
    let mut out = [ViewIndex::new(0, 0); 5];
    for (slot, (du, dv)) in out.iter_mut().zip(NEIGHBOR_ORDER) {
        let uu = (at.u + offset) as isize + du;
        let vv = (at.v + offset) as isize + dv;
        if uu < 0 || vv < 0 || uu >= u as isize || vv >= v as isize {
            return None;
        }
        *slot = ViewIndex::new(uu as usize, vv as usize);
    }
    Some(out)
}

fn stack_selected(lf: &LightField, views: &[ViewIndex]) -> Tensor<f32> {
    let (h, w) = (lf.h, lf.w);
    let hw = h * w;
    let c = CHANNELS * views.len();
    let mut out = vec![0.0f32; hw * c];
    for (k, &at) in views.iter().enumerate() {
        let view = &lf.data[lf.view_offset(at)..][..CHANNELS * hw];
        for ch in 0..CHANNELS {
            for (i, &x) in view[ch * hw..][..hw].iter().enumerate() {
                out[i * c + CHANNELS * k + ch] = x;
            }
        }
    }
    Tensor::new([h, w, c], out).expect("stack dims")
}

/// `[center, left, up, right, down] × RGB` of a light field without a border
/// ring. Edge views have no complete neighbourhood and are rejected.
pub fn neighbor_stack(lf: &LightField, at: ViewIndex) -> Result<Tensor<f32>> {
    lf.check(at)?;
    let idx = neighbor_indices(lf.u, lf.v, at, 0).ok_or_else(|| {
        Error::Precondition(format!(
            "view {at} lies on the edge of a {}x{} grid and there is no border ring",
            lf.u, lf.v
        ))
    })?;
    Ok(stack_selected(lf, &idx))
}

/// A working grid of views together with the one-view ring around it that
/// supplies neighbours for the edge views.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkingLf {
    lf: LightField,
}

impl WorkingLf {
    /// Interprets `lf` as working grid plus ring (needs `U, V ≥ 3`).
    pub fn from_ringed(lf: LightField) -> Result<Self> {
        if lf.u < 3 || lf.v < 3 {
            return Err(Error::Precondition(format!(
                "a {}x{} grid cannot hold a working grid plus ring",
                lf.u, lf.v
            )));
        }
        Ok(WorkingLf { lf })
    }

    /// Adds a ring by replicating the edge views.
    pub fn replicate_ring(lf: &LightField) -> Self {
        let (u, v, h, w) = lf.dims();
        let n = CHANNELS * h * w;
        let mut data = Vec::with_capacity((u + 2) * (v + 2) * n);
        for uu in 0..u + 2 {
            for vv in 0..v + 2 {
                let su = uu.saturating_sub(1).min(u - 1);
                let sv = vv.saturating_sub(1).min(v - 1);
                data.extend_from_slice(&lf.data[lf.view_offset(ViewIndex::new(su, sv))..][..n]);
            }
        }
        WorkingLf {
            lf: LightField {
                u: u + 2,
                v: v + 2,
                h,
                w,
                data,
            },
        }
    }

    /// The ringed light field.
    pub fn ringed(&self) -> &LightField {
        &self.lf
    }

    pub fn into_ringed(self) -> LightField {
        self.lf
    }

    /// Working grid size `(n_u, n_v)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.lf.u - 2, self.lf.v - 2)
    }

    pub fn height(&self) -> usize {
        self.lf.h
    }

    pub fn width(&self) -> usize {
        self.lf.w
    }

    pub fn working_views(&self) -> Vec<ViewIndex> {
        let (nu, nv) = self.grid();
        (0..nu)
            .flat_map(|u| (0..nv).map(move |v| ViewIndex::new(u, v)))
            .collect()
    }

    fn check_working(&self, at: ViewIndex) -> Result<()> {
        let (nu, nv) = self.grid();
        if at.u >= nu || at.v >= nv {
            return Err(Error::OutOfRange(format!(
                "view {at} outside the {nu}x{nv} working grid"
            )));
        }
        Ok(())
    }

    /// A working view (working-grid coordinates).
    pub fn view(&self, at: ViewIndex) -> Result<Image> {
        self.check_working(at)?;
        self.lf.view(ViewIndex::new(at.u + 1, at.v + 1))
    }

    /// Working grid without the ring.
    pub fn working(&self) -> LightField {
        let (nu, nv) = self.grid();
        self.lf.sub_grid(1, 1, nu, nv).expect("working grid inside ring")
    }

    /// Neighbour stack of a working view; edge views draw from the ring.
    pub fn neighbor_stack(&self, at: ViewIndex) -> Result<Tensor<f32>> {
        self.check_working(at)?;
        let idx = neighbor_indices(self.lf.u, self.lf.v, at, 1).expect("ring present");
        Ok(stack_selected(&self.lf, &idx))
    }

    /// All views, ring included, stacked along channels.
    pub fn full_stack(&self) -> Tensor<f32> {
        stack_views(&self.lf)
    }

    pub fn layout(&self) -> RingLayout {
        let (nu, nv) = self.grid();
        RingLayout { nu, nv }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        WorkingLf { lf: self.lf.map(f) }
    }

    pub fn crop_spatial(&self, win: PatchWindow) -> Result<WorkingLf> {
        Ok(WorkingLf {
            lf: self.lf.crop_spatial(win)?,
        })
    }
}

/// Channel bookkeeping for the full stack of a ringed `(nu+2) × (nv+2)` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingLayout {
    pub nu: usize,
    pub nv: usize,
}

impl RingLayout {
    fn check(&self, at: ViewIndex) -> Result<()> {
        if at.u >= self.nu || at.v >= self.nv {
            return Err(Error::OutOfRange(format!(
                "view {at} outside the {}x{} working grid",
                self.nu, self.nv
            )));
        }
        Ok(())
    }

    fn channels_of(&self, r: ViewIndex) -> [usize; 3] {
        let k = r.u * (self.nv + 2) + r.v;
        [3 * k, 3 * k + 1, 3 * k + 2]
    }

    pub fn working_views(&self) -> Vec<ViewIndex> {
        let nv = self.nv;
        (0..self.nu)
            .flat_map(|u| (0..nv).map(move |v| ViewIndex::new(u, v)))
            .collect()
    }

    /// Channels holding the working views in row-major order.
    pub fn working_channels(&self) -> Vec<usize> {
        self.working_views()
            .into_iter()
            .flat_map(|at| self.channels_of(ViewIndex::new(at.u + 1, at.v + 1)))
            .collect()
    }

    /// Channels forming the `[center, left, up, right, down]` stack of `at`.
    pub fn neighbor_channels(&self, at: ViewIndex) -> Result<Vec<usize>> {
        self.check(at)?;
        let idx = neighbor_indices(self.nu + 2, self.nv + 2, at, 1).expect("ring present");
        Ok(idx.iter().flat_map(|&r| self.channels_of(r)).collect())
    }
}

/// Central `n × n` working grid plus its ring. The working grid starts at
/// `⌈(U − n) / 2⌉`, so a 15×15 capture keeps rows and columns 4..=11 with the
/// ring on 3 and 12.
pub fn crop_central_grid(lf: &LightField, n: usize) -> Result<WorkingLf> {
    if n == 0 || lf.u < n + 2 || lf.v < n + 2 {
        return Err(Error::Precondition(format!(
            "a {}x{} grid is too small for a {n}x{n} working grid plus ring",
            lf.u, lf.v
        )));
    }
    let ou = (lf.u - n).div_ceil(2);
    let ov = (lf.v - n).div_ceil(2);
    WorkingLf::from_ringed(lf.sub_grid(ou - 1, ov - 1, n + 2, n + 2)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Fixed `u` and image row: shape `V × W × 3`.
    Horizontal,
    /// Fixed `v` and image column: shape `U × H × 3`.
    Vertical,
}

/// Epipolar-plane slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Epi {
    pub orientation: Orientation,
    pub fixed_view_coord: usize,
    pub fixed_spatial_coord: usize,
    pub image: Image,
}

pub fn extract_epi(
    lf: &LightField,
    orientation: Orientation,
    fixed_view_coord: usize,
    fixed_spatial_coord: usize,
) -> Result<Epi> {
    let (u, v, h, w) = lf.dims();
    let (nview, nspatial, rows, cols) = match orientation {
        Orientation::Horizontal => (u, h, v, w),
        Orientation::Vertical => (v, w, u, h),
    };
    if fixed_view_coord >= nview || fixed_spatial_coord >= nspatial {
        return Err(Error::OutOfRange(format!(
            "{orientation:?} EPI at view {fixed_view_coord} / pixel {fixed_spatial_coord} of {u}x{v}x{h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(rows * cols * CHANNELS);
    for r in 0..rows {
        for col in 0..cols {
            for c in 0..CHANNELS {
                out.push(match orientation {
                    Orientation::Horizontal => lf.at(fixed_view_coord, r, c, fixed_spatial_coord, col),
                    Orientation::Vertical => lf.at(r, fixed_view_coord, c, col, fixed_spatial_coord),
                });
            }
        }
    }
    Ok(Epi {
        orientation,
        fixed_view_coord,
        fixed_spatial_coord,
        image: Tensor::new([rows, cols, CHANNELS], out)?,
    })
}

/// Square spatial window shared by every view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWindow {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

/// Draws a window uniformly over all positions that fit inside `h × w`.
/// The size must be even so stride-2 layers halve it exactly.
pub fn sample_patch(h: usize, w: usize, size: usize, rng: &mut impl Rng) -> Result<PatchWindow> {
    if size == 0 || size % 2 != 0 {
        return Err(Error::Precondition(format!("patch size {size} must be even and positive")));
    }
    if size > h.min(w) {
        return Err(Error::Precondition(format!("patch size {size} exceeds {h}x{w} views")));
    }
    Ok(PatchWindow {
        y: rng.random_range(0..=h - size),
        x: rng.random_range(0..=w - size),
        size,
    })
}
