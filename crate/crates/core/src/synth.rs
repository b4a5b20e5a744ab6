//! Synthetic low-light light fields, augmentation, and training-example
//! sampling.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lf::{crop_central_grid, read_lf4, sample_patch, LightField, PatchWindow, ViewIndex, WorkingLf, CHANNELS};
use crate::model::rgb_histogram;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLightSpec {
    pub exposure_divisor: f64,
    pub read_noise_sigma: f64,
    pub shot_noise_scale: f64,
    pub rng_seed: u64,
}

impl LowLightSpec {
    pub fn noiseless(divisor: f64) -> Self {
        LowLightSpec {
            exposure_divisor: divisor,
            read_noise_sigma: 0.0,
            shot_noise_scale: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.exposure_divisor >= 1.0 && self.exposure_divisor.is_finite()) {
            return Err(Error::Config(format!("exposure divisor {} must be >= 1", self.exposure_divisor)));
        }
        if !(self.read_noise_sigma >= 0.0 && self.shot_noise_scale >= 0.0) {
            return Err(Error::Config("noise parameters must be >= 0".into()));
        }
        Ok(())
    }
}

/// `y = clamp(x/d + sqrt(shot·x/d + read²)·n, 0, 1)` with `n ~ N(0, 1)` per
/// sample, drawn in storage order from `spec.rng_seed`.
pub fn synth_lowlight(gt: &LightField, spec: &LowLightSpec) -> Result<LightField> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let d = spec.exposure_divisor;
    let read2 = spec.read_noise_sigma * spec.read_noise_sigma;
    let noisy = read2 > 0.0 || spec.shot_noise_scale > 0.0;
    let data = gt
        .data()
        .iter()
        .map(|&x| {
            let m = x as f64 / d;
            let y = if noisy {
                let n: f64 = StandardNormal.sample(&mut rng);
                m + (spec.shot_noise_scale * m.max(0.0) + read2).sqrt() * n
            } else {
                m
            };
            y.clamp(0.0, 1.0) as f32
        })
        .collect();
    let (u, v, h, w) = gt.dims();
    LightField::new(u, v, h, w, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub views_u: usize,
    pub views_v: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel shift between adjacent views of the nearest layer.
    pub max_disparity: f32,
    pub seed: u64,
}

struct Layer {
    colour: [f32; 3],
    tint: [f32; 3],
    waves: Vec<(f32, f32, f32, f32)>,
    disparity: f32,
    /// centre and radii of the layer's elliptical support; `None` fills the frame
    shape: Option<(f32, f32, f32, f32)>,
}

impl Layer {
    fn random(rng: &mut ChaCha8Rng, h: f32, w: f32, disparity: f32, background: bool) -> Self {
        let mut c = || [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
        let (colour, tint) = (c(), c());
        let waves = (0..4)
            .map(|_| {
                let period = rng.random_range(4.0f32..16.0);
                let angle = rng.random_range(0.0..std::f32::consts::PI);
                let phase = rng.random_range(0.0..std::f32::consts::TAU);
                let amp = rng.random_range(0.3f32..1.0);
                let k = std::f32::consts::TAU / period;
                (k * angle.cos(), k * angle.sin(), phase, amp)
            })
            .collect();
        let shape = (!background).then(|| {
            (
                rng.random_range(0.3 * h..0.7 * h),
                rng.random_range(0.3 * w..0.7 * w),
                rng.random_range(0.15 * h..0.35 * h),
                rng.random_range(0.15 * w..0.35 * w),
            )
        });
        Layer {
            colour,
            tint,
            waves,
            disparity,
            shape,
        }
    }

    fn covers(&self, y: f32, x: f32) -> bool {
        match self.shape {
            None => true,
            Some((cy, cx, ry, rx)) => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }

    fn sample(&self, y: f32, x: f32, c: usize) -> f32 {
        let norm: f32 = self.waves.iter().map(|w| w.3).sum();
        let s: f32 = self.waves.iter().map(|&(ky, kx, p, a)| a * (ky * y + kx * x + p).sin()).sum::<f32>() / norm;
        let t = 0.5 + 0.5 * s;
        (self.colour[c] * (1.0 - t) + self.tint[c] * t).clamp(0.05, 0.95)
    }
}

/// Layered textured scene: a background plane and two elliptical layers at
/// increasing disparity, each a sum of random oriented sinusoids. View
/// `(u, v)` sees a layer shifted by `disparity · (u − uc, v − vc)`.
pub fn synth_scene(spec: &SceneSpec) -> Result<LightField> {
    let (u, v, h, w) = (spec.views_u, spec.views_v, spec.height, spec.width);
    if u == 0 || v == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("empty scene {u}x{v}x{h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.max_disparity;
    let layers = [
        Layer::random(&mut rng, h as f32, w as f32, 0.0, true),
        Layer::random(&mut rng, h as f32, w as f32, 0.5 * d, false),
        Layer::random(&mut rng, h as f32, w as f32, d, false),
    ];
    let (uc, vc) = ((u as f32 - 1.0) / 2.0, (v as f32 - 1.0) / 2.0);
    Ok(LightField::from_fn(u, v, h, w, |uu, vv, c, y, x| {
        layers
            .iter()
            .rev()
            .find_map(|l| {
                let sy = y as f32 + l.disparity * (uu as f32 - uc);
                let sx = x as f32 + l.disparity * (vv as f32 - vc);
                l.covers(sy, sx).then(|| l.sample(sy, sx, c))
            })
            .expect("background covers everything")
    }))
}

/// The six orderings of RGB.
pub const CHANNEL_PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// A flip/colour transform applied identically to an input and its target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    /// Mirror columns and the angular `v` axis.
    pub hflip: bool,
    /// Mirror rows and the angular `u` axis.
    pub vflip: bool,
    /// Output channel `c` takes input channel `perm[c]`.
    pub perm: [usize; 3],
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        hflip: false,
        vflip: false,
        perm: [0, 1, 2],
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        Augmentation {
            hflip: rng.random(),
            vflip: rng.random(),
            perm: CHANNEL_PERMS[rng.random_range(0..6)],
        }
    }

    pub fn apply(&self, lf: &LightField) -> LightField {
        let (u, v, h, w) = lf.dims();
        let fu = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
        LightField::from_fn(u, v, h, w, |uu, vv, c, y, x| {
            lf.at(
                fu(uu, u, self.vflip),
                fu(vv, v, self.hflip),
                self.perm[c],
                fu(y, h, self.vflip),
                fu(x, w, self.hflip),
            )
        })
    }

    /// Histogram of the transformed light field: flips leave it unchanged,
    /// the channel permutation reorders its per-channel blocks.
    pub fn apply_hist(&self, hist: &[f32]) -> Vec<f32> {
        let l = hist.len() / CHANNELS;
        (0..CHANNELS)
            .flat_map(|c| hist[self.perm[c] * l..][..l].iter().copied())
            .collect()
    }
}

/// Draws one transform and applies it to both light fields.
pub fn augment(low: &LightField, gt: &LightField, rng: &mut impl Rng) -> Result<(LightField, LightField, Augmentation)> {
    if low.dims() != gt.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", low.dims(), gt.dims())));
    }
    let a = Augmentation::random(rng);
    Ok((a.apply(low), a.apply(gt), a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub read_noise_sigma: f64,
    pub shot_noise_scale: f64,
}

/// One manifest row: a ground-truth light field and the exposures to
/// synthesize from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub gt: PathBuf,
    pub divisors: Vec<f64>,
    pub noise: NoiseSpec,
    pub split: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        // relative paths are relative to the manifest
        if let Some(dir) = path.parent() {
            for e in &mut m.entries {
                if e.gt.is_relative() {
                    e.gt = dir.join(&e.gt);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(path, e))
    }
}

/// A dark capture, its ground truth (both ringed working grids) and the
/// histogram of the dark light field.
#[derive(Clone, Debug)]
pub struct Example {
    pub low: WorkingLf,
    pub gt: WorkingLf,
    pub hist: Vec<f32>,
    pub divisor: f64,
}

impl Example {
    pub fn new(low: WorkingLf, gt: WorkingLf, divisor: f64, bins: usize) -> Result<Self> {
        if low.ringed().dims() != gt.ringed().dims() {
            return Err(Error::Shape(format!(
                "dark {:?} vs ground truth {:?}",
                low.ringed().dims(),
                gt.ringed().dims()
            )));
        }
        let hist = rgb_histogram(low.ringed(), bins)?;
        Ok(Example { low, gt, hist, divisor })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

/// Seed of the `k`-th exposure of manifest entry `i`.
pub fn split_seed(base: u64, i: usize, k: usize) -> u64 {
    base ^ ((i as u64) << 32 | k as u64).wrapping_mul(0x9e3779b97f4a7c15)
}

impl Dataset {
    /// Loads every entry of `split` (all entries when `None`), synthesizes
    /// its dark exposures, and keeps the central `grid × grid` views plus
    /// ring.
    pub fn from_manifest(m: &DatasetManifest, split: Option<&str>, grid: usize, bins: usize, seed: u64) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, e) in m.entries.iter().enumerate() {
            if split.is_some_and(|s| s != e.split) {
                continue;
            }
            let gt = read_lf4(&e.gt)?;
            let gt_w = crop_central_grid(&gt, grid)?;
            for (k, &d) in e.divisors.iter().enumerate() {
                let spec = LowLightSpec {
                    exposure_divisor: d,
                    read_noise_sigma: e.noise.read_noise_sigma,
                    shot_noise_scale: e.noise.shot_noise_scale,
                    rng_seed: split_seed(seed, i, k),
                };
                let low = crop_central_grid(&synth_lowlight(&gt, &spec)?, grid)?;
                examples.push(Example::new(low, gt_w.clone(), d, bins)?);
            }
        }
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset { examples })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Square patch side (even).
    pub patch: usize,
    /// Views whose loss is evaluated per step.
    pub views: usize,
    pub augment: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            patch: 180,
            views: 12,
            augment: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub low: WorkingLf,
    pub gt: WorkingLf,
    pub hist: Vec<f32>,
    pub views: Vec<ViewIndex>,
    pub divisor: f64,
    pub window: PatchWindow,
    pub augmentation: Augmentation,
}

/// One training example: a uniformly chosen capture, a random patch window
/// shared by all views, an optional flip/colour transform, and up to
/// `cfg.views` distinct working views.
pub fn sample_batch(ds: &Dataset, cfg: &SampleConfig, rng: &mut impl Rng) -> Result<Batch> {
    if ds.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ex = &ds.examples[rng.random_range(0..ds.examples.len())];
    let window = sample_patch(ex.gt.height(), ex.gt.width(), cfg.patch, rng)?;
    let mut low = ex.low.crop_spatial(window)?;
    let mut gt = ex.gt.crop_spatial(window)?;
    let augmentation = if cfg.augment {
        Augmentation::random(rng)
    } else {
        Augmentation::IDENTITY
    };
    if augmentation != Augmentation::IDENTITY {
        low = WorkingLf::from_ringed(augmentation.apply(low.ringed()))?;
        gt = WorkingLf::from_ringed(augmentation.apply(gt.ringed()))?;
    }
    let all = low.working_views();
    let k = cfg.views.min(all.len()).max(1);
    let mut views: Vec<ViewIndex> = index::sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect();
    views.sort();
    Ok(Batch {
        low,
        gt,
        hist: augmentation.apply_hist(&ex.hist),
        views,
        divisor: ex.divisor,
        window,
        augmentation,
    })
}
