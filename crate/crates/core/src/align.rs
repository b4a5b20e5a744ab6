//! Misalignment quantification between a dark view and its ground truth:
//! Harris corners with normalized patch descriptors, cross-checked L1
//! matching, a ratio test, and RANSAC over a 2-point rigid model.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lf::{Image, CHANNELS};

pub const DESCRIPTOR_SIDE: usize = 16;
pub const DESCRIPTOR_LEN: usize = DESCRIPTOR_SIDE * DESCRIPTOR_SIDE;

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gray {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for {height}x{width}", data.len())));
        }
        Ok(Gray { height, width, data })
    }

    /// Rec. 601 luma of an RGB image, or the single channel of a gray one.
    pub fn from_image(img: &Image) -> Result<Self> {
        let (h, w, c) = img.hwc()?;
        let d = img.data();
        let data = match c {
            1 => d.iter().map(|&v| v as f64).collect(),
            CHANNELS => d
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect(),
            _ => return Err(Error::Shape(format!("expected 1 or 3 channels, got {c}"))),
        };
        Gray::new(h, w, data)
    }

    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    fn bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x0 + 1) * fx;
        let bot = self.at(y0 + 1, x0) * (1.0 - fx) + self.at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub sigma: f64,
    pub k: f64,
    /// Responses below this fraction of the image maximum are discarded.
    pub relative_threshold: f64,
    /// Half-width of the non-maximum suppression window.
    pub nms_radius: usize,
    pub max_keypoints: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            sigma: 1.5,
            k: 0.04,
            relative_threshold: 0.01,
            nms_radius: 2,
            max_keypoints: 500,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(h: usize, w: usize, src: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let idx = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * src[y * w + idx(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[idx(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Harris response `det(M) − k·tr(M)²` of the Gaussian-weighted structure
/// tensor of Sobel gradients.
pub fn harris_response(img: &Gray, sigma: f64, k: f64) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let mut ixx = vec![0.0; h * w];
    let mut iyy = vec![0.0; h * w];
    let mut ixy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy, dx| img.at(y + dy, x + dx);
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let g = gaussian_kernel(sigma);
    let (sxx, syy, sxy) = (blur(h, w, &ixx, &g), blur(h, w, &iyy, &g), blur(h, w, &ixy, &g));
    (0..h * w)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - k * tr * tr
        })
        .collect()
}

/// Vertex offset of the parabola through three samples, limited to ±0.5.
fn parabola_peak(a: f64, b: f64, c: f64) -> f64 {
    let den = a - 2.0 * b + c;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
}

/// Corners at least `margin` pixels from the border, strongest first.
pub fn detect_corners(img: &Gray, cfg: &DetectorConfig, margin: usize) -> Vec<Keypoint> {
    let (h, w) = (img.height, img.width);
    let m = margin.max(cfg.nms_radius).max(1);
    if h <= 2 * m || w <= 2 * m {
        return Vec::new();
    }
    let r = harris_response(img, cfg.sigma, cfg.k);
    let max = r.iter().cloned().fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let thr = cfg.relative_threshold * max;
    let nr = cfg.nms_radius as isize;
    let mut out = Vec::new();
    for y in m..h - m {
        for x in m..w - m {
            let v = r[y * w + x];
            if v <= thr {
                continue;
            }
            // strict maximum over earlier neighbours, non-strict over later ones,
            // so plateaus keep exactly one point
            let is_max = (-nr..=nr).all(|dy| {
                (-nr..=nr).all(|dx| {
                    if dy == 0 && dx == 0 {
                        return true;
                    }
                    let o = r[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    if (dy, dx) < (0, 0) {
                        v > o
                    } else {
                        v >= o
                    }
                })
            });
            if !is_max {
                continue;
            }
            let at = |dy: isize, dx: isize| r[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            out.push(Keypoint {
                x: x as f64 + parabola_peak(at(0, -1), v, at(0, 1)),
                y: y as f64 + parabola_peak(at(-1, 0), v, at(1, 0)),
                score: v,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_keypoints);
    out
}

/// `16 × 16` bilinear patch around a keypoint, shifted to zero mean and
/// scaled to unit variance. `None` for flat patches.
pub fn describe(img: &Gray, kp: &Keypoint) -> Option<Vec<f64>> {
    let half = DESCRIPTOR_SIDE as f64 / 2.0 - 0.5;
    let mut d: Vec<f64> = (0..DESCRIPTOR_LEN)
        .map(|i| {
            let (r, c) = ((i / DESCRIPTOR_SIDE) as f64, (i % DESCRIPTOR_SIDE) as f64);
            img.bilinear(kp.y + r - half, kp.x + c - half)
        })
        .collect();
    let n = DESCRIPTOR_LEN as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-12 * (mean * mean).max(1e-12) {
        return None;
    }
    let sd = var.sqrt();
    d.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Some(d)
}

#[derive(Clone, Debug, Default)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Vec<f64>>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

pub fn detect_and_describe(img: &Gray, cfg: &DetectorConfig) -> Features {
    let margin = DESCRIPTOR_SIDE / 2 + 1;
    let mut f = Features::default();
    for kp in detect_corners(img, cfg, margin) {
        if let Some(d) = describe(img, &kp) {
            f.keypoints.push(kp);
            f.descriptors.push(d);
        }
    }
    f
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub g: usize,
    pub d: usize,
    pub distance: f64,
    /// Distance from `g` to its second-closest dark descriptor.
    pub second_best: Option<f64>,
}

/// Mutually nearest pairs under L1. Ties go to the lower index.
pub fn match_crosscheck(gs: &[Vec<f64>], ds: &[Vec<f64>]) -> Vec<MatchPair> {
    if gs.is_empty() || ds.is_empty() {
        return Vec::new();
    }
    let dist: Vec<Vec<f64>> = gs
        .par_iter()
        .map(|g| ds.iter().map(|d| l1_distance(g, d)).collect())
        .collect();
    let best_g_for: Vec<usize> = (0..ds.len())
        .map(|j| {
            (0..gs.len())
                .min_by(|&a, &b| dist[a][j].total_cmp(&dist[b][j]))
                .expect("non-empty")
        })
        .collect();
    let mut out = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        let mut second = f64::INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v < best.1 {
                second = best.1;
                best = (j, v);
            } else if v < second {
                second = v;
            }
        }
        if best_g_for[best.0] == i {
            out.push(MatchPair {
                g: i,
                d: best.0,
                distance: best.1,
                second_best: second.is_finite().then_some(second),
            });
        }
    }
    out
}

/// Keeps pairs whose distance is below `ratio` times the second-best
/// distance. A pair without a second candidate is kept.
pub fn ratio_test(pairs: &[MatchPair], ratio: f64) -> Vec<MatchPair> {
    pairs
        .iter()
        .filter(|p| p.second_best.is_none_or(|s| p.distance < ratio * s))
        .copied()
        .collect()
}

/// `p' = R(θ)·p + t`, mapping ground-truth coordinates to dark coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        theta: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c * p.0 - s * p.1 + self.tx, s * p.0 + c * p.1 + self.ty)
    }

    /// Least-squares rotation and translation between paired point sets.
    pub fn fit(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Self> {
        if src.len() != dst.len() || src.len() < 2 {
            return Err(Error::Align {
                stage: "fit",
                detail: format!("need at least 2 paired points, got {}/{}", src.len(), dst.len()),
            });
        }
        let n = src.len() as f64;
        let mean = |p: &[(f64, f64)]| {
            let (sx, sy) = p.iter().fold((0.0, 0.0), |a, q| (a.0 + q.0, a.1 + q.1));
            (sx / n, sy / n)
        };
        let (ms, md) = (mean(src), mean(dst));
        let (mut sc, mut ss, mut spread) = (0.0, 0.0, 0.0);
        for (a, b) in src.iter().zip(dst) {
            let (ax, ay) = (a.0 - ms.0, a.1 - ms.1);
            let (bx, by) = (b.0 - md.0, b.1 - md.1);
            sc += ax * bx + ay * by;
            ss += ax * by - ay * bx;
            spread += ax * ax + ay * ay;
        }
        if spread < 1e-18 {
            return Err(Error::Align {
                stage: "fit",
                detail: "degenerate sample: coincident source points".into(),
            });
        }
        let theta = ss.atan2(sc);
        let (s, c) = theta.sin_cos();
        Ok(RigidTransform {
            theta,
            tx: md.0 - (c * ms.0 - s * ms.1),
            ty: md.1 - (s * ms.0 + c * ms.1),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub confidence: f64,
    pub inlier_px: f64,
    pub max_iterations: usize,
    /// Fewer inliers than this is reported as a failure.
    pub min_inliers: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            confidence: 0.99,
            inlier_px: 1.0,
            max_iterations: 10_000,
            min_inliers: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub transform: RigidTransform,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(t: &RigidTransform, src: &[(f64, f64)], dst: &[(f64, f64)], tol: f64) -> Vec<bool> {
    src.iter()
        .zip(dst)
        .map(|(&a, b)| {
            let p = t.apply(a);
            (p.0 - b.0).hypot(p.1 - b.1) <= tol
        })
        .collect()
}

/// Samples needed so that an all-inlier pair is drawn with probability
/// `confidence` at inlier ratio `w`.
pub fn adaptive_iterations(confidence: f64, w: f64, cap: usize) -> usize {
    let p = w * w;
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p).ln();
    (n.ceil().max(1.0) as usize).min(cap)
}

/// RANSAC with a 2-point minimal solver, adaptive iteration count, and a
/// least-squares refit on the consensus set (repeated until it is stable).
pub fn ransac_rigid(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    cfg: &RansacConfig,
    rng: &mut impl Rng,
) -> Result<RansacResult> {
    let n = src.len();
    if n != dst.len() || n < 2 {
        return Err(Error::Align {
            stage: "ransac",
            detail: format!("need at least 2 pairs, got {n}"),
        });
    }
    let mut best: Option<(usize, RigidTransform)> = None;
    let mut needed = cfg.max_iterations;
    let mut iterations = 0;
    let mut degenerate = 0;
    while iterations < needed {
        iterations += 1;
        let pick = index::sample(rng, n, 2);
        let (i, j) = (pick.index(0), pick.index(1));
        let Ok(t) = RigidTransform::fit(&[src[i], src[j]], &[dst[i], dst[j]]) else {
            degenerate += 1;
            continue;
        };
        let count = inlier_mask(&t, src, dst, cfg.inlier_px).iter().filter(|&&b| b).count();
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, t));
            needed = adaptive_iterations(cfg.confidence, count as f64 / n as f64, cfg.max_iterations);
        }
    }
    let Some((_, mut t)) = best else {
        return Err(Error::Align {
            stage: "ransac",
            detail: format!("all {degenerate} samples were degenerate"),
        });
    };
    let mut mask = inlier_mask(&t, src, dst, cfg.inlier_px);
    for _ in 0..10 {
        let (s, d): (Vec<_>, Vec<_>) = src
            .iter()
            .zip(dst)
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (*a, *b))
            .unzip();
        if s.len() < 2 {
            break;
        }
        let refit = RigidTransform::fit(&s, &d)?;
        let next = inlier_mask(&refit, src, dst, cfg.inlier_px);
        let stable = next == mask;
        t = refit;
        mask = next;
        if stable {
            break;
        }
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count < cfg.min_inliers {
        return Err(Error::Align {
            stage: "ransac",
            detail: format!("{count} inliers, need {}", cfg.min_inliers),
        });
    }
    Ok(RansacResult {
        transform: t,
        inliers: mask,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub detector: DetectorConfig,
    pub ratio: f64,
    pub ransac: RansacConfig,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            detector: DetectorConfig::default(),
            ratio: 0.7,
            ransac: RansacConfig::default(),
            seed: 0,
        }
    }
}

/// Absolute shifts, rotation in degrees, and the sizes of the consensus and
/// candidate sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub tx: f64,
    pub ty: f64,
    pub theta_deg: f64,
    pub inliers: usize,
    pub matches: usize,
    #[serde(skip)]
    pub transform: Option<RigidTransform>,
}

/// Amplifies the dark view by `preamp` (clipped to [0, 1]), then detects,
/// cross-checks, ratio-tests and fits a rigid transform from ground truth to
/// the dark view.
pub fn estimate_misalignment(gt: &Image, dark: &Image, preamp: f32, cfg: &AlignConfig) -> Result<AlignReport> {
    if gt.shape() != dark.shape() {
        return Err(Error::Shape(format!("views differ: {:?} vs {:?}", gt.shape(), dark.shape())));
    }
    if !(preamp > 0.0 && preamp.is_finite()) {
        return Err(Error::Config(format!("preamplification {preamp} must be positive")));
    }
    let amp = dark.map(|v| (v * preamp).clamp(0.0, 1.0));
    let fg = detect_and_describe(&Gray::from_image(gt)?, &cfg.detector);
    let fd = detect_and_describe(&Gray::from_image(&amp)?, &cfg.detector);
    if fg.len() < 2 || fd.len() < 2 {
        return Err(Error::Align {
            stage: "detect",
            detail: format!("{} ground-truth and {} dark features", fg.len(), fd.len()),
        });
    }
    let pairs = ratio_test(&match_crosscheck(&fg.descriptors, &fd.descriptors), cfg.ratio);
    if pairs.len() < 2 {
        return Err(Error::Align {
            stage: "match",
            detail: format!("{} pairs survive cross-check and ratio test", pairs.len()),
        });
    }
    let pt = |k: &Keypoint| (k.x, k.y);
    let src: Vec<_> = pairs.iter().map(|p| pt(&fg.keypoints[p.g])).collect();
    let dst: Vec<_> = pairs.iter().map(|p| pt(&fd.keypoints[p.d])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = ransac_rigid(&src, &dst, &cfg.ransac, &mut rng)?;
    Ok(AlignReport {
        tx: r.transform.tx.abs(),
        ty: r.transform.ty.abs(),
        theta_deg: r.transform.theta.to_degrees(),
        inliers: r.inlier_count(),
        matches: pairs.len(),
        transform: Some(r.transform),
    })
}

/// Per-scene reports, computed concurrently; scene `i` uses seed `seed + i`.
pub fn estimate_scenes(scenes: &[(Image, Image)], preamp: f32, cfg: &AlignConfig) -> Vec<Result<AlignReport>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, (g, d))| {
            let c = AlignConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..*cfg
            };
            estimate_misalignment(g, d, preamp, &c)
        })
        .collect()
}
