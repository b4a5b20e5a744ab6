//! PSNR and SSIM, per view and as a JSON report.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lf::{Image, LightField, ViewIndex};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(peak² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::Shape("empty images".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Luma `0.299 R + 0.587 G + 0.114 B`; single-channel images pass through.
fn gray(img: &Image) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = img.hwc()?;
    let px = img.data().chunks_exact(c);
    let g = match c {
        1 => px.map(|p| p[0] as f64).collect(),
        3 => px
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
        _ => return Err(Error::Shape(format!("SSIM needs 1 or 3 channels, got {c}"))),
    };
    Ok((h, w, g))
}

pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ 1.5) of the
/// luma images, with `C1 = 0.01²` and `C2 = 0.03²` for unit peak.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, ga) = gray(a)?;
    let (_, _, gb) = gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let ma = filter_valid(&ga, h, w, &k);
    let mb = filter_valid(&gb, h, w, &k);
    let saa = filter_valid(&prod(&ga, &ga), h, w, &k);
    let sbb = filter_valid(&prod(&gb, &gb), h, w, &k);
    let sab = filter_valid(&prod(&ga, &gb), h, w, &k);
    let n = ma.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Finite values as numbers, infinities as the strings `"inf"` / `"-inf"`.
pub mod inf_as_string {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub u: usize,
    pub v: usize,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    #[serde(with = "inf_as_string")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-view PSNR/SSIM of two light fields with identical dimensions.
pub fn evaluate(out: &LightField, gt: &LightField) -> Result<MetricsReport> {
    if out.dims() != gt.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", out.dims(), gt.dims())));
    }
    let (u, v, _, _) = out.dims();
    let mut views = Vec::with_capacity(u * v);
    for uu in 0..u {
        for vv in 0..v {
            let at = ViewIndex::new(uu, vv);
            let (a, b) = (out.view(at)?, gt.view(at)?);
            views.push(ViewMetrics {
                u: uu,
                v: vv,
                psnr: psnr(&a, &b, 1.0)?,
                ssim: ssim(&a, &b)?,
            });
        }
    }
    let n = views.len() as f64;
    Ok(MetricsReport {
        mean_psnr: views.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|m| m.ssim).sum::<f64>() / n,
        views,
    })
}
