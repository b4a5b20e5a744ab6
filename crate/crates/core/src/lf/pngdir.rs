//! Per-view 8-bit PNG directories (`view_UU_VV.png`).

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use super::{Image, LightField, ViewIndex, CHANNELS};
use crate::error::{Error, Result};

fn view_name(at: ViewIndex) -> String {
    format!("view_{:02}_{:02}.png", at.u, at.v)
}

fn parse_name(name: &str) -> Option<ViewIndex> {
    let rest = name.strip_prefix("view_")?.strip_suffix(".png")?;
    let (u, v) = rest.split_once('_')?;
    Some(ViewIndex::new(u.parse().ok()?, v.parse().ok()?))
}

pub fn export_views(lf: &LightField, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let (u, v, h, w) = lf.dims();
    for uu in 0..u {
        for vv in 0..v {
            let at = ViewIndex::new(uu, vv);
            let img = lf.view(at)?;
            let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let p = &img.data()[(y as usize * w + x as usize) * CHANNELS..][..CHANNELS];
                Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
            });
            buf.save(dir.join(view_name(at)))?;
        }
    }
    Ok(())
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads every `view_UU_VV.png` in `dir`; the grid must be complete.
pub fn import_views(dir: impl AsRef<Path>) -> Result<LightField> {
    let dir = dir.as_ref();
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let entry = entry?;
        if let Some(at) = entry.file_name().to_str().and_then(parse_name) {
            found.push((at, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(Error::InvalidLightField(format!("no view_UU_VV.png files in {}", dir.display())));
    }
    let u = found.iter().map(|(a, _)| a.u).max().unwrap() + 1;
    let v = found.iter().map(|(a, _)| a.v).max().unwrap() + 1;
    if found.len() != u * v {
        return Err(Error::InvalidLightField(format!(
            "{} view files do not form a complete {u}x{v} grid",
            found.len()
        )));
    }
    found.sort_by_key(|(a, _)| *a);
    let mut lf: Option<LightField> = None;
    for (at, path) in found {
        let img = image::open(&path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let lf = lf.get_or_insert_with(|| LightField::zeros(u, v, h, w));
        if (lf.height(), lf.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "{} is {w}x{h}, other views are {}x{}",
                path.display(),
                lf.width(),
                lf.height()
            )));
        }
        let data: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        lf.set_view(at, &nnkit::Tensor::new([h, w, CHANNELS], data)?)?;
    }
    Ok(lf.expect("at least one view"))
}

/// One 8-bit RGB image as an `[h, w, 3]` tensor in [0, 1].
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(nnkit::Tensor::new([h, w, CHANNELS], data)?)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = img.hwc()?;
    if c != CHANNELS {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = &img.data()[(y as usize * w + x as usize) * CHANNELS..][..CHANNELS];
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    });
    buf.save(path.as_ref())?;
    Ok(())
}
