//! Binary netpbm output (P5 greyscale, P6 colour) and small image helpers.

use std::fs;
use std::path::Path;

use spatem_tensor::Tensor;

use crate::error::{Error, Result};

/// Overlay colour per class, in class order.
pub const CLASS_COLOURS: [[u8; 3]; 4] = [[0, 160, 255], [40, 170, 60], [20, 40, 200], [200, 30, 160]];

/// Greyscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub w: usize,
    pub h: usize,
    pub px: Vec<u8>,
}

/// Colour image, planar `[3, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb {
    pub w: usize,
    pub h: usize,
    pub px: Vec<u8>,
}

pub fn encode_pgm(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.px);
    out
}

pub fn encode_ppm(img: &Rgb) -> Vec<u8> {
    let plane = img.w * img.h;
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        out.extend_from_slice(&[img.px[i], img.px[plane + i], img.px[2 * plane + i]]);
    }
    out
}

pub fn write_pgm(path: &Path, img: &Gray) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &Rgb) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` tensor in `[0, 1]` to an image.
pub fn rgb_from_tensor(t: &Tensor<f32>) -> Result<Rgb> {
    match t.shape() {
        &[3, h, w] => Ok(Rgb { w, h, px: t.data().iter().map(|&v| to_byte(v)).collect() }),
        s => Err(Error::Data(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

/// `[H, W]` values in `[0, 1]` to greyscale.
pub fn gray_from_unit(values: &[f32], w: usize, h: usize) -> Gray {
    Gray { w, h, px: values.iter().map(|&v| to_byte(v)).collect() }
}

/// Heatmap stretched so its maximum is white.
pub fn heatmap(values: &[f32], w: usize, h: usize) -> Gray {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    Gray { w, h, px: values.iter().map(|&v| to_byte(v * scale)).collect() }
}

/// Min-max normalisation onto `[0, 255]`; a constant map becomes black.
pub fn minmax(values: &[f32], w: usize, h: usize) -> Gray {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let px = values.iter().map(|&v| if span > 0.0 { to_byte((v - lo) / span) } else { 0 }).collect();
    Gray { w, h, px }
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn enlarge(img: &Gray, factor: usize) -> Gray {
    let (w, h) = (img.w * factor, img.h * factor);
    Gray { w, h, px: (0..w * h).map(|i| img.px[(i / w / factor) * img.w + (i % w) / factor]).collect() }
}

/// Equal-sized images in a grid with a one-pixel mid-grey gutter.
pub fn montage(images: &[Gray], columns: usize) -> Result<Gray> {
    let first = images.first().ok_or_else(|| Error::Data("montage of no images".into()))?;
    if images.iter().any(|g| g.w != first.w || g.h != first.h) {
        return Err(Error::Data("montage images differ in size".into()));
    }
    let columns = columns.max(1);
    let rows = images.len().div_ceil(columns);
    let (cw, ch) = (first.w + 1, first.h + 1);
    let (w, h) = (columns * cw + 1, rows * ch + 1);
    let mut px = vec![128u8; w * h];
    for (k, g) in images.iter().enumerate() {
        let (ox, oy) = (1 + (k % columns) * cw, 1 + (k / columns) * ch);
        for y in 0..g.h {
            px[(oy + y) * w + ox..][..g.w].copy_from_slice(&g.px[y * g.w..(y + 1) * g.w]);
        }
    }
    Ok(Gray { w, h, px })
}

/// Colour image of equal-sized colour tiles; gutters are mid-grey.
pub fn montage_rgb(images: &[Rgb], columns: usize) -> Result<Rgb> {
    let planes: Vec<Vec<Gray>> = (0..3)
        .map(|k| images.iter().map(|g| Gray { w: g.w, h: g.h, px: g.px[k * g.w * g.h..(k + 1) * g.w * g.h].to_vec() }).collect())
        .collect();
    let mut px = Vec::new();
    let mut size = (0, 0);
    for plane in &planes {
        let m = montage(plane, columns)?;
        size = (m.w, m.h);
        px.extend(m.px);
    }
    Ok(Rgb { w: size.0, h: size.1, px })
}

/// Draws a one-pixel border of `colour` just inside the image edge.
pub fn frame(img: &mut Rgb, colour: [u8; 3]) {
    let (w, h) = (img.w, img.h);
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                for (k, &c) in colour.iter().enumerate() {
                    img.px[k * w * h + y * w + x] = c;
                }
            }
        }
    }
}

/// Blends class colours over `base` where `probs[c] >= 0.5`.
pub fn overlay(base: &Rgb, probs: &Tensor<f32>) -> Result<Rgb> {
    let plane = base.w * base.h;
    if probs.shape() != [4, base.h, base.w] {
        return Err(Error::Data(format!("overlay expects [4, {}, {}], got {:?}", base.h, base.w, probs.shape())));
    }
    let mut out = base.clone();
    for (c, colour) in CLASS_COLOURS.iter().enumerate() {
        for i in 0..plane {
            if probs.data()[c * plane + i] >= 0.5 {
                for k in 0..3 {
                    let v = &mut out.px[k * plane + i];
                    *v = ((*v as u16 + colour[k] as u16) / 2) as u8;
                }
            }
        }
    }
    Ok(out)
}
