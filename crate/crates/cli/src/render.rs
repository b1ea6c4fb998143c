//! PNG output: latent previews, attention grids, mask overlays, IoU plots.

use std::path::Path;

use dynprompt::attention::{min_max_normalize, upsample_nearest};
use dynprompt::backend::Image;
use dynprompt::eval::IoUCurve;
use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::CliResult;

pub const RED: Rgb<u8> = Rgb([255, 0, 0]);

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Black to red to yellow to white.
pub fn hot(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * 3.0;
    Rgb([to_u8(v), to_u8(v - 1.0), to_u8(v - 2.0)])
}

/// First three latent channels, each min-max scaled, upsampled by `scale`.
pub fn latent_preview(image: &Image, scale: usize) -> RgbImage {
    let (c, h, w) = image.data.dim();
    let planes: Vec<Array2<f64>> = (0..3)
        .map(|k| min_max_normalize(&image.data.index_axis(ndarray::Axis(0), k.min(c - 1)).to_owned()))
        .collect();
    RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let (i, j) = (y as usize / scale, x as usize / scale);
        Rgb([to_u8(planes[0][[i, j]]), to_u8(planes[1][[i, j]]), to_u8(planes[2][[i, j]])])
    })
}

/// `rows x cols` heat-map cells, each min-max scaled and upsampled by `scale`.
pub fn heat_grid(cells: &[Vec<Array2<f64>>], scale: usize) -> RgbImage {
    let res = cells.first().and_then(|r| r.first()).map_or(1, |m| m.nrows());
    let side = res * scale;
    let cols = cells.first().map_or(0, Vec::len);
    let mut img = RgbImage::new((cols * side) as u32, (cells.len() * side) as u32);
    for (r, row) in cells.iter().enumerate() {
        for (c, map) in row.iter().enumerate() {
            let norm = min_max_normalize(map);
            for y in 0..side {
                for x in 0..side {
                    img.put_pixel((c * side + x) as u32, (r * side + y) as u32, hot(norm[[y / scale, x / scale]]));
                }
            }
        }
    }
    img
}

/// Grey `base` with `mask` pixels painted pure red; both at the same grid,
/// upsampled by `scale`.
pub fn mask_overlay(base: &Array2<f64>, mask: &Array2<bool>, scale: usize) -> CliResult<RgbImage> {
    let res = mask.nrows();
    let base = if base.nrows() == res { base.clone() } else { upsample_nearest(base, res)? };
    let norm = min_max_normalize(&base);
    Ok(RgbImage::from_fn((res * scale) as u32, (res * scale) as u32, |x, y| {
        let (i, j) = (y as usize / scale, x as usize / scale);
        if mask[[i, j]] {
            RED
        } else {
            // grey never reaches pure red
            let g = to_u8(0.2 + 0.6 * norm[[i, j]]);
            Rgb([g, g, g])
        }
    }))
}

pub fn count_color(img: &RgbImage, color: Rgb<u8>) -> usize {
    img.pixels().filter(|&&p| p == color).count()
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// IoU against threshold, one colored polyline per curve, on a square canvas.
pub fn plot_curves(curves: &[IoUCurve], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let m = 16i64;
    let span = size as i64 - 2 * m;
    let at = |x: f64, y: f64| (m + (x * span as f64).round() as i64, size as i64 - m - (y * span as f64).round() as i64);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, at(0.0, 0.0), at(1.0, 0.0), axis);
    line(&mut img, at(0.0, 0.0), at(0.0, 1.0), axis);
    for (k, c) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for i in 1..c.thresholds.len() {
            line(&mut img, at(c.thresholds[i - 1], c.iou[i - 1]), at(c.thresholds[i], c.iou[i]), color);
        }
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads a PNG mask: any channel above half intensity counts as set.
pub fn read_mask(path: &Path) -> CliResult<Array2<bool>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| img.get_pixel(j as u32, i as u32)[0] > 127))
}

pub fn write_mask(mask: &Array2<bool>, path: &Path) -> CliResult<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]));
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
