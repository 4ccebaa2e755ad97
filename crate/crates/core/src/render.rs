//! Grayscale and RGB PNG output for frame sheets, heat maps and line plots.
//! Everything here is pure integer rasterisation, so output bytes depend
//! only on the input values.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save<P: image::PixelWithColorType<Subpixel = u8>>(img: &image::ImageBuffer<P, Vec<u8>>, path: &Path) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// A grid of `h x w` frames, one `Vec` of frames per row. Rows may have
/// different lengths; gaps are left black. Cells are separated by `pad`
/// pixels of mid gray.
pub fn frame_sheet(rows: &[Vec<&[f64]>], h: usize, w: usize, pad: usize) -> GrayImage {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * (w + pad) + pad;
    let height = rows.len() * (h + pad) + pad;
    let mut img = GrayImage::from_pixel(width.max(1) as u32, height.max(1) as u32, Luma([128]));
    for (r, row) in rows.iter().enumerate() {
        for c in 0..cols {
            let (x0, y0) = (pad + c * (w + pad), pad + r * (h + pad));
            for y in 0..h {
                for x in 0..w {
                    let v = row.get(c).map_or(0, |f| to_u8(f[y * w + x]));
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Luma([v]));
                }
            }
        }
    }
    img
}

pub fn save_frame_sheet(path: &Path, rows: &[Vec<&[f64]>], h: usize, w: usize) -> Result<()> {
    save(&frame_sheet(rows, h, w, 1), path)
}

/// Heat map of a row-major `rows x cols` grid, each cell drawn as a
/// `cell x cell` block, scaled so the largest value is white.
pub fn heatmap(values: &[f64], rows: usize, cols: usize, cell: usize) -> GrayImage {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut img = GrayImage::new((cols * cell) as u32, (rows * cell) as u32);
    for r in 0..rows {
        for c in 0..cols {
            let v = if max > 0.0 { values[r * cols + c] / max } else { 0.0 };
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel((c * cell + dx) as u32, (r * cell + dy) as u32, Luma([to_u8(v)]));
                }
            }
        }
    }
    img
}

pub fn save_heatmap(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    save(&heatmap(values, rows, cols, 16), path)
}

/// Line plot of `mean` with a `±band` envelope, plus vertical red markers
/// at the given x indices.
pub fn line_plot(mean: &[f64], band: &[f64], markers: &[usize]) -> RgbImage {
    const W: usize = 640;
    const H: usize = 240;
    const M: usize = 10;
    let mut img = RgbImage::from_pixel(W as u32, H as u32, Rgb([255, 255, 255]));
    let n = mean.len();
    if n == 0 {
        return img;
    }
    let hi = mean.iter().zip(band).map(|(m, b)| m + b).fold(f64::MIN, f64::max);
    let lo = mean.iter().zip(band).map(|(m, b)| m - b).fold(f64::MAX, f64::min).min(0.0);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |i: usize| M + i * (W - 2 * M - 1) / n.saturating_sub(1).max(1);
    let py = |v: f64| {
        let f = ((v - lo) / span).clamp(0.0, 1.0);
        H - M - 1 - (f * (H - 2 * M - 1) as f64).round() as usize
    };
    for &t in markers.iter().filter(|&&t| t < n) {
        for y in M..H - M {
            img.put_pixel(px(t) as u32, y as u32, Rgb([220, 60, 60]));
        }
    }
    for i in 0..n {
        let (top, bottom) = (py(mean[i] + band[i]), py(mean[i] - band[i]));
        for y in top..=bottom {
            img.put_pixel(px(i) as u32, y as u32, Rgb([170, 190, 230]));
        }
    }
    for i in 0..n {
        let (x0, y0) = (px(i), py(mean[i]));
        let (x1, y1) = if i + 1 < n { (px(i + 1), py(mean[i + 1])) } else { (x0, y0) };
        let steps = (x1 - x0).max(y0.abs_diff(y1)).max(1);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s / steps;
            let y = (y0 as isize + (y1 as isize - y0 as isize) * s as isize / steps as isize) as usize;
            img.put_pixel(x as u32, y as u32, Rgb([20, 40, 140]));
        }
    }
    img
}

pub fn save_line_plot(path: &Path, mean: &[f64], band: &[f64], markers: &[usize]) -> Result<()> {
    save(&line_plot(mean, band, markers), path)
}
