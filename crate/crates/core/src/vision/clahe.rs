//! Contrast-limited adaptive histogram equalization on the LAB lightness channel.

use super::{quantize, ImageBuffer};
use crate::error::{Error, Result};

// D65 reference white
const XN: f64 = 0.950_47;
const YN: f64 = 1.0;
const ZN: f64 = 1.088_83;

fn srgb_to_linear(v: f64) -> f64 {
    let v = v / 255.0;
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    let s = if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.max(0.0).powf(1.0 / 2.4) - 0.055
    };
    s * 255.0
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D {
        t * t * t
    } else {
        3.0 * D * D * (t - 4.0 / 29.0)
    }
}

/// sRGB (0..=255) to CIE L*a*b* with L in [0, 100].
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|v| srgb_to_linear(v as f64));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / XN), lab_f(y / YN), lab_f(z / ZN));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab`]; values are unclamped sRGB in 0..=255 scale.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let (x, y, z) = (XN * lab_f_inv(fx), YN * lab_f_inv(fy), ZN * lab_f_inv(fz));
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let b = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [linear_to_srgb(r), linear_to_srgb(g), linear_to_srgb(b)]
}

/// Applies CLAHE to a single 8-bit plane.
fn clahe_plane(plane: &[u8], width: usize, height: usize, clip_limit: f64, grid: usize) -> Vec<u8> {
    let bounds = |n: usize, i: usize| (i * n / grid, (i + 1) * n / grid);

    let mut luts = vec![[0u8; 256]; grid * grid];
    for ty in 0..grid {
        for tx in 0..grid {
            let (x0, x1) = bounds(width, tx);
            let (y0, y1) = bounds(height, ty);
            let area = (x1 - x0) * (y1 - y0);
            let mut hist = [0usize; 256];
            for y in y0..y1 {
                for &v in &plane[y * width + x0..y * width + x1] {
                    hist[v as usize] += 1;
                }
            }
            let limit = ((clip_limit * area as f64 / 256.0) as usize).max(1);
            let mut clipped = 0;
            for h in hist.iter_mut() {
                if *h > limit {
                    clipped += *h - limit;
                    *h = limit;
                }
            }
            let batch = clipped / 256;
            let residual = clipped - batch * 256;
            for h in hist.iter_mut() {
                *h += batch;
            }
            if let Some(step) = 256usize.checked_div(residual) {
                let step = step.max(1);
                for i in (0..256).step_by(step).take(residual) {
                    hist[i] += 1;
                }
            }
            let scale = 255.0 / area as f64;
            let mut cdf = 0;
            let lut = &mut luts[ty * grid + tx];
            for (i, h) in hist.iter().enumerate() {
                cdf += h;
                lut[i] = quantize(cdf as f64 * scale);
            }
        }
    }

    let tile_w = width as f64 / grid as f64;
    let tile_h = height as f64 / grid as f64;
    let mut out = vec![0u8; plane.len()];
    for y in 0..height {
        let fy = (y as f64 + 0.5) / tile_h - 0.5;
        let ty0 = fy.floor().clamp(0.0, (grid - 1) as f64) as usize;
        let ty1 = (ty0 + 1).min(grid - 1);
        let ay = (fy - ty0 as f64).clamp(0.0, 1.0);
        for x in 0..width {
            let fx = (x as f64 + 0.5) / tile_w - 0.5;
            let tx0 = fx.floor().clamp(0.0, (grid - 1) as f64) as usize;
            let tx1 = (tx0 + 1).min(grid - 1);
            let ax = (fx - tx0 as f64).clamp(0.0, 1.0);
            let v = plane[y * width + x] as usize;
            let l = |ty: usize, tx: usize| luts[ty * grid + tx][v] as f64;
            let top = l(ty0, tx0) * (1.0 - ax) + l(ty0, tx1) * ax;
            let bottom = l(ty1, tx0) * (1.0 - ax) + l(ty1, tx1) * ax;
            out[y * width + x] = quantize(top * (1.0 - ay) + bottom * ay);
        }
    }
    out
}

/// CLAHE on lightness. RGB input is equalized on the L channel of LAB with the
/// a/b chroma channels carried through untouched; gray input is equalized directly.
pub fn enhance_brightness(img: &ImageBuffer, clip_limit: f64, tile_grid: u32) -> Result<ImageBuffer> {
    if !(clip_limit.is_finite() && clip_limit > 0.0) {
        return Err(Error::Parameter(format!("clip_limit must be > 0, got {clip_limit}")));
    }
    if tile_grid < 1 || tile_grid > img.width().min(img.height()) {
        return Err(Error::Parameter(format!(
            "tile_grid must be in 1..={}, got {tile_grid}",
            img.width().min(img.height())
        )));
    }
    let (w, h, grid) = (img.width() as usize, img.height() as usize, tile_grid as usize);
    if img.channels() == 1 {
        let data = clahe_plane(img.data(), w, h, clip_limit, grid);
        return ImageBuffer::new(img.width(), img.height(), 1, data);
    }

    let labs: Vec<[f64; 3]> = img
        .data()
        .chunks_exact(3)
        .map(|p| rgb_to_lab([p[0], p[1], p[2]]))
        .collect();
    let lightness: Vec<u8> = labs.iter().map(|lab| quantize(lab[0] * 255.0 / 100.0)).collect();
    let equalized = clahe_plane(&lightness, w, h, clip_limit, grid);
    let mut data = Vec::with_capacity(img.data().len());
    for (lab, l) in labs.iter().zip(equalized) {
        let rgb = lab_to_rgb([l as f64 * 100.0 / 255.0, lab[1], lab[2]]);
        data.extend(rgb.map(quantize));
    }
    ImageBuffer::new(img.width(), img.height(), 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_roundtrip() {
        for rgb in [[0u8, 0, 0], [255, 255, 255], [200, 30, 90], [12, 140, 250]] {
            let back = lab_to_rgb(rgb_to_lab(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c] as f64).abs() < 1e-3, "{rgb:?} -> {back:?}");
            }
        }
        let white = rgb_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
    }

    #[test]
    fn per_tile_uniform_histogram_is_nearly_fixed() {
        // 8x8 tiles of 16x16 pixels, each holding every value 0..=255 exactly once
        let img = ImageBuffer::from_fn(128, 128, 1, |x, y, _| {
            let (lx, ly) = (x % 16, y % 16);
            let tile = x / 16 + y / 16 * 8;
            ((ly * 16 + lx + tile * 37) % 256) as u8
        })
        .unwrap();
        let out = enhance_brightness(&img, 2.0, 8).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 2, "{a} -> {b}");
        }
    }

    #[test]
    fn constant_gray_stays_close() {
        // the clipped spike still maps through its own bin, so allow a few levels of drift
        let img = ImageBuffer::from_fn(128, 128, 1, |_, _, _| 128).unwrap();
        let out = enhance_brightness(&img, 2.0, 8).unwrap();
        assert!(out.data().iter().all(|&v| (v as i32 - 128).abs() <= 3));
    }

    #[test]
    fn low_contrast_range_widens() {
        let img = ImageBuffer::from_fn(64, 64, 1, |x, y, _| (100 + (x * 7 + y * 3) % 41) as u8).unwrap();
        let out = enhance_brightness(&img, 2.0, 8).unwrap();
        let range = |im: &ImageBuffer| {
            let (lo, hi) = im
                .data()
                .iter()
                .fold((255u8, 0u8), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi - lo
        };
        assert!(range(&out) > range(&img));
    }

    #[test]
    fn rgb_chroma_is_preserved() {
        let img = ImageBuffer::from_fn(32, 32, 3, |x, y, c| {
            let base = 110 + ((x + 2 * y) % 20) as u8;
            base + [8u8, 0, 4][c as usize]
        })
        .unwrap();
        let out = enhance_brightness(&img, 2.0, 4).unwrap();
        for (p, q) in img.data().chunks_exact(3).zip(out.data().chunks_exact(3)) {
            let a = rgb_to_lab([p[0], p[1], p[2]]);
            let b = rgb_to_lab([q[0], q[1], q[2]]);
            assert!((a[1] - b[1]).abs() < 2.0 && (a[2] - b[2]).abs() < 2.0, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let img = ImageBuffer::from_fn(16, 16, 1, |_, _, _| 0).unwrap();
        assert!(matches!(enhance_brightness(&img, 0.0, 8), Err(Error::Parameter(_))));
        assert!(matches!(enhance_brightness(&img, 2.0, 0), Err(Error::Parameter(_))));
        assert!(matches!(enhance_brightness(&img, 2.0, 17), Err(Error::Parameter(_))));
    }
}
