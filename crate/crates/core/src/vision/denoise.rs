//! Non-local means denoising.
//!
//! Patch distances for every search offset are evaluated with a summed-area
//! table, so the cost is `O(search² · pixels)` rather than
//! `O(search² · patch² · pixels)`.

use super::{ImageBuffer, Planes};
use crate::error::{Error, Result};

const PATCH_RADIUS: isize = 3;
const SEARCH_RADIUS: isize = 10;

/// Non-local means with a 7x7 comparison patch and a 21x21 search window.
/// `strength` is the filter parameter `h`; larger values smooth more.
pub fn denoise(img: &ImageBuffer, strength: f64) -> Result<ImageBuffer> {
    if !(strength.is_finite() && strength > 0.0) {
        return Err(Error::Parameter(format!(
            "denoise strength must be > 0, got {strength}"
        )));
    }
    let src = Planes::from_image(img);
    let (w, h, ch) = (src.width as isize, src.height as isize, src.channels);
    let inv_h2 = 1.0 / (strength * strength);
    let patch_area = ((2 * PATCH_RADIUS + 1) * (2 * PATCH_RADIUS + 1)) as f64;

    // distance maps cover the image extended by the patch radius on each side
    let ew = (w + 2 * PATCH_RADIUS) as usize;
    let eh = (h + 2 * PATCH_RADIUS) as usize;
    let mut integral = vec![0.0f64; (ew + 1) * (eh + 1)];
    let mut num = vec![0.0f64; src.data.len()];
    let mut den = vec![0.0f64; (w * h) as usize];

    for dy in -SEARCH_RADIUS..=SEARCH_RADIUS {
        for dx in -SEARCH_RADIUS..=SEARCH_RADIUS {
            for ey in 0..eh {
                let y = ey as isize - PATCH_RADIUS;
                let mut row_sum = 0.0;
                for ex in 0..ew {
                    let x = ex as isize - PATCH_RADIUS;
                    let mut d = 0.0;
                    for c in 0..ch {
                        let diff = src.at_clamped(x, y, c) - src.at_clamped(x + dx, y + dy, c);
                        d += diff * diff;
                    }
                    row_sum += d / ch as f64;
                    integral[(ey + 1) * (ew + 1) + ex + 1] = integral[ey * (ew + 1) + ex + 1] + row_sum;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    // patch centred at (x, y) spans extended coords [x, x + 2P]
                    let (x0, y0) = (x as usize, y as usize);
                    let (x1, y1) = (x0 + 2 * PATCH_RADIUS as usize + 1, y0 + 2 * PATCH_RADIUS as usize + 1);
                    let s = integral[y1 * (ew + 1) + x1] - integral[y0 * (ew + 1) + x1] - integral[y1 * (ew + 1) + x0]
                        + integral[y0 * (ew + 1) + x0];
                    let dist = (s / patch_area).max(0.0);
                    let weight = (-dist * inv_h2).exp();
                    let p = (y * w + x) as usize;
                    den[p] += weight;
                    for c in 0..ch {
                        num[p * ch + c] += weight * src.at_clamped(x + dx, y + dy, c);
                    }
                }
            }
        }
    }

    let mut out = src.clone();
    for p in 0..den.len() {
        for c in 0..ch {
            out.data[p * ch + c] = num[p * ch + c] / den[p];
        }
    }
    out.to_image()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn variance(img: &ImageBuffer, x0: u32, y0: u32, size: u32) -> f64 {
        let vals: Vec<f64> = (y0..y0 + size)
            .flat_map(|y| (x0..x0 + size).map(move |x| (x, y)))
            .map(|(x, y)| img.get(x, y, 0) as f64)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        let img = ImageBuffer::from_fn(16, 12, 3, |_, _, c| 90 + c * 40).unwrap();
        let out = denoise(&img, 10.0).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn noise_variance_drops_on_flat_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = ImageBuffer::from_fn(32, 32, 1, |_, _, _| {
            (128.0 + rng.random_range(-20.0..20.0f64)).round() as u8
        })
        .unwrap();
        let before = variance(&img, 8, 8, 16);
        let after = variance(&denoise(&img, 10.0).unwrap(), 8, 8, 16);
        assert!(after < before, "variance {before} -> {after}");
    }

    #[test]
    fn rejects_bad_strength() {
        let img = ImageBuffer::from_fn(8, 8, 1, |_, _, _| 0).unwrap();
        assert!(matches!(denoise(&img, 0.0), Err(Error::Parameter(_))));
        assert!(denoise(&img, f64::NAN).is_err());
    }

    #[test]
    fn deterministic() {
        let img = ImageBuffer::from_fn(16, 16, 3, |x, y, c| ((x * 13 + y * 7 + c as u32 * 31) % 256) as u8).unwrap();
        assert_eq!(denoise(&img, 10.0).unwrap(), denoise(&img, 10.0).unwrap());
    }
}
