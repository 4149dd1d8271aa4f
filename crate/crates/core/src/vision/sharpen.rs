use super::{ImageBuffer, Planes};
use crate::error::{Error, Result};

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with replicated borders, kept in floating point.
pub(crate) fn blur_planes(src: &Planes, sigma: f64) -> Planes {
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let (w, h, ch) = (src.width, src.height, src.channels);

    let mut horiz = src.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * src.at_clamped(x as isize + i as isize - half, y as isize, c))
                    .sum();
                horiz.data[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = horiz.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * horiz.at_clamped(x as isize, y as isize + i as isize - half, c))
                    .sum();
                out.data[(y * w + x) * ch + c] = acc;
            }
        }
    }
    out
}

pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Parameter(format!("blur sigma must be > 0, got {sigma}")));
    }
    blur_planes(&Planes::from_image(img), sigma).to_image()
}

/// Unsharp masking: `img + amount * (img - blur(img, radius))`, clamped to [0, 255].
pub fn deblur(img: &ImageBuffer, radius: f64, amount: f64) -> Result<ImageBuffer> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Parameter(format!("deblur radius must be > 0, got {radius}")));
    }
    if !(amount.is_finite() && amount > 0.0) {
        return Err(Error::Parameter(format!("deblur amount must be > 0, got {amount}")));
    }
    let src = Planes::from_image(img);
    let blurred = blur_planes(&src, radius);
    let mut out = src.clone();
    for (o, (s, b)) in out.data.iter_mut().zip(src.data.iter().zip(&blurred.data)) {
        *o = s + amount * (s - b);
    }
    out.to_image()
}
