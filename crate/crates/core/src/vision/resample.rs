use std::time::Duration;

use log::warn;

use super::{ImageBuffer, Planes, Rect, MIN_SIDE};
use crate::error::{Error, Result};
use crate::providers::HttpTransport;

fn bilinear(src: &Planes, new_w: usize, new_h: usize) -> Planes {
    let sx = src.width as f64 / new_w as f64;
    let sy = src.height as f64 / new_h as f64;
    let ch = src.channels;
    let mut data = Vec::with_capacity(new_w * new_h * ch);
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = fy.floor() as isize;
        let ay = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = fx.floor() as isize;
            let ax = fx - x0 as f64;
            for c in 0..ch {
                let top = src.at_clamped(x0, y0, c) * (1.0 - ax) + src.at_clamped(x0 + 1, y0, c) * ax;
                let bot = src.at_clamped(x0, y0 + 1, c) * (1.0 - ax) + src.at_clamped(x0 + 1, y0 + 1, c) * ax;
                data.push(top * (1.0 - ay) + bot * ay);
            }
        }
    }
    Planes {
        width: new_w,
        height: new_h,
        channels: ch,
        data,
    }
}

pub fn resize_bilinear(img: &ImageBuffer, width: u32, height: u32) -> Result<ImageBuffer> {
    if width == img.width() && height == img.height() {
        return Ok(img.clone());
    }
    bilinear(&Planes::from_image(img), width as usize, height as usize).to_image()
}

/// Crops `region` and rescales it bilinearly so the long side equals
/// `target_long_side`, preserving aspect. The short side never drops below
/// the minimum image side.
pub fn zoom(img: &ImageBuffer, region: Rect, target_long_side: u32) -> Result<ImageBuffer> {
    if !region.fits(img) {
        return Err(Error::Input(format!(
            "zoom region {region:?} lies outside the {}x{} image",
            img.width(),
            img.height()
        )));
    }
    if region.area() < 64 {
        return Err(Error::Input(format!(
            "zoom region area {} is below 64 px",
            region.area()
        )));
    }
    if target_long_side < MIN_SIDE {
        return Err(Error::Parameter(format!("target_long_side must be >= {MIN_SIDE}")));
    }
    let crop = Planes::crop(img, region);
    let long = region.width.max(region.height) as f64;
    let scale = target_long_side as f64 / long;
    let (w, h) = if region.width >= region.height {
        let h = (region.height as f64 * scale).round() as u32;
        (target_long_side, h.max(MIN_SIDE))
    } else {
        let w = (region.width as f64 * scale).round() as u32;
        (w.max(MIN_SIDE), target_long_side)
    };
    if w as usize == crop.width && h as usize == crop.height {
        return crop.to_image();
    }
    bilinear(&crop, w as usize, h as usize).to_image()
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn check_factor(factor: u32) -> Result<()> {
    if factor != 2 && factor != 4 {
        return Err(Error::Parameter(format!(
            "super-resolution factor must be 2 or 4, got {factor}"
        )));
    }
    Ok(())
}

/// Deterministic bicubic upscaling by 2 or 4.
pub fn super_resolve(img: &ImageBuffer, factor: u32) -> Result<ImageBuffer> {
    check_factor(factor)?;
    let src = Planes::from_image(img);
    let (nw, nh) = (src.width * factor as usize, src.height * factor as usize);
    let inv = 1.0 / factor as f64;
    let ch = src.channels;
    let mut data = Vec::with_capacity(nw * nh * ch);
    for y in 0..nh {
        let fy = (y as f64 + 0.5) * inv - 0.5;
        let iy = fy.floor() as isize;
        let wy: Vec<f64> = (-1..=2).map(|k| cubic(fy - (iy + k) as f64)).collect();
        for x in 0..nw {
            let fx = (x as f64 + 0.5) * inv - 0.5;
            let ix = fx.floor() as isize;
            let wx: Vec<f64> = (-1..=2).map(|k| cubic(fx - (ix + k) as f64)).collect();
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, wyj) in wy.iter().enumerate() {
                    for (i, wxi) in wx.iter().enumerate() {
                        acc += wyj * wxi * src.at_clamped(ix + i as isize - 1, iy + j as isize - 1, c);
                    }
                }
                data.push(acc);
            }
        }
    }
    Planes {
        width: nw,
        height: nh,
        channels: ch,
        data,
    }
    .to_image()
}

/// External super-resolution service: POSTs PNG bytes, expects image bytes back.
/// Falls back to bicubic upscaling when the service fails or returns the wrong size.
pub struct RemoteSuperResolver {
    transport: HttpTransport,
    path: String,
}

impl RemoteSuperResolver {
    pub fn new(url: &str) -> Self {
        let (base, path) = match url.find("://").and_then(|i| url[i + 3..].find('/').map(|j| i + 3 + j)) {
            Some(split) => (&url[..split], &url[split..]),
            None => (url, "/"),
        };
        Self {
            transport: HttpTransport::new(base, None, Duration::from_secs(120)),
            path: path.to_string(),
        }
    }

    pub fn resolve(&self, img: &ImageBuffer, factor: u32) -> Result<ImageBuffer> {
        check_factor(factor)?;
        let path = format!("{}?scale={factor}", self.path);
        let remote = self
            .transport
            .post_bytes(&path, "image/png", &img.encode_png()?)
            .map_err(|e| Error::Input(e.to_string()))
            .and_then(|bytes| ImageBuffer::decode(&bytes));
        match remote {
            Ok(out) if out.width() == img.width() * factor && out.height() == img.height() * factor => {
                if out.channels() == img.channels() {
                    Ok(out)
                } else {
                    warn!("super-resolution service changed channel count; using bicubic");
                    super_resolve(img, factor)
                }
            }
            Ok(out) => {
                warn!(
                    "super-resolution service returned {}x{}, expected x{factor}; using bicubic",
                    out.width(),
                    out.height()
                );
                super_resolve(img, factor)
            }
            Err(e) => {
                warn!("super-resolution service failed ({e}); using bicubic");
                super_resolve(img, factor)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_region_at_native_size_is_identity() {
        let img = ImageBuffer::from_fn(40, 30, 3, |x, y, c| (x * 5 + y + c as u32) as u8).unwrap();
        assert_eq!(zoom(&img, Rect::full(&img), 40).unwrap(), img);
    }

    #[test]
    fn crop_semantics() {
        let img = ImageBuffer::from_fn(32, 16, 1, |x, _, _| if x < 16 { 0 } else { 255 }).unwrap();
        let left = Rect {
            x: 0,
            y: 0,
            width: 16,
            height: 16,
        };
        let out = zoom(&img, left, 64).unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
        assert!(out.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn dimension_arithmetic() {
        let img = ImageBuffer::from_fn(50, 50, 3, |_, _, _| 7).unwrap();
        let r = Rect {
            x: 5,
            y: 5,
            width: 10,
            height: 10,
        };
        let out = zoom(&img, r, 100).unwrap();
        assert_eq!((out.width(), out.height()), (100, 100));
        let wide = Rect {
            x: 0,
            y: 0,
            width: 40,
            height: 10,
        };
        let out = zoom(&img, wide, 80).unwrap();
        assert_eq!((out.width(), out.height()), (80, 20));
    }

    #[test]
    fn out_of_bounds_region_is_input_error() {
        let img = ImageBuffer::from_fn(20, 20, 1, |_, _, _| 7).unwrap();
        let r = Rect {
            x: 15,
            y: 0,
            width: 10,
            height: 10,
        };
        assert!(matches!(zoom(&img, r, 64), Err(Error::Input(_))));
        let tiny = Rect {
            x: 0,
            y: 0,
            width: 7,
            height: 9,
        };
        assert!(matches!(zoom(&img, tiny, 64), Err(Error::Input(_))));
    }

    #[test]
    fn super_resolve_dimensions_and_factor_check() {
        let img = ImageBuffer::from_fn(32, 32, 3, |x, y, _| (x ^ y) as u8).unwrap();
        let out = super_resolve(&img, 2).unwrap();
        assert_eq!((out.width(), out.height(), out.channels()), (64, 64, 3));
        assert_eq!(super_resolve(&img, 4).unwrap().width(), 128);
        assert!(matches!(super_resolve(&img, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn bicubic_preserves_linear_ramp() {
        let slope = 4.0;
        let img = ImageBuffer::from_fn(32, 16, 1, |x, _, _| (x as f64 * slope) as u8).unwrap();
        let out = super_resolve(&img, 2).unwrap();
        for y in 0..out.height() {
            for x in 0..out.width() {
                let src_x = (x as f64 + 0.5) / 2.0 - 0.5;
                let expected = (src_x * slope).clamp(0.0, 31.0 * slope);
                let got = out.get(x, y, 0) as f64;
                assert!((got - expected).abs() <= 2.0, "x={x}: {got} vs {expected}");
            }
        }
    }
}
