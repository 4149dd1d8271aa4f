//! General visual tools: classical enhancement operations that produce the
//! auxiliary observations attached to reasoning turns.

mod clahe;
mod denoise;
mod resample;
mod sharpen;
mod tools;

use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

pub use clahe::{enhance_brightness, lab_to_rgb, rgb_to_lab};
pub use denoise::denoise;
pub use resample::{resize_bilinear, super_resolve, zoom, RemoteSuperResolver};
pub use sharpen::{deblur, gaussian_blur};
pub use tools::{
    apply_tool, apply_tools, NormalizedRegion, ToolDefaults, ToolInvocation, ToolKind, ToolRequest, ToolRunner,
};

use crate::error::{Error, Result};
use crate::primitives::sha256_hex;

pub const MIN_SIDE: u32 = 8;

/// Row-major 8-bit image with one (gray) or three (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Input(format!("unsupported channel count {channels}")));
        }
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::Input(format!(
                "image {width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::Input(format!(
                "buffer holds {} samples, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, channels: u8, mut f: impl FnMut(u32, u32, u8) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        self.data[self.index(x, y, c)]
    }

    fn index(&self, x: u32, y: u32, c: u8) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize
    }

    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() + 9);
        bytes.extend_from_slice(&self.width.to_le_bytes());
        bytes.extend_from_slice(&self.height.to_le_bytes());
        bytes.push(self.channels);
        bytes.extend_from_slice(&self.data);
        sha256_hex(&bytes)
    }

    /// Decodes PNG or JPEG bytes. Gray images stay single-channel; everything else becomes RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Input(format!("undecodable image: {e}")))?;
        Self::from_dynamic(img)
    }

    pub fn from_dynamic(img: DynamicImage) -> Result<Self> {
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::new(w, h, 1, g.into_raw())
            }
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Self::new(w, h, 1, g.into_raw())
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::new(w, h, 3, rgb.into_raw())
            }
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        if self.channels == 1 {
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width, self.height, self.data.clone()).expect("validated buffer"),
            )
        } else {
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width, self.height, self.data.clone()).expect("validated buffer"),
            )
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Encoding(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn encode_jpeg(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, ImageFormat::Jpeg)
            .map_err(|e| Error::Encoding(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn full(img: &ImageBuffer) -> Self {
        Self {
            x: 0,
            y: 0,
            width: img.width(),
            height: img.height(),
        }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn fits(&self, img: &ImageBuffer) -> bool {
        self.width > 0
            && self.height > 0
            && self.x as u64 + self.width as u64 <= img.width() as u64
            && self.y as u64 + self.height as u64 <= img.height() as u64
    }
}

/// Float planes with unchecked dimensions, used between pipeline steps.
#[derive(Clone, Debug)]
pub(crate) struct Planes {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn from_image(img: &ImageBuffer) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: img.channels() as usize,
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn crop(img: &ImageBuffer, r: Rect) -> Self {
        let c = img.channels() as usize;
        let mut data = Vec::with_capacity(r.area() as usize * c);
        for y in r.y..r.y + r.height {
            let start = img.index(r.x, y, 0);
            let end = start + r.width as usize * c;
            data.extend(img.data()[start..end].iter().map(|&v| v as f64));
        }
        Self {
            width: r.width as usize,
            height: r.height as usize,
            channels: c,
            data,
        }
    }

    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[(yc * self.width + xc) * self.channels + c]
    }

    pub fn to_image(&self) -> Result<ImageBuffer> {
        let data = self.data.iter().map(|&v| quantize(v)).collect();
        ImageBuffer::new(self.width as u32, self.height as u32, self.channels as u8, data)
    }
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_buffers() {
        assert!(ImageBuffer::new(0, 0, 1, vec![]).is_err());
        assert!(ImageBuffer::new(7, 8, 1, vec![0; 56]).is_err());
        assert!(ImageBuffer::new(8, 8, 2, vec![0; 128]).is_err());
        assert!(ImageBuffer::new(8, 8, 3, vec![0; 10]).is_err());
        assert!(ImageBuffer::new(8, 8, 3, vec![0; 192]).is_ok());
    }

    #[test]
    fn png_roundtrip_preserves_pixels() {
        let img = ImageBuffer::from_fn(12, 9, 3, |x, y, c| (x * 20 + y * 3 + c as u32) as u8).unwrap();
        let back = ImageBuffer::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
        let gray = ImageBuffer::from_fn(10, 10, 1, |x, y, _| (x * y) as u8).unwrap();
        assert_eq!(ImageBuffer::decode(&gray.encode_png().unwrap()).unwrap(), gray);
    }

    #[test]
    fn truncated_payload_is_input_error() {
        let img = ImageBuffer::from_fn(16, 16, 3, |x, _, _| x as u8).unwrap();
        let png = img.encode_png().unwrap();
        assert!(matches!(
            ImageBuffer::decode(&png[..png.len() / 2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn jpeg_decodes_to_rgb() {
        let img = ImageBuffer::from_fn(16, 16, 3, |_, _, _| 128).unwrap();
        let back = ImageBuffer::decode(&img.encode_jpeg().unwrap()).unwrap();
        assert_eq!((back.width(), back.height(), back.channels()), (16, 16, 3));
    }
}
