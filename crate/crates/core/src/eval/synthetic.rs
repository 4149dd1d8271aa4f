//! Procedural inspection images and small on-disk fixture datasets.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vision::ImageBuffer;

pub const FIXTURE_SIZE: u32 = 64;

/// Marks painted onto a textured surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    None,
    /// A small low-contrast fleck that a careful inspector should accept.
    Benign,
    /// A faint spot only resolvable with a closer look.
    Subtle,
    /// An obvious dark blob.
    Blob,
    /// A thin dark line.
    Scratch,
}

/// A smooth tinted gradient with low-amplitude noise.
pub fn textured_image(rng: &mut ChaCha8Rng, size: u32, tint: [f64; 3], brightness: f64) -> ImageBuffer {
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise: Vec<f64> = (0..size * size).map(|_| rng.random_range(-6.0..6.0)).collect();
    ImageBuffer::from_fn(size, size, 3, |x, y, c| {
        let (fx, fy) = (x as f64 / size as f64, y as f64 / size as f64);
        let wave = 10.0 * (fx * 5.0 + fy * 3.0 + phase).sin();
        let v = brightness * tint[c as usize] + wave + 20.0 * fy + noise[(y * size + x) as usize];
        v.clamp(0.0, 255.0) as u8
    })
    .expect("valid dimensions")
}

fn paint_disc(img: &mut ImageBuffer, cx: f64, cy: f64, r: f64, depth: f64) {
    let (w, h) = (img.width(), img.height());
    let src = img.clone();
    *img = ImageBuffer::from_fn(w, h, 3, |x, y, c| {
        let v = src.get(x, y, c) as f64;
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        if d <= r {
            (v - depth).clamp(0.0, 255.0) as u8
        } else {
            v as u8
        }
    })
    .expect("same dimensions");
}

fn paint_line(img: &mut ImageBuffer, x0: f64, y0: f64, len: f64, angle: f64, depth: f64) {
    let (w, h) = (img.width(), img.height());
    let (dx, dy) = (angle.cos(), angle.sin());
    let src = img.clone();
    *img = ImageBuffer::from_fn(w, h, 3, |x, y, c| {
        let v = src.get(x, y, c) as f64;
        let (px, py) = (x as f64 - x0, y as f64 - y0);
        let along = px * dx + py * dy;
        let across = (px * dy - py * dx).abs();
        if (0.0..=len).contains(&along) && across <= 1.0 {
            (v - depth).clamp(0.0, 255.0) as u8
        } else {
            v as u8
        }
    })
    .expect("same dimensions");
}

pub fn apply_mark(img: &mut ImageBuffer, rng: &mut ChaCha8Rng, mark: Mark) {
    let s = img.width().min(img.height()) as f64;
    let mut centre = || (rng.random_range(0.25..0.75) * s, rng.random_range(0.25..0.75) * s);
    match mark {
        Mark::None => {}
        Mark::Benign => {
            let (cx, cy) = centre();
            paint_disc(img, cx, cy, 2.6, 95.0);
        }
        Mark::Subtle => {
            let (cx, cy) = centre();
            paint_disc(img, cx, cy, 2.15, 95.0);
        }
        Mark::Blob => {
            let (cx, cy) = centre();
            paint_disc(img, cx, cy, 4.5, 110.0);
        }
        Mark::Scratch => {
            let (x0, y0) = centre();
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            paint_line(
                img,
                x0 - 10.0 * angle.cos(),
                y0 - 10.0 * angle.sin(),
                26.0,
                angle,
                110.0,
            );
        }
    }
}

/// Layout of one fixture class.
#[derive(Clone, Debug)]
pub struct FixtureClass {
    pub name: String,
    pub tint: [f64; 3],
    pub brightness: f64,
    pub train: Vec<Mark>,
    pub test_good: Vec<Mark>,
    /// (defect directory, marks)
    pub test_defects: Vec<(String, Vec<Mark>)>,
}

/// The two-class, twenty-test-image dataset used by the end-to-end checks.
pub fn default_fixture() -> Vec<FixtureClass> {
    vec![
        FixtureClass {
            name: "tile".into(),
            tint: [0.85, 0.8, 0.7],
            brightness: 150.0,
            train: vec![Mark::Benign, Mark::Benign, Mark::None, Mark::Benign],
            test_good: vec![Mark::None, Mark::None, Mark::Benign, Mark::None, Mark::Benign],
            test_defects: vec![
                ("crack".into(), vec![Mark::Scratch, Mark::Subtle]),
                ("stain".into(), vec![Mark::Blob, Mark::Blob, Mark::Subtle]),
            ],
        },
        FixtureClass {
            name: "capsule".into(),
            tint: [0.7, 0.75, 0.85],
            brightness: 155.0,
            train: vec![Mark::None, Mark::Benign, Mark::Benign, Mark::None],
            test_good: vec![Mark::None, Mark::Benign, Mark::None, Mark::None, Mark::Benign],
            test_defects: vec![
                ("scratch".into(), vec![Mark::Scratch, Mark::Scratch]),
                ("spot".into(), vec![Mark::Subtle, Mark::Blob, Mark::Subtle]),
            ],
        },
    ]
}

/// Writes `classes` as an mvtec_dirs tree of PNGs under `root`.
pub fn write_fixture(root: &Path, classes: &[FixtureClass], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in classes {
        let mut write = |dir: &Path, marks: &[Mark]| -> Result<()> {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for (i, mark) in marks.iter().enumerate() {
                let mut img = textured_image(&mut rng, FIXTURE_SIZE, class.tint, class.brightness);
                apply_mark(&mut img, &mut rng, *mark);
                let path = dir.join(format!("{i:03}.png"));
                fs::write(&path, img.encode_png()?).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        };
        let base = root.join(&class.name);
        write(&base.join("train/good"), &class.train)?;
        write(&base.join("test/good"), &class.test_good)?;
        for (defect, marks) in &class.test_defects {
            write(&base.join("test").join(defect), marks)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::simulated::{inspect, ANOMALOUS_FRACTION, SUSPICIOUS_FRACTION};

    fn fraction(mark: Mark, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = default_fixture();
        let class = &classes[seed as usize % classes.len()];
        let mut img = textured_image(&mut rng, FIXTURE_SIZE, class.tint, class.brightness);
        apply_mark(&mut img, &mut rng, mark);
        inspect(&img).defect_fraction
    }

    #[test]
    fn marks_land_in_their_intended_bands() {
        let mid = 0.5 * (SUSPICIOUS_FRACTION + ANOMALOUS_FRACTION);
        for seed in 0..80 {
            assert_eq!(fraction(Mark::None, seed), 0.0, "seed {seed}");
            let b = fraction(Mark::Benign, seed);
            assert!(
                (ANOMALOUS_FRACTION..2.0 * ANOMALOUS_FRACTION).contains(&b),
                "benign {b}"
            );
            let s = fraction(Mark::Subtle, seed);
            assert!((mid..ANOMALOUS_FRACTION).contains(&s), "subtle {s}");
            assert!(fraction(Mark::Blob, seed) >= 2.0 * ANOMALOUS_FRACTION);
            assert!(fraction(Mark::Scratch, seed) >= 2.0 * ANOMALOUS_FRACTION);
        }
    }
}
