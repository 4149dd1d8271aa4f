//! Criterion 8: visual tool contracts on a synthetic suite plus the
//! behavioural checks for denoise, unsharp masking and CLAHE.

use ad_agent_core::vision::{apply_tool, rgb_to_lab, ImageBuffer, Rect, ToolInvocation, ToolKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SUITE: usize = 50;

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    sigma * rng.sample::<f64, _>(StandardNormal)
}

fn synthetic(rng: &mut ChaCha8Rng, i: usize) -> ImageBuffer {
    let w = rng.random_range(8..=96);
    let h = rng.random_range(8..=96);
    let channels = if i.is_multiple_of(5) { 1 } else { 3 };
    let base: [f64; 3] = [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ];
    let sigma = rng.random_range(0.0..40.0);
    let pattern = i % 4;
    let mut r = ChaCha8Rng::seed_from_u64(i as u64);
    ImageBuffer::from_fn(w, h, channels, |x, y, c| {
        let v = match pattern {
            0 => base[c as usize],
            1 => base[c as usize] * x as f64 / w as f64 + 40.0 * y as f64 / h as f64,
            2 => {
                if (x / 6 + y / 6) % 2 == 0 {
                    30.0
                } else {
                    220.0
                }
            }
            _ => base[c as usize] + 90.0 * ((x as f64 / 5.0).sin() * (y as f64 / 7.0).cos()),
        };
        (v + noise(&mut r, sigma)).round().clamp(0.0, 255.0) as u8
    })
    .unwrap()
}

fn expected_dims(img: &ImageBuffer, inv: &ToolInvocation) -> (u32, u32) {
    match inv.tool {
        ToolKind::Zoom => {
            let r = inv.region.unwrap();
            let target = inv.params["target_long_side"] as u32;
            let scale = target as f64 / r.width.max(r.height) as f64;
            let short = |s: u32| ((s as f64 * scale).round() as u32).max(8);
            if r.width >= r.height {
                (target, short(r.height))
            } else {
                (short(r.width), target)
            }
        }
        ToolKind::SuperResolution => {
            let f = inv.params["factor"] as u32;
            (img.width() * f, img.height() * f)
        }
        _ => (img.width(), img.height()),
    }
}

fn invocations(rng: &mut ChaCha8Rng, img: &ImageBuffer) -> Vec<ToolInvocation> {
    let (w, h) = (img.width(), img.height());
    let rw = rng.random_range(8..=w);
    let rh = rng.random_range(8..=h);
    let region = Rect {
        x: rng.random_range(0..=w - rw),
        y: rng.random_range(0..=h - rh),
        width: rw,
        height: rh,
    };
    vec![
        ToolInvocation::simple(ToolKind::Denoise).with_param("strength", rng.random_range(1.0..30.0)),
        ToolInvocation::simple(ToolKind::Deblur)
            .with_param("radius", rng.random_range(0.5..4.0))
            .with_param("amount", rng.random_range(0.2..2.5)),
        ToolInvocation::simple(ToolKind::Brightness)
            .with_param("clip_limit", rng.random_range(0.5..4.0))
            .with_param("tile_grid", rng.random_range(1..=8) as f64),
        ToolInvocation::zoom(region).with_param("target_long_side", [16.0, 64.0, 128.0, 512.0][rng.random_range(0..4)]),
        ToolInvocation::simple(ToolKind::SuperResolution).with_param("factor", [2.0, 4.0][rng.random_range(0..2)]),
    ]
}

fn contracts() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..SUITE {
        let img = synthetic(&mut rng, i);
        let pristine = img.clone();
        for inv in invocations(&mut rng, &img) {
            let what = format!(
                "image {i} ({}x{}x{}) {}",
                img.width(),
                img.height(),
                img.channels(),
                inv.tool
            );
            let out = apply_tool(&img, &inv).map_err(|e| format!("{what}: {e}"))?;
            let (ew, eh) = expected_dims(&img, &inv);
            ensure!(
                (out.width(), out.height()) == (ew, eh),
                "{what}: {}x{} instead of {ew}x{eh}",
                out.width(),
                out.height()
            );
            ensure!(out.channels() == img.channels(), "{what}: channel count changed");
            ensure!(
                out.data().len() == (ew * eh * img.channels() as u32) as usize,
                "{what}: buffer length mismatch"
            );
            let again = apply_tool(&img, &inv).map_err(|e| format!("{what}: {e}"))?;
            ensure!(again.data() == out.data(), "{what}: output not deterministic");
            ensure!(img == pristine, "{what}: input mutated");
        }
    }
    Ok(())
}

fn flat_variance(img: &ImageBuffer, margin: u32) -> f64 {
    let vals: Vec<f64> = (margin..img.height() - margin)
        .flat_map(|y| (margin..img.width() - margin).map(move |x| (x, y)))
        .map(|(x, y)| img.get(x, y, 0) as f64)
        .collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64
}

fn denoise_reduces_variance() -> Result<(), String> {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let img = ImageBuffer::from_fn(48, 48, 1, |_, _, _| {
            (128.0 + noise(&mut rng, 12.0)).round().clamp(0.0, 255.0) as u8
        })
        .unwrap();
        let out = apply_tool(&img, &ToolInvocation::simple(ToolKind::Denoise)).map_err(|e| e.to_string())?;
        let (before, after) = (flat_variance(&img, 4), flat_variance(&out, 4));
        ensure!(
            after < before,
            "denoise seed {seed}: variance {before:.2} -> {after:.2}"
        );
    }
    Ok(())
}

fn unsharp_gains_edge() -> Result<(), String> {
    for (lo, hi) in [(60u8, 180u8), (100, 140), (20, 90)] {
        let img = ImageBuffer::from_fn(32, 32, 3, |x, _, _| if x < 16 { lo } else { hi }).unwrap();
        let out = apply_tool(&img, &ToolInvocation::simple(ToolKind::Deblur)).map_err(|e| e.to_string())?;
        let grad = |im: &ImageBuffer| {
            (0..32)
                .map(|y| im.get(16, y, 0) as i32 - im.get(15, y, 0) as i32)
                .min()
                .unwrap()
        };
        ensure!(
            grad(&out) > grad(&img),
            "edge {lo}/{hi}: gradient {} -> {}",
            grad(&img),
            grad(&out)
        );
    }
    Ok(())
}

fn luminance_range(img: &ImageBuffer) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let l = if img.channels() == 1 {
                img.get(x, y, 0) as f64
            } else {
                rgb_to_lab([img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)])[0]
            };
            lo = lo.min(l);
            hi = hi.max(l);
        }
    }
    (lo, hi)
}

fn clahe_widens_range() -> Result<(), String> {
    for channels in [1u8, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + channels as u64);
        let img = ImageBuffer::from_fn(64, 64, channels, |x, y, c| {
            let v = 100.0 + 40.0 * (x + y) as f64 / 126.0 + noise(&mut rng, 2.0) + c as f64;
            v.round().clamp(100.0, 140.0) as u8
        })
        .unwrap();
        let out = apply_tool(&img, &ToolInvocation::simple(ToolKind::Brightness)).map_err(|e| e.to_string())?;
        let (a0, a1) = luminance_range(&img);
        let (b0, b1) = luminance_range(&out);
        ensure!(
            b1 - b0 > a1 - a0,
            "{channels}-channel: range {:.1} -> {:.1}",
            a1 - a0,
            b1 - b0
        );
    }
    Ok(())
}

pub fn check() -> Result<(), String> {
    contracts()?;
    denoise_reduces_variance()?;
    unsharp_gains_edge()?;
    clahe_widens_range()
}
