use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{deblur, denoise, enhance_brightness, super_resolve, zoom, ImageBuffer, Rect, RemoteSuperResolver};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Denoise,
    Deblur,
    Brightness,
    Zoom,
    SuperResolution,
}

impl ToolKind {
    pub const ALL: [ToolKind; 5] = [
        ToolKind::Denoise,
        ToolKind::Deblur,
        ToolKind::Brightness,
        ToolKind::Zoom,
        ToolKind::SuperResolution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolKind::Denoise => "denoise",
            ToolKind::Deblur => "deblur",
            ToolKind::Brightness => "brightness",
            ToolKind::Zoom => "zoom",
            ToolKind::SuperResolution => "super_resolution",
        }
    }

    fn param_names(self) -> &'static [&'static str] {
        match self {
            ToolKind::Denoise => &["strength"],
            ToolKind::Deblur => &["radius", "amount"],
            ToolKind::Brightness => &["clip_limit", "tile_grid"],
            ToolKind::Zoom => &["target_long_side"],
            ToolKind::SuperResolution => &["factor"],
        }
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "denoise" => Ok(ToolKind::Denoise),
            "deblur" => Ok(ToolKind::Deblur),
            "brightness" => Ok(ToolKind::Brightness),
            "zoom" => Ok(ToolKind::Zoom),
            "super_resolution" => Ok(ToolKind::SuperResolution),
            other => Err(Error::ToolDispatch(format!("unknown tool `{other}`"))),
        }
    }
}

/// Region expressed as fractions of the image size, as the model sees it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRegion {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

/// A tool request as it appears in plan and reflection replies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub tool: String,
    #[serde(default)]
    pub region: Option<NormalizedRegion>,
}

impl ToolRequest {
    pub fn new(tool: impl Into<String>) -> Self {
        Self {
            tool: tool.into(),
            region: None,
        }
    }

    /// Resolves the request against a concrete image. Unknown tool names and
    /// zoom requests without a usable region fail with a dispatch error.
    pub fn resolve(&self, width: u32, height: u32) -> Result<ToolInvocation> {
        let tool: ToolKind = self.tool.parse()?;
        let region = match (tool, self.region) {
            (ToolKind::Zoom, Some(r)) => Some(to_pixels(r, width, height)?),
            (ToolKind::Zoom, None) => return Err(Error::ToolDispatch("zoom requires a region".into())),
            _ => None,
        };
        ToolInvocation::new(tool, BTreeMap::new(), region)
    }
}

fn to_pixels(r: NormalizedRegion, width: u32, height: u32) -> Result<Rect> {
    let vals = [r.x, r.y, r.width, r.height];
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::ToolDispatch(format!("zoom region {r:?} is not within [0, 1]")));
    }
    let x = ((r.x * width as f64).floor() as u32).min(width - 1);
    let y = ((r.y * height as f64).floor() as u32).min(height - 1);
    let w = ((r.width * width as f64).round() as u32).clamp(1, width - x);
    let h = ((r.height * height as f64).round() as u32).clamp(1, height - y);
    Ok(Rect {
        x,
        y,
        width: w,
        height: h,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub tool: ToolKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub region: Option<Rect>,
}

impl ToolInvocation {
    pub fn new(tool: ToolKind, params: BTreeMap<String, f64>, region: Option<Rect>) -> Result<Self> {
        let inv = Self { tool, params, region };
        inv.validate()?;
        Ok(inv)
    }

    pub fn simple(tool: ToolKind) -> Self {
        Self {
            tool,
            params: BTreeMap::new(),
            region: None,
        }
    }

    pub fn zoom(region: Rect) -> Self {
        Self {
            tool: ToolKind::Zoom,
            params: BTreeMap::new(),
            region: Some(region),
        }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.tool, self.region) {
            (ToolKind::Zoom, None) => return Err(Error::ToolDispatch("zoom requires a region".into())),
            (ToolKind::Zoom, Some(_)) => {}
            (t, Some(_)) => return Err(Error::ToolDispatch(format!("{t} does not take a region"))),
            _ => {}
        }
        let allowed = self.tool.param_names();
        if let Some(bad) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Parameter(format!("{} has no parameter `{bad}`", self.tool)));
        }
        Ok(())
    }
}

/// Parameter values used when an invocation leaves them out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolDefaults {
    pub denoise_strength: f64,
    pub deblur_radius: f64,
    pub deblur_amount: f64,
    pub clahe_clip_limit: f64,
    pub clahe_tile_grid: u32,
    pub zoom_target_long_side: u32,
    pub super_resolution_factor: u32,
    /// Optional external super-resolution endpoint; bicubic when unset.
    pub super_resolution_url: Option<String>,
}

impl Default for ToolDefaults {
    fn default() -> Self {
        Self {
            denoise_strength: 10.0,
            deblur_radius: 2.0,
            deblur_amount: 1.0,
            clahe_clip_limit: 2.0,
            clahe_tile_grid: 8,
            zoom_target_long_side: 512,
            super_resolution_factor: 2,
            super_resolution_url: None,
        }
    }
}

fn param(inv: &ToolInvocation, name: &str, default: f64) -> f64 {
    inv.params.get(name).copied().unwrap_or(default)
}

fn integral_param(inv: &ToolInvocation, name: &str, default: u32) -> Result<u32> {
    let v = param(inv, name, default as f64);
    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
        return Err(Error::Parameter(format!(
            "{name} must be a non-negative integer, got {v}"
        )));
    }
    Ok(v as u32)
}

/// Runs one invocation with the stock defaults and bicubic super-resolution.
pub fn apply_tool(img: &ImageBuffer, inv: &ToolInvocation) -> Result<ImageBuffer> {
    apply_with(img, inv, &ToolDefaults::default(), None)
}

/// Applies invocations left to right, each to the previous output.
pub fn apply_tools(img: &ImageBuffer, chain: &[ToolInvocation]) -> Result<ImageBuffer> {
    chain.iter().try_fold(img.clone(), |acc, inv| apply_tool(&acc, inv))
}

pub(crate) fn apply_with(
    img: &ImageBuffer,
    inv: &ToolInvocation,
    defaults: &ToolDefaults,
    remote_sr: Option<&RemoteSuperResolver>,
) -> Result<ImageBuffer> {
    inv.validate()?;
    match inv.tool {
        ToolKind::Denoise => denoise(img, param(inv, "strength", defaults.denoise_strength)),
        ToolKind::Deblur => deblur(
            img,
            param(inv, "radius", defaults.deblur_radius),
            param(inv, "amount", defaults.deblur_amount),
        ),
        ToolKind::Brightness => {
            let grid = integral_param(inv, "tile_grid", defaults.clahe_tile_grid)?;
            // small images cannot hold the default grid
            let grid = if inv.params.contains_key("tile_grid") {
                grid
            } else {
                grid.min(img.width().min(img.height()))
            };
            enhance_brightness(img, param(inv, "clip_limit", defaults.clahe_clip_limit), grid)
        }
        ToolKind::Zoom => zoom(
            img,
            inv.region.expect("validated"),
            integral_param(inv, "target_long_side", defaults.zoom_target_long_side)?,
        ),
        ToolKind::SuperResolution => {
            let factor = integral_param(inv, "factor", defaults.super_resolution_factor)?;
            match remote_sr {
                Some(sr) => sr.resolve(img, factor),
                None => super_resolve(img, factor),
            }
        }
    }
}

/// Tool executor bound to a parameter set and optional remote super-resolution.
pub struct ToolRunner {
    defaults: ToolDefaults,
    remote_sr: Option<RemoteSuperResolver>,
}

impl ToolRunner {
    pub fn new(defaults: ToolDefaults) -> Self {
        let remote_sr = defaults.super_resolution_url.as_deref().map(RemoteSuperResolver::new);
        Self { defaults, remote_sr }
    }

    pub fn apply(&self, img: &ImageBuffer, inv: &ToolInvocation) -> Result<ImageBuffer> {
        apply_with(img, inv, &self.defaults, self.remote_sr.as_ref())
    }
}

impl Default for ToolRunner {
    fn default() -> Self {
        Self::new(ToolDefaults::default())
    }
}
