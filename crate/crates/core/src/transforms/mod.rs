//! The image transformation pool and its parameter sampler.
//!
//! Randomness lives only in [`sample_transform`] / [`sample_params`];
//! [`apply_transform`] is a pure function of the image and the drawn
//! parameters.

mod diffusion;
mod ops;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::rng::Rng;

pub use diffusion::{diffusion_distort, NoiseSchedule, DIFFUSION_STEPS};

/// Side length of the square produced by [`TransformKind::Crop`].
pub const CROP_SIZE: u32 = 336;
/// Gaussian blur kernel width.
pub const BLUR_KERNEL: usize = 13;
pub const BLUR_SIGMA_RANGE: (f64, f64) = (1.5, 2.0);
pub const CROP_SCALE_RANGE: (f64, f64) = (0.08, 1.0);
pub const CROP_RATIO_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const JITTER_BRIGHTNESS: f64 = 1.0;
pub const JITTER_CONTRAST: f64 = 1.0;
pub const JITTER_SATURATION: f64 = 1.0;
pub const JITTER_HUE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("invalid transform parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    HorizontalFlip,
    VerticalFlip,
    Rotate,
    ColorJitter,
    GaussianBlur,
    Crop,
}

impl TransformKind {
    pub const ALL: [TransformKind; 6] = [
        TransformKind::HorizontalFlip,
        TransformKind::VerticalFlip,
        TransformKind::Rotate,
        TransformKind::ColorJitter,
        TransformKind::GaussianBlur,
        TransformKind::Crop,
    ];

    /// Human-readable name, as shown to a model in selection prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            TransformKind::HorizontalFlip => "horizontal flip",
            TransformKind::VerticalFlip => "vertical flip",
            TransformKind::Rotate => "rotate",
            TransformKind::ColorJitter => "color jitter",
            TransformKind::GaussianBlur => "gaussian blur",
            TransformKind::Crop => "crop",
        }
    }

    /// Short CLI spelling.
    pub fn short_name(self) -> &'static str {
        match self {
            TransformKind::HorizontalFlip => "hflip",
            TransformKind::VerticalFlip => "vflip",
            TransformKind::Rotate => "rotate",
            TransformKind::ColorJitter => "jitter",
            TransformKind::GaussianBlur => "blur",
            TransformKind::Crop => "crop",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            TransformKind::HorizontalFlip => "mirror the image left to right",
            TransformKind::VerticalFlip => "mirror the image top to bottom",
            TransformKind::Rotate => "turn the image by a random angle",
            TransformKind::ColorJitter => {
                "randomly change brightness, contrast, saturation and hue"
            }
            TransformKind::GaussianBlur => "soften the image with a smoothing kernel",
            TransformKind::Crop => "zoom into a random region of the image",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = TransformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '_', ' '], "");
        let kind = match norm.as_str() {
            "hflip" | "horizontalflip" => TransformKind::HorizontalFlip,
            "vflip" | "verticalflip" => TransformKind::VerticalFlip,
            "rotate" | "rotation" => TransformKind::Rotate,
            "jitter" | "colorjitter" => TransformKind::ColorJitter,
            "blur" | "gaussianblur" => TransformKind::GaussianBlur,
            "crop" | "randomresizedcrop" => TransformKind::Crop,
            _ => return Err(TransformError::InvalidParams(format!("unknown kind {s:?}"))),
        };
        Ok(kind)
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

/// One of the four color adjustments, applied in the order drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// A fully drawn transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformParams {
    HorizontalFlip,
    VerticalFlip,
    /// Counter-clockwise angle in degrees.
    Rotate { degrees: f64 },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
        order: [JitterOp; 4],
    },
    GaussianBlur { sigma: f64 },
    /// Source rectangle; the crop is resized to `CROP_SIZE` square.
    Crop { x: u32, y: u32, width: u32, height: u32 },
}

impl TransformParams {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformParams::HorizontalFlip => TransformKind::HorizontalFlip,
            TransformParams::VerticalFlip => TransformKind::VerticalFlip,
            TransformParams::Rotate { .. } => TransformKind::Rotate,
            TransformParams::ColorJitter { .. } => TransformKind::ColorJitter,
            TransformParams::GaussianBlur { .. } => TransformKind::GaussianBlur,
            TransformParams::Crop { .. } => TransformKind::Crop,
        }
    }

    pub fn identity_jitter() -> Self {
        TransformParams::ColorJitter {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: [
                JitterOp::Brightness,
                JitterOp::Contrast,
                JitterOp::Saturation,
                JitterOp::Hue,
            ],
        }
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<(), TransformError> {
        let bad = |msg: String| Err(TransformError::InvalidParams(msg));
        match *self {
            TransformParams::HorizontalFlip | TransformParams::VerticalFlip => Ok(()),
            TransformParams::Rotate { degrees } => {
                if degrees.is_finite() && degrees > -180.0 && degrees <= 180.0 {
                    Ok(())
                } else {
                    bad(format!("rotation {degrees} outside (-180, 180]"))
                }
            }
            TransformParams::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
                order,
            } => {
                for (name, f) in [
                    ("brightness", brightness),
                    ("contrast", contrast),
                    ("saturation", saturation),
                ] {
                    if !(0.0..=2.0).contains(&f) {
                        return bad(format!("{name} factor {f} outside [0, 2]"));
                    }
                }
                if !(-0.5..=0.5).contains(&hue) {
                    return bad(format!("hue shift {hue} outside [-0.5, 0.5]"));
                }
                let mut seen = [false; 4];
                for op in order {
                    seen[op as usize] = true;
                }
                if seen.contains(&false) {
                    return bad("jitter order must be a permutation".into());
                }
                Ok(())
            }
            TransformParams::GaussianBlur { sigma } => {
                let (lo, hi) = BLUR_SIGMA_RANGE;
                if sigma >= lo && sigma <= hi {
                    Ok(())
                } else {
                    bad(format!("blur sigma {sigma} outside [{lo}, {hi}]"))
                }
            }
            TransformParams::Crop {
                x,
                y,
                width: w,
                height: h,
            } => {
                if w == 0 || h == 0 {
                    return bad("empty crop rectangle".into());
                }
                if x as u64 + w as u64 > width as u64 || y as u64 + h as u64 > height as u64 {
                    return bad(format!(
                        "crop ({x}, {y}, {w}, {h}) exceeds {width}x{height} image"
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Draws a kind uniformly, then its parameters.
pub fn sample_transform(rng: &mut Rng, width: u32, height: u32) -> TransformParams {
    let kind = TransformKind::ALL[rng.below(TransformKind::ALL.len() as u64) as usize];
    sample_params(kind, rng, width, height)
}

/// Draws the continuous parameters of a given kind for an image of the given
/// size.
pub fn sample_params(kind: TransformKind, rng: &mut Rng, width: u32, height: u32) -> TransformParams {
    match kind {
        TransformKind::HorizontalFlip => TransformParams::HorizontalFlip,
        TransformKind::VerticalFlip => TransformParams::VerticalFlip,
        TransformKind::Rotate => TransformParams::Rotate {
            degrees: rng.uniform_open(-180.0, 180.0),
        },
        TransformKind::ColorJitter => {
            let factor = |rng: &mut Rng, s: f64| rng.uniform((1.0 - s).max(0.0), 1.0 + s);
            let brightness = factor(rng, JITTER_BRIGHTNESS);
            let contrast = factor(rng, JITTER_CONTRAST);
            let saturation = factor(rng, JITTER_SATURATION);
            let hue = rng.uniform(-JITTER_HUE, JITTER_HUE);
            let mut order = [
                JitterOp::Brightness,
                JitterOp::Contrast,
                JitterOp::Saturation,
                JitterOp::Hue,
            ];
            rng.shuffle(&mut order);
            TransformParams::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
                order,
            }
        }
        TransformKind::GaussianBlur => TransformParams::GaussianBlur {
            sigma: rng.uniform(BLUR_SIGMA_RANGE.0, BLUR_SIGMA_RANGE.1),
        },
        TransformKind::Crop => sample_crop(rng, width, height),
    }
}

/// Random-resized-crop rectangle: area scale uniform in `CROP_SCALE_RANGE`,
/// aspect ratio log-uniform in `CROP_RATIO_RANGE`, ten attempts before a
/// centered fallback.
fn sample_crop(rng: &mut Rng, width: u32, height: u32) -> TransformParams {
    let (w_img, h_img) = (width as f64, height as f64);
    let area = w_img * h_img;
    let (log_lo, log_hi) = (CROP_RATIO_RANGE.0.ln(), CROP_RATIO_RANGE.1.ln());
    for _ in 0..10 {
        let target = area * rng.uniform(CROP_SCALE_RANGE.0, CROP_SCALE_RANGE.1);
        let aspect = rng.uniform(log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round();
        let h = (target / aspect).sqrt().round();
        if w >= 1.0 && w <= w_img && h >= 1.0 && h <= h_img {
            let (w, h) = (w as u32, h as u32);
            let y = rng.below((height - h + 1) as u64) as u32;
            let x = rng.below((width - w + 1) as u64) as u32;
            return TransformParams::Crop {
                x,
                y,
                width: w,
                height: h,
            };
        }
    }
    let ratio = w_img / h_img;
    let (w, h) = if ratio < CROP_RATIO_RANGE.0 {
        (width, ((w_img / CROP_RATIO_RANGE.0).round() as u32).clamp(1, height))
    } else if ratio > CROP_RATIO_RANGE.1 {
        (((h_img * CROP_RATIO_RANGE.1).round() as u32).clamp(1, width), height)
    } else {
        (width, height)
    };
    TransformParams::Crop {
        x: (width - w) / 2,
        y: (height - h) / 2,
        width: w,
        height: h,
    }
}

pub fn apply_transform(img: &ImageBuffer, params: &TransformParams) -> Result<ImageBuffer, TransformError> {
    params.validate(img.width(), img.height())?;
    let out = match *params {
        TransformParams::HorizontalFlip => ops::flip_horizontal(img),
        TransformParams::VerticalFlip => ops::flip_vertical(img),
        TransformParams::Rotate { degrees } => ops::rotate(img, degrees),
        TransformParams::ColorJitter {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        } => ops::color_jitter(img, brightness, contrast, saturation, hue, &order),
        TransformParams::GaussianBlur { sigma } => ops::gaussian_blur(img, BLUR_KERNEL, sigma),
        TransformParams::Crop {
            x,
            y,
            width,
            height,
        } => ops::resized_crop(img, x, y, width, height, CROP_SIZE, CROP_SIZE),
    };
    Ok(out)
}
