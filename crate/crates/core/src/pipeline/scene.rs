use image::{Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::layout::{render_layout, Detection, Palette, DEFAULT_SCORE_THRESHOLD};
use crate::error::{Error, Result};
use crate::geometry::{pad_to_square, SquareFrame};
use crate::imaging::{self, IMAGENET_MEAN_RGB};

/// Blur applied to the erased background before it is shown to the network.
pub const DEFAULT_BLUR_SIGMA: f64 = 3.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Side of the square network input.
    pub input_size: u32,
    pub blur_sigma: f64,
    pub pad_color: [u8; 3],
    pub score_threshold: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            input_size: 480,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            pad_color: IMAGENET_MEAN_RGB,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

/// The pair of images fed to the placement network.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    /// Person-erased, blurred background (`I_B`), 0–255 floats.
    pub background: Rgb32FImage,
    /// Rendered detector layout (`I_L`).
    pub layout: RgbImage,
}

impl SceneInput {
    pub fn new(background: Rgb32FImage, layout: RgbImage) -> Result<Self> {
        if background.dimensions() != layout.dimensions() {
            return Err(Error::invalid(format!(
                "background is {:?} but layout is {:?}",
                background.dimensions(),
                layout.dimensions()
            )));
        }
        Ok(SceneInput { background, layout })
    }

    pub fn size(&self) -> u32 {
        self.background.width()
    }

    /// Planar `6 × S × S` tensor data: background RGB then layout RGB, scaled to
    /// `[-0.5, 0.5]`.
    pub fn to_planes(&self) -> Vec<f64> {
        let (w, h) = self.background.dimensions();
        let n = (w * h) as usize;
        let mut out = vec![0f64; 6 * n];
        for (i, p) in self.background.pixels().enumerate() {
            for c in 0..3 {
                out[c * n + i] = f64::from(p.0[c]) / 255.0 - 0.5;
            }
        }
        for (i, p) in self.layout.pixels().enumerate() {
            for c in 0..3 {
                out[(3 + c) * n + i] = f64::from(p.0[c]) / 255.0 - 0.5;
            }
        }
        out
    }
}

/// Builds the network input for an (already erased) image: pads to a square with the mean
/// color, blurs at native resolution, resizes to the input size, and renders the detections
/// (given in original image coordinates) into the same square frame.
pub fn build_scene(
    image: &Rgb32FImage,
    detections: &[Detection],
    palette: &Palette,
    cfg: &SceneConfig,
) -> Result<(SceneInput, SquareFrame)> {
    let frame = pad_to_square(image.width(), image.height())?;
    let pad = cfg.pad_color.map(f32::from);
    let mut padded = Rgb32FImage::from_pixel(frame.side, frame.side, image::Rgb(pad));
    image::imageops::replace(
        &mut padded,
        image,
        i64::from(frame.offset_x),
        i64::from(frame.offset_y),
    );
    let blurred = imaging::gaussian_blur(&padded, cfg.blur_sigma)?;
    let background = imaging::resize_bilinear(&blurred, cfg.input_size, cfg.input_size);

    let scale = f64::from(cfg.input_size) / frame.side_f64();
    let mapped: Vec<Detection> = detections
        .iter()
        .map(|d| {
            d.transformed(
                scale,
                f64::from(frame.offset_x) * scale,
                f64::from(frame.offset_y) * scale,
            )
        })
        .collect();
    let layout = render_layout(
        &mapped,
        palette,
        cfg.input_size,
        cfg.input_size,
        cfg.score_threshold,
    );
    Ok((SceneInput { background, layout }, frame))
}
