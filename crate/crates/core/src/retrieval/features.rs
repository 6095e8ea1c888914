use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::imaging::{resize_bilinear, to_float};

/// Smallest context patch side accepted by [`extract_local`].
pub const MIN_PATCH: u32 = 8;

/// Maps an image to a fixed-length descriptor.
pub trait FeatureExtractor: Send + Sync {
    /// Identifier stored in pools so descriptors from different extractors are not mixed.
    fn id(&self) -> &str;
    fn dims(&self) -> usize;
    /// Raw descriptor of length [`dims`](Self::dims); callers normalize it.
    fn describe(&self, image: &RgbImage) -> Result<Vec<f32>>;
}

/// Deterministic stand-in for a learned backbone: an 8 × 8 grid of mean colors followed by
/// a 4 × 4 × 4 color histogram, zero-padded to `dims`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorLayoutExtractor {
    pub dims: usize,
}

impl ColorLayoutExtractor {
    pub const RAW_DIMS: usize = 8 * 8 * 3 + 64;
}

impl Default for ColorLayoutExtractor {
    fn default() -> Self {
        ColorLayoutExtractor { dims: 2048 }
    }
}

impl FeatureExtractor for ColorLayoutExtractor {
    fn id(&self) -> &str {
        "color-layout-v1"
    }

    fn dims(&self) -> usize {
        self.dims
    }

    fn describe(&self, image: &RgbImage) -> Result<Vec<f32>> {
        if self.dims < Self::RAW_DIMS {
            return Err(Error::Extraction(format!(
                "color-layout descriptor needs at least {} dims, configured {}",
                Self::RAW_DIMS,
                self.dims
            )));
        }
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Extraction("empty image".into()));
        }
        let mut out = Vec::with_capacity(self.dims);
        let small = resize_bilinear(&to_float(image), 8, 8);
        out.extend(small.as_raw().iter().map(|v| v / 255.0));
        let mut hist = [0f32; 64];
        for p in image.pixels() {
            let bin = |v: u8| (v / 64) as usize;
            hist[bin(p.0[0]) * 16 + bin(p.0[1]) * 4 + bin(p.0[2])] += 1.0;
        }
        let n = (image.width() * image.height()) as f32;
        out.extend(hist.iter().map(|h| h / n));
        out.resize(self.dims, 0.0);
        Ok(out)
    }
}

pub fn l2_normalize(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Extraction("descriptor has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
    Ok(())
}

fn normalized(extractor: &dyn FeatureExtractor, image: &RgbImage) -> Result<Vec<f32>> {
    let mut d = extractor
        .describe(image)
        .map_err(|e| Error::Extraction(format!("{}: {e}", extractor.id())))?;
    if d.len() != extractor.dims() {
        return Err(Error::Extraction(format!(
            "{} declared {} dims but produced {}",
            extractor.id(),
            extractor.dims(),
            d.len()
        )));
    }
    l2_normalize(&mut d)?;
    Ok(d)
}

/// Unit-norm descriptor of the whole image.
pub fn extract_global(image: &RgbImage, extractor: &dyn FeatureExtractor) -> Result<Vec<f32>> {
    normalized(extractor, image)
}

/// Context patch of `b`: same center, twice the width and height, clipped to the image and
/// expanded to whole pixels.
pub fn context_patch(b: &PixelBox, width: u32, height: u32) -> Result<PixelBox> {
    b.validate()?;
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let x0 = (cx - w).max(0.0).floor();
    let y0 = (cy - h).max(0.0).floor();
    let x1 = (cx + w).min(f64::from(width)).ceil();
    let y1 = (cy + h).min(f64::from(height)).ceil();
    let min = f64::from(MIN_PATCH);
    if x1 - x0 < min || y1 - y0 < min {
        return Err(Error::Extraction(format!(
            "context patch {x0},{y0}..{x1},{y1} is smaller than {MIN_PATCH}x{MIN_PATCH}"
        )));
    }
    PixelBox::new(x0, y0, x1, y1)
}

/// Unit-norm descriptor of the context patch around `b`.
pub fn extract_local(
    image: &RgbImage,
    b: &PixelBox,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<f32>> {
    let p = context_patch(b, image.width(), image.height())?;
    let crop = image::imageops::crop_imm(
        image,
        p.x_min as u32,
        p.y_min as u32,
        p.width() as u32,
        p.height() as u32,
    )
    .to_image();
    normalized(extractor, &crop)
}

/// `[global ‖ local] / √2`: unit norm with both halves weighted equally.
pub fn concat_descriptor(global: &[f32], local: &[f32]) -> Vec<f32> {
    let s = std::f32::consts::FRAC_1_SQRT_2;
    global.iter().chain(local).map(|v| v * s).collect()
}
