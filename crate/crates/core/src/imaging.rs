//! Small raster helpers: float/u8 conversion, separable Gaussian blur, bilinear resampling,
//! square padding and a Euclidean distance transform.
//!
//! Float images keep the 0–255 range of their 8-bit sources.

use image::{GrayImage, ImageBuffer, Luma, Rgb, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::SquareFrame;

pub type AlphaImage = ImageBuffer<Luma<f32>, Vec<f32>>;

/// Per-channel ImageNet mean in 0–255 RGB.
pub const IMAGENET_MEAN_RGB: [u8; 3] = [124, 116, 104];

pub fn to_float(img: &RgbImage) -> Rgb32FImage {
    let data = img.as_raw().iter().map(|&v| f32::from(v)).collect();
    Rgb32FImage::from_raw(img.width(), img.height(), data).expect("same dimensions")
}

/// Rounds half up and saturates to 0–255.
pub fn round_u8(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn to_u8(img: &Rgb32FImage) -> RgbImage {
    let data = img.as_raw().iter().map(|&v| round_u8(v)).collect();
    RgbImage::from_raw(img.width(), img.height(), data).expect("same dimensions")
}

/// Places `img` inside its square frame, filling the padding with `fill`.
pub fn pad_image(img: &RgbImage, frame: &SquareFrame, fill: [u8; 3]) -> RgbImage {
    let mut out = RgbImage::from_pixel(frame.side, frame.side, Rgb(fill));
    image::imageops::replace(
        &mut out,
        img,
        i64::from(frame.offset_x),
        i64::from(frame.offset_y),
    );
    out
}

/// Discrete Gaussian truncated at `ceil(4σ)` and normalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Mirror index into `[0, n)` with edge repetition (`-1 → 0`, `n → n - 1`).
fn reflect(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur over an interleaved buffer with `channels` channels.
pub fn gaussian_blur_raw(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    sigma: f64,
) -> Result<Vec<f32>> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0f64;
                for (t, w) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + t as i64 - radius, width as i64);
                    acc += w * f64::from(data[(y * width + sx) * channels + c]);
                }
                tmp[(y * width + x) * channels + c] = acc as f32;
            }
        }
    }
    let mut out = vec![0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0f64;
                for (t, w) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + t as i64 - radius, height as i64);
                    acc += w * f64::from(tmp[(sy * width + x) * channels + c]);
                }
                out[(y * width + x) * channels + c] = acc as f32;
            }
        }
    }
    Ok(out)
}

pub fn gaussian_blur(img: &Rgb32FImage, sigma: f64) -> Result<Rgb32FImage> {
    let (w, h) = img.dimensions();
    let out = gaussian_blur_raw(img.as_raw(), w as usize, h as usize, 3, sigma)?;
    Ok(Rgb32FImage::from_raw(w, h, out).expect("same dimensions"))
}

/// Bilinear resampling of an interleaved buffer, sampling at pixel centers.
pub fn resize_bilinear_raw(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    new_width: usize,
    new_height: usize,
) -> Vec<f32> {
    let mut out = vec![0f32; new_width * new_height * channels];
    let sx = width as f64 / new_width as f64;
    let sy = height as f64 / new_height as f64;
    for oy in 0..new_height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..new_width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let tx = fx - x0 as f64;
            for c in 0..channels {
                let at = |x: usize, y: usize| f64::from(data[(y * width + x) * channels + c]);
                let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                out[(oy * new_width + ox) * channels + c] = (top * (1.0 - ty) + bottom * ty) as f32;
            }
        }
    }
    out
}

pub fn resize_bilinear(img: &Rgb32FImage, new_width: u32, new_height: u32) -> Rgb32FImage {
    let (w, h) = img.dimensions();
    let out = resize_bilinear_raw(
        img.as_raw(),
        w as usize,
        h as usize,
        3,
        new_width as usize,
        new_height as usize,
    );
    Rgb32FImage::from_raw(new_width, new_height, out).expect("same dimensions")
}

/// Squared Euclidean distance from each pixel to the nearest pixel where `seed` is true.
/// Pixels with no seed anywhere get `f64::INFINITY`.
pub fn squared_distance_transform(seed: &[bool], width: usize, height: usize) -> Vec<f64> {
    const FAR: f64 = 1e12;
    let mut grid: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut line = vec![0f64; width.max(height)];
    let mut out = vec![0f64; width.max(height)];
    for x in 0..width {
        for y in 0..height {
            line[y] = grid[y * width + x];
        }
        distance_1d(&line[..height], &mut out[..height]);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        line[..width].copy_from_slice(row);
        distance_1d(&line[..width], &mut out[..width]);
        row.copy_from_slice(&out[..width]);
    }
    grid.into_iter()
        .map(|d| if d >= FAR * 0.5 { f64::INFINITY } else { d })
        .collect()
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn distance_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so this never steps below k = 0
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Pixels within Euclidean distance `radius` of the mask.
pub fn dilate(mask: &[bool], width: usize, height: usize, radius: f64) -> Vec<bool> {
    if radius <= 0.0 {
        return mask.to_vec();
    }
    let r2 = radius * radius;
    squared_distance_transform(mask, width, height)
        .into_iter()
        .map(|d| d <= r2)
        .collect()
}

pub fn mask_from_gray(img: &GrayImage) -> Vec<bool> {
    img.as_raw().iter().map(|&v| v >= 128).collect()
}

pub fn mask_to_gray(mask: &[bool], width: u32, height: u32) -> GrayImage {
    let data = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    GrayImage::from_raw(width, height, data).expect("same dimensions")
}
