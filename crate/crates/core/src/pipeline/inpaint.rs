//! Person erasure by inpainting.
//!
//! The default inpainter visits hole pixels in order of their distance to the known region
//! (a fast-marching order) and fills each one from a weighted first-order extrapolation of
//! already-known neighbours within a small radius. Linear intensity ramps are reproduced
//! exactly away from image borders.

use image::Rgb32FImage;

use crate::error::{Error, Result};
use crate::imaging::{dilate, squared_distance_transform};

/// Largest mask fraction that is still considered erasable.
pub const MAX_ERASABLE_FRACTION: f64 = 0.9;

pub trait Inpainter: Send + Sync {
    /// Fills every pixel where `hole` is true. Must not read the original values of hole
    /// pixels.
    fn inpaint(&self, image: &Rgb32FImage, hole: &[bool]) -> Rgb32FImage;
}

#[derive(Debug, Clone, Copy)]
pub struct FastMarchingInpainter {
    /// Neighbourhood radius used for each extrapolation, in pixels.
    pub radius: f64,
}

impl Default for FastMarchingInpainter {
    fn default() -> Self {
        FastMarchingInpainter { radius: 5.0 }
    }
}

impl Inpainter for FastMarchingInpainter {
    fn inpaint(&self, image: &Rgb32FImage, hole: &[bool]) -> Rgb32FImage {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut data = image.as_raw().clone();
        let mut known: Vec<bool> = hole.iter().map(|&m| !m).collect();
        if known.iter().all(|&k| k) {
            return image.clone();
        }
        if !known.iter().any(|&k| k) {
            // nothing to extrapolate from
            data.iter_mut().for_each(|v| *v = 0.0);
            return Rgb32FImage::from_raw(image.width(), image.height(), data).unwrap();
        }
        for (i, k) in known.iter().enumerate() {
            if !k {
                data[i * 3..i * 3 + 3].fill(0.0);
            }
        }

        let dist: Vec<f64> = squared_distance_transform(&known, w, h)
            .into_iter()
            .map(f64::sqrt)
            .collect();
        let mut order: Vec<usize> = (0..w * h).filter(|&i| !known[i]).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));

        let r = self.radius.max(1.5);
        let ri = r.ceil() as i64;
        for &p in &order {
            let (px, py) = ((p % w) as i64, (p / w) as i64);
            let mut acc = [0f64; 3];
            let mut wsum = 0f64;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let (qx, qy) = (px + dx, py + dy);
                    if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                        continue;
                    }
                    let d2 = (dx * dx + dy * dy) as f64;
                    if d2 == 0.0 || d2 > r * r {
                        continue;
                    }
                    let q = qy as usize * w + qx as usize;
                    if !known[q] {
                        continue;
                    }
                    let level = 1.0 / (1.0 + (dist[q] - dist[p]).abs());
                    let mut weight = level / d2;
                    let mut est = [0f64; 3];
                    let mut complete = true;
                    for (c, e) in est.iter_mut().enumerate() {
                        let (gx, gy, full) = gradient(&data, &known, w, h, qx, qy, c);
                        complete &= full;
                        *e = f64::from(data[q * 3 + c]) - gx * dx as f64 - gy * dy as f64;
                    }
                    if !complete {
                        // isolated along one axis: keep only as a fallback
                        weight *= 1e-3;
                    }
                    for c in 0..3 {
                        acc[c] += weight * est[c];
                    }
                    wsum += weight;
                }
            }
            for c in 0..3 {
                data[p * 3 + c] = if wsum > 0.0 { (acc[c] / wsum) as f32 } else { 0.0 };
            }
            known[p] = true;
        }
        Rgb32FImage::from_raw(image.width(), image.height(), data).unwrap()
    }
}

/// Intensity gradient at `(x, y)` from known neighbours only: central differences where
/// both sides are known, one-sided otherwise, zero when neither is. The flag is false when
/// some axis had no known neighbour.
fn gradient(
    data: &[f32],
    known: &[bool],
    w: usize,
    h: usize,
    x: i64,
    y: i64,
    c: usize,
) -> (f64, f64, bool) {
    let at = |x: i64, y: i64| -> Option<f64> {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return None;
        }
        let i = y as usize * w + x as usize;
        known[i].then(|| f64::from(data[i * 3 + c]))
    };
    let here = at(x, y).unwrap_or(0.0);
    let diff = |prev: Option<f64>, next: Option<f64>| match (prev, next) {
        (Some(a), Some(b)) => Some(0.5 * (b - a)),
        (None, Some(b)) => Some(b - here),
        (Some(a), None) => Some(here - a),
        (None, None) => None,
    };
    let gx = diff(at(x - 1, y), at(x + 1, y));
    let gy = diff(at(x, y - 1), at(x, y + 1));
    (
        gx.unwrap_or(0.0),
        gy.unwrap_or(0.0),
        gx.is_some() && gy.is_some(),
    )
}

/// Removes the masked object: the mask is dilated by `dilation` pixels and the resulting
/// hole is filled by `inpainter`.
pub fn erase_person(
    image: &Rgb32FImage,
    mask: &[bool],
    dilation: f64,
    inpainter: &dyn Inpainter,
) -> Result<Rgb32FImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if mask.len() != w * h {
        return Err(Error::invalid(format!(
            "mask has {} pixels, image has {}",
            mask.len(),
            w * h
        )));
    }
    let covered = mask.iter().filter(|&&m| m).count();
    let fraction = covered as f64 / (w * h) as f64;
    if fraction > MAX_ERASABLE_FRACTION {
        return Err(Error::Unerasable { fraction });
    }
    if covered == 0 {
        return Ok(image.clone());
    }
    let hole = dilate(mask, w, h, dilation);
    Ok(inpainter.inpaint(image, &hole))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn disk(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> Vec<bool> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            })
            .collect()
    }

    #[test]
    fn empty_mask_is_identity() {
        let img = Rgb32FImage::from_fn(20, 10, |x, y| Rgb([x as f32, y as f32, 3.0]));
        let out = erase_person(&img, &vec![false; 200], 7.0, &FastMarchingInpainter::default())
            .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Rgb32FImage::from_pixel(40, 30, Rgb([90.0, 120.0, 30.0]));
        let mask = disk(40, 30, 20.0, 15.0, 6.0);
        let out = erase_person(&img, &mask, 7.0, &FastMarchingInpainter::default()).unwrap();
        for p in out.pixels() {
            for (a, b) in p.0.iter().zip([90.0f32, 120.0, 30.0]) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gradient_is_reconstructed() {
        let (w, h) = (80usize, 60usize);
        let img = Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
            let v = 2.0 * x as f32 + 1.0 * y as f32;
            Rgb([v, 255.0 - v, 0.5 * v])
        });
        let mask = disk(w, h, 40.0, 30.0, 10.0);
        let out = erase_person(&img, &mask, 7.0, &FastMarchingInpainter::default()).unwrap();
        let hole = dilate(&mask, w, h, 7.0);
        let mut worst = 0f32;
        for (i, &m) in hole.iter().enumerate() {
            if m {
                for c in 0..3 {
                    worst = worst.max((out.as_raw()[i * 3 + c] - img.as_raw()[i * 3 + c]).abs());
                }
            }
        }
        assert!(worst < 10.0, "max deviation {worst}");
    }

    #[test]
    fn erased_pixels_do_not_leak() {
        let (w, h) = (50usize, 40usize);
        let img = Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
            Rgb([(x * 3 % 255) as f32, (y * 5 % 255) as f32, ((x + y) % 255) as f32])
        });
        let mask = disk(w, h, 25.0, 20.0, 8.0);
        let mut scrambled = img.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                scrambled.as_mut()[i * 3] = 255.0 - (i % 255) as f32;
                scrambled.as_mut()[i * 3 + 1] = (i % 17) as f32;
            }
        }
        let inp = FastMarchingInpainter::default();
        let a = erase_person(&img, &mask, 7.0, &inp).unwrap();
        let b = erase_person(&scrambled, &mask, 7.0, &inp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_mask_is_rejected() {
        let img = Rgb32FImage::new(10, 10);
        let mut mask = vec![true; 100];
        mask[..9].fill(false);
        assert!(matches!(
            erase_person(&img, &mask, 7.0, &FastMarchingInpainter::default()),
            Err(Error::Unerasable { .. })
        ));
    }
}
