use image::{Rgb, RgbImage};

use super::predict::PlacementPrediction;
use crate::geometry::{denormalize_box, PixelBox, SquareFrame};
use crate::imaging::resize_bilinear_raw;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapStyle {
    /// Opacity of the color map over the base image; ignored without a base image.
    pub alpha: f32,
    pub draw_box: bool,
    pub box_color: [u8; 3],
}

impl Default for HeatmapStyle {
    fn default() -> Self {
        HeatmapStyle {
            alpha: 0.6,
            draw_box: true,
            box_color: [255, 255, 255],
        }
    }
}

/// Blue → cyan → yellow → red ramp over `[0, 1]`.
pub fn colormap(t: f32) -> [u8; 3] {
    const STOPS: [(f32, [f32; 3]); 5] = [
        (0.0, [0.0, 0.0, 128.0]),
        (0.25, [0.0, 96.0, 255.0]),
        (0.5, [0.0, 255.0, 255.0]),
        (0.75, [255.0, 255.0, 0.0]),
        (1.0, [255.0, 0.0, 0.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let i = STOPS.iter().rposition(|s| s.0 <= t).unwrap_or(0).min(STOPS.len() - 2);
    let (t0, a) = STOPS[i];
    let (t1, b) = STOPS[i + 1];
    let f = (t - t0) / (t1 - t0);
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
}

/// Location map upsampled over the padded square frame, cropped back to the image, and
/// normalized so its maximum is 1.
pub fn upsampled_map(prediction: &PlacementPrediction, frame: &SquareFrame) -> Vec<f32> {
    let g = prediction.grid_size;
    let side = frame.side as usize;
    let map: Vec<f32> = prediction.location_probs.iter().map(|&p| p as f32).collect();
    let full = resize_bilinear_raw(&map, g, g, 1, side, side);
    let (w, h) = (frame.width as usize, frame.height as usize);
    let (ox, oy) = (frame.offset_x as usize, frame.offset_y as usize);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        out.extend_from_slice(&full[(y + oy) * side + ox..(y + oy) * side + ox + w]);
    }
    let max = out.iter().cloned().fold(0f32, f32::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    out
}

/// Renders the location distribution at image size, optionally over `base`, with the
/// top-1 box outlined.
pub fn export_heatmap(
    prediction: &PlacementPrediction,
    frame: &SquareFrame,
    base: Option<&RgbImage>,
    style: &HeatmapStyle,
) -> RgbImage {
    let map = upsampled_map(prediction, frame);
    let mut img = RgbImage::from_fn(frame.width, frame.height, |x, y| {
        let heat = colormap(map[(y * frame.width + x) as usize]);
        match base {
            Some(b) if b.dimensions() == (frame.width, frame.height) => {
                let under = b.get_pixel(x, y).0;
                Rgb([0, 1, 2].map(|c| {
                    (style.alpha * f32::from(heat[c]) + (1.0 - style.alpha) * f32::from(under[c]))
                        .round() as u8
                }))
            }
            _ => Rgb(heat),
        }
    });
    if style.draw_box {
        let b = denormalize_box(&prediction.top().bbox, frame);
        draw_rect(&mut img, &b, style.box_color);
    }
    img
}

/// One-pixel outline of `b`, clipped to the image.
pub fn draw_rect(img: &mut RgbImage, b: &PixelBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    let x0 = (b.x_min.floor() as i64).clamp(0, w - 1);
    let x1 = ((b.x_max.ceil() as i64) - 1).clamp(0, w - 1);
    let y0 = (b.y_min.floor() as i64).clamp(0, h - 1);
    let y1 = ((b.y_max.ceil() as i64) - 1).clamp(0, h - 1);
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, Rgb(color));
        img.put_pixel(x as u32, y1 as u32, Rgb(color));
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, Rgb(color));
        img.put_pixel(x1 as u32, y as u32, Rgb(color));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pad_to_square, Grid};
    use crate::net::predict::{decode_candidate, PlacementCandidate};

    fn prediction(probs: Vec<f64>) -> PlacementPrediction {
        let grid = Grid::default();
        let cell = grid.cell(7, 7);
        PlacementPrediction {
            grid_size: 15,
            location_probs: probs,
            location: cell,
            size_probs: vec![1.0 / 225.0; 225],
            size: cell,
            candidates: vec![PlacementCandidate {
                location: cell,
                size: cell,
                location_prob: 1.0,
                size_prob: 1.0,
                bbox: decode_candidate(&grid, cell, cell),
            }],
        }
    }

    #[test]
    fn uniform_map_is_uniform_color() {
        let frame = pad_to_square(90, 60).unwrap();
        let style = HeatmapStyle {
            draw_box: false,
            ..HeatmapStyle::default()
        };
        let img = export_heatmap(&prediction(vec![1.0 / 225.0; 225]), &frame, None, &style);
        assert_eq!(img.dimensions(), (90, 60));
        let first = *img.get_pixel(0, 0);
        assert!(img.pixels().all(|p| *p == first));
    }

    #[test]
    fn one_hot_blob_is_centered() {
        let mut probs = vec![0.0; 225];
        probs[7 * 15 + 7] = 1.0;
        let frame = pad_to_square(150, 150).unwrap();
        let map = upsampled_map(&prediction(probs), &frame);
        let (mut sx, mut sy, mut s) = (0f64, 0f64, 0f64);
        for (i, &v) in map.iter().enumerate() {
            let v = f64::from(v);
            sx += v * (i % 150) as f64;
            sy += v * (i / 150) as f64;
            s += v;
        }
        let (cx, cy) = (sx / s, sy / s);
        assert!((cx - 74.5).abs() < 10.0 && (cy - 74.5).abs() < 10.0, "{cx} {cy}");
        assert_eq!(map.iter().cloned().fold(0f32, f32::max), 1.0);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
    }
}
