//! Rendering of detector output as a layout image.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::geometry::PixelBox;
use crate::imaging::round_u8;

/// Layout background color.
pub const LAYOUT_BACKGROUND: [u8; 3] = [0, 0, 0];

/// Detections scoring below this are not rendered.
pub const DEFAULT_SCORE_THRESHOLD: f32 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: u32,
    pub bbox: PixelBox,
    pub score: f32,
}

impl Detection {
    /// Same detection with its box mapped by `x' = x * scale + dx`, `y' = y * scale + dy`.
    pub fn transformed(&self, scale: f64, dx: f64, dy: f64) -> Detection {
        let b = &self.bbox;
        Detection {
            bbox: PixelBox {
                x_min: b.x_min * scale + dx,
                y_min: b.y_min * scale + dy,
                x_max: b.x_max * scale + dx,
                y_max: b.y_max * scale + dy,
            },
            ..*self
        }
    }
}

/// Category → color map drawn from a seeded generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub seed: u64,
    colors: BTreeMap<u32, [u8; 3]>,
}

impl Palette {
    /// Colors for `categories`; the same seed and category set always give the same palette.
    /// Colors are distinct from each other and from the layout background.
    pub fn new(categories: impl IntoIterator<Item = u32>, seed: u64) -> Self {
        let mut cats: Vec<u32> = categories.into_iter().collect();
        cats.sort_unstable();
        cats.dedup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut colors = BTreeMap::new();
        let mut used = vec![LAYOUT_BACKGROUND];
        for c in cats {
            let color = loop {
                let candidate = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
                if !used.contains(&candidate) {
                    break candidate;
                }
            };
            used.push(color);
            colors.insert(c, color);
        }
        Palette { seed, colors }
    }

    /// Palette with explicitly chosen colors.
    pub fn from_colors(colors: impl IntoIterator<Item = (u32, [u8; 3])>) -> Self {
        Palette {
            seed: 0,
            colors: colors.into_iter().collect(),
        }
    }

    /// COCO's 80 thing categories (ids 1..=90 with gaps are all covered by 1..=90).
    pub fn coco(seed: u64) -> Self {
        Palette::new(1..=90, seed)
    }

    pub fn color(&self, category: u32) -> Option<[u8; 3]> {
        self.colors.get(&category).copied()
    }
}

/// Renders detections as filled boxes on a black canvas.
///
/// Pixels covered by several boxes take the mean color of the covering boxes, rounded half
/// up. Boxes are clipped to the canvas; a pixel is covered when its center lies inside the
/// box. Detections with unknown categories or scores below `score_threshold` are skipped.
pub fn render_layout(
    detections: &[Detection],
    palette: &Palette,
    width: u32,
    height: u32,
    score_threshold: f32,
) -> RgbImage {
    let (w, h) = (width as usize, height as usize);
    let mut sum = vec![[0u32; 3]; w * h];
    let mut count = vec![0u32; w * h];
    for det in detections {
        if det.score < score_threshold {
            continue;
        }
        let Some(color) = palette.color(det.category) else {
            log::debug!("no palette entry for category {}", det.category);
            continue;
        };
        let b = det.bbox;
        let x0 = (b.x_min - 0.5).ceil().max(0.0) as usize;
        let x1 = ((b.x_max - 0.5).ceil().max(0.0) as usize).min(w);
        let y0 = (b.y_min - 0.5).ceil().max(0.0) as usize;
        let y1 = ((b.y_max - 0.5).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                for c in 0..3 {
                    sum[i][c] += u32::from(color[c]);
                }
                count[i] += 1;
            }
        }
    }
    let mut out = RgbImage::from_pixel(width, height, Rgb(LAYOUT_BACKGROUND));
    for (i, px) in out.pixels_mut().enumerate() {
        if count[i] > 0 {
            let n = count[i] as f32;
            px.0 = [
                round_u8(sum[i][0] as f32 / n),
                round_u8(sum[i][1] as f32 / n),
                round_u8(sum[i][2] as f32 / n),
            ];
        }
    }
    out
}
