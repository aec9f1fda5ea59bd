//! PNG rendering for traversal grids and tuning heatmaps.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::{Result, TuningHeatmap};

/// Traversal range endpoints.
pub const TRAVERSAL_LO: f64 = -3.0;
pub const TRAVERSAL_HI: f64 = 3.0;

/// Heatmap colour scale endpoints (peak blue at -3, white at 0, peak red at 3).
const HEAT_CLIP: f32 = 3.0;

const GUTTER: u32 = 2;

/// One cell of an image grid: channels-first pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GridImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GridImage {
    fn rgb_at(&self, r: usize, c: usize) -> Rgb<u8> {
        let hw = self.height * self.width;
        let to_byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let v = to_byte(self.pixels[r * self.width + c]);
                Rgb([v, v, v])
            }
            _ => Rgb([
                to_byte(self.pixels[r * self.width + c]),
                to_byte(self.pixels[hw + r * self.width + c]),
                to_byte(self.pixels[2 * hw + r * self.width + c]),
            ]),
        }
    }
}

/// Writes a rows x cols grid of equally sized images with 2-pixel white
/// gutters. `images` is row-major; missing trailing cells stay white.
pub fn image_grid_png(
    images: &[GridImage],
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<()> {
    assert!(!images.is_empty(), "grid needs at least one image");
    let (h, w) = (images[0].height, images[0].width);
    let total_w = cols as u32 * (w as u32 + GUTTER) + GUTTER;
    let total_h = rows as u32 * (h as u32 + GUTTER) + GUTTER;
    let mut img = RgbImage::from_pixel(total_w, total_h, Rgb([255, 255, 255]));
    for (i, cell) in images.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        if gr >= rows {
            break;
        }
        let y0 = GUTTER + gr as u32 * (h as u32 + GUTTER);
        let x0 = GUTTER + gc as u32 * (w as u32 + GUTTER);
        for r in 0..h {
            for c in 0..w {
                img.put_pixel(x0 + c as u32, y0 + r as u32, cell.rgb_at(r, c));
            }
        }
    }
    img.save(path).map_err(|e| {
        super::DiagError::Io(std::io::Error::other(format!("png encode: {e}")))
    })
}

/// Diverging blue-white-red colormap clipped to `[-3, 3]`.
fn diverging(v: f32) -> Rgb<u8> {
    let t = (v / HEAT_CLIP).clamp(-1.0, 1.0);
    let to_byte = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    if t < 0.0 {
        Rgb([to_byte(1.0 + t), to_byte(1.0 + t), 255])
    } else {
        Rgb([255, to_byte(1.0 - t), to_byte(1.0 - t)])
    }
}

/// Renders one tuning map with the diverging colormap, upscaled by `zoom`.
pub fn heatmap_to_rgb(map: &TuningHeatmap, zoom: usize) -> RgbImage {
    let zoom = zoom.max(1) as u32;
    let (h, w) = (map.rows as u32, map.cols as u32);
    let mut img = RgbImage::new(w * zoom, h * zoom);
    for r in 0..h {
        for c in 0..w {
            let colour = diverging(map.values[(r * w + c) as usize]);
            for dr in 0..zoom {
                for dc in 0..zoom {
                    img.put_pixel(c * zoom + dc, r * zoom + dr, colour);
                }
            }
        }
    }
    img
}

/// Writes all latent tuning maps side by side into one PNG, ordered as given.
pub fn heatmap_grid_png(maps: &[TuningHeatmap], zoom: usize, path: &Path) -> Result<()> {
    assert!(!maps.is_empty(), "heatmap grid needs at least one map");
    let rendered: Vec<RgbImage> = maps.iter().map(|m| heatmap_to_rgb(m, zoom)).collect();
    let (h, w) = (rendered[0].height(), rendered[0].width());
    let total_w = maps.len() as u32 * (w + GUTTER) + GUTTER;
    let total_h = h + 2 * GUTTER;
    let mut img = RgbImage::from_pixel(total_w, total_h, Rgb([255, 255, 255]));
    for (i, cell) in rendered.iter().enumerate() {
        let x0 = GUTTER + i as u32 * (w + GUTTER);
        for r in 0..h {
            for c in 0..w {
                img.put_pixel(x0 + c, GUTTER + r, *cell.get_pixel(c, r));
            }
        }
    }
    img.save(path).map_err(|e| {
        super::DiagError::Io(std::io::Error::other(format!("png encode: {e}")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_anchors() {
        assert_eq!(diverging(0.0), Rgb([255, 255, 255]));
        assert_eq!(diverging(3.0), Rgb([255, 0, 0]));
        assert_eq!(diverging(-3.0), Rgb([0, 0, 255]));
        assert_eq!(diverging(99.0), Rgb([255, 0, 0]));
    }

    #[test]
    fn zero_map_renders_all_white() {
        let map = TuningHeatmap {
            rows: 2,
            cols: 3,
            values: vec![0.0; 6],
        };
        let img = heatmap_to_rgb(&map, 2);
        assert!(img.pixels().all(|p| *p == Rgb([255, 255, 255])));
    }

    #[test]
    fn grid_png_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cell = GridImage {
            channels: 1,
            height: 4,
            width: 4,
            pixels: (0..16).map(|i| i as f32 / 15.0).collect(),
        };
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        image_grid_png(&[cell.clone(), cell.clone()], 1, 2, &a).unwrap();
        image_grid_png(&[cell.clone(), cell], 1, 2, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
