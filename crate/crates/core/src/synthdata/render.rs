//! Pure renderers: Gaussian blobs, rotatable sprites, and colorization.
//!
//! All math is deterministic elementary arithmetic; the same inputs produce
//! bit-identical images on every run.

use super::{DataError, FactorSpec, Image, Result};

/// Fixed six-colour palette (R, G, B, Y, C, M) applied multiplicatively.
pub const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
];

/// Supersampling factor per axis for sprite rasterization.
const SUPERSAMPLE: usize = 4;

/// Half-side of the square at scale 1, in canvas fractions (side 0.3).
const SQUARE_HALF_SIDE: f64 = 0.15;
/// Ellipse semi-axes at scale 1.
const ELLIPSE_SEMI_X: f64 = 0.15;
const ELLIPSE_SEMI_Y: f64 = 0.075;
/// Circumradius of the equilateral triangle at scale 1.
const TRIANGLE_RADIUS: f64 = 0.2;

/// Gaussian blob on a black canvas; peak 1 where the position grid meets the
/// pixel grid.
pub fn render_blob(x: f64, y: f64, blob_sigma: f64, resolution: usize) -> Result<Image> {
    if !x.is_finite() || !y.is_finite() || !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y)
    {
        return Err(DataError::InvalidArgument(format!(
            "blob position ({x}, {y}) outside [0,1]^2"
        )));
    }
    if !blob_sigma.is_finite() || blob_sigma <= 0.0 {
        return Err(DataError::InvalidArgument(format!(
            "blob sigma {blob_sigma} must be a positive real"
        )));
    }
    if resolution < 8 {
        return Err(DataError::InvalidArgument(format!(
            "resolution {resolution} below minimum of 8"
        )));
    }
    let denom = 2.0 * blob_sigma * blob_sigma;
    let last = (resolution - 1) as f64;
    let mut pixels = Vec::with_capacity(resolution * resolution);
    for r in 0..resolution {
        let dy = r as f64 / last - y;
        for c in 0..resolution {
            let dx = c as f64 / last - x;
            pixels.push((-(dx * dx + dy * dy) / denom).exp() as f32);
        }
    }
    Image::new(1, resolution, resolution, pixels)
}

/// Sprite shape classes. Triangle stands in for a rotationally asymmetric
/// shape; the square has four-fold symmetry, the ellipse two-fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ShapeKind::Square),
            1 => Ok(ShapeKind::Ellipse),
            2 => Ok(ShapeKind::Triangle),
            _ => Err(DataError::InvalidArgument(format!(
                "unknown shape index {i}"
            ))),
        }
    }
}

/// Ground-truth factors of one sprite, resolved to named fields.
#[derive(Debug, Clone, Copy)]
pub struct SpriteParams {
    pub shape: ShapeKind,
    pub scale: f64,
    pub rotation: f64,
    pub x: f64,
    pub y: f64,
}

impl SpriteParams {
    pub fn new(shape: ShapeKind, scale: f64, rotation: f64, x: f64, y: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&scale) {
            return Err(DataError::InvalidArgument(format!(
                "scale {scale} outside [0.5, 1]"
            )));
        }
        if !rotation.is_finite() || !(0.0..std::f64::consts::TAU).contains(&rotation) {
            return Err(DataError::InvalidArgument(format!(
                "rotation {rotation} outside [0, 2pi)"
            )));
        }
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(DataError::InvalidArgument(format!(
                "position ({x}, {y}) outside [0,1]^2"
            )));
        }
        Ok(SpriteParams {
            shape,
            scale,
            rotation,
            x,
            y,
        })
    }

    /// Resolves a factor-value vector against a spec by factor name.
    pub fn from_named(spec: &FactorSpec, values: &[f32]) -> Result<Self> {
        let get = |name: &str| -> Result<f64> {
            spec.position(name)
                .map(|i| values[i] as f64)
                .ok_or_else(|| DataError::InvalidArgument(format!("missing factor {name:?}")))
        };
        SpriteParams::new(
            ShapeKind::from_index(get("shape")? as usize)?,
            get("scale")?,
            get("rotation")?,
            get("x")?,
            get("y")?,
        )
    }

    /// True when canvas point `(u, v)` lies inside the sprite.
    fn contains(&self, u: f64, v: f64) -> bool {
        // rotate into the shape frame
        let (s, c) = self.rotation.sin_cos();
        let (du, dv) = (u - self.x, v - self.y);
        let px = c * du + s * dv;
        let py = -s * du + c * dv;
        match self.shape {
            ShapeKind::Square => {
                let h = SQUARE_HALF_SIDE * self.scale;
                px.abs() <= h && py.abs() <= h
            }
            ShapeKind::Ellipse => {
                let a = ELLIPSE_SEMI_X * self.scale;
                let b = ELLIPSE_SEMI_Y * self.scale;
                (px / a) * (px / a) + (py / b) * (py / b) <= 1.0
            }
            ShapeKind::Triangle => {
                let r = TRIANGLE_RADIUS * self.scale;
                // equilateral triangle, apex up (screen coordinates, v grows down)
                let verts = [
                    (0.0, -r),
                    (r * (std::f64::consts::PI / 6.0).cos(), r * 0.5),
                    (-r * (std::f64::consts::PI / 6.0).cos(), r * 0.5),
                ];
                let mut sign = 0.0f64;
                for i in 0..3 {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % 3];
                    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                    if cross != 0.0 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            return false;
                        }
                    }
                }
                true
            }
        }
    }
}

/// Rasterizes a sprite at 4x supersampling with box downsampling; background
/// is exactly 0, edges are anti-aliased into `[0, 1]`.
pub fn render_sprite(params: &SpriteParams, resolution: usize) -> Result<Image> {
    if resolution < 8 {
        return Err(DataError::InvalidArgument(format!(
            "resolution {resolution} below minimum of 8"
        )));
    }
    let fine = resolution * SUPERSAMPLE;
    let inv = 1.0 / fine as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    let mut pixels = vec![0.0f32; resolution * resolution];
    for r in 0..resolution {
        for c in 0..resolution {
            let mut hits = 0u32;
            for sr in 0..SUPERSAMPLE {
                let v = ((r * SUPERSAMPLE + sr) as f64 + 0.5) * inv;
                for sc in 0..SUPERSAMPLE {
                    let u = ((c * SUPERSAMPLE + sc) as f64 + 0.5) * inv;
                    if params.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            pixels[r * resolution + c] = hits as f32 * norm;
        }
    }
    Image::new(1, resolution, resolution, pixels)
}

/// Multiplies a grayscale image into a palette colour, producing 3 channels.
pub fn colorize(img: &Image, hue_index: usize, palette: &[[f32; 3]]) -> Result<Image> {
    if img.channels != 1 {
        return Err(DataError::InvalidArgument(format!(
            "colorize expects a grayscale image, got {} channels",
            img.channels
        )));
    }
    if hue_index >= palette.len() {
        return Err(DataError::InvalidArgument(format!(
            "hue index {hue_index} out of range for palette of {}",
            palette.len()
        )));
    }
    let rgb = palette[hue_index];
    let mut pixels = Vec::with_capacity(3 * img.pixels.len());
    for &w in &rgb {
        pixels.extend(img.pixels.iter().map(|&p| p * w));
    }
    Image::new(3, img.height, img.width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_peaks_at_center() {
        let img = render_blob(0.5, 0.5, 0.1, 33).unwrap();
        assert_eq!(img.at(0, 16, 16), 1.0);
    }

    #[test]
    fn centered_blob_equals_its_transpose() {
        let img = render_blob(0.5, 0.5, 0.1, 33).unwrap();
        for r in 0..33 {
            for c in 0..33 {
                assert_eq!(img.at(0, r, c), img.at(0, c, r));
            }
        }
    }

    #[test]
    fn off_center_blob_matches_formula() {
        let img = render_blob(0.25, 0.5, 0.1, 33).unwrap();
        assert_eq!(img.at(0, 16, 8), 1.0);
        // (16/32 - 0.25)^2 / (2 * 0.01) = 3.125
        let expected = (-3.125f64).exp() as f32;
        assert!((img.at(0, 16, 16) - expected).abs() < 1e-6);
        assert!((expected - 0.0439).abs() < 1e-4);
    }

    #[test]
    fn blob_rejects_bad_inputs() {
        assert!(render_blob(1.5, 0.5, 0.1, 33).is_err());
        assert!(render_blob(0.5, f64::NAN, 0.1, 33).is_err());
        assert!(render_blob(0.5, 0.5, 0.0, 33).is_err());
        assert!(render_blob(0.5, 0.5, 0.1, 4).is_err());
    }

    #[test]
    fn square_foreground_area_matches_nominal_side() {
        let res = 64;
        let p = SpriteParams::new(ShapeKind::Square, 1.0, 0.0, 0.5, 0.5).unwrap();
        let img = render_sprite(&p, res).unwrap();
        let area: f32 = img.pixels.iter().sum();
        let nominal = (0.3 * res as f32) * (0.3 * res as f32);
        assert!(
            (area - nominal).abs() < 0.05 * nominal,
            "area {area} vs nominal {nominal}"
        );
    }

    #[test]
    fn square_quarter_turn_equals_rotated_image() {
        let res = 32;
        let a = render_sprite(
            &SpriteParams::new(ShapeKind::Square, 1.0, 0.0, 0.5, 0.5).unwrap(),
            res,
        )
        .unwrap();
        let b = render_sprite(
            &SpriteParams::new(ShapeKind::Square, 1.0, std::f64::consts::FRAC_PI_2, 0.5, 0.5)
                .unwrap(),
            res,
        )
        .unwrap();
        // rotate a by 90 degrees: out[r][c] = in[c][res-1-r]
        for r in 0..res {
            for c in 0..res {
                assert_eq!(b.at(0, r, c), a.at(0, c, res - 1 - r), "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn ellipse_area_scales_quadratically() {
        let res = 64;
        let small = render_sprite(
            &SpriteParams::new(ShapeKind::Ellipse, 0.5, 0.0, 0.5, 0.5).unwrap(),
            res,
        )
        .unwrap();
        let large = render_sprite(
            &SpriteParams::new(ShapeKind::Ellipse, 1.0, 0.0, 0.5, 0.5).unwrap(),
            res,
        )
        .unwrap();
        let ratio: f32 =
            small.pixels.iter().sum::<f32>() / large.pixels.iter().sum::<f32>();
        assert!((ratio - 0.25).abs() < 0.025, "ratio {ratio}");
    }

    #[test]
    fn sprite_background_is_exactly_zero() {
        let img = render_sprite(
            &SpriteParams::new(ShapeKind::Triangle, 0.75, 1.1, 0.4, 0.6).unwrap(),
            32,
        )
        .unwrap();
        assert_eq!(img.at(0, 0, 0), 0.0);
        assert_eq!(img.at(0, 31, 31), 0.0);
        assert!(img.pixels.iter().any(|&v| v > 0.5));
    }

    #[test]
    fn unknown_shape_index_is_error() {
        assert!(ShapeKind::from_index(3).is_err());
    }

    #[test]
    fn colorize_scales_channels() {
        let img = Image::new(1, 1, 2, vec![1.0, 0.5]).unwrap();
        let out = colorize(&img, 0, &[[0.2, 0.4, 0.8]]).unwrap();
        assert_eq!(out.channels, 3);
        assert_eq!(out.at(0, 0, 0), 0.2);
        assert_eq!(out.at(1, 0, 1), 0.2);
        assert_eq!(out.at(2, 0, 1), 0.4);
        // black stays black
        let black = Image::new(1, 1, 1, vec![0.0]).unwrap();
        let out = colorize(&black, 2, &PALETTE).unwrap();
        assert_eq!(out.pixels, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn colorize_rejects_bad_index() {
        let img = Image::new(1, 1, 1, vec![1.0]).unwrap();
        assert!(colorize(&img, 6, &PALETTE).is_err());
    }
}
