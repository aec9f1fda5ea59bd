//! Procedural blob and mini-sprite datasets with known generative factors,
//! persisted in a bit-exact binary format.

mod format;
mod render;

use rayon::prelude::*;
use thiserror::Error;

pub use format::{read_dataset, write_dataset};
pub use render::{colorize, render_blob, render_sprite, ShapeKind, SpriteParams, PALETTE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset format error in {field}: {detail}")]
    Format { field: String, detail: String },
    #[error("dataset io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Gaussian blob width in canvas fractions used by the default blob dataset.
pub const DEFAULT_BLOB_SIGMA: f64 = 0.1;

/// Which renderer produced a dataset; the id is stored in the file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RendererKind {
    Blob,
    Sprite,
    ColouredSprite,
}

impl RendererKind {
    pub fn id(self) -> u8 {
        match self {
            RendererKind::Blob => 0,
            RendererKind::Sprite => 1,
            RendererKind::ColouredSprite => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(RendererKind::Blob),
            1 => Some(RendererKind::Sprite),
            2 => Some(RendererKind::ColouredSprite),
            _ => None,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            RendererKind::ColouredSprite => 3,
            _ => 1,
        }
    }
}

/// Ordered factor names and their value grids; the dataset enumerates the
/// full cartesian product, last factor fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    names: Vec<String>,
    grids: Vec<Vec<f32>>,
}

impl FactorSpec {
    pub fn new(names: Vec<String>, grids: Vec<Vec<f32>>) -> Result<Self> {
        if names.len() != grids.len() {
            return Err(DataError::InvalidArgument(format!(
                "{} factor names but {} grids",
                names.len(),
                grids.len()
            )));
        }
        if names.is_empty() {
            return Err(DataError::InvalidArgument("no factors".into()));
        }
        for (name, grid) in names.iter().zip(&grids) {
            if grid.is_empty() {
                return Err(DataError::InvalidArgument(format!(
                    "factor {name:?} has an empty grid"
                )));
            }
            if !grid.iter().all(|v| v.is_finite()) {
                return Err(DataError::InvalidArgument(format!(
                    "factor {name:?} has non-finite grid values"
                )));
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(DataError::InvalidArgument(format!(
                    "factor {name:?} grid is not strictly increasing"
                )));
            }
        }
        Ok(FactorSpec { names, grids })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn grids(&self) -> &[Vec<f32>] {
        &self.grids
    }

    pub fn n_factors(&self) -> usize {
        self.names.len()
    }

    pub fn cardinality(&self, factor: usize) -> usize {
        self.grids[factor].len()
    }

    /// Total dataset size: product of cardinalities.
    pub fn total(&self) -> usize {
        self.grids.iter().map(Vec::len).product()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Grid indices of sample `i` in canonical order (last factor fastest).
    pub fn unrank(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0usize; self.n_factors()];
        for f in (0..self.n_factors()).rev() {
            let k = self.grids[f].len();
            idx[f] = i % k;
            i /= k;
        }
        idx
    }

    /// Factor values of sample `i`.
    pub fn values_at(&self, i: usize) -> Vec<f32> {
        self.unrank(i)
            .iter()
            .zip(&self.grids)
            .map(|(&j, grid)| grid[j])
            .collect()
    }

    /// Exact grid index of a value, or an error when it is not on the grid.
    pub fn index_of(&self, factor: usize, value: f32) -> Result<usize> {
        self.grids[factor]
            .iter()
            .position(|&v| v == value)
            .ok_or_else(|| {
                DataError::InvalidArgument(format!(
                    "value {value} is not on the grid of factor {:?}",
                    self.names[factor]
                ))
            })
    }
}

/// Evenly spaced grid over `[lo, hi]` inclusive; a single point collapses to
/// the midpoint.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f32> {
    match n {
        0 => Vec::new(),
        1 => vec![((lo + hi) / 2.0) as f32],
        _ => (0..n)
            .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64) as f32)
            .collect(),
    }
}

/// Default blob spec: an `n x n` position grid spanning the full canvas.
pub fn blob_spec(n: usize) -> Result<FactorSpec> {
    FactorSpec::new(
        vec!["x".into(), "y".into()],
        vec![linspace(0.0, 1.0, n), linspace(0.0, 1.0, n)],
    )
}

/// Mini-sprite spec: shape, scale, rotation, x, y. Positions span
/// `[0.25, 0.75]` so every shape stays fully on canvas.
pub fn sprite_spec(
    shapes: usize,
    scales: usize,
    rotations: usize,
    xs: usize,
    ys: usize,
) -> Result<FactorSpec> {
    if shapes > 3 {
        return Err(DataError::InvalidArgument(
            "at most 3 shapes are available".into(),
        ));
    }
    FactorSpec::new(
        vec![
            "shape".into(),
            "scale".into(),
            "rotation".into(),
            "x".into(),
            "y".into(),
        ],
        vec![
            (0..shapes).map(|i| i as f32).collect(),
            linspace(0.5, 1.0, scales),
            (0..rotations)
                .map(|i| (i as f64 * std::f64::consts::TAU / rotations as f64) as f32)
                .collect(),
            linspace(0.25, 0.75, xs),
            linspace(0.25, 0.75, ys),
        ],
    )
}

/// Coloured variant of [`sprite_spec`] with a trailing hue factor.
pub fn coloured_sprite_spec(
    shapes: usize,
    scales: usize,
    rotations: usize,
    xs: usize,
    ys: usize,
    hues: usize,
) -> Result<FactorSpec> {
    if hues > PALETTE.len() {
        return Err(DataError::InvalidArgument(format!(
            "at most {} hues are available",
            PALETTE.len()
        )));
    }
    let base = sprite_spec(shapes, scales, rotations, xs, ys)?;
    let mut names: Vec<String> = base.names.clone();
    let mut grids = base.grids.clone();
    names.push("hue".into());
    grids.push((0..hues).map(|i| i as f32).collect());
    FactorSpec::new(names, grids)
}

/// One rendered image: channels-first pixel grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(DataError::InvalidArgument(format!(
                "pixel count {} does not match {}x{}x{}",
                pixels.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.pixels[(channel * self.height + row) * self.width + col]
    }
}

/// The full cartesian product of a [`FactorSpec`] rendered to images, in
/// canonical enumeration order. Factor vectors are implied by sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: FactorSpec,
    pub renderer: RendererKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    images: Vec<f32>,
}

impl Dataset {
    pub fn from_parts(
        spec: FactorSpec,
        renderer: RendererKind,
        channels: usize,
        height: usize,
        width: usize,
        images: Vec<f32>,
    ) -> Result<Self> {
        let expect = spec.total() * channels * height * width;
        if images.len() != expect {
            return Err(DataError::InvalidArgument(format!(
                "image payload has {} values, expected {}",
                images.len(),
                expect
            )));
        }
        Ok(Dataset {
            spec,
            renderer,
            channels,
            height,
            width,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.spec.total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images_raw(&self) -> &[f32] {
        &self.images
    }

    /// Factor values of sample `i`.
    pub fn factors(&self, i: usize) -> Vec<f32> {
        self.spec.values_at(i)
    }
}

/// Renders every factor combination of `spec` in canonical order.
/// Deterministic: two calls with the same inputs yield identical datasets.
pub fn enumerate_dataset(
    spec: &FactorSpec,
    renderer: RendererKind,
    resolution: usize,
    blob_sigma: f64,
) -> Result<Dataset> {
    if resolution < 8 {
        return Err(DataError::InvalidArgument(format!(
            "resolution {resolution} below minimum of 8"
        )));
    }
    let required: &[&str] = match renderer {
        RendererKind::Blob => &["x", "y"],
        RendererKind::Sprite => &["shape", "scale", "rotation", "x", "y"],
        RendererKind::ColouredSprite => &["shape", "scale", "rotation", "x", "y", "hue"],
    };
    if spec.names().len() != required.len()
        || spec.names().iter().zip(required).any(|(a, b)| a != b)
    {
        return Err(DataError::InvalidArgument(format!(
            "renderer {renderer:?} requires factors {required:?}, spec has {:?}",
            spec.names()
        )));
    }

    let channels = renderer.channels();
    let n = spec.total();
    let img_len = channels * resolution * resolution;
    let mut images = vec![0.0f32; n * img_len];
    let render_one = |i: usize, out: &mut [f32]| -> Result<()> {
        let values = spec.values_at(i);
        let img = match renderer {
            RendererKind::Blob => {
                render_blob(values[0] as f64, values[1] as f64, blob_sigma, resolution)?
            }
            RendererKind::Sprite => {
                render_sprite(&SpriteParams::from_named(spec, &values)?, resolution)?
            }
            RendererKind::ColouredSprite => {
                let gray = render_sprite(&SpriteParams::from_named(spec, &values)?, resolution)?;
                let hue = values[spec.position("hue").expect("validated")] as usize;
                colorize(&gray, hue, &PALETTE)?
            }
        };
        out.copy_from_slice(&img.pixels);
        Ok(())
    };
    images
        .par_chunks_mut(img_len)
        .enumerate()
        .try_for_each(|(i, out)| render_one(i, out))?;
    Dataset::from_parts(
        spec.clone(),
        renderer,
        channels,
        resolution,
        resolution,
        images,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_non_increasing_grid() {
        let err = FactorSpec::new(
            vec!["a".into()],
            vec![vec![0.0, 0.0, 1.0]],
        );
        assert!(err.is_err());
    }

    #[test]
    fn enumeration_is_last_factor_fastest() {
        let spec = FactorSpec::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.0, 1.0], vec![10.0, 20.0, 30.0]],
        )
        .unwrap();
        assert_eq!(spec.total(), 6);
        assert_eq!(spec.values_at(0), vec![0.0, 10.0]);
        assert_eq!(spec.values_at(1), vec![0.0, 20.0]);
        assert_eq!(spec.values_at(3), vec![1.0, 10.0]);
        assert_eq!(spec.values_at(5), vec![1.0, 30.0]);
    }

    #[test]
    fn default_blob_grid_yields_1024_images() {
        let spec = blob_spec(32).unwrap();
        let d = enumerate_dataset(&spec, RendererKind::Blob, 32, DEFAULT_BLOB_SIGMA).unwrap();
        assert_eq!(d.len(), 1024);
        assert_eq!(d.image_len(), 1024);
    }

    #[test]
    fn default_sprite_product_is_36864() {
        let spec = sprite_spec(3, 6, 8, 16, 16).unwrap();
        assert_eq!(spec.total(), 36864);
    }

    #[test]
    fn enumerate_twice_is_byte_identical() {
        let spec = sprite_spec(2, 2, 3, 3, 3).unwrap();
        let a = enumerate_dataset(&spec, RendererKind::Sprite, 16, DEFAULT_BLOB_SIGMA).unwrap();
        let b = enumerate_dataset(&spec, RendererKind::Sprite, 16, DEFAULT_BLOB_SIGMA).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_pixels_in_unit_interval() {
        let spec = coloured_sprite_spec(3, 2, 3, 2, 2, 6).unwrap();
        let d =
            enumerate_dataset(&spec, RendererKind::ColouredSprite, 16, DEFAULT_BLOB_SIGMA)
                .unwrap();
        assert!(d
            .images_raw()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn value_not_on_grid_is_error() {
        let spec = blob_spec(4).unwrap();
        assert!(spec.index_of(0, 0.123).is_err());
        assert!(spec.index_of(0, spec.grids()[0][2]).is_ok());
    }
}
