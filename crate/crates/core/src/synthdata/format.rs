//! Dataset file format (little-endian).
//!
//! Layout: magic `CAPD`, version u16 = 1, renderer id u8, channels u8,
//! height u16, width u16, factor count u8, then per factor: name length u8 +
//! UTF-8 name + cardinality u32 + grid values as f32; then pair count u64;
//! then image pixels as f32 in enumeration order. Factor vectors are implied
//! by sample order and never stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, FactorSpec, RendererKind, Result};

pub const MAGIC: &[u8; 4] = b"CAPD";
pub const VERSION: u16 = 1;

fn format_err(field: &str, detail: impl Into<String>) -> DataError {
    DataError::Format {
        field: field.into(),
        detail: detail.into(),
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dataset.renderer.id()])?;
    w.write_all(&[dataset.channels as u8])?;
    w.write_all(&(dataset.height as u16).to_le_bytes())?;
    w.write_all(&(dataset.width as u16).to_le_bytes())?;
    let spec = &dataset.spec;
    w.write_all(&[spec.n_factors() as u8])?;
    for (name, grid) in spec.names().iter().zip(spec.grids()) {
        let bytes = name.as_bytes();
        if bytes.len() > u8::MAX as usize {
            return Err(format_err("factor name", format!("{name:?} exceeds 255 bytes")));
        }
        w.write_all(&[bytes.len() as u8])?;
        w.write_all(bytes)?;
        w.write_all(&(grid.len() as u32).to_le_bytes())?;
        for &v in grid {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    for &px in dataset.images_raw() {
        w.write_all(&px.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| format_err(field, format!("truncated: {e}")))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(format_err(
            "magic",
            format!("expected {MAGIC:?}, found {magic:?}"),
        ));
    }
    let mut version = [0u8; 2];
    read_exact(&mut r, &mut version, "version")?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(format_err("version", format!("unsupported version {version}")));
    }
    let mut byte = [0u8; 1];
    read_exact(&mut r, &mut byte, "renderer id")?;
    let renderer = RendererKind::from_id(byte[0])
        .ok_or_else(|| format_err("renderer id", format!("unknown id {}", byte[0])))?;
    read_exact(&mut r, &mut byte, "channels")?;
    let channels = byte[0] as usize;
    if channels != renderer.channels() {
        return Err(format_err(
            "channels",
            format!(
                "{channels} channels inconsistent with renderer {renderer:?} (expected {})",
                renderer.channels()
            ),
        ));
    }
    let mut dim = [0u8; 2];
    read_exact(&mut r, &mut dim, "height")?;
    let height = u16::from_le_bytes(dim) as usize;
    read_exact(&mut r, &mut dim, "width")?;
    let width = u16::from_le_bytes(dim) as usize;
    if height == 0 || width == 0 {
        return Err(format_err("dimensions", format!("{height}x{width} image dims")));
    }
    read_exact(&mut r, &mut byte, "factor count")?;
    let n_factors = byte[0] as usize;
    let mut names = Vec::with_capacity(n_factors);
    let mut grids = Vec::with_capacity(n_factors);
    for i in 0..n_factors {
        read_exact(&mut r, &mut byte, "factor name length")?;
        let mut name = vec![0u8; byte[0] as usize];
        read_exact(&mut r, &mut name, "factor name")?;
        let name = String::from_utf8(name)
            .map_err(|e| format_err("factor name", format!("factor {i}: {e}")))?;
        let mut card = [0u8; 4];
        read_exact(&mut r, &mut card, "cardinality")?;
        let card = u32::from_le_bytes(card) as usize;
        let mut grid = Vec::with_capacity(card);
        let mut buf = vec![0u8; card * 4];
        read_exact(&mut r, &mut buf, "grid values")?;
        for c in buf.chunks_exact(4) {
            grid.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        names.push(name);
        grids.push(grid);
    }
    let spec = FactorSpec::new(names, grids).map_err(|e| match e {
        DataError::InvalidArgument(detail) => format_err("factor grids", detail),
        other => other,
    })?;
    let mut count = [0u8; 8];
    read_exact(&mut r, &mut count, "pair count")?;
    let count = u64::from_le_bytes(count) as usize;
    if count != spec.total() {
        return Err(format_err(
            "pair count",
            format!(
                "header says {count} pairs but factor grids enumerate {}",
                spec.total()
            ),
        ));
    }
    let expected = count * channels * height * width;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(format_err(
            "image payload",
            format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                expected * 4
            ),
        ));
    }
    let mut images = Vec::with_capacity(expected);
    for c in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !(0.0..=1.0).contains(&v) {
            return Err(format_err(
                "image payload",
                format!("pixel value {v} outside [0,1]"),
            ));
        }
        images.push(v);
    }
    Dataset::from_parts(spec, renderer, channels, height, width, images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{blob_spec, enumerate_dataset, DEFAULT_BLOB_SIGMA};
    use tempfile::tempdir;

    fn tiny_dataset() -> Dataset {
        let spec = blob_spec(3).unwrap();
        enumerate_dataset(&spec, RendererKind::Blob, 8, DEFAULT_BLOB_SIGMA).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.capd");
        let d = tiny_dataset();
        write_dataset(&d, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn wrong_magic_is_named_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.capd");
        std::fs::write(&path, b"JUNKxxxxxxxxxxxxxxxx").unwrap();
        match read_dataset(&path) {
            Err(DataError::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pair_count_mismatch_is_named_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.capd");
        write_dataset(&tiny_dataset(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // pair count lives right before the pixel payload
        let payload = 9 * 64 * 4;
        let off = bytes.len() - payload - 8;
        bytes[off] = 77;
        std::fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(DataError::Format { field, .. }) => assert_eq!(field, "pair count"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_named_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.capd");
        write_dataset(&tiny_dataset(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match read_dataset(&path) {
            Err(DataError::Format { field, .. }) => assert_eq!(field, "image payload"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
