//! Grid file format.
//!
//! Layout (little-endian throughout): magic "GRD1", then a u32 byte length
//! followed by that many bytes of UTF-8 JSON header, then the payload as
//! band-major row-major binary32 samples. NaN encodes nodata and its
//! payload bits are preserved verbatim, so write∘read is bitwise identity.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GeoTransform, Grid, Stack};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"GRD1";

/// Opaque CRS tag written for rasters produced by this crate. Readers
/// treat the field as a label and never interpret it.
const LOCAL_CRS: &str = "local-meters";

#[derive(Serialize, Deserialize)]
struct Header {
    width: u64,
    height: u64,
    band_count: u64,
    /// origin_x, pixel_w, rot_x, origin_y, rot_y, pixel_h
    transform: [f64; 6],
    crs: String,
    band_names: Vec<String>,
}

fn write_impl(path: &Path, header: &Header, bands: &[&[f32]]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::format("header too large for length prefix"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(64 * 1024);
    for band in bands {
        for chunk in band.chunks(16 * 1024) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_stack(stack: &Stack, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        width: stack.width() as u64,
        height: stack.height() as u64,
        band_count: stack.band_count() as u64,
        transform: stack.transform().to_array(),
        crs: LOCAL_CRS.to_string(),
        band_names: stack.names().to_vec(),
    };
    let bands: Vec<&[f32]> = stack.bands().iter().map(|b| b.values()).collect();
    write_impl(path.as_ref(), &header, &bands)
}

pub fn write_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        width: grid.width() as u64,
        height: grid.height() as u64,
        band_count: 1,
        transform: grid.transform().to_array(),
        crs: LOCAL_CRS.to_string(),
        band_names: vec!["band_0".to_string()],
    };
    write_impl(path.as_ref(), &header, &[grid.values()])
}

fn read_impl(path: &Path) -> Result<(Header, Vec<Vec<f32>>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::truncation("file shorter than magic"))?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:02x?}, expected \"GRD1\"",
            magic
        )));
    }

    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::truncation("file ends inside header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; header_len];
    r.read_exact(&mut json)
        .map_err(|_| Error::truncation("file ends inside header"))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::format(format!("bad header: {e}")))?;

    let width = header.width as usize;
    let height = header.height as usize;
    let band_count = header.band_count as usize;
    if band_count == 0 {
        return Err(Error::format("band_count is zero"));
    }
    if header.band_names.len() != band_count {
        return Err(Error::format(format!(
            "{} band names for {} bands",
            header.band_names.len(),
            band_count
        )));
    }
    let samples_per_band = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("dimensions overflow"))?;

    let mut bands = Vec::with_capacity(band_count);
    let mut bytes = vec![0u8; samples_per_band * 4];
    for b in 0..band_count {
        r.read_exact(&mut bytes).map_err(|_| {
            Error::truncation(format!(
                "payload ends inside band {b}: expected {} samples per band",
                samples_per_band
            ))
        })?;
        let band: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bands.push(band);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after declared payload"));
    }
    Ok((header, bands))
}

fn transform_of(header: &Header) -> Result<GeoTransform> {
    let t = GeoTransform::from_array(header.transform);
    t.validate()
        .map_err(|e| Error::format(format!("bad transform in header: {e}")))?;
    Ok(t)
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<Stack> {
    let (header, raw_bands) = read_impl(path.as_ref())?;
    let transform = transform_of(&header)?;
    let mut bands = Vec::with_capacity(raw_bands.len());
    for values in raw_bands {
        bands.push(
            Grid::new(header.width as usize, header.height as usize, transform, values)
                .map_err(|e| Error::format(format!("bad band geometry: {e}")))?,
        );
    }
    Stack::new(bands, header.band_names.clone())
        .map_err(|e| Error::format(format!("inconsistent header: {e}")))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let (header, mut raw_bands) = read_impl(path.as_ref())?;
    if raw_bands.len() != 1 {
        return Err(Error::format(format!(
            "expected a single-band file, found {} bands",
            raw_bands.len()
        )));
    }
    let transform = transform_of(&header)?;
    Grid::new(
        header.width as usize,
        header.height as usize,
        transform,
        raw_bands.pop().unwrap(),
    )
    .map_err(|e| Error::format(format!("bad band geometry: {e}")))
}
