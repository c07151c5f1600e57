//! Bit-exact file formats.
//!
//! * HSC cube: one JSON header line, then `nx*ny*nbands` little-endian f32
//!   values in pixel-major order. No trailing bytes.
//! * HSM sampled data: one JSON header line, then `count` records of
//!   (u32 LE voxel index, f32 LE value), indices strictly increasing.
//! * HSF factor matrix: one JSON header line, then `rows*cols` f32 LE values
//!   row-major. Inspection aid for solver factors.
//! * PGM: binary 8-bit grayscale (`P5`).
//!
//! Values are f32 on disk and f64 in memory; the promotion is exact, so
//! store∘load is the identity on anything that came from disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::{HyperCube, WavenumberAxis};
use crate::sampling::{SampledData, SamplingMask};

const MAX_HEADER_BYTES: usize = 1 << 16;

#[derive(Debug, Serialize, Deserialize)]
struct CubeHeader {
    magic: String,
    nx: usize,
    ny: usize,
    nbands: usize,
    wn_start: f64,
    wn_step: f64,
    dtype: String,
    order: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleHeader {
    magic: String,
    nx: usize,
    ny: usize,
    nbands: usize,
    wn_start: f64,
    wn_step: f64,
    count: usize,
    seed: u64,
    fraction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FactorHeader {
    magic: String,
    rows: usize,
    cols: usize,
    dtype: String,
}

/// Provenance of a sampled-data file, recorded alongside the measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub fraction: f64,
}

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

/// Reads the header line (everything before the first `\n`). Returns the
/// JSON bytes and the payload offset (header length including newline).
fn read_header_line<R: Read>(reader: &mut R) -> Result<(Vec<u8>, u64)> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte)? {
            0 => {
                return Err(format_err(
                    line.len() as u64,
                    "unexpected end of file before header newline",
                ))
            }
            _ => {
                if byte[0] == b'\n' {
                    let offset = line.len() as u64 + 1;
                    return Ok((line, offset));
                }
                line.push(byte[0]);
                if line.len() > MAX_HEADER_BYTES {
                    return Err(format_err(line.len() as u64, "header line too long"));
                }
            }
        }
    }
}

fn f32_storable(v: f64) -> Result<f32> {
    let f = v as f32;
    if !f.is_finite() {
        return Err(Error::Parameter(format!(
            "value {v} does not fit in 32-bit float storage"
        )));
    }
    Ok(f)
}

/// Reads exactly `buf.len()` bytes or reports the byte offset of the first
/// missing byte.
fn read_payload<R: Read>(reader: &mut R, buf: &mut [u8], payload_start: u64) -> Result<()> {
    let mut filled = 0usize;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..])? {
            0 => {
                return Err(format_err(
                    payload_start + filled as u64,
                    format!(
                        "payload truncated: expected {} bytes, found {}",
                        buf.len(),
                        filled
                    ),
                ))
            }
            n => filled += n,
        }
    }
    Ok(())
}

fn expect_no_trailing<R: Read>(reader: &mut R, end_offset: u64) -> Result<()> {
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        return Err(format_err(end_offset, "trailing bytes after payload"));
    }
    Ok(())
}

pub fn store_cube(cube: &HyperCube, path: &Path) -> Result<()> {
    let header = CubeHeader {
        magic: "HSC1".into(),
        nx: cube.nx(),
        ny: cube.ny(),
        nbands: cube.nbands(),
        wn_start: cube.axis().start,
        wn_step: cube.axis().step,
        dtype: "f32le".into(),
        order: "pixel-major".into(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Parameter(e.to_string()))?;
    w.write_all(b"\n")?;
    for &v in cube.values() {
        w.write_all(&f32_storable(v)?.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<HyperCube> {
    let mut r = BufReader::new(File::open(path)?);
    let (line, payload_start) = read_header_line(&mut r)?;
    let header: CubeHeader = serde_json::from_slice(&line)
        .map_err(|e| format_err(0, format!("malformed HSC header: {e}")))?;
    if header.magic != "HSC1" {
        return Err(format_err(0, format!("bad magic {:?}, expected HSC1", header.magic)));
    }
    if header.dtype != "f32le" || header.order != "pixel-major" {
        return Err(format_err(
            0,
            format!("unsupported dtype/order {:?}/{:?}", header.dtype, header.order),
        ));
    }
    let axis = WavenumberAxis::new(header.wn_start, header.wn_step, header.nbands)
        .map_err(|e| format_err(0, e.to_string()))?;
    let n = header
        .nx
        .checked_mul(header.ny)
        .and_then(|v| v.checked_mul(header.nbands))
        .ok_or_else(|| format_err(0, "header dimensions overflow"))?;

    let mut buf = vec![0u8; n * 4];
    read_payload(&mut r, &mut buf, payload_start)?;
    expect_no_trailing(&mut r, payload_start + buf.len() as u64)?;

    let mut values = Vec::with_capacity(n);
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(
                payload_start + 4 * i as u64,
                format!("non-finite value {v} at voxel {i}"),
            ));
        }
        values.push(v as f64);
    }
    HyperCube::new(header.nx, header.ny, axis, values).map_err(|e| format_err(0, e.to_string()))
}

pub fn store_sampled(data: &SampledData, meta: SampleMeta, path: &Path) -> Result<()> {
    if data.mask.n_voxels() > u32::MAX as usize {
        return Err(Error::Parameter(
            "cube too large for 32-bit voxel indices in HSM".into(),
        ));
    }
    let header = SampleHeader {
        magic: "HSM1".into(),
        nx: data.mask.nx,
        ny: data.mask.ny,
        nbands: data.mask.nbands,
        wn_start: data.axis.start,
        wn_step: data.axis.step,
        count: data.mask.len(),
        seed: meta.seed,
        fraction: meta.fraction,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Parameter(e.to_string()))?;
    w.write_all(b"\n")?;
    for (&v, &x) in data.mask.indices().iter().zip(&data.values) {
        w.write_all(&(v as u32).to_le_bytes())?;
        w.write_all(&f32_storable(x)?.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_sampled(path: &Path) -> Result<(SampledData, SampleMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let (line, payload_start) = read_header_line(&mut r)?;
    let header: SampleHeader = serde_json::from_slice(&line)
        .map_err(|e| format_err(0, format!("malformed HSM header: {e}")))?;
    if header.magic != "HSM1" {
        return Err(format_err(0, format!("bad magic {:?}, expected HSM1", header.magic)));
    }
    let axis = WavenumberAxis::new(header.wn_start, header.wn_step, header.nbands)
        .map_err(|e| format_err(0, e.to_string()))?;
    let n_voxels = header
        .nx
        .checked_mul(header.ny)
        .and_then(|v| v.checked_mul(header.nbands))
        .ok_or_else(|| format_err(0, "header dimensions overflow"))?;

    let mut buf = vec![0u8; header.count * 8];
    read_payload(&mut r, &mut buf, payload_start)?;
    expect_no_trailing(&mut r, payload_start + buf.len() as u64)?;

    let mut indices = Vec::with_capacity(header.count);
    let mut values = Vec::with_capacity(header.count);
    let mut prev: Option<usize> = None;
    for (t, rec) in buf.chunks_exact(8).enumerate() {
        let offset = payload_start + 8 * t as u64;
        let idx = u32::from_le_bytes(rec[..4].try_into().unwrap()) as usize;
        let val = f32::from_le_bytes(rec[4..].try_into().unwrap());
        if idx >= n_voxels {
            return Err(format_err(offset, format!("voxel index {idx} outside 0..{n_voxels}")));
        }
        if let Some(p) = prev {
            if idx <= p {
                return Err(format_err(
                    offset,
                    format!("voxel indices must be strictly increasing ({p} then {idx})"),
                ));
            }
        }
        if !val.is_finite() {
            return Err(format_err(offset + 4, format!("non-finite value at record {t}")));
        }
        prev = Some(idx);
        indices.push(idx);
        values.push(val as f64);
    }
    let mask = SamplingMask::new(header.nx, header.ny, header.nbands, indices)
        .map_err(|e| format_err(0, e.to_string()))?;
    let data = SampledData::new(mask, values, axis).map_err(|e| format_err(0, e.to_string()))?;
    Ok((
        data,
        SampleMeta { seed: header.seed, fraction: header.fraction },
    ))
}

/// Dumps a factor matrix (row-major f32) for inspection.
pub fn store_factor_matrix(matrix: &ndarray::Array2<f64>, path: &Path) -> Result<()> {
    let (rows, cols) = matrix.dim();
    let header = FactorHeader {
        magic: "HSF1".into(),
        rows,
        cols,
        dtype: "f32le".into(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Parameter(e.to_string()))?;
    w.write_all(b"\n")?;
    for &v in matrix.iter() {
        w.write_all(&f32_storable(v)?.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_factor_matrix(path: &Path) -> Result<ndarray::Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let (line, payload_start) = read_header_line(&mut r)?;
    let header: FactorHeader = serde_json::from_slice(&line)
        .map_err(|e| format_err(0, format!("malformed HSF header: {e}")))?;
    if header.magic != "HSF1" || header.dtype != "f32le" {
        return Err(format_err(0, "bad HSF magic or dtype"));
    }
    let n = header
        .rows
        .checked_mul(header.cols)
        .ok_or_else(|| format_err(0, "header dimensions overflow"))?;
    let mut buf = vec![0u8; n * 4];
    read_payload(&mut r, &mut buf, payload_start)?;
    expect_no_trailing(&mut r, payload_start + buf.len() as u64)?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    ndarray::Array2::from_shape_vec((header.rows, header.cols), values)
        .map_err(|e| format_err(0, e.to_string()))
}

/// Binary 8-bit PGM bytes for a `width x height` gray image, row-major from
/// the top row.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!(
            "{} pixels for a {width}x{height} PGM",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let bytes = pgm_bytes(width, height, pixels)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
