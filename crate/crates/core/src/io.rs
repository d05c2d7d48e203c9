//! Little-endian binary containers for images, sinograms and label maps.
//!
//! ```text
//! magic[4] | u32 version (=1) | u32 dim0 | u32 dim1 | f64 spacing | payload
//! ```
//!
//! `DRIM` images store `(nx, ny, voxel_size)` and f32 values row-major,
//! `DRSN` sinograms store `(n_angles, n_bins, bin_width)` and f32 values,
//! `DRLB` label maps store `(nx, ny, voxel_size)` and one u8 per voxel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Image, ProjSpec, Sinogram};

pub const IMAGE_MAGIC: &[u8; 4] = b"DRIM";
pub const SINOGRAM_MAGIC: &[u8; 4] = b"DRSN";
pub const LABEL_MAGIC: &[u8; 4] = b"DRLB";
pub const FORMAT_VERSION: u32 = 1;

struct Header {
    dim0: u32,
    dim1: u32,
    spacing: f64,
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], h: &Header) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&h.dim0.to_le_bytes())?;
    w.write_all(&h.dim1.to_le_bytes())?;
    w.write_all(&h.spacing.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<Header> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim0 = read_u32(r)?;
    let dim1 = read_u32(r)?;
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(Header {
        dim0,
        dim1,
        spacing: f64::from_le_bytes(b),
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_f32s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn ensure_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

pub fn encode_image(img: &Image, w: &mut impl Write) -> Result<()> {
    let g = img.grid();
    write_header(
        w,
        IMAGE_MAGIC,
        &Header {
            dim0: g.nx as u32,
            dim1: g.ny as u32,
            spacing: g.voxel_size,
        },
    )?;
    write_f32s(w, img.values())
}

pub fn decode_image(r: &mut impl Read) -> Result<Image> {
    let h = read_header(r, IMAGE_MAGIC)?;
    let grid = GridSpec::new(h.dim0 as usize, h.dim1 as usize, h.spacing)
        .map_err(|e| Error::Format(format!("bad image header: {e}")))?;
    let values = read_f32s(r, grid.len())?;
    ensure_eof(r)?;
    Image::new(grid, values)
}

pub fn encode_sinogram(sino: &Sinogram, w: &mut impl Write) -> Result<()> {
    let p = sino.proj();
    write_header(
        w,
        SINOGRAM_MAGIC,
        &Header {
            dim0: p.n_angles as u32,
            dim1: p.n_bins as u32,
            spacing: p.bin_width,
        },
    )?;
    write_f32s(w, sino.values())
}

pub fn decode_sinogram(r: &mut impl Read) -> Result<Sinogram> {
    let h = read_header(r, SINOGRAM_MAGIC)?;
    let proj = ProjSpec::new(h.dim0 as usize, h.dim1 as usize, h.spacing)
        .map_err(|e| Error::Format(format!("bad sinogram header: {e}")))?;
    let values = read_f32s(r, proj.len())?;
    ensure_eof(r)?;
    Sinogram::new(proj, values)
}

pub fn encode_labels(grid: GridSpec, labels: &[u8], w: &mut impl Write) -> Result<()> {
    if labels.len() != grid.len() {
        return Err(Error::Config(format!(
            "{} labels for a {}-voxel grid",
            labels.len(),
            grid.len()
        )));
    }
    write_header(
        w,
        LABEL_MAGIC,
        &Header {
            dim0: grid.nx as u32,
            dim1: grid.ny as u32,
            spacing: grid.voxel_size,
        },
    )?;
    w.write_all(labels)?;
    Ok(())
}

pub fn decode_labels(r: &mut impl Read) -> Result<(GridSpec, Vec<u8>)> {
    let h = read_header(r, LABEL_MAGIC)?;
    let grid = GridSpec::new(h.dim0 as usize, h.dim1 as usize, h.spacing)
        .map_err(|e| Error::Format(format!("bad label header: {e}")))?;
    let mut labels = vec![0u8; grid.len()];
    r.read_exact(&mut labels)?;
    ensure_eof(r)?;
    Ok((grid, labels))
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_image(img, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_image(&mut BufReader::new(File::open(path)?))
}

pub fn write_sinogram(path: impl AsRef<Path>, sino: &Sinogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_sinogram(sino, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    decode_sinogram(&mut BufReader::new(File::open(path)?))
}

pub fn write_labels(path: impl AsRef<Path>, grid: GridSpec, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_labels(grid, labels, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<(GridSpec, Vec<u8>)> {
    decode_labels(&mut BufReader::new(File::open(path)?))
}

/// 8-bit grayscale PNG of `values` (`width` columns, row-major) with
/// min-max windowing. Row 0 of the image is written as the top row.
pub fn write_png_gray(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    values: &[f64],
) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Config(format!(
            "{} values for a {width}x{height} png",
            values.len()
        )));
    }
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    write_png_raw(path, width, height, png::ColorType::Grayscale, &pixels)
}

pub fn write_png_rgb(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    rgb: &[u8],
) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Config("rgb buffer does not match dimensions".into()));
    }
    write_png_raw(path, width, height, png::ColorType::Rgb, rgb)
}

fn write_png_raw(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
