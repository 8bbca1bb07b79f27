//! Raw lossless formats for measures and sinograms, and 16-bit PGM for figures.
//!
//! `OTR1`: magic, width and height (u32 LE), spacing (f64 LE), then `w·h` f64 LE values.
//! `OTS1`: magic, angle count and detector count (u32 LE), detector spacing (f64 LE),
//! then `A·D` f64 LE values in angle-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DiscreteMeasure, PixelGrid};
use crate::tomography::{ParallelBeamGeometry, Sinogram};

const MEASURE_MAGIC: &[u8; 4] = b"OTR1";
const SINOGRAM_MAGIC: &[u8; 4] = b"OTS1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_values(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("payload truncated, expected {n} values"))
        } else {
            Error::Io(e)
        }
    })?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| Error::Format("file too short for a header".into()))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn write_measure(w: &mut impl Write, m: &DiscreteMeasure) -> Result<()> {
    let g = m.grid();
    w.write_all(MEASURE_MAGIC)?;
    w.write_all(&(g.width() as u32).to_le_bytes())?;
    w.write_all(&(g.height() as u32).to_le_bytes())?;
    w.write_all(&g.spacing().to_le_bytes())?;
    for v in m.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_measure(r: &mut impl Read) -> Result<DiscreteMeasure> {
    expect_magic(r, MEASURE_MAGIC)?;
    let width = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let spacing = read_f64(r)?;
    let grid = PixelGrid::new(width, height, spacing)
        .map_err(|e| Error::Format(format!("bad grid header: {e}")))?;
    let values = read_values(r, grid.len())?;
    DiscreteMeasure::new(grid, values)
}

pub fn write_sinogram(w: &mut impl Write, s: &Sinogram) -> Result<()> {
    let g = s.geometry();
    w.write_all(SINOGRAM_MAGIC)?;
    w.write_all(&(g.angles() as u32).to_le_bytes())?;
    w.write_all(&(g.detectors() as u32).to_le_bytes())?;
    w.write_all(&g.detector_spacing().to_le_bytes())?;
    for v in s.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_sinogram(r: &mut impl Read) -> Result<Sinogram> {
    expect_magic(r, SINOGRAM_MAGIC)?;
    let angles = read_u32(r)? as usize;
    let detectors = read_u32(r)? as usize;
    let spacing = read_f64(r)?;
    let geom = ParallelBeamGeometry::new(angles, detectors, spacing)
        .map_err(|e| Error::Format(format!("bad geometry header: {e}")))?;
    let values = read_values(r, geom.len())?;
    Sinogram::new(geom, values)
}

pub fn save_measure(path: &Path, m: &DiscreteMeasure) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_measure(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_measure(path: &Path) -> Result<DiscreteMeasure> {
    read_measure(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sinogram(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    read_sinogram(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Binary 16-bit PGM of `values` (row-major, `width` columns), mapped affinely from
/// `[lo, hi]` onto `[0, 65535]` and clamped. A flat range renders black.
pub fn write_pgm_range(
    w: &mut impl Write,
    width: usize,
    height: usize,
    values: &[f64],
    lo: f64,
    hi: f64,
) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Contract(format!(
            "image has {} values for a {width}x{height} raster",
            values.len()
        )));
    }
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let span = hi - lo;
    // PGM rows run top to bottom; grid row 0 is the bottom of the domain
    for j in (0..height).rev() {
        for v in &values[j * width..(j + 1) * width] {
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let q = (t.clamp(0.0, 1.0) * 65535.0).round() as u16;
            w.write_all(&q.to_be_bytes())?;
        }
    }
    Ok(())
}

/// PGM of a measure rescaled from its own `[min, max]`.
pub fn write_pgm(w: &mut impl Write, m: &DiscreteMeasure) -> Result<()> {
    let (lo, hi) = value_range(m.values());
    write_pgm_range(w, m.grid().width(), m.grid().height(), m.values(), lo, hi)
}

pub fn save_pgm(path: &Path, m: &DiscreteMeasure) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn value_range(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Parse a 16-bit P5 file back to `(width, height, samples)` in grid row order.
pub fn read_pgm16(r: &mut impl Read) -> Result<(usize, usize, Vec<u16>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::Format("not a 16-bit binary PGM".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")))
    };
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != width * height * 2 {
        return Err(Error::Format("PGM payload size mismatch".into()));
    }
    let mut out = vec![0u16; width * height];
    for (k, c) in body.chunks_exact(2).enumerate() {
        let (row, col) = (k / width, k % width);
        out[(height - 1 - row) * width + col] = u16::from_be_bytes([c[0], c[1]]);
    }
    Ok((width, height, out))
}
