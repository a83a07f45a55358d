//! Disk formats for activation and gradient maps: 8-bit PGM and PNG for
//! eyeballing, raw little-endian f32 for lossless downstream reads.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || width * height != len {
        return Err(Error::Constraint(format!(
            "map of {len} values does not fill {width}x{height}"
        )));
    }
    Ok(())
}

/// [0,1] clamped, rounded to u8 levels.
fn gray_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Min-max rescale to [0,1] for maps in arbitrary units; a constant map
/// comes back as zeros.
pub fn scaled_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi.is_finite() && lo.is_finite()) || hi <= lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Binary (P5) PGM, one byte per pixel, values clamped to [0,1].
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, values: &[f64]) -> Result<()> {
    check_dims(width, height, values.len())?;
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(&gray_bytes(values))?;
    Ok(())
}

pub fn save_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_pgm(std::io::BufWriter::new(f), width, height, values)
}

pub fn save_png_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    check_dims(width, height, values.len())?;
    let img = image::GrayImage::from_raw(width as u32, height as u32, gray_bytes(values))
        .expect("dims checked");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Raw little-endian f32 payload, no header; exact up to f32 rounding.
pub fn write_raw_f32<W: Write>(mut w: W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_raw_f32(path: &Path, values: &[f64]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_raw_f32(std::io::BufWriter::new(f), values)
}

pub fn load_raw_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a whole number of f32 values",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `<stem>.pgm` and `<stem>.bin` (and `<stem>.png` when asked) into
/// `dir`, returning the paths written.
pub fn save_map_set(
    dir: &Path,
    stem: &str,
    width: usize,
    height: usize,
    values: &[f64],
    png: bool,
) -> Result<Vec<PathBuf>> {
    check_dims(width, height, values.len())?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let pgm = dir.join(format!("{stem}.pgm"));
    save_pgm(&pgm, width, height, values)?;
    written.push(pgm);
    let bin = dir.join(format!("{stem}.bin"));
    save_raw_f32(&bin, values)?;
    written.push(bin);
    if png {
        let p = dir.join(format!("{stem}.png"));
        save_png_gray(&p, width, height, values)?;
        written.push(p);
    }
    Ok(written)
}
