//! Image and table files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Write a single-channel little-endian PFM (rows stored bottom to top).
pub fn write_pfm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            out.write_f32::<LittleEndian>(img.get(x, y) as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b)? == 0 {
            break;
        }
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b[0]);
    }
    String::from_utf8(tok).map_err(|_| Error::Input("PFM header is not ASCII".into()))
}

/// Read a single-channel PFM of either byte order.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    if header_token(&mut r)? != "Pf" {
        return Err(Error::Input("not a single-channel PFM".into()));
    }
    let parse = |s: String| {
        s.parse::<f64>()
            .map_err(|_| Error::Input(format!("bad PFM header field '{s}'")))
    };
    let w = parse(header_token(&mut r)?)? as usize;
    let h = parse(header_token(&mut r)?)? as usize;
    let scale = parse(header_token(&mut r)?)?;
    let mut raw = vec![0f32; w * h];
    if scale < 0.0 {
        r.read_f32_into::<LittleEndian>(&mut raw)
    } else {
        r.read_f32_into::<byteorder::BigEndian>(&mut raw)
    }
    .map_err(|_| Error::Input("truncated PFM data".into()))?;
    let mut img = Image::new(w, h);
    for (row, chunk) in raw.chunks(w.max(1)).enumerate().take(h) {
        let y = h - 1 - row;
        for (x, v) in chunk.iter().enumerate() {
            img.set(x, y, *v as f64);
        }
    }
    Ok(img)
}

/// 16-bit PNG with depth in whole millimeters; invalid pixels are 0.
pub fn write_depth16(path: impl AsRef<Path>, depth: &Image, valid: &Mask) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let z = depth.get(x, y);
            let v = if valid.get(x, y) && z.is_finite() {
                z.round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            };
            Luma([v])
        });
    buf.save(path.as_ref())
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Depth in mm and validity from a 16-bit PNG written by [`write_depth16`].
pub fn read_depth16(path: impl AsRef<Path>) -> Result<(Image, Mask)> {
    let img = image::open(path.as_ref())
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.as_ref().display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img.pixels().map(|p| p.0[0] as f64).collect();
    let valid = Mask {
        width: w,
        height: h,
        data: data.iter().map(|&v| v > 0.0).collect(),
    };
    Ok((Image::from_vec(w, h, data)?, valid))
}

/// Grayscale image from a PFM, or from any 8/16-bit format scaled to [0, 1].
pub fn read_gray(path: impl AsRef<Path>) -> Result<Image> {
    let p = path.as_ref();
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        return read_pfm(p);
    }
    let img = image::open(p)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", p.display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Image::from_vec(
        w,
        h,
        img.pixels().map(|q| q.0[0] as f64 / 65535.0).collect(),
    )
}

/// Write records with a header row. Floats use Rust's shortest round-trip
/// formatting, so output does not depend on the locale.
pub fn write_csv<R: serde::Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}
