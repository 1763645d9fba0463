use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::annotation::write_atomic;
use crate::error::{check_dim, Error, Result};

/// Value range that was mapped onto `0..=255`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageRange {
    pub min: f64,
    pub max: f64,
}

impl ImageRange {
    /// Inverse of the 8-bit mapping.
    pub fn to_value(&self, byte: u8) -> f64 {
        self.min + (self.max - self.min) * f64::from(byte) / 255.0
    }
}

/// Affine map of `[min, max]` to `[0, 255]`. A constant image maps to 0.
pub fn to_gray8(image: &[f64]) -> (Vec<u8>, ImageRange) {
    let min = image.iter().copied().fold(f64::INFINITY, f64::min);
    let max = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if image.is_empty() {
        ImageRange { min: 0.0, max: 0.0 }
    } else {
        ImageRange { min, max }
    };
    let span = range.max - range.min;
    let bytes = image
        .iter()
        .map(|v| {
            if span > 0.0 {
                (255.0 * (v - range.min) / span).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (bytes, range)
}

/// `out.png` -> `out.range.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("range.txt")
}

fn write_sidecar(path: &Path, range: &ImageRange) -> Result<()> {
    let side = sidecar_path(path);
    let text = format!("min: {:e}\nmax: {:e}\n", range.min, range.max);
    write_atomic(&side, text.as_bytes())
}

/// Binary (P5) PGM plus range sidecar.
pub fn write_pgm(path: &Path, image: &[f64], width: usize, height: usize) -> Result<ImageRange> {
    check_dim("image pixels", width * height, image.len())?;
    let (bytes, range) = to_gray8(image);
    let mut out = Vec::with_capacity(bytes.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n").expect("write to Vec");
    out.extend_from_slice(&bytes);
    write_atomic(path, &out)?;
    write_sidecar(path, &range)?;
    Ok(range)
}

/// 8-bit grayscale PNG plus range sidecar.
pub fn write_png(path: &Path, image: &[f64], width: usize, height: usize) -> Result<ImageRange> {
    check_dim("image pixels", width * height, image.len())?;
    let (bytes, range) = to_gray8(image);
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer length checked above");
    let mut png = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
    write_atomic(path, &png)?;
    write_sidecar(path, &range)?;
    Ok(range)
}

/// Picks PGM or PNG from the file extension.
pub fn write_image(path: &Path, image: &[f64], width: usize, height: usize) -> Result<ImageRange> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => write_pgm(path, image, width, height),
        Some("png") => write_png(path, image, width, height),
        other => Err(Error::InvalidInput(format!(
            "unsupported image extension {other:?} (use .pgm or .png)"
        ))),
    }
}

/// Reads a binary PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        section: "pgm header".into(),
        message: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let body = &data[pos + 1..];
    if body.len() != w * h {
        return Err(bad("pixel data length does not match header"));
    }
    Ok((w, h, body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_mapping_spans_full_range() {
        let (bytes, range) = to_gray8(&[-1.0, 0.0, 1.0]);
        assert_eq!(bytes, vec![0, 128, 255]);
        assert_eq!(range, ImageRange { min: -1.0, max: 1.0 });
        assert_eq!(range.to_value(255), 1.0);
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let (bytes, _) = to_gray8(&[0.5; 4]);
        assert_eq!(bytes, vec![0; 4]);
    }

    #[test]
    fn pgm_round_trip_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.pgm");
        let img: Vec<f64> = (0..12).map(f64::from).collect();
        write_pgm(&path, &img, 4, 3).unwrap();
        let (w, h, bytes) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(bytes[0], 0);
        assert_eq!(bytes[11], 255);
        let side = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(side.contains("max: 1.1e1"), "{side}");
    }

    #[test]
    fn unknown_extension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_image(&dir.path().join("v.bmp"), &[0.0], 1, 1).is_err());
    }
}
