//! Netpbm writers and readers: binary PPM (P6) for scene images and binary
//! PGM (P5) for token-resolution heatmaps. Quantization is deterministic, so
//! identical inputs always produce identical bytes.

use crate::error::{BeraError, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an H x W x 3 image with values in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.ndim() != 3 || image.shape()[2] != 3 {
        return Err(BeraError::ShapeMismatch(format!(
            "ppm wants H x W x 3, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut bytes = Vec::with_capacity(20 + h * w * 3);
    write!(bytes, "P6\n{} {}\n255\n", w, h).expect("vec write");
    for v in image.data() {
        bytes.push(quantize(*v));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Scale a token-score grid to one byte per cell and write binary PGM.
/// Constant grids render as all-zero.
pub fn write_pgm(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    if values.len() != rows * cols {
        return Err(BeraError::DimensionMismatch {
            expected: rows * cols,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BeraError::DomainError("non-finite heatmap value".into()));
    }
    let mn = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = mx - mn;
    let mut bytes = Vec::with_capacity(20 + values.len());
    write!(bytes, "P5\n{} {}\n255\n", cols, rows).expect("vec write");
    for &v in values {
        let scaled = if span > 0.0 { (v - mn) / span } else { 0.0 };
        bytes.push(quantize(scaled));
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    // Netpbm header fields are whitespace-separated; '#' starts a comment
    // running to end of line.
    fn next_field(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(BeraError::CorruptFile("truncated netpbm header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn next_usize(&mut self) -> Result<usize> {
        let f = self.next_field()?;
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| BeraError::CorruptFile("bad netpbm header field".into()))
    }
}

/// Read a binary PPM written by `write_ppm` (or any maxval-255 P6 file).
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut r = HeaderReader {
        bytes: &bytes,
        pos: 0,
    };
    if r.next_field()? != b"P6" {
        return Err(BeraError::CorruptFile("not a P6 ppm".into()));
    }
    let w = r.next_usize()?;
    let h = r.next_usize()?;
    let maxval = r.next_usize()?;
    if maxval != 255 {
        return Err(BeraError::CorruptFile(format!(
            "unsupported ppm maxval {}",
            maxval
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = r.pos + 1;
    let need = h * w * 3;
    if bytes.len() < start + need {
        return Err(BeraError::CorruptFile("ppm raster truncated".into()));
    }
    let data: Vec<f64> = bytes[start..start + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tiny.ppm");
        let img = Tensor::new(
            vec![1, 2, 3],
            vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.5],
        )
        .unwrap();
        write_ppm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 0, 128]);
    }

    #[test]
    fn ppm_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.ppm");
        let img = Tensor::new(
            vec![2, 2, 3],
            (0..12).map(|i| i as f64 / 11.0).collect(),
        )
        .unwrap();
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), &[2, 2, 3]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Writing the reread image reproduces the file byte for byte.
        let p2 = dir.path().join("rt2.ppm");
        write_ppm(&p2, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn ppm_values_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let img = Tensor::new(vec![1, 1, 3], vec![-0.5, 2.0, 0.25]).unwrap();
        write_ppm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 64]);
    }

    #[test]
    fn pgm_scales_to_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        write_pgm(&p, &[1.0, 2.0, 3.0, 5.0], 2, 2).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 64, 128, 255]);
    }

    #[test]
    fn pgm_constant_grid_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        write_pgm(&p, &[4.2; 6], 2, 3).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[11..], &[0; 6]);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        assert!(write_pgm(&p, &[1.0; 5], 2, 3).is_err());
        assert!(write_pgm(&p, &[f64::NAN; 6], 2, 3).is_err());
    }

    #[test]
    fn read_ppm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ppm");
        fs::write(&p, b"P5\n2 2\n255\n....").unwrap();
        assert!(read_ppm(&p).is_err());
        fs::write(&p, b"P6\n9 9\n255\nxx").unwrap();
        assert!(matches!(read_ppm(&p), Err(BeraError::CorruptFile(_))));
    }

    #[test]
    fn read_ppm_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30]);
        fs::write(&p, bytes).unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!(img.shape(), &[1, 1, 3]);
        assert!((img.at3(0, 0, 0) - 10.0 / 255.0).abs() < 1e-12);
    }
}
