//! Float image buffers and file IO.
//!
//! Color and mask images are 8-bit PNG; depth, opacity, and weight maps are
//! single-channel 32-bit PFM. PFM rows are stored bottom-up and the scale
//! header's sign declares endianness (positive = big-endian, which is what
//! the writer emits); the reader honors either sign.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("png error on {path}: {source}")]
    Png {
        path: String,
        source: image::ImageError,
    },
    #[error("bad pfm file {path}: {reason}")]
    BadPfm { path: String, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// RGB image with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgbF32 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

impl ImageRgbF32 {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> [f32; 3] {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: [f32; 3]) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let mut buf = image::RgbImage::new(self.width, self.height);
        for (i, px) in self.data.iter().enumerate() {
            let x = i as u32 % self.width;
            let y = i as u32 / self.width;
            buf.put_pixel(
                x,
                y,
                image::Rgb([
                    (px[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
        buf.save(path).map_err(|source| ImageError::Png {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Png {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (width, height) = (img.width(), img.height());
        let data = img
            .pixels()
            .map(|p| {
                [
                    p.0[0] as f32 / 255.0,
                    p.0[1] as f32 / 255.0,
                    p.0[2] as f32 / 255.0,
                ]
            })
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Single-channel float image (depth, opacity, weights, masks).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, v: f32) -> Self {
        Self {
            width,
            height,
            data: vec![v; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f32) {
        self.data[(y * self.width + x) as usize] = v;
    }

    /// Writes an 8-bit grayscale PNG (values clamped to [0, 1]).
    pub fn save_png_gray(&self, path: &Path) -> Result<(), ImageError> {
        let mut buf = image::GrayImage::new(self.width, self.height);
        for (i, &v) in self.data.iter().enumerate() {
            let x = i as u32 % self.width;
            let y = i as u32 / self.width;
            buf.put_pixel(x, y, image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
        }
        buf.save(path).map_err(|source| ImageError::Png {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads an 8-bit grayscale PNG into floats in [0, 1].
    pub fn from_png_gray(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Png {
                path: path.display().to_string(),
                source,
            })?
            .to_luma8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        })
    }

    /// Writes a grayscale PFM (big-endian, positive scale, bottom-up rows).
    pub fn save_pfm(&self, path: &Path) -> Result<(), ImageError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        write!(w, "Pf\n{} {}\n1.0\n", self.width, self.height).map_err(|e| io_err(path, e))?;
        for row in (0..self.height).rev() {
            for col in 0..self.width {
                w.write_all(&self.at(col, row).to_be_bytes())
                    .map_err(|e| io_err(path, e))?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<Self, ImageError> {
        let bad = |reason: &str| ImageError::BadPfm {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;

        // Header: three whitespace-separated tokens, then one whitespace
        // byte, then raw floats.
        let mut pos = 0;
        let mut token = || -> Result<String, ImageError> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        if magic != "Pf" {
            return Err(bad("expected grayscale magic 'Pf'"));
        }
        let width: u32 = token()?.parse().map_err(|_| bad("bad width"))?;
        let height: u32 = token()?.parse().map_err(|_| bad("bad height"))?;
        let scale: f32 = token()?.parse().map_err(|_| bad("bad scale"))?;
        pos += 1; // single whitespace after the scale line
        let n = (width * height) as usize;
        if bytes.len() < pos + n * 4 {
            return Err(bad("truncated pixel data"));
        }
        let big_endian = scale > 0.0;
        let mut img = ImageF32::new(width, height);
        for row in 0..height {
            let src_row = height - 1 - row; // bottom-up storage
            for col in 0..width {
                let off = pos + ((src_row * width + col) as usize) * 4;
                let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
                let v = if big_endian {
                    f32::from_be_bytes(raw)
                } else {
                    f32::from_le_bytes(raw)
                };
                img.set(col, row, v);
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pfm_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let mut img = ImageF32::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 - 7.0) * 0.337;
        }
        let path = dir.path().join("x.pfm");
        img.save_pfm(&path).unwrap();
        let loaded = ImageF32::load_pfm(&path).unwrap();
        assert_eq!(img, loaded);
    }

    #[test]
    fn pfm_reader_handles_little_endian() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("le.pfm");
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend(1.5f32.to_le_bytes());
        bytes.extend((-2.25f32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let img = ImageF32::load_pfm(&path).unwrap();
        assert_eq!(img.data, vec![1.5, -2.25]);
    }

    #[test]
    fn truncated_pfm_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        std::fs::write(&path, b"Pf\n4 4\n1.0\nxx").unwrap();
        assert!(matches!(
            ImageF32::load_pfm(&path),
            Err(ImageError::BadPfm { .. })
        ));
    }

    #[test]
    fn png_round_trip_preserves_8bit_values() {
        let dir = tempdir().unwrap();
        let mut img = ImageRgbF32::new(4, 4);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = [
                (i as f32) / 16.0,
                1.0 - (i as f32) / 16.0,
                ((i * 37) % 256) as f32 / 255.0,
            ];
        }
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let loaded = ImageRgbF32::load_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&loaded.data) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
