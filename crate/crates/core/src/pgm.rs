//! Binary PGM (P5) images with 8-bit samples.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Image(format!("expected P5 magic, found `{}`", fields[0])));
        }
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Image(format!("bad {what} `{s}` in PGM header")))
        };
        let width = num(&fields[1], "width")?;
        let height = num(&fields[2], "height")?;
        let maxval = num(&fields[3], "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Image(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let data = bytes
            .get(pos..pos + width * height)
            .ok_or_else(|| Error::Image("PGM raster is shorter than width x height".into()))?;
        let pixels = if maxval == 255 {
            data.to_vec()
        } else {
            data.iter()
                .map(|&p| ((p as usize * 255 + maxval / 2) / maxval).min(255) as u8)
                .collect()
        };
        Self::new(width, height, pixels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 32);
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert_eq!(GrayImage::parse(&buf).unwrap(), img);
    }

    #[test]
    fn comments_and_maxval() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# another\n15\n".to_vec();
        bytes.extend_from_slice(&[0, 15]);
        let img = GrayImage::parse(&bytes).unwrap();
        assert_eq!(img.pixels(), &[0, 255]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(GrayImage::parse(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::parse(b"P5\n2 2\n255\n\x00").is_err());
        assert!(GrayImage::parse(b"P5\n2").is_err());
    }
}
