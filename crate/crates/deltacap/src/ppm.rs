//! Binary PPM (P6, maxval 255) reading and writing.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with u8 channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>, // 3 bytes per pixel
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Values normalized to [0, 1] by division by 255, channel-minor.
    pub fn to_unit_floats(&self) -> Vec<f64> {
        self.pixels.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

pub fn encode_p6(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_p6(bytes: &[u8]) -> Result<RgbImage> {
    let mut cursor = 0usize;
    let mut token = |what: &str| -> Result<String> {
        // skip whitespace and # comments between header tokens
        loop {
            match bytes.get(cursor) {
                Some(b) if b.is_ascii_whitespace() => cursor += 1,
                Some(b'#') => {
                    while cursor < bytes.len() && bytes[cursor] != b'\n' {
                        cursor += 1;
                    }
                }
                _ => break,
            }
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(Error::Data(format!("ppm: missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..cursor]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P6" {
        return Err(Error::Data(format!("ppm: expected P6, got {magic}")));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|e| Error::Data(format!("ppm: bad width: {e}")))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|e| Error::Data(format!("ppm: bad height: {e}")))?;
    let maxval: usize = token("maxval")?
        .parse()
        .map_err(|e| Error::Data(format!("ppm: bad maxval: {e}")))?;
    if maxval != 255 {
        return Err(Error::Data(format!("ppm: maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    cursor += 1;
    let need = width * height * 3;
    let raster = bytes
        .get(cursor..cursor + need)
        .ok_or_else(|| Error::Data("ppm: truncated raster".into()))?;
    Ok(RgbImage {
        width,
        height,
        pixels: raster.to_vec(),
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_p6(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_p6(&buf)
}
