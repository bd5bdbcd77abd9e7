//! Binary PGM (P5) images: 8-bit for renders, 16-bit big-endian for depth.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use crate::error::{Error, Result};

/// Depth maps are stored as `round(depth * DEPTH_SCALE)` in 16 bits.
pub const DEPTH_SCALE: f32 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            for &v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Pgm> {
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(Error::Format("bad PGM magic".into()));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // whitespace and comments between header tokens
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(Error::Truncated("PGM header".into())),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("non-numeric PGM header field".into()));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("PGM header field out of range".into()))?;
        }
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > u16::MAX as usize {
            return Err(Error::Format(format!("PGM maxval {maxval}")));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::Truncated("PGM header".into())),
        }
        let n = width * height;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(Error::Truncated(format!("expected {need} payload bytes, found {}", payload.len())));
        }
        let data = if wide {
            payload[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            payload[..need].iter().map(|&b| b as u16).collect()
        };
        Ok(Pgm {
            width,
            height,
            maxval: maxval as u16,
            data,
        })
    }

    /// Grayscale image in [0, 1] quantized to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Pgm {
        Pgm {
            width,
            height,
            maxval: 255,
            data: values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect(),
        }
    }

    pub fn to_unit(&self) -> Vec<f32> {
        let m = self.maxval as f32;
        self.data.iter().map(|&v| v as f32 / m).collect()
    }

    pub fn from_depth(width: usize, height: usize, depth: &[f32]) -> Pgm {
        Pgm {
            width,
            height,
            maxval: u16::MAX,
            data: depth
                .iter()
                .map(|&d| (d.max(0.0) * DEPTH_SCALE).round().min(u16::MAX as f32) as u16)
                .collect(),
        }
    }

    pub fn to_depth(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / DEPTH_SCALE).collect()
    }
}

pub fn write(path: &Path, img: &Pgm) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, img.encode())?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Pgm::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_8_and_16_bit() {
        let a = Pgm::from_unit(3, 2, &[0.0, 0.5, 1.0, 0.25, 0.75, 0.1]);
        assert_eq!(Pgm::decode(&a.encode()).unwrap(), a);
        let d = Pgm::from_depth(2, 2, &[0.0, 1.2345, 3.0, 2.5]);
        let back = Pgm::decode(&d.encode()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.data[1], 12345);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(Pgm::decode(b"P6\n1 1\n255\n\0"), Err(Error::Format(_))));
        assert!(matches!(Pgm::decode(b"P5\n4 4\n255\n\0\0"), Err(Error::Truncated(_))));
        assert!(matches!(Pgm::decode(b"P5\n4"), Err(Error::Truncated(_))));
        assert!(matches!(
            read(Path::new("/nonexistent/x.pgm")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = Pgm::decode(b"P5\n# made by hand\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(img.data, vec![1, 2]);
    }
}
