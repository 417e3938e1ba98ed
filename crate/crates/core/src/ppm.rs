//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, `3·width·height` bytes.
    pub pixels: Vec<u8>,
}

impl Ppm {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "PPM {width}×{height} needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Ppm { width, height, pixels })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: &str| Error::Format { format: "ppm", offset: offset as u64, reason: reason.into() };
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(err(0, "bad magic (expected P6)"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            // whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(err(pos, "expected a decimal header field"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(start, "header field out of range"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(err(pos, "only maxval 255 is supported"));
        }
        if width == 0 || height == 0 {
            return Err(err(pos, "zero image dimension"));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(err(pos, "missing whitespace after header"));
        }
        pos += 1;
        let need = 3 * width * height;
        if bytes.len() < pos + need {
            return Err(err(bytes.len(), &format!("truncated raster: need {need} bytes after offset {pos}")));
        }
        Ok(Ppm { width, height, pixels: bytes[pos..pos + need].to_vec() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// `H×W×3` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(vec![self.height, self.width, 3], |i| self.pixels[i] as f64 / 255.0)
    }

    /// Quantizes an `H×W×C` tensor (values clamped to `[0, 1]`). One channel
    /// is replicated to gray; more than three keeps the first three.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = match t.shape() {
            &[h, w, c] if c >= 1 => (h, w, c),
            s => return Err(Error::invalid(format!("expected H×W×C tensor, got {s:?}"))),
        };
        let mut pixels = Vec::with_capacity(3 * h * w);
        for px in t.data().chunks_exact(c) {
            for k in 0..3 {
                let v = px[if c >= 3 { k } else { 0 }];
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Ppm::new(w, h, pixels)
    }

    /// Min-max scales the whole tensor to `[0, 255]` before quantizing. A
    /// constant tensor maps to black.
    pub fn from_tensor_minmax(t: &Tensor) -> Result<Self> {
        let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let scaled = t.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
        Self::from_unit_tensor(&scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend((0..12).map(|i| i * 20));
        let p = Ppm::parse(&bytes).unwrap();
        assert_eq!((p.width, p.height), (2, 2));
        let t = p.to_tensor();
        assert_eq!(t.shape(), &[2, 2, 3]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(Ppm::parse(&p.to_bytes()).unwrap(), p);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 128]);
        let p = Ppm::parse(&bytes).unwrap();
        assert_eq!(p.pixels, vec![255, 0, 128]);
        assert_eq!(p.to_tensor().data()[0], 1.0);
    }

    #[test]
    fn rejects_with_offsets() {
        match Ppm::parse(b"P5 1 1 255\n\0") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match Ppm::parse(b"P6 2 2 255\n\0\0\0") {
            Err(Error::Format { offset, reason, .. }) => {
                assert_eq!(offset, 14);
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        assert!(Ppm::parse(b"P6 1 1 65535\n\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn gray_is_replicated() {
        let t = Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(Ppm::from_unit_tensor(&t).unwrap().pixels, vec![0, 0, 0, 255, 255, 255]);
        let m = Ppm::from_tensor_minmax(&Tensor::new(vec![1, 2, 1], vec![-3.0, 5.0]).unwrap()).unwrap();
        assert_eq!(m.pixels, vec![0, 0, 0, 255, 255, 255]);
    }
}
