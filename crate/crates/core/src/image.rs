//! Grayscale images, binary PGM I/O, reflect padding and bilinear sampling.

use std::fs;
use std::path::Path;

use crate::error::{EdmError, Result};
use crate::tensor::Tensor;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

const MAX_SIDE: usize = 1 << 15;

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(EdmError::invalid(
                "image",
                format!("{} values for a {width}x{height} image", data.len()),
            ));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at pixel-centre coordinates; `None` outside
    /// `[0, w−1] × [0, h−1]`.
    pub fn sample(&self, x: f64, y: f64) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Rounds to the 8-bit grid.
    pub fn quantized(&self) -> Self {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| to_byte(*v) as f32 / 255.0).collect(),
        }
    }

    /// `1 × 1 × H × W` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone()).expect("consistent image buffer")
    }

    /// Aspect-preserving bilinear resize so the longer side equals `max_side`.
    /// Returns the image and the scale factor applied.
    pub fn resize_max_side(&self, max_side: usize) -> (Self, f64) {
        let longest = self.width.max(self.height);
        if longest == max_side || max_side == 0 {
            return (self.clone(), 1.0);
        }
        let scale = max_side as f64 / longest as f64;
        let w = ((self.width as f64 * scale).round() as usize).max(1);
        let h = ((self.height as f64 * scale).round() as usize).max(1);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let sx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (self.width - 1) as f64);
                let sy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, (self.height - 1) as f64);
                data.push(self.sample(sx, sy).unwrap_or(0.0));
            }
        }
        (GrayImage { width: w, height: h, data }, scale)
    }

    /// Mirror-pads the right and bottom edges up to the next multiple of `m`.
    pub fn reflect_pad_to_multiple(&self, m: usize) -> Self {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if w == self.width && h == self.height {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(reflect(x, self.width), reflect(y, self.height)));
            }
        }
        GrayImage { width: w, height: h, data }
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pgm_err(path: &Path, detail: impl Into<String>) -> EdmError {
    EdmError::Pgm {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses binary PGM (`P5`, max value 255).
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token().ok_or_else(|| pgm_err(path, "empty file"))?;
    if magic == "P2" {
        return Err(pgm_err(path, "ASCII PGM (P2) is not supported; convert to binary P5"));
    }
    if magic != "P5" {
        return Err(pgm_err(path, format!("expected magic P5, found {magic:?}")));
    }
    let mut field = |name: &str| -> Result<usize> {
        let t = token().ok_or_else(|| pgm_err(path, format!("header ends before {name}")))?;
        t.parse::<usize>().map_err(|_| pgm_err(path, format!("invalid {name} {t:?}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("max value")?;
    if maxval != 255 {
        return Err(pgm_err(path, format!("only 8-bit PGM with max value 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(pgm_err(path, format!("dimensions {width}x{height} out of range")));
    }
    // a single whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height;
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(pgm_err(path, format!("truncated raster: expected {need} bytes, found {have}")));
    }
    let data = bytes[start..start + need].iter().map(|&b| b as f32 / 255.0).collect();
    GrayImage::new(width, height, data)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| EdmError::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_byte(v)));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| EdmError::io(path, e))
}

/// Linearly rescales values to `[0, 1]` for visualization.
pub fn normalized_for_display(width: usize, height: usize, values: &[f32]) -> Result<GrayImage> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    GrayImage::new(width, height, values.iter().map(|v| (v - lo) / span).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0u8, 64, 128, 255]);
        let img = parse_pgm(&bytes, Path::new("t.pgm")).unwrap();
        assert_eq!(img.data, vec![0.0, 64.0 / 255.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn malformed_headers() {
        let p = Path::new("t.pgm");
        let mut bytes = b"P5 3 2 255\n".to_vec();
        bytes.extend([1u8; 5]);
        assert!(parse_pgm(&bytes, p).unwrap_err().to_string().contains("truncated"));
        assert!(parse_pgm(b"P2 1 1 255\n7\n", p).unwrap_err().to_string().contains("P2"));
        assert!(parse_pgm(b"P5 99999999 1 255\n", p).is_err());
        assert!(parse_pgm(b"P5 1 1 65535\n\0\0", p).is_err());
    }

    #[test]
    fn comments_and_round_trip() {
        let img = GrayImage::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap().quantized();
        let bytes = encode_pgm(&img);
        assert_eq!(parse_pgm(&bytes, Path::new("x")).unwrap(), img);
        let mut c = b"P5\n# made by hand\n3 1\n255\n".to_vec();
        c.extend(&bytes[bytes.len() - 3..]);
        assert_eq!(parse_pgm(&c, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn reflect_padding() {
        let img = GrayImage::new(3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let p = img.reflect_pad_to_multiple(4);
        assert_eq!((p.width, p.height), (4, 4));
        assert_eq!(&p.data[..4], &[0.1, 0.2, 0.3, 0.2]);
        assert_eq!(&p.data[4..8], &p.data[..4]);
    }

    #[test]
    fn sampling_exact_on_grid() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(img.sample(1.0, 1.0), Some(3.0));
        assert_eq!(img.sample(0.5, 0.5), Some(1.5));
        assert_eq!(img.sample(-0.1, 0.0), None);
    }
}
