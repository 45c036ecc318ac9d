//! RGB images, binary masks and their netpbm encodings.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Square-or-not RGB image, channel-major `[3, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::dim("image", &[3, height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push(quantize(self.at(c, y, x)));
                }
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (magic, w, h, body) = parse_netpbm(bytes, path)?;
        if magic != "P6" || body.len() < 3 * w * h {
            return Err(Error::format(path, "expected 8-bit P6 image"));
        }
        let mut data = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = body[(y * w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Image::new(h, w, data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("mask", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    /// `1.0` on foreground, `0.0` elsewhere.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Foreground where the logit is strictly positive.
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        Mask::new(height, width, logits.iter().map(|&l| l > 0.0).collect())
    }

    /// Binary PGM (P5); foreground 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (magic, w, h, body) = parse_netpbm(bytes, path)?;
        if magic != "P5" || body.len() < w * h {
            return Err(Error::format(path, "expected 8-bit P5 mask"));
        }
        Mask::new(h, w, body[..w * h].iter().map(|&v| v >= 128).collect())
    }
}

/// Greyscale probability map as PGM.
pub fn prob_to_pgm(height: usize, width: usize, probs: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(probs.iter().map(|&p| quantize(p)));
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_netpbm<'b>(bytes: &'b [u8], path: &Path) -> Result<(String, usize, usize, &'b [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated netpbm header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad netpbm header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, "only maxval 255 is supported"));
    }
    Ok((fields[0].clone(), w, h, bytes.get(pos..).unwrap_or(&[])))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_round_trip() {
        let m = Mask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
        let p = Path::new("m.pgm");
        assert_eq!(Mask::from_pgm(&m.to_pgm(), p).unwrap(), m);
        let img = Image::new(1, 2, vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0]).unwrap();
        let back = Image::from_ppm(&img.to_ppm(), p).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn logits_threshold_is_strict() {
        let m = Mask::from_logits(1, 3, &[-1.0, 0.0, 0.5]).unwrap();
        assert_eq!(m.data, vec![false, false, true]);
    }
}
