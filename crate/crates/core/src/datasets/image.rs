//! Binary PPM (P6, 8-bit) images as 3×H×W tensors in `[0, 1]`, plus
//! bilinear resizing.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

use super::manifest::ManifestRecord;

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("encode_ppm", format!("expected 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

fn bad(path: &Path, msg: &str) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    if token() != Some(b"P6") {
        return Err(bad(path, "not a binary PPM (P6)"));
    }
    let mut num = || -> Option<usize> { std::str::from_utf8(token()?).ok()?.parse().ok() };
    let (w, h, max) = match (num(), num(), num()) {
        (Some(w), Some(h), Some(m)) if w > 0 && h > 0 => (w, h, m),
        _ => return Err(bad(path, "malformed header")),
    };
    if max == 0 || max > 255 {
        return Err(bad(path, "only 8-bit PPM is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| bad(path, "truncated raster"))?;
    let max = max as f32;
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raster.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / max;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Bilinear resize of a C×H×W image with half-pixel centres:
/// `src = (dst + 0.5) · in/out − 0.5`, clamped to the border, each output the
/// area-free weighted mix of the four neighbouring source pixels.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let src = image.data();
    let coord = |dst: usize, inn: usize, out: usize| {
        let x = ((dst as f32 + 0.5) * inn as f32 / out as f32 - 0.5).clamp(0.0, (inn - 1) as f32);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(inn - 1);
        (x0, x1, x - x0 as f32)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, w, out_w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("sized above")
}

/// Decoded, resized images keyed by manifest path. Relative paths resolve
/// against `base`.
#[derive(Debug)]
pub struct ImageLibrary {
    base: PathBuf,
    size: usize,
    cache: HashMap<String, Tensor<f32>>,
}

impl ImageLibrary {
    pub fn new(base: impl Into<PathBuf>, size: usize) -> Self {
        Self {
            base: base.into(),
            size,
            cache: HashMap::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn get(&mut self, record: &ManifestRecord) -> Result<&Tensor<f32>> {
        if !self.cache.contains_key(&record.image_path) {
            let img = read_ppm(&self.resolve(record))?;
            let img = resize_bilinear(&img, self.size, self.size);
            self.cache.insert(record.image_path.clone(), img);
        }
        Ok(&self.cache[&record.image_path])
    }

    /// Insert an already decoded image (used by in-memory pipelines).
    pub fn insert(&mut self, path: impl Into<String>, image: Tensor<f32>) {
        let img = resize_bilinear(&image, self.size, self.size);
        self.cache.insert(path.into(), img);
    }
}
