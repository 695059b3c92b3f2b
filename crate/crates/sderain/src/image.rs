//! Grayscale image I/O (binary PGM/PPM), patch extraction, and PSNR.
//!
//! All pipelines operate on single-channel rasters with values in [0,1].
//! Color PPM input is collapsed to luminance on load; everything written
//! out is 8-bit binary PGM.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel image with pixel values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::contract(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// The image as a `[1,H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![1, self.height, self.width], self.pixels.clone())
            .expect("image buffer matches dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s.len() {
            2 => (s[0], s[1]),
            3 if s[0] == 1 => (s[1], s[2]),
            4 if s[0] == 1 && s[1] == 1 => (s[2], s[3]),
            _ => {
                return Err(Error::contract(format!(
                    "cannot view shape {s:?} as a single image"
                )))
            }
        };
        Image::new(h, w, t.data().to_vec())
    }

    /// Quantizes to the 8-bit grid exactly as saving and reloading would:
    /// clamp to [0,1], then round(v*255)/255.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|&v| quantize_byte(v) as f64 / 255.0)
                .collect(),
        }
    }
}

fn quantize_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ── PNM parsing ──────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::PnmParse {
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Skips whitespace and `#` comment lines between header tokens.
    fn skip_separators(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ascii")
            .parse::<usize>()
            .map_err(|_| self.err(format!("{what} out of range")))
    }
}

/// Loads a binary PGM (P5) or PPM (P6) file with maxval 255. Color input is
/// converted to luminance `0.299 R + 0.587 G + 0.114 B`; bytes map to [0,1]
/// as `v/255`.
pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    let color = match bytes.get(..2) {
        Some(b"P5") => false,
        Some(b"P6") => true,
        _ => return Err(cur.err("expected P5 or P6 magic")),
    };
    cur.pos = 2;

    let width = cur.read_number("width")?;
    let height = cur.read_number("height")?;
    if width == 0 || height == 0 {
        return Err(cur.err(format!("zero dimension {width}x{height}")));
    }
    let maxval = cur.read_number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval} (only 255)")));
    }
    // Exactly one whitespace byte separates the maxval from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected single whitespace before payload"));
    }
    cur.pos += 1;

    let channels = if color { 3 } else { 1 };
    let need = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "truncated payload: need {need} bytes, have {}",
            payload.len()
        )));
    }

    let pixels = if color {
        payload[..need]
            .chunks_exact(3)
            .map(|px| {
                (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64) / 255.0
            })
            .collect()
    } else {
        payload[..need].iter().map(|&v| v as f64 / 255.0).collect()
    };
    Image::new(height, width, pixels)
}

/// Writes an image as binary PGM (P5, maxval 255). Values are clamped to
/// [0,1] and quantized as `round(v*255)`, so a load of the result differs
/// from the clamped original by at most 1/510 per pixel.
pub fn save_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(image.pixels.len() + 32);
    write!(out, "P5\n{} {}\n255\n", image.width, image.height).expect("vec write");
    out.extend(image.pixels.iter().map(|&v| quantize_byte(v)));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ── PSNR ─────────────────────────────────────────────────────────────

/// PSNR cap reported when the MSE underflows (identical images).
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in decibels with peak 1.0, computed over the
/// full image. Returns the 99 dB cap when the MSE drops below 1e-10.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::contract(format!(
            "psnr dimension mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut sum = 0.0;
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        let d = x - y;
        sum += d * d;
    }
    let mse = sum / a.pixels.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

// ── Patch extraction ─────────────────────────────────────────────────

/// A stack of fixed-size training patches. Supervised batches carry both
/// the rainy inputs and the clean targets, cropped at identical positions.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    patch: usize,
    inputs: Tensor,
    targets: Option<Tensor>,
}

impl PatchBatch {
    pub fn new(patch: usize, inputs: Tensor, targets: Option<Tensor>) -> Result<Self> {
        let check = |t: &Tensor, what: &str| -> Result<()> {
            let s = t.shape();
            if s.len() != 4 || s[1] != 1 || s[2] != patch || s[3] != patch {
                return Err(Error::contract(format!(
                    "{what} must be [B,1,{patch},{patch}], got {s:?}"
                )));
            }
            Ok(())
        };
        check(&inputs, "inputs")?;
        if let Some(t) = &targets {
            check(t, "targets")?;
            if t.shape() != inputs.shape() {
                return Err(Error::contract("inputs/targets batch size mismatch"));
            }
        }
        Ok(PatchBatch {
            patch,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> Option<&Tensor> {
        self.targets.as_ref()
    }

    pub fn is_supervised(&self) -> bool {
        self.targets.is_some()
    }

    /// A sub-batch selecting the given patch indices, preserving order.
    pub fn select(&self, indices: &[usize]) -> PatchBatch {
        let pp = self.patch * self.patch;
        let gather = |t: &Tensor| {
            let mut data = Vec::with_capacity(indices.len() * pp);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * pp..(i + 1) * pp]);
            }
            Tensor::from_vec(vec![indices.len(), 1, self.patch, self.patch], data)
                .expect("gathered patch shape")
        };
        PatchBatch {
            patch: self.patch,
            inputs: gather(&self.inputs),
            targets: self.targets.as_ref().map(gather),
        }
    }
}

/// Crop origins for `count` patches drawn uniformly over eligible images and
/// positions. Images smaller than the patch are skipped with a warning.
fn sample_origins(
    dims: &[(usize, usize)],
    patch: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    let eligible: Vec<usize> = dims
        .iter()
        .enumerate()
        .filter_map(|(i, &(h, w))| {
            if h >= patch && w >= patch {
                Some(i)
            } else {
                eprintln!(
                    "warning: skipping {h}x{w} image {i}: smaller than patch size {patch}"
                );
                None
            }
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::dataset(format!(
            "no image is at least {patch}x{patch}"
        )));
    }
    let mut origins = Vec::with_capacity(count);
    for _ in 0..count {
        let img = eligible[rng.gen_range(0..eligible.len())];
        let (h, w) = dims[img];
        let y = rng.gen_range(0..=h - patch);
        let x = rng.gen_range(0..=w - patch);
        origins.push((img, y, x));
    }
    Ok(origins)
}

fn crop_into(img: &Image, y: usize, x: usize, patch: usize, out: &mut Vec<f64>) {
    for row in y..y + patch {
        let start = row * img.width + x;
        out.extend_from_slice(&img.pixels[start..start + patch]);
    }
}

/// Extracts `count` unsupervised patches at uniform-random positions from
/// uniform-random images, reproducibly from `seed`.
pub fn extract_patches(
    images: &[Image],
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<PatchBatch> {
    let dims: Vec<_> = images.iter().map(|i| (i.height, i.width)).collect();
    let mut rng = crate::rng::stream(seed, "extract-patches", 0);
    let origins = sample_origins(&dims, patch, count, &mut rng)?;
    let mut data = Vec::with_capacity(count * patch * patch);
    for &(img, y, x) in &origins {
        crop_into(&images[img], y, x, patch, &mut data);
    }
    PatchBatch::new(
        patch,
        Tensor::from_vec(vec![count, 1, patch, patch], data)?,
        None,
    )
}

/// Extracts `count` supervised patch pairs; the input and target crops of a
/// pair use identical coordinates.
pub fn extract_paired_patches(
    pairs: &[(Image, Image)],
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<PatchBatch> {
    for (i, (input, target)) in pairs.iter().enumerate() {
        if input.height != target.height || input.width != target.width {
            return Err(Error::dataset(format!(
                "pair {i}: input {}x{} vs target {}x{}",
                input.height, input.width, target.height, target.width
            )));
        }
    }
    let dims: Vec<_> = pairs.iter().map(|(i, _)| (i.height, i.width)).collect();
    let mut rng = crate::rng::stream(seed, "extract-patches", 0);
    let origins = sample_origins(&dims, patch, count, &mut rng)?;
    let mut inputs = Vec::with_capacity(count * patch * patch);
    let mut targets = Vec::with_capacity(count * patch * patch);
    for &(img, y, x) in &origins {
        crop_into(&pairs[img].0, y, x, patch, &mut inputs);
        crop_into(&pairs[img].1, y, x, patch, &mut targets);
    }
    PatchBatch::new(
        patch,
        Tensor::from_vec(vec![count, 1, patch, patch], inputs)?,
        Some(Tensor::from_vec(vec![count, 1, patch, patch], targets)?),
    )
}
