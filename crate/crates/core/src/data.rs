//! Image/label ingestion, normalization and batching.
//!
//! IDX (the MNIST container) is parsed from byte slices here; reading the
//! files is the companion crate's job.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw unsigned-byte images from an IDX3 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, row-major.
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    check_len(bytes, expected)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    check_len(bytes, expected)?;
    Ok(bytes[8..expected].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Matched images and labels of one split, still as raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSplit {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl RawSplit {
    pub fn new(images: IdxImages, labels: Vec<u8>) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::CountMismatch {
                images: images.count,
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self> {
        Self::new(parse_images(image_bytes)?, parse_labels(label_bytes)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples (or all of them).
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        let sz = self.images.rows * self.images.cols;
        self.images.pixels.truncate(n * sz);
        self.images.count = n;
        self.labels.truncate(n);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// One mean and one standard deviation over every training pixel.
    #[default]
    Global,
    /// Statistics per pixel position. Positions with zero spread are only
    /// mean-centred.
    PerPixel,
}

/// Normalization statistics, always fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    /// One entry for `Global`, one per pixel for `PerPixel`, in `[0, 1]`
    /// pixel units.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(train: &RawSplit, mode: NormMode) -> Result<Self> {
        let px = &train.images.pixels;
        if px.is_empty() {
            return Err(Error::Empty);
        }
        match mode {
            NormMode::Global => {
                let n = px.len() as f64;
                let mean = px.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / n;
                let var = px
                    .iter()
                    .map(|&p| {
                        let d = p as f64 / 255.0 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                if var < 1e-20 {
                    return Err(Error::ZeroStd);
                }
                Ok(Self {
                    mode,
                    mean: vec![mean],
                    std: vec![libm::sqrt(var)],
                })
            }
            NormMode::PerPixel => {
                let sz = train.images.rows * train.images.cols;
                let n = train.len() as f64;
                let mut mean = vec![0.0; sz];
                for img in px.chunks(sz) {
                    for (m, &p) in mean.iter_mut().zip(img) {
                        *m += p as f64 / 255.0;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; sz];
                for img in px.chunks(sz) {
                    for ((v, &p), m) in var.iter_mut().zip(img).zip(&mean) {
                        let d = p as f64 / 255.0 - m;
                        *v += d * d;
                    }
                }
                if var.iter().all(|&v| v < 1e-20) {
                    return Err(Error::ZeroStd);
                }
                let std = var
                    .into_iter()
                    .map(|v| if v / n >= 1e-20 { libm::sqrt(v / n) } else { 1.0 })
                    .collect();
                Ok(Self { mode, mean, std })
            }
        }
    }

    fn at(&self, i: usize) -> (f64, f64) {
        match self.mode {
            NormMode::Global => (self.mean[0], self.std[0]),
            NormMode::PerPixel => (self.mean[i], self.std[i]),
        }
    }

    /// Smallest and largest representable normalized values, used as the
    /// attack clip box.
    pub fn clip_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.mean.len() {
            let (m, s) = self.at(i);
            lo = lo.min((0.0 - m) / s);
            hi = hi.max((1.0 - m) / s);
        }
        (lo, hi)
    }

    /// Maps a normalized value back to a `[0, 1]` pixel intensity.
    pub fn denormalize(&self, pixel_index: usize, v: f64) -> f64 {
        let (m, s) = self.at(pixel_index);
        v * s + m
    }
}

/// Normalized images with labels, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, 1, rows, cols]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub stats: NormStats,
    pub num_classes: usize,
}

impl Dataset {
    /// `x <- (x / 255 - mean) / std` using `stats` (fitted on the training
    /// split, also for the test split).
    pub fn from_raw(raw: &RawSplit, stats: &NormStats, num_classes: usize) -> Result<Self> {
        let sz = raw.images.rows * raw.images.cols;
        if stats.mode == NormMode::PerPixel && stats.mean.len() != sz {
            return Err(Error::Config(format!(
                "per-pixel statistics cover {} pixels, images have {sz}",
                stats.mean.len()
            )));
        }
        if let Some((index, &label)) = raw
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(Error::LabelOutOfRange {
                index,
                label: label as usize,
                num_classes,
            });
        }
        let data: Vec<f64> = raw
            .images
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let (m, s) = stats.at(i % sz);
                (p as f64 / 255.0 - m) / s
            })
            .collect();
        let images = Tensor::new(vec![raw.len(), 1, raw.images.rows, raw.images.cols], data)?;
        Ok(Self {
            images,
            labels: raw.labels.iter().map(|&l| l as usize).collect(),
            stats: stats.clone(),
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn clip_bounds(&self) -> (f64, f64) {
        self.stats.clip_bounds()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Samples `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        let idx: Vec<usize> = (start..end).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            stats: self.stats.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Index batches over `0..n`. Shuffled order is a pure function of `seed`;
/// the final short batch is kept.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Batches {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng::rng(rng::derive(seed, rng::stream::SHUFFLE, 0)));
    }
    Batches {
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(b)
    }
}

/// Generates a labelled set of 28x28 seven-segment style digits with random
/// shift, slant, stroke width, endpoint jitter and background noise.
///
/// This is a stand-in for handwritten digits when the real files are not
/// available; it is deterministic in `seed`.
pub fn synthetic_digits(n: usize, seed: u64) -> RawSplit {
    // segments: a b c d e f g as (x0, y0, x1, y1) in a 12 x 18 box
    const SEG: [(f64, f64, f64, f64); 7] = [
        (0.0, 0.0, 12.0, 0.0),
        (12.0, 0.0, 12.0, 9.0),
        (12.0, 9.0, 12.0, 18.0),
        (0.0, 18.0, 12.0, 18.0),
        (0.0, 9.0, 0.0, 18.0),
        (0.0, 0.0, 0.0, 9.0),
        (0.0, 9.0, 12.0, 9.0),
    ];
    const DIGITS: [u8; 10] = [
        0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111,
        0b1111111, 0b1101111,
    ];
    let (rows, cols) = (28usize, 28usize);
    let mut r = rng::rng(seed);
    let mut pixels = vec![0u8; n * rows * cols];
    let mut labels = Vec::with_capacity(n);
    let mut img = vec![0.0f64; rows * cols];
    for k in 0..n {
        let digit = r.gen_range(0..10u8);
        labels.push(digit);
        let dx: f64 = 8.0 + r.gen_range(-3.0..3.0);
        let dy: f64 = 5.0 + r.gen_range(-2.5..2.5);
        let scale: f64 = r.gen_range(0.8..1.1);
        let slant: f64 = r.gen_range(-0.3..0.3);
        let width: f64 = r.gen_range(1.2..2.4);
        let ink: f64 = r.gen_range(0.75..1.0);
        img.fill(0.0);
        let mut segs = Vec::with_capacity(7);
        for (s, seg) in SEG.iter().enumerate() {
            if DIGITS[digit as usize] & (1 << s) == 0 {
                continue;
            }
            let mut jit = || r.gen_range(-1.2..1.2);
            let place = |x: f64, y: f64, jx: f64, jy: f64| {
                let y2 = y * scale + jy;
                (dx + x * scale + jx + slant * (9.0 - y2), dy + y2)
            };
            let (j0, j1, j2, j3) = (jit(), jit(), jit(), jit());
            segs.push((place(seg.0, seg.1, j0, j1), place(seg.2, seg.3, j2, j3)));
        }
        for y in 0..rows {
            for x in 0..cols {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut best = f64::INFINITY;
                for &((x0, y0), (x1, y1)) in &segs {
                    let (vx, vy) = (x1 - x0, y1 - y0);
                    let len2 = vx * vx + vy * vy;
                    let t = if len2 > 0.0 {
                        (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let (cx, cy) = (x0 + t * vx - px, y0 + t * vy - py);
                    best = best.min(libm::sqrt(cx * cx + cy * cy));
                }
                // soft edge of one pixel
                let v = (width - best + 0.5).clamp(0.0, 1.0) * ink;
                img[y * cols + x] = v;
            }
        }
        let dst = &mut pixels[k * rows * cols..(k + 1) * rows * cols];
        for (d, &v) in dst.iter_mut().zip(&img) {
            let noise: f64 = if r.gen_bool(0.1) { r.gen_range(0.0..0.35) } else { 0.0 };
            *d = (libm::round((v + noise).min(1.0) * 255.0)) as u8;
        }
    }
    RawSplit {
        images: IdxImages {
            count: n,
            rows,
            cols,
            pixels,
        },
        labels,
    }
}
