//! Double helical signature extraction and windowing.
//!
//! Slicing every normalized frame at knee height turns a silhouette sequence
//! into a W×T binary image: standing renders constant columns, walking a
//! periodic braid, and a cut-off body a thicker band. All transforms here are
//! pure and read-only, so callers may fan out across sequences and windows.

use rand::Rng;
use thiserror::Error;

use crate::silio::{SilError, SilhouetteSequence};

#[derive(Debug, Error)]
pub enum DhsError {
    #[error("sequence is not normalized: frames are {height}x{width}, need 64x64")]
    Unnormalized { height: usize, width: usize },
    #[error("sequence too short: {len} frames, need at least {min}")]
    TooShort { len: usize, min: usize },
}

/// Binary W×T knee-row slice, stored row-major: `data[x * len + t]`, so row x
/// is the trace of spatial column x through time.
#[derive(Debug, Clone, PartialEq)]
pub struct DhsImage {
    pub width: usize,
    pub len: usize,
    pub knee_row: usize,
    data: Vec<u8>,
}

impl DhsImage {
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, x: usize, t: usize) -> u8 {
        self.data[x * self.len + t]
    }

    pub fn column(&self, t: usize) -> Vec<u8> {
        (0..self.width).map(|x| self.at(x, t)).collect()
    }

    /// Mean foreground width per column: the "thickness" of the signature.
    pub fn mean_column_width(&self) -> f64 {
        let total: usize = self.data.iter().map(|&v| v as usize).sum();
        total as f64 / self.len as f64
    }

    /// Cyclically tiles columns until the image is at least `min_len` long.
    /// Callers use this to loop-pad sequences shorter than a crop window.
    pub fn tiled_to(&self, min_len: usize) -> DhsImage {
        if self.len >= min_len {
            return self.clone();
        }
        let mut data = vec![0u8; self.width * min_len];
        for x in 0..self.width {
            for t in 0..min_len {
                data[x * min_len + t] = self.data[x * self.len + t % self.len];
            }
        }
        DhsImage {
            width: self.width,
            len: min_len,
            knee_row: self.knee_row,
            data,
        }
    }
}

/// One temporal window of a parent image, data row-major `[x * length + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DhsWindow {
    pub start: usize,
    pub length: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl DhsWindow {
    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Slices every frame at knee height: row floor(0.75 H) from the top, a
/// quarter of the body height up from the bottom.
pub fn extract_dhs(seq: &SilhouetteSequence) -> Result<DhsImage, DhsError> {
    if seq.height != 64 || seq.width != 64 {
        return Err(DhsError::Unnormalized {
            height: seq.height,
            width: seq.width,
        });
    }
    let knee_row = seq.height * 3 / 4;
    let (w, t_total) = (seq.width, seq.len());
    let mut data = vec![0u8; w * t_total];
    for t in 0..t_total {
        let row = &seq.frame(t)[knee_row * w..(knee_row + 1) * w];
        for x in 0..w {
            data[x * t_total + t] = row[x];
        }
    }
    Ok(DhsImage {
        width: w,
        len: t_total,
        knee_row,
        data,
    })
}

fn slice_window(img: &DhsImage, start: usize, length: usize) -> DhsWindow {
    debug_assert!(start + length <= img.len);
    let mut data = vec![0u8; img.width * length];
    for x in 0..img.width {
        let src = &img.data[x * img.len + start..x * img.len + start + length];
        data[x * length..(x + 1) * length].copy_from_slice(src);
    }
    DhsWindow {
        start,
        length,
        width: img.width,
        data,
    }
}

/// Multi-scale sliding windows: for each size that fits, starts at every
/// stride multiple plus one flush window ending exactly at T. Sorted by
/// (start, length), duplicates removed.
pub fn enumerate_windows(img: &DhsImage, sizes: &[usize], stride: usize) -> Vec<DhsWindow> {
    assert!(stride >= 1, "stride must be positive");
    assert!(!sizes.is_empty(), "need at least one window size");
    let t_total = img.len;
    let mut keys = Vec::new();
    for &s in sizes {
        if s == 0 || s > t_total {
            continue;
        }
        let mut st = 0;
        while st + s <= t_total {
            keys.push((st, s));
            st += stride;
        }
        keys.push((t_total - s, s)); // flush window
    }
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(st, s)| slice_window(img, st, s))
        .collect()
}

/// Uniform random crop: length from [min_len, min(max_len, T)], then start
/// from [0, T − length].
pub fn random_crop(
    img: &DhsImage,
    min_len: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<DhsWindow, DhsError> {
    assert!(min_len >= 1 && max_len >= min_len);
    if img.len < min_len {
        return Err(DhsError::TooShort {
            len: img.len,
            min: min_len,
        });
    }
    let length = rng.gen_range(min_len..=max_len.min(img.len));
    let start = rng.gen_range(0..=img.len - length);
    Ok(slice_window(img, start, length))
}

/// Normalized autocorrelation of the column pattern at `lag`: inner products
/// of mean-removed columns, so the full spatial layout counts, not just
/// foreground width.
pub fn pattern_autocorr(img: &DhsImage, lag: usize) -> f64 {
    assert!(lag < img.len);
    let (w, t_total) = (img.width, img.len);
    let mut mean = vec![0.0f64; w];
    for x in 0..w {
        let row = &img.data[x * t_total..(x + 1) * t_total];
        mean[x] = row.iter().map(|&v| v as f64).sum::<f64>() / t_total as f64;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..t_total {
        for x in 0..w {
            let a = img.at(x, t) as f64 - mean[x];
            den += a * a;
            if t + lag < t_total {
                num += a * (img.at(x, t + lag) as f64 - mean[x]);
            }
        }
    }
    num / den.max(1e-30)
}

/// Writes the image as a PGM for eyeballing: one row per spatial column x,
/// one image column per frame.
pub fn export_pgm(img: &DhsImage, path: &std::path::Path) -> Result<(), SilError> {
    crate::silio::write_pgm(&img.data, img.width, img.len, path)
}
