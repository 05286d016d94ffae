//! Silhouette and RGB sequence I/O plus size normalization.
//!
//! Sequences are immutable once built and safe to share across threads.
//! Normalization crops each frame to its tight foreground box, rescales so
//! the box height hits the target, recenters on the foreground centroid
//! column, and records the pre-normalization size ratio that the attention
//! branch consumes downstream.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use thiserror::Error;

pub const SIL_MAGIC: [u8; 4] = *b"GSP1";
pub const RGB_MAGIC: [u8; 4] = *b"GRP1";

#[derive(Debug, Error)]
pub enum SilError {
    #[error("empty sequence: every frame has an empty foreground")]
    EmptySequence,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated pack at byte {offset} reading {what}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("malformed pack at byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tight foreground box in source pixels. `h == 0` marks an empty frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BoundingBox {
    pub top: i32,
    pub left: i32,
    pub h: i32,
    pub w: i32,
}

impl BoundingBox {
    pub fn is_empty(&self) -> bool {
        self.h <= 0 || self.w <= 0
    }
}

/// T binary H×W planes, row-major, values 0/1, plus per-frame tight boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    pub height: usize,
    pub width: usize,
    frames: Vec<Vec<u8>>,
    pub raw_boxes: Vec<BoundingBox>,
}

impl SilhouetteSequence {
    /// Builds a sequence from raw mask planes, computing tight boxes.
    pub fn new(height: usize, width: usize, frames: Vec<Vec<u8>>) -> Self {
        assert!(!frames.is_empty(), "sequence needs at least one frame");
        let raw_boxes = frames
            .iter()
            .map(|f| {
                assert_eq!(f.len(), height * width, "mask plane size");
                debug_assert!(f.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
                tight_box(f, height, width)
            })
            .collect();
        SilhouetteSequence {
            height,
            width,
            frames,
            raw_boxes,
        }
    }

    fn from_parts(
        height: usize,
        width: usize,
        frames: Vec<Vec<u8>>,
        raw_boxes: Vec<BoundingBox>,
    ) -> Self {
        SilhouetteSequence {
            height,
            width,
            frames,
            raw_boxes,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Vec<u8>] {
        &self.frames
    }

    pub fn fg_count(&self, t: usize) -> usize {
        self.frames[t].iter().map(|&v| v as usize).sum()
    }
}

/// Like `SilhouetteSequence` but three channel-planar f32 planes per frame,
/// values in [0,1], sharing the paired silhouette's box metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbSequence {
    pub height: usize,
    pub width: usize,
    frames: Vec<Vec<f32>>,
    pub raw_boxes: Vec<BoundingBox>,
}

impl RgbSequence {
    pub fn new(
        height: usize,
        width: usize,
        mut frames: Vec<Vec<f32>>,
        raw_boxes: Vec<BoundingBox>,
    ) -> Self {
        assert!(!frames.is_empty(), "sequence needs at least one frame");
        assert_eq!(frames.len(), raw_boxes.len(), "frame/box count");
        for f in &mut frames {
            assert_eq!(f.len(), 3 * height * width, "rgb plane size");
            for v in f.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        RgbSequence {
            height,
            width,
            frames,
            raw_boxes,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Channel-planar frame: `[r plane, g plane, b plane]`, each H×W.
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t]
    }
}

/// Per-frame (box_h/target_h, box_w/target_h) from pre-normalization boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTrack {
    pub rho: Vec<[f64; 2]>,
}

impl RatioTrack {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Two concatenated tracks `[rho_h..., rho_w...]` for channel-major input.
    pub fn channel_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.rho.len());
        out.extend(self.rho.iter().map(|r| r[0]));
        out.extend(self.rho.iter().map(|r| r[1]));
        out
    }
}

fn tight_box(frame: &[u8], height: usize, width: usize) -> BoundingBox {
    let (mut top, mut bot, mut left, mut right) = (height, 0usize, width, 0usize);
    let mut any = false;
    for y in 0..height {
        let row = &frame[y * width..(y + 1) * width];
        for (x, &v) in row.iter().enumerate() {
            if v != 0 {
                any = true;
                top = top.min(y);
                bot = bot.max(y);
                left = left.min(x);
                right = right.max(x);
            }
        }
    }
    if !any {
        return BoundingBox::default();
    }
    BoundingBox {
        top: top as i32,
        left: left as i32,
        h: (bot - top + 1) as i32,
        w: (right - left + 1) as i32,
    }
}

/// Nearest-neighbor rescale of the box interior to `out_h` × `out_w`.
fn nn_scale(frame: &[u8], width: usize, b: BoundingBox, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = vec![0u8; out_h * out_w];
    let sh = b.h as f64 / out_h as f64;
    let sw = b.w as f64 / out_w as f64;
    for y in 0..out_h {
        let sy = b.top + (((y as f64 + 0.5) * sh).floor() as i32).min(b.h - 1);
        for x in 0..out_w {
            let sx = b.left + (((x as f64 + 0.5) * sw).floor() as i32).min(b.w - 1);
            out[y * out_w + x] = frame[sy as usize * width + sx as usize];
        }
    }
    out
}

/// Bilinear rescale of one channel plane's box interior, samples clamped to
/// the box so padding never bleeds in.
fn bilinear_scale(
    plane: &[f32],
    width: usize,
    b: BoundingBox,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; out_h * out_w];
    let sh = b.h as f64 / out_h as f64;
    let sw = b.w as f64 / out_w as f64;
    let lo_y = b.top as f64;
    let hi_y = (b.top + b.h - 1) as f64;
    let lo_x = b.left as f64;
    let hi_x = (b.left + b.w - 1) as f64;
    for y in 0..out_h {
        let fy = (lo_y + (y as f64 + 0.5) * sh - 0.5).clamp(lo_y, hi_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min((b.top + b.h - 1) as usize);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = (lo_x + (x as f64 + 0.5) * sw - 0.5).clamp(lo_x, hi_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min((b.left + b.w - 1) as usize);
            let wx = fx - x0 as f64;
            let p00 = plane[y0 * width + x0] as f64;
            let p01 = plane[y0 * width + x1] as f64;
            let p10 = plane[y1 * width + x0] as f64;
            let p11 = plane[y1 * width + x1] as f64;
            let v = p00 * (1.0 - wy) * (1.0 - wx)
                + p01 * (1.0 - wy) * wx
                + p10 * wy * (1.0 - wx)
                + p11 * wy * wx;
            out[y * out_w + x] = v as f32;
        }
    }
    out
}

/// Canvas column where scaled column 0 lands. Content wider than the canvas
/// is center-cropped on the box; narrower content is centered on the
/// foreground centroid column, clamped so nothing falls off the sides.
fn placement_offset(scaled: &[u8], out_h: usize, new_w: usize, tw: usize) -> isize {
    if new_w >= tw {
        return -(((new_w - tw) / 2) as isize);
    }
    let mut count = 0usize;
    let mut xsum = 0.0f64;
    for y in 0..out_h {
        for x in 0..new_w {
            if scaled[y * new_w + x] != 0 {
                count += 1;
                xsum += x as f64;
            }
        }
    }
    debug_assert!(count > 0, "placement needs a nonempty scaled frame");
    let centroid = xsum / count as f64;
    let off = (0.5 * (tw as f64 - 1.0) - centroid).round() as isize;
    off.clamp(0, (tw - new_w) as isize)
}

fn normalize_impl(
    seq: &SilhouetteSequence,
    rgb: Option<&RgbSequence>,
    target: (usize, usize),
) -> Result<(SilhouetteSequence, Option<RgbSequence>, RatioTrack), SilError> {
    let (th, tw) = target;
    assert!(th >= 1 && tw >= 1);
    if let Some(r) = rgb {
        if r.height != seq.height || r.width != seq.width || r.len() != seq.len() {
            return Err(SilError::DimensionMismatch(format!(
                "rgb {}x{}x{} does not pair with silhouettes {}x{}x{}",
                r.height,
                r.width,
                r.len(),
                seq.height,
                seq.width,
                seq.len()
            )));
        }
    }

    let mut masks = Vec::new();
    let mut chips = Vec::new();
    let mut rho = Vec::new();
    for t in 0..seq.len() {
        let b = tight_box(seq.frame(t), seq.height, seq.width);
        if b.is_empty() {
            warn!("dropping frame {t}: empty foreground");
            continue;
        }
        let new_w = ((b.w as f64 * th as f64 / b.h as f64).round() as usize).max(1);
        let scaled = nn_scale(seq.frame(t), seq.width, b, th, new_w);
        if scaled.iter().all(|&v| v == 0) {
            warn!("dropping frame {t}: foreground vanished under rescale");
            continue;
        }
        let off = placement_offset(&scaled, th, new_w, tw);
        let mut canvas = vec![0u8; th * tw];
        for y in 0..th {
            for x in 0..new_w {
                let cx = x as isize + off;
                if (0..tw as isize).contains(&cx) {
                    canvas[y * tw + cx as usize] = scaled[y * new_w + x];
                }
            }
        }
        masks.push(canvas);

        if let Some(r) = rgb {
            let frame = r.frame(t);
            let mut chip = vec![0.0f32; 3 * th * tw];
            for c in 0..3 {
                let plane = &frame[c * seq.height * seq.width..(c + 1) * seq.height * seq.width];
                let sc = bilinear_scale(plane, seq.width, b, th, new_w);
                let dst = &mut chip[c * th * tw..(c + 1) * th * tw];
                for y in 0..th {
                    for x in 0..new_w {
                        let cx = x as isize + off;
                        if (0..tw as isize).contains(&cx) {
                            dst[y * tw + cx as usize] = sc[y * new_w + x];
                        }
                    }
                }
            }
            chips.push(chip);
        }

        rho.push([b.h as f64 / th as f64, b.w as f64 / th as f64]);
    }

    if masks.is_empty() {
        return Err(SilError::EmptySequence);
    }
    let out = SilhouetteSequence::new(th, tw, masks);
    let out_rgb = rgb.map(|_| RgbSequence::new(th, tw, chips, out.raw_boxes.clone()));
    Ok((out, out_rgb, RatioTrack { rho }))
}

/// Normalizes every frame to `target` (height, width) and records the ratio
/// track. Frames with an empty foreground are dropped and logged.
pub fn normalize(
    seq: &SilhouetteSequence,
    target: (usize, usize),
) -> Result<(SilhouetteSequence, RatioTrack), SilError> {
    normalize_impl(seq, None, target).map(|(s, _, r)| (s, r))
}

/// Same as [`normalize`] but carries a paired RGB sequence through the same
/// crop, bilinear rescale, and placement.
pub fn normalize_pair(
    seq: &SilhouetteSequence,
    rgb: &RgbSequence,
    target: (usize, usize),
) -> Result<(SilhouetteSequence, RgbSequence, RatioTrack), SilError> {
    normalize_impl(seq, Some(rgb), target).map(|(s, r, t)| (s, r.unwrap(), t))
}

// ---- pack format ----------------------------------------------------------
//
// magic (4 bytes) | H, W, T, channels as LE u32 | payload | T boxes of 4 LE
// i32 (top, left, h, w). Silhouette payload: per frame, H*W bits packed
// row-major MSB-first, zero padded to a byte boundary. RGB payload: per
// frame, 3 channel planes of H*W LE f32.

fn pack_bits(frame: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; frame.len().div_ceil(8)];
    for (i, &v) in frame.iter().enumerate() {
        if v != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n)
        .map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1)
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], SilError> {
        if self.buf.len() - self.pos < n {
            return Err(SilError::Truncated {
                offset: self.pos,
                what,
                expected: n,
                found: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, SilError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &'static str) -> Result<i32, SilError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn push_header(out: &mut Vec<u8>, magic: [u8; 4], h: usize, w: usize, t: usize, ch: usize) {
    out.extend_from_slice(&magic);
    for v in [h, w, t, ch] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

fn push_boxes(out: &mut Vec<u8>, boxes: &[BoundingBox]) {
    for b in boxes {
        for v in [b.top, b.left, b.h, b.w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_header(
    r: &mut Reader,
    magic: [u8; 4],
    want_channels: u32,
) -> Result<(usize, usize, usize), SilError> {
    let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(SilError::BadMagic {
            expected: magic,
            found,
        });
    }
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    let t = r.u32("frame count")?;
    let ch = r.u32("channel count")?;
    if h == 0 || w == 0 || t == 0 {
        return Err(SilError::Malformed {
            offset: 4,
            msg: format!("degenerate dimensions {h}x{w}x{t}"),
        });
    }
    if (h as u64) * (w as u64) * (t as u64) > (1 << 33) {
        return Err(SilError::Malformed {
            offset: 4,
            msg: format!("implausible dimensions {h}x{w}x{t}"),
        });
    }
    if ch != want_channels {
        return Err(SilError::Malformed {
            offset: 16,
            msg: format!("expected {want_channels} channel(s), header says {ch}"),
        });
    }
    Ok((h as usize, w as usize, t as usize))
}

fn read_boxes(r: &mut Reader, t: usize) -> Result<Vec<BoundingBox>, SilError> {
    let mut boxes = Vec::with_capacity(t);
    for _ in 0..t {
        boxes.push(BoundingBox {
            top: r.i32("box top")?,
            left: r.i32("box left")?,
            h: r.i32("box height")?,
            w: r.i32("box width")?,
        });
    }
    Ok(boxes)
}

fn check_trailing(r: &Reader) -> Result<(), SilError> {
    if r.pos != r.buf.len() {
        return Err(SilError::Malformed {
            offset: r.pos,
            msg: format!("{} trailing bytes", r.buf.len() - r.pos),
        });
    }
    Ok(())
}

pub fn encode_silhouette_pack(seq: &SilhouetteSequence) -> Vec<u8> {
    let mut out = Vec::new();
    push_header(&mut out, SIL_MAGIC, seq.height, seq.width, seq.len(), 1);
    for f in &seq.frames {
        out.extend_from_slice(&pack_bits(f));
    }
    push_boxes(&mut out, &seq.raw_boxes);
    out
}

pub fn decode_silhouette_pack(buf: &[u8]) -> Result<SilhouetteSequence, SilError> {
    let mut r = Reader { buf, pos: 0 };
    let (h, w, t) = read_header(&mut r, SIL_MAGIC, 1)?;
    let packed = (h * w).div_ceil(8);
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        frames.push(unpack_bits(r.take(packed, "mask frame")?, h * w));
    }
    let boxes = read_boxes(&mut r, t)?;
    check_trailing(&r)?;
    Ok(SilhouetteSequence::from_parts(h, w, frames, boxes))
}

pub fn encode_rgb_pack(seq: &RgbSequence) -> Vec<u8> {
    let mut out = Vec::new();
    push_header(&mut out, RGB_MAGIC, seq.height, seq.width, seq.len(), 3);
    for f in &seq.frames {
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    push_boxes(&mut out, &seq.raw_boxes);
    out
}

pub fn decode_rgb_pack(buf: &[u8]) -> Result<RgbSequence, SilError> {
    let mut r = Reader { buf, pos: 0 };
    let (h, w, t) = read_header(&mut r, RGB_MAGIC, 3)?;
    let plane = 3 * h * w;
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let raw = r.take(4 * plane, "rgb frame")?;
        frames.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f32>>(),
        );
    }
    let boxes = read_boxes(&mut r, t)?;
    check_trailing(&r)?;
    Ok(RgbSequence {
        height: h,
        width: w,
        frames,
        raw_boxes: boxes,
    })
}

pub fn save_silhouette_pack(seq: &SilhouetteSequence, path: &Path) -> Result<(), SilError> {
    fs::write(path, encode_silhouette_pack(seq))?;
    Ok(())
}

pub fn load_silhouette_pack(path: &Path) -> Result<SilhouetteSequence, SilError> {
    decode_silhouette_pack(&fs::read(path)?)
}

pub fn save_rgb_pack(seq: &RgbSequence, path: &Path) -> Result<(), SilError> {
    fs::write(path, encode_rgb_pack(seq))?;
    Ok(())
}

pub fn load_rgb_pack(path: &Path) -> Result<RgbSequence, SilError> {
    decode_rgb_pack(&fs::read(path)?)
}

// ---- PGM import ------------------------------------------------------------

/// Imports a directory of binary PGM (P5, maxval 255) masks, ordered by file
/// name; values >= 128 become foreground.
pub fn import_pgm_dir(dir: &Path) -> Result<SilhouetteSequence, SilError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("pgm"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SilError::Malformed {
            offset: 0,
            msg: format!("no .pgm files under {}", dir.display()),
        });
    }
    let mut dims = None;
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let (w, h, mask) = parse_pgm(&fs::read(p)?, p)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(SilError::DimensionMismatch(format!(
                    "{} is {}x{}, expected {}x{}",
                    p.display(),
                    h,
                    w,
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        frames.push(mask);
    }
    let (h, w) = dims.unwrap();
    Ok(SilhouetteSequence::new(h, w, frames))
}

fn parse_pgm(buf: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>), SilError> {
    let mut pos = 0usize;
    let mut token = |buf: &[u8]| -> Result<(usize, String), SilError> {
        // skip whitespace and # comments
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(SilError::Malformed {
                offset: start,
                msg: format!("{}: unexpected end of header", path.display()),
            });
        }
        Ok((start, String::from_utf8_lossy(&buf[start..pos]).into_owned()))
    };

    let (off, magic) = token(buf)?;
    if magic != "P5" {
        return Err(SilError::Malformed {
            offset: off,
            msg: format!("{}: not a P5 PGM (found {magic:?})", path.display()),
        });
    }
    let mut num = |buf: &[u8], what: &str| -> Result<usize, SilError> {
        let (off, s) = token(buf)?;
        s.parse().map_err(|_| SilError::Malformed {
            offset: off,
            msg: format!("{}: bad {what} {s:?}", path.display()),
        })
    };
    let w = num(buf, "width")?;
    let h = num(buf, "height")?;
    let maxval = num(buf, "maxval")?;
    if maxval != 255 {
        return Err(SilError::Malformed {
            offset: pos,
            msg: format!("{}: maxval {maxval}, expected 255", path.display()),
        });
    }
    pos += 1; // single whitespace after maxval
    if buf.len() < pos + h * w {
        return Err(SilError::Truncated {
            offset: pos,
            what: "pgm pixels",
            expected: h * w,
            found: buf.len().saturating_sub(pos),
        });
    }
    let mask = buf[pos..pos + h * w]
        .iter()
        .map(|&v| (v >= 128) as u8)
        .collect();
    Ok((w, h, mask))
}

/// Writes one mask as a binary PGM, foreground 255 on black.
pub fn write_pgm(mask: &[u8], height: usize, width: usize, path: &Path) -> Result<(), SilError> {
    assert_eq!(mask.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(height: usize, width: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<u8> {
        let mut f = vec![0u8; height * width];
        for y in rows {
            for x in cols.clone() {
                f[y * width + x] = 1;
            }
        }
        f
    }

    #[test]
    fn tight_box_and_counts() {
        let f = solid(8, 8, 2..5, 3..7);
        let b = tight_box(&f, 8, 8);
        assert_eq!(b, BoundingBox { top: 2, left: 3, h: 3, w: 4 });
        assert!(tight_box(&vec![0u8; 64], 8, 8).is_empty());
    }

    #[test]
    fn identity_when_box_is_already_target() {
        let f = solid(64, 64, 0..64, 0..64);
        let seq = SilhouetteSequence::new(64, 64, vec![f.clone()]);
        let (out, rho) = normalize(&seq, (64, 64)).unwrap();
        assert_eq!(out.frame(0), &f[..]);
        assert_eq!(rho.rho[0], [1.0, 1.0]);
    }

    #[test]
    fn downscale_half_is_centered() {
        // tight box 128x64 inside a 128x80 frame -> 64x32 content centered
        let f = solid(128, 80, 0..128, 5..69);
        let seq = SilhouetteSequence::new(128, 80, vec![f]);
        let (out, rho) = normalize(&seq, (64, 64)).unwrap();
        assert_eq!(rho.rho[0], [2.0, 1.0]);
        assert_eq!(out.fg_count(0), 64 * 32);
        let expect = solid(64, 64, 0..64, 16..48);
        assert_eq!(out.frame(0), &expect[..]);
    }

    #[test]
    fn upscale_doubles() {
        let f = solid(70, 40, 10..42, 4..20);
        let seq = SilhouetteSequence::new(70, 40, vec![f]);
        let (out, rho) = normalize(&seq, (64, 64)).unwrap();
        assert_eq!(rho.rho[0], [0.5, 0.25]);
        let expect = solid(64, 64, 0..64, 16..48);
        assert_eq!(out.frame(0), &expect[..]);
    }

    #[test]
    fn ratio_invariant_to_horizontal_translation() {
        let a = solid(100, 90, 10..90, 2..34);
        let b = solid(100, 90, 10..90, 50..82);
        let sa = SilhouetteSequence::new(100, 90, vec![a]);
        let sb = SilhouetteSequence::new(100, 90, vec![b]);
        let (oa, ra) = normalize(&sa, (64, 64)).unwrap();
        let (ob, rb) = normalize(&sb, (64, 64)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(oa.frame(0), ob.frame(0));
    }

    #[test]
    fn static_frames_normalize_identically() {
        let f = solid(90, 70, 5..85, 20..52);
        let seq = SilhouetteSequence::new(90, 70, vec![f.clone(), f]);
        let (out, rho) = normalize(&seq, (64, 64)).unwrap();
        assert_eq!(out.frame(0), out.frame(1));
        assert_eq!(rho.rho[0], rho.rho[1]);
    }

    #[test]
    fn empty_frames_dropped_and_all_empty_errors() {
        let f = solid(32, 32, 4..28, 10..22);
        let seq =
            SilhouetteSequence::new(32, 32, vec![f.clone(), vec![0u8; 32 * 32], f.clone()]);
        let (out, rho) = normalize(&seq, (64, 64)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(rho.len(), 2);
        assert_eq!(out.frame(0), out.frame(1));

        let blank = SilhouetteSequence::new(32, 32, vec![vec![0u8; 32 * 32]]);
        assert!(matches!(
            normalize(&blank, (64, 64)),
            Err(SilError::EmptySequence)
        ));
    }

    #[test]
    fn idempotent_on_normalized_frames() {
        let f = solid(128, 80, 0..128, 5..69);
        let seq = SilhouetteSequence::new(128, 80, vec![f]);
        let (once, _) = normalize(&seq, (64, 64)).unwrap();
        let (twice, rho) = normalize(&once, (64, 64)).unwrap();
        assert_eq!(once.frame(0), twice.frame(0));
        // the second pass sees the already-rescaled box
        assert_eq!(rho.rho[0], [1.0, 0.5]);
    }

    #[test]
    fn rgb_follows_silhouette_placement() {
        let mask = solid(32, 32, 0..32, 8..24);
        let mut rgbf = vec![0.0f32; 3 * 32 * 32];
        for y in 0..32 {
            for x in 8..24 {
                rgbf[y * 32 + x] = 1.0; // red plane only
            }
        }
        let sil = SilhouetteSequence::new(32, 32, vec![mask]);
        let boxes = sil.raw_boxes.clone();
        let rgb = RgbSequence::new(32, 32, vec![rgbf], boxes);
        let (ns, nr, rho) = normalize_pair(&sil, &rgb, (64, 64)).unwrap();
        assert_eq!(rho.rho[0], [0.5, 0.25]);
        // the red plane is 1.0 exactly where the mask is set
        let chip = nr.frame(0);
        for i in 0..64 * 64 {
            let m = ns.frame(0)[i];
            assert_eq!(chip[i], m as f32, "red plane at {i}");
            assert_eq!(chip[64 * 64 + i], 0.0, "green plane at {i}");
        }
    }

    #[test]
    fn silhouette_pack_roundtrip() {
        let mut frames = Vec::new();
        for t in 0..5usize {
            frames.push(
                (0..31 * 17)
                    .map(|i| ((i * 31 + t * 7) % 5 == 0) as u8)
                    .collect::<Vec<u8>>(),
            );
        }
        let seq = SilhouetteSequence::new(17, 31, frames);
        let bytes = encode_silhouette_pack(&seq);
        let back = decode_silhouette_pack(&bytes).unwrap();
        assert_eq!(seq, back);
    }

    #[test]
    fn rgb_pack_roundtrip_is_bitwise() {
        let frames: Vec<Vec<f32>> = (0..3)
            .map(|t| {
                (0..3 * 9 * 7)
                    .map(|i| ((i * 13 + t * 5) % 97) as f32 / 97.0)
                    .collect()
            })
            .collect();
        let boxes = vec![BoundingBox { top: 1, left: 2, h: 5, w: 3 }; 3];
        let seq = RgbSequence::new(9, 7, frames, boxes);
        let back = decode_rgb_pack(&encode_rgb_pack(&seq)).unwrap();
        assert_eq!(back.raw_boxes, seq.raw_boxes);
        for t in 0..3 {
            let a: Vec<u32> = seq.frame(t).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.frame(t).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let seq = SilhouetteSequence::new(4, 4, vec![solid(4, 4, 1..3, 1..3)]);
        let mut bytes = encode_silhouette_pack(&seq);
        bytes[0] = b'X';
        match decode_silhouette_pack(&bytes) {
            Err(SilError::BadMagic { expected, found }) => {
                assert_eq!(expected, SIL_MAGIC);
                assert_eq!(&found[1..], &SIL_MAGIC[1..]);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncation_names_expected_vs_found() {
        let frames: Vec<Vec<u8>> = (0..10).map(|_| solid(8, 8, 2..6, 2..6)).collect();
        let seq = SilhouetteSequence::new(8, 8, frames);
        let bytes = encode_silhouette_pack(&seq);
        // header promises 10 frames; keep 9 frames' worth of mask bytes
        let cut = 20 + 9 * 8 + 3;
        match decode_silhouette_pack(&bytes[..cut]) {
            Err(SilError::Truncated {
                offset,
                what,
                expected,
                found,
            }) => {
                assert_eq!(what, "mask frame");
                assert_eq!(offset, 20 + 9 * 8);
                assert_eq!(expected, 8);
                assert_eq!(found, 3);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn rgb_magic_does_not_load_as_silhouette() {
        let rgb = RgbSequence::new(
            4,
            4,
            vec![vec![0.5; 48]],
            vec![BoundingBox { top: 0, left: 0, h: 4, w: 4 }],
        );
        assert!(matches!(
            decode_silhouette_pack(&encode_rgb_pack(&rgb)),
            Err(SilError::BadMagic { .. })
        ));
    }

    #[test]
    fn pgm_import_thresholds_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        // frame 0: one pixel at 128 (on), one at 127 (off)
        let mut px = vec![0u8; 6];
        px[1] = 128;
        px[4] = 127;
        let mut f0 = b"P5\n# comment\n3 2\n255\n".to_vec();
        f0.extend_from_slice(&px);
        fs::write(dir.path().join("a_000.pgm"), &f0).unwrap();
        let mut f1 = b"P5\n3 2\n255\n".to_vec();
        f1.extend_from_slice(&[255u8; 6]);
        fs::write(dir.path().join("a_001.pgm"), &f1).unwrap();

        let seq = import_pgm_dir(dir.path()).unwrap();
        assert_eq!((seq.height, seq.width, seq.len()), (2, 3, 2));
        assert_eq!(seq.frame(0), &[0, 1, 0, 0, 0, 0]);
        assert_eq!(seq.frame(1), &[1; 6]);
        assert_eq!(seq.raw_boxes[1], BoundingBox { top: 0, left: 0, h: 2, w: 3 });
    }

    #[test]
    fn write_pgm_reimports() {
        let dir = tempfile::tempdir().unwrap();
        let mask = solid(6, 5, 1..4, 2..5);
        write_pgm(&mask, 6, 5, &dir.path().join("m_0.pgm")).unwrap();
        let seq = import_pgm_dir(dir.path()).unwrap();
        assert_eq!(seq.frame(0), &mask[..]);
    }
}
