//! Procedural synthetic walker corpus: articulated 2D stick-ellipse figures
//! (head disc, torso ellipse, two two-segment legs) rendered to silhouette
//! masks with paired pseudo-RGB shading, scripted into walk/stand segments
//! with full or partial body visibility.
//!
//! Mask geometry is a pure function of (identity, script); the sequence seed
//! only picks the garment recoloring. Corpus regeneration under one seed is
//! byte-identical, and callers may generate sequences in parallel.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::silio::{self, RgbSequence, SilError, SilhouetteSequence};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("segment {segment}: {msg}")]
    GeometryExceedsFrame { segment: usize, msg: String },
    #[error("bad script: {0}")]
    BadScript(String),
    #[error(transparent)]
    Sil(#[from] SilError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    Walk,
    Stand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyMode {
    Full,
    Partial,
}

pub const CLASS_COUNT: usize = 4;

/// The four window/frame classes: body completeness × motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameClass {
    FullStand,
    FullGait,
    PartStand,
    PartGait,
}

impl FrameClass {
    pub fn of(mode: MotionMode, body: BodyMode) -> Self {
        match (body, mode) {
            (BodyMode::Full, MotionMode::Stand) => FrameClass::FullStand,
            (BodyMode::Full, MotionMode::Walk) => FrameClass::FullGait,
            (BodyMode::Partial, MotionMode::Stand) => FrameClass::PartStand,
            (BodyMode::Partial, MotionMode::Walk) => FrameClass::PartGait,
        }
    }

    pub fn label(self) -> usize {
        match self {
            FrameClass::FullStand => 0,
            FrameClass::FullGait => 1,
            FrameClass::PartStand => 2,
            FrameClass::PartGait => 3,
        }
    }

    pub fn from_label(l: usize) -> Option<Self> {
        match l {
            0 => Some(FrameClass::FullStand),
            1 => Some(FrameClass::FullGait),
            2 => Some(FrameClass::PartStand),
            3 => Some(FrameClass::PartGait),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameClass::FullStand => "full-stand",
            FrameClass::FullGait => "full-gait",
            FrameClass::PartStand => "part-stand",
            FrameClass::PartGait => "part-gait",
        }
    }
}

/// Body proportions in source pixels plus gait kinematics. Distinct ids get
/// distinct geometry (sampled without replacement from a level grid) and a
/// distinct texture seed, so RGB carries identity cues silhouettes lack.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkerIdentity {
    pub id: u32,
    pub leg_length: f64,
    pub torso_height: f64,
    pub torso_width: f64,
    pub head_radius: f64,
    /// max thigh swing, radians
    pub stride_amplitude: f64,
    /// frames per gait cycle
    pub cadence: u32,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub mode: MotionMode,
    pub body: BodyMode,
    pub len: usize,
}

/// Ordered segments plus a per-frame camera scale factor; segment boundaries
/// are the ground-truth motion intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScript {
    pub segments: Vec<Segment>,
    pub camera_scale_track: Vec<f64>,
}

impl SequenceScript {
    pub fn new(segments: Vec<Segment>, camera_scale_track: Vec<f64>) -> Self {
        let total: usize = segments.iter().map(|s| s.len).sum();
        assert!(segments.iter().all(|s| s.len > 0), "segment durations must be positive");
        assert_eq!(total, camera_scale_track.len(), "scale track length");
        SequenceScript {
            segments,
            camera_scale_track,
        }
    }

    pub fn constant_scale(segments: Vec<Segment>, scale: f64) -> Self {
        let total: usize = segments.iter().map(|s| s.len).sum();
        SequenceScript::new(segments, vec![scale; total])
    }

    pub fn total_len(&self) -> usize {
        self.camera_scale_track.len()
    }
}

/// Per-frame class labels and the full-body walking intervals `[start, end)`.
/// Partial-body walking is labeled part-gait per frame but never listed as a
/// usable interval: an incomplete body cannot be handed to recognition.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub classes: Vec<FrameClass>,
    pub walk_intervals: Vec<(usize, usize)>,
}

// ---- rendering ------------------------------------------------------------

const LEG_THICKNESS_FRAC: f64 = 0.24; // of torso width
const KNEE_FLEX_FRAC: f64 = 0.6; // of stride amplitude
const STAND_SPLAY: f64 = 0.07; // radians

// Per-leg asymmetry so the two braid strands are distinguishable: without it
// the knee-row pattern nearly repeats at half the cadence (legs swap roles)
// and the autocorrelation peak lands at the wrong lag.
const LEG_THICK: [f64; 2] = [1.18, 0.82];
const LEG_LEN: [f64; 2] = [1.0, 0.96];
const LEG_AMP: [f64; 2] = [1.0, 0.92];

struct Figure<'a> {
    idy: &'a WalkerIdentity,
    hip_y: f64,
    hip_x: f64,
}

impl Figure<'_> {
    fn leg_half(&self) -> f64 {
        self.idy.leg_length * 0.5
    }

    fn leg_radius(&self, leg: usize, s: f64) -> f64 {
        (self.idy.torso_width * LEG_THICKNESS_FRAC * LEG_THICK[leg] * s).max(1.2)
    }

    /// Conservative reach from the hip anchor, scaled.
    fn reach(&self, s: f64) -> (f64, f64, f64) {
        let thick = self.idy.torso_width * LEG_THICKNESS_FRAC * LEG_THICK[0];
        let up = (self.idy.torso_height + 2.0 * self.idy.head_radius) * s + 1.0;
        let down = (self.idy.leg_length + thick) * s + 1.0;
        let max_angle = self.idy.stride_amplitude * (1.0 + KNEE_FLEX_FRAC) + STAND_SPLAY;
        let lateral = (self.idy.leg_length * max_angle.sin().abs()
            + self.idy.torso_width * 0.5
            + thick)
            * s
            + 1.0;
        (up, down, lateral)
    }

    /// Paints one frame. `phase` is the gait phase in radians; stand mode
    /// ignores it and parks the legs at a slight splay.
    fn paint(&self, mask: &mut [u8], h: usize, w: usize, mode: MotionMode, s: f64, phase: f64) {
        let torso_cy = self.hip_y - self.idy.torso_height * 0.5 * s;
        paint_ellipse(
            mask,
            h,
            w,
            torso_cy,
            self.hip_x,
            self.idy.torso_height * 0.5 * s,
            self.idy.torso_width * 0.5 * s,
        );
        let head_cy = self.hip_y - (self.idy.torso_height + self.idy.head_radius) * s;
        paint_disc(mask, h, w, head_cy, self.hip_x, self.idy.head_radius * s);

        for leg in 0..2 {
            let half = self.leg_half() * LEG_LEN[leg] * s;
            let (l1, l2) = (half, half);
            let r = self.leg_radius(leg, s);
            let leg_phase = phase + leg as f64 * PI;
            let amp = self.idy.stride_amplitude * LEG_AMP[leg];
            let (theta, flex) = match mode {
                MotionMode::Walk => (
                    amp * leg_phase.sin(),
                    amp * KNEE_FLEX_FRAC * (0.5 + 0.5 * (2.0 * phase + leg as f64 * PI).sin()),
                ),
                MotionMode::Stand => (if leg == 0 { -STAND_SPLAY } else { STAND_SPLAY }, 0.0),
            };
            let knee_y = self.hip_y + l1 * theta.cos();
            let knee_x = self.hip_x + l1 * theta.sin();
            let shin = theta - flex; // knee bends backward
            let foot_y = knee_y + l2 * shin.cos();
            let foot_x = knee_x + l2 * shin.sin();
            paint_capsule(mask, h, w, self.hip_y, self.hip_x, knee_y, knee_x, r);
            paint_capsule(mask, h, w, knee_y, knee_x, foot_y, foot_x, r);
        }
    }
}

fn paint_ellipse(mask: &mut [u8], h: usize, w: usize, cy: f64, cx: f64, ay: f64, ax: f64) {
    let y0 = ((cy - ay).floor().max(0.0)) as usize;
    let y1 = ((cy + ay).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - ax).floor().max(0.0)) as usize;
    let x1 = ((cx + ax).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = (y as f64 - cy) / ay;
            let dx = (x as f64 - cx) / ax;
            if dy * dy + dx * dx <= 1.0 {
                mask[y * w + x] = 1;
            }
        }
    }
}

fn paint_disc(mask: &mut [u8], h: usize, w: usize, cy: f64, cx: f64, r: f64) {
    paint_ellipse(mask, h, w, cy, cx, r, r)
}

fn paint_capsule(mask: &mut [u8], h: usize, w: usize, y0: f64, x0: f64, y1: f64, x1: f64, r: f64) {
    let ylo = ((y0.min(y1) - r).floor().max(0.0)) as usize;
    let yhi = ((y0.max(y1) + r).ceil().min(h as f64 - 1.0)) as usize;
    let xlo = ((x0.min(x1) - r).floor().max(0.0)) as usize;
    let xhi = ((x0.max(x1) + r).ceil().min(w as f64 - 1.0)) as usize;
    let (vy, vx) = (y1 - y0, x1 - x0);
    let len2 = (vy * vy + vx * vx).max(1e-12);
    for y in ylo..=yhi {
        for x in xlo..=xhi {
            let (py, px) = (y as f64 - y0, x as f64 - x0);
            let t = ((py * vy + px * vx) / len2).clamp(0.0, 1.0);
            let (dy, dx) = (py - t * vy, px - t * vx);
            if dy * dy + dx * dx <= r * r {
                mask[y * w + x] = 1;
            }
        }
    }
}

/// Blanks the lower half of the figure's vertical extent in place, leaving
/// head and torso. The cut sits above the hip for any of the sampled body
/// proportions, so a partial chip's knee row always lands on the torso — the
/// wide band that separates part from full classes.
fn crop_partial(mask: &mut [u8], h: usize, w: usize) {
    let mut y0 = h;
    let mut y1 = 0;
    for y in 0..h {
        if mask[y * w..(y + 1) * w].iter().any(|&v| v != 0) {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if y0 > y1 {
        return;
    }
    let keep = (((y1 - y0 + 1) as f64) * 0.5).round().max(1.0) as usize;
    for y in (y0 + keep)..=y1 {
        mask[y * w..(y + 1) * w].fill(0);
    }
}

// ---- pseudo-RGB -------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(a)) ^ splitmix64(b.wrapping_add(0x5851F42D4C957F2D)))
}

fn lattice_hash(seed: u64, x: i64, y: i64) -> f64 {
    let h = mix(seed, x as u64, y as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise over an integer lattice keyed by `seed`.
fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let n00 = lattice_hash(seed, x0, y0);
    let n01 = lattice_hash(seed, x0 + 1, y0);
    let n10 = lattice_hash(seed, x0, y0 + 1);
    let n11 = lattice_hash(seed, x0 + 1, y0 + 1);
    n00 * (1.0 - fx) * (1.0 - fy) + n01 * fx * (1.0 - fy) + n10 * (1.0 - fx) * fy + n11 * fx * fy
}

const GARMENTS: [[f64; 3]; 6] = [
    [0.60, 0.20, 0.20],
    [0.20, 0.35, 0.60],
    [0.25, 0.50, 0.25],
    [0.55, 0.50, 0.20],
    [0.45, 0.25, 0.50],
    [0.30, 0.55, 0.55],
];
const SKIN: [f64; 3] = [0.85, 0.70, 0.55];
const NOISE_FREQ: f64 = 0.35;

/// Garment palette index a sequence seed selects.
pub fn garment_of_seed(seed: u64) -> usize {
    (splitmix64(seed) % GARMENTS.len() as u64) as usize
}

// ---- sequence generation ----------------------------------------------------

/// Renders one scripted sequence. Masks depend only on (identity, script);
/// `seed` picks the per-sequence garment recoloring of the RGB planes.
pub fn generate_sequence(
    identity: &WalkerIdentity,
    script: &SequenceScript,
    frame_size: (usize, usize),
    seed: u64,
) -> Result<(SilhouetteSequence, RgbSequence, GroundTruth), SynthError> {
    assert!(identity.cadence >= 8, "cadence must be at least 8 frames");
    let (h, w) = frame_size;
    let t_total = script.total_len();
    if t_total == 0 {
        return Err(SynthError::BadScript("script has no frames".into()));
    }

    let fig = Figure {
        idy: identity,
        hip_y: h as f64 * 0.5,
        hip_x: w as f64 * 0.5,
    };

    // analytic fit check per segment, at the segment's largest scale
    let mut frame0 = 0usize;
    for (i, seg) in script.segments.iter().enumerate() {
        let smax = script.camera_scale_track[frame0..frame0 + seg.len]
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        let (up, down, lateral) = fig.reach(smax);
        if fig.hip_y - up < 0.0
            || fig.hip_y + down > (h - 1) as f64
            || fig.hip_x - lateral < 0.0
            || fig.hip_x + lateral > (w - 1) as f64
        {
            return Err(SynthError::GeometryExceedsFrame {
                segment: i,
                msg: format!(
                    "walker id {} at scale {smax:.3} needs ±({up:.1},{down:.1}) vertical and ±{lateral:.1} lateral around ({:.1},{:.1}) in a {h}x{w} frame",
                    identity.id, fig.hip_y, fig.hip_x
                ),
            });
        }
        frame0 += seg.len;
    }

    let garment = GARMENTS[garment_of_seed(seed)];
    let dphase = 2.0 * PI / identity.cadence as f64;

    let mut masks = Vec::with_capacity(t_total);
    let mut rgbs = Vec::with_capacity(t_total);
    let mut classes = Vec::with_capacity(t_total);
    let mut walk_intervals = Vec::new();
    let mut phase = 0.0f64;
    let mut t = 0usize;
    for seg in &script.segments {
        if seg.mode == MotionMode::Walk && seg.body == BodyMode::Full {
            walk_intervals.push((t, t + seg.len));
        }
        for _ in 0..seg.len {
            let s = script.camera_scale_track[t];
            let mut mask = vec![0u8; h * w];
            fig.paint(&mut mask, h, w, seg.mode, s, phase);
            if seg.body == BodyMode::Partial {
                crop_partial(&mut mask, h, w);
            }

            let mut rgb = vec![0.0f32; 3 * h * w];
            let neck_y = fig.hip_y - identity.torso_height * s;
            for y in 0..h {
                for x in 0..w {
                    if mask[y * w + x] == 0 {
                        continue;
                    }
                    // body-anchored coordinates keep texture glued to the figure
                    let u = (x as f64 - fig.hip_x) / s * NOISE_FREQ;
                    let v = (y as f64 - fig.hip_y) / s * NOISE_FREQ;
                    let n = 0.55 + 0.45 * value_noise(identity.texture_seed, u, v);
                    let base = if (y as f64) < neck_y { SKIN } else { garment };
                    for c in 0..3 {
                        let q = (base[c] * n * 255.0).round() / 255.0;
                        rgb[c * h * w + y * w + x] = q as f32;
                    }
                }
            }

            masks.push(mask);
            rgbs.push(rgb);
            classes.push(FrameClass::of(seg.mode, seg.body));
            if seg.mode == MotionMode::Walk {
                phase += dphase;
            }
            t += 1;
        }
    }

    let sil = SilhouetteSequence::new(h, w, masks);
    let rgb = RgbSequence::new(h, w, rgbs, sil.raw_boxes.clone());
    Ok((
        sil,
        rgb,
        GroundTruth {
            classes,
            walk_intervals,
        },
    ))
}

// ---- corpus -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgbPolicy {
    /// No RGB packs at all.
    None,
    /// RGB only where training needs it: train-split sequences containing a
    /// full-body walk segment.
    TrainWalkFull,
    All,
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub out_dir: PathBuf,
    pub frame_size: (usize, usize),
    pub rgb: RgbPolicy,
    pub train_fraction: f64,
    /// Sequences rendered concurrently. Output bytes do not depend on this:
    /// rendering is pure per sequence and files are written in one fixed
    /// order by the coordinating thread.
    pub threads: usize,
}

impl CorpusConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        CorpusConfig {
            out_dir: out_dir.into(),
            frame_size: (96, 96),
            rgb: RgbPolicy::TrainWalkFull,
            train_fraction: 2.0 / 3.0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub mode: MotionMode,
    pub start: usize,
    pub end: usize,
    pub body: BodyMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub rgb_file: Option<String>,
    pub identity: u32,
    pub condition: String,
    pub split: Split,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub frame_height: usize,
    pub frame_width: usize,
    pub train_identities: Vec<u32>,
    pub test_identities: Vec<u32>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn save(&self, root: &Path) -> Result<(), SynthError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(root.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<CorpusManifest, SynthError> {
        Ok(serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?)
    }

    pub fn entries_for_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Ground truth reconstructed from an entry's segment records.
    pub fn ground_truth(entry: &ManifestEntry) -> GroundTruth {
        let mut classes = Vec::new();
        let mut walk_intervals = Vec::new();
        for s in &entry.segments {
            if s.mode == MotionMode::Walk && s.body == BodyMode::Full {
                walk_intervals.push((s.start, s.end));
            }
            classes.extend(std::iter::repeat(FrameClass::of(s.mode, s.body)).take(s.end - s.start));
        }
        GroundTruth {
            classes,
            walk_intervals,
        }
    }
}

/// Samples `n` identities without geometric collisions: a shuffled level grid
/// plus sub-level jitter, so any two identities differ by at least one full
/// level step in some field.
pub fn sample_identities(n: usize, seed: u64, rng_salt: u64) -> Vec<WalkerIdentity> {
    const LEG: [f64; 4] = [19.0, 22.0, 25.0, 28.0];
    const TORSO_H: [f64; 3] = [14.0, 17.0, 20.0];
    const TORSO_W: [f64; 3] = [7.0, 9.0, 11.0];
    const HEAD_R: [f64; 3] = [3.0, 4.0, 5.0];
    const CADENCE: [u32; 4] = [16, 20, 24, 28];
    const AMP: [f64; 3] = [0.5, 0.65, 0.8];
    let total = LEG.len() * TORSO_H.len() * TORSO_W.len() * HEAD_R.len() * CADENCE.len() * AMP.len();
    assert!(n <= total, "at most {total} distinct identities supported");

    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, rng_salt, 0x1D));
    let mut combos: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        let j = rng.gen_range(0..=i);
        combos.swap(i, j);
    }

    (0..n)
        .map(|id| {
            let mut c = combos[id];
            let leg = LEG[c % LEG.len()];
            c /= LEG.len();
            let th = TORSO_H[c % TORSO_H.len()];
            c /= TORSO_H.len();
            let tw = TORSO_W[c % TORSO_W.len()];
            c /= TORSO_W.len();
            let hr = HEAD_R[c % HEAD_R.len()];
            c /= HEAD_R.len();
            let cad = CADENCE[c % CADENCE.len()];
            c /= CADENCE.len();
            let amp = AMP[c % AMP.len()];
            WalkerIdentity {
                id: id as u32,
                leg_length: leg + rng.gen_range(-0.4..0.4),
                torso_height: th + rng.gen_range(-0.4..0.4),
                torso_width: tw + rng.gen_range(-0.3..0.3),
                head_radius: hr + rng.gen_range(-0.2..0.2),
                stride_amplitude: amp + rng.gen_range(-0.02..0.02),
                cadence: cad,
                texture_seed: mix(seed, 0x7E87, id as u64),
            }
        })
        .collect()
}

/// The script menu: two disjoint condition sets so galleries come from set 1
/// and probes from set 2. Index 1 is the mixed probe — full-body walking
/// around a long partial-body standing middle.
fn script_table(k: usize) -> (&'static [(MotionMode, BodyMode, usize)], u32) {
    use BodyMode::{Full, Partial};
    use MotionMode::{Stand, Walk};
    const MENU: [(&[(MotionMode, BodyMode, usize)], u32); 8] = [
        (&[(Walk, Full, 120)], 1),
        (&[(Walk, Full, 45), (Stand, Partial, 90), (Walk, Full, 45)], 2),
        (&[(Stand, Full, 60)], 1),
        (&[(Walk, Partial, 100)], 1),
        (&[(Stand, Partial, 60)], 2),
        (&[(Walk, Full, 120)], 2),
        (&[(Stand, Full, 60)], 2),
        (&[(Walk, Partial, 100)], 2),
    ];
    let (segs, set) = MENU[k % MENU.len()];
    (segs, set)
}

pub const SCRIPT_MENU_LEN: usize = 8;

/// Builds the script for (identity, script index): the menu's segments plus a
/// camera scale track that ramps only while walking, so standing sequences
/// hold a constant size.
pub fn corpus_script(seed: u64, id: u32, k: usize) -> SequenceScript {
    let (segs, _) = script_table(k);
    let segments: Vec<Segment> = segs
        .iter()
        .map(|&(mode, body, len)| Segment { mode, body, len })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id as u64, 0xCA0 + k as u64));
    let s0: f64 = rng.gen_range(0.92..1.08);
    let s1: f64 = (s0 + rng.gen_range(-0.20..-0.05)).max(0.72);
    let walk_frames: usize = segments
        .iter()
        .filter(|s| s.mode == MotionMode::Walk)
        .map(|s| s.len)
        .sum();
    let mut track = Vec::new();
    let mut walked = 0usize;
    for seg in &segments {
        for _ in 0..seg.len {
            let u = if walk_frames <= 1 {
                0.0
            } else {
                walked as f64 / (walk_frames - 1) as f64
            };
            track.push(s0 + (s1 - s0) * u);
            if seg.mode == MotionMode::Walk {
                walked += 1;
            }
        }
    }
    SequenceScript::new(segments, track)
}

/// Sequence seed: shared across one identity's scripts within a condition
/// set, so each set wears one garment and the sets usually differ.
fn sequence_seed(seed: u64, id: u32, set: u32) -> u64 {
    mix(seed, id as u64, 0x6A + set as u64)
}

/// Generates the whole corpus under `cfg.out_dir`: pack files plus
/// `manifest.json`. Identity split is disjoint by construction.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    n_identities: usize,
    scripts_per_identity: usize,
    seed: u64,
) -> Result<CorpusManifest, SynthError> {
    assert!(n_identities >= 2, "need at least two identities");
    assert!(
        (1..=SCRIPT_MENU_LEN).contains(&scripts_per_identity),
        "scripts_per_identity must be 1..={SCRIPT_MENU_LEN}"
    );
    fs::create_dir_all(cfg.out_dir.join("packs"))?;

    let identities = sample_identities(n_identities, seed, 0);
    let n_train = ((n_identities as f64 * cfg.train_fraction).round() as usize)
        .clamp(1, n_identities - 1);
    let train_identities: Vec<u32> = (0..n_train as u32).collect();
    let test_identities: Vec<u32> = (n_train as u32..n_identities as u32).collect();

    // One job per (identity, script). Rendering is pure and runs on worker
    // threads in chunks; writing stays on this thread in job order, so the
    // corpus bytes are identical for any thread count.
    let jobs: Vec<(usize, usize)> = (0..identities.len())
        .flat_map(|i| (0..scripts_per_identity).map(move |k| (i, k)))
        .collect();
    let render = |&(i, k): &(usize, usize)| -> Result<(SilhouetteSequence, RgbSequence), SynthError> {
        let idy = &identities[i];
        let script = corpus_script(seed, idy.id, k);
        let (_, set) = script_table(k);
        let (sil, rgb, _) = generate_sequence(idy, &script, cfg.frame_size, sequence_seed(seed, idy.id, set))?;
        Ok((sil, rgb))
    };

    let mut entries = Vec::new();
    for chunk in jobs.chunks(cfg.threads.max(1)) {
        let rendered: Vec<Result<_, SynthError>> = if cfg.threads <= 1 {
            chunk.iter().map(render).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|job| s.spawn(move || render(job)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("render thread panicked"))
                    .collect()
            })
        };
        for (&(i, k), res) in chunk.iter().zip(rendered) {
            let (sil, rgb) = res?;
            let idy = &identities[i];
            let split = if (idy.id as usize) < n_train {
                Split::Train
            } else {
                Split::Test
            };
            let script = corpus_script(seed, idy.id, k);
            let (_, set) = script_table(k);
            let seq_seed = sequence_seed(seed, idy.id, set);

            let stem = format!("id{:03}_s{k}", idy.id);
            let file = format!("packs/{stem}.gsp");
            silio::save_silhouette_pack(&sil, &cfg.out_dir.join(&file))?;

            let has_full_walk = script
                .segments
                .iter()
                .any(|s| s.mode == MotionMode::Walk && s.body == BodyMode::Full);
            let want_rgb = match cfg.rgb {
                RgbPolicy::None => false,
                RgbPolicy::All => true,
                RgbPolicy::TrainWalkFull => split == Split::Train && has_full_walk,
            };
            let rgb_file = if want_rgb {
                let f = format!("packs/{stem}.grp");
                silio::save_rgb_pack(&rgb, &cfg.out_dir.join(&f))?;
                Some(f)
            } else {
                None
            };

            let mut segments = Vec::new();
            let mut at = 0usize;
            for seg in &script.segments {
                segments.push(SegmentRecord {
                    mode: seg.mode,
                    start: at,
                    end: at + seg.len,
                    body: seg.body,
                });
                at += seg.len;
            }
            entries.push(ManifestEntry {
                file,
                rgb_file,
                identity: idy.id,
                condition: format!("set{set}-g{}", garment_of_seed(seq_seed)),
                split,
                segments,
            });
        }
    }

    let manifest = CorpusManifest {
        seed,
        frame_height: cfg.frame_size.0,
        frame_width: cfg.frame_size.1,
        train_identities,
        test_identities,
        entries,
    };
    manifest.save(&cfg.out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_a() -> WalkerIdentity {
        WalkerIdentity {
            id: 0,
            leg_length: 24.0,
            torso_height: 17.0,
            torso_width: 9.0,
            head_radius: 4.0,
            stride_amplitude: 0.65,
            cadence: 20,
            texture_seed: 7,
        }
    }

    fn walk_script(frames: usize) -> SequenceScript {
        SequenceScript::constant_scale(
            vec![Segment {
                mode: MotionMode::Walk,
                body: BodyMode::Full,
                len: frames,
            }],
            1.0,
        )
    }

    /// Column centroid of the lowest foreground row: the leg tip trace.
    fn leg_tip(seq: &SilhouetteSequence, t: usize) -> f64 {
        let (h, w) = (seq.height, seq.width);
        let f = seq.frame(t);
        for y in (0..h).rev() {
            let row = &f[y * w..(y + 1) * w];
            let count = row.iter().filter(|&&v| v != 0).count();
            if count > 0 {
                let sum: usize = row.iter().enumerate().filter(|(_, &v)| v != 0).map(|(x, _)| x).sum();
                return sum as f64 / count as f64;
            }
        }
        panic!("empty frame {t}");
    }

    fn autocorr(series: &[f64], lag: usize) -> f64 {
        let n = series.len();
        let mean = series.iter().sum::<f64>() / n as f64;
        let var: f64 = series.iter().map(|&s| (s - mean) * (s - mean)).sum();
        let cov: f64 = (0..n - lag)
            .map(|t| (series[t] - mean) * (series[t + lag] - mean))
            .sum();
        cov / var
    }

    #[test]
    fn stand_script_is_static_and_unwalked() {
        let idy = identity_a();
        let script = SequenceScript::constant_scale(
            vec![Segment {
                mode: MotionMode::Stand,
                body: BodyMode::Full,
                len: 40,
            }],
            1.0,
        );
        let (sil, _, gt) = generate_sequence(&idy, &script, (96, 96), 3).unwrap();
        assert!(gt.classes.iter().all(|&c| c == FrameClass::FullStand));
        assert!(gt.walk_intervals.is_empty());
        for t in 1..sil.len() {
            assert_eq!(sil.frame(t), sil.frame(0), "frame {t} differs");
        }
    }

    #[test]
    fn leg_tip_period_matches_cadence() {
        let idy = identity_a(); // cadence 20
        let (sil, _, _) = generate_sequence(&idy, &walk_script(60), (96, 96), 3).unwrap();
        let series: Vec<f64> = (0..60).map(|t| leg_tip(&sil, t)).collect();
        let r20 = autocorr(&series, 20);
        for lag in 2..=30 {
            if lag % 20 == 0 {
                continue;
            }
            assert!(
                r20 > autocorr(&series, lag),
                "lag {lag}: r {} >= r20 {r20}",
                autocorr(&series, lag)
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let idy = identity_a();
        let script = corpus_script(99, 0, 1);
        let a = generate_sequence(&idy, &script, (96, 96), 5).unwrap();
        let b = generate_sequence(&idy, &script, (96, 96), 5).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn partial_crops_lower_half() {
        let idy = identity_a();
        let full = SequenceScript::constant_scale(
            vec![Segment { mode: MotionMode::Stand, body: BodyMode::Full, len: 1 }],
            1.0,
        );
        let part = SequenceScript::constant_scale(
            vec![Segment { mode: MotionMode::Stand, body: BodyMode::Partial, len: 1 }],
            1.0,
        );
        let (sf, _, gtf) = generate_sequence(&idy, &full, (96, 96), 3).unwrap();
        let (sp, _, gtp) = generate_sequence(&idy, &part, (96, 96), 3).unwrap();
        assert_eq!(gtf.classes[0], FrameClass::FullStand);
        assert_eq!(gtp.classes[0], FrameClass::PartStand);
        let hf = sf.raw_boxes[0].h as f64;
        let hp = sp.raw_boxes[0].h as f64;
        assert!((hp / hf - 0.5).abs() < 0.05, "kept fraction {}", hp / hf);
        assert!(sp.fg_count(0) < sf.fg_count(0));
    }

    #[test]
    fn oversized_walker_names_segment() {
        let mut idy = identity_a();
        idy.leg_length = 60.0;
        let script = SequenceScript::constant_scale(
            vec![
                Segment { mode: MotionMode::Stand, body: BodyMode::Full, len: 5 },
                Segment { mode: MotionMode::Walk, body: BodyMode::Full, len: 5 },
            ],
            1.0,
        );
        match generate_sequence(&idy, &script, (64, 64), 0) {
            Err(SynthError::GeometryExceedsFrame { segment, .. }) => assert_eq!(segment, 0),
            other => panic!("expected geometry error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_script_ground_truth() {
        let idy = identity_a();
        let script = corpus_script(1, 0, 1);
        let (_, _, gt) = generate_sequence(&idy, &script, (96, 96), 9).unwrap();
        assert_eq!(gt.walk_intervals, vec![(0, 45), (135, 180)]);
        assert_eq!(gt.classes[0], FrameClass::FullGait);
        assert_eq!(gt.classes[45], FrameClass::PartStand);
        assert_eq!(gt.classes[134], FrameClass::PartStand);
        assert_eq!(gt.classes[135], FrameClass::FullGait);
    }

    #[test]
    fn rgb_carries_garment_and_texture() {
        let idy = identity_a();
        let script = walk_script(10);
        // distinct garments for these two seeds
        let (s1, s2) = (2u64, 3u64);
        assert_ne!(garment_of_seed(s1), garment_of_seed(s2));
        let (sil, rgb_a, _) = generate_sequence(&idy, &script, (96, 96), s1).unwrap();
        let (_, rgb_b, _) = generate_sequence(&idy, &script, (96, 96), s2).unwrap();
        assert_ne!(rgb_a, rgb_b, "garment recoloring must differ");
        // background black, foreground shaded
        let f = rgb_a.frame(0);
        let m = sil.frame(0);
        for i in 0..96 * 96 {
            if m[i] == 0 {
                assert_eq!(f[i], 0.0);
            }
        }
        assert!(f.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig::new(dir.path());
        let m1 = generate_corpus(&cfg, 4, 2, 42).unwrap();
        assert_eq!(m1.entries.len(), 8);
        for id in 0..4u32 {
            assert_eq!(m1.entries.iter().filter(|e| e.identity == id).count(), 2);
        }
        assert_eq!(m1.train_identities, vec![0, 1, 2]);
        assert_eq!(m1.test_identities, vec![3]);
        let bytes1 = fs::read(dir.path().join("manifest.json")).unwrap();
        let pack1 = fs::read(dir.path().join(&m1.entries[0].file)).unwrap();

        let m2 = generate_corpus(&cfg, 4, 2, 42).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(bytes1, fs::read(dir.path().join("manifest.json")).unwrap());
        assert_eq!(pack1, fs::read(dir.path().join(&m2.entries[0].file)).unwrap());

        // Thread count must not leak into the bytes.
        let threaded = CorpusConfig {
            threads: 3,
            ..CorpusConfig::new(dir.path())
        };
        let m3 = generate_corpus(&threaded, 4, 2, 42).unwrap();
        assert_eq!(m1, m3);
        assert_eq!(bytes1, fs::read(dir.path().join("manifest.json")).unwrap());
        assert_eq!(pack1, fs::read(dir.path().join(&m3.entries[0].file)).unwrap());

        let loaded = CorpusManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m1);
        let gt = CorpusManifest::ground_truth(&m1.entries[1]);
        assert_eq!(gt.classes.len(), 180);
    }

    #[test]
    fn identities_are_pairwise_distinct() {
        let ids = sample_identities(40, 7, 0);
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let (a, b) = (&ids[i], &ids[j]);
                let geom_differs = (a.leg_length - b.leg_length).abs() > 1.0
                    || (a.torso_height - b.torso_height).abs() > 1.0
                    || (a.torso_width - b.torso_width).abs() > 0.8
                    || (a.head_radius - b.head_radius).abs() > 0.5
                    || (a.stride_amplitude - b.stride_amplitude).abs() > 0.05
                    || a.cadence != b.cadence;
                assert!(
                    geom_differs || a.texture_seed != b.texture_seed,
                    "identities {i} and {j} coincide"
                );
            }
        }
    }
}
