//! Gait detector: a small 2-D conv net classifies DHS windows into
//! {full,part} × {stand,gait}, and interval post-processing (confidence
//! filter, 1-D NMS, gap merging) turns the surviving full-gait windows into
//! disjoint spans plus a coverage verdict for the whole sequence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dhs::{extract_dhs, random_crop, DhsError, DhsImage, DhsWindow};
use crate::silio::{load_silhouette_pack, normalize, SilError};
use crate::synth::{CorpusManifest, FrameClass, Split, SynthError, CLASS_COUNT};
use crate::tensor::{
    fan_in_uniform, Array, Gradients, ParameterStore, Scalar, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("window of {len} frames is shorter than the {min}-frame minimum")]
    WindowTooShort { len: usize, min: usize },
    #[error("training corpus has no {0} frames")]
    MissingClass(&'static str),
    #[error("no pure-class training sequences in corpus")]
    EmptyCorpus,
    #[error("per-frame label lengths differ: predicted {pred}, truth {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("checkpoint does not match detector architecture: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dhs(#[from] DhsError),
    #[error(transparent)]
    Sil(#[from] SilError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Architecture and protocol knobs. The defaults are the reference setup;
/// tests shrink `channels`/`steps` to stay fast.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Output channels per conv block; spatial rows are halved after each of
    /// the first three blocks.
    pub channels: Vec<usize>,
    pub hidden: usize,
    /// Window sizes swept over a sequence, smallest is the detectable minimum.
    pub window_sizes: Vec<usize>,
    pub stride: usize,
    /// Confidence floor for a full-gait window to become a candidate.
    pub tau: f64,
    pub nms_iou: f64,
    /// Merge spans separated by fewer than this many frames.
    pub merge_gap: usize,
    /// Minimum gait coverage for a sequence to count as usable.
    pub rho_min: f64,
    pub crop_min: usize,
    pub crop_max: usize,
    pub mirror_augment: bool,
    /// Crops averaged into one gradient step.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Steps at which the learning rate is cut to a tenth.
    pub milestones: Vec<usize>,
    /// Evaluate held-out window accuracy every this many steps (0 = never).
    pub eval_every: usize,
    pub eval_crops_per_seq: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: vec![16, 32, 64, 64, 64],
            hidden: 64,
            window_sizes: vec![33, 50, 80],
            stride: 10,
            tau: 0.5,
            nms_iou: 0.5,
            merge_gap: 10,
            rho_min: 0.2,
            crop_min: 30,
            crop_max: 100,
            mirror_augment: true,
            batch: 8,
            lr: 0.01,
            momentum: 0.9,
            steps: 1500,
            milestones: vec![900, 1300],
            eval_every: 500,
            eval_crops_per_seq: 4,
        }
    }
}

const LEAK: f64 = 0.01;
const DHS_HEIGHT: usize = 64;

#[derive(Debug)]
pub struct Detector<E: Scalar> {
    pub cfg: DetectorConfig,
    pub store: ParameterStore<E>,
}

/// Graph leaves for one forward pass, in `parameter_shapes` order.
struct Layers<E: Scalar> {
    named: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> Layers<E> {
    fn conv(&self, i: usize) -> (&Tensor<E>, &Tensor<E>) {
        (&self.named[2 * i].1, &self.named[2 * i + 1].1)
    }

    fn fc(&self, blocks: usize, j: usize) -> (&Tensor<E>, &Tensor<E>) {
        let base = 2 * blocks + 2 * j;
        (&self.named[base].1, &self.named[base + 1].1)
    }

    fn collect(&self, grads: &mut Gradients<E>) {
        for (name, t) in &self.named {
            if let Some(g) = t.grad() {
                grads.accumulate(name, &g);
            }
        }
    }
}

fn parameter_shapes(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut c_in = 1;
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        out.push((format!("mphi.block{}.conv.weight", i + 1), vec![c_out, c_in, 3, 3]));
        out.push((format!("mphi.block{}.conv.bias", i + 1), vec![c_out]));
        c_in = c_out;
    }
    out.push(("mphi.head.fc1.weight".into(), vec![cfg.hidden, c_in]));
    out.push(("mphi.head.fc1.bias".into(), vec![cfg.hidden]));
    out.push(("mphi.head.fc2.weight".into(), vec![CLASS_COUNT, cfg.hidden]));
    out.push(("mphi.head.fc2.bias".into(), vec![CLASS_COUNT]));
    out
}

impl<E: Scalar> Detector<E> {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Self {
        assert!(!cfg.channels.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (name, shape) in parameter_shapes(&cfg) {
            // Bias bound follows its layer's weight fan-in.
            let fan_in = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else if shape.len() == 2 {
                shape[1]
            } else if name.contains(".conv.") {
                let i: usize = name["mphi.block".len()..name.find(".conv").unwrap()]
                    .parse()
                    .unwrap();
                9 * if i == 1 { 1 } else { cfg.channels[i - 2] }
            } else if name.contains("fc1") {
                *cfg.channels.last().unwrap()
            } else {
                cfg.hidden
            };
            store.insert(&name, fan_in_uniform(&mut rng, &shape, fan_in));
        }
        Detector { cfg, store }
    }

    /// Wraps a loaded checkpoint, verifying every architecture parameter is
    /// present with the right shape.
    pub fn with_store(cfg: DetectorConfig, store: ParameterStore<E>) -> Result<Self, DetectorError> {
        for (name, shape) in parameter_shapes(&cfg) {
            match store.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(DetectorError::BadCheckpoint(format!(
                        "{name} has shape {:?}, expected {:?}",
                        a.shape(),
                        shape
                    )))
                }
                None => return Err(DetectorError::BadCheckpoint(format!("{name} is missing"))),
            }
        }
        Ok(Detector { cfg, store })
    }

    fn layers(&self, trainable: bool) -> Layers<E> {
        let named = parameter_shapes(&self.cfg)
            .into_iter()
            .map(|(name, _)| {
                let t = if trainable {
                    self.store.param(&name)
                } else {
                    self.store.constant(&name)
                };
                (name, t)
            })
            .collect();
        Layers { named }
    }

    /// Class logits for a `(N, 1, 64, t)` window batch; any `t` maps to the
    /// same output shape `(N, 4)`.
    fn logits(&self, layers: &Layers<E>, input: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let blocks = self.cfg.channels.len();
        let mut x = input.clone();
        for i in 0..blocks {
            let (w, b) = layers.conv(i);
            x = x.conv2d(w, b, (1, 1))?.leaky_relu(E::from_f64(LEAK));
            if i < 3 {
                debug_assert_eq!(x.shape()[2] % 2, 0);
                x = x.max_pool2d(2, 1)?;
            }
        }
        let x = x.reduce_max_axis(3)?; // over time
        let x = x.reduce_max_axis(2)?; // over rows
        let (w1, b1) = layers.fc(blocks, 0);
        let (w2, b2) = layers.fc(blocks, 1);
        let h = x.linear(w1, b1)?.leaky_relu(E::from_f64(LEAK));
        h.linear(w2, b2)
    }

    fn classify_with(
        &self,
        layers: &Layers<E>,
        w: &DhsWindow,
        mirror: bool,
    ) -> Result<WindowPrediction, DetectorError> {
        if w.length < self.cfg.crop_min {
            return Err(DetectorError::WindowTooShort {
                len: w.length,
                min: self.cfg.crop_min,
            });
        }
        let logits = self.logits(layers, &window_input::<E>(w, mirror))?;
        let row: Vec<f64> = logits
            .value()
            .data()
            .iter()
            .map(|&e| Scalar::to_f64(e))
            .collect();
        let mut best = 0;
        for i in 1..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        let exps: Vec<f64> = row.iter().map(|&x| (x - row[best]).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(WindowPrediction {
            start: w.start,
            length: w.length,
            class: FrameClass::from_label(best).unwrap(),
            confidence: exps[best] / z,
        })
    }

    pub fn classify_window(&self, w: &DhsWindow) -> Result<WindowPrediction, DetectorError> {
        self.classify_with(&self.layers(false), w, false)
    }

    pub fn classify_windows(
        &self,
        windows: &[DhsWindow],
    ) -> Result<Vec<WindowPrediction>, DetectorError> {
        let layers = self.layers(false);
        windows
            .iter()
            .map(|w| self.classify_with(&layers, w, false))
            .collect()
    }
}

/// Window pixels as a `(1, 1, rows, t)` graph leaf; `mirror` flips the
/// spatial rows (a left-right flip of the walker flips its height signature).
fn window_input<E: Scalar>(w: &DhsWindow, mirror: bool) -> Tensor<E> {
    let src = w.data();
    let mut data = Vec::with_capacity(src.len());
    for x in 0..w.width {
        let row = if mirror { w.width - 1 - x } else { x };
        for t in 0..w.length {
            data.push(E::from_f64(src[row * w.length + t] as f64));
        }
    }
    Tensor::leaf(Array::from_vec(&[1, 1, w.width, w.length], data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub start: usize,
    pub length: usize,
    pub class: FrameClass,
    pub confidence: f64,
}

/// Half-open candidate span scored by window confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInterval {
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

pub fn interval_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy 1-D non-maximum suppression. Candidates are taken in descending
/// confidence (ties: earlier start, then shorter), and a candidate is dropped
/// when its IoU with any kept span exceeds `iou_threshold`.
pub fn nms_1d(cands: &[ScoredInterval], iou_threshold: f64) -> Vec<ScoredInterval> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .confidence
            .partial_cmp(&cands[a].confidence)
            .expect("confidence must not be NaN")
            .then(cands[a].start.cmp(&cands[b].start))
            .then((cands[a].end - cands[a].start).cmp(&(cands[b].end - cands[b].start)))
    });
    let mut kept: Vec<ScoredInterval> = Vec::new();
    'cand: for &i in &order {
        for k in &kept {
            if interval_iou((cands[i].start, cands[i].end), (k.start, k.end)) > iou_threshold {
                continue 'cand;
            }
        }
        kept.push(cands[i].clone());
    }
    kept
}

/// Unions overlapping spans and fuses neighbors separated by fewer than
/// `gap` frames. Input must be sorted by start; output is disjoint and
/// sorted. Spans exactly `gap` apart stay separate.
pub fn merge_intervals(intervals: &[(usize, usize)], gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &(s, e) in intervals {
        debug_assert!(s <= e);
        match out.last_mut() {
            Some(last) => {
                debug_assert!(last.0 <= s, "intervals must be sorted by start");
                if s < last.1 + gap {
                    last.1 = last.1.max(e);
                } else {
                    out.push((s, e));
                }
            }
            None => out.push((s, e)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Disjoint half-open gait spans, sorted by start.
    pub intervals: Vec<(usize, usize)>,
    /// Per span, the confidence of the strongest surviving window inside it.
    pub confidences: Vec<f64>,
    /// Fraction of frames covered by `intervals`.
    pub rho: f64,
    pub usable: bool,
    /// Set when the sequence was rejected without running the net.
    pub reason: Option<String>,
}

/// Full detection pass over a normalized sequence: sweep windows, keep
/// confident full-gait ones, NMS, merge, then judge coverage.
pub fn detect<E: Scalar>(
    det: &Detector<E>,
    seq: &crate::silio::SilhouetteSequence,
) -> Result<DetectionResult, DetectorError> {
    let img = extract_dhs(seq)?;
    let min_size = *det.cfg.window_sizes.iter().min().expect("window sizes set");
    if img.len < min_size {
        return Ok(DetectionResult {
            intervals: Vec::new(),
            confidences: Vec::new(),
            rho: 0.0,
            usable: false,
            reason: Some(format!(
                "sequence of {} frames is shorter than the smallest window ({min_size})",
                img.len
            )),
        });
    }
    let windows = crate::dhs::enumerate_windows(&img, &det.cfg.window_sizes, det.cfg.stride);
    let layers = det.layers(false);
    let mut cands = Vec::new();
    for w in &windows {
        let p = det.classify_with(&layers, w, false)?;
        if p.class == FrameClass::FullGait && p.confidence >= det.cfg.tau {
            cands.push(ScoredInterval {
                start: p.start,
                end: p.start + p.length,
                confidence: p.confidence,
            });
        }
    }
    let kept = nms_1d(&cands, det.cfg.nms_iou);
    let mut spans: Vec<(usize, usize)> = kept.iter().map(|k| (k.start, k.end)).collect();
    spans.sort_unstable();
    let intervals = merge_intervals(&spans, det.cfg.merge_gap);
    // Merging only unions spans, so every kept window sits inside exactly one
    // merged interval; score each interval by its strongest member.
    let confidences: Vec<f64> = intervals
        .iter()
        .map(|&(s, e)| {
            kept.iter()
                .filter(|k| k.start >= s && k.end <= e)
                .map(|k| k.confidence)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let covered: usize = intervals.iter().map(|&(s, e)| e - s).sum();
    let rho = covered as f64 / img.len as f64;
    Ok(DetectionResult {
        intervals,
        confidences,
        rho,
        usable: rho >= det.cfg.rho_min,
        reason: None,
    })
}

/// Per-frame gait flags for a span list over a `t`-frame sequence.
pub fn frame_labels(intervals: &[(usize, usize)], t: usize) -> Vec<bool> {
    let mut out = vec![false; t];
    for &(s, e) in intervals {
        for f in s..e.min(t) {
            out[f] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub frame_agreement: f64,
    /// Agreement of at least one half.
    pub sequence_correct: bool,
}

pub fn score_detection(pred: &[bool], truth: &[bool]) -> Result<DetectionScore, DetectorError> {
    if pred.len() != truth.len() {
        return Err(DetectorError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let matches = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let frame_agreement = if pred.is_empty() {
        1.0
    } else {
        matches as f64 / pred.len() as f64
    };
    Ok(DetectionScore {
        frame_agreement,
        sequence_correct: frame_agreement >= 0.5,
    })
}

/// Mean over truth spans of the best IoU any predicted span achieves.
/// With no truth spans this is 1.0 when the prediction is also empty.
pub fn mean_interval_iou(pred: &[(usize, usize)], truth: &[(usize, usize)]) -> f64 {
    if truth.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let mut total = 0.0;
    for &t in truth {
        let best = pred
            .iter()
            .map(|&p| interval_iou(p, t))
            .fold(0.0, f64::max);
        total += best;
    }
    total / truth.len() as f64
}

// ---- training ---------------------------------------------------------------

/// One pure-class training sequence: its DHS image and frame class label.
pub struct LabeledDhs {
    pub img: DhsImage,
    pub label: usize,
}

/// Loads every pure-class sequence of a split as a labeled DHS image,
/// loop-padding those shorter than `min_len`. Mixed sequences are skipped:
/// a window crossing a class boundary has no single label.
pub fn load_pure_dhs(
    manifest: &CorpusManifest,
    root: &Path,
    split: Split,
    min_len: usize,
) -> Result<Vec<LabeledDhs>, DetectorError> {
    let mut out = Vec::new();
    for entry in manifest.entries_for_split(split) {
        let gt = CorpusManifest::ground_truth(entry);
        let first = match gt.classes.first() {
            Some(&c) => c,
            None => continue,
        };
        if !gt.classes.iter().all(|&c| c == first) {
            continue;
        }
        let seq = load_silhouette_pack(&root.join(&entry.file))?;
        let (norm, _) = normalize(&seq, (DHS_HEIGHT, DHS_HEIGHT))?;
        let img = extract_dhs(&norm)?.tiled_to(min_len);
        out.push(LabeledDhs {
            img,
            label: first.label(),
        });
    }
    Ok(out)
}

/// One training sequence: signature image plus per-frame class labels.
struct FrameLabeledDhs {
    img: DhsImage,
    classes: Vec<usize>,
}

/// Loads every sequence of a split with per-frame labels, tiling short ones
/// to `min_len`. Unlike [`load_pure_dhs`] this keeps mixed sequences — crops
/// straddling a mode boundary are what teach the net not to bridge pauses.
fn load_frame_labeled_dhs(
    manifest: &CorpusManifest,
    root: &Path,
    split: Split,
    min_len: usize,
) -> Result<Vec<FrameLabeledDhs>, DetectorError> {
    let mut out = Vec::new();
    for entry in manifest.entries_for_split(split) {
        let gt = CorpusManifest::ground_truth(entry);
        if gt.classes.is_empty() {
            continue;
        }
        let seq = load_silhouette_pack(&root.join(&entry.file))?;
        let (norm, _) = normalize(&seq, (DHS_HEIGHT, DHS_HEIGHT))?;
        if norm.len() != gt.classes.len() {
            log::warn!(
                "{}: {} normalized frames for {} labels, skipping",
                entry.file,
                norm.len(),
                gt.classes.len()
            );
            continue;
        }
        let orig = norm.len();
        let img = extract_dhs(&norm)?.tiled_to(min_len);
        let classes = (0..img.len).map(|t| gt.classes[t % orig].label()).collect();
        out.push(FrameLabeledDhs { img, classes });
    }
    Ok(out)
}

/// The class covering most of the span; ties go to the smaller label.
fn majority_label(classes: &[usize]) -> usize {
    let mut counts = [0usize; CLASS_COUNT];
    for &c in classes {
        counts[c] += 1;
    }
    let mut best = 0;
    for c in 1..CLASS_COUNT {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    /// `(step, held-out window accuracy)` at each evaluation point.
    pub evals: Vec<(usize, f64)>,
}

/// Trains a detector on the train split: per step, sample `batch` sequences
/// uniformly, crop `[crop_min, crop_max]` frames from each, label each crop
/// by its majority class, optionally mirror, and take one SGD step on the
/// mean cross-entropy. Mixed sequences contribute boundary-straddling crops.
pub fn train_detector(
    manifest: &CorpusManifest,
    root: &Path,
    cfg: DetectorConfig,
    seed: u64,
) -> Result<(Detector<f32>, TrainTrace), DetectorError> {
    let data = load_frame_labeled_dhs(manifest, root, Split::Train, cfg.crop_min)?;
    if data.is_empty() {
        return Err(DetectorError::EmptyCorpus);
    }
    for label in 0..CLASS_COUNT {
        if !data.iter().any(|d| d.classes.contains(&label)) {
            return Err(DetectorError::MissingClass(
                FrameClass::from_label(label).unwrap().name(),
            ));
        }
    }
    let eval_data = load_pure_dhs(manifest, root, Split::Test, cfg.crop_min)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut det = Detector::<f32>::new(cfg.clone(), rng.gen());
    let mut trace = TrainTrace::default();
    let mut lr = det.cfg.lr;
    for step in 0..det.cfg.steps {
        if det.cfg.milestones.contains(&step) {
            lr *= 0.1;
        }
        let layers = det.layers(true);
        let mut total: Option<Tensor<f32>> = None;
        let batch = det.cfg.batch.max(1);
        for _ in 0..batch {
            let d = &data[rng.gen_range(0..data.len())];
            let w = random_crop(&d.img, det.cfg.crop_min, det.cfg.crop_max, &mut rng)?;
            let label = majority_label(&d.classes[w.start..w.start + w.length]);
            let mirror = det.cfg.mirror_augment && rng.gen_bool(0.5);
            let logits = det.logits(&layers, &window_input::<f32>(&w, mirror))?;
            let l = logits.cross_entropy_mean(&[label])?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        let loss = total.unwrap().scale(1.0 / batch as f32);
        loss.backward();
        let mut grads = Gradients::new();
        layers.collect(&mut grads);
        det.store.sgd_step(&grads, lr as f32, det.cfg.momentum as f32);
        trace.losses.push(loss.item() as f64);
        if det.cfg.eval_every > 0 && (step + 1) % det.cfg.eval_every == 0 && !eval_data.is_empty()
        {
            let acc = eval_window_accuracy(
                &det,
                &eval_data,
                det.cfg.eval_crops_per_seq,
                seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            )?;
            trace.evals.push((step + 1, acc));
            log::info!(
                "detector step {}: loss {:.4}, held-out window accuracy {:.3}",
                step + 1,
                trace.losses.last().unwrap(),
                acc
            );
        }
    }
    Ok((det, trace))
}

/// Window accuracy over `crops_per_seq` random crops of each sequence,
/// deterministic in `seed`.
pub fn eval_window_accuracy<E: Scalar>(
    det: &Detector<E>,
    data: &[LabeledDhs],
    crops_per_seq: usize,
    seed: u64,
) -> Result<f64, DetectorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = det.layers(false);
    let mut correct = 0usize;
    let mut total = 0usize;
    for d in data {
        for _ in 0..crops_per_seq {
            let w = random_crop(&d.img, det.cfg.crop_min, det.cfg.crop_max, &mut rng)?;
            let p = det.classify_with(&layers, &w, false)?;
            correct += (p.class.label() == d.label) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{
        generate_corpus, generate_sequence, sample_identities, BodyMode,
        CorpusConfig, MotionMode, RgbPolicy, Segment, SequenceScript,
    };

    fn si(start: usize, end: usize, confidence: f64) -> ScoredInterval {
        ScoredInterval {
            start,
            end,
            confidence,
        }
    }

    #[test]
    fn interval_iou_hand_values() {
        // [0,50) vs [10,70): inter 40, union 70.
        assert!((interval_iou((0, 50), (10, 70)) - 40.0 / 70.0).abs() < 1e-12);
        assert_eq!(interval_iou((0, 10), (10, 20)), 0.0);
        assert_eq!(interval_iou((5, 5), (5, 5)), 0.0);
        assert_eq!(interval_iou((3, 9), (3, 9)), 1.0);
    }

    #[test]
    fn nms_suppresses_the_weaker_overlap() {
        // IoU 4/7 > 0.5, so the lower-confidence window goes.
        let kept = nms_1d(&[si(0, 50, 0.9), si(10, 70, 0.8)], 0.5);
        assert_eq!(kept, vec![si(0, 50, 0.9)]);
        // At threshold 0.6 the overlap is tolerated.
        let kept = nms_1d(&[si(0, 50, 0.9), si(10, 70, 0.8)], 0.6);
        assert_eq!(kept.len(), 2);
        assert!(nms_1d(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_tie_break_prefers_earlier_then_shorter() {
        // Equal confidence: the earlier window wins and suppresses the other.
        let kept = nms_1d(&[si(10, 60, 0.7), si(0, 50, 0.7)], 0.5);
        assert_eq!(kept, vec![si(0, 50, 0.7)]);
        // Same start, equal confidence: shorter first; IoU 50/80 suppresses.
        let kept = nms_1d(&[si(0, 80, 0.7), si(0, 50, 0.7)], 0.5);
        assert_eq!(kept, vec![si(0, 50, 0.7)]);
    }

    #[test]
    fn merge_hand_examples() {
        // Gap of 5 < 10 fuses; the result spans the union.
        assert_eq!(merge_intervals(&[(0, 30), (35, 60)], 10), vec![(0, 60)]);
        // Gap of 20 stays split.
        assert_eq!(
            merge_intervals(&[(0, 30), (50, 80)], 10),
            vec![(0, 30), (50, 80)]
        );
        // Exactly gap apart stays split.
        assert_eq!(
            merge_intervals(&[(0, 30), (40, 50)], 10),
            vec![(0, 30), (40, 50)]
        );
        // Overlap unions even at gap 0, and containment collapses.
        assert_eq!(merge_intervals(&[(0, 40), (30, 50)], 0), vec![(0, 50)]);
        assert_eq!(merge_intervals(&[(0, 40), (10, 20)], 0), vec![(0, 40)]);
        assert!(merge_intervals(&[], 10).is_empty());
    }

    #[test]
    fn score_detection_hand_values() {
        let pred = frame_labels(&[(0, 60)], 100);
        let truth = frame_labels(&[(0, 100)], 100);
        let s = score_detection(&pred, &truth).unwrap();
        assert!((s.frame_agreement - 0.6).abs() < 1e-12);
        assert!(s.sequence_correct);

        let s = score_detection(&frame_labels(&[], 100), &truth).unwrap();
        assert_eq!(s.frame_agreement, 0.0);
        assert!(!s.sequence_correct);

        let err = score_detection(&[true; 5], &[false; 6]).unwrap_err();
        assert!(matches!(
            err,
            DetectorError::LengthMismatch { pred: 5, truth: 6 }
        ));
    }

    #[test]
    fn mean_interval_iou_hand_values() {
        let truth = [(0, 45), (135, 180)];
        assert!((mean_interval_iou(&[(0, 45), (135, 180)], &truth) - 1.0).abs() < 1e-12);
        // Second truth span unmatched: mean of 1.0 and 0.0.
        assert!((mean_interval_iou(&[(0, 45)], &truth) - 0.5).abs() < 1e-12);
        assert_eq!(mean_interval_iou(&[], &[]), 1.0);
        assert_eq!(mean_interval_iou(&[(0, 10)], &[]), 0.0);
    }

    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            channels: vec![4, 8, 8],
            hidden: 16,
            steps: 20,
            eval_every: 10,
            eval_crops_per_seq: 2,
            lr: 0.05,
            milestones: vec![],
            ..DetectorConfig::default()
        }
    }

    fn pure_sequence(mode: MotionMode, body: BodyMode, len: usize) -> crate::silio::SilhouetteSequence {
        let idents = sample_identities(1, 11, 0);
        let script = SequenceScript::new(
            vec![Segment { mode, body, len }],
            vec![1.0; len],
        );
        let (sil, _, _) = generate_sequence(&idents[0], &script, (96, 96), 7).unwrap();
        let (norm, _) = normalize(&sil, (64, 64)).unwrap();
        norm
    }

    #[test]
    fn untrained_detector_sits_at_chance_on_balanced_windows() {
        // An untrained net's prediction is independent of the window, so on a
        // class-balanced set accuracy lands at chance.
        let det = Detector::<f32>::new(tiny_cfg(), 404);
        let layers = det.layers(false);
        let cases = [
            (MotionMode::Walk, BodyMode::Full, FrameClass::FullGait),
            (MotionMode::Stand, BodyMode::Full, FrameClass::FullStand),
            (MotionMode::Walk, BodyMode::Partial, FrameClass::PartGait),
            (MotionMode::Stand, BodyMode::Partial, FrameClass::PartStand),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut correct = 0usize;
        for (mode, body, class) in cases {
            let img = extract_dhs(&pure_sequence(mode, body, 140)).unwrap();
            for _ in 0..250 {
                let w = random_crop(&img, 30, 100, &mut rng).unwrap();
                let p = det.classify_with(&layers, &w, false).unwrap();
                correct += (p.class == class) as usize;
            }
        }
        let acc = correct as f64 / 1000.0;
        assert!(
            (0.20..=0.30).contains(&acc),
            "untrained accuracy {acc} outside chance band"
        );
    }

    #[test]
    fn classify_is_deterministic_and_length_agnostic() {
        let det = Detector::<f32>::new(tiny_cfg(), 5);
        let img = extract_dhs(&pure_sequence(MotionMode::Walk, BodyMode::Full, 120)).unwrap();
        let windows = crate::dhs::enumerate_windows(&img, &[33, 80], 10);
        assert!(windows.iter().any(|w| w.length == 33));
        assert!(windows.iter().any(|w| w.length == 80));
        let a = det.classify_windows(&windows).unwrap();
        let b = det.classify_windows(&windows).unwrap();
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let short = random_crop(&img.tiled_to(30), 20, 20, &mut rng).unwrap();
        assert!(matches!(
            det.classify_window(&short),
            Err(DetectorError::WindowTooShort { len: 20, min: 30 })
        ));
    }

    #[test]
    fn detect_rejects_sequences_shorter_than_a_window() {
        let det = Detector::<f32>::new(tiny_cfg(), 5);
        let seq = pure_sequence(MotionMode::Walk, BodyMode::Full, 20);
        let res = detect(&det, &seq).unwrap();
        assert!(!res.usable);
        assert_eq!(res.rho, 0.0);
        assert!(res.intervals.is_empty());
        assert!(res.reason.as_deref().unwrap().contains("20 frames"));
    }

    #[test]
    fn training_is_deterministic_and_flags_missing_classes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cc = CorpusConfig::new(dir.path().to_path_buf());
        cc.rgb = RgbPolicy::None;
        let manifest = generate_corpus(&cc, 2, 5, 99).unwrap();

        let (det, t1) = train_detector(&manifest, dir.path(), tiny_cfg(), 31).unwrap();
        let (_, t2) = train_detector(&manifest, dir.path(), tiny_cfg(), 31).unwrap();
        assert_eq!(t1.losses.len(), 20);
        assert!(t1.losses.iter().all(|l| l.is_finite()));
        assert_eq!(t1.losses, t2.losses);
        assert_eq!(t1.evals, t2.evals);
        assert_eq!(t1.evals.len(), 2);

        // Checkpoint round-trip preserves behavior bit-for-bit.
        let mut buf = Vec::new();
        det.store.save_checkpoint(&mut buf).unwrap();
        let reloaded = Detector::<f32>::with_store(
            tiny_cfg(),
            ParameterStore::from_checkpoint(&buf).unwrap(),
        )
        .unwrap();
        let img = extract_dhs(&pure_sequence(MotionMode::Walk, BodyMode::Full, 60)).unwrap();
        let w = crate::dhs::enumerate_windows(&img, &[50], 10);
        assert_eq!(
            det.classify_windows(&w).unwrap(),
            reloaded.classify_windows(&w).unwrap()
        );
        let bad = Detector::<f32>::with_store(DetectorConfig::default(), {
            ParameterStore::from_checkpoint(&buf).unwrap()
        });
        assert!(matches!(bad, Err(DetectorError::BadCheckpoint(_))));

        // A walk-only corpus is rejected by class coverage.
        let dir2 = tempfile::tempdir().unwrap();
        let mut cc2 = CorpusConfig::new(dir2.path().to_path_buf());
        cc2.rgb = RgbPolicy::None;
        let manifest2 = generate_corpus(&cc2, 2, 1, 99).unwrap();
        let err = train_detector(&manifest2, dir2.path(), tiny_cfg(), 31).unwrap_err();
        assert!(matches!(err, DetectorError::MissingClass("full-stand")));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // Composed architecture check on a real-valued input; the per-op
        // suite covers each kernel, this guards their composition.
        let cfg = DetectorConfig {
            channels: vec![2, 3],
            hidden: 4,
            ..DetectorConfig::default()
        };
        let mut det = Detector::<f64>::new(cfg, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..64 * 40)
            .map(|_| rng.gen_range(-1.0..1.0) * 0.7)
            .collect();
        let input = Tensor::leaf(Array::from_vec(&[1, 1, 64, 40], data));

        let loss_of = |det: &Detector<f64>| -> f64 {
            let layers = det.layers(false);
            det.logits(&layers, &input)
                .unwrap()
                .cross_entropy_mean(&[2])
                .unwrap()
                .item()
        };

        let layers = det.layers(true);
        let loss = det
            .logits(&layers, &input)
            .unwrap()
            .cross_entropy_mean(&[2])
            .unwrap();
        loss.backward();
        let mut grads = Gradients::new();
        layers.collect(&mut grads);

        let names: Vec<String> = det.store.names().map(String::from).collect();
        let eps = 1e-5;
        for k in 0..12 {
            let name = &names[(k * 5 + 1) % names.len()];
            let n = det.store.get(name).unwrap().numel();
            let idx = (k * 13) % n;
            let analytic = grads.get(name).unwrap()[idx];
            det.store.nudge(name, idx, eps);
            let up = loss_of(&det);
            det.store.nudge(name, idx, -2.0 * eps);
            let down = loss_of(&det);
            det.store.nudge(name, idx, eps);
            let numeric = (up - down) / (2.0 * eps);
            let rel = crate::tensor::gradcheck::rel_err(analytic, numeric);
            assert!(
                rel < 1e-4,
                "{name}[{idx}]: analytic {analytic}, numeric {numeric}, rel {rel}"
            );
        }
    }
}
