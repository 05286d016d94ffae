//! Glue shared by the subcommands: knob-to-config mapping, corpus access,
//! and the detect-then-embed path used by `embed` and `e2e`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gaitkit_core::detector::{detect, Detector, DetectorConfig};
use gaitkit_core::evalkit::EmbeddingRow;
use gaitkit_core::gar::{DistillMetric, Gar, GarConfig, Gate};
use gaitkit_core::silio::{
    load_silhouette_pack, normalize, RatioTrack, SilhouetteSequence,
};
use gaitkit_core::synth::{CorpusManifest, ManifestEntry, RgbPolicy, Split};
use gaitkit_core::tensor::ParameterStore;

use crate::settings::Settings;

/// Detector knobs, all under the `detector.` prefix. Missing keys keep the
/// library defaults.
pub fn detector_config(s: &mut Settings) -> Result<DetectorConfig> {
    let d = DetectorConfig::default();
    Ok(DetectorConfig {
        channels: s.get_list("detector.channels", &d.channels)?,
        hidden: s.get("detector.hidden", d.hidden)?,
        window_sizes: s.get_list("detector.windows", &d.window_sizes)?,
        stride: s.get("detector.stride", d.stride)?,
        tau: s.get("detector.tau", d.tau)?,
        nms_iou: s.get("detector.nms_iou", d.nms_iou)?,
        merge_gap: s.get("detector.merge_gap", d.merge_gap)?,
        rho_min: s.get("detector.rho_min", d.rho_min)?,
        crop_min: s.get("detector.crop_min", d.crop_min)?,
        crop_max: s.get("detector.crop_max", d.crop_max)?,
        mirror_augment: s.get("detector.mirror", d.mirror_augment)?,
        batch: s.get("detector.batch", d.batch)?,
        lr: s.get("detector.lr", d.lr)?,
        momentum: s.get("detector.momentum", d.momentum)?,
        steps: s.get("detector.steps", d.steps)?,
        milestones: s.get_list("detector.milestones", &d.milestones)?,
        eval_every: s.get("detector.eval_every", d.eval_every)?,
        eval_crops_per_seq: s.get("detector.eval_crops", d.eval_crops_per_seq)?,
    })
}

/// Recognizer knobs under the `gar.` prefix. `gar.channels` sets the block
/// count as a side effect.
pub fn gar_config(s: &mut Settings) -> Result<GarConfig> {
    let d = GarConfig::default();
    let channels = s.get_list("gar.channels", &d.channels)?;
    let gate = match s.get("gar.gate", "ratio".to_string())?.as_str() {
        "ratio" => Gate::Ratio,
        "ones" => Gate::Ones,
        "zeros" => Gate::Zeros,
        "skip" => Gate::Skip,
        other => bail!("config key `gar.gate`: unknown gate `{other}` (ratio|ones|zeros|skip)"),
    };
    let metric = match s.get("gar.metric", "mse".to_string())?.as_str() {
        "mse" => DistillMetric::Mse,
        "cosine" => DistillMetric::Cosine,
        other => bail!("config key `gar.metric`: unknown metric `{other}` (mse|cosine)"),
    };
    Ok(GarConfig {
        n_blocks: channels.len(),
        channels,
        embedding_dim: s.get("gar.dim", d.embedding_dim)?,
        input_size: s.get("gar.input_size", d.input_size)?,
        gate,
        margin: s.get("gar.margin", d.margin)?,
        lambda_f: s.get("gar.lambda_f", d.lambda_f)?,
        lambda_s: s.get("gar.lambda_s", d.lambda_s)?,
        lambda_distill: s.get("gar.lambda_distill", d.lambda_distill)?,
        ratio_kernel: s.get("gar.ratio_kernel", d.ratio_kernel)?,
        metric,
        p_identities: s.get("gar.p", d.p_identities)?,
        k_clips: s.get("gar.k", d.k_clips)?,
        clip_len: s.get("gar.clip_len", d.clip_len)?,
        embed_stride: s.get("gar.embed_stride", d.embed_stride)?,
        lr: s.get("gar.lr", d.lr)?,
        momentum: s.get("gar.momentum", d.momentum)?,
        steps: s.get("gar.steps", d.steps)?,
        milestones: s.get_list("gar.milestones", &d.milestones)?,
    })
}

pub fn parse_rgb_policy(name: &str) -> Result<RgbPolicy> {
    Ok(match name {
        "none" => RgbPolicy::None,
        "train-walk-full" => RgbPolicy::TrainWalkFull,
        "all" => RgbPolicy::All,
        other => bail!("config key `synth.rgb`: unknown policy `{other}` (none|train-walk-full|all)"),
    })
}

/// `train` / `test` / `all` — `None` means no split filter.
pub fn parse_split(name: &str) -> Result<Option<Split>> {
    Ok(match name {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        "all" => None,
        other => bail!("unknown split `{other}` (train|test|all)"),
    })
}

pub fn entries<'a>(m: &'a CorpusManifest, split: Option<Split>) -> Vec<&'a ManifestEntry> {
    match split {
        Some(sp) => m.entries_for_split(sp).collect(),
        None => m.entries.iter().collect(),
    }
}

pub fn load_manifest(corpus: &Path) -> Result<CorpusManifest> {
    CorpusManifest::load(corpus).with_context(|| format!("loading corpus {}", corpus.display()))
}

pub fn load_store(path: &Path) -> Result<ParameterStore<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(ParameterStore::from_checkpoint(&bytes)
        .with_context(|| format!("decoding checkpoint {}", path.display()))?)
}

/// `packs/id003_s1.sil` → `id003_s1`: the sequence id used in embedding CSVs.
pub fn seq_stem(entry: &ManifestEntry) -> String {
    Path::new(&entry.file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.file.clone())
}

pub fn identity_tag(id: u32) -> String {
    format!("id{id:03}")
}

/// Concatenates the given half-open spans of a normalized sequence and its
/// ratio track, in order. Spans are clamped to the sequence length.
pub fn slice_spans(
    sil: &SilhouetteSequence,
    track: &RatioTrack,
    spans: &[(usize, usize)],
) -> (SilhouetteSequence, RatioTrack) {
    let mut frames = Vec::new();
    let mut rho = Vec::new();
    for &(s, e) in spans {
        for t in s..e.min(sil.len()) {
            frames.push(sil.frame(t).to_vec());
            rho.push(track.rho[t]);
        }
    }
    (
        SilhouetteSequence::new(sil.height, sil.width, frames),
        RatioTrack { rho },
    )
}

/// One row of `detections.json`.
#[derive(Debug, Serialize)]
pub struct DetectionRow {
    pub file: String,
    pub intervals: Vec<IntervalRow>,
    pub rho: f64,
    pub usable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct IntervalRow {
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

/// Embeds every sequence of a split, optionally gating through a detector:
/// unusable sequences are skipped, usable ones are embedded over their
/// detected spans only. Returns the rows plus one detection record per
/// sequence when a detector ran.
pub fn embed_split(
    gar: &Gar<f32>,
    det: Option<&Detector<f32>>,
    manifest: &CorpusManifest,
    root: &Path,
    split: Option<Split>,
) -> Result<(Vec<EmbeddingRow>, Vec<DetectionRow>)> {
    let size = gar.cfg.input_size;
    let mut rows = Vec::new();
    let mut detections = Vec::new();
    for entry in entries(manifest, split) {
        let raw = load_silhouette_pack(&root.join(&entry.file))
            .with_context(|| format!("loading {}", entry.file))?;
        let (norm, track) = normalize(&raw, (size, size))?;
        let (sil, track) = match det {
            Some(d) => {
                // The signature extractor wants 64×64 chips; renormalize when
                // the recognizer runs at another size. Frame indices agree:
                // empty-frame drops depend only on the raw sequence.
                let r = if size == 64 {
                    detect(d, &norm)?
                } else {
                    let (chip, _) = normalize(&raw, (64, 64))?;
                    detect(d, &chip)?
                };
                detections.push(DetectionRow {
                    file: entry.file.clone(),
                    intervals: r
                        .intervals
                        .iter()
                        .zip(&r.confidences)
                        .map(|(&(start, end), &confidence)| IntervalRow {
                            start,
                            end,
                            confidence,
                        })
                        .collect(),
                    rho: r.rho,
                    usable: r.usable,
                    reason: r.reason.clone(),
                });
                if !r.usable {
                    log::info!(
                        "{}: unusable (rho = {:.3}), skipping",
                        entry.file,
                        r.rho
                    );
                    continue;
                }
                slice_spans(&norm, &track, &r.intervals)
            }
            None => (norm, track),
        };
        let emb = gar.embed(&sil, &track)?;
        if emb.loop_padded {
            log::warn!("{}: shorter than one clip, loop-padded", entry.file);
        }
        rows.push(EmbeddingRow {
            seq_id: seq_stem(entry),
            identity: identity_tag(entry.identity),
            condition: entry.condition.clone(),
            vector: emb.vector,
        });
    }
    Ok((rows, detections))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
