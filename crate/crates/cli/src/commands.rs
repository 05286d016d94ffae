//! One function per subcommand. Each resolves its knobs through
//! [`Settings`], runs the library calls, writes its outputs, and finishes
//! with the `config.txt` / `run.json` pair via [`rundir::finalize`].

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gaitkit_core::detector::{detect, frame_labels, mean_interval_iou, score_detection, Detector};
use gaitkit_core::dhs::{extract_dhs, DhsImage};
use gaitkit_core::evalkit::{
    evaluate, EmbeddingSet, Metrics, RocCurve, ScoreMatrix, write_metrics_json, write_roc_csv,
};
use gaitkit_core::gar::{train_gar, Gar, GarTrainTrace};
use gaitkit_core::silio::{load_silhouette_pack, normalize};
use gaitkit_core::synth::{generate_corpus, CorpusConfig, CorpusManifest, Split, SCRIPT_MENU_LEN};

use crate::pipeline::{
    self, detector_config, embed_split, entries, gar_config, identity_tag, load_manifest,
    load_store, parse_rgb_policy, parse_split, seq_stem, write_json_pretty,
};
use crate::rundir;
use crate::settings::Settings;
use crate::Global;

pub fn synth_gen(g: &Global, out: &Path) -> Result<()> {
    let mut s = Settings::load(g.config.as_deref())?;
    let identities = s.get("synth.identities", 10usize)?;
    let scripts = s.get("synth.scripts", 2usize)?;
    let frame = s.get("synth.frame", 96usize)?;
    let train_fraction = s.get("synth.train_fraction", 2.0 / 3.0)?;
    let rgb = parse_rgb_policy(&s.get("synth.rgb", "train-walk-full".to_string())?)?;
    if identities < 2 {
        bail!("synth.identities must be at least 2, got {identities}");
    }
    if !(1..=SCRIPT_MENU_LEN).contains(&scripts) {
        bail!("synth.scripts must be 1..={SCRIPT_MENU_LEN}, got {scripts}");
    }

    let cfg = CorpusConfig {
        out_dir: out.to_path_buf(),
        frame_size: (frame, frame),
        rgb,
        train_fraction,
        threads: g.threads,
    };
    let manifest = generate_corpus(&cfg, identities, scripts, g.seed)?;
    log::info!(
        "corpus: {} sequences, {} train / {} test identities",
        manifest.entries.len(),
        manifest.train_identities.len(),
        manifest.test_identities.len()
    );
    rundir::finalize(out, &s, &["synth"], g.seed, g.threads, &config_inputs(g, &[]))
}

#[derive(Debug, Serialize)]
struct DhsIndexRow {
    file: String,
    pgm: String,
    identity: String,
    condition: String,
    frames: usize,
}

pub fn dhs_export(g: &Global, corpus: &Path, out: &Path) -> Result<()> {
    let mut s = Settings::load(g.config.as_deref())?;
    let split = parse_split(&s.get("dhs.split", "all".to_string())?)?;
    let manifest = load_manifest(corpus)?;
    fs::create_dir_all(out.join("dhs"))?;

    let mut index = Vec::new();
    for entry in entries(&manifest, split) {
        let raw = load_silhouette_pack(&corpus.join(&entry.file))?;
        let (norm, _) = normalize(&raw, (64, 64))?;
        let img = extract_dhs(&norm)?;
        let pgm = format!("dhs/{}.pgm", seq_stem(entry));
        write_dhs_pgm(&img, &out.join(&pgm))?;
        index.push(DhsIndexRow {
            file: entry.file.clone(),
            pgm,
            identity: identity_tag(entry.identity),
            condition: entry.condition.clone(),
            frames: img.len,
        });
    }
    log::info!("exported {} signature images", index.len());
    write_json_pretty(&out.join("index.json"), &index)?;
    rundir::finalize(
        out,
        &s,
        &["dhs"],
        g.seed,
        g.threads,
        &config_inputs(g, &[&corpus.join("manifest.json")]),
    )
}

/// One grey row per slice position, one column per frame, foreground white.
fn write_dhs_pgm(img: &DhsImage, path: &Path) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.len, img.width).into_bytes();
    for x in 0..img.width {
        for t in 0..img.len {
            buf.push(if img.at(x, t) != 0 { 255 } else { 0 });
        }
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn train_detector(g: &Global, corpus: &Path, out: &Path) -> Result<()> {
    let mut s = Settings::load(g.config.as_deref())?;
    let cfg = detector_config(&mut s)?;
    let manifest = load_manifest(corpus)?;
    fs::create_dir_all(out)?;

    let (det, trace) = gaitkit_core::detector::train_detector(&manifest, corpus, cfg, g.seed)?;
    det.store.save_checkpoint_file(&out.join("detector.ckpt"))?;
    write_loss_csv(&out.join("loss.csv"), &trace.losses)?;
    let mut eval = String::from("step,accuracy\n");
    for (step, acc) in &trace.evals {
        eval.push_str(&format!("{step},{acc:?}\n"));
    }
    fs::write(out.join("eval.csv"), eval)?;
    if let Some((step, acc)) = trace.evals.last() {
        log::info!("held-out window accuracy {acc:.4} at step {step}");
    }
    rundir::finalize(
        out,
        &s,
        &["detector"],
        g.seed,
        g.threads,
        &config_inputs(g, &[&corpus.join("manifest.json")]),
    )
}

pub fn detect_cmd(g: &Global, corpus: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let mut s = Settings::load(g.config.as_deref())?;
    let cfg = detector_config(&mut s)?;
    let split = parse_split(&s.get("detect.split", "test".to_string())?)?;
    let det = Detector::with_store(cfg, load_store(ckpt)?)?;
    let manifest = load_manifest(corpus)?;
    fs::create_dir_all(out)?;

    let mut rows = Vec::new();
    let mut correct = 0usize;
    let mut iou_sum = 0.0;
    let mut scored = 0usize;
    for entry in entries(&manifest, split) {
        let raw = load_silhouette_pack(&corpus.join(&entry.file))?;
        let (norm, _) = normalize(&raw, (64, 64))?;
        let r = detect(&det, &norm)?;

        let truth = CorpusManifest::ground_truth(entry);
        let pred = frame_labels(&r.intervals, norm.len());
        let want = frame_labels(&truth.walk_intervals, norm.len());
        let score = score_detection(&pred, &want)?;
        correct += score.sequence_correct as usize;
        iou_sum += mean_interval_iou(&r.intervals, &truth.walk_intervals);
        scored += 1;

        rows.push(pipeline::DetectionRow {
            file: entry.file.clone(),
            intervals: r
                .intervals
                .iter()
                .zip(&r.confidences)
                .map(|(&(start, end), &confidence)| pipeline::IntervalRow {
                    start,
                    end,
                    confidence,
                })
                .collect(),
            rho: r.rho,
            usable: r.usable,
            reason: r.reason,
        });
    }
    if scored > 0 {
        log::info!(
            "{scored} sequences: {:.1}% sequence-correct, mean interval IoU {:.3}",
            100.0 * correct as f64 / scored as f64,
            iou_sum / scored as f64
        );
    }
    write_json_pretty(&out.join("detections.json"), &rows)?;
    rundir::finalize(
        out,
        &s,
        &["detector", "detect"],
        g.seed,
        g.threads,
        &config_inputs(g, &[&corpus.join("manifest.json"), ckpt]),
    )
}

pub fn train_gar_cmd(g: &Global, corpus: &Path, out: &Path) -> Result<()> {
    let mut s = Settings::load(g.config.as_deref())?;
    let cfg = gar_config(&mut s)?;
    let manifest = load_manifest(corpus)?;
    fs::create_dir_all(out)?;

    let (gar, trace) = train_gar(&manifest, corpus, cfg, g.seed)?;
    save_gar(&gar, &trace, out)?;
    rundir::finalize(
        out,
        &s,
        &["gar"],
        g.seed,
        g.threads,
        &config_inputs(g, &[&corpus.join("manifest.json")]),
    )
}

fn save_gar(gar: &Gar<f32>, trace: &GarTrainTrace, out: &Path) -> Result<()> {
    gar.store.save_checkpoint_file(&out.join("gar_full.ckpt"))?;
    gar.inference_store()
        .save_checkpoint_file(&out.join("gar_inference.ckpt"))?;
    let mut csv = String::from("step,total,triplet_sil,triplet_rgb,distill\n");
    for i in 0..trace.total.len() {
        csv.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            i + 1,
            trace.total[i],
            trace.triplet_sil[i],
            trace.triplet_rgb[i],
            trace.distill[i]
        ));
    }
    fs::write(out.join("loss.csv"), csv)?;
    if let Some(last) = trace.total.last() {
        log::info!("final training loss {last:.4} after {} steps", trace.total.len());
    }
    Ok(())
}

pub fn embed_cmd(g: &Global, corpus: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let mut s = Settings::load(g.config.as_deref())?;
    let cfg = gar_config(&mut s)?;
    let split = parse_split(&s.get("embed.split", "test".to_string())?)?;
    let gar = Gar::for_inference(cfg, load_store(ckpt)?)?;
    let manifest = load_manifest(corpus)?;
    fs::create_dir_all(out)?;

    let (rows, _) = embed_split(&gar, None, &manifest, corpus, split)?;
    log::info!("embedded {} sequences", rows.len());
    let set = EmbeddingSet::new(rows)?;
    write_embeddings_csv(&set, &out.join("embeddings.csv"))?;
    rundir::finalize(
        out,
        &s,
        &["gar", "embed"],
        g.seed,
        g.threads,
        &config_inputs(g, &[&corpus.join("manifest.json"), ckpt]),
    )
}

pub fn eval_cmd(g: &Global, gallery: &Path, probes: &Path, out: &Path) -> Result<()> {
    let s = Settings::load(g.config.as_deref())?;
    let gset = EmbeddingSet::read_csv(fs::File::open(gallery)?)
        .with_context(|| format!("reading {}", gallery.display()))?;
    let pset = EmbeddingSet::read_csv(fs::File::open(probes)?)
        .with_context(|| format!("reading {}", probes.display()))?;
    fs::create_dir_all(out)?;

    let scores = ScoreMatrix::euclidean(&pset, &gset)?;
    let (metrics, roc) = evaluate(&scores)?;
    write_metrics(&metrics, &roc, out)?;
    rundir::finalize(out, &s, &["eval"], g.seed, g.threads, &config_inputs(g, &[gallery, probes]))
}

fn write_metrics(metrics: &Metrics, roc: &RocCurve, out: &Path) -> Result<()> {
    write_metrics_json(fs::File::create(out.join("metrics.json"))?, metrics)?;
    write_roc_csv(fs::File::create(out.join("roc.csv"))?, roc)?;
    log::info!(
        "rank-1 {:.4}  rank-5 {:.4}  mAP {:.4}  mINP {:.4}",
        metrics.rank1,
        metrics.rank5,
        metrics.map,
        metrics.minp
    );
    Ok(())
}

fn write_embeddings_csv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    set.write_csv(f)?;
    Ok(())
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:?}\n", i + 1));
    }
    fs::write(path, csv)?;
    Ok(())
}

pub struct E2eArgs<'a> {
    pub corpus: &'a Path,
    pub out: &'a Path,
    pub no_detector: bool,
    pub detector_ckpt: Option<&'a PathBuf>,
    pub gar_ckpt: Option<&'a PathBuf>,
}

/// The whole pipeline in one run: train or load both models, detect over the
/// test split, embed the usable spans, and score gallery against probes.
pub fn e2e(g: &Global, args: E2eArgs<'_>) -> Result<()> {
    let mut s = Settings::load(g.config.as_deref())?;
    // Resolve both model configs unconditionally so one config file serves
    // every variant of the run (echoes stay comparable across ablations).
    let det_cfg = detector_config(&mut s)?;
    let gar_cfg = gar_config(&mut s)?;
    let gallery_prefix = s.get("e2e.gallery_prefix", "set1".to_string())?;
    let probe_prefix = s.get("e2e.probe_prefix", "set2".to_string())?;
    let manifest = load_manifest(args.corpus)?;
    fs::create_dir_all(args.out)?;

    let mut inputs: Vec<PathBuf> = vec![args.corpus.join("manifest.json")];

    let det = if args.no_detector {
        None
    } else if let Some(ckpt) = args.detector_ckpt {
        inputs.push(ckpt.clone());
        Some(Detector::with_store(det_cfg, load_store(ckpt)?)?)
    } else {
        log::info!("training detector ({} steps)", det_cfg.steps);
        let dir = args.out.join("detector");
        fs::create_dir_all(&dir)?;
        let (det, trace) =
            gaitkit_core::detector::train_detector(&manifest, args.corpus, det_cfg, g.seed)?;
        det.store.save_checkpoint_file(&dir.join("detector.ckpt"))?;
        write_loss_csv(&dir.join("loss.csv"), &trace.losses)?;
        Some(det)
    };

    let gar = if let Some(ckpt) = args.gar_ckpt {
        inputs.push(ckpt.clone());
        Gar::for_inference(gar_cfg, load_store(ckpt)?)?
    } else {
        log::info!("training recognizer ({} steps)", gar_cfg.steps);
        let dir = args.out.join("gar");
        fs::create_dir_all(&dir)?;
        let (gar, trace) = train_gar(&manifest, args.corpus, gar_cfg, g.seed)?;
        save_gar(&gar, &trace, &dir)?;
        gar
    };

    let (rows, detections) =
        embed_split(&gar, det.as_ref(), &manifest, args.corpus, Some(Split::Test))?;
    if det.is_some() {
        write_json_pretty(&args.out.join("detections.json"), &detections)?;
        let usable = detections.iter().filter(|d| d.usable).count();
        log::info!("{usable} of {} test sequences usable", detections.len());
    }
    let set = EmbeddingSet::new(rows)?;
    write_embeddings_csv(&set, &args.out.join("embeddings.csv"))?;

    let gset = set.filter(|r| r.condition.starts_with(&gallery_prefix))?;
    let pset = set.filter(|r| r.condition.starts_with(&probe_prefix))?;
    log::info!("{} gallery / {} probe embeddings", gset.rows().len(), pset.rows().len());
    let scores = ScoreMatrix::euclidean(&pset, &gset)?;
    let (metrics, roc) = evaluate(&scores)?;
    write_metrics(&metrics, &roc, args.out)?;

    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    rundir::finalize(
        args.out,
        &s,
        &["detector", "gar", "e2e"],
        g.seed,
        g.threads,
        &config_inputs(g, &input_refs),
    )
}

/// The command's own input files plus, when given, the config file itself.
fn config_inputs<'a>(g: &'a Global, rest: &[&'a Path]) -> Vec<&'a Path> {
    let mut v: Vec<&Path> = Vec::new();
    if let Some(c) = &g.config {
        v.push(c.as_path());
    }
    v.extend_from_slice(rest);
    v
}
