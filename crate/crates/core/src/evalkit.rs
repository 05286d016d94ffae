//! Biometric evaluation over labeled embedding sets: rank retrieval, mAP,
//! mINP, and verification ROC.
//!
//! Every metric is a pure function of a probe-by-gallery distance matrix and
//! is deterministic given the tie-break rule: equal distances rank by gallery
//! index. When probe and gallery sets overlap (scoring a set against itself
//! in ad hoc runs), pairs sharing a sequence id are excluded so zero-distance
//! self matches cannot inflate the numbers.

use std::io::{self, BufRead, BufReader, Read, Write};

use log::warn;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv line {line}: {msg}")]
    BadCsv { line: usize, msg: String },
    #[error("{what} must be non-empty and free of commas and newlines, got {value:?}")]
    BadField { what: &'static str, value: String },
    #[error("row {row}: embedding has {got} values, expected {want}")]
    DimMismatch { row: usize, got: usize, want: usize },
    #[error("probe embeddings have dim {0}, gallery {1}")]
    MixedDims(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("score matrix is {got} entries for {probes} probes x {gallery} gallery")]
    BadShape {
        got: usize,
        probes: usize,
        gallery: usize,
    },
    #[error("no probe has a gallery positive")]
    NoScorableProbes,
}

/// One labeled embedding: a sequence id (unique per row), the identity it
/// belongs to, a free-form condition tag, and the vector itself.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub seq_id: String,
    pub identity: String,
    pub condition: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    rows: Vec<EmbeddingRow>,
    dim: usize,
}

fn check_field(what: &'static str, value: &str) -> Result<(), EvalError> {
    if value.is_empty() || value.contains([',', '\n', '\r']) {
        return Err(EvalError::BadField {
            what,
            value: value.to_string(),
        });
    }
    Ok(())
}

impl EmbeddingSet {
    pub fn new(rows: Vec<EmbeddingRow>) -> Result<Self, EvalError> {
        let dim = match rows.first() {
            Some(r) => r.vector.len(),
            None => return Err(EvalError::Empty("embedding set")),
        };
        if dim == 0 {
            return Err(EvalError::Empty("embedding vector"));
        }
        for (row, r) in rows.iter().enumerate() {
            check_field("seq_id", &r.seq_id)?;
            check_field("identity", &r.identity)?;
            check_field("condition", &r.condition)?;
            if r.vector.len() != dim {
                return Err(EvalError::DimMismatch {
                    row,
                    got: r.vector.len(),
                    want: dim,
                });
            }
            if !r.vector.iter().all(|v| v.is_finite()) {
                return Err(EvalError::NonFinite("embedding"));
            }
        }
        Ok(Self { rows, dim })
    }

    pub fn rows(&self) -> &[EmbeddingRow] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Subset keeping rows that satisfy `keep`; errors if nothing is left.
    pub fn filter(&self, keep: impl Fn(&EmbeddingRow) -> bool) -> Result<Self, EvalError> {
        Self::new(self.rows.iter().filter(|r| keep(r)).cloned().collect())
    }

    /// Header `seq_id,identity,condition,e0..e{d-1}`, one row per embedding.
    /// Values print in shortest round-trip form, so write-then-read is exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EvalError> {
        write!(w, "seq_id,identity,condition")?;
        for k in 0..self.dim {
            write!(w, ",e{k}")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(w, "{},{},{}", r.seq_id, r.identity, r.condition)?;
            for v in &r.vector {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, EvalError> {
        let mut lines = BufReader::new(r).lines();
        let bad = |line: usize, msg: String| EvalError::BadCsv { line, msg };
        let header = lines
            .next()
            .ok_or_else(|| bad(1, "missing header".into()))??;
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.len() < 4 || cols[..3] != ["seq_id", "identity", "condition"] {
            return Err(bad(1, format!("unexpected header {header:?}")));
        }
        for (k, c) in cols[3..].iter().enumerate() {
            if *c != format!("e{k}") {
                return Err(bad(1, format!("embedding column {k} named {c:?}")));
            }
        }
        let dim = cols.len() - 3;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim_end().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != dim + 3 {
                return Err(bad(lineno, format!("{} fields, expected {}", fields.len(), dim + 3)));
            }
            let vector = fields[3..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| bad(lineno, e.to_string()))?;
            rows.push(EmbeddingRow {
                seq_id: fields[0].to_string(),
                identity: fields[1].to_string(),
                condition: fields[2].to_string(),
                vector,
            });
        }
        Self::new(rows)
    }
}

/// Probe-by-gallery distance matrix with the metadata the metrics need.
/// Entries are finite; pairs sharing a sequence id are masked out.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    probe_ids: Vec<String>,
    probe_labels: Vec<String>,
    gallery_ids: Vec<String>,
    gallery_labels: Vec<String>,
    /// Row-major probes x gallery.
    dist: Vec<f64>,
    excluded: Vec<bool>,
}

impl ScoreMatrix {
    pub fn from_parts(
        probe_ids: Vec<String>,
        probe_labels: Vec<String>,
        gallery_ids: Vec<String>,
        gallery_labels: Vec<String>,
        dist: Vec<f64>,
    ) -> Result<Self, EvalError> {
        if probe_ids.is_empty() || probe_ids.len() != probe_labels.len() {
            return Err(EvalError::Empty("probe set"));
        }
        if gallery_ids.is_empty() || gallery_ids.len() != gallery_labels.len() {
            return Err(EvalError::Empty("gallery set"));
        }
        if dist.len() != probe_ids.len() * gallery_ids.len() {
            return Err(EvalError::BadShape {
                got: dist.len(),
                probes: probe_ids.len(),
                gallery: gallery_ids.len(),
            });
        }
        if !dist.iter().all(|d| d.is_finite()) {
            return Err(EvalError::NonFinite("distance"));
        }
        let excluded = probe_ids
            .iter()
            .flat_map(|p| gallery_ids.iter().map(move |g| p == g))
            .collect();
        Ok(Self {
            probe_ids,
            probe_labels,
            gallery_ids,
            gallery_labels,
            dist,
            excluded,
        })
    }

    /// Euclidean distances between every probe and gallery embedding.
    pub fn euclidean(probes: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Self, EvalError> {
        if probes.dim() != gallery.dim() {
            return Err(EvalError::MixedDims(probes.dim(), gallery.dim()));
        }
        let mut dist = Vec::with_capacity(probes.rows().len() * gallery.rows().len());
        for p in probes.rows() {
            for g in gallery.rows() {
                let s: f64 = p
                    .vector
                    .iter()
                    .zip(&g.vector)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dist.push(s.sqrt());
            }
        }
        let meta = |rows: &[EmbeddingRow]| -> (Vec<String>, Vec<String>) {
            rows.iter()
                .map(|r| (r.seq_id.clone(), r.identity.clone()))
                .unzip()
        };
        let (pi, pl) = meta(probes.rows());
        let (gi, gl) = meta(gallery.rows());
        Self::from_parts(pi, pl, gi, gl, dist)
    }

    pub fn n_probes(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    /// 1-indexed ranks of this probe's positives, ascending. Gallery entries
    /// sort by (distance, gallery index); excluded pairs never rank.
    fn positive_ranks(&self, p: usize) -> Vec<usize> {
        let g = self.gallery_ids.len();
        let row = &self.dist[p * g..(p + 1) * g];
        let mut order: Vec<usize> = (0..g).filter(|&j| !self.excluded[p * g + j]).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        order
            .iter()
            .enumerate()
            .filter(|&(_, &j)| self.gallery_labels[j] == self.probe_labels[p])
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Positive ranks for every probe that has at least one gallery positive;
/// the rest are dropped with a warning (open-set distractors keep acting as
/// negatives for everyone else).
fn scored_queries(scores: &ScoreMatrix) -> Result<Vec<Vec<usize>>, EvalError> {
    let mut out = Vec::new();
    for p in 0..scores.n_probes() {
        let ranks = scores.positive_ranks(p);
        if ranks.is_empty() {
            warn!(
                "probe {} ({}) has no gallery positive; excluded from retrieval metrics",
                scores.probe_ids[p], scores.probe_labels[p]
            );
            continue;
        }
        out.push(ranks);
    }
    if out.is_empty() {
        return Err(EvalError::NoScorableProbes);
    }
    Ok(out)
}

fn rank_accuracy(queries: &[Vec<usize>], k: usize) -> f64 {
    let hit = queries.iter().filter(|q| q[0] <= k).count();
    hit as f64 / queries.len() as f64
}

fn average_precision(ranks: &[usize]) -> f64 {
    let s: f64 = ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| (i + 1) as f64 / r as f64)
        .sum();
    s / ranks.len() as f64
}

fn inverse_negative_penalty(ranks: &[usize]) -> f64 {
    ranks.len() as f64 / *ranks.last().expect("nonempty ranks") as f64
}

/// Fraction of probes whose k nearest gallery entries contain a positive,
/// one value per requested k.
pub fn rank_retrieval(scores: &ScoreMatrix, ks: &[usize]) -> Result<Vec<f64>, EvalError> {
    let queries = scored_queries(scores)?;
    Ok(ks.iter().map(|&k| rank_accuracy(&queries, k)).collect())
}

/// Mean over queries of AP = mean_j (j / r_j) over the positive ranks r_j.
pub fn mean_average_precision(scores: &ScoreMatrix) -> Result<f64, EvalError> {
    let queries = scored_queries(scores)?;
    Ok(queries.iter().map(|q| average_precision(q)).sum::<f64>() / queries.len() as f64)
}

/// Mean over queries of |positives| / rank-of-the-hardest-positive.
pub fn mean_inp(scores: &ScoreMatrix) -> Result<f64, EvalError> {
    let queries = scored_queries(scores)?;
    Ok(queries.iter().map(|q| inverse_negative_penalty(q)).sum::<f64>()
        / queries.len() as f64)
}

/// All cross pairs, split by label match. Self pairs are excluded.
pub fn verification_scores(scores: &ScoreMatrix) -> (Vec<f64>, Vec<f64>) {
    let g = scores.n_gallery();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for p in 0..scores.n_probes() {
        for j in 0..g {
            if scores.excluded[p * g + j] {
                continue;
            }
            let d = scores.dist[p * g + j];
            if scores.probe_labels[p] == scores.gallery_labels[j] {
                genuine.push(d);
            } else {
                impostor.push(d);
            }
        }
    }
    (genuine, impostor)
}

/// Ordered (FAR, TAR) pairs from a full threshold sweep; both coordinates
/// nondecreasing, starting at (0, 0) (accept nothing) and ending at (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// TAR at the largest swept threshold whose empirical FAR does not
    /// exceed `far` — a step function that never overstates.
    pub fn tar_at(&self, far: f64) -> f64 {
        self.points
            .iter()
            .rev()
            .find(|(f, _)| *f <= far)
            .map(|&(_, t)| t)
            .unwrap_or(0.0)
    }
}

fn count_le(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&x| x <= t)
}

/// Sweep acceptance thresholds over the union of observed scores (a pair is
/// accepted when its distance is <= the threshold).
pub fn roc_curve(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve, EvalError> {
    if genuine.is_empty() {
        return Err(EvalError::Empty("genuine pair set"));
    }
    if impostor.is_empty() {
        return Err(EvalError::Empty("impostor pair set"));
    }
    if !genuine.iter().chain(impostor).all(|s| s.is_finite()) {
        return Err(EvalError::NonFinite("verification score"));
    }
    let mut gen_sorted = genuine.to_vec();
    gen_sorted.sort_by(f64::total_cmp);
    let mut imp_sorted = impostor.to_vec();
    imp_sorted.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = gen_sorted.iter().chain(&imp_sorted).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let far = count_le(&imp_sorted, t) as f64 / imp_sorted.len() as f64;
        let tar = count_le(&gen_sorted, t) as f64 / gen_sorted.len() as f64;
        if points.last() != Some(&(far, tar)) {
            points.push((far, tar));
        }
    }
    debug_assert!(points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    debug_assert_eq!(points.last(), Some(&(1.0, 1.0)));
    Ok(RocCurve { points })
}

/// The FAR operating points reported by default.
pub const FAR_POINTS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// TAR at each requested FAR point, or None where the point is not
/// measurable: FAR = 1e-4 needs at least 10,000 impostor pairs (one false
/// accept in ten thousand) to mean anything.
pub fn tar_report(
    genuine: &[f64],
    impostor: &[f64],
    far_points: &[f64],
) -> Result<Vec<(f64, Option<f64>)>, EvalError> {
    let roc = roc_curve(genuine, impostor)?;
    Ok(far_points
        .iter()
        .map(|&far| {
            let available = far > 1e-4 || impostor.len() >= 10_000;
            (far, available.then(|| roc.tar_at(far)))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    pub tar: Vec<(f64, Option<f64>)>,
}

/// The full report: ranks at 1/5/10, mAP, mINP, and TAR at the standard FAR
/// points, plus the swept ROC for plotting.
pub fn evaluate(scores: &ScoreMatrix) -> Result<(Metrics, RocCurve), EvalError> {
    let queries = scored_queries(scores)?;
    let (genuine, impostor) = verification_scores(scores);
    let roc = roc_curve(&genuine, &impostor)?;
    let tar = FAR_POINTS
        .iter()
        .map(|&far| {
            let available = far > 1e-4 || impostor.len() >= 10_000;
            (far, available.then(|| roc.tar_at(far)))
        })
        .collect();
    let metrics = Metrics {
        rank1: rank_accuracy(&queries, 1),
        rank5: rank_accuracy(&queries, 5),
        rank10: rank_accuracy(&queries, 10),
        map: queries.iter().map(|q| average_precision(q)).sum::<f64>() / queries.len() as f64,
        minp: queries.iter().map(|q| inverse_negative_penalty(q)).sum::<f64>()
            / queries.len() as f64,
        tar,
    };
    Ok((metrics, roc))
}

/// "1e-4" style key for the round FAR points, shortest float form otherwise.
fn far_key(far: f64) -> String {
    for k in 1..=12 {
        let s = format!("1e-{k}");
        if s.parse::<f64>() == Ok(far) {
            return s;
        }
    }
    format!("{far:?}")
}

/// Fixed key order and float formatting, so equal metrics give equal bytes.
pub fn write_metrics_json<W: Write>(mut w: W, m: &Metrics) -> Result<(), EvalError> {
    writeln!(w, "{{")?;
    writeln!(w, "  \"rank1\": {:?},", m.rank1)?;
    writeln!(w, "  \"rank5\": {:?},", m.rank5)?;
    writeln!(w, "  \"rank10\": {:?},", m.rank10)?;
    writeln!(w, "  \"mAP\": {:?},", m.map)?;
    writeln!(w, "  \"mINP\": {:?},", m.minp)?;
    writeln!(w, "  \"tar\": {{")?;
    for (i, (far, tar)) in m.tar.iter().enumerate() {
        let sep = if i + 1 < m.tar.len() { "," } else { "" };
        match tar {
            Some(t) => writeln!(w, "    {:?}: {:?}{}", far_key(*far), t, sep)?,
            None => writeln!(w, "    {:?}: null{}", far_key(*far), sep)?,
        }
    }
    writeln!(w, "  }}")?;
    writeln!(w, "}}")?;
    Ok(())
}

pub fn write_roc_csv<W: Write>(mut w: W, roc: &RocCurve) -> Result<(), EvalError> {
    writeln!(w, "far,tar")?;
    for (far, tar) in &roc.points {
        writeln!(w, "{far:?},{tar:?}")?;
    }
    Ok(())
}
