//! Recognition model: dual-branch (silhouette + RGB) 3-D conv embedding
//! network with temporal ratio attention, batch-all triplet training, and
//! cross-modality feature distillation. The RGB branch and the per-block
//! adapters exist only at training time; inference embeds silhouettes plus
//! their ratio tracks and nothing else.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::silio::{
    load_rgb_pack, load_silhouette_pack, normalize_pair, RatioTrack, RgbSequence, SilError,
    SilhouetteSequence,
};
use crate::synth::{CorpusManifest, Split, SynthError};
use crate::tensor::{
    fan_in_uniform, triplet_batch_all, Array, Gradients, PadMode, ParameterStore, Scalar, Tensor,
    TensorError,
};

#[derive(Debug, Error)]
pub enum GarError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("temporal misalignment: sil {sil} frames, rgb {rgb}, ratios {ratios}")]
    TemporalMisalignment { sil: usize, rgb: usize, ratios: usize },
    #[error("input frames are {h}x{w}, expected {expect}x{expect}")]
    BadInput { h: usize, w: usize, expect: usize },
    #[error("training corpus has {0} identities with usable clips, need at least 2")]
    TooFewIdentities(usize),
    #[error("no training clips: need full-body walk spans of at least clip length with RGB")]
    NoTrainingData,
    #[error("checkpoint does not match recognizer architecture: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sil(#[from] SilError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Distance used to pull adapted silhouette features toward RGB features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMetric {
    Mse,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarConfig {
    pub n_blocks: usize,
    /// Output channels per block, length `n_blocks`.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    /// Side length of normalized input frames; halved by the spatial pool
    /// after every block but the last.
    pub input_size: usize,
    /// Temporal gate applied after block 1 in training and inference alike.
    /// `Ratio` is the model; `Ones` is the no-attention ablation.
    pub gate: Gate,
    pub margin: f64,
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub lambda_distill: f64,
    pub ratio_kernel: usize,
    pub metric: DistillMetric,
    /// Identities per training batch.
    pub p_identities: usize,
    /// Clips per identity per batch.
    pub k_clips: usize,
    pub clip_len: usize,
    /// Stride of the 30-frame windows averaged at inference.
    pub embed_stride: usize,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub milestones: Vec<usize>,
}

impl Default for GarConfig {
    fn default() -> Self {
        GarConfig {
            n_blocks: 3,
            channels: vec![16, 32, 64],
            embedding_dim: 64,
            input_size: 64,
            gate: Gate::Ratio,
            margin: 0.2,
            lambda_f: 0.425,
            lambda_s: 0.425,
            lambda_distill: 0.15,
            ratio_kernel: 3,
            metric: DistillMetric::Mse,
            p_identities: 8,
            k_clips: 8,
            clip_len: 30,
            embed_stride: 15,
            lr: 0.01,
            momentum: 0.9,
            steps: 2000,
            milestones: vec![1200, 1700],
        }
    }
}

impl GarConfig {
    pub fn validate(&self) -> Result<(), GarError> {
        let bad = |msg: String| Err(GarError::BadConfig(msg));
        if self.n_blocks < 2 {
            return bad(format!("n_blocks {} < 2", self.n_blocks));
        }
        if self.channels.len() != self.n_blocks {
            return bad(format!(
                "{} channel counts for {} blocks",
                self.channels.len(),
                self.n_blocks
            ));
        }
        if self.embedding_dim < 8 {
            return bad(format!("embedding_dim {} < 8", self.embedding_dim));
        }
        let sum = self.lambda_f + self.lambda_s + self.lambda_distill;
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("loss weights sum to {sum}, expected 1"));
        }
        if self.lambda_f < 0.0 || self.lambda_s < 0.0 || self.lambda_distill < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if self.ratio_kernel == 0 || self.ratio_kernel % 2 == 0 {
            return bad(format!("ratio_kernel {} must be odd", self.ratio_kernel));
        }
        let pools = self.n_blocks - 1;
        if self.input_size % (1 << pools) != 0 || self.input_size >> pools == 0 {
            return bad(format!(
                "input_size {} not divisible by {} spatial pools",
                self.input_size,
                1 << pools
            ));
        }
        if self.p_identities < 2 || self.k_clips < 2 {
            return bad("batch needs at least 2 identities and 2 clips each".into());
        }
        if self.clip_len == 0 || self.embed_stride == 0 {
            return bad("clip_len and embed_stride must be positive".into());
        }
        Ok(())
    }

    /// Flattened feature count entering the embedding head.
    fn head_features(&self) -> usize {
        let side = self.input_size >> (self.n_blocks - 1);
        self.channels[self.n_blocks - 1] * side * side
    }
}

const LEAK: f64 = 0.01;
const SIL_CHANNELS: usize = 1;
const RGB_CHANNELS: usize = 3;

/// `(name, shape, fan_in)` for every trainable tensor, insertion order.
fn parameter_shapes(cfg: &GarConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    out.push((
        "ratio.conv.weight".to_string(),
        vec![1, 2, cfg.ratio_kernel],
        2 * cfg.ratio_kernel,
    ));
    out.push(("ratio.conv.bias".to_string(), vec![1], 2 * cfg.ratio_kernel));
    for (branch, c0) in [("sil", SIL_CHANNELS), ("rgb", RGB_CHANNELS)] {
        let mut c_in = c0;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let fan = c_in * 27;
            out.push((
                format!("{branch}.block{}.conv.weight", i + 1),
                vec![c_out, c_in, 3, 3, 3],
                fan,
            ));
            out.push((format!("{branch}.block{}.conv.bias", i + 1), vec![c_out], fan));
            c_in = c_out;
        }
        let feat = cfg.head_features();
        out.push((format!("{branch}.head.fc.weight"), vec![cfg.embedding_dim, feat], feat));
        out.push((format!("{branch}.head.fc.bias"), vec![cfg.embedding_dim], feat));
    }
    for (i, &c) in cfg.channels.iter().enumerate() {
        out.push((format!("adapter.block{}.weight", i + 1), vec![c, c, 1, 1, 1], c));
        out.push((format!("adapter.block{}.bias", i + 1), vec![c], c));
    }
    out
}

/// Inference needs the silhouette branch and the ratio net only; the RGB
/// branch and adapters are training-time scaffolding.
fn is_inference_param(name: &str) -> bool {
    name.starts_with("sil.") || name.starts_with("ratio.")
}

#[derive(Debug)]
pub struct Gar<E: Scalar> {
    pub cfg: GarConfig,
    pub store: ParameterStore<E>,
}

/// Graph leaves for one forward pass. `dual` passes also carry the RGB
/// branch and adapters; inference passes carry the silhouette side only.
struct Leaves<E: Scalar> {
    named: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> Leaves<E> {
    fn pair(&self, name: &str) -> (&Tensor<E>, &Tensor<E>) {
        let i = self
            .named
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("leaf {name} not loaded"));
        (&self.named[i].1, &self.named[i + 1].1)
    }

    fn collect(&self, grads: &mut Gradients<E>) {
        for (name, t) in &self.named {
            if let Some(g) = t.grad() {
                grads.accumulate(name, &g);
            }
        }
    }
}

/// Which temporal gate a silhouette forward uses. `Ratio` is the real model;
/// the rest exist to assert the attention contracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Ratio,
    Ones,
    Zeros,
    /// No gating op at all: the plain backbone.
    Skip,
}

/// All intermediate tensors of one dual forward pass.
pub struct DualFeatures<E: Scalar> {
    /// Per-block silhouette-branch outputs.
    pub sil_feats: Vec<Tensor<E>>,
    /// Per-block RGB-branch outputs, shape-matching `sil_feats`.
    pub rgb_feats: Vec<Tensor<E>>,
    /// Adapter outputs `C_i(F_i^s)`.
    pub adapted: Vec<Tensor<E>>,
    pub sil_emb: Tensor<E>,
    pub rgb_emb: Tensor<E>,
}

/// Sum over blocks of the chosen distance between the (stop-gradient) RGB
/// feature and the adapted silhouette feature: the teacher is frozen, so the
/// backward pass touches silhouette-branch and adapter parameters only.
pub fn distill_loss<E: Scalar>(
    feats: &DualFeatures<E>,
    metric: DistillMetric,
) -> Result<Tensor<E>, GarError> {
    if feats.sil_feats.len() != feats.rgb_feats.len()
        || feats.adapted.len() != feats.rgb_feats.len()
    {
        return Err(GarError::BadConfig(format!(
            "block count mismatch: {} sil, {} rgb, {} adapted",
            feats.sil_feats.len(),
            feats.rgb_feats.len(),
            feats.adapted.len()
        )));
    }
    let mut total: Option<Tensor<E>> = None;
    for (rgb, adapted) in feats.rgb_feats.iter().zip(&feats.adapted) {
        let teacher = rgb.stop_gradient();
        let term = match metric {
            DistillMetric::Mse => adapted.mse_mean(&teacher)?,
            DistillMetric::Cosine => adapted.cosine_dist_mean(&teacher)?,
        };
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one block"))
}

/// Silhouette-only embedding of one (sub)sequence plus a quality flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    /// Set when the input was shorter than a clip and had to be loop-padded.
    pub loop_padded: bool,
}

impl<E: Scalar> Gar<E> {
    pub fn new(cfg: GarConfig, seed: u64) -> Result<Self, GarError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (name, shape, fan_in) in parameter_shapes(&cfg) {
            store.insert(&name, fan_in_uniform(&mut rng, &shape, fan_in));
        }
        Ok(Gar { cfg, store })
    }

    /// Wraps a checkpoint for embedding only: the silhouette branch and
    /// ratio net must be present and shaped right; anything else is ignored.
    pub fn for_inference(cfg: GarConfig, store: ParameterStore<E>) -> Result<Self, GarError> {
        cfg.validate()?;
        for (name, shape, _) in parameter_shapes(&cfg) {
            if !is_inference_param(&name) {
                continue;
            }
            match store.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(GarError::BadCheckpoint(format!(
                        "{name} has shape {:?}, expected {:?}",
                        a.shape(),
                        shape
                    )))
                }
                None => return Err(GarError::BadCheckpoint(format!("{name} is missing"))),
            }
        }
        Ok(Gar { cfg, store })
    }

    /// The inference subset of the parameters (silhouette branch + ratio
    /// net), for checkpoints that ship without the training scaffolding.
    pub fn inference_store(&self) -> ParameterStore<E> {
        let mut out = ParameterStore::new();
        for (name, _, _) in parameter_shapes(&self.cfg) {
            if is_inference_param(&name) {
                out.insert(&name, self.store.get(&name).expect("own param").clone());
            }
        }
        out
    }

    fn leaves(&self, trainable: bool, dual: bool) -> Result<Leaves<E>, GarError> {
        let mut named = Vec::new();
        for (name, _, _) in parameter_shapes(&self.cfg) {
            if !dual && !is_inference_param(&name) {
                continue;
            }
            if self.store.get(&name).is_none() {
                return Err(GarError::BadCheckpoint(format!(
                    "{name} is missing (inference-only checkpoint?)"
                )));
            }
            let t = if trainable {
                self.store.param(&name)
            } else {
                self.store.constant(&name)
            };
            named.push((name, t));
        }
        Ok(Leaves { named })
    }

    /// Eq. 2 gate: the 2-channel ratio track through a length-preserving
    /// 1-D conv (edge replication) and a sigmoid, giving r in (0,1)^T.
    pub fn ratio_attention(&self, ratios: &RatioTrack) -> Result<Tensor<E>, GarError> {
        let leaves = self.leaves(false, false)?;
        self.ratio_attention_with(&leaves, &ratio_tensor(ratios, 0, ratios.len()))
    }

    fn ratio_attention_with(
        &self,
        leaves: &Leaves<E>,
        ratios: &Tensor<E>,
    ) -> Result<Tensor<E>, GarError> {
        let (w, b) = leaves.pair("ratio.conv.weight");
        Ok(ratios
            .conv1d(w, b, self.cfg.ratio_kernel / 2, PadMode::Replicate)?
            .sigmoid())
    }

    /// One branch: block 1 is gated by r right after its activation, every
    /// block but the last is followed by a 2x spatial pool, and the head is
    /// temporal max -> flatten -> linear. Temporal length is preserved
    /// throughout, so any clip length maps to a d-vector.
    fn branch_forward(
        &self,
        leaves: &Leaves<E>,
        branch: &str,
        x: &Tensor<E>,
        r: Option<&Tensor<E>>,
    ) -> Result<(Vec<Tensor<E>>, Tensor<E>), GarError> {
        let n = self.cfg.n_blocks;
        let mut feats = Vec::with_capacity(n);
        let mut x = x.clone();
        for i in 0..n {
            let (w, b) = leaves.pair(&format!("{branch}.block{}.conv.weight", i + 1));
            x = x.conv3d(w, b, (1, 1, 1))?.leaky_relu(E::from_f64(LEAK));
            if i == 0 {
                if let Some(r) = r {
                    x = x.gate_temporal(r)?;
                }
            }
            if i + 1 < n {
                x = x.max_pool3d(1, 2, 2)?;
            }
            feats.push(x.clone());
        }
        let pooled = x.reduce_max_axis(2)?; // over time
        let flat = pooled.reshape(&[1, self.cfg.head_features()])?;
        let (w, b) = leaves.pair(&format!("{branch}.head.fc.weight"));
        let emb = flat.linear(w, b)?;
        Ok((feats, emb))
    }

    /// The temporal gate for one clip, per the requested mode. `None` means
    /// no gating op enters the graph at all.
    fn gate_signal(
        &self,
        gate: Gate,
        leaves: &Leaves<E>,
        ratios: &Tensor<E>,
    ) -> Result<Option<Tensor<E>>, GarError> {
        let len = ratios.shape()[2];
        Ok(match gate {
            Gate::Ratio => Some(self.ratio_attention_with(leaves, ratios)?),
            Gate::Ones => Some(Tensor::leaf(Array::from_vec(
                &[1, 1, len],
                vec![E::one(); len],
            ))),
            Gate::Zeros => Some(Tensor::leaf(Array::from_vec(
                &[1, 1, len],
                vec![E::zero(); len],
            ))),
            Gate::Skip => None,
        })
    }

    fn forward_dual_with(
        &self,
        leaves: &Leaves<E>,
        sil: &Tensor<E>,
        rgb: &Tensor<E>,
        ratios: &Tensor<E>,
    ) -> Result<DualFeatures<E>, GarError> {
        let r = self.gate_signal(self.cfg.gate, leaves, ratios)?;
        let (sil_feats, sil_emb) = self.branch_forward(leaves, "sil", sil, r.as_ref())?;
        let (rgb_feats, rgb_emb) = self.branch_forward(leaves, "rgb", rgb, r.as_ref())?;
        let mut adapted = Vec::with_capacity(sil_feats.len());
        for (i, f) in sil_feats.iter().enumerate() {
            let (w, b) = leaves.pair(&format!("adapter.block{}.weight", i + 1));
            adapted.push(f.conv3d(w, b, (0, 0, 0))?);
        }
        Ok(DualFeatures {
            sil_feats,
            rgb_feats,
            adapted,
            sil_emb,
            rgb_emb,
        })
    }

    /// Dual forward over aligned inputs (read-only parameters). One r gates
    /// both branches.
    pub fn forward_dual(
        &self,
        sil: &SilhouetteSequence,
        rgb: &RgbSequence,
        ratios: &RatioTrack,
    ) -> Result<DualFeatures<E>, GarError> {
        self.check_aligned(sil, rgb, ratios)?;
        let leaves = self.leaves(false, true)?;
        let t = sil.len();
        self.forward_dual_with(
            &leaves,
            &sil_clip_tensor(sil, 0, t),
            &rgb_clip_tensor(rgb, 0, t),
            &ratio_tensor(ratios, 0, t),
        )
    }

    /// Gradients of the distillation loss alone (trainable leaves): the
    /// returned map must contain no `rgb.*` entry, ever.
    pub fn distill_grads(
        &self,
        sil: &SilhouetteSequence,
        rgb: &RgbSequence,
        ratios: &RatioTrack,
    ) -> Result<Gradients<E>, GarError> {
        self.check_aligned(sil, rgb, ratios)?;
        let leaves = self.leaves(true, true)?;
        let t = sil.len();
        let feats = self.forward_dual_with(
            &leaves,
            &sil_clip_tensor(sil, 0, t),
            &rgb_clip_tensor(rgb, 0, t),
            &ratio_tensor(ratios, 0, t),
        )?;
        let loss = distill_loss(&feats, self.cfg.metric)?;
        loss.backward();
        let mut grads = Gradients::new();
        leaves.collect(&mut grads);
        Ok(grads)
    }

    fn check_aligned(
        &self,
        sil: &SilhouetteSequence,
        rgb: &RgbSequence,
        ratios: &RatioTrack,
    ) -> Result<(), GarError> {
        if sil.len() != rgb.len() || sil.len() != ratios.len() {
            return Err(GarError::TemporalMisalignment {
                sil: sil.len(),
                rgb: rgb.len(),
                ratios: ratios.len(),
            });
        }
        check_size(sil.height, sil.width, self.cfg.input_size)?;
        check_size(rgb.height, rgb.width, self.cfg.input_size)
    }

    /// Silhouette-branch embedding of one whole clip under an explicit gate
    /// choice. Diagnostic surface for the attention contracts; `embed` is
    /// the production path.
    pub fn clip_embedding(
        &self,
        sil: &SilhouetteSequence,
        ratios: &RatioTrack,
        gate: Gate,
    ) -> Result<Vec<f64>, GarError> {
        if sil.len() != ratios.len() {
            return Err(GarError::TemporalMisalignment {
                sil: sil.len(),
                rgb: sil.len(),
                ratios: ratios.len(),
            });
        }
        check_size(sil.height, sil.width, self.cfg.input_size)?;
        let leaves = self.leaves(false, false)?;
        let x = sil_clip_tensor(sil, 0, sil.len());
        let emb = self.gated_sil_embedding(&leaves, &x, ratios, 0, sil.len(), gate)?;
        Ok(emb.value().data().iter().map(|&e| Scalar::to_f64(e)).collect())
    }

    fn gated_sil_embedding(
        &self,
        leaves: &Leaves<E>,
        x: &Tensor<E>,
        ratios: &RatioTrack,
        start: usize,
        len: usize,
        gate: Gate,
    ) -> Result<Tensor<E>, GarError> {
        let r = self.gate_signal(gate, leaves, &ratio_tensor(ratios, start, len))?;
        let (_, emb) = self.branch_forward(leaves, "sil", x, r.as_ref())?;
        Ok(emb)
    }

    /// Inference embedding: slide clip-length windows at the embed stride
    /// and average their embeddings. Shorter inputs are loop-padded to one
    /// clip and flagged.
    pub fn embed(
        &self,
        sil: &SilhouetteSequence,
        ratios: &RatioTrack,
    ) -> Result<Embedding, GarError> {
        if sil.len() != ratios.len() {
            return Err(GarError::TemporalMisalignment {
                sil: sil.len(),
                rgb: sil.len(),
                ratios: ratios.len(),
            });
        }
        check_size(sil.height, sil.width, self.cfg.input_size)?;
        let clip = self.cfg.clip_len;
        let leaves = self.leaves(false, false)?;
        let (sil, ratios, loop_padded) = if sil.len() < clip {
            (loop_pad_sil(sil, clip), loop_pad_ratios(ratios, clip), true)
        } else {
            (sil.clone(), ratios.clone(), false)
        };
        let mut starts = Vec::new();
        let mut s = 0;
        while s + clip <= sil.len() {
            starts.push(s);
            s += self.cfg.embed_stride;
        }
        let d = self.cfg.embedding_dim;
        let mut acc = vec![0.0f64; d];
        for &start in &starts {
            let x = sil_clip_tensor(&sil, start, clip);
            let emb = self.gated_sil_embedding(&leaves, &x, &ratios, start, clip, self.cfg.gate)?;
            for (a, &v) in acc.iter_mut().zip(emb.value().data()) {
                *a += Scalar::to_f64(v);
            }
        }
        let n = starts.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        Ok(Embedding {
            vector: acc,
            loop_padded,
        })
    }

    /// Scalar probe of the full dual forward (both embeddings through fixed
    /// random projections, plus `lambda_distill` times the distillation term),
    /// for finite-difference checks of the whole model.
    ///
    /// Caveat for probing: the teacher features are stop-gradients, so finite
    /// differences of this scalar match the analytic gradients only for
    /// parameters outside the teacher path (`sil.*`, `adapter.*`). To probe
    /// `rgb.*` and `ratio.*`, build the model with `lambda_distill = 0`; the
    /// objective is then smooth in every parameter.
    pub fn forward_check_scalar(
        &self,
        sil: &SilhouetteSequence,
        rgb: &RgbSequence,
        ratios: &RatioTrack,
        seed: u64,
    ) -> Result<f64, GarError> {
        let feats = self.forward_dual(sil, rgb, ratios)?;
        Ok(self.check_objective(&feats, seed)?.item().to_f64())
    }

    /// Gradients of `forward_check_scalar` wrt every parameter.
    pub fn forward_check_grads(
        &self,
        sil: &SilhouetteSequence,
        rgb: &RgbSequence,
        ratios: &RatioTrack,
        seed: u64,
    ) -> Result<Gradients<E>, GarError> {
        self.check_aligned(sil, rgb, ratios)?;
        let leaves = self.leaves(true, true)?;
        let t = sil.len();
        let feats = self.forward_dual_with(
            &leaves,
            &sil_clip_tensor(sil, 0, t),
            &rgb_clip_tensor(rgb, 0, t),
            &ratio_tensor(ratios, 0, t),
        )?;
        let obj = self.check_objective(&feats, seed)?;
        obj.backward();
        let mut grads = Gradients::new();
        leaves.collect(&mut grads);
        Ok(grads)
    }

    fn check_objective(&self, feats: &DualFeatures<E>, seed: u64) -> Result<Tensor<E>, GarError> {
        let d = self.cfg.embedding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proj = || {
            let v: Vec<E> = (0..d).map(|_| E::from_f64(rng.gen_range(-1.0..1.0))).collect();
            Tensor::leaf(Array::from_vec(&[1, d], v))
        };
        let (u, v) = (proj(), proj());
        let obj = feats
            .sil_emb
            .mul(&u)?
            .sum()
            .add(&feats.rgb_emb.mul(&v)?.sum())?;
        if self.cfg.lambda_distill == 0.0 {
            return Ok(obj);
        }
        Ok(obj.add(&distill_loss(feats, self.cfg.metric)?.scale(E::from_f64(self.cfg.lambda_distill)))?)
    }
}

fn check_size(h: usize, w: usize, expect: usize) -> Result<(), GarError> {
    if h != expect || w != expect {
        return Err(GarError::BadInput { h, w, expect });
    }
    Ok(())
}

/// Mask frames `[start, start+len)` as a `(1, 1, len, H, W)` leaf, indices
/// taken modulo the sequence length so loop-padded reads share one path.
fn sil_clip_tensor<E: Scalar>(seq: &SilhouetteSequence, start: usize, len: usize) -> Tensor<E> {
    let (h, w) = (seq.height, seq.width);
    let mut data = Vec::with_capacity(len * h * w);
    for t in 0..len {
        let f = seq.frame((start + t) % seq.len());
        data.extend(f.iter().map(|&v| E::from_f64(v as f64)));
    }
    Tensor::leaf(Array::from_vec(&[1, 1, len, h, w], data))
}

/// RGB frames as a `(1, 3, len, H, W)` leaf, channel-planar.
fn rgb_clip_tensor<E: Scalar>(seq: &RgbSequence, start: usize, len: usize) -> Tensor<E> {
    let (h, w) = (seq.height, seq.width);
    let plane = h * w;
    let mut data = vec![E::zero(); 3 * len * plane];
    for t in 0..len {
        let f = seq.frame((start + t) % seq.len());
        for c in 0..3 {
            let dst = (c * len + t) * plane;
            for i in 0..plane {
                data[dst + i] = E::from_f64(f[c * plane + i] as f64);
            }
        }
    }
    Tensor::leaf(Array::from_vec(&[1, 3, len, h, w], data))
}

/// Ratio rows `[start, start+len)` as a `(1, 2, len)` leaf.
fn ratio_tensor<E: Scalar>(ratios: &RatioTrack, start: usize, len: usize) -> Tensor<E> {
    let t = ratios.len();
    let mut data = Vec::with_capacity(2 * len);
    for c in 0..2 {
        for i in 0..len {
            data.push(E::from_f64(ratios.rho[(start + i) % t][c]));
        }
    }
    Tensor::leaf(Array::from_vec(&[1, 2, len], data))
}

fn loop_pad_sil(seq: &SilhouetteSequence, len: usize) -> SilhouetteSequence {
    let frames: Vec<Vec<u8>> = (0..len)
        .map(|t| seq.frame(t % seq.len()).to_vec())
        .collect();
    SilhouetteSequence::new(seq.height, seq.width, frames)
}

fn loop_pad_ratios(ratios: &RatioTrack, len: usize) -> RatioTrack {
    RatioTrack {
        rho: (0..len).map(|t| ratios.rho[t % ratios.len()]).collect(),
    }
}

// ---- training ---------------------------------------------------------------

/// One aligned training clip, exactly `clip_len` frames.
pub struct TrainClip {
    pub sil: SilhouetteSequence,
    pub rgb: RgbSequence,
    pub ratios: RatioTrack,
}

/// Loss components of one step, before and after weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub triplet_sil: f64,
    pub triplet_rgb: f64,
    pub distill: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GarTrainTrace {
    pub total: Vec<f64>,
    pub triplet_sil: Vec<f64>,
    pub triplet_rgb: Vec<f64>,
    pub distill: Vec<f64>,
}

/// A usable stretch of one training sequence (a full-body walk span).
struct ClipSource {
    sil: SilhouetteSequence,
    rgb: RgbSequence,
    ratios: RatioTrack,
    label: usize,
}

struct ClipView<'a> {
    src: &'a ClipSource,
    start: usize,
}

impl<E: Scalar> Gar<E> {
    /// Gradients and losses for one explicit batch. Public so the
    /// training-time contracts (adapter freezing, determinism) can be probed
    /// without a corpus.
    pub fn step_grads(
        &self,
        clips: &[TrainClip],
        labels: &[usize],
    ) -> Result<(Gradients<E>, StepLosses), GarError> {
        if clips.len() != labels.len() {
            return Err(GarError::BadConfig(format!(
                "{} clips with {} labels",
                clips.len(),
                labels.len()
            )));
        }
        for c in clips {
            if c.sil.len() != self.cfg.clip_len {
                return Err(GarError::BadConfig(format!(
                    "clip of {} frames, expected clip_len {}",
                    c.sil.len(),
                    self.cfg.clip_len
                )));
            }
            self.check_aligned(&c.sil, &c.rgb, &c.ratios)?;
        }
        let sources: Vec<ClipSource> = clips
            .iter()
            .zip(labels)
            .map(|(c, &label)| ClipSource {
                sil: c.sil.clone(),
                rgb: c.rgb.clone(),
                ratios: c.ratios.clone(),
                label,
            })
            .collect();
        let views: Vec<ClipView> = sources.iter().map(|src| ClipView { src, start: 0 }).collect();
        self.step_grads_views(&views)
    }

    /// Two-phase batch gradient, bounded by one clip's graph at a time.
    /// Phase A runs every clip read-only to get embeddings, then
    /// differentiates the two triplet losses with the embeddings as leaves.
    /// Phase B re-runs each clip trainably and backprops the chain-rule seed
    /// (plus its share of the distillation loss) through the network.
    fn step_grads_views(&self, clips: &[ClipView]) -> Result<(Gradients<E>, StepLosses), GarError> {
        let b = clips.len();
        let d = self.cfg.embedding_dim;
        let clip = self.cfg.clip_len;
        let labels: Vec<usize> = clips.iter().map(|c| c.src.label).collect();

        let frozen = self.leaves(false, true)?;
        let mut sil_flat = Vec::with_capacity(b * d);
        let mut rgb_flat = Vec::with_capacity(b * d);
        let mut distill_sum = 0.0;
        for c in clips {
            let feats = self.forward_dual_with(
                &frozen,
                &sil_clip_tensor(&c.src.sil, c.start, clip),
                &rgb_clip_tensor(&c.src.rgb, c.start, clip),
                &ratio_tensor(&c.src.ratios, c.start, clip),
            )?;
            sil_flat.extend_from_slice(feats.sil_emb.value().data());
            rgb_flat.extend_from_slice(feats.rgb_emb.value().data());
            distill_sum += distill_loss(&feats, self.cfg.metric)?.item().to_f64();
        }
        let distill_mean = distill_sum / b as f64;

        let margin = E::from_f64(self.cfg.margin);
        let branch_grad = |flat: Vec<E>| -> Result<(Option<Vec<E>>, f64), GarError> {
            let emb = Tensor::param(Array::from_vec(&[b, d], flat));
            let tri = triplet_batch_all(&emb, &labels, margin)?;
            if tri.degenerate {
                log::warn!("batch produced no valid triplet; skipping the triplet term");
                return Ok((None, 0.0));
            }
            let loss = tri.loss.item().to_f64();
            tri.loss.backward();
            Ok((emb.grad(), loss))
        };
        let (sil_seed, loss_sil) = branch_grad(sil_flat)?;
        let (rgb_seed, loss_rgb) = branch_grad(rgb_flat)?;

        let (lf, ls, ld) = (self.cfg.lambda_f, self.cfg.lambda_s, self.cfg.lambda_distill);
        let mut grads = Gradients::new();
        for (i, c) in clips.iter().enumerate() {
            let leaves = self.leaves(true, true)?;
            let feats = self.forward_dual_with(
                &leaves,
                &sil_clip_tensor(&c.src.sil, c.start, clip),
                &rgb_clip_tensor(&c.src.rgb, c.start, clip),
                &ratio_tensor(&c.src.ratios, c.start, clip),
            )?;
            let mut obj: Option<Tensor<E>> = None;
            let seed_term =
                |emb: &Tensor<E>, seed: &Option<Vec<E>>, weight: f64| -> Result<Option<Tensor<E>>, GarError> {
                    let seed = match seed {
                        Some(s) => s,
                        None => return Ok(None),
                    };
                    let row: Vec<E> = seed[i * d..(i + 1) * d]
                        .iter()
                        .map(|&g| g * E::from_f64(weight))
                        .collect();
                    let row = Tensor::leaf(Array::from_vec(&[1, d], row));
                    Ok(Some(emb.mul(&row)?.sum()))
                };
            for term in [
                seed_term(&feats.sil_emb, &sil_seed, ls)?,
                seed_term(&feats.rgb_emb, &rgb_seed, lf)?,
            ]
            .into_iter()
            .flatten()
            {
                obj = Some(match obj {
                    Some(o) => o.add(&term)?,
                    None => term,
                });
            }
            if ld != 0.0 {
                let term =
                    distill_loss(&feats, self.cfg.metric)?.scale(E::from_f64(ld / b as f64));
                obj = Some(match obj {
                    Some(o) => o.add(&term)?,
                    None => term,
                });
            }
            if let Some(obj) = obj {
                obj.backward();
                leaves.collect(&mut grads);
            }
        }
        let total = lf * loss_rgb + ls * loss_sil + ld * distill_mean;
        Ok((
            grads,
            StepLosses {
                total,
                triplet_sil: loss_sil,
                triplet_rgb: loss_rgb,
                distill: distill_mean,
            },
        ))
    }
}

/// Collects every full-body walk span (with RGB) of the split as a clip
/// source, grouped under per-identity labels in manifest order.
fn load_clip_sources(
    manifest: &CorpusManifest,
    root: &Path,
    split: Split,
    cfg: &GarConfig,
) -> Result<Vec<ClipSource>, GarError> {
    let ids = match split {
        Split::Train => &manifest.train_identities,
        Split::Test => &manifest.test_identities,
    };
    let label_of = |id: u32| ids.iter().position(|&x| x == id).expect("split id");
    let mut out = Vec::new();
    for entry in manifest.entries_for_split(split) {
        let gt = CorpusManifest::ground_truth(entry);
        let spans: Vec<(usize, usize)> = gt
            .walk_intervals
            .iter()
            .copied()
            .filter(|&(s, e)| e - s >= cfg.clip_len)
            .collect();
        if spans.is_empty() {
            continue;
        }
        let rgb_file = match &entry.rgb_file {
            Some(f) => f,
            None => continue,
        };
        let sil = load_silhouette_pack(&root.join(&entry.file))?;
        let rgb = load_rgb_pack(&root.join(rgb_file))?;
        let (sil_n, rgb_n, ratios) =
            normalize_pair(&sil, &rgb, (cfg.input_size, cfg.input_size))?;
        if sil_n.len() != sil.len() {
            log::warn!(
                "{}: {} frames dropped by normalization; skipping for training",
                entry.file,
                sil.len() - sil_n.len()
            );
            continue;
        }
        for (s, e) in spans {
            out.push(ClipSource {
                sil: slice_sil(&sil_n, s, e),
                rgb: slice_rgb(&rgb_n, s, e),
                ratios: RatioTrack {
                    rho: ratios.rho[s..e].to_vec(),
                },
                label: label_of(entry.identity),
            });
        }
    }
    Ok(out)
}

fn slice_sil(seq: &SilhouetteSequence, s: usize, e: usize) -> SilhouetteSequence {
    SilhouetteSequence::new(seq.height, seq.width, seq.frames()[s..e].to_vec())
}

fn slice_rgb(seq: &RgbSequence, s: usize, e: usize) -> RgbSequence {
    let frames: Vec<Vec<f32>> = (s..e).map(|t| seq.frame(t).to_vec()).collect();
    let boxes = seq.raw_boxes[s..e].to_vec();
    RgbSequence::new(seq.height, seq.width, frames, boxes)
}

/// Trains the recognizer: per step, P identities x K clips of `clip_len`
/// contiguous frames from full-body walk spans, one weighted
/// triplet+triplet+distillation SGD step. Deterministic under `seed`.
pub fn train_gar(
    manifest: &CorpusManifest,
    root: &Path,
    cfg: GarConfig,
    seed: u64,
) -> Result<(Gar<f32>, GarTrainTrace), GarError> {
    cfg.validate()?;
    let sources = load_clip_sources(manifest, root, Split::Train, &cfg)?;
    if sources.is_empty() {
        return Err(GarError::NoTrainingData);
    }
    let n_labels = sources.iter().map(|s| s.label).max().unwrap() + 1;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, s) in sources.iter().enumerate() {
        by_label[s.label].push(i);
    }
    by_label.retain(|v| !v.is_empty());
    if by_label.len() < 2 {
        return Err(GarError::TooFewIdentities(by_label.len()));
    }
    let p = cfg.p_identities.min(by_label.len());
    if p < cfg.p_identities {
        log::warn!(
            "corpus has {} identities with clips; scaling batch down from {} to {} identities",
            by_label.len(),
            cfg.p_identities,
            p
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gar = Gar::<f32>::new(cfg, rng.gen())?;
    let cfg = gar.cfg.clone();
    let mut trace = GarTrainTrace::default();
    let mut lr = cfg.lr;
    for step in 0..cfg.steps {
        if cfg.milestones.contains(&step) {
            lr *= 0.1;
        }
        // P distinct identities by partial shuffle, then K clips each.
        let mut pool: Vec<usize> = (0..by_label.len()).collect();
        for i in 0..p {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut views = Vec::with_capacity(p * cfg.k_clips);
        for &lab in &pool[..p] {
            for _ in 0..cfg.k_clips {
                let src = &sources[by_label[lab][rng.gen_range(0..by_label[lab].len())]];
                let start = rng.gen_range(0..=src.sil.len() - cfg.clip_len);
                views.push(ClipView { src, start });
            }
        }
        let (grads, losses) = gar.step_grads_views(&views)?;
        gar.store.sgd_step(&grads, lr as f32, cfg.momentum as f32);
        trace.total.push(losses.total);
        trace.triplet_sil.push(losses.triplet_sil);
        trace.triplet_rgb.push(losses.triplet_rgb);
        trace.distill.push(losses.distill);
        if (step + 1) % 50 == 0 || step + 1 == cfg.steps {
            log::info!(
                "gar step {}: total {:.4} (sil {:.4}, rgb {:.4}, distill {:.4})",
                step + 1,
                losses.total,
                losses.triplet_sil,
                losses.triplet_rgb,
                losses.distill
            );
        }
    }
    Ok((gar, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::silio::{normalize, BoundingBox};
    use crate::synth::{generate_corpus, CorpusConfig};

    fn tiny_cfg() -> GarConfig {
        GarConfig {
            n_blocks: 2,
            channels: vec![3, 4],
            embedding_dim: 8,
            input_size: 16,
            clip_len: 6,
            k_clips: 2,
            ..GarConfig::default()
        }
    }

    fn random_masks(t: usize, side: usize, seed: u64) -> SilhouetteSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| (0..side * side).map(|_| rng.gen_range(0..=1u8)).collect())
            .collect();
        SilhouetteSequence::new(side, side, frames)
    }

    fn random_rgb(t: usize, side: usize, seed: u64) -> RgbSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| (0..3 * side * side).map(|_| rng.gen_range(0.0..1.0f32)).collect())
            .collect();
        RgbSequence::new(side, side, frames, vec![BoundingBox::default(); t])
    }

    fn random_track(t: usize, seed: u64) -> RatioTrack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RatioTrack {
            rho: (0..t)
                .map(|_| [rng.gen_range(0.5..2.0), rng.gen_range(0.3..1.5)])
                .collect(),
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        assert!(GarConfig::default().validate().is_ok());
        let bad = |f: fn(&mut GarConfig)| {
            let mut c = GarConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(GarError::BadConfig(_)))
        };
        assert!(bad(|c| c.lambda_distill = 0.2));
        assert!(bad(|c| c.n_blocks = 1));
        assert!(bad(|c| c.embedding_dim = 4));
        assert!(bad(|c| c.ratio_kernel = 4));
        assert!(bad(|c| c.input_size = 30));
        assert!(bad(|c| c.channels = vec![16, 32]));
    }

    #[test]
    fn ratio_attention_hand_rules() {
        let mut gar = Gar::<f64>::new(tiny_cfg(), 1).unwrap();
        // Zero the ratio net: sigmoid(0) = 1/2 regardless of input.
        for name in ["ratio.conv.weight", "ratio.conv.bias"] {
            let vals: Vec<f64> = gar.store.get(name).unwrap().data().to_vec();
            for (i, v) in vals.iter().enumerate() {
                gar.store.nudge(name, i, -v);
            }
        }
        let r = gar.ratio_attention(&random_track(7, 2)).unwrap();
        assert_eq!(r.shape(), &[1, 1, 7]);
        assert!(r.value().data().iter().all(|&v| v == 0.5));

        // Generic weights: a constant track maps to a constant r (edge
        // replication), in (0,1), length preserved down to T = 1.
        let gar = Gar::<f64>::new(tiny_cfg(), 3).unwrap();
        let track = RatioTrack {
            rho: vec![[1.3, 0.8]; 9],
        };
        let r = gar.ratio_attention(&track).unwrap();
        let vals = r.value().data();
        assert!(vals.iter().all(|&v| v == vals[0]));
        assert!(vals[0] > 0.0 && vals[0] < 1.0);
        let one = gar
            .ratio_attention(&RatioTrack { rho: vec![[1.0, 1.0]] })
            .unwrap();
        assert_eq!(one.shape(), &[1, 1, 1]);

        // Different tracks (frontal-like vs lateral-like scale histories)
        // give different gates.
        let a = gar.ratio_attention(&random_track(9, 5)).unwrap();
        let mut rev = random_track(9, 5);
        rev.rho.reverse();
        let b = gar.ratio_attention(&rev).unwrap();
        assert!(a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn unit_gate_is_the_plain_backbone_and_zero_gate_annihilates() {
        let gar = Gar::<f32>::new(tiny_cfg(), 11).unwrap();
        let sil = random_masks(6, 16, 21);
        let track = random_track(6, 22);
        let ones = gar.clip_embedding(&sil, &track, Gate::Ones).unwrap();
        let plain = gar.clip_embedding(&sil, &track, Gate::Skip).unwrap();
        assert_eq!(ones, plain);
        let ratio = gar.clip_embedding(&sil, &track, Gate::Ratio).unwrap();
        assert_ne!(ratio, plain);

        // r = 0 wipes block 1, so any clip embeds like an all-zero clip.
        let zeros_real = gar.clip_embedding(&sil, &track, Gate::Zeros).unwrap();
        let blank = SilhouetteSequence::new(16, 16, vec![vec![0u8; 256]; 6]);
        let zeros_blank = gar.clip_embedding(&blank, &track, Gate::Zeros).unwrap();
        assert_eq!(zeros_real, zeros_blank);
    }

    #[test]
    fn distill_loss_matches_a_hand_oracle() {
        let shape = [1usize, 3, 2, 2, 2];
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rand_t = |scale: f64| {
            let v: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            Tensor::leaf(Array::from_vec(&shape, v))
        };
        let rgb = [rand_t(1.0), rand_t(0.5)];
        let adapted = [rand_t(1.0), rand_t(2.0)];
        let feats = DualFeatures {
            sil_feats: vec![rand_t(1.0), rand_t(1.0)],
            rgb_feats: rgb.to_vec(),
            adapted: adapted.to_vec(),
            sil_emb: rand_t(1.0),
            rgb_emb: rand_t(1.0),
        };
        let loss = distill_loss(&feats, DistillMetric::Mse).unwrap().item();
        let mut want = 0.0;
        for (r, a) in rgb.iter().zip(&adapted) {
            let rv = r.value().data();
            let av = a.value().data();
            want += rv
                .iter()
                .zip(av)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / numel as f64;
        }
        assert!((loss - want).abs() < 1e-10, "mse {loss} vs hand {want}");

        // Cosine option against the same hand arithmetic.
        let loss = distill_loss(&feats, DistillMetric::Cosine).unwrap().item();
        let mut want = 0.0;
        for (r, a) in rgb.iter().zip(&adapted) {
            let rv = r.value().data();
            let av = a.value().data();
            let dot: f64 = rv.iter().zip(av).map(|(x, y)| x * y).sum();
            let nr: f64 = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let na: f64 = av.iter().map(|x| x * x).sum::<f64>().sqrt();
            want += 1.0 - dot / (nr * na);
        }
        assert!((loss - want).abs() < 1e-10, "cosine {loss} vs hand {want}");

        // Adapted features equal to the teacher: zero loss exactly.
        let feats = DualFeatures {
            sil_feats: feats.sil_feats.clone(),
            rgb_feats: rgb.to_vec(),
            adapted: rgb.to_vec(),
            sil_emb: feats.sil_emb.clone(),
            rgb_emb: feats.rgb_emb.clone(),
        };
        assert_eq!(distill_loss(&feats, DistillMetric::Mse).unwrap().item(), 0.0);

        // Block-count mismatch is a config error.
        let feats = DualFeatures {
            sil_feats: feats.sil_feats.clone(),
            rgb_feats: feats.rgb_feats[..1].to_vec(),
            adapted: feats.adapted.clone(),
            sil_emb: feats.sil_emb.clone(),
            rgb_emb: feats.rgb_emb.clone(),
        };
        assert!(matches!(
            distill_loss(&feats, DistillMetric::Mse),
            Err(GarError::BadConfig(_))
        ));
    }

    #[test]
    fn distill_backward_never_touches_the_rgb_branch() {
        let gar = Gar::<f64>::new(tiny_cfg(), 17).unwrap();
        let grads = gar
            .distill_grads(&random_masks(5, 16, 31), &random_rgb(5, 16, 32), &random_track(5, 33))
            .unwrap();
        assert!(grads.names().all(|n| !n.starts_with("rgb.")));
        for i in 1..=2 {
            let g = grads.get(&format!("adapter.block{i}.weight")).unwrap();
            assert!(g.iter().any(|&v| v != 0.0));
        }
        let g = grads.get("sil.block1.conv.weight").unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
        // The silhouette head feeds the embedding, not the distillation.
        assert!(grads.get("sil.head.fc.weight").is_none());
    }

    /// Two fake identities with very different mask densities and color
    /// ranges, so untrained embeddings are well separated. Probing triplet
    /// losses by finite differences needs that: Euclidean distances have a
    /// square-root kink at coincident points, and random clips through an
    /// untrained net land almost on top of each other.
    fn batch_of_clips(cfg: &GarConfig, seed: u64) -> (Vec<TrainClip>, Vec<usize>) {
        let t = cfg.clip_len;
        let side = cfg.input_size;
        let labels = vec![0usize, 0, 1, 1];
        let clips = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 10 * i as u64);
                let p_on = if label == 0 { 0.8 } else { 0.2 };
                let (lo, hi) = if label == 0 { (0.5, 1.0) } else { (0.0, 0.5) };
                let sil_frames = (0..t)
                    .map(|_| (0..side * side).map(|_| rng.gen_bool(p_on) as u8).collect())
                    .collect();
                let rgb_frames = (0..t)
                    .map(|_| {
                        (0..3 * side * side)
                            .map(|_| rng.gen_range(lo..hi) as f32)
                            .collect()
                    })
                    .collect();
                TrainClip {
                    sil: SilhouetteSequence::new(side, side, sil_frames),
                    rgb: RgbSequence::new(side, side, rgb_frames, vec![BoundingBox::default(); t]),
                    ratios: random_track(t, seed + 10 * i as u64 + 2),
                }
            })
            .collect();
        (clips, labels)
    }

    #[test]
    fn lambda_distill_zero_freezes_adapters() {
        let mut cfg = tiny_cfg();
        cfg.lambda_f = 0.5;
        cfg.lambda_s = 0.5;
        cfg.lambda_distill = 0.0;
        let gar = Gar::<f64>::new(cfg.clone(), 23).unwrap();
        let (clips, labels) = batch_of_clips(&cfg, 100);
        let (grads, losses) = gar.step_grads(&clips, &labels).unwrap();
        assert!(grads.names().all(|n| !n.starts_with("adapter.")));
        assert!(grads.get("sil.block1.conv.weight").is_some());
        assert!(grads.get("rgb.block1.conv.weight").is_some());
        assert_eq!(losses.total, 0.5 * losses.triplet_rgb + 0.5 * losses.triplet_sil);

        // With the default weights the adapters do receive gradient.
        let gar = Gar::<f64>::new(tiny_cfg(), 23).unwrap();
        let (grads, _) = gar.step_grads(&clips, &labels).unwrap();
        assert!(grads.get("adapter.block1.weight").is_some());

        // The ones-gate ablation never routes gradient into the ratio net.
        let mut cfg = tiny_cfg();
        cfg.gate = Gate::Ones;
        let gar = Gar::<f64>::new(cfg, 23).unwrap();
        let (grads, _) = gar.step_grads(&clips, &labels).unwrap();
        assert!(grads.names().all(|n| !n.starts_with("ratio.")));
    }

    /// Central differences of a scalar-valued closure against collected
    /// analytic gradients, on a strided sample of the named parameters.
    fn probe_against_fd<F>(
        gar: &mut Gar<f64>,
        grads: &Gradients<f64>,
        names: &[String],
        coords: usize,
        mut scalar: F,
    ) where
        F: FnMut(&Gar<f64>) -> f64,
    {
        let eps = 1e-5;
        for k in 0..coords {
            let name = &names[(k * 7 + 2) % names.len()];
            let n = gar.store.get(name).unwrap().numel();
            let idx = (k * 11) % n;
            let analytic = grads.get(name).map_or(0.0, |g| g[idx]);
            gar.store.nudge(name, idx, eps);
            let up = scalar(gar);
            gar.store.nudge(name, idx, -2.0 * eps);
            let down = scalar(gar);
            gar.store.nudge(name, idx, eps);
            let numeric = (up - down) / (2.0 * eps);
            let rel = crate::tensor::gradcheck::rel_err(analytic, numeric);
            assert!(
                rel < 1e-4,
                "{name}[{idx}]: analytic {analytic}, numeric {numeric}, rel {rel}"
            );
        }
    }

    /// Parameter names split by whether they feed the stop-gradient teacher.
    /// Finite differences of any objective containing the distillation term
    /// see the teacher path; the analytic gradients intentionally do not, so
    /// teacher-side names are only probed with `lambda_distill = 0`.
    fn split_by_teacher_path(gar: &Gar<f64>) -> (Vec<String>, Vec<String>) {
        gar.store
            .names()
            .map(String::from)
            .partition(|n| n.starts_with("rgb.") || n.starts_with("ratio."))
    }

    #[test]
    fn step_gradients_match_finite_differences_of_the_batch_loss() {
        // The two-phase step must equal d(total)/d(theta); probing through
        // the loss value exercises triplet seeding and distillation shares.
        let mut cfg = tiny_cfg();
        cfg.channels = vec![2, 3];
        cfg.clip_len = 4;
        let (clips, labels) = batch_of_clips(&cfg, 300);

        let mut gar = Gar::<f64>::new(cfg.clone(), 29).unwrap();
        let (grads, _) = gar.step_grads(&clips, &labels).unwrap();
        let (_, student) = split_by_teacher_path(&gar);
        probe_against_fd(&mut gar, &grads, &student, 8, |g| {
            g.step_grads(&clips, &labels).unwrap().1.total
        });

        // Teacher-side parameters, with the distillation share zeroed.
        cfg.lambda_f = 0.5;
        cfg.lambda_s = 0.5;
        cfg.lambda_distill = 0.0;
        let mut gar = Gar::<f64>::new(cfg, 29).unwrap();
        let (grads, _) = gar.step_grads(&clips, &labels).unwrap();
        let (teacher, _) = split_by_teacher_path(&gar);
        probe_against_fd(&mut gar, &grads, &teacher, 6, |g| {
            g.step_grads(&clips, &labels).unwrap().1.total
        });
    }

    #[test]
    fn forward_check_scalar_matches_its_gradients() {
        let sil = random_masks(5, 16, 41);
        let rgb = random_rgb(5, 16, 42);
        let track = random_track(5, 43);

        let mut cfg = tiny_cfg();
        let mut gar = Gar::<f64>::new(cfg.clone(), 37).unwrap();
        let grads = gar.forward_check_grads(&sil, &rgb, &track, 7).unwrap();
        let (_, student) = split_by_teacher_path(&gar);
        probe_against_fd(&mut gar, &grads, &student, 6, |g| {
            g.forward_check_scalar(&sil, &rgb, &track, 7).unwrap()
        });

        cfg.lambda_f = 0.5;
        cfg.lambda_s = 0.5;
        cfg.lambda_distill = 0.0;
        let mut gar = Gar::<f64>::new(cfg, 37).unwrap();
        let grads = gar.forward_check_grads(&sil, &rgb, &track, 7).unwrap();
        let (teacher, _) = split_by_teacher_path(&gar);
        probe_against_fd(&mut gar, &grads, &teacher, 6, |g| {
            g.forward_check_scalar(&sil, &rgb, &track, 7).unwrap()
        });

        // Misaligned inputs are rejected up front.
        let gar = Gar::<f64>::new(tiny_cfg(), 37).unwrap();
        assert!(matches!(
            gar.forward_dual(&sil, &random_rgb(4, 16, 44), &track),
            Err(GarError::TemporalMisalignment { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_embedding_contracts_hold() {
        let dir = tempfile::tempdir().unwrap();
        let cc = CorpusConfig::new(dir.path().to_path_buf());
        let manifest = generate_corpus(&cc, 4, 2, 99).unwrap();

        let cfg = GarConfig {
            n_blocks: 2,
            channels: vec![4, 8],
            embedding_dim: 8,
            k_clips: 2,
            steps: 3,
            milestones: vec![],
            ..GarConfig::default()
        };
        let (gar, t1) = train_gar(&manifest, dir.path(), cfg.clone(), 5).unwrap();
        let (_, t2) = train_gar(&manifest, dir.path(), cfg.clone(), 5).unwrap();
        assert_eq!(t1.total.len(), 3);
        assert!(t1.total.iter().all(|l| l.is_finite()));
        assert_eq!(t1.total, t2.total);
        assert_eq!(t1.distill, t2.distill);

        // Held-out sequence: embedding is deterministic, d-dimensional for
        // any length, and loop-padding is flagged below one clip.
        let entry = manifest.entries_for_split(Split::Test).next().unwrap();
        let sil = load_silhouette_pack(&dir.path().join(&entry.file)).unwrap();
        let (norm, track) = normalize(&sil, (64, 64)).unwrap();
        let e1 = gar.embed(&norm, &track).unwrap();
        let e2 = gar.embed(&norm, &track).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.vector.len(), 8);
        assert!(!e1.loop_padded);

        let short = SilhouetteSequence::new(64, 64, norm.frames()[..20].to_vec());
        let short_track = RatioTrack {
            rho: track.rho[..20].to_vec(),
        };
        let es = gar.embed(&short, &short_track).unwrap();
        assert!(es.loop_padded);
        assert_eq!(es.vector.len(), 8);

        // The gate really listens to the ratio track.
        let mut rev = track.clone();
        rev.rho.reverse();
        let er = gar.embed(&norm, &rev).unwrap();
        assert_ne!(e1.vector, er.vector);

        // Inference checkpoint: silhouette + ratio subset reproduces the
        // embedding bit for bit; a wrong architecture is rejected.
        let mut buf = Vec::new();
        gar.inference_store().save_checkpoint(&mut buf).unwrap();
        let loaded = ParameterStore::<f32>::from_checkpoint(&buf).unwrap();
        assert!(loaded.names().all(is_inference_param));
        let inf = Gar::for_inference(cfg.clone(), loaded).unwrap();
        assert_eq!(inf.embed(&norm, &track).unwrap(), e1);
        let bad = Gar::for_inference(
            GarConfig::default(),
            ParameterStore::<f32>::from_checkpoint(&buf).unwrap(),
        );
        assert!(matches!(bad, Err(GarError::BadCheckpoint(_))));

        // Dual forward needs the training store.
        assert!(matches!(
            inf.leaves(false, true),
            Err(GarError::BadCheckpoint(_))
        ));
    }
}
