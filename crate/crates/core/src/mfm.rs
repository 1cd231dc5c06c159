//! Masked feature modelling: replace a fraction of each frame's object
//! features with a shared learnable embedding, run the graph-attention
//! block and a scoring head over the corrupted video, and train everything
//! to recover the video's visual-token target.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ckpt::Checkpoint;
use crate::dataio::VideoFeatures;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::gat::{self, GatBlockParams, GatVars};
use crate::metrics::{EpochRecord, MetricsLog};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport};
use crate::numerics::{Matrix, Parameter, Real, Tape, Var};
use crate::opt::{Adam, StepSchedule};
use crate::seeding::{fnv1a, stream_rng, stream_seed};
use crate::tokenizer::{tokenize_video, Codebook, PatchEmbeddings, TokenTarget};

/// Checkpoint prefix of the pretrained block's tensors.
pub const PRETRAIN_BLOCK_PREFIX: &str = "gat/omega_t";

/// Which nonlinearity the scoring head applies, and with it which loss the
/// pretraining objective uses (sigmoid → mean binary cross-entropy,
/// softmax → categorical cross-entropy against the normalized target).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Sigmoid,
    Softmax,
}

/// The affine map from the block's output to vocabulary scores.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    /// F x L.
    pub w_fc: Parameter,
    /// 1 x L.
    pub b_fc: Parameter,
    pub kind: HeadKind,
}

impl ScoreHead {
    pub fn init(f: usize, l: usize, seed: u64, kind: HeadKind) -> Result<Self> {
        if f == 0 || l == 0 {
            return Err(Error::InvalidArgument {
                op: "ScoreHead::init",
                msg: format!("dimensions must be >= 1, got F={f}, L={l}"),
            });
        }
        let a = (6.0 / (f + l) as Real).sqrt();
        let mut rng = stream_rng(seed, "score-head", &[]);
        Ok(ScoreHead {
            w_fc: Parameter::new("W_fc", Matrix::uniform(f, l, -a, a, &mut rng)),
            b_fc: Parameter::new("b_fc", Matrix::zeros(1, l)),
            kind,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.w_fc.value.cols()
    }
}

/// The shared learnable replacement vector for masked object features.
/// Every masked position in every frame and video is the same `p`, and its
/// gradient is the sum over all those positions.
#[derive(Debug, Clone)]
pub struct MaskEmbedding {
    /// 1 x F.
    pub p: Parameter,
}

impl MaskEmbedding {
    /// Start at zero: the embedding is learned, and zero keeps the initial
    /// corruption neutral.
    pub fn zeros(f: usize) -> Self {
        MaskEmbedding {
            p: Parameter::new("p", Matrix::zeros(1, f)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaskingConfig {
    /// Fraction of objects masked per frame.
    pub gamma: Real,
    pub seed: u64,
}

impl MaskingConfig {
    pub fn new(gamma: Real, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument {
                op: "MaskingConfig::new",
                msg: format!("gamma must lie in [0, 1], got {gamma}"),
            });
        }
        Ok(MaskingConfig { gamma, seed })
    }
}

/// Number of masked objects per frame: floor(gamma * K). The tiny epsilon
/// keeps exact fractions exact — 0.3 * 10 must mask 3, not 2, even though
/// the product rounds to 2.999… in floating point.
pub fn masked_per_frame(gamma: Real, k: usize) -> usize {
    (gamma * k as Real + 1e-9).floor() as usize
}

/// Draw each frame's masked-object set for one (video, epoch). Sets are
/// uniformly random without replacement, sorted for presentation, and a
/// pure function of (seed, video id, epoch).
pub fn draw_masks(
    cfg: &MaskingConfig,
    video_id: &str,
    epoch: usize,
    n: usize,
    k: usize,
) -> Vec<Vec<usize>> {
    let m = masked_per_frame(cfg.gamma, k);
    let mut rng = stream_rng(
        cfg.seed,
        "mask",
        &[fnv1a(video_id.as_bytes()), epoch as u64],
    );
    (0..n)
        .map(|_| {
            let mut set = rand::seq::index::sample(&mut rng, k, m).into_vec();
            set.sort_unstable();
            set
        })
        .collect()
}

/// Replace each frame's masked rows of `x` ((n*k) x F, frame-major) with
/// the embedding. Unmasked rows pass through untouched. Returns the masked
/// copy and the per-frame mask sets.
pub fn mask_features(
    x: &Matrix,
    n: usize,
    k: usize,
    cfg: &MaskingConfig,
    p: &MaskEmbedding,
    video_id: &str,
    epoch: usize,
) -> Result<(Matrix, Vec<Vec<usize>>)> {
    if x.rows() != n * k {
        return Err(Error::DimMismatch {
            op: "mask_features",
            lhs: format!("{} feature rows", x.rows()),
            rhs: format!("n={n} frames x k={k} objects"),
        });
    }
    if p.p.value.cols() != x.cols() || p.p.value.rows() != 1 {
        return Err(Error::DimMismatch {
            op: "mask_features",
            lhs: format!("embedding {}x{}", p.p.value.rows(), p.p.value.cols()),
            rhs: format!("1x{}", x.cols()),
        });
    }
    let masks = draw_masks(cfg, video_id, epoch, n, k);
    let mut masked = x.clone();
    for (frame, set) in masks.iter().enumerate() {
        for &j in set {
            masked
                .row_mut(frame * k + j)
                .copy_from_slice(p.p.value.row(0));
        }
    }
    Ok((masked, masks))
}

/// Everything pretraining learns: the block, the scoring head, and the mask
/// embedding.
#[derive(Debug, Clone)]
pub struct MfmModel {
    pub gat: GatBlockParams,
    pub head: ScoreHead,
    pub mask: MaskEmbedding,
}

impl MfmModel {
    pub fn init(f: usize, f_a: usize, l: usize, seed: u64, kind: HeadKind) -> Result<Self> {
        Ok(MfmModel {
            gat: gat::init_params(f, f_a, crate::seeding::stream_seed(seed, "gat", &[]))?,
            head: ScoreHead::init(f, l, seed, kind)?,
            mask: MaskEmbedding::zeros(f),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.gat.feature_dim()
    }

    /// All trainable parameters in fixed order: block (U, V, W1, W2, w_p),
    /// head (W_fc, b_fc), mask embedding p.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.gat.params_mut().into_iter().collect();
        out.push(&mut self.head.w_fc);
        out.push(&mut self.head.b_fc);
        out.push(&mut self.mask.p);
        out
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.gat.params().into_iter().collect();
        out.push(&self.head.w_fc);
        out.push(&self.head.b_fc);
        out.push(&self.mask.p);
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for p in self.gat.params() {
            ckpt.insert_param(PRETRAIN_BLOCK_PREFIX, p);
        }
        ckpt.insert_param("head", &self.head.w_fc);
        ckpt.insert_param("head", &self.head.b_fc);
        ckpt.insert_param("mask", &self.mask.p);
        ckpt.insert_scalar("meta/feature_dim", self.feature_dim() as Real);
        ckpt.insert_scalar("meta/attention_dim", self.gat.attention_dim() as Real);
        ckpt.insert_scalar("meta/vocab_len", self.head.vocab_len() as Real);
        ckpt.insert_scalar(
            "meta/head_kind",
            match self.head.kind {
                HeadKind::Sigmoid => 0.0,
                HeadKind::Softmax => 1.0,
            },
        );
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let f = ckpt.get_scalar("meta/feature_dim")? as usize;
        let f_a = ckpt.get_scalar("meta/attention_dim")? as usize;
        let l = ckpt.get_scalar("meta/vocab_len")? as usize;
        let tag = ckpt.get_scalar("meta/head_kind")?;
        let kind = if tag == 0.0 {
            HeadKind::Sigmoid
        } else if tag == 1.0 {
            HeadKind::Softmax
        } else {
            return Err(Error::InvalidArgument {
                op: "MfmModel::from_checkpoint",
                msg: format!("unknown head kind tag {tag}"),
            });
        };
        let mut model = MfmModel::init(f, f_a, l, 0, kind)?;
        for p in model.gat.params_mut() {
            ckpt.load_param(PRETRAIN_BLOCK_PREFIX, p)?;
        }
        ckpt.load_param("head", &mut model.head.w_fc)?;
        ckpt.load_param("head", &mut model.head.b_fc)?;
        ckpt.load_param("mask", &mut model.mask.p)?;
        Ok(model)
    }
}

/// Score a (possibly masked) video: one node set over all N·K objects →
/// block → affine head → nonlinearity. Returns the 1 x L score vector g.
pub fn mfm_forward(masked: &Matrix, gat: &GatBlockParams, head: &ScoreHead) -> Result<Matrix> {
    let latent = gat::gat_forward(gat, masked)?;
    let logits = latent.matmul(&head.w_fc.value)?.add(&head.b_fc.value)?;
    Ok(match head.kind {
        HeadKind::Sigmoid => logits.sigmoid(),
        HeadKind::Softmax => logits.row_softmax(),
    })
}

/// Pretraining loss from pre-activation logits, in the numerically stable
/// form. Sigmoid head: mean binary cross-entropy over the L vocabulary
/// entries against the binary target. Softmax head: categorical
/// cross-entropy against the count-normalized target v/r.
pub fn mfm_loss(logits: &Matrix, target: &TokenTarget, kind: HeadKind) -> Result<Real> {
    let l = target.binary.len();
    if logits.shape() != (1, l) {
        return Err(Error::DimMismatch {
            op: "mfm_loss",
            lhs: format!("logits {}x{}", logits.rows(), logits.cols()),
            rhs: format!("1x{l} target"),
        });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            what: "pretraining logits".into(),
        });
    }
    let z = logits.data();
    Ok(match kind {
        HeadKind::Sigmoid => {
            let t = target.binary_reals();
            z.iter()
                .zip(&t)
                .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .sum::<Real>()
                / l as Real
        }
        HeadKind::Softmax => {
            let q = target.distribution();
            let max = z.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<Real>().ln();
            lse - q.iter().zip(z).map(|(&q, &z)| q * z).sum::<Real>()
        }
    })
}

/// Tape handles for the scoring head.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_fc: Var,
    pub b_fc: Var,
}

pub fn watch_head(tape: &mut Tape, head: &ScoreHead) -> HeadVars {
    HeadVars {
        w_fc: tape.param(head.w_fc.value.clone()),
        b_fc: tape.param(head.b_fc.value.clone()),
    }
}

/// Traced logits: block output → affine head.
pub fn mfm_logits_traced(
    tape: &mut Tape,
    gat_vars: &GatVars,
    head_vars: &HeadVars,
    nodes: Var,
) -> Result<Var> {
    let latent = gat::gat_forward_traced(tape, gat_vars, nodes)?;
    let scores = tape.matmul(latent, head_vars.w_fc)?;
    tape.add(scores, head_vars.b_fc)
}

/// Fused loss on the tape for one video's logits.
pub fn mfm_loss_traced(
    tape: &mut Tape,
    logits: Var,
    target: &TokenTarget,
    kind: HeadKind,
) -> Result<Var> {
    match kind {
        HeadKind::Sigmoid => tape.bce_with_logits_mean(logits, &target.binary_reals()),
        HeadKind::Softmax => tape.ce_with_logits(logits, &target.distribution()),
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub path: PathBuf,
    /// Save every this many epochs (0 = only the final/abort checkpoint).
    pub every: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub schedule: StepSchedule,
    pub batch_size: usize,
    pub top_r: usize,
    pub head: HeadKind,
    pub seed: u64,
    pub checkpoint: Option<CheckpointSink>,
    /// F_a of the block; defaults to F (taken from the corpus).
    pub attention_dim: Option<usize>,
}

impl PretrainConfig {
    pub fn new(seed: u64) -> Self {
        PretrainConfig {
            epochs: 200,
            schedule: StepSchedule::new(1e-3, vec![50, 100], 0.1).expect("default schedule"),
            batch_size: 16,
            top_r: 50,
            head: HeadKind::Sigmoid,
            seed,
            checkpoint: None,
            attention_dim: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.top_r == 0 {
            return Err(Error::InvalidArgument {
                op: "pretrain",
                msg: format!(
                    "epochs, batch size, and top-r must be >= 1, got {}, {}, {}",
                    self.epochs, self.batch_size, self.top_r
                ),
            });
        }
        self.schedule.check_horizon(self.epochs)
    }
}

/// Final model plus the per-epoch loss curve.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: MfmModel,
    pub log: MetricsLog,
}

/// Per-video gradient contribution, in the model's parameter order.
struct VideoGrad {
    loss: Real,
    grads: Vec<Matrix>,
}

/// One video's forward/backward on a fresh tape.
fn video_backward(
    model: &MfmModel,
    video: &VideoFeatures,
    masks: &[Vec<usize>],
    target: &TokenTarget,
) -> Result<VideoGrad> {
    let mut tape = Tape::new();
    let gat_vars = gat::watch(&mut tape, &model.gat);
    let head_vars = watch_head(&mut tape, &model.head);
    let p_var = tape.param(model.mask.p.value.clone());

    let x = tape.constant(video.objects.clone());
    let rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(frame, set)| set.iter().map(move |&j| frame * video.k + j))
        .collect();
    let nodes = tape.mask_rows(x, p_var, &rows)?;
    let logits = mfm_logits_traced(&mut tape, &gat_vars, &head_vars, nodes)?;
    let loss = mfm_loss_traced(&mut tape, logits, target, model.head.kind)?;
    let loss_val = tape.scalar(loss)?;
    if !loss_val.is_finite() {
        return Err(Error::NonFinite {
            what: format!("loss on video {}", video.id),
        });
    }
    let grads = tape.backward(loss)?;
    let vars: Vec<Var> = gat::var_list(&gat_vars)
        .into_iter()
        .chain([head_vars.w_fc, head_vars.b_fc, p_var])
        .collect();
    let grads = model
        .params()
        .iter()
        .zip(&vars)
        .map(|(p, &v)| grads.wrt_or_zeros(v, p.value.rows(), p.value.cols()))
        .collect();
    Ok(VideoGrad {
        loss: loss_val,
        grads,
    })
}

/// Unsupervised pretraining over a corpus of videos with patch embeddings.
/// Targets are tokenized once from the unmasked patches; masks are redrawn
/// every epoch; batch gradients reduce in corpus order, so the result is
/// independent of the execution strategy.
pub fn pretrain(
    videos: &[VideoFeatures],
    codebook: &Codebook,
    cfg: &PretrainConfig,
    mask_cfg: &MaskingConfig,
    exec: Exec,
) -> Result<TrainState> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::EmptyCorpus("pretraining corpus".into()));
    }
    let f = videos[0].f;
    for v in videos {
        if v.patches.is_none() {
            return Err(Error::InvalidArgument {
                op: "pretrain",
                msg: format!("video {} has no patch embeddings to tokenize", v.id),
            });
        }
        if v.f != f {
            return Err(Error::DimMismatch {
                op: "pretrain",
                lhs: format!("video {} feature dim {}", v.id, v.f),
                rhs: format!("corpus feature dim {f}"),
            });
        }
    }

    // Token targets from the unmasked patches; fixed for the whole run.
    let targets: Vec<TokenTarget> = exec::map(exec, videos, |v| {
        tokenize_video(
            v.patches.as_ref().expect("checked above"),
            codebook,
            cfg.top_r,
        )
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut model = MfmModel::init(
        f,
        cfg.attention_dim.unwrap_or(f),
        codebook.len(),
        cfg.seed,
        cfg.head,
    )?;
    let mut adam = Adam::new(&model.params());
    let mut log = MetricsLog::new();
    let mut last_good = model.to_checkpoint();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, "shuffle", &[epoch as u64]));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = exec::map(exec, batch, |&vi| {
                let masks = draw_masks(mask_cfg, &videos[vi].id, epoch, videos[vi].n, videos[vi].k);
                video_backward(&model, &videos[vi], &masks, &targets[vi])
            });

            // Deterministic reduction: accumulate in batch order.
            let mut acc: Option<Vec<Matrix>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let vg = r.map_err(|e| abort(&last_good, cfg, epoch, e))?;
                batch_loss += vg.loss;
                match &mut acc {
                    None => acc = Some(vg.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&vg.grads) {
                            *a = a.add(g).expect("uniform gradient shapes");
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as Real;
            let acc = acc.expect("batches are nonempty");
            let mut params = model.params_mut();
            for (p, g) in params.iter_mut().zip(acc) {
                p.grad = g.scale(scale);
            }
            adam.step(&mut params, lr);
            epoch_loss += batch_loss;
        }

        log.push(EpochRecord {
            epoch,
            lr,
            loss: epoch_loss / videos.len() as Real,
            top1: None,
        })?;
        last_good = model.to_checkpoint();
        if let Some(sink) = &cfg.checkpoint {
            if sink.every > 0 && epoch % sink.every == 0 {
                last_good.save(&sink.path)?;
            }
        }
    }

    if let Some(sink) = &cfg.checkpoint {
        last_good.save(&sink.path)?;
    }
    Ok(TrainState { model, log })
}

/// Dimensions of the synthetic instance used to verify the gradients of
/// the full pretraining objective.
#[derive(Debug, Clone)]
pub struct GradCheckDims {
    pub n: usize,
    pub k: usize,
    pub f: usize,
    pub f_a: usize,
    pub l: usize,
    pub q: usize,
    pub d: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        GradCheckDims {
            n: 2,
            k: 3,
            f: 5,
            f_a: 5,
            l: 7,
            q: 2,
            d: 4,
        }
    }
}

/// Verify the analytic gradients of the full masked-reconstruction loss —
/// block, head, and the mask embedding — against finite differences on a
/// randomly generated instance. One report per parameter.
pub fn check_gradients(
    dims: &GradCheckDims,
    kind: HeadKind,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let codebook =
        Codebook::generate(dims.l, dims.d, stream_seed(seed, "gradcheck-codebook", &[]))?;
    let mut rng = stream_rng(seed, "gradcheck", &[]);
    let total = dims.n * dims.k * dims.q * dims.d;
    let data: Vec<Real> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let patches = PatchEmbeddings::new(dims.n, dims.k, dims.q, dims.d, data)?;
    let target = tokenize_video(&patches, &codebook, (dims.l / 2).max(1))?;
    let x = Matrix::uniform(dims.n * dims.k, dims.f, -1.0, 1.0, &mut rng);

    let model = MfmModel::init(dims.f, dims.f_a, dims.l, seed, kind)?;
    let mask_cfg = MaskingConfig::new(0.4, seed)?;
    let masks = draw_masks(&mask_cfg, "gradcheck", 1, dims.n, dims.k);
    let rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(frame, set)| set.iter().map(move |&j| frame * dims.k + j))
        .collect();

    let params: Vec<Parameter> = model.params().into_iter().cloned().collect();
    grad_check(
        |tape, vars| {
            let gv = GatVars {
                u: vars[0],
                v: vars[1],
                w1: vars[2],
                w2: vars[3],
                w_p: vars[4],
            };
            let hv = HeadVars {
                w_fc: vars[5],
                b_fc: vars[6],
            };
            let x_var = tape.constant(x.clone());
            let nodes = tape.mask_rows(x_var, vars[7], &rows)?;
            let logits = mfm_logits_traced(tape, &gv, &hv, nodes)?;
            mfm_loss_traced(tape, logits, &target, kind)
        },
        &params,
        &GradCheckConfig::default(),
    )
}

/// On a non-finite loss, persist the last completed epoch's parameters (if
/// a sink is configured) and surface the numeric failure.
fn abort(last_good: &Checkpoint, cfg: &PretrainConfig, epoch: usize, cause: Error) -> Error {
    if let Some(sink) = &cfg.checkpoint {
        // Best effort: the numeric failure is the error that matters.
        let _ = last_good.save(&sink.path);
    }
    match cause {
        Error::NonFinite { what } => Error::NonFinite {
            what: format!("{what} (epoch {epoch}; last good checkpoint saved)"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataio::{synth_pretrain_corpus, PretrainSpec};
    use crate::numerics::sigmoid_scalar;

    #[test]
    fn mask_counts_follow_floor() {
        assert_eq!(masked_per_frame(0.4, 50), 20);
        assert_eq!(masked_per_frame(0.3, 10), 3);
        assert_eq!(masked_per_frame(0.0, 50), 0);
        assert_eq!(masked_per_frame(1.0, 7), 7);
        assert_eq!(masked_per_frame(0.5, 3), 1);
    }

    fn random_features(n: usize, k: usize, f: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n * k, f, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gamma_zero_is_identity_and_gamma_one_is_all_p() {
        let x = random_features(2, 3, 4, 1);
        let p = MaskEmbedding {
            p: Parameter::new("p", Matrix::filled(1, 4, 9.5)),
        };

        let cfg = MaskingConfig::new(0.0, 7).unwrap();
        let (masked, masks) = mask_features(&x, 2, 3, &cfg, &p, "vid", 1).unwrap();
        assert_eq!(masked.data(), x.data());
        assert!(masks.iter().all(|m| m.is_empty()));

        let cfg = MaskingConfig::new(1.0, 7).unwrap();
        let (masked, masks) = mask_features(&x, 2, 3, &cfg, &p, "vid", 1).unwrap();
        assert!(masked.data().iter().all(|&v| v == 9.5));
        assert!(masks.iter().all(|m| m == &[0, 1, 2]));
    }

    #[test]
    fn partial_masking_touches_exactly_the_mask_sets() {
        let x = random_features(3, 5, 4, 2);
        let p = MaskEmbedding {
            p: Parameter::new("p", Matrix::filled(1, 4, -3.25)),
        };
        let cfg = MaskingConfig::new(0.4, 11).unwrap();
        let (masked, masks) = mask_features(&x, 3, 5, &cfg, &p, "vid", 3).unwrap();
        for (frame, set) in masks.iter().enumerate() {
            assert_eq!(set.len(), 2); // floor(0.4 * 5)
            assert!(set.windows(2).all(|w| w[0] < w[1]), "sorted and distinct");
            for j in 0..5 {
                let row = masked.row(frame * 5 + j);
                if set.contains(&j) {
                    assert!(row.iter().all(|&v| v == -3.25));
                } else {
                    assert_eq!(row, x.row(frame * 5 + j), "unmasked row changed");
                }
            }
        }
    }

    #[test]
    fn masks_are_deterministic_per_video_and_epoch() {
        let cfg = MaskingConfig::new(0.5, 13).unwrap();
        let a = draw_masks(&cfg, "vid_a", 4, 3, 6);
        assert_eq!(a, draw_masks(&cfg, "vid_a", 4, 3, 6));
        assert_ne!(a, draw_masks(&cfg, "vid_b", 4, 3, 6));
        let across_epochs: Vec<_> = (1..=5)
            .map(|e| draw_masks(&cfg, "vid_a", e, 3, 6))
            .collect();
        assert!(
            across_epochs.windows(2).any(|w| w[0] != w[1]),
            "masks never varied across epochs"
        );
        let other_seed = MaskingConfig::new(0.5, 14).unwrap();
        assert_ne!(a, draw_masks(&other_seed, "vid_a", 4, 3, 6));
    }

    #[test]
    fn forward_with_zero_head_scores_half() {
        let gat = gat::init_params(4, 4, 3).unwrap();
        let head = ScoreHead {
            w_fc: Parameter::new("W_fc", Matrix::zeros(4, 6)),
            b_fc: Parameter::new("b_fc", Matrix::zeros(1, 6)),
            kind: HeadKind::Sigmoid,
        };
        let g = mfm_forward(&random_features(2, 2, 4, 4), &gat, &head).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_head_normalizes() {
        let gat = gat::init_params(4, 4, 5).unwrap();
        let head = ScoreHead::init(4, 6, 6, HeadKind::Softmax).unwrap();
        let g = mfm_forward(&random_features(2, 2, 4, 7), &gat, &head).unwrap();
        let sum: Real = g.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_matches_block_plus_affine_composition() {
        let gat = gat::init_params(4, 4, 8).unwrap();
        let head = ScoreHead::init(4, 5, 9, HeadKind::Sigmoid).unwrap();
        let x = random_features(2, 3, 4, 10);
        let g = mfm_forward(&x, &gat, &head).unwrap();

        let latent = gat::gat_forward(&gat, &x).unwrap();
        for i in 0..5 {
            let z: Real = (0..4)
                .map(|c| latent.get(0, c) * head.w_fc.value.get(c, i))
                .sum::<Real>()
                + head.b_fc.value.get(0, i);
            assert!((g.get(0, i) - sigmoid_scalar(z)).abs() < 1e-12);
        }
    }

    fn target_of(binary: Vec<u8>, r: usize) -> TokenTarget {
        let counts = binary.iter().map(|&b| b as u32 * 2).collect();
        TokenTarget { counts, binary, r }
    }

    #[test]
    fn loss_at_zero_logits_is_log_two() {
        let logits = Matrix::zeros(1, 6);
        for binary in [vec![0, 0, 0, 0, 0, 0], vec![1, 1, 0, 0, 1, 0]] {
            let t = target_of(binary, 3);
            let loss = mfm_loss(&logits, &t, HeadKind::Sigmoid).unwrap();
            assert!((loss - (2.0 as Real).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_vanishes_when_scores_match_an_all_zero_target() {
        let logits = Matrix::filled(1, 5, -50.0);
        let t = target_of(vec![0; 5], 1);
        let loss = mfm_loss(&logits, &t, HeadKind::Sigmoid).unwrap();
        assert!((0.0..1e-20).contains(&loss), "loss {loss}");
    }

    #[test]
    fn loss_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..200 {
            let logits = Matrix::from_fn(1, 7, |_, _| rng.gen_range(-4.0..4.0));
            let binary: Vec<u8> = (0..7).map(|_| rng.gen_range(0..2) as u8).collect();
            let t = target_of(binary.clone(), 3);
            let got = mfm_loss(&logits, &t, HeadKind::Sigmoid).unwrap();
            let oracle = -(0..7)
                .map(|i| {
                    let g = 1.0 / (1.0 + (-logits.get(0, i)).exp());
                    let v = binary[i] as Real;
                    v * g.ln() + (1.0 - v) * (1.0 - g).ln()
                })
                .sum::<Real>()
                / 7.0;
            assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn softmax_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = Matrix::from_fn(1, 5, |_, _| rng.gen_range(-3.0..3.0));
        let t = target_of(vec![1, 0, 1, 0, 0], 2);
        let got = mfm_loss(&logits, &t, HeadKind::Softmax).unwrap();
        let z: Vec<Real> = logits.data().to_vec();
        let sum_exp: Real = z.iter().map(|&v| v.exp()).sum();
        let oracle = -(0..5)
            .map(|i| t.distribution()[i] * (z[i].exp() / sum_exp).ln())
            .sum::<Real>();
        assert!((got - oracle).abs() < 1e-10);
    }

    #[test]
    fn loss_rejects_non_finite_logits() {
        let mut logits = Matrix::zeros(1, 3);
        logits.set(0, 1, Real::NAN);
        let t = target_of(vec![1, 0, 0], 1);
        assert!(matches!(
            mfm_loss(&logits, &t, HeadKind::Sigmoid),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn full_objective_passes_gradient_check_including_p() {
        let dims = GradCheckDims {
            n: 2,
            k: 3,
            f: 4,
            f_a: 4,
            l: 5,
            q: 2,
            d: 3,
        };
        for kind in [HeadKind::Sigmoid, HeadKind::Softmax] {
            let reports = check_gradients(&dims, kind, 22).unwrap();
            let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
            assert_eq!(names, ["U", "V", "W1", "W2", "w_p", "W_fc", "b_fc", "p"]);
            for r in &reports {
                assert!(
                    r.pass,
                    "{:?} {}: max rel err {}",
                    kind, r.name, r.max_rel_err
                );
            }
        }
    }

    fn tiny_corpus(videos: usize, seed: u64) -> (Vec<VideoFeatures>, Codebook) {
        let spec = PretrainSpec::new(videos, 2, 4, 12, 3, 8, 16, seed);
        synth_pretrain_corpus(&spec).unwrap()
    }

    fn tiny_config(epochs: usize, seed: u64) -> PretrainConfig {
        let mut cfg = PretrainConfig::new(seed);
        cfg.epochs = epochs;
        cfg.schedule = StepSchedule::new(1e-3, vec![], 0.1).unwrap();
        cfg.batch_size = 4;
        cfg.top_r = 4;
        cfg
    }

    #[test]
    fn overfits_a_single_video() {
        let (videos, codebook) = tiny_corpus(1, 30);
        let mut cfg = tiny_config(200, 31);
        cfg.batch_size = 1;
        let mask_cfg = MaskingConfig::new(0.25, 32).unwrap();
        let state = pretrain(&videos, &codebook, &cfg, &mask_cfg, Exec::Seq).unwrap();
        let first = state.log.records[0].loss;
        let last = state.log.last().unwrap().loss;
        assert!(
            last < 0.5 * first,
            "loss did not halve: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic_and_exec_independent() {
        let (videos, codebook) = tiny_corpus(6, 33);
        let cfg = tiny_config(3, 34);
        let mask_cfg = MaskingConfig::new(0.5, 35).unwrap();
        let a = pretrain(&videos, &codebook, &cfg, &mask_cfg, Exec::Seq).unwrap();
        let b = pretrain(&videos, &codebook, &cfg, &mask_cfg, Exec::Seq).unwrap();
        assert_eq!(a.log, b.log);
        let c = pretrain(&videos, &codebook, &cfg, &mask_cfg, Exec::Par).unwrap();
        assert_eq!(a.log, c.log, "parallel run diverged from sequential");
        for (pa, pc) in a.model.params().iter().zip(c.model.params().iter()) {
            assert_eq!(pa.value.data(), pc.value.data(), "{}", pa.name);
        }
    }

    #[test]
    fn logged_lr_follows_the_schedule() {
        let (videos, codebook) = tiny_corpus(2, 36);
        let mut cfg = tiny_config(4, 37);
        cfg.schedule = StepSchedule::new(1e-3, vec![2, 4], 0.1).unwrap();
        let mask_cfg = MaskingConfig::new(0.25, 38).unwrap();
        let state = pretrain(&videos, &codebook, &cfg, &mask_cfg, Exec::Seq).unwrap();
        let lrs: Vec<Real> = state.log.records.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3 * 0.1, 1e-3 * 0.1, 1e-3 * 0.1 * 0.1]);
    }

    #[test]
    fn checkpoints_are_written_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mfmk");
        let (videos, codebook) = tiny_corpus(2, 39);
        let mut cfg = tiny_config(2, 40);
        cfg.checkpoint = Some(CheckpointSink {
            path: path.clone(),
            every: 0,
        });
        let mask_cfg = MaskingConfig::new(0.25, 41).unwrap();
        let state = pretrain(&videos, &codebook, &cfg, &mask_cfg, Exec::Seq).unwrap();
        let reloaded = MfmModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        for (a, b) in state.model.params().iter().zip(reloaded.params().iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        assert_eq!(reloaded.head.kind, HeadKind::Sigmoid);
    }

    #[test]
    fn diverging_run_aborts_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last_good.mfmk");
        let (videos, codebook) = tiny_corpus(2, 42);
        let mut cfg = tiny_config(50, 43);
        // After one step of this size the attention scores overflow to
        // infinity and the pooling softmax turns NaN.
        cfg.schedule = StepSchedule::new(1e200, vec![], 0.1).unwrap();
        cfg.checkpoint = Some(CheckpointSink {
            path: path.clone(),
            every: 0,
        });
        let mask_cfg = MaskingConfig::new(0.25, 44).unwrap();
        let err = pretrain(&videos, &codebook, &cfg, &mask_cfg, Exec::Seq).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        // The sink holds a loadable model from before the blow-up.
        let ckpt = Checkpoint::load(&path).unwrap();
        assert!(MfmModel::from_checkpoint(&ckpt).is_ok());
    }

    #[test]
    fn pretrain_rejects_missing_patches_and_empty_corpora() {
        let (mut videos, codebook) = tiny_corpus(2, 45);
        videos[1].patches = None;
        let cfg = tiny_config(1, 46);
        let mask_cfg = MaskingConfig::new(0.25, 47).unwrap();
        assert!(pretrain(&videos, &codebook, &cfg, &mask_cfg, Exec::Seq).is_err());
        assert!(matches!(
            pretrain(&[], &codebook, &cfg, &mask_cfg, Exec::Seq),
            Err(Error::EmptyCorpus(_))
        ));
    }
}
