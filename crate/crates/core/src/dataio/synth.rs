//! Synthetic corpora with verifiable structure. A fixed latent structure —
//! a codebook plus a linear token-histogram → feature map — ties patch
//! content to object features, so masked-feature → token prediction is
//! learnable by construction, and labeled corpora built on the same map
//! benefit from pretraining on unlabeled ones.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataio::container::{write_video, VideoFeatures};
use crate::dataio::manifest::{CorpusManifest, ManifestEntry, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::seeding::stream_rng;
use crate::tokenizer::{Codebook, PatchEmbeddings};

/// Default seed of the shared latent structure. Corpora generated with the
/// same structure seed (and l, f) are views of one underlying world, which
/// is what makes pretraining on one transfer to another.
pub const DEFAULT_STRUCT_SEED: u64 = 11;

/// The world behind a corpus: the visual vocabulary and the fixed linear
/// map sending a token histogram to an object feature vector.
#[derive(Debug, Clone)]
pub struct LatentStructure {
    pub codebook: Codebook,
    /// `l x f`; row `t` is the feature-space image of token `t`.
    pub feature_map: Matrix,
}

impl LatentStructure {
    pub fn new(l: usize, d: usize, f: usize, struct_seed: u64) -> Result<Self> {
        if l == 0 || d == 0 || f == 0 {
            return Err(Error::InvalidArgument {
                op: "LatentStructure::new",
                msg: format!("dimensions must be >= 1, got l={l}, d={d}, f={f}"),
            });
        }
        Ok(LatentStructure {
            codebook: Codebook::generate(
                l,
                d,
                crate::seeding::stream_seed(struct_seed, "codebook", &[]),
            )?,
            feature_map: latent_feature_map(l, f, struct_seed),
        })
    }
}

/// The histogram → feature map alone; independent of the codebook so a
/// labeled corpus can share it without fixing a patch dimension.
fn latent_feature_map(l: usize, f: usize, struct_seed: u64) -> Matrix {
    let mut rng = stream_rng(struct_seed, "feature-map", &[]);
    Matrix::gaussian(l, f, 1.0, &mut rng)
}

/// Snap to the on-disk precision so in-memory corpora equal their
/// write → read image bit for bit.
fn snap_f32(m: &mut Matrix) {
    for v in m.data_mut() {
        *v = *v as f32 as Real;
    }
}

#[derive(Debug, Clone)]
pub struct PretrainSpec {
    pub num_videos: usize,
    pub n: usize,
    pub k: usize,
    pub f: usize,
    pub q: usize,
    pub d: usize,
    pub l: usize,
    pub seed: u64,
    /// Codebook entries each video draws its patches from.
    pub topics_per_video: usize,
    /// Norm of the perturbation added to each copied codebook entry.
    pub patch_noise: Real,
    /// Entrywise noise on object features.
    pub feature_noise: Real,
    pub struct_seed: u64,
}

impl PretrainSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_videos: usize,
        n: usize,
        k: usize,
        f: usize,
        q: usize,
        d: usize,
        l: usize,
        seed: u64,
    ) -> Self {
        PretrainSpec {
            num_videos,
            n,
            k,
            f,
            q,
            d,
            l,
            seed,
            topics_per_video: 4,
            patch_noise: 0.1,
            feature_noise: 0.05,
            struct_seed: DEFAULT_STRUCT_SEED,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.num_videos,
            self.n,
            self.k,
            self.f,
            self.q,
            self.d,
            self.l,
            self.topics_per_video,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument {
                op: "synth_pretrain_corpus",
                msg: format!("all counts must be >= 1: {self:?}"),
            });
        }
        if self.patch_noise < 0.0 || self.feature_noise < 0.0 {
            return Err(Error::InvalidArgument {
                op: "synth_pretrain_corpus",
                msg: "noise levels must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// Sample a topic set and mixture weights. The first draws from `rng` must
/// stay in this order; tests reconstruct them to locate each video's topics.
fn draw_topics(
    rng: &mut rand_chacha::ChaCha8Rng,
    l: usize,
    count: usize,
    min_weight: Real,
) -> (Vec<usize>, Vec<Real>) {
    let count = count.min(l);
    let topics: Vec<usize> = rand::seq::index::sample(rng, l, count).into_vec();
    let mut weights: Vec<Real> = (0..count).map(|_| rng.gen_range(min_weight..1.0)).collect();
    let total: Real = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (topics, weights)
}

fn sample_topic(rng: &mut rand_chacha::ChaCha8Rng, topics: &[usize], weights: &[Real]) -> usize {
    let mut u: Real = rng.gen_range(0.0..1.0);
    for (&t, &w) in topics.iter().zip(weights) {
        if u < w {
            return t;
        }
        u -= w;
    }
    *topics.last().expect("topics nonempty")
}

/// Object feature = mean feature-map row of the object's own tokens plus
/// entrywise Gaussian noise.
fn feature_from_tokens(
    tokens: &[usize],
    feature_map: &Matrix,
    noise: Real,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Real> {
    let f = feature_map.cols();
    let mut feat = vec![0.0; f];
    for &t in tokens {
        for (acc, v) in feat.iter_mut().zip(feature_map.row(t)) {
            *acc += v;
        }
    }
    let scale = 1.0 / tokens.len() as Real;
    for v in &mut feat {
        let eps: Real = rng.sample(StandardNormal);
        *v = *v * scale + noise * eps;
    }
    feat
}

fn mean_frames(objects: &Matrix, n: usize, k: usize) -> Matrix {
    Matrix::from_fn(n, objects.cols(), |i, c| {
        (0..k).map(|j| objects.get(i * k + j, c)).sum::<Real>() / k as Real
    })
}

/// Generate `num_videos` unlabeled videos: patches are noisy copies of
/// codebook entries drawn from a per-video topic distribution; object
/// features are the latent map's image of their own token histogram.
pub fn synth_pretrain_corpus(spec: &PretrainSpec) -> Result<(Vec<VideoFeatures>, Codebook)> {
    spec.validate()?;
    let structure = LatentStructure::new(spec.l, spec.d, spec.f, spec.struct_seed)?;
    let patch_entry_noise = spec.patch_noise / (spec.d as Real).sqrt();

    let videos: Result<Vec<VideoFeatures>> = (0..spec.num_videos)
        .map(|v| {
            let mut rng = stream_rng(spec.seed, "pretrain-video", &[v as u64]);
            let (topics, weights) = draw_topics(&mut rng, spec.l, spec.topics_per_video, 0.2);

            let mut patch_data = Vec::with_capacity(spec.n * spec.k * spec.q * spec.d);
            let mut objects = Matrix::zeros(spec.n * spec.k, spec.f);
            for i in 0..spec.n {
                for j in 0..spec.k {
                    let mut tokens = Vec::with_capacity(spec.q);
                    for _ in 0..spec.q {
                        let t = sample_topic(&mut rng, &topics, &weights);
                        tokens.push(t);
                        for &e in structure.codebook.entry(t) {
                            let eps: Real = rng.sample(StandardNormal);
                            patch_data.push(e + patch_entry_noise * eps);
                        }
                    }
                    let feat = feature_from_tokens(
                        &tokens,
                        &structure.feature_map,
                        spec.feature_noise,
                        &mut rng,
                    );
                    objects.row_mut(i * spec.k + j).copy_from_slice(&feat);
                }
            }
            snap_f32(&mut objects);
            let mut frames = mean_frames(&objects, spec.n, spec.k);
            snap_f32(&mut frames);
            let mut patches = PatchEmbeddings::new(spec.n, spec.k, spec.q, spec.d, patch_data)?;
            for v in patches.data_mut() {
                *v = *v as f32 as Real;
            }
            VideoFeatures::new(format!("pre_{v:05}"), spec.n, spec.k, objects)?
                .with_frames(frames)?
                .with_patches(patches)
        })
        .collect();
    Ok((videos?, structure.codebook))
}

#[derive(Debug, Clone)]
pub struct LabeledSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub n: usize,
    pub k: usize,
    pub f: usize,
    pub seed: u64,
    /// Token-histogram length; must match the pretraining corpus for the
    /// latent map to be shared.
    pub l: usize,
    /// Tokens drawn per object (plays the role of the patch count).
    pub tokens_per_object: usize,
    pub topics_per_class: usize,
    pub feature_noise: Real,
    pub struct_seed: u64,
}

impl LabeledSpec {
    pub fn new(
        num_videos: usize,
        num_classes: usize,
        n: usize,
        k: usize,
        f: usize,
        seed: u64,
    ) -> Self {
        LabeledSpec {
            num_videos,
            num_classes,
            n,
            k,
            f,
            seed,
            l: 64,
            tokens_per_object: 4,
            topics_per_class: 3,
            feature_noise: 0.05,
            struct_seed: DEFAULT_STRUCT_SEED,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument {
                op: "synth_labeled_corpus",
                msg: format!("need at least 2 classes, got {}", self.num_classes),
            });
        }
        let dims = [
            self.num_videos,
            self.n,
            self.k,
            self.f,
            self.l,
            self.tokens_per_object,
            self.topics_per_class,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument {
                op: "synth_labeled_corpus",
                msg: format!("all counts must be >= 1: {self:?}"),
            });
        }
        Ok(())
    }
}

/// Generate a balanced labeled corpus. Class profiles are topic
/// distributions keyed by the structure seed (not the corpus seed), so two
/// corpora drawn with different seeds are consistent samples of the same
/// classes. Labels are assigned round-robin.
pub fn synth_labeled_corpus(spec: &LabeledSpec) -> Result<Vec<VideoFeatures>> {
    spec.validate()?;
    let feature_map = latent_feature_map(spec.l, spec.f, spec.struct_seed);

    let profiles: Vec<(Vec<usize>, Vec<Real>)> = (0..spec.num_classes)
        .map(|c| {
            let mut rng = stream_rng(spec.struct_seed, "class-profile", &[c as u64]);
            draw_topics(&mut rng, spec.l, spec.topics_per_class, 0.5)
        })
        .collect();

    (0..spec.num_videos)
        .map(|v| {
            let class = v % spec.num_classes;
            let (topics, base_weights) = &profiles[class];
            let mut rng = stream_rng(spec.seed, "labeled-video", &[v as u64]);

            // Per-video jitter keeps videos of one class distinct while the
            // profile keeps them closer to each other than to other classes.
            let mut weights: Vec<Real> = base_weights
                .iter()
                .map(|w| w * rng.gen_range(0.7..1.3))
                .collect();
            let total: Real = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }

            let mut objects = Matrix::zeros(spec.n * spec.k, spec.f);
            for i in 0..spec.n {
                for j in 0..spec.k {
                    let tokens: Vec<usize> = (0..spec.tokens_per_object)
                        .map(|_| sample_topic(&mut rng, topics, &weights))
                        .collect();
                    let feat =
                        feature_from_tokens(&tokens, &feature_map, spec.feature_noise, &mut rng);
                    objects.row_mut(i * spec.k + j).copy_from_slice(&feat);
                }
            }
            snap_f32(&mut objects);
            let mut frames = mean_frames(&objects, spec.n, spec.k);
            snap_f32(&mut frames);
            Ok(
                VideoFeatures::new(format!("lab_{v:05}"), spec.n, spec.k, objects)?
                    .with_frames(frames)?
                    .with_label(class as u32),
            )
        })
        .collect()
}

/// Write each video as `<id>.mfmv` plus a manifest into `dir`.
pub fn write_corpus(dir: &Path, videos: &[VideoFeatures]) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CorpusManifest::new("unsplit");
    for video in videos {
        let file = format!("{}.mfmv", video.id);
        write_video(&dir.join(&file), video)?;
        manifest.push(ManifestEntry {
            id: video.id.clone(),
            path: PathBuf::from(file),
            label: video.label,
        })?;
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use crate::dataio::manifest::load_corpus;
    use crate::tokenizer::tokenize_video;

    use super::*;

    fn small_pretrain_spec() -> PretrainSpec {
        PretrainSpec::new(6, 3, 4, 16, 4, 16, 32, 42)
    }

    #[test]
    fn pretrain_corpus_is_deterministic() {
        let spec = small_pretrain_spec();
        let (a, cb_a) = synth_pretrain_corpus(&spec).unwrap();
        let (b, cb_b) = synth_pretrain_corpus(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(cb_a.entry(0), cb_b.entry(0));

        let mut other = small_pretrain_spec();
        other.seed = 43;
        let (c, cb_c) = synth_pretrain_corpus(&other).unwrap();
        assert_ne!(a, c);
        // The latent structure depends on struct_seed, not the corpus seed.
        assert_eq!(cb_a.entry(1), cb_c.entry(1));
    }

    #[test]
    fn noiseless_patches_quantize_to_their_source_entry() {
        let mut spec = small_pretrain_spec();
        spec.patch_noise = 0.0;
        let (videos, codebook) = synth_pretrain_corpus(&spec).unwrap();
        let patches = videos[0].patches.as_ref().unwrap();
        for i in 0..patches.n {
            for j in 0..patches.k {
                for s in 0..patches.q {
                    let p = patches.patch(i, j, s);
                    // Locate the entry this patch copies (f32 snapping moves
                    // both by the same narrowing).
                    let source = (0..codebook.len())
                        .find(|&t| {
                            codebook
                                .entry(t)
                                .iter()
                                .zip(p)
                                .all(|(a, b)| (*a as f32 - *b as f32).abs() < 1e-6)
                        })
                        .expect("patch must copy some entry");
                    assert_eq!(codebook.quantize(p).unwrap(), source);
                }
            }
        }
    }

    #[test]
    fn token_mass_concentrates_on_video_topics() {
        let spec = small_pretrain_spec();
        let (videos, codebook) = synth_pretrain_corpus(&spec).unwrap();
        for (v, video) in videos.iter().enumerate() {
            // First draws of the per-video stream are the topics, in the
            // same order the generator used.
            let mut rng = stream_rng(spec.seed, "pretrain-video", &[v as u64]);
            let (topics, _) = draw_topics(&mut rng, spec.l, spec.topics_per_video, 0.2);

            let target = tokenize_video(video.patches.as_ref().unwrap(), &codebook, 4).unwrap();
            let total: u32 = target.counts.iter().sum();
            let on_topics: u32 = topics.iter().map(|&t| target.counts[t]).sum();
            assert_eq!(total as usize, spec.n * spec.k * spec.q);
            assert!(
                on_topics as f64 >= 0.8 * total as f64,
                "video {v}: {on_topics}/{total} on topics"
            );
        }
    }

    #[test]
    fn labeled_corpus_is_balanced_and_deterministic() {
        let spec = LabeledSpec::new(10, 4, 2, 3, 16, 7);
        let a = synth_labeled_corpus(&spec).unwrap();
        let b = synth_labeled_corpus(&spec).unwrap();
        assert_eq!(a, b);

        let mut counts = vec![0usize; 4];
        for v in &a {
            counts[v.label.unwrap() as usize] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "class counts {counts:?}");
    }

    #[test]
    fn class_means_are_separated() {
        let spec = LabeledSpec::new(24, 3, 2, 3, 16, 8);
        let videos = synth_labeled_corpus(&spec).unwrap();
        let mut sums = vec![vec![0.0; 16]; 3];
        let mut counts = vec![0usize; 3];
        for v in &videos {
            let c = v.label.unwrap() as usize;
            counts[c] += v.objects.rows();
            for r in 0..v.objects.rows() {
                for (s, x) in sums[c].iter_mut().zip(v.objects.row(r)) {
                    *s += x;
                }
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            for v in s.iter_mut() {
                *v /= c as Real;
            }
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let dist: Real = sums[a]
                    .iter()
                    .zip(&sums[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<Real>()
                    .sqrt();
                assert!(dist > 0.1, "classes {a} and {b} too close: {dist}");
            }
        }
    }

    #[test]
    fn corpora_share_the_latent_map_across_generators() {
        // Same structure seed → same feature map, regardless of corpus seed
        // or which generator asks.
        let a = latent_feature_map(32, 16, DEFAULT_STRUCT_SEED);
        let b = latent_feature_map(32, 16, DEFAULT_STRUCT_SEED);
        assert_eq!(a.data(), b.data());
        let c = latent_feature_map(32, 16, DEFAULT_STRUCT_SEED + 1);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn written_corpus_reads_back_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = LabeledSpec::new(5, 2, 2, 2, 8, 9);
        let videos = synth_labeled_corpus(&spec).unwrap();
        let manifest = write_corpus(dir.path(), &videos).unwrap();
        assert_eq!(manifest.len(), 5);
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded, videos);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut p = small_pretrain_spec();
        p.q = 0;
        assert!(synth_pretrain_corpus(&p).is_err());
        let mut l = LabeledSpec::new(4, 2, 1, 1, 4, 0);
        l.num_classes = 1;
        assert!(synth_labeled_corpus(&l).is_err());
    }
}
