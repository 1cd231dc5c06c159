//! Visual-token targets: cosine quantization of patch embeddings against a
//! codebook, per-video token counts and their top-r binarization.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{atomic_write, Reader};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::numerics::{Matrix, Real};

const CODEBOOK_MAGIC: &[u8; 4] = b"MFMC";
const CODEBOOK_VERSION: u32 = 1;

/// The visual vocabulary: `len` embeddings of dimension `dim`, quantization
/// targets for patch embeddings. Entries must have nonzero norm.
#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Matrix,
    /// Euclidean norms of the entries, precomputed for cosine scoring.
    norms: Vec<Real>,
}

impl Codebook {
    pub fn new(entries: Matrix) -> Result<Self> {
        if entries.rows() == 0 || entries.cols() == 0 {
            return Err(Error::InvalidArgument {
                op: "Codebook::new",
                msg: format!("need at least 1x1 entries, got {:?}", entries.shape()),
            });
        }
        let norms: Vec<Real> = (0..entries.rows())
            .map(|i| entries.row(i).iter().map(|v| v * v).sum::<Real>().sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroNorm {
                context: format!("codebook entry {i}"),
            });
        }
        Ok(Codebook { entries, norms })
    }

    /// Entries drawn i.i.d. standard normal, scaled to unit norm.
    pub fn generate(len: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Matrix::gaussian(len, dim, 1.0, &mut rng);
        for i in 0..len {
            let norm = entries.row(i).iter().map(|v| v * v).sum::<Real>().sqrt();
            if norm == 0.0 {
                // Probability zero, but the invariant is nonzero norm.
                entries.row_mut(i)[0] = 1.0;
                continue;
            }
            for v in entries.row_mut(i) {
                *v /= norm;
            }
        }
        Codebook::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entry(&self, i: usize) -> &[Real] {
        self.entries.row(i)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            w.magic(CODEBOOK_MAGIC)?;
            w.u32(CODEBOOK_VERSION)?;
            w.u32(self.len() as u32)?;
            w.u32(self.dim() as u32)?;
            let data: Vec<f32> = self.entries.data().iter().map(|&v| v as f32).collect();
            w.f32_slice(&data)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.magic(CODEBOOK_MAGIC)?;
        let version = r.u32("version")?;
        if version != CODEBOOK_VERSION {
            return Err(r.fail(format!("unsupported codebook version {version}")));
        }
        let len = r.u32("vocab size")? as usize;
        let dim = r.u32("embedding dim")? as usize;
        if len == 0 || dim == 0 {
            return Err(r.fail(format!("degenerate codebook {len}x{dim}")));
        }
        let data = r.f32_vec(len * dim, "codebook entries")?;
        r.expect_eof()?;
        let entries = Matrix::from_vec(len, dim, data.into_iter().map(|v| v as Real).collect())
            .expect("sized by header");
        Codebook::new(entries)
    }

    /// Index of the nearest entry by cosine similarity; ties go to the
    /// smallest index. The query must have nonzero norm.
    pub fn quantize(&self, h: &[Real]) -> Result<usize> {
        if h.len() != self.dim() {
            return Err(Error::DimMismatch {
                op: "quantize",
                lhs: format!("query dim {}", h.len()),
                rhs: format!("codebook dim {}", self.dim()),
            });
        }
        let h_norm = h.iter().map(|v| v * v).sum::<Real>().sqrt();
        if h_norm == 0.0 {
            return Err(Error::ZeroNorm {
                context: "quantize input".into(),
            });
        }
        let mut best = 0;
        let mut best_score = Real::NEG_INFINITY;
        for i in 0..self.len() {
            let dot: Real = self.entry(i).iter().zip(h).map(|(a, b)| a * b).sum();
            // h_norm is shared by every candidate, so it cannot change the argmax.
            let score = dot / self.norms[i];
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        Ok(best)
    }
}

/// Patch embeddings for one video: `n` frames x `k` objects x `q` patches,
/// each a `dim`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub dim: usize,
    data: Vec<Real>,
}

impl PatchEmbeddings {
    pub fn new(n: usize, k: usize, q: usize, dim: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != n * k * q * dim {
            return Err(Error::InvalidArgument {
                op: "PatchEmbeddings::new",
                msg: format!("data length {} does not fill {n}x{k}x{q}x{dim}", data.len()),
            });
        }
        Ok(PatchEmbeddings { n, k, q, dim, data })
    }

    pub fn patch(&self, frame: usize, object: usize, patch: usize) -> &[Real] {
        let base = (((frame * self.k) + object) * self.q + patch) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }
}

/// Per-video supervision: token counts `u` over the vocabulary and the
/// binary top-r vector `v` derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTarget {
    pub counts: Vec<u32>,
    pub binary: Vec<u8>,
    pub r: usize,
}

impl TokenTarget {
    /// Binary vector as loss targets.
    pub fn binary_reals(&self) -> Vec<Real> {
        self.binary.iter().map(|&b| b as Real).collect()
    }

    /// Normalized counts-at-top-r distribution (`v / r`) for the softmax head.
    pub fn distribution(&self) -> Vec<Real> {
        let r = self.r as Real;
        self.binary.iter().map(|&b| b as Real / r).collect()
    }
}

/// Mark the `r` largest counts with 1, everything else 0. Equal counts are
/// ranked by index, smaller first, so the output is deterministic.
pub fn top_r(counts: &[u32], r: usize) -> Result<Vec<u8>> {
    if r == 0 || r > counts.len() {
        return Err(Error::InvalidArgument {
            op: "top_r",
            msg: format!("r={r} out of range for {} counts", counts.len()),
        });
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut out = vec![0u8; counts.len()];
    for &i in order.iter().take(r) {
        out[i] = 1;
    }
    Ok(out)
}

/// Quantize every patch of a video and aggregate: `u[i]` counts the patches
/// assigned to entry `i`, `v = top_r(u)`.
pub fn tokenize_video(
    patches: &PatchEmbeddings,
    codebook: &Codebook,
    r: usize,
) -> Result<TokenTarget> {
    tokenize_video_exec(patches, codebook, r, Exec::Seq)
}

/// [`tokenize_video`] with an explicit execution strategy; objects are
/// quantized independently and counts merged in index order.
pub fn tokenize_video_exec(
    patches: &PatchEmbeddings,
    codebook: &Codebook,
    r: usize,
    exec: Exec,
) -> Result<TokenTarget> {
    if patches.dim != codebook.dim() {
        return Err(Error::DimMismatch {
            op: "tokenize_video",
            lhs: format!("patch dim {}", patches.dim),
            rhs: format!("codebook dim {}", codebook.dim()),
        });
    }
    if r == 0 || r > codebook.len() {
        return Err(Error::InvalidArgument {
            op: "tokenize_video",
            msg: format!("r={r} out of range for vocabulary of {}", codebook.len()),
        });
    }

    // One work item per object; each yields its q token indices.
    let per_object: Vec<Result<Vec<usize>>> =
        exec::map_indices(exec, patches.n * patches.k, |oi| {
            let (frame, object) = (oi / patches.k, oi % patches.k);
            (0..patches.q)
                .map(|j| {
                    codebook
                        .quantize(patches.patch(frame, object, j))
                        .map_err(|e| match e {
                            Error::ZeroNorm { .. } => Error::ZeroNorm {
                                context: format!(
                                    "patch (frame {frame}, object {object}, patch {j})"
                                ),
                            },
                            other => other,
                        })
                })
                .collect()
        });

    let mut counts = vec![0u32; codebook.len()];
    for tokens in per_object {
        for t in tokens? {
            counts[t] += 1;
        }
    }
    let binary = top_r(&counts, r)?;
    Ok(TokenTarget { counts, binary, r })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_codebook(len: usize, dim: usize, seed: u64) -> Codebook {
        Codebook::generate(len, dim, seed).unwrap()
    }

    /// Exhaustive cosine scan, the quantize oracle.
    fn quantize_oracle(codebook: &Codebook, h: &[Real]) -> usize {
        let h_norm = h.iter().map(|v| v * v).sum::<Real>().sqrt();
        let mut best = 0;
        let mut best_cos = Real::NEG_INFINITY;
        for i in 0..codebook.len() {
            let e = codebook.entry(i);
            let e_norm = e.iter().map(|v| v * v).sum::<Real>().sqrt();
            let dot: Real = e.iter().zip(h).map(|(a, b)| a * b).sum();
            let cos = dot / (e_norm * h_norm);
            if cos > best_cos {
                best_cos = cos;
                best = i;
            }
        }
        best
    }

    #[test]
    fn quantize_recovers_exact_and_scaled_entries() {
        let cb = random_codebook(16, 8, 5);
        let e3: Vec<Real> = cb.entry(3).to_vec();
        assert_eq!(cb.quantize(&e3).unwrap(), 3);
        let doubled: Vec<Real> = e3.iter().map(|v| v * 2.0).collect();
        assert_eq!(cb.quantize(&doubled).unwrap(), 3);
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let cb = random_codebook(16, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let h: Vec<Real> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(cb.quantize(&h).unwrap(), quantize_oracle(&cb, &h));
        }
    }

    #[test]
    fn quantize_rejects_zero_norm() {
        let cb = random_codebook(4, 3, 8);
        assert!(matches!(
            cb.quantize(&[0.0, 0.0, 0.0]),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn top_r_hand_cases() {
        assert_eq!(top_r(&[5, 1, 5, 0], 2).unwrap(), vec![1, 0, 1, 0]);
        // Ties: smaller index wins.
        assert_eq!(top_r(&[3, 3, 3], 2).unwrap(), vec![1, 1, 0]);
        assert_eq!(top_r(&[2, 2, 2], 3).unwrap(), vec![1, 1, 1]);
        assert!(top_r(&[1, 2], 0).is_err());
        assert!(top_r(&[1, 2], 3).is_err());
    }

    /// Stable-sort oracle for top_r.
    fn top_r_oracle(counts: &[u32], r: usize) -> Vec<u8> {
        let mut idx: Vec<usize> = (0..counts.len()).collect();
        idx.sort_by_key(|&i| std::cmp::Reverse(counts[i]));
        // sort_by_key is stable, so equal counts keep index order.
        let mut out = vec![0u8; counts.len()];
        for &i in idx.iter().take(r) {
            out[i] = 1;
        }
        out
    }

    #[test]
    fn top_r_matches_stable_sort_oracle_under_heavy_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let len = rng.gen_range(1..20);
            let counts: Vec<u32> = (0..len).map(|_| rng.gen_range(0..4)).collect();
            let r = rng.gen_range(1..=len);
            let got = top_r(&counts, r).unwrap();
            assert_eq!(got, top_r_oracle(&counts, r));
            assert_eq!(got.iter().map(|&b| b as usize).sum::<usize>(), r);
        }
    }

    #[test]
    fn tokenize_single_patch_is_one_hot() {
        let cb = random_codebook(5, 4, 10);
        let h = cb.entry(2).to_vec();
        let patches = PatchEmbeddings::new(1, 1, 1, 4, h).unwrap();
        let target = tokenize_video(&patches, &cb, 1).unwrap();
        assert_eq!(target.counts, vec![0, 0, 1, 0, 0]);
        assert_eq!(target.binary, vec![0, 0, 1, 0, 0]);
    }

    #[test]
    fn tokenize_top_l_of_l_is_all_ones() {
        let cb = random_codebook(5, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<Real> = (0..2 * 2 * 3 * 4)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let patches = PatchEmbeddings::new(2, 2, 3, 4, data).unwrap();
        let target = tokenize_video(&patches, &cb, 5).unwrap();
        assert_eq!(target.binary, vec![1; 5]);
    }

    #[test]
    fn tokenize_matches_count_and_sort_oracle() {
        let cb = random_codebook(5, 4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data: Vec<Real> = (0..2 * 2 * 3 * 4)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let patches = PatchEmbeddings::new(2, 2, 3, 4, data).unwrap();
        let target = tokenize_video(&patches, &cb, 2).unwrap();

        let mut expected_counts = vec![0u32; 5];
        for n in 0..2 {
            for k in 0..2 {
                for j in 0..3 {
                    expected_counts[quantize_oracle(&cb, patches.patch(n, k, j))] += 1;
                }
            }
        }
        assert_eq!(target.counts, expected_counts);
        assert_eq!(target.binary, top_r_oracle(&expected_counts, 2));
        let total: u32 = target.counts.iter().sum();
        assert_eq!(total, 2 * 2 * 3);
    }

    #[test]
    #[allow(clippy::identity_op)] // index arithmetic spelled out per axis
    fn tokenize_reports_zero_norm_patch_coordinates() {
        let cb = random_codebook(4, 3, 15);
        let mut data = vec![1.0; 2 * 1 * 2 * 3];
        // Zero out frame 1, object 0, patch 1.
        let base = ((1 * 1 + 0) * 2 + 1) * 3;
        data[base..base + 3].fill(0.0);
        let patches = PatchEmbeddings::new(2, 1, 2, 3, data).unwrap();
        let err = tokenize_video(&patches, &cb, 1).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("frame 1") && msg.contains("object 0") && msg.contains("patch 1"),
            "{msg}"
        );
    }

    #[test]
    fn parallel_and_sequential_tokenization_agree() {
        let cb = random_codebook(8, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data: Vec<Real> = (0..3 * 4 * 2 * 4)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let patches = PatchEmbeddings::new(3, 4, 2, 4, data).unwrap();
        let seq = tokenize_video_exec(&patches, &cb, 3, Exec::Seq).unwrap();
        let par = tokenize_video_exec(&patches, &cb, 3, Exec::Par).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn generated_codebooks_are_deterministic_and_unit_norm() {
        let a = Codebook::generate(8, 4, 7).unwrap();
        let b = Codebook::generate(8, 4, 7).unwrap();
        assert_eq!(a.entries.data(), b.entries.data());
        let c = Codebook::generate(8, 4, 8).unwrap();
        assert_ne!(a.entries.data(), c.entries.data());
        for i in 0..a.len() {
            let norm = a.entry(i).iter().map(|v| v * v).sum::<Real>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn codebook_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.mfmc");
        let cb = random_codebook(6, 5, 18);
        cb.save(&path).unwrap();
        let loaded = Codebook::load(&path).unwrap();
        // Entries pass through f32 on disk; generated entries were produced
        // in f64, so compare through the same narrowing.
        for i in 0..cb.len() {
            for (a, b) in cb.entry(i).iter().zip(loaded.entry(i)) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        // A second save of the loaded codebook must be byte-identical.
        let path2 = dir.path().join("cb2.mfmc");
        loaded.save(&path2).unwrap();
        let loaded2 = Codebook::load(&path2).unwrap();
        assert_eq!(loaded.entries.data(), loaded2.entries.data());
    }

    #[test]
    fn codebook_load_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.mfmc");
        let cb = random_codebook(6, 5, 19);
        cb.save(&path).unwrap();

        // Truncate the payload.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = Codebook::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        // Corrupt the magic.
        let mut bytes2 = bytes.clone();
        bytes2[0] = b'X';
        std::fs::write(&path, &bytes2).unwrap();
        assert!(matches!(Codebook::load(&path), Err(Error::Format { .. })));
    }
}
