//! Binary per-video feature container: object features, optional frame
//! features, optional patch embeddings, optional label. Payloads are
//! little-endian float32; values widen to the numeric substrate on load.

use std::path::Path;

use crate::binio::{atomic_write, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::tokenizer::PatchEmbeddings;

const VIDEO_MAGIC: &[u8; 4] = b"MFMV";
const VIDEO_VERSION: u32 = 1;

const FLAG_FRAMES: u8 = 1;
const FLAG_PATCHES: u8 = 1 << 1;
const FLAG_LABEL: u8 = 1 << 2;

/// Precomputed features of one video: `n` frames with `k` objects each,
/// every object an `f`-vector. Frame-level vectors, raw patch embeddings,
/// and a class label are optional sections.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    pub n: usize,
    pub k: usize,
    pub f: usize,
    /// `(n * k) x f`, frame-major: rows `[i*k, (i+1)*k)` belong to frame `i`.
    pub objects: Matrix,
    /// `n x f` frame-level features.
    pub frames: Option<Matrix>,
    pub patches: Option<PatchEmbeddings>,
    pub label: Option<u32>,
}

impl VideoFeatures {
    pub fn new(id: impl Into<String>, n: usize, k: usize, objects: Matrix) -> Result<Self> {
        let id = id.into();
        if n == 0 || k == 0 {
            return Err(Error::InvalidArgument {
                op: "VideoFeatures::new",
                msg: format!("video {id} needs n >= 1 and k >= 1, got n={n}, k={k}"),
            });
        }
        if objects.rows() != n * k || objects.cols() == 0 {
            return Err(Error::InvalidArgument {
                op: "VideoFeatures::new",
                msg: format!(
                    "video {id}: object matrix {}x{} does not match n={n}, k={k}",
                    objects.rows(),
                    objects.cols()
                ),
            });
        }
        let f = objects.cols();
        Ok(VideoFeatures {
            id,
            n,
            k,
            f,
            objects,
            frames: None,
            patches: None,
            label: None,
        })
    }

    pub fn with_frames(mut self, frames: Matrix) -> Result<Self> {
        if frames.shape() != (self.n, self.f) {
            return Err(Error::InvalidArgument {
                op: "VideoFeatures::with_frames",
                msg: format!(
                    "video {}: frame matrix {}x{} does not match n={}, f={}",
                    self.id,
                    frames.rows(),
                    frames.cols(),
                    self.n,
                    self.f
                ),
            });
        }
        self.frames = Some(frames);
        Ok(self)
    }

    pub fn with_patches(mut self, patches: PatchEmbeddings) -> Result<Self> {
        if patches.n != self.n || patches.k != self.k {
            return Err(Error::InvalidArgument {
                op: "VideoFeatures::with_patches",
                msg: format!(
                    "video {}: patches are {}x{} frames/objects, video is {}x{}",
                    self.id, patches.n, patches.k, self.n, self.k
                ),
            });
        }
        self.patches = Some(patches);
        Ok(self)
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    /// The `k x f` object block of one frame.
    pub fn frame_objects(&self, frame: usize) -> Matrix {
        self.objects.row_range(frame * self.k, (frame + 1) * self.k)
    }
}

pub fn write_video(path: &Path, video: &VideoFeatures) -> Result<()> {
    atomic_write(path, |w| {
        w.magic(VIDEO_MAGIC)?;
        w.u32(VIDEO_VERSION)?;
        w.string(&video.id)?;
        w.u32(video.n as u32)?;
        w.u32(video.k as u32)?;
        w.u32(video.f as u32)?;
        let mut flags = 0u8;
        if video.frames.is_some() {
            flags |= FLAG_FRAMES;
        }
        if video.patches.is_some() {
            flags |= FLAG_PATCHES;
        }
        if video.label.is_some() {
            flags |= FLAG_LABEL;
        }
        w.u8(flags)?;
        write_f32(w, video.objects.data())?;
        if let Some(frames) = &video.frames {
            write_f32(w, frames.data())?;
        }
        if let Some(patches) = &video.patches {
            w.u32(patches.q as u32)?;
            w.u32(patches.dim as u32)?;
            write_f32(w, patches.data())?;
        }
        if let Some(label) = video.label {
            w.u32(label)?;
        }
        Ok(())
    })
}

fn write_f32(w: &mut Writer, values: &[Real]) -> Result<()> {
    let narrowed: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    w.f32_slice(&narrowed)
}

pub fn read_video(path: &Path) -> Result<VideoFeatures> {
    let mut r = Reader::open(path)?;
    r.magic(VIDEO_MAGIC)?;
    let version = r.u32("version")?;
    if version != VIDEO_VERSION {
        return Err(r.fail(format!("unsupported video container version {version}")));
    }
    let id = r.string("video id")?;
    let n = r.u32("frame count")? as usize;
    let k = r.u32("object count")? as usize;
    let f = r.u32("feature dim")? as usize;
    if n == 0 || k == 0 || f == 0 {
        return Err(r.fail(format!("degenerate dimensions n={n}, k={k}, f={f}")));
    }
    let flags = r.u8("section flags")?;
    if flags & !(FLAG_FRAMES | FLAG_PATCHES | FLAG_LABEL) != 0 {
        return Err(r.fail(format!("unknown section flags {flags:#x}")));
    }

    let objects = read_matrix(&mut r, n * k, f, "object features")?;
    let mut video = VideoFeatures::new(id, n, k, objects)?;
    if flags & FLAG_FRAMES != 0 {
        let frames = read_matrix(&mut r, n, f, "frame features")?;
        video = video.with_frames(frames)?;
    }
    if flags & FLAG_PATCHES != 0 {
        let q = r.u32("patch count")? as usize;
        let d = r.u32("patch dim")? as usize;
        if q == 0 || d == 0 {
            return Err(r.fail(format!("degenerate patch dimensions q={q}, d={d}")));
        }
        let data = r.f32_vec(n * k * q * d, "patch embeddings")?;
        let patches =
            PatchEmbeddings::new(n, k, q, d, data.into_iter().map(|v| v as Real).collect())
                .expect("sized by header");
        video = video.with_patches(patches)?;
    }
    if flags & FLAG_LABEL != 0 {
        let label = r.u32("label")?;
        video = video.with_label(label);
    }
    r.expect_eof()?;
    Ok(video)
}

fn read_matrix(r: &mut Reader, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
    let data = r.f32_vec(rows * cols, what)?;
    Ok(
        Matrix::from_vec(rows, cols, data.into_iter().map(|v| v as Real).collect())
            .expect("sized by caller"),
    )
}
