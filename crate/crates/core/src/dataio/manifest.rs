//! Corpus manifests: one UTF-8 line per video, `id<TAB>path<TAB>label?`.
//! Paths are stored relative to the manifest and resolved against its
//! directory on load.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::dataio::container::{read_video, VideoFeatures};
use crate::error::{Error, Result};

/// Conventional manifest file name inside a corpus directory.
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Option<u32>,
}

/// An ordered list of videos forming one split.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    /// Derived from the manifest file stem; "unsplit" before saving.
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(split: impl Into<String>) -> Self {
        CorpusManifest {
            split: split.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: ManifestEntry) -> Result<()> {
        if self.entries.iter().any(|e| e.id == entry.id) {
            return Err(Error::InvalidArgument {
                op: "CorpusManifest::push",
                msg: format!("duplicate video id {}", entry.id),
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            let p = e.path.to_string_lossy();
            if e.id.contains('\t') || p.contains('\t') {
                return Err(Error::InvalidArgument {
                    op: "CorpusManifest::save",
                    msg: format!("id or path of {} contains a tab", e.id),
                });
            }
            match e.label {
                Some(l) => text.push_str(&format!("{}\t{}\t{}\n", e.id, p, l)),
                None => text.push_str(&format!("{}\t{}\n", e.id, p)),
            }
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Parse a manifest, resolve relative paths against its directory, and
    /// verify ids are unique and every path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unsplit".into());
        let mut manifest = CorpusManifest::new(split);
        let mut seen = HashSet::new();
        let mut offset = 0u64;
        for (lineno, line) in text.lines().enumerate() {
            let line_start = offset;
            offset += line.len() as u64 + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let fail = |reason: String| {
                Error::format(path, line_start, format!("line {}: {reason}", lineno + 1))
            };
            if fields.len() < 2 || fields.len() > 3 {
                return Err(fail(format!(
                    "expected id<TAB>path<TAB>label?, got {} fields",
                    fields.len()
                )));
            }
            let id = fields[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(fail(format!("duplicate video id {id}")));
            }
            let raw = PathBuf::from(fields[1]);
            let resolved = if raw.is_absolute() {
                raw
            } else {
                dir.join(raw)
            };
            if !resolved.exists() {
                return Err(fail(format!(
                    "video file {} does not exist",
                    resolved.display()
                )));
            }
            let label = match fields.get(2) {
                Some(s) => Some(
                    s.parse::<u32>()
                        .map_err(|_| fail(format!("label {s:?} is not a class id")))?,
                ),
                None => None,
            };
            manifest.entries.push(ManifestEntry {
                id,
                path: resolved,
                label,
            });
        }
        Ok(manifest)
    }

    /// Read every listed video. A manifest label must agree with a label
    /// stored in the container; if only the manifest has one, it is applied.
    pub fn read_all(&self) -> Result<Vec<VideoFeatures>> {
        self.entries
            .iter()
            .map(|e| {
                let mut video = read_video(&e.path)?;
                if video.id != e.id {
                    return Err(Error::format(
                        &e.path,
                        0,
                        format!(
                            "container id {} does not match manifest id {}",
                            video.id, e.id
                        ),
                    ));
                }
                match (video.label, e.label) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(Error::format(
                            &e.path,
                            0,
                            format!("container label {a} does not match manifest label {b}"),
                        ));
                    }
                    (None, Some(b)) => video.label = Some(b),
                    _ => {}
                }
                Ok(video)
            })
            .collect()
    }
}

/// Load every video of the corpus directory's manifest.
pub fn load_corpus(dir: &Path) -> Result<Vec<VideoFeatures>> {
    let manifest = CorpusManifest::load(&dir.join(MANIFEST_FILE))?;
    if manifest.is_empty() {
        return Err(Error::EmptyCorpus(dir.display().to_string()));
    }
    manifest.read_all()
}
