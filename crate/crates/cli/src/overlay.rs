//! Key=value config files as flag defaults. Precedence per value: explicit
//! flag, then config file, then the built-in default. Run manifests use the
//! same keys as the flags, so a manifest from an earlier run can be fed
//! straight back through `--config` to reproduce it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mfm_core::{Error, Result};

/// Keys a manifest carries for provenance that no command consumes.
const RESERVED: &[&str] = &["command", "git"];

pub struct Overlay {
    path: Option<PathBuf>,
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Overlay {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidArgument {
                    op: "config",
                    msg: format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    ),
                })?;
                if values
                    .insert(key.trim().to_string(), value.trim().to_string())
                    .is_some()
                {
                    return Err(Error::InvalidArgument {
                        op: "config",
                        msg: format!("{}: duplicate key {key:?}", path.display()),
                    });
                }
            }
        }
        Ok(Overlay {
            path: path.map(Path::to_path_buf),
            values,
            used: BTreeSet::new(),
        })
    }

    fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e: T::Err| {
                let path = self.path.as_deref().unwrap_or(Path::new("<config>"));
                Error::InvalidArgument {
                    op: "config",
                    msg: format!("{}: bad value for {key}: {e}", path.display()),
                }
            }),
        }
    }

    /// Flag wins, then config, then the default.
    pub fn resolve<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.or_config(key, flag)?.unwrap_or(default))
    }

    /// Flag wins, then config; absent stays absent.
    pub fn or_config<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => {
                self.used.insert(key.to_string());
                Ok(Some(v))
            }
            None => self.take(key),
        }
    }

    /// Like `or_config` but the value must come from somewhere.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.or_config(key, flag)?
            .ok_or_else(|| Error::InvalidArgument {
                op: "usage",
                msg: format!("missing required --{key} (flag or config file)"),
            })
    }

    /// Seed precedence: flag, config, the MFM_SEED environment variable,
    /// then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        if let Some(seed) = self.or_config("seed", flag)? {
            return Ok(seed);
        }
        match std::env::var("MFM_SEED") {
            Ok(raw) => raw.parse().map_err(|_| Error::InvalidArgument {
                op: "config",
                msg: format!("MFM_SEED must be an unsigned integer, got {raw:?}"),
            }),
            Err(_) => Ok(0),
        }
    }

    /// Reject config keys that no resolution step consumed — they are
    /// almost certainly typos for real flags.
    pub fn finish(self) -> Result<()> {
        let unused: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !self.used.contains(*k) && !RESERVED.contains(&k.as_str()))
            .collect();
        if unused.is_empty() {
            return Ok(());
        }
        let path = self.path.as_deref().unwrap_or(Path::new("<config>"));
        Err(Error::InvalidArgument {
            op: "config",
            msg: format!(
                "{}: unknown key(s) for this command: {}",
                path.display(),
                unused
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        })
    }
}

/// Lexically absolute form of a path, for manifests that must replay from
/// any working directory.
pub fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|cwd| cwd.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    }
}
