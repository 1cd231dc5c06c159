//! Named-tensor checkpoint files. A checkpoint is an ordered list of
//! (name, matrix) pairs; names use `/`-separated paths such as
//! `gat/omega_t/W1` or `vigat/classifier/b1`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{atomic_write, Reader};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameter, Real};

const CKPT_MAGIC: &[u8; 4] = b"MFMK";
const CKPT_VERSION: u32 = 1;

/// An ordered map of named tensors. Iteration order is name order, so a
/// checkpoint written twice from the same contents is byte-identical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    /// Store a parameter's value under `prefix/<param name>`.
    pub fn insert_param(&mut self, prefix: &str, param: &Parameter) {
        self.insert(format!("{prefix}/{}", param.name), param.value.clone());
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor {
            key: name.to_string(),
        })
    }

    /// Fetch `prefix/<param name>` into an existing parameter, checking the
    /// stored shape against the destination.
    pub fn load_param(&self, prefix: &str, param: &mut Parameter) -> Result<()> {
        let key = format!("{prefix}/{}", param.name);
        let stored = self.get(&key)?;
        if stored.shape() != param.value.shape() {
            return Err(Error::DimMismatch {
                op: "Checkpoint::load_param",
                lhs: format!("stored {key} {}x{}", stored.rows(), stored.cols()),
                rhs: format!("expected {}x{}", param.value.rows(), param.value.cols()),
            });
        }
        param.value = stored.clone();
        param.zero_grad();
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Store a single scalar, used for configuration values that ride along
    /// with the tensors.
    pub fn insert_scalar(&mut self, name: impl Into<String>, value: Real) {
        self.insert(name, Matrix::from_vec(1, 1, vec![value]).expect("1x1"));
    }

    pub fn get_scalar(&self, name: &str) -> Result<Real> {
        let m = self.get(name)?;
        if m.shape() != (1, 1) {
            return Err(Error::InvalidArgument {
                op: "Checkpoint::get_scalar",
                msg: format!("tensor {name} is {}x{}, not 1x1", m.rows(), m.cols()),
            });
        }
        Ok(m.get(0, 0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            w.magic(CKPT_MAGIC)?;
            w.u32(CKPT_VERSION)?;
            w.u32(self.tensors.len() as u32)?;
            for (name, tensor) in &self.tensors {
                w.string(name)?;
                w.u32(tensor.rows() as u32)?;
                w.u32(tensor.cols() as u32)?;
                // The widening cast matters when `Real` is the f32 feature.
                #[allow(clippy::unnecessary_cast)]
                let data: Vec<f64> = tensor.data().iter().map(|&v| v as f64).collect();
                w.f64_slice(&data)?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.magic(CKPT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(r.fail(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let name = r.string("tensor name")?;
            let rows = r.u32("tensor rows")? as usize;
            let cols = r.u32("tensor cols")? as usize;
            if rows == 0 || cols == 0 {
                return Err(r.fail(format!("tensor {name} has degenerate shape {rows}x{cols}")));
            }
            let data = r.f64_vec(rows * cols, "tensor data")?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(r.fail(format!("tensor {name} contains non-finite values")));
            }
            let matrix =
                Matrix::from_vec(rows, cols, data.into_iter().map(|v| v as Real).collect())
                    .expect("sized by header");
            if tensors.insert(name.clone(), matrix).is_some() {
                return Err(r.fail(format!("duplicate tensor name {name} (entry {i})")));
            }
        }
        r.expect_eof()?;
        Ok(Checkpoint { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.insert(
            "gat/omega_t/W1",
            Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as Real),
        );
        ckpt.insert(
            "gat/omega_t/w_p",
            Matrix::from_fn(3, 1, |i, _| -(i as Real)),
        );
        ckpt.insert_scalar("meta/feature_dim", 3.0);
        ckpt
    }

    #[test]
    fn round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mfmk");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);

        // Writing the loaded checkpoint again produces identical bytes.
        let path2 = dir.path().join("b.mfmk");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn missing_tensor_is_reported_by_key() {
        let ckpt = sample();
        let err = ckpt.get("gat/omega_t/U").unwrap_err();
        assert!(matches!(err, Error::MissingTensor { ref key } if key == "gat/omega_t/U"));
    }

    #[test]
    fn load_param_checks_shape() {
        let ckpt = sample();
        let mut p = Parameter::new("W1", Matrix::zeros(3, 3));
        p.grad = Matrix::filled(3, 3, 1.0);
        ckpt.load_param("gat/omega_t", &mut p).unwrap();
        assert_eq!(p.value.get(1, 2), 5.0);
        assert!(p.grad.data().iter().all(|&g| g == 0.0));

        let mut wrong = Parameter::new("W1", Matrix::zeros(2, 3));
        assert!(matches!(
            ckpt.load_param("gat/omega_t", &mut wrong),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn scalars_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mfmk");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.get_scalar("meta/feature_dim").unwrap(), 3.0);
        assert!(loaded.get_scalar("gat/omega_t/W1").is_err());
    }

    #[test]
    fn corruption_yields_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mfmk");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncation mid-tensor.
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));

        // Wrong magic.
        let mut bad = bytes.clone();
        bad[3] = b'?';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));

        // Trailing garbage.
        let mut long = bytes.clone();
        long.extend_from_slice(b"extra");
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));

        // Absurd name length in the first tensor header.
        let mut huge = bytes;
        // Header: magic(4) + version(4) + count(4); name length follows.
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        std::fs::write(&path, &huge).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
