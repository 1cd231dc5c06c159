//! Finite-difference oracle for the analytic gradients of any tape program.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::matrix::{Matrix, Real};
use super::tape::{Tape, Var};
use super::Parameter;

/// Coordinates where analytic and numeric values are both tiny are compared
/// absolutely: a central difference carries roundoff noise around
/// eps * |loss| / step (~1e-11 here), which swamps a relative comparison of
/// negligible entries. A genuinely wrong coordinate bigger than this still
/// fails outright.
const ABS_TOL: Real = 1e-7;

/// Above this many coordinates a parameter is spot-checked on a random
/// subsample instead of exhaustively.
const SUBSAMPLE_THRESHOLD: usize = 64;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: Real,
    /// Pass threshold on the max relative error per parameter.
    pub tolerance: Real,
    /// Seed for coordinate subsampling of large parameters.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: Real,
    pub tolerance: Real,
    pub pass: bool,
}

/// Compare the tape gradient of `build` against Richardson-extrapolated
/// central finite differences, one report per parameter.
///
/// `build` must be deterministic: it is re-evaluated many times at perturbed
/// parameter values, so any randomness has to be captured up front.
pub fn grad_check<F>(
    mut build: F,
    params: &[Parameter],
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.value.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let base = tape.scalar(loss)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            what: "loss at the unperturbed point".into(),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| grads.wrt_or_zeros(v, p.value.rows(), p.value.cols()))
        .collect();

    let mut values: Vec<Matrix> = params.iter().map(|p| p.value.clone()).collect();
    let mut eval = |values: &[Matrix]| -> Result<Real> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.scalar(loss)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let numel = params[pi].numel();
        let coords: Vec<usize> = if numel <= SUBSAMPLE_THRESHOLD {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(&mut rng);
            all.truncate(SUBSAMPLE_THRESHOLD);
            all
        };

        let mut max_rel_err: Real = 0.0;
        let mut finite = true;
        for &i in &coords {
            let original = values[pi].data()[i];
            let mut central = |h: Real| -> Result<Real> {
                values[pi].data_mut()[i] = original + h;
                let plus = eval(&values)?;
                values[pi].data_mut()[i] = original - h;
                let minus = eval(&values)?;
                values[pi].data_mut()[i] = original;
                Ok((plus - minus) / (2.0 * h))
            };
            // Richardson extrapolation of the central difference: the h^2
            // truncation term cancels, leaving an O(h^4) estimate.
            let d_full = central(cfg.step)?;
            let d_half = central(cfg.step / 2.0)?;
            if !d_full.is_finite() || !d_half.is_finite() {
                finite = false;
                break;
            }
            let numeric = (4.0 * d_half - d_full) / 3.0;
            // `rel < tolerance` is the combined check
            // |a - n| < tolerance * max(|a|, |n|) or |a - n| < ABS_TOL.
            let a = analytic[pi].data()[i];
            let floor = ABS_TOL / cfg.tolerance;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel_err = max_rel_err.max(rel);
        }

        let (err, pass) = if finite {
            (max_rel_err, max_rel_err < cfg.tolerance)
        } else {
            (Real::INFINITY, false)
        };
        reports.push(GradCheckReport {
            name: params[pi].name.clone(),
            max_rel_err: err,
            tolerance: cfg.tolerance,
            pass,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn quadratic_loss_passes_and_matches_analytic_form() {
        // loss = 0.5 * ||W x||^2, dL/dW = (W x) x^T
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let w = Parameter::new("W", Matrix::uniform(3, 3, -1.0, 1.0, &mut rng));
        let x = Matrix::uniform(3, 1, -1.0, 1.0, &mut rng);

        let x_build = x.clone();
        let reports = grad_check(
            |tape, vars| {
                let xv = tape.constant(x_build.clone());
                let y = tape.matmul(vars[0], xv)?;
                let sq = tape.hadamard(y, y)?;
                let s = tape.sum_all(sq);
                Ok(tape.scale(s, 0.5))
            },
            std::slice::from_ref(&w),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].pass, "max rel err {}", reports[0].max_rel_err);
        assert!(reports[0].max_rel_err < 1e-6);

        // Cross-check the analytic gradient against W x x^T computed by hand.
        let mut tape = Tape::new();
        let wv = tape.param(w.value.clone());
        let xv = tape.constant(x.clone());
        let y = tape.matmul(wv, xv).unwrap();
        let sq = tape.hadamard(y, y).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.wrt(wv).unwrap();
        let wx = w.value.matmul(&x).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expected = wx.get(r, 0) * x.get(c, 0);
                assert!((gw.get(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_loss_passes_with_zero_gradients() {
        let p = Parameter::new("unused", Matrix::filled(2, 2, 1.5));
        let reports = grad_check(
            |tape, _vars| {
                let c = tape.constant(Matrix::filled(1, 1, 7.0));
                Ok(tape.sum_all(c))
            },
            std::slice::from_ref(&p),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(reports[0].pass);
        assert!(reports[0].max_rel_err < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let p = Parameter::new("p", Matrix::filled(1, 1, 1.0));
        let err = grad_check(
            |tape, _vars| {
                let c = tape.constant(Matrix::filled(1, 1, Real::NAN));
                Ok(tape.sum_all(c))
            },
            std::slice::from_ref(&p),
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn large_parameters_are_subsampled() {
        // 20x20 = 400 coordinates; the check must still pass via sampling.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = Parameter::new("big", Matrix::uniform(20, 20, -0.5, 0.5, &mut rng));
        let x = Matrix::uniform(20, 1, -1.0, 1.0, &mut rng);
        let reports = grad_check(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let y = tape.matmul(vars[0], xv)?;
                let sq = tape.hadamard(y, y)?;
                Ok(tape.sum_all(sq))
            },
            std::slice::from_ref(&w),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(reports[0].pass);
    }
}
