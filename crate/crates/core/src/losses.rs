//! Training objective: multi-domain loss, focal loss, entropy minimization
//! and their weighted combination.
//!
//! Every loss takes probability rows (softmax outputs) and returns a scalar
//! node on the tape. Probabilities are clamped into `[PROB_FLOOR, 1]` before
//! the logarithm unless the clamp is switched off, which also realizes the
//! `0 · log 0 = 0` convention.

use m2dan_tensor::{Tape, TensorError, UnaryKind, Var, PROB_FLOOR};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{GrlCoeff, GrlMode};

/// Scalars of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Gradient reversal strength (weight of the domain loss for the
    /// feature extractor and multi-scale module).
    pub alpha: f64,
    /// Weight of the classification loss.
    pub lambda: f64,
    /// Weight of the entropy term inside the classification loss.
    pub eta: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grl_mode: GrlMode,
    pub grl_ramp_length: Option<u64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            lambda: 1.0,
            eta: 0.1,
            gamma: 2.0,
            lr: 0.001,
            epochs: 30,
            batch_size: 12,
            seed: 42,
            grl_mode: GrlMode::Constant,
            grl_ramp_length: None,
        }
    }
}

impl HyperParams {
    pub fn grl(&self) -> GrlCoeff {
        GrlCoeff {
            mode: self.grl_mode,
            alpha: self.alpha,
            ramp_length: self.grl_ramp_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("lr", self.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Whether probabilities are clamped before the logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogClamp {
    #[default]
    On,
    /// Non-positive probabilities become a domain error.
    Off,
}

fn prob_log(tape: &mut Tape, p: Var, clamp: LogClamp) -> Result<Var> {
    let kind = match clamp {
        LogClamp::On => UnaryKind::ClampedLog {
            lo: PROB_FLOOR,
            hi: 1.0,
        },
        LogClamp::Off => UnaryKind::Log,
    };
    Ok(tape.unary(kind, p)?)
}

fn check_pair(tape: &Tape, probs: Var, targets: Var, what: &str) -> Result<usize> {
    let ps = tape.shape(probs);
    let ts = tape.shape(targets);
    if ps.len() != 2 || ps != ts {
        return Err(TensorError::ShapeMismatch(format!(
            "{what}: predictions {ps:?} and targets {ts:?} must be matching [n, classes]"
        ))
        .into());
    }
    check_one_hot(tape.value(targets), ps[1])?;
    Ok(ps[0])
}

fn check_one_hot(rows: &[f64], width: usize) -> Result<()> {
    for (row, chunk) in rows.chunks(width).enumerate() {
        let ones = chunk.iter().filter(|&&v| v == 1.0).count();
        let zeros = chunk.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != width {
            return Err(Error::NotOneHot { row });
        }
    }
    Ok(())
}

/// `-(1/n) Σ_i tᵢᵀ w(pᵢ) ⊙ log pᵢ` with `w` supplied by `weight`.
fn weighted_nll(
    tape: &mut Tape,
    probs: Var,
    targets: Var,
    n: usize,
    weight: Option<Var>,
    clamp: LogClamp,
) -> Result<Var> {
    let logp = prob_log(tape, probs, clamp)?;
    let term = match weight {
        Some(w) => tape.mul(w, logp)?,
        None => logp,
    };
    let picked = tape.mul(targets, term)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Multi-domain loss `-(1/n) Σ dᵢᵀ log d̂ᵢ` over domain predictions
/// `d_hat [n, B+1]` and one-hot domain labels `d`.
pub fn domain_loss(tape: &mut Tape, d_hat: Var, d: Var, clamp: LogClamp) -> Result<Var> {
    let n = check_pair(tape, d_hat, d, "domain loss")?;
    weighted_nll(tape, d_hat, d, n, None, clamp)
}

/// Focal loss `-(1/n_s) Σ yᵢᵀ ((1 - ŷᵢ)^γ ⊙ log ŷᵢ)` over labeled rows.
pub fn focal_loss(tape: &mut Tape, y_hat: Var, y: Var, gamma: f64, clamp: LogClamp) -> Result<Var> {
    let n = check_pair(tape, y_hat, y, "focal loss")?;
    let complement = tape.unary(UnaryKind::RSub(1.0), y_hat)?;
    let modulator = tape.unary(UnaryKind::Pow(gamma), complement)?;
    weighted_nll(tape, y_hat, y, n, Some(modulator), clamp)
}

/// Mean cross-entropy `-(1/n) Σ yᵢᵀ log ŷᵢ`.
pub fn cross_entropy(tape: &mut Tape, y_hat: Var, y: Var, clamp: LogClamp) -> Result<Var> {
    let n = check_pair(tape, y_hat, y, "cross-entropy")?;
    weighted_nll(tape, y_hat, y, n, None, clamp)
}

/// Mean prediction entropy `-(1/m) Σ ŷᵢᵀ log ŷᵢ` over all rows.
pub fn entropy_loss(tape: &mut Tape, y_hat: Var, clamp: LogClamp) -> Result<Var> {
    let shape = tape.shape(y_hat).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "entropy loss expects [m, classes], got {shape:?}"
        ))
        .into());
    }
    weighted_nll(tape, y_hat, y_hat, shape[0], None, clamp)
}

/// `L_c = L_fo + η · L_en`.
pub fn classification_loss(tape: &mut Tape, focal: Var, entropy: Var, eta: f64) -> Result<Var> {
    let weighted = tape.scale(entropy, eta)?;
    Ok(tape.add(focal, weighted)?)
}

/// Loss that gradient descent minimizes: `λ · L_c + L_d`.
///
/// `domain` must come from discriminator outputs whose inputs passed
/// through the gradient reversal layer; that layer applies `-α` on the way
/// back, so the discriminator descends `L_d` while the features below the
/// reversal ascend `α · L_d`. Pass `None` when no discriminator is trained.
pub fn total_objective(
    tape: &mut Tape,
    classification: Var,
    domain: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    let weighted = tape.scale(classification, lambda)?;
    match domain {
        Some(d) => Ok(tape.add(weighted, d)?),
        None => Ok(weighted),
    }
}

/// Averages per-branch domain losses into one scalar.
pub fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses.split_first().ok_or(Error::EmptyInput)?;
    let mut acc = first;
    for &l in rest {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / losses.len() as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_pair(
        f: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
        shape: &[usize],
        probs: Vec<f64>,
        targets: Vec<f64>,
    ) -> f64 {
        let mut t = Tape::new();
        let p = t.constant(shape, probs).unwrap();
        let y = t.constant(shape, targets).unwrap();
        let l = f(&mut t, p, y).unwrap();
        t.scalar_value(l)
    }

    // Reference values in these tests were evaluated independently with
    // Python's math module, e.g. -math.log(0.7).

    #[test]
    fn domain_loss_examples() {
        let dl = |t: &mut Tape, p, y| domain_loss(t, p, y, LogClamp::On);
        let perfect = eval_pair(dl, &[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(perfect.abs() < 1e-9);

        let third = 1.0 / 3.0;
        for label in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let v = eval_pair(dl, &[1, 3], vec![third; 3], label.to_vec());
            assert!((v - 3f64.ln()).abs() < 1e-12);
        }

        let v = eval_pair(dl, &[1, 3], vec![0.2, 0.7, 0.1], vec![0.0, 1.0, 0.0]);
        assert!((v - 0.35667494393873245).abs() < 1e-12);
    }

    #[test]
    fn domain_loss_rejects_bad_targets() {
        let mut t = Tape::new();
        let p = t.constant(&[1, 3], vec![0.2, 0.7, 0.1]).unwrap();
        let y = t.constant(&[1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(
            domain_loss(&mut t, p, y, LogClamp::On),
            Err(Error::NotOneHot { row: 0 })
        ));
        let y2 = t.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            domain_loss(&mut t, p, y2, LogClamp::On),
            Err(Error::Tensor(TensorError::ShapeMismatch(_)))
        ));
    }

    #[test]
    fn focal_loss_examples() {
        for gamma in [0.0, 0.5, 2.0, 5.0] {
            let v = eval_pair(
                |t, p, y| focal_loss(t, p, y, gamma, LogClamp::On),
                &[2, 2],
                vec![1.0, 0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0, 1.0],
            );
            assert_eq!(v, 0.0);
        }
        let ce = eval_pair(
            |t, p, y| focal_loss(t, p, y, 0.0, LogClamp::On),
            &[1, 2],
            vec![0.6, 0.4],
            vec![1.0, 0.0],
        );
        assert!((ce - 0.5108256237659907).abs() < 1e-12);
        let fo = eval_pair(
            |t, p, y| focal_loss(t, p, y, 2.0, LogClamp::On),
            &[1, 2],
            vec![0.6, 0.4],
            vec![1.0, 0.0],
        );
        assert!((fo - 0.08173209980255854).abs() < 1e-12);
    }

    #[test]
    fn entropy_loss_examples() {
        let mut t = Tape::new();
        let p = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = entropy_loss(&mut t, p, LogClamp::On).unwrap();
        assert_eq!(t.scalar_value(e), 0.0);

        let p = t.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        let e = entropy_loss(&mut t, p, LogClamp::On).unwrap();
        assert!((t.scalar_value(e) - 2f64.ln()).abs() < 1e-12);

        let p = t.constant(&[2, 2], vec![0.9, 0.1, 0.5, 0.5]).unwrap();
        let e = entropy_loss(&mut t, p, LogClamp::On).unwrap();
        assert!((t.scalar_value(e) - 0.5091150769756967).abs() < 1e-12);
    }

    #[test]
    fn classification_combination() {
        let mut t = Tape::new();
        let fo = t.constant(&[1], vec![0.5]).unwrap();
        let en = t.constant(&[1], vec![0.7]).unwrap();
        let c = classification_loss(&mut t, fo, en, 0.1).unwrap();
        assert!((t.scalar_value(c) - 0.57).abs() < 1e-15);
        let c = classification_loss(&mut t, fo, en, 0.0).unwrap();
        assert_eq!(t.scalar_value(c), 0.5);
        let z = t.constant(&[1], vec![0.0]).unwrap();
        let c = classification_loss(&mut t, z, z, 0.1).unwrap();
        assert_eq!(t.scalar_value(c), 0.0);
    }

    #[test]
    fn unclamped_log_rejects_zero_probability() {
        let mut t = Tape::new();
        let p = t.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(entropy_loss(&mut t, p, LogClamp::Off).is_err());
        assert!(entropy_loss(&mut t, p, LogClamp::On).is_ok());
    }

    #[test]
    fn defaults_match_reported_settings() {
        let hp = HyperParams::default();
        assert_eq!((hp.alpha, hp.lambda, hp.eta, hp.gamma, hp.lr), (0.03, 1.0, 0.1, 2.0, 0.001));
        assert!(hp.validate().is_ok());
        let bad = HyperParams {
            eta: -1.0,
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
