//! Activation regularization (AR) and temporal activation regularization
//! (TAR) over the final recurrent layer's outputs.
//!
//! AR penalizes the L2 norm of the *dropped* outputs `m ⊙ h_t`, so units that
//! were masked out this step are left alone. TAR penalizes the L2 norm of
//! `h_t - h_{t+1}` on the raw outputs. For the LSTM only `h_t` is involved,
//! never the cell memory `c_t`.
//!
//! Both operate on `[T×B×H]` tensors and reduce the per-(timestep, example)
//! vector norms according to [`NormReduction`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// How the per-vector L2 norms are aggregated into one scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NormReduction {
    /// Arithmetic mean of `‖v‖₂` over all vectors.
    #[default]
    MeanNorm,
    /// Single `‖·‖₂` of the whole flattened tensor.
    FlatNorm,
    /// Arithmetic mean of `‖v‖₂²`.
    MeanSquaredNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    /// AR coefficient. Zero disables AR.
    pub alpha: f64,
    /// TAR coefficient. Zero disables TAR.
    pub beta: f64,
    #[serde(default)]
    pub reduction: NormReduction,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        // Best h=650 Penn Treebank setting.
        RegularizationConfig {
            alpha: 5.0,
            beta: 2.0,
            reduction: NormReduction::MeanNorm,
        }
    }
}

impl RegularizationConfig {
    pub fn disabled() -> Self {
        RegularizationConfig {
            alpha: 0.0,
            beta: 0.0,
            reduction: NormReduction::MeanNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_coefficient("alpha", self.alpha)?;
        check_coefficient("beta", self.beta)
    }

    pub fn ar(&self, tape: &mut Tape, dropped: Var) -> Result<Var> {
        ar_loss_with(tape, dropped, self.alpha, self.reduction)
    }

    pub fn tar(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        tar_loss_with(tape, raw, self.beta, self.reduction)
    }
}

fn check_coefficient(name: &str, value: f64) -> Result<()> {
    if value < 0.0 || !value.is_finite() {
        return Err(Error::Config(format!(
            "{name} must be a non-negative finite number, got {value}"
        )));
    }
    Ok(())
}

fn check_sequence(tape: &Tape, op: &'static str, x: Var) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [t, b, h] => Ok([t, b, h]),
        ref other => Err(Error::shape(op, format!("expected [T, B, H], got {other:?}"))),
    }
}

fn reduce(tape: &mut Tape, vectors: Var, reduction: NormReduction) -> Result<Var> {
    match reduction {
        NormReduction::MeanNorm => {
            let norms = tape.row_norms(vectors)?;
            tape.mean(norms)
        }
        NormReduction::FlatNorm => tape.l2_norm(vectors),
        NormReduction::MeanSquaredNorm => {
            let norms = tape.row_norms(vectors)?;
            let sq = tape.mul(norms, norms)?;
            tape.mean(sq)
        }
    }
}

/// `alpha · mean_{t,b} ‖dropped[t, b]‖₂`, using the default reduction.
pub fn ar_loss(tape: &mut Tape, dropped: Var, alpha: f64) -> Result<Var> {
    ar_loss_with(tape, dropped, alpha, NormReduction::default())
}

pub fn ar_loss_with(
    tape: &mut Tape,
    dropped: Var,
    alpha: f64,
    reduction: NormReduction,
) -> Result<Var> {
    check_coefficient("alpha", alpha)?;
    check_sequence(tape, "ar_loss", dropped)?;
    if alpha == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let r = reduce(tape, dropped, reduction)?;
    tape.scale(r, alpha)
}

/// `beta · mean_{t,b} ‖raw[t, b] - raw[t+1, b]‖₂`, using the default
/// reduction. Pairs never straddle a segment boundary; a single-step segment
/// contributes exactly zero.
pub fn tar_loss(tape: &mut Tape, raw: Var, beta: f64) -> Result<Var> {
    tar_loss_with(tape, raw, beta, NormReduction::default())
}

pub fn tar_loss_with(tape: &mut Tape, raw: Var, beta: f64, reduction: NormReduction) -> Result<Var> {
    check_coefficient("beta", beta)?;
    let [steps, _, _] = check_sequence(tape, "tar_loss", raw)?;
    if beta == 0.0 || steps < 2 {
        return Ok(tape.scalar(0.0));
    }
    let earlier = tape.narrow(raw, 0, steps - 1)?;
    let later = tape.narrow(raw, 1, steps - 1)?;
    let diff = tape.sub(earlier, later)?;
    let r = reduce(tape, diff, reduction)?;
    tape.scale(r, beta)
}

/// `ce + ar + tar`.
pub fn combined_objective(tape: &mut Tape, ce: Var, ar: Var, tar: Var) -> Result<Var> {
    for v in [ce, ar, tar] {
        if !tape.value(v).is_scalar() {
            return Err(Error::shape(
                "combined_objective",
                format!("expected scalars, got {:?}", tape.shape(v)),
            ));
        }
    }
    let partial = tape.add(ce, ar)?;
    tape.add(partial, tar)
}
