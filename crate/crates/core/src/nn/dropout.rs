use rand::Rng;

use super::config::check_rate;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Inverted-dropout mask: every entry is `0` or `1 / (1 - p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    mask: Tensor,
    p: f64,
}

impl DropoutMask {
    pub fn ones(shape: &[usize]) -> Self {
        DropoutMask {
            mask: Tensor::filled(shape, 1.0),
            p: 0.0,
        }
    }

    /// Fresh Bernoulli(1 - p) mask, scaled so each entry has expectation 1.
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Result<Self> {
        check_rate("dropout rate", p)?;
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        Ok(DropoutMask {
            mask: Tensor::from_vec(shape, data)?,
            p,
        })
    }

    /// Builds a mask from explicit keep flags.
    pub fn from_keep(shape: &[usize], keep: &[bool], p: f64) -> Result<Self> {
        check_rate("dropout rate", p)?;
        let scale = 1.0 / (1.0 - p);
        let data = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        Ok(DropoutMask {
            mask: Tensor::from_vec(shape, data)?,
            p,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn rate(&self) -> f64 {
        self.p
    }

    /// `mask ⊙ x` recorded on the tape.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let m = tape.constant(self.mask.clone());
        tape.mul(x, m)
    }
}

/// Non-variational dropout: every call draws a new mask for every element.
///
/// Returns the mask alongside the output so later consumers (activation
/// regularization) can see exactly which units survived. Outside training, or
/// at `p = 0`, the input passes through untouched with an all-ones mask.
pub fn dropout_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Var, DropoutMask)> {
    check_rate("dropout rate", p)?;
    let shape = tape.shape(x).to_vec();
    if !training || p == 0.0 {
        return Ok((x, DropoutMask::ones(&shape)));
    }
    let mask = DropoutMask::sample(&shape, p, rng)?;
    let y = mask.apply(tape, x)?;
    Ok((y, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.tensor_from(&[4], vec![1., -2., 3., 0.5], false).unwrap();
        let (y, m) = dropout_forward(&mut tape, x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(m.tensor().data().iter().all(|&v| v == 1.0));

        let (y, m) = dropout_forward(&mut tape, x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(m.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_rate_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.tensor_from(&[2], vec![1., 2.], false).unwrap();
        assert!(matches!(
            dropout_forward(&mut tape, x, 1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_statistics_at_half_rate() {
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let xs: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.25).collect();
        let mut tape = Tape::new();
        let x = tape.tensor_from(&[n], xs.clone(), false).unwrap();
        let (y, m) = dropout_forward(&mut tape, x, 0.5, true, &mut rng).unwrap();

        let zeros = m.tensor().data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((0.497..=0.503).contains(&frac), "{frac}");
        assert!(m.tensor().data().iter().all(|&v| v == 0.0 || v == 2.0));

        let mean_x = xs.iter().sum::<f64>() / n as f64;
        let mean_y = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!(((mean_y - mean_x) / mean_x).abs() < 0.01);
    }

    #[test]
    fn masks_differ_between_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DropoutMask::sample(&[64], 0.5, &mut rng).unwrap();
        let b = DropoutMask::sample(&[64], 0.5, &mut rng).unwrap();
        assert_ne!(a, b);
    }
}
