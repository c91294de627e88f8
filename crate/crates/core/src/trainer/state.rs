use serde::{Deserialize, Serialize};

/// Perplexity and learning rate of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(with = "finite_or_null")]
    pub train_ppl: f64,
    #[serde(with = "finite_or_null")]
    pub valid_ppl: f64,
    /// Rate used during the epoch, before any annealing it triggered.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    #[serde(with = "finite_or_null")]
    pub best_valid_ppl: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(lr0: f64) -> Self {
        TrainState {
            epoch: 0,
            lr: lr0,
            best_valid_ppl: f64::INFINITY,
            history: Vec::new(),
        }
    }
}

/// Records `new_valid_ppl` as the best if it strictly improves on it,
/// otherwise divides the learning rate. Returns whether it improved.
pub fn anneal_on_plateau(state: &mut TrainState, new_valid_ppl: f64, divisor: f64) -> bool {
    if new_valid_ppl < state.best_valid_ppl {
        state.best_valid_ppl = new_valid_ppl;
        true
    } else {
        state.lr /= divisor;
        false
    }
}

/// JSON has no infinities, so non-finite values are written as `null` and
/// read back as `+inf`.
pub(crate) mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_examples() {
        let mut s = TrainState::new(20.0);
        assert!(anneal_on_plateau(&mut s, 100.0, 4.0));
        assert_eq!((s.lr, s.best_valid_ppl), (20.0, 100.0));

        assert!(!anneal_on_plateau(&mut s, 101.0, 4.0));
        assert_eq!(s.lr, 5.0);

        assert!(anneal_on_plateau(&mut s, 90.0, 4.0));
        assert_eq!((s.lr, s.best_valid_ppl), (5.0, 90.0));
    }

    #[test]
    fn equal_perplexity_counts_as_plateau() {
        let mut s = TrainState::new(20.0);
        anneal_on_plateau(&mut s, 50.0, 4.0);
        for _ in 0..3 {
            assert!(!anneal_on_plateau(&mut s, 50.0, 4.0));
        }
        assert_eq!(s.lr, 0.3125);
        assert!(!anneal_on_plateau(&mut s, f64::NAN, 4.0));
    }

    #[test]
    fn infinite_best_serializes_as_null() {
        let s = TrainState::new(20.0);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"epoch":0,"lr":20.0,"best_valid_ppl":null,"history":[]}"#);
        let back: TrainState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
