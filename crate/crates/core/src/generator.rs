//! Sampling text from a trained model and joining Moses-style split tokens.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{LanguageModel, RnnState};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub num_words: usize,
    pub temperature: f64,
    /// Ids that may never be drawn.
    pub excluded: BTreeSet<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    /// Excludes the vocabulary's `<eos>` and `<unk>`.
    pub fn new(vocab: &Vocabulary, num_words: usize, seed: u64) -> Self {
        SamplerConfig {
            num_words,
            temperature: 1.0,
            excluded: [vocab.eos_id(), vocab.unk_id()].into_iter().collect(),
            seed,
        }
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if (0..vocab_size).all(|id| self.excluded.contains(&id)) {
            return Err(Error::Config("every token is excluded".into()));
        }
        Ok(())
    }
}

/// `softmax(logits / temperature)` restricted to non-excluded ids and
/// renormalized. Excluded entries are exactly zero.
pub fn sampling_distribution(
    logits: &[f64],
    temperature: f64,
    excluded: &BTreeSet<usize>,
) -> Result<Vec<f64>> {
    let allowed = |i: usize| !excluded.contains(&i);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Domain {
            op: "sample_next",
            detail: "all probability mass is excluded".into(),
        });
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { ((v - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::NonFinite { op: "sample_next" });
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// One categorical draw from [`sampling_distribution`].
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    excluded: &BTreeSet<usize>,
    rng: &mut R,
) -> Result<usize> {
    let probs = sampling_distribution(logits, temperature, excluded)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last)
}

/// Samples `num_words` tokens, starting from a zero state and a uniformly
/// drawn non-excluded token that is not itself part of the output.
pub fn generate(model: &LanguageModel, config: &SamplerConfig) -> Result<Vec<usize>> {
    let vocab_size = model.config().vocab_size;
    config.validate(vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.num_words);
    if config.num_words == 0 {
        return Ok(out);
    }
    let allowed: Vec<usize> = (0..vocab_size).filter(|i| !config.excluded.contains(i)).collect();
    let mut token = allowed[rng.gen_range(0..allowed.len())];

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let mut state = RnnState::zeros(model.config(), 1);
    for _ in 0..config.num_words {
        let fwd = model.forward(&mut tape, &vars, &[token], 1, &state, false, &mut rng)?;
        token = sample_next(
            tape.value(fwd.logits).data(),
            config.temperature,
            &config.excluded,
            &mut rng,
        )?;
        out.push(token);
        state = fwd.state;
    }
    Ok(out)
}

/// Space-joins tokens, gluing `x @-@ y` into `x-y` and `a @.@ b` into `a.b`.
/// A marker without a word on both sides is kept as is.
pub fn moses_detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        let joiner = match tok {
            "@-@" => Some('-'),
            "@.@" => Some('.'),
            _ => None,
        };
        if let Some(c) = joiner {
            let inner = i > 0 && i + 1 < tokens.len();
            if inner && !glue_next {
                out.push(c);
                glue_next = true;
                continue;
            }
        }
        if !out.is_empty() && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = false;
    }
    out
}
