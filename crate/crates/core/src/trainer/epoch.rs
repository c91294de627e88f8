use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{clip_gradients, global_norm, sgd_step};
use super::state::{anneal_on_plateau, EpochRecord, TrainState};
use crate::autodiff::{Tape, Tensor};
use crate::corpus::{batchify, BatchedCorpus, BpttSlice, Corpus};
use crate::error::{Error, Result};
use crate::nn::{ForwardOutput, LanguageModel, RnnState};
use crate::regularizers::{combined_objective, RegularizationConfig};

/// Losses and gradients of one training slice.
#[derive(Clone, Debug)]
pub struct SliceGradients {
    /// Mean cross entropy over the slice's tokens.
    pub ce: f64,
    /// `ce + AR + TAR`, the value that was differentiated.
    pub objective: f64,
    /// One gradient per model parameter, in storage order.
    pub grads: Vec<Tensor>,
    pub state: RnnState,
}

/// Forward pass with dropout, CE + AR + TAR, and backward, leaving the model
/// untouched.
pub fn slice_gradients<R: Rng + ?Sized>(
    model: &LanguageModel,
    slice: &BpttSlice,
    state: &RnnState,
    reg: &RegularizationConfig,
    rng: &mut R,
) -> Result<SliceGradients> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, &vars, &slice.inputs, slice.len, state, true, rng)?;
    let ce = tape.cross_entropy(out.logits, &slice.targets)?;
    let ar = reg.ar(&mut tape, out.dropped)?;
    let tar = reg.tar(&mut tape, out.raw)?;
    let objective = combined_objective(&mut tape, ce, ar, tar)?;
    let (ce_value, objective_value) = (tape.value(ce).item(), tape.value(objective).item());
    if !objective_value.is_finite() {
        return Ok(SliceGradients {
            ce: ce_value,
            objective: objective_value,
            grads: Vec::new(),
            state: out.state,
        });
    }
    tape.backward(objective)?;
    let grads = vars
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok(SliceGradients {
        ce: ce_value,
        objective: objective_value,
        grads,
        state: out.state,
    })
}

/// One pass over the training stream. Returns `exp` of the token-weighted
/// mean cross entropy; the regularizers affect the updates but not the
/// reported value.
pub fn run_epoch<R: Rng + ?Sized>(
    model: &mut LanguageModel,
    data: &BatchedCorpus,
    config: &TrainConfig,
    state: &TrainState,
    rng: &mut R,
) -> Result<f64> {
    let reg = config.regularization();
    let mut hidden = RnnState::zeros(model.config(), data.batch_size());
    let (mut ce_sum, mut tokens) = (0.0, 0usize);
    for (index, offset) in data.slice_offsets(config.bptt).enumerate() {
        let slice = data.bptt_slice(offset, config.bptt)?;
        let SliceGradients {
            ce,
            objective,
            mut grads,
            state: next,
        } = slice_gradients(model, &slice, &hidden, &reg, rng)?;
        if !objective.is_finite() || !global_norm(&grads).is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch + 1,
                slice: index,
            });
        }
        clip_gradients(&mut grads, config.clip_norm);
        sgd_step(
            model.params_mut().iter_mut().map(|p| &mut p.value),
            &grads,
            state.lr,
            config.weight_decay,
        )?;
        let n = slice.len * data.batch_size();
        ce_sum += ce * n as f64;
        tokens += n;
        hidden = next;
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus("training stream has no targets".into()));
    }
    Ok((ce_sum / tokens as f64).exp())
}

/// Runs the model without dropout over `data`, carrying the hidden state
/// across slices, and hands each slice's output to `visit`.
fn eval_pass<F>(model: &LanguageModel, data: &BatchedCorpus, bptt: usize, mut visit: F) -> Result<()>
where
    F: FnMut(&mut Tape, &ForwardOutput, &BpttSlice) -> Result<()>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hidden = RnnState::zeros(model.config(), data.batch_size());
    for offset in data.slice_offsets(bptt) {
        let slice = data.bptt_slice(offset, bptt)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &vars, &slice.inputs, slice.len, &hidden, false, &mut rng)?;
        visit(&mut tape, &out, &slice)?;
        hidden = out.state;
    }
    Ok(())
}

/// Token-weighted perplexity with dropout disabled.
pub fn evaluate_perplexity(
    model: &LanguageModel,
    ids: &[usize],
    batch_size: usize,
    bptt: usize,
) -> Result<f64> {
    let data = batchify(ids, batch_size)?;
    evaluate_batched(model, &data, bptt)
}

pub fn evaluate_batched(model: &LanguageModel, data: &BatchedCorpus, bptt: usize) -> Result<f64> {
    if data.n_steps() < 2 {
        return Err(Error::EmptyCorpus(
            "evaluation stream needs at least two steps per column".into(),
        ));
    }
    let (mut ce_sum, mut tokens) = (0.0, 0usize);
    eval_pass(model, data, bptt, |tape, out, slice| {
        let ce = tape.cross_entropy(out.logits, &slice.targets)?;
        ce_sum += tape.value(ce).item() * slice.targets.len() as f64;
        tokens += slice.targets.len();
        Ok(())
    })?;
    Ok((ce_sum / tokens as f64).exp())
}

/// Summary of final-layer activations over a stream, without dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationStats {
    /// Mean `‖h_t‖₂` over every timestep and column.
    pub mean_norm: f64,
    /// Mean `‖h_t − h_{t+1}‖₂` over consecutive timesteps within a slice.
    pub mean_temporal_diff: f64,
}

pub fn activation_stats(model: &LanguageModel, data: &BatchedCorpus, bptt: usize) -> Result<ActivationStats> {
    let h = model.config().hidden_size;
    let b = data.batch_size();
    let (mut norm_sum, mut norm_n, mut diff_sum, mut diff_n) = (0.0, 0usize, 0.0, 0usize);
    eval_pass(model, data, bptt, |tape, out, slice| {
        let raw = tape.value(out.raw).data();
        let vec_at = |t: usize, col: usize| &raw[(t * b + col) * h..(t * b + col + 1) * h];
        for t in 0..slice.len {
            for col in 0..b {
                let v = vec_at(t, col);
                norm_sum += v.iter().map(|x| x * x).sum::<f64>().sqrt();
                norm_n += 1;
                if t + 1 < slice.len {
                    let w = vec_at(t + 1, col);
                    diff_sum += v.iter().zip(w).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    diff_n += 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(ActivationStats {
        mean_norm: norm_sum / norm_n.max(1) as f64,
        mean_temporal_diff: diff_sum / diff_n.max(1) as f64,
    })
}

/// What the epoch callback sees after validation and annealing.
pub struct EpochReport<'a> {
    pub record: &'a EpochRecord,
    pub seconds: f64,
    /// The validation perplexity is a new best; `model` is the best model.
    pub improved: bool,
    pub model: &'a LanguageModel,
    pub state: &'a TrainState,
}

pub struct TrainOutcome {
    pub model: LanguageModel,
    pub best: LanguageModel,
    pub state: TrainState,
}

/// Initializes a model from `config.seed` and trains it on `corpus`.
pub fn train<F>(corpus: &Corpus, config: &TrainConfig, on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochReport<'_>) -> Result<()>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = LanguageModel::init(config.model_config(corpus.vocab.len()), &mut rng)?;
    train_from(model, TrainState::new(config.lr0), corpus, config, &mut rng, on_epoch)
}

/// Continues training `model` from `state` until `max_epochs` or until the
/// learning rate drops below `min_lr`.
pub fn train_from<R, F>(
    mut model: LanguageModel,
    mut state: TrainState,
    corpus: &Corpus,
    config: &TrainConfig,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&EpochReport<'_>) -> Result<()>,
{
    let train_data = batchify(&corpus.train, config.batch_size)?;
    let valid_data = batchify(&corpus.valid, config.eval_batch_size)?;
    let mut best = model.clone();
    while state.epoch < config.max_epochs && state.lr >= config.min_lr {
        let started = Instant::now();
        let train_ppl = run_epoch(&mut model, &train_data, config, &state, rng)?;
        let valid_ppl = evaluate_batched(&model, &valid_data, config.bptt)?;
        let record = EpochRecord {
            epoch: state.epoch + 1,
            train_ppl,
            valid_ppl,
            lr: state.lr,
        };
        state.epoch += 1;
        let improved = anneal_on_plateau(&mut state, valid_ppl, config.lr_decay_divisor);
        state.history.push(record.clone());
        if improved {
            best = model.clone();
        }
        on_epoch(&EpochReport {
            record: &record,
            seconds: started.elapsed().as_secs_f64(),
            improved,
            model: &model,
            state: &state,
        })?;
    }
    Ok(TrainOutcome { model, best, state })
}
