use rand::Rng;

use super::cells::{gru_step, lstm_step, tanh_step, LayerVars};
use super::config::{CellKind, ModelConfig};
use super::dropout::{dropout_forward, DropoutMask};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Recurrent state of one layer. `c` is only present for LSTM layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

/// Per-layer recurrent state carried between BPTT segments.
///
/// Held as plain tensors, so re-binding it on a new tape detaches it.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnState {
    pub layers: Vec<LayerState>,
}

impl RnnState {
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let shape = [batch, config.hidden_size];
        let layers = (0..config.num_layers)
            .map(|_| LayerState {
                h: Tensor::zeros(&shape),
                c: (config.cell == CellKind::Lstm).then(|| Tensor::zeros(&shape)),
            })
            .collect();
        RnnState { layers }
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.h.shape()[0])
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Stacked recurrent language model with an (optionally tied) softmax decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    params: Vec<NamedParam>,
}

/// Tape handles for every parameter of a [`LanguageModel`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    /// One handle per stored parameter, in storage order.
    pub params: Vec<Var>,
    pub embedding: Var,
    /// Same handle as `embedding` when the model is tied.
    pub decoder_weight: Var,
    pub decoder_bias: Var,
    pub layers: Vec<LayerVars>,
}

/// Result of running the recurrent stack over a segment.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// Final layer outputs `[T×B×H]` before dropout.
    pub raw: Var,
    /// `mask ⊙ raw`, fed to the decoder.
    pub dropped: Var,
    pub mask: DropoutMask,
    pub state: RnnState,
}

/// Everything a training or evaluation step needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[(T·B)×V]`, row `t·B + b`.
    pub logits: Var,
    pub raw: Var,
    pub dropped: Var,
    pub mask: DropoutMask,
    pub state: RnnState,
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("shape and length agree")
}

impl LanguageModel {
    /// Embeddings uniform in `[-0.1, 0.1]`, other matrices uniform in
    /// `[-1/√H, 1/√H]`, biases zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.hidden_size as f64).sqrt();
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name == "embedding.weight" {
                    uniform(&shape, 0.1, rng)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    uniform(&shape, bound, rng)
                };
                NamedParam { name, value }
            })
            .collect();
        Ok(LanguageModel { config, params })
    }

    /// Every parameter set to zero. The decoder then emits uniform logits.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| NamedParam {
                name,
                value: Tensor::zeros(&shape),
            })
            .collect();
        Ok(LanguageModel { config, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against `config`.
    pub fn from_params(config: ModelConfig, params: Vec<NamedParam>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::format(
                "tensor_count",
                format!("expected {} tensors, found {}", expected.len(), params.len()),
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name {
                return Err(Error::format(
                    format!("tensor `{}`", p.name),
                    format!("expected tensor `{name}` at this position"),
                ));
            }
            if shape.as_slice() != p.value.shape() {
                return Err(Error::format(
                    format!("tensor `{name}`"),
                    format!("shape {:?} does not match expected {shape:?}", p.value.shape()),
                ));
            }
        }
        Ok(LanguageModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Storage index of the embedding matrix.
    pub fn embedding_index(&self) -> usize {
        0
    }

    /// Storage index of the decoder projection. Equal to
    /// [`embedding_index`](Self::embedding_index) when tied.
    pub fn decoder_weight_index(&self) -> usize {
        if self.config.tied {
            self.embedding_index()
        } else {
            self.index_of("decoder.weight")
        }
    }

    fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("model has no parameter `{name}`"))
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelVars {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        self.vars_from(params)
    }

    /// Wraps already-registered parameter vars, one per stored tensor in
    /// storage order.
    pub fn vars_from(&self, params: Vec<Var>) -> ModelVars {
        assert_eq!(params.len(), self.params.len(), "one var per parameter");
        let layers = (0..self.config.num_layers)
            .map(|l| LayerVars {
                w_ih: params[1 + 3 * l],
                w_hh: params[2 + 3 * l],
                bias: params[3 + 3 * l],
            })
            .collect();
        ModelVars {
            embedding: params[self.embedding_index()],
            decoder_weight: params[self.decoder_weight_index()],
            decoder_bias: params[self.index_of("decoder.bias")],
            params,
            layers,
        }
    }

    /// Full forward pass over a `T×B` block of token ids (row-major, row `t`
    /// holds timestep `t` of every stream).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        ids: &[usize],
        steps: usize,
        state: &RnnState,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let batch = state.batch_size();
        if steps == 0 || ids.len() != steps * batch {
            return Err(Error::shape(
                "forward",
                format!("{} ids for {steps} steps of batch {batch}", ids.len()),
            ));
        }
        let embedded = embedding_lookup(tape, vars.embedding, ids, steps, batch)?;
        let (embedded, _) = dropout_forward(tape, embedded, self.config.dp, training, rng)?;
        let out = stacked_forward(tape, &self.config, &vars.layers, embedded, state, training, rng)?;
        let logits = decoder_logits(tape, vars.decoder_weight, out.dropped, vars.decoder_bias)?;
        Ok(ForwardOutput {
            logits,
            raw: out.raw,
            dropped: out.dropped,
            mask: out.mask,
            state: out.state,
        })
    }
}

/// Gathers embedding rows for a `T×B` id block, giving `[T×B×H]`.
pub fn embedding_lookup(
    tape: &mut Tape,
    weights: Var,
    ids: &[usize],
    steps: usize,
    batch: usize,
) -> Result<Var> {
    if ids.len() != steps * batch {
        return Err(Error::shape(
            "embedding_lookup",
            format!("{} ids for {steps}×{batch}", ids.len()),
        ));
    }
    let width = tape.shape(weights)[1];
    let rows = tape.gather_rows(weights, ids)?;
    tape.reshape(rows, &[steps, batch, width])
}

/// Runs every layer over the segment.
///
/// `embedded` must already carry input dropout. Non-final layer outputs are
/// dropped at rate `dp_h` before feeding the next layer; the final layer's
/// output is dropped at rate `dp` and returned both raw and dropped, together
/// with the mask.
pub fn stacked_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    config: &ModelConfig,
    layers: &[LayerVars],
    embedded: Var,
    state: &RnnState,
    training: bool,
    rng: &mut R,
) -> Result<StackOutput> {
    let shape = tape.shape(embedded).to_vec();
    if shape.len() != 3 || shape[2] != config.hidden_size {
        return Err(Error::shape(
            "stacked_forward",
            format!("expected [T, B, {}], got {shape:?}", config.hidden_size),
        ));
    }
    let (steps, batch) = (shape[0], shape[1]);
    if state.layers.len() != layers.len() || layers.len() != config.num_layers {
        return Err(Error::shape(
            "stacked_forward",
            format!(
                "{} state layers for {} parameter layers",
                state.layers.len(),
                layers.len()
            ),
        ));
    }
    if state.batch_size() != batch {
        return Err(Error::shape(
            "stacked_forward",
            format!("state batch {} vs input batch {batch}", state.batch_size()),
        ));
    }

    let mut input = embedded;
    let mut new_state = Vec::with_capacity(layers.len());
    let mut raw = embedded;
    for (l, (layer, ls)) in layers.iter().zip(&state.layers).enumerate() {
        let mut h = tape.constant(ls.h.clone());
        let mut c = match (&ls.c, config.cell) {
            (Some(c), CellKind::Lstm) => Some(tape.constant(c.clone())),
            (None, CellKind::Lstm) => {
                return Err(Error::shape("stacked_forward", "LSTM state without cell memory"))
            }
            _ => None,
        };
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.select(input, t)?;
            match config.cell {
                CellKind::Lstm => {
                    let (h2, c2) = lstm_step(tape, layer, x, h, c.expect("lstm memory"))?;
                    h = h2;
                    c = Some(c2);
                }
                CellKind::Gru => h = gru_step(tape, layer, x, h)?,
                CellKind::Tanh => h = tanh_step(tape, layer, x, h)?,
            }
            outputs.push(h);
        }
        new_state.push(LayerState {
            h: tape.value(h).clone(),
            c: c.map(|c| tape.value(c).clone()),
        });
        let seq = tape.stack(&outputs)?;
        if l + 1 < layers.len() {
            let (dropped, _) = dropout_forward(tape, seq, config.dp_h, training, rng)?;
            input = dropped;
        } else {
            raw = seq;
        }
    }
    let (dropped, mask) = dropout_forward(tape, raw, config.dp, training, rng)?;
    Ok(StackOutput {
        raw,
        dropped,
        mask,
        state: RnnState { layers: new_state },
    })
}

/// `outputs · weightsᵀ + bias`, flattening `[T×B×H]` outputs to `T·B` rows.
pub fn decoder_logits(tape: &mut Tape, weights: Var, outputs: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(outputs).to_vec();
    let width = *shape.last().ok_or_else(|| Error::shape("decoder", "scalar outputs"))?;
    if tape.shape(weights).get(1) != Some(&width) {
        return Err(Error::shape(
            "decoder",
            format!(
                "weights {:?} against outputs {shape:?}",
                tape.shape(weights)
            ),
        ));
    }
    let rows = shape.iter().product::<usize>() / width;
    let flat = tape.reshape(outputs, &[rows, width])?;
    let logits = tape.matmul_nt(flat, weights)?;
    tape.add_bias(logits, bias)
}
