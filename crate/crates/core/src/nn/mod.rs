//! Embedding, dropout, recurrent cells, layer stacking and the decoder.

mod cells;
mod config;
mod dropout;
mod model;

pub use cells::{gru_step, lstm_step, tanh_step, LayerVars};
pub use config::{CellKind, ModelConfig};
pub use dropout::{dropout_forward, DropoutMask};
pub use model::{
    decoder_logits, embedding_lookup, stacked_forward, ForwardOutput, LanguageModel, LayerState,
    ModelVars, NamedParam, RnnState, StackOutput,
};
