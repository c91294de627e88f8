use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
    Tanh,
}

impl CellKind {
    /// Number of `H`-wide blocks in the fused gate matrices.
    pub fn gate_blocks(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
            CellKind::Tanh => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Tanh => "tanh",
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "tanh" | "rnn" => Ok(CellKind::Tanh),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

/// Architecture of a stacked recurrent language model.
///
/// The embedding width equals `hidden_size` so that a single matrix can serve
/// as both the input embedding and the output projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    /// Dropout on word vectors and on the final layer's output.
    pub dp: f64,
    /// Dropout between stacked layers.
    pub dp_h: f64,
    pub tied: bool,
}

pub(crate) fn check_rate(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_size == 0 || self.num_layers == 0 {
            return Err(Error::Config(format!(
                "vocab_size, hidden_size and num_layers must be positive ({}, {}, {})",
                self.vocab_size, self.hidden_size, self.num_layers
            )));
        }
        check_rate("dp", self.dp)?;
        check_rate("dp_h", self.dp_h)
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, h) = (self.vocab_size, self.hidden_size);
        let gh = self.cell.gate_blocks() * h;
        let mut out = vec![("embedding.weight".to_string(), vec![v, h])];
        for l in 0..self.num_layers {
            out.push((format!("rnn.{l}.w_ih"), vec![h, gh]));
            out.push((format!("rnn.{l}.w_hh"), vec![h, gh]));
            out.push((format!("rnn.{l}.bias"), vec![gh]));
        }
        if !self.tied {
            out.push(("decoder.weight".to_string(), vec![v, h]));
        }
        out.push(("decoder.bias".to_string(), vec![v]));
        out
    }

    /// Number of trainable scalars, counting a tied matrix once.
    pub fn parameter_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}
