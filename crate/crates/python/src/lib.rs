//! Python bindings: vocabulary, training, evaluation, sampling and the
//! AR/TAR penalties.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};
use serde_json::{Map, Value};

use arlm::autodiff::{Tape, Tensor};
use arlm::corpus::{Corpus, Vocabulary as CoreVocabulary, UNK};
use arlm::generator::{self, SamplerConfig};
use arlm::gradsuite::{run_gradient_suite, SuiteOptions};
use arlm::nn::CellKind;
use arlm::trainer::{self, Checkpoint, TrainConfig as CoreConfig};
use arlm::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Usage(_) | Error::EmptyCorpus(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Vocabulary", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary(CoreVocabulary);

#[pymethods]
impl PyVocabulary {
    /// Builds from whitespace-tokenized lines, in first-occurrence order.
    #[new]
    fn new(lines: Vec<String>) -> PyResult<Self> {
        CoreVocabulary::from_lines(lines.iter().map(String::as_str)).map(Self).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn eos_id(&self) -> usize {
        self.0.eos_id()
    }

    #[getter]
    fn unk_id(&self) -> usize {
        self.0.unk_id()
    }

    fn id(&self, token: &str) -> Option<usize> {
        self.0.id(token)
    }

    fn token(&self, id: usize) -> Option<String> {
        self.0.token(id).map(str::to_string)
    }

    fn tokens(&self) -> Vec<String> {
        self.0.iter().map(str::to_string).collect()
    }

    /// Ids for each line followed by `<eos>`; unknown words map to `<unk>`.
    fn encode(&self, lines: Vec<String>) -> Vec<usize> {
        self.0.encode(lines.iter().map(String::as_str))
    }

    /// Lines of tokens, split at `<eos>`.
    fn decode(&self, ids: Vec<usize>) -> Vec<String> {
        self.0.decode(&ids)
    }
}

#[pyclass(name = "TrainConfig", frozen, from_py_object)]
#[derive(Clone)]
struct PyTrainConfig(CoreConfig);

#[pymethods]
impl PyTrainConfig {
    /// Keyword arguments override the defaults, e.g. `TrainConfig(hidden_size=200, cell="gru")`.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut map = Map::new();
        if let Some(dict) = overrides {
            for (k, v) in dict.iter() {
                let key: String = k.extract()?;
                let value = if v.is_instance_of::<PyBool>() {
                    Value::Bool(v.extract()?)
                } else if let Ok(i) = v.extract::<i64>() {
                    Value::from(i)
                } else if let Ok(f) = v.extract::<f64>() {
                    Value::from(f)
                } else if let Ok(s) = v.extract::<String>() {
                    Value::String(s)
                } else {
                    return Err(PyValueError::new_err(format!("unsupported value for `{key}`")));
                };
                map.insert(key, value);
            }
        }
        let config: CoreConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| PyValueError::new_err(e.to_string()))?;
        config.validate().map_err(to_py)?;
        Ok(Self(config))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.to_json())
    }
}

/// A trained model together with its vocabulary, configuration and history.
#[pyclass(name = "Model", frozen)]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    /// Trains on raw text (one sentence per line) and keeps the best
    /// validation snapshot.
    #[staticmethod]
    #[pyo3(signature = (train, valid, config = None))]
    fn train(py: Python<'_>, train: &str, valid: &str, config: Option<PyTrainConfig>) -> PyResult<Self> {
        let config = config.map(|c| c.0).unwrap_or_default();
        let corpus = Corpus::from_texts(train, valid, None).map_err(to_py)?;
        let out = py
            .detach(|| trainer::train(&corpus, &config, |_| Ok(())))
            .map_err(to_py)?;
        Ok(Self(Checkpoint::from_model(&out.best, &config, &corpus.vocab, &out.state)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = trainer::load_checkpoint(&path).map_err(to_py)?;
        ckpt.model().map_err(to_py)?;
        Ok(Self(ckpt))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&path, &self.0).map_err(to_py)
    }

    #[getter]
    fn vocabulary(&self) -> PyVocabulary {
        PyVocabulary(self.0.vocabulary.clone())
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig(self.0.config.clone())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.model_config().parameter_count()
    }

    #[getter]
    fn best_valid_ppl(&self) -> f64 {
        self.0.train_state.best_valid_ppl
    }

    /// `(epoch, train_ppl, valid_ppl, lr)` per completed epoch.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, f64, f64)> {
        self.0
            .train_state
            .history
            .iter()
            .map(|r| (r.epoch, r.train_ppl, r.valid_ppl, r.lr))
            .collect()
    }

    #[pyo3(signature = (text, batch_size = None, bptt = None))]
    fn perplexity(&self, py: Python<'_>, text: &str, batch_size: Option<usize>, bptt: Option<usize>) -> PyResult<f64> {
        let model = self.0.model().map_err(to_py)?;
        let ids = self.0.vocabulary.encode(text.lines());
        let batch = batch_size.unwrap_or(self.0.config.eval_batch_size);
        let bptt = bptt.unwrap_or(self.0.config.bptt);
        py.detach(|| trainer::evaluate_perplexity(&model, &ids, batch, bptt))
            .map_err(to_py)
    }

    /// Samples `words` tokens and returns them detokenized.
    #[pyo3(signature = (words = 100, seed = 1111, temperature = 1.0))]
    fn generate(&self, words: usize, seed: u64, temperature: f64) -> PyResult<String> {
        let model = self.0.model().map_err(to_py)?;
        let mut config = SamplerConfig::new(&self.0.vocabulary, words, seed);
        config.temperature = temperature;
        let ids = generator::generate(&model, &config).map_err(to_py)?;
        let tokens: Vec<&str> = ids.iter().map(|&i| self.0.vocabulary.token(i).unwrap_or(UNK)).collect();
        Ok(generator::moses_detokenize(&tokens))
    }
}

fn penalty(
    values: Vec<f64>,
    shape: Vec<usize>,
    coef: f64,
    f: fn(&mut Tape, arlm::autodiff::Var, f64) -> arlm::Result<arlm::autodiff::Var>,
) -> PyResult<f64> {
    let x = Tensor::from_vec(&shape, values).map_err(to_py)?;
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v, coef).map_err(to_py)?;
    Ok(tape.value(out).item())
}

/// AR penalty of a flattened `[T, B, H]` tensor of dropped outputs.
#[pyfunction]
fn ar_loss(values: Vec<f64>, shape: Vec<usize>, alpha: f64) -> PyResult<f64> {
    penalty(values, shape, alpha, arlm::regularizers::ar_loss)
}

/// TAR penalty of a flattened `[T, B, H]` tensor of raw outputs.
#[pyfunction]
fn tar_loss(values: Vec<f64>, shape: Vec<usize>, beta: f64) -> PyResult<f64> {
    penalty(values, shape, beta, arlm::regularizers::tar_loss)
}

#[pyfunction]
fn detokenize(tokens: Vec<String>) -> String {
    generator::moses_detokenize(&tokens)
}

/// Runs the finite-difference suite; returns `(name, max_rel_error, threshold, passed)` rows.
#[pyfunction]
#[pyo3(signature = (cell = None))]
fn gradcheck(py: Python<'_>, cell: Option<&str>) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let cell = cell.map(str::parse::<CellKind>).transpose().map_err(to_py)?;
    let reports = py
        .detach(|| run_gradient_suite(SuiteOptions { cell, corrupt: None }))
        .map_err(to_py)?;
    Ok(reports
        .into_iter()
        .map(|r| {
            let passed = r.passed();
            (r.name, r.max_rel_error, r.threshold, passed)
        })
        .collect())
}

#[pymodule]
#[pyo3(name = "arlm")]
fn arlm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(ar_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tar_loss, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
