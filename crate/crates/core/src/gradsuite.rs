//! Finite-difference suite over the tape primitives, every recurrent cell and
//! the full CE + AR + TAR objective of a small stacked model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_configured, OpTag, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{gru_step, lstm_step, tanh_step, CellKind, LanguageModel, LayerVars, ModelConfig, RnnState};
use crate::regularizers::{combined_objective, RegularizationConfig};

pub const PRIMITIVE_THRESHOLD: f64 = 1e-6;
pub const COMPOSITE_THRESHOLD: f64 = 1e-4;
const PRIMITIVE_EPS: f64 = 1e-5;
const COMPOSITE_EPS: f64 = 1e-4;
const FAULT_FACTOR: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub coordinates: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SuiteOptions {
    /// Restrict to one cell kind; primitives are skipped when set.
    pub cell: Option<CellKind>,
    /// Corrupt this op's backward rule on the analytic pass.
    pub corrupt: Option<OpTag>,
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(x), &mut rng, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Objective)> {
    let m = |rng: &mut ChaCha8Rng, s: &[usize]| random(s, rng, -1.0, 1.0);
    vec![
        (
            "add",
            vec![m(rng, &[2, 3]), m(rng, &[2, 3])],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y, 1)
            }),
        ),
        (
            "sub",
            vec![m(rng, &[2, 3]), m(rng, &[2, 3])],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                weighted_sum(t, y, 2)
            }),
        ),
        (
            "mul",
            vec![m(rng, &[2, 3]), m(rng, &[2, 3]), m(rng, &[])],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                let y = t.mul(v[2], y)?;
                weighted_sum(t, y, 3)
            }),
        ),
        (
            "sigmoid",
            vec![m(rng, &[3, 4])],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y, 4)
            }),
        ),
        (
            "tanh",
            vec![m(rng, &[3, 4])],
            Box::new(|t, v| {
                let y = t.tanh(v[0])?;
                weighted_sum(t, y, 5)
            }),
        ),
        (
            "exp",
            vec![m(rng, &[3, 4])],
            Box::new(|t, v| {
                let y = t.exp(v[0])?;
                weighted_sum(t, y, 6)
            }),
        ),
        (
            "log",
            vec![random(&[3, 4], rng, 0.5, 2.0)],
            Box::new(|t, v| {
                let y = t.log(v[0])?;
                weighted_sum(t, y, 7)
            }),
        ),
        (
            "scale",
            vec![m(rng, &[5])],
            Box::new(|t, v| {
                let y = t.scale(v[0], -2.5)?;
                weighted_sum(t, y, 8)
            }),
        ),
        (
            "matmul",
            vec![m(rng, &[3, 4]), m(rng, &[4, 2]), m(rng, &[5, 2])],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                let z = t.matmul_nt(y, v[2])?;
                weighted_sum(t, z, 9)
            }),
        ),
        (
            "add_bias",
            vec![m(rng, &[3, 4]), m(rng, &[4])],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                weighted_sum(t, y, 10)
            }),
        ),
        (
            "mean",
            vec![m(rng, &[3, 4])],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.mean(y)
            }),
        ),
        (
            "l2_norm",
            vec![m(rng, &[2, 3])],
            Box::new(|t, v| t.l2_norm(v[0])),
        ),
        (
            "row_norms",
            vec![m(rng, &[2, 3, 4])],
            Box::new(|t, v| {
                let y = t.row_norms(v[0])?;
                weighted_sum(t, y, 11)
            }),
        ),
        (
            "cross_entropy",
            vec![random(&[4, 6], rng, -2.0, 2.0)],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 5, 2, 2])),
        ),
        (
            "gather",
            vec![m(rng, &[5, 3])],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
                weighted_sum(t, y, 12)
            }),
        ),
        (
            "narrow",
            vec![m(rng, &[4, 2, 3])],
            Box::new(|t, v| {
                let a = t.narrow(v[0], 1, 2)?;
                let b = t.select(v[0], 3)?;
                let a = weighted_sum(t, a, 13)?;
                let b = weighted_sum(t, b, 14)?;
                t.add(a, b)
            }),
        ),
        (
            "stack",
            vec![m(rng, &[2, 3]), m(rng, &[2, 3])],
            Box::new(|t, v| {
                let y = t.stack(&[v[0], v[1], v[0]])?;
                let y = t.reshape(y, &[6, 3])?;
                weighted_sum(t, y, 15)
            }),
        ),
        (
            "narrow_cols",
            vec![m(rng, &[3, 8])],
            Box::new(|t, v| {
                let y = t.narrow_cols(v[0], 2, 4)?;
                weighted_sum(t, y, 16)
            }),
        ),
    ]
}

fn cell_case(cell: CellKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Objective) {
    let (b, h) = (2, 4);
    let gh = cell.gate_blocks() * h;
    let mut inputs = vec![
        random(&[b, h], rng, -1.0, 1.0),
        random(&[b, h], rng, -1.0, 1.0),
        random(&[h, gh], rng, -0.8, 0.8),
        random(&[h, gh], rng, -0.8, 0.8),
        random(&[gh], rng, -0.5, 0.5),
    ];
    if cell == CellKind::Lstm {
        inputs.push(random(&[b, h], rng, -1.0, 1.0));
    }
    let f: Objective = Box::new(move |t, v| {
        let layer = LayerVars {
            w_ih: v[2],
            w_hh: v[3],
            bias: v[4],
        };
        match cell {
            CellKind::Lstm => {
                let (h2, c2) = lstm_step(t, &layer, v[0], v[1], v[5])?;
                let a = weighted_sum(t, h2, 21)?;
                let b = weighted_sum(t, c2, 22)?;
                t.add(a, b)
            }
            CellKind::Gru => {
                let h2 = gru_step(t, &layer, v[0], v[1])?;
                weighted_sum(t, h2, 23)
            }
            CellKind::Tanh => {
                let h2 = tanh_step(t, &layer, v[0], v[1])?;
                weighted_sum(t, h2, 24)
            }
        }
    });
    (inputs, f)
}

/// The H=4, 2-layer, T=5, B=2 tied model used for the composite check.
pub fn composite_model(cell: CellKind) -> Result<LanguageModel> {
    let config = ModelConfig {
        cell,
        vocab_size: 7,
        hidden_size: 4,
        num_layers: 2,
        dp: 0.5,
        dp_h: 0.4,
        tied: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = LanguageModel::init(config, &mut rng)?;
    for p in model.params_mut() {
        if p.name.ends_with("bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    Ok(model)
}

fn composite_case(cell: CellKind) -> Result<(Vec<Tensor>, Objective)> {
    const STEPS: usize = 5;
    const BATCH: usize = 2;
    let model = composite_model(cell)?;
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let ids = [1, 4, 2, 5, 3, 0, 5, 1, 6, 2];
    let targets = [4, 2, 5, 0, 0, 5, 1, 3, 2, 6];
    let state = RnnState::zeros(model.config(), BATCH);
    let reg = RegularizationConfig {
        alpha: 2.0,
        beta: 1.0,
        ..RegularizationConfig::default()
    };
    let f: Objective = Box::new(move |t, v| {
        let vars = model.vars_from(v.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let out = model.forward(t, &vars, &ids, STEPS, &state, true, &mut rng)?;
        let ce = t.cross_entropy(out.logits, &targets)?;
        let ar = reg.ar(t, out.dropped)?;
        let tar = reg.tar(t, out.raw)?;
        combined_objective(t, ce, ar, tar)
    });
    Ok((inputs, f))
}

fn check(
    name: String,
    inputs: &[Tensor],
    f: &Objective,
    eps: f64,
    threshold: f64,
    corrupt: Option<OpTag>,
) -> Result<ComponentReport> {
    let report = grad_check_configured(f, inputs, eps, |tape| {
        tape.set_backward_fault(corrupt.map(|op| (op, FAULT_FACTOR)))
    })?;
    Ok(ComponentReport {
        name,
        max_rel_error: report.max_rel_error,
        threshold,
        coordinates: report.coordinates,
    })
}

pub fn run_gradient_suite(options: SuiteOptions) -> Result<Vec<ComponentReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2017);
    let mut out = Vec::new();
    if options.cell.is_none() {
        for (name, inputs, f) in primitive_cases(&mut rng) {
            out.push(check(
                format!("op {name}"),
                &inputs,
                &f,
                PRIMITIVE_EPS,
                PRIMITIVE_THRESHOLD,
                options.corrupt,
            )?);
        }
    }
    let cells = match options.cell {
        Some(c) => vec![c],
        None => vec![CellKind::Lstm, CellKind::Gru, CellKind::Tanh],
    };
    for cell in cells {
        let (inputs, f) = cell_case(cell, &mut rng);
        out.push(check(
            format!("{cell} cell"),
            &inputs,
            &f,
            COMPOSITE_EPS,
            COMPOSITE_THRESHOLD,
            options.corrupt,
        )?);
        let (inputs, f) = composite_case(cell)?;
        out.push(check(
            format!("{cell} model ce+ar+tar"),
            &inputs,
            &f,
            COMPOSITE_EPS,
            COMPOSITE_THRESHOLD,
            options.corrupt,
        )?);
    }
    Ok(out)
}
