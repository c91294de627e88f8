//! Acceptance gate. Runs each criterion and prints one PASS/FAIL line.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use arlm::autodiff::{Tape, Tensor};
use arlm::corpus::{batchify, Corpus, Vocabulary};
use arlm::error::Error;
use arlm::generator::{generate, moses_detokenize, SamplerConfig};
use arlm::gradsuite::{run_gradient_suite, SuiteOptions};
use arlm::nn::{decoder_logits, embedding_lookup, CellKind, LanguageModel, ModelConfig, RnnState};
use arlm::regularizers::{ar_loss, tar_loss};
use arlm::trainer::{
    activation_stats, clip_gradients, global_norm, load_checkpoint, run_epoch, save_checkpoint, slice_gradients,
    train, Checkpoint, TrainConfig, TrainState,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($msg)+)),
        }
    };
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("regularizer oracles", regularizer_oracles),
        ("final-layer-only regularization", final_layer_only),
        ("overfit sanity", overfit_sanity),
        ("directional regularization effects", directional_effects),
        ("trainer protocol", trainer_protocol),
        ("weight tying and parameter count", tying_contract),
        ("corpus batching", corpus_batching),
        ("sampler exclusion and detokenizer", sampler),
        ("checkpoint round trip", checkpoint),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1)
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// ~1,000 tokens of sentences drawn from a fixed set of eight.
fn tiny_text(tokens: usize, seed: u64) -> String {
    let sentences = [
        "the cat sat on the mat .",
        "a dog ran to the old house .",
        "my friend likes the red ball .",
        "the man sees a small bird .",
        "we walk home in the rain .",
        "she reads a long book today .",
        "they play games after school .",
        "it is cold in the north .",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    let mut n = 0;
    while n < tokens {
        let s = sentences[rng.gen_range(0..sentences.len())];
        n += s.split(' ').count() + 1;
        lines.push(s);
    }
    lines.join("\n")
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        hidden_size: 32,
        num_layers: 2,
        cell: CellKind::Lstm,
        batch_size: 4,
        eval_batch_size: 4,
        bptt: 35,
        lr0: 10.0,
        dp: 0.0,
        dp_h: 0.0,
        alpha: 0.0,
        beta: 0.0,
        min_lr: 0.0,
        ..TrainConfig::default()
    }
}

fn gradient_suite() -> Check {
    let started = Instant::now();
    let reports = run_gradient_suite(SuiteOptions::default()).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e} >= {:.0e}", r.name, r.max_rel_error, r.threshold))
        .collect();
    ensure!(failing.is_empty(), "{}", failing.join("; "));
    ensure!(secs < 30.0, "suite took {secs:.1}s");
    let worst = |prefix: bool| {
        reports
            .iter()
            .filter(|r| r.name.starts_with("op ") == prefix)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    };
    Ok(format!(
        "{} components; primitives worst {:.1e} (< 1e-6), cells and CE+AR+TAR worst {:.1e} (< 1e-4)",
        reports.len(),
        worst(true),
        worst(false)
    ))
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> arlm::Result<arlm::autodiff::Var>) -> f64 {
    let mut tape = Tape::new();
    let v = build(&mut tape).expect("regularizer builds");
    tape.value(v).item()
}

fn ar_of(x: &Tensor, alpha: f64) -> f64 {
    eval_scalar(|t| {
        let v = t.constant(x.clone());
        ar_loss(t, v, alpha)
    })
}

fn tar_of(x: &Tensor, beta: f64) -> f64 {
    eval_scalar(|t| {
        let v = t.constant(x.clone());
        tar_loss(t, v, beta)
    })
}

fn seq(t: usize, b: usize, h: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[t, b, h], data).unwrap()
}

/// `β · mean_{t,b} ‖x[t,b] − x[t+1,b]‖` by direct loops.
fn tar_oracle(x: &[f64], t: usize, b: usize, h: usize, beta: f64) -> f64 {
    if t < 2 {
        return 0.0;
    }
    let at = |ti: usize, bi: usize, hi: usize| x[(ti * b + bi) * h + hi];
    let mut total = 0.0;
    for ti in 0..t - 1 {
        for bi in 0..b {
            let sq: f64 = (0..h).map(|hi| (at(ti, bi, hi) - at(ti + 1, bi, hi)).powi(2)).sum();
            total += sq.sqrt();
        }
    }
    beta * total / ((t - 1) * b) as f64
}

fn ar_oracle(x: &[f64], h: usize, alpha: f64) -> f64 {
    let rows = x.len() / h;
    alpha * x.chunks(h).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / rows as f64
}

fn regularizer_oracles() -> Check {
    let ar_zero = ar_of(&seq(3, 2, 4, vec![0.0; 24]), 7.0);
    ensure!(ar_zero == 0.0, "AR of zeros = {ar_zero}");
    let ar = ar_of(&seq(1, 1, 2, vec![3.0, 4.0]), 2.0);
    ensure!(close(ar, 10.0, 1e-10), "AR [3,4] = {ar}");
    // x = [2, -2, 1] at p = 1/3 keeping {0, 2}: dropped = [3, 0, 1.5].
    let ar = ar_of(&seq(1, 1, 3, vec![3.0, 0.0, 1.5]), 2.0);
    ensure!(close(ar, 2.0 * 11.25f64.sqrt(), 1e-10), "masked AR = {ar}");
    let tar = tar_of(&seq(2, 1, 2, vec![1.0, 1.0, 4.0, 5.0]), 2.0);
    ensure!(close(tar, 10.0, 1e-10), "TAR 3-4-5 = {tar}");
    let tar = tar_of(&seq(3, 2, 2, [0.3, -1.0].repeat(6)), 4.0);
    ensure!(tar == 0.0, "TAR of constant sequence = {tar}");

    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let x: Vec<f64> = (0..4 * 2 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let got = tar_of(&seq(4, 2, 3, x.clone()), 1.7);
    let want = tar_oracle(&x, 4, 2, 3, 1.7);
    ensure!(close(got, want, 1e-10), "TAR brute force {got} vs {want}");

    for trial in 0..1000 {
        let (t, b, h) = (rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(1..6));
        let n = t * b * h;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (alpha, beta) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        let xt = seq(t, b, h, x.clone());
        let (ar, tar) = (ar_of(&xt, alpha), tar_of(&xt, beta));
        ensure!(close(ar, ar_oracle(&x, h, alpha), 1e-10), "trial {trial}: AR oracle");
        ensure!(close(tar, tar_oracle(&x, t, b, h, beta), 1e-10), "trial {trial}: TAR oracle");
        ensure!(ar >= 0.0 && tar >= 0.0, "trial {trial}: negative penalty");

        let c: f64 = rng.gen_range(-5.0..5.0);
        let scaled = seq(t, b, h, x.iter().map(|v| c * v).collect());
        ensure!(
            close(ar_of(&scaled, alpha), c.abs() * ar, 1e-10),
            "trial {trial}: AR homogeneity with c={c}"
        );

        let shift: Vec<f64> = (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let shifted = seq(t, b, h, x.iter().enumerate().map(|(i, v)| v + shift[i % h]).collect());
        ensure!(close(tar_of(&shifted, beta), tar, 1e-10), "trial {trial}: TAR shift invariance");

        let mut reversed = Vec::with_capacity(n);
        for ti in (0..t).rev() {
            reversed.extend_from_slice(&x[ti * b * h..(ti + 1) * b * h]);
        }
        ensure!(
            close(tar_of(&seq(t, b, h, reversed), beta), tar, 1e-12),
            "trial {trial}: TAR time reversal"
        );

        let constant = seq(t, b, h, x[..b * h].repeat(t));
        ensure!(tar_of(&constant, beta) == 0.0, "trial {trial}: TAR of time-constant input");
        if alpha > 0.0 && x.iter().any(|&v| v != 0.0) {
            ensure!(ar > 0.0, "trial {trial}: AR zero on non-zero input");
        }
    }
    Ok("worked examples within 1e-10; homogeneity, shift, reversal, nonnegativity on 1000 instances".into())
}

/// Gradients of `AR + TAR` alone (no cross entropy) with respect to every
/// parameter of a two-layer model in training mode.
fn regularizer_grads(model: &LanguageModel) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let ids: Vec<usize> = (0..12).map(|i| (i * 5 + 1) % 9).collect();
    let state = RnnState::zeros(model.config(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = model.forward(&mut tape, &vars, &ids, 6, &state, true, &mut rng).unwrap();
    let ar = ar_loss(&mut tape, out.dropped, 5.0).unwrap();
    let tar = tar_loss(&mut tape, out.raw, 2.0).unwrap();
    let total = tape.add(ar, tar).unwrap();
    tape.backward(total).unwrap();
    vars.params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect()
}

fn final_layer_only() -> Check {
    let mut detail = Vec::new();
    for cell in [CellKind::Lstm, CellKind::Gru, CellKind::Tanh] {
        let config = ModelConfig {
            cell,
            vocab_size: 9,
            hidden_size: 5,
            num_layers: 2,
            dp: 0.5,
            dp_h: 0.4,
            tied: true,
        };
        let mut model = LanguageModel::init(config, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for p in model.params_mut() {
            if p.name.ends_with("bias") {
                p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * ((i % 7) as f64 - 3.0));
            }
        }
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        let nonzero = |g: &Tensor| g.data().iter().any(|&v| v != 0.0);
        let lower = |n: &str| n.starts_with("rnn.0.") || n == "embedding.weight";

        let grads = regularizer_grads(&model);
        for (n, g) in names.iter().zip(&grads) {
            if lower(n) {
                ensure!(nonzero(g), "{cell}: no regularizer gradient reaches {n}");
            }
            if n == "decoder.bias" {
                ensure!(!nonzero(g), "{cell}: regularizer gradient reached {n}");
            }
        }

        // Cut only the layer-2 input path: lower layers must see exactly zero.
        let mut cut = model.clone();
        cut.param_mut("rnn.1.w_ih").unwrap().data_mut().fill(0.0);
        let grads = regularizer_grads(&cut);
        for (n, g) in names.iter().zip(&grads) {
            if lower(n) {
                ensure!(!nonzero(g), "{cell}: {n} still receives gradient with rnn.1.w_ih = 0");
            }
        }
        ensure!(
            nonzero(&grads[names.iter().position(|n| n == "rnn.1.w_hh").unwrap()]),
            "{cell}: layer-2 recurrent weights lost their gradient"
        );

        // Zero every layer-2 weight: the final outputs vanish and so does every gradient.
        let mut zeroed = model.clone();
        for n in ["rnn.1.w_ih", "rnn.1.w_hh", "rnn.1.bias"] {
            zeroed.param_mut(n).unwrap().data_mut().fill(0.0);
        }
        let grads = regularizer_grads(&zeroed);
        for (n, g) in names.iter().zip(&grads) {
            ensure!(!nonzero(g), "{cell}: {n} has non-zero gradient with layer 2 zeroed");
        }
        detail.push(cell.to_string());
    }
    Ok(format!(
        "{}: lower layers reached only via layer-2 input weights; zero layer 2 gives exactly zero gradients",
        detail.join(", ")
    ))
}

fn overfit_sanity() -> Check {
    let text = tiny_text(1000, 1);
    let corpus = Corpus::from_texts(&text, &text, None).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        max_epochs: 200,
        ..tiny_config()
    };
    let started = Instant::now();
    let out = train(&corpus, &config, |_| Ok(())).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let first = out.state.history.iter().find(|r| r.train_ppl < 1.5);
    let last = out.state.history.last().map(|r| r.train_ppl).unwrap_or(f64::NAN);
    ensure!(first.is_some(), "training perplexity never below 1.5 (last {last:.3})");
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "{} tokens, H=32 LSTM: train ppl < 1.5 at epoch {}, {last:.3} after {} epochs, {secs:.1}s",
        corpus.train.len(),
        first.unwrap().epoch,
        out.state.history.len()
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn directional_effects() -> Check {
    let corpus = Corpus::from_texts(&tiny_text(1000, 1), &tiny_text(300, 2), None).map_err(|e| e.to_string())?;
    let data = batchify(&corpus.train, 4).map_err(|e| e.to_string())?;
    let run = |alpha: f64, beta: f64| -> Result<(f64, f64, f64), String> {
        let mut norms = Vec::new();
        let mut diffs = Vec::new();
        let mut ppls = Vec::new();
        for seed in 1..=3 {
            let config = TrainConfig {
                alpha,
                beta,
                seed,
                max_epochs: 30,
                ..tiny_config()
            };
            let out = train(&corpus, &config, |_| Ok(())).map_err(|e| e.to_string())?;
            let stats = activation_stats(&out.model, &data, config.bptt).map_err(|e| e.to_string())?;
            norms.push(stats.mean_norm);
            diffs.push(stats.mean_temporal_diff);
            ppls.push(out.state.best_valid_ppl);
        }
        Ok((median(norms), median(diffs), median(ppls)))
    };
    let (base_norm, base_diff, base_ppl) = run(0.0, 0.0)?;
    let (ar_norm, _, ar_ppl) = run(5.0, 0.0)?;
    let (_, tar_diff, tar_ppl) = run(0.0, 5.0)?;
    let ar_cut = 1.0 - ar_norm / base_norm;
    let tar_cut = 1.0 - tar_diff / base_diff;
    let note = format!(
        "activation norm {base_norm:.3} -> {ar_norm:.1e} ({:.0}% lower) with alpha=5; temporal diff {base_diff:.3} -> {tar_diff:.1e} ({:.0}% lower) with beta=5; median valid ppl {base_ppl:.2} / alpha=5 {ar_ppl:.2} / beta=5 {tar_ppl:.2} (not gated)",
        100.0 * ar_cut,
        100.0 * tar_cut
    );
    ensure!(ar_cut >= 0.2, "AR reduction below 20%: {note}");
    ensure!(tar_cut >= 0.2, "TAR reduction below 20%: {note}");
    Ok(note)
}

/// Token-weighted `exp(CE)` over a batched stream, recomputed with an
/// explicit log-sum-exp from the model's logits.
fn perplexity_oracle(model: &LanguageModel, ids: &[usize], batch: usize, bptt: usize) -> f64 {
    let data = batchify(ids, batch).unwrap();
    let v = model.config().vocab_size;
    let mut state = RnnState::zeros(model.config(), batch);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut nll, mut count) = (0.0, 0usize);
    for offset in data.slice_offsets(bptt) {
        let slice = data.bptt_slice(offset, bptt).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &vars, &slice.inputs, slice.len, &state, false, &mut rng).unwrap();
        for (row, &target) in tape.value(out.logits).data().chunks(v).zip(&slice.targets) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            nll += lse - row[target];
            count += 1;
        }
        state = out.state;
    }
    (nll / count as f64).exp()
}

fn trainer_protocol() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..1000 {
        let mut grads: Vec<Tensor> = (0..rng.gen_range(1..6))
            .map(|_| {
                let n = rng.gen_range(1..30);
                let scale = 10f64.powf(rng.gen_range(-3.0..6.0));
                Tensor::from_vec(&[n], (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        clip_gradients(&mut grads, 10.0);
        let norm = global_norm(&grads);
        ensure!(norm <= 10.0 + 1e-9, "trial {trial}: post-clip norm {norm}");
    }

    let corpus = Corpus::from_texts(&tiny_text(1000, 3), &tiny_text(200, 4), None).map_err(|e| e.to_string())?;
    let plateau = TrainConfig {
        lr0: 20.0,
        clip_norm: 1e-300,
        weight_decay: 0.0,
        max_epochs: 4,
        ..tiny_config()
    };
    let out = train(&corpus, &plateau, |_| Ok(())).map_err(|e| e.to_string())?;
    let lrs: Vec<f64> = out.state.history.iter().map(|r| r.lr).collect();
    ensure!(lrs == [20.0, 20.0, 5.0, 1.25], "forced-plateau rates {lrs:?}");

    // 1001 tokens, batch 4, bptt 35: 250 steps, so the final slice is short.
    let config = TrainConfig {
        dp: 0.0,
        dp_h: 0.0,
        ..tiny_config()
    };
    let data = batchify(&corpus.train, config.batch_size).unwrap();
    ensure!(!(data.n_steps() - 1).is_multiple_of(config.bptt), "expected a short final slice");
    let model = LanguageModel::init(config.model_config(corpus.vocab.len()), &mut ChaCha8Rng::seed_from_u64(2))
        .map_err(|e| e.to_string())?;
    let oracle = perplexity_oracle(&model, &corpus.train, config.batch_size, config.bptt);
    let frozen = TrainState::new(0.0);
    let mut reported = Vec::new();
    for (alpha, beta) in [(0.0, 0.0), (5.0, 2.0), (1e4, 1e4)] {
        let mut m = model.clone();
        let cfg = TrainConfig { alpha, beta, ..config.clone() };
        let ppl = run_epoch(&mut m, &data, &cfg, &frozen, &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
        ensure!(close(ppl, oracle, 1e-9), "alpha={alpha} beta={beta}: reported {ppl} vs exp(CE) {oracle}");
        reported.push(ppl);
    }

    let state = RnnState::zeros(model.config(), config.batch_size);
    let slice = data.bptt_slice(0, config.bptt).unwrap();
    let big = TrainConfig { alpha: 1e3, ..config.clone() }.regularization();
    let mut g = slice_gradients(&model, &slice, &state, &big, &mut rng).map_err(|e| e.to_string())?.grads;
    let before = global_norm(&g);
    clip_gradients(&mut g, 10.0);
    ensure!(before > 10.0 && global_norm(&g) <= 10.0 + 1e-9, "model gradient clip {before} -> {}", global_norm(&g));

    let small = TrainConfig {
        max_epochs: 3,
        dp: 0.5,
        dp_h: 0.4,
        alpha: 5.0,
        beta: 2.0,
        ..tiny_config()
    };
    let a = train(&corpus, &small, |_| Ok(())).map_err(|e| e.to_string())?;
    let b = train(&corpus, &small, |_| Ok(())).map_err(|e| e.to_string())?;
    ensure!(a.state.history == b.state.history, "history differs between identical runs");
    ensure!(a.model.params() == b.model.params(), "parameters differ between identical runs");

    Ok(format!(
        "post-clip norm <= 10 on 1000 random sets and a model gradient of norm {before:.1}; rates {lrs:?}; reported ppl {:.6} = exp(CE) for alpha,beta in {{0, 5/2, 1e4}}; identical histories",
        reported[0]
    ))
}

fn tying_contract() -> Check {
    let config = ModelConfig {
        cell: CellKind::Lstm,
        vocab_size: 6,
        hidden_size: 4,
        num_layers: 2,
        dp: 0.0,
        dp_h: 0.0,
        tied: true,
    };
    let model = LanguageModel::init(config.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let probe = |m: &LanguageModel| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let emb = embedding_lookup(&mut tape, vars.embedding, &[2, 3], 1, 2).unwrap();
        let outputs = tape.tensor_from(&[1, 1, 4], vec![0.5, -0.3, 0.8, 0.1], false).unwrap();
        let logits = decoder_logits(&mut tape, vars.decoder_weight, outputs, vars.decoder_bias).unwrap();
        (tape.value(emb).data().to_vec(), tape.value(logits).data().to_vec())
    };
    let (emb0, logits0) = probe(&model);
    let mut bumped = model.clone();
    bumped.param_mut("embedding.weight").unwrap().data_mut()[2 * 4 + 1] += 0.5;
    let (emb1, logits1) = probe(&bumped);
    let emb_changed: Vec<usize> = (0..8).filter(|&i| emb0[i] != emb1[i]).collect();
    let logit_changed: Vec<usize> = (0..6).filter(|&i| logits0[i] != logits1[i]).collect();
    let tying_ok = emb_changed == [1] && logit_changed == [2];

    // Embedding V·H shared with the decoder, two LSTM layers of 4·(2H·H + H),
    // decoder bias V.
    let (v, h) = (10_000usize, 650usize);
    let formula = v * h + 2 * 4 * (2 * h * h + h) + v;
    let ptb = ModelConfig {
        vocab_size: v,
        hidden_size: h,
        ..config
    };
    let count = ptb.parameter_count();
    let rel = (count as f64 - 13e6).abs() / 13e6;
    let detail = format!(
        "perturbing one stored weight changed embedding entries {emb_changed:?} and logits {logit_changed:?}; h=650 count {count} (formula {formula}) is {:.2}% from 13M",
        100.0 * rel
    );
    ensure!(tying_ok, "tying: {detail}");
    ensure!(count == formula, "count mismatch: {detail}");
    ensure!(rel <= 0.02, "count outside 2% of 13M: {detail}");
    Ok(detail)
}

fn corpus_batching() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..1000 {
        let len = rng.gen_range(2..600);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..40)).collect();
        let batch = rng.gen_range(1..=len.min(24));
        let bptt = rng.gen_range(1..60);
        let data = batchify(&ids, batch).map_err(|e| e.to_string())?;
        let n = len / batch;
        ensure!(data.n_steps() == n, "trial {trial}: n_steps {} vs {n}", data.n_steps());
        let joined: Vec<usize> = (0..batch).flat_map(|b| data.column(b)).collect();
        ensure!(joined == ids[..n * batch], "trial {trial}: columns do not rebuild the stream");
        if n < 2 {
            ensure!(data.bptt_slice(0, bptt).is_err(), "trial {trial}: slice on single-row corpus");
            continue;
        }
        let mut covered = vec![0u32; n];
        for offset in data.slice_offsets(bptt) {
            let s = data.bptt_slice(offset, bptt).map_err(|e| e.to_string())?;
            ensure!(s.len == bptt.min(n - 1 - offset), "trial {trial}: length at {offset}");
            for t in 0..s.len {
                for b in 0..batch {
                    ensure!(s.inputs[t * batch + b] == data.at(offset + t, b), "trial {trial}: input");
                    ensure!(
                        s.targets[t * batch + b] == data.at(offset + t + 1, b),
                        "trial {trial}: target misaligned at ({t}, {b})"
                    );
                }
                covered[offset + t + 1] += 1;
            }
        }
        ensure!(covered[0] == 0 && covered[1..].iter().all(|&c| c == 1), "trial {trial}: coverage");
        ensure!(data.bptt_slice(n - 1, bptt).is_err(), "trial {trial}: out-of-range offset accepted");
    }

    let ptb = std::env::var_os("ARLM_PTB_TRAIN")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ptb/ptb.train.txt"));
    let ptb_note = if ptb.exists() {
        let text = std::fs::read_to_string(&ptb).map_err(|e| e.to_string())?;
        let vocab = Vocabulary::from_lines(text.lines()).map_err(|e| e.to_string())?;
        ensure!(vocab.len() == 10_000, "PTB vocabulary {} != 10000", vocab.len());
        format!("PTB vocabulary 10000 from {}", ptb.display())
    } else {
        "PTB train file not supplied, vocabulary check skipped".to_string()
    };
    Ok(format!("coverage and alignment on 1000 random corpora; {ptb_note}"))
}

fn sampler() -> Check {
    let vocab = Vocabulary::from_lines(["the cat sat on the mat", "a dog ran home", "<unk> words"]).unwrap();
    let config = ModelConfig {
        cell: CellKind::Lstm,
        vocab_size: vocab.len(),
        hidden_size: 8,
        num_layers: 2,
        dp: 0.5,
        dp_h: 0.4,
        tied: true,
    };
    let mut model = LanguageModel::init(config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let bias = model.param_mut("decoder.bias").unwrap();
    bias.data_mut()[vocab.eos_id()] = 3.0;
    bias.data_mut()[vocab.unk_id()] = 3.0;
    let cfg = SamplerConfig::new(&vocab, 10_000, 11);
    let words = generate(&model, &cfg).map_err(|e| e.to_string())?;
    ensure!(words.len() == 10_000, "generated {} tokens", words.len());
    let excluded: BTreeSet<usize> = [vocab.eos_id(), vocab.unk_id()].into();
    let hits = words.iter().filter(|w| excluded.contains(w)).count();
    ensure!(hits == 0, "{hits} excluded tokens generated");

    let cases: [(&[&str], &str); 3] = [
        (&["4", "@.@", "9", "million", "viewers"], "4.9 million viewers"),
        (&["high", "@-@", "quality"], "high-quality"),
        (&["plain", "words"], "plain words"),
    ];
    for (tokens, want) in cases {
        let got = moses_detokenize(tokens);
        ensure!(got == want, "{tokens:?} -> {got:?}, expected {want:?}");
    }
    Ok("0 excluded ids in 10000 sampled tokens; \"4 @.@ 9\" -> \"4.9\", \"@-@\" joined".into())
}

fn checkpoint() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = Corpus::from_texts(&tiny_text(300, 1), &tiny_text(100, 2), None).unwrap();
    let config = TrainConfig {
        hidden_size: 8,
        max_epochs: 1,
        ..tiny_config()
    };
    let out = train(&corpus, &config, |_| Ok(())).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::from_model(&out.best, &config, &corpus.vocab, &out.state);
    let (first, second) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&first, &ckpt).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&first).map_err(|e| e.to_string())?;
    save_checkpoint(&second, &loaded).map_err(|e| e.to_string())?;
    let (a, b) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    ensure!(a == b, "save -> load -> save changed the file");
    let model = loaded.model().map_err(|e| e.to_string())?;
    ensure!(model.params() == out.best.params(), "parameters changed in round trip");

    let mut wanted = loaded.model_config();
    wanted.hidden_size = 16;
    match loaded.model_for(&wanted) {
        Err(Error::Format { field, detail }) => {
            ensure!(field.contains("embedding.weight"), "unexpected field {field}");
            Ok(format!("{} bytes byte-identical; H=8 into H=16 rejected at {field}: {detail}", a.len()))
        }
        Err(e) => Err(format!("wrong error kind: {e}")),
        Ok(_) => Err("H=8 checkpoint accepted for H=16".into()),
    }
}
