//! Single-timestep recurrent cells.
//!
//! Each layer stores fused matrices: `w_ih[in × kH]`, `w_hh[H × kH]` and one
//! bias `[kH]`, where `k` is the number of gate blocks (LSTM 4, GRU 3,
//! tanh 1). Block order is `i, f, g, o` for the LSTM and `z, r, n` for the GRU.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

fn hidden_width(tape: &Tape, layer: &LayerVars) -> usize {
    tape.shape(layer.w_hh)[0]
}

fn check_state(tape: &Tape, op: &'static str, x: Var, h: Var, width: usize) -> Result<()> {
    let (xs, hs) = (tape.shape(x), tape.shape(h));
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] || hs[1] != width {
        return Err(Error::shape(
            op,
            format!("input {xs:?} and state {hs:?} for hidden size {width}"),
        ));
    }
    Ok(())
}

/// `x·W + h·U + b` over all gate blocks.
fn fused_preactivation(tape: &mut Tape, layer: &LayerVars, x: Var, h: Var) -> Result<Var> {
    let xw = tape.matmul(x, layer.w_ih)?;
    let hu = tape.matmul(h, layer.w_hh)?;
    let s = tape.add(xw, hu)?;
    tape.add_bias(s, layer.bias)
}

/// Standard LSTM step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(tape: &mut Tape, layer: &LayerVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let width = hidden_width(tape, layer);
    check_state(tape, "lstm_step", x, h, width)?;
    if tape.shape(c) != tape.shape(h) {
        return Err(Error::shape(
            "lstm_step",
            format!("cell {:?} vs hidden {:?}", tape.shape(c), tape.shape(h)),
        ));
    }
    let pre = fused_preactivation(tape, layer, x, h)?;
    let i = tape.narrow_cols(pre, 0, width)?;
    let i = tape.sigmoid(i)?;
    let f = tape.narrow_cols(pre, width, width)?;
    let f = tape.sigmoid(f)?;
    let g = tape.narrow_cols(pre, 2 * width, width)?;
    let g = tape.tanh(g)?;
    let o = tape.narrow_cols(pre, 3 * width, width)?;
    let o = tape.sigmoid(o)?;

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// GRU step: `h' = (1 - z)⊙h + z⊙ñ` with `ñ = tanh(W_n x + U_n (r⊙h) + b_n)`.
pub fn gru_step(tape: &mut Tape, layer: &LayerVars, x: Var, h: Var) -> Result<Var> {
    let width = hidden_width(tape, layer);
    check_state(tape, "gru_step", x, h, width)?;
    let xw = tape.matmul(x, layer.w_ih)?;
    let xw = tape.add_bias(xw, layer.bias)?;
    let u_zr = tape.narrow_cols(layer.w_hh, 0, 2 * width)?;
    let u_n = tape.narrow_cols(layer.w_hh, 2 * width, width)?;
    let hu = tape.matmul(h, u_zr)?;

    let xz = tape.narrow_cols(xw, 0, width)?;
    let hz = tape.narrow_cols(hu, 0, width)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let xr = tape.narrow_cols(xw, width, width)?;
    let hr = tape.narrow_cols(hu, width, width)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;

    let rh = tape.mul(r, h)?;
    let rhu = tape.matmul(rh, u_n)?;
    let xn = tape.narrow_cols(xw, 2 * width, width)?;
    let n = tape.add(xn, rhu)?;
    let n = tape.tanh(n)?;

    let delta = tape.sub(n, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Elman step: `h' = tanh(x·W + h·U + b)`.
pub fn tanh_step(tape: &mut Tape, layer: &LayerVars, x: Var, h: Var) -> Result<Var> {
    let width = hidden_width(tape, layer);
    check_state(tape, "tanh_step", x, h, width)?;
    let pre = fused_preactivation(tape, layer, x, h)?;
    tape.tanh(pre)
}
