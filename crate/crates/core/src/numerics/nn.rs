//! Recurrent building blocks expressed as tape operations.

use rand::Rng;

use super::{ParameterSet, Tape, Var};
use crate::error::{Error, Result};

/// `x W + b` for a row block `x`.
pub fn linear(tape: &mut Tape, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    input: usize,
    output: usize,
    rng: &mut R,
) {
    params.glorot(&format!("{prefix}.w"), input, output, rng);
    params.zeros(&format!("{prefix}.b"), 1, output);
}

pub fn init_gru<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    for gate in ["z", "r", "h"] {
        params.glorot(&format!("{prefix}.w_{gate}"), input, hidden, rng);
        params.glorot(&format!("{prefix}.u_{gate}"), hidden, hidden, rng);
        params.zeros(&format!("{prefix}.b_{gate}"), 1, hidden);
    }
}

/// GRU update applied independently to every row:
///
/// ```text
/// z  = sigmoid(m W_z + h U_z + b_z)
/// r  = sigmoid(m W_r + h U_r + b_r)
/// h~ = tanh(m W_h + (r * h) U_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
pub fn gru_cell(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    m: Var,
    h: Var,
) -> Result<Var> {
    let (mv, hv) = (tape.value(m), tape.value(h));
    if mv.rows() != hv.rows() {
        return Err(Error::Shape {
            op: "gru_cell",
            shapes: format!("{} vs {}", mv.shape_str(), hv.shape_str()),
        });
    }
    let gate = |tape: &mut Tape, name: &str, hin: Var| -> Result<Var> {
        let w = tape.param(params, &format!("{prefix}.w_{name}"))?;
        let u = tape.param(params, &format!("{prefix}.u_{name}"))?;
        let b = tape.param(params, &format!("{prefix}.b_{name}"))?;
        let a = tape.matmul(m, w)?;
        let c = tape.matmul(hin, u)?;
        let s = tape.add(a, c)?;
        tape.add_row(s, b)
    };
    let z_in = gate(tape, "z", h)?;
    let z = tape.sigmoid(z_in);
    let r_in = gate(tape, "r", h)?;
    let r = tape.sigmoid(r_in);
    let rh = tape.mul(r, h)?;
    let cand_in = gate(tape, "h", rh)?;
    let cand = tape.tanh(cand_in);
    // h + z * (h~ - h) == (1 - z) * h + z * h~
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

pub fn init_lstm<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    params.glorot(&format!("{prefix}.w"), input, 4 * hidden, rng);
    params.glorot(&format!("{prefix}.u"), hidden, 4 * hidden, rng);
    params.zeros(&format!("{prefix}.b"), 1, 4 * hidden);
}

/// One LSTM step on `1 x input` row `x`. Gate order in the packed weights is
/// input, forget, candidate, output.
pub fn lstm_cell(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    x_proj: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.value(h).cols();
    let u = tape.param(params, &format!("{prefix}.u"))?;
    let hu = tape.matmul(h, u)?;
    let pre = tape.add(x_proj, hu)?;
    let i_in = tape.slice_cols(pre, 0, hidden)?;
    let f_in = tape.slice_cols(pre, hidden, 2 * hidden)?;
    let g_in = tape.slice_cols(pre, 2 * hidden, 3 * hidden)?;
    let o_in = tape.slice_cols(pre, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i_in);
    let f = tape.sigmoid(f_in);
    let g = tape.tanh(g_in);
    let o = tape.sigmoid(o_in);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Runs a unidirectional LSTM over the rows of `seq`, returning the hidden
/// state for every position (in input order even when `reverse` is set).
pub fn lstm_sequence(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    seq: Var,
    reverse: bool,
) -> Result<Var> {
    let len = tape.value(seq).rows();
    if len == 0 {
        return Err(Error::invalid("lstm over an empty sequence"));
    }
    let hidden = params.get(&format!("{prefix}.u"))?.rows();
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    // input projections for every step in one product
    let xw = tape.matmul(seq, w)?;
    let proj = tape.add_row(xw, b)?;
    let mut h = tape.constant(super::Tensor::zeros(1, hidden));
    let mut c = tape.constant(super::Tensor::zeros(1, hidden));
    let mut states = vec![h; len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        let xp = tape.row(proj, t)?;
        let (nh, nc) = lstm_cell(tape, params, prefix, xp, h, c)?;
        h = nh;
        c = nc;
        states[t] = h;
    }
    tape.concat_rows(&states)
}

pub fn init_bilstm<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    init_lstm(params, &format!("{prefix}.fwd"), input, hidden, rng);
    init_lstm(params, &format!("{prefix}.bwd"), input, hidden, rng);
}

/// Bidirectional LSTM: row `t` is `[forward_t ; backward_t]`, width `2 * hidden`.
pub fn bilstm(tape: &mut Tape, params: &ParameterSet, prefix: &str, seq: Var) -> Result<Var> {
    let f = lstm_sequence(tape, params, &format!("{prefix}.fwd"), seq, false)?;
    let b = lstm_sequence(tape, params, &format!("{prefix}.bwd"), seq, true)?;
    tape.concat_cols(&[f, b])
}
