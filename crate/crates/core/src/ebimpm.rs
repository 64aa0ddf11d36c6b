//! Enhanced bilateral multi-perspective matching between two token
//! sequences.
//!
//! Both sequences go through one shared BiLSTM. Cross attention gives each
//! token an attentive summary of the other sequence, which an enhancement
//! perceptron fuses with the token's own state. Independently, the raw
//! context states are compared with four matching strategies in both LSTM
//! directions. A shared BiLSTM aggregates `[matching ; enhanced]` per token
//! and max-pooling yields one vector per sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{bilstm, init_bilstm, init_linear, linear};
use crate::numerics::{ParameterSet, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EbimpmConfig {
    /// Per-direction context LSTM width; context states are `2 * hidden` wide.
    pub hidden: usize,
    /// Perspectives `l` per matching strategy and direction.
    pub perspectives: usize,
    /// Per-direction width of the aggregation LSTM.
    pub aggregation_hidden: usize,
}

impl Default for EbimpmConfig {
    fn default() -> Self {
        EbimpmConfig {
            hidden: 64,
            perspectives: 20,
            aggregation_hidden: 64,
        }
    }
}

impl EbimpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.perspectives == 0 || self.aggregation_hidden == 0 {
            return Err(Error::Config(format!(
                "ebimpm widths must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn context_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn match_width(&self) -> usize {
        8 * self.perspectives
    }

    pub fn output_width(&self) -> usize {
        2 * self.aggregation_hidden
    }
}

const STRATEGIES: [&str; 4] = ["full", "maxpool", "att", "maxatt"];
const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

pub fn init_ebimpm<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    word_dim: usize,
    cfg: &EbimpmConfig,
    rng: &mut R,
) {
    let d = cfg.context_width();
    init_bilstm(params, &format!("{prefix}.ctx"), word_dim, cfg.hidden, rng);
    init_linear(params, &format!("{prefix}.enh"), 4 * d, d, rng);
    for s in STRATEGIES {
        for dir in DIRECTIONS {
            params.glorot(
                &format!("{prefix}.mp.{s}.{dir}"),
                cfg.perspectives,
                cfg.hidden,
                rng,
            );
        }
    }
    init_bilstm(
        params,
        &format!("{prefix}.agg"),
        cfg.match_width() + d,
        cfg.aggregation_hidden,
        rng,
    );
}

/// Encodes both sequences with the one shared context BiLSTM.
pub fn context_encode(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    q_emb: Var,
    s_emb: Var,
) -> Result<(Var, Var)> {
    if tape.value(q_emb).rows() == 0 || tape.value(s_emb).rows() == 0 {
        return Err(Error::invalid("context encoding needs non-empty sequences"));
    }
    let p = format!("{prefix}.ctx");
    let q = bilstm(tape, params, &p, q_emb)?;
    let s = bilstm(tape, params, &p, s_emb)?;
    Ok((q, s))
}

/// Row-softmax of `a b^T`: attention of every `a` row over the rows of `b`.
pub fn attention_weights(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let bt = tape.transpose(b);
    let e = tape.matmul(a, bt)?;
    Ok(tape.softmax_rows(e))
}

/// Dot-product attention in both directions: `(q~, S~)`.
pub fn cross_attention(tape: &mut Tape, q: Var, s: Var) -> Result<(Var, Var)> {
    let aq = attention_weights(tape, q, s)?;
    let q_att = tape.matmul(aq, s)?;
    let as_ = attention_weights(tape, s, q)?;
    let s_att = tape.matmul(as_, q)?;
    Ok((q_att, s_att))
}

/// `tanh(f([x ; x~ ; x - x~ ; x * x~]))` row-wise.
pub fn enhance(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    x: Var,
    x_att: Var,
) -> Result<Var> {
    let diff = tape.sub(x, x_att)?;
    let prod = tape.mul(x, x_att)?;
    let cat = tape.concat_cols(&[x, x_att, diff, prod])?;
    let y = linear(tape, params, &format!("{prefix}.enh"), cat)?;
    Ok(tape.tanh(y))
}

/// Matching vectors of every `a` token against sequence `b` (`rows(a) x 8l`).
fn match_one_side(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    a: Var,
    b: Var,
    hidden: usize,
) -> Result<Var> {
    let b_len = tape.value(b).rows();
    let mut parts = Vec::with_capacity(8);
    for (k, dir) in DIRECTIONS.iter().enumerate() {
        let a_h = tape.slice_cols(a, k * hidden, (k + 1) * hidden)?;
        let b_h = tape.slice_cols(b, k * hidden, (k + 1) * hidden)?;
        let w = |tape: &mut Tape, s: &str| tape.param(params, &format!("{prefix}.mp.{s}.{dir}"));

        // full: the forward pass ends at the last token, the backward at the first
        let last = if k == 0 { b_len - 1 } else { 0 };
        let b_last = tape.row(b_h, last)?;
        let wf = w(tape, "full")?;
        parts.push(tape.mp_cosine(a_h, b_last, wf)?);

        let wm = w(tape, "maxpool")?;
        parts.push(tape.mp_cosine_max(a_h, b_h, wm)?);

        // cosine similarity between every pair of rows
        let an = tape.normalize_rows(a_h);
        let bn = tape.normalize_rows(b_h);
        let bnt = tape.transpose(bn);
        let cos = tape.matmul(an, bnt)?;

        let alpha = tape.softmax_rows(cos);
        let att = tape.matmul(alpha, b_h)?;
        let wa = w(tape, "att")?;
        parts.push(tape.mp_cosine(a_h, att, wa)?);

        let argmax: Vec<usize> = {
            let c = tape.value(cos);
            (0..c.rows())
                .map(|i| {
                    let row = c.row(i);
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect()
        };
        let picked = tape.gather_rows(b_h, argmax)?;
        let wx = w(tape, "maxatt")?;
        parts.push(tape.mp_cosine(a_h, picked, wx)?);
    }
    tape.concat_cols(&parts)
}

/// Bilateral matching of context states; perspective weights are shared
/// between the two sides.
pub fn multi_perspective_match(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    q: Var,
    s: Var,
    cfg: &EbimpmConfig,
) -> Result<(Var, Var)> {
    let qm = match_one_side(tape, params, prefix, q, s, cfg.hidden)?;
    let sm = match_one_side(tape, params, prefix, s, q, cfg.hidden)?;
    Ok((qm, sm))
}

/// `r' = maxpool(g([matching ; enhanced]))` for both sides with one shared `g`.
pub fn aggregate_final(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    q_bar: Var,
    q_hat: Var,
    s_bar: Var,
    s_hat: Var,
) -> Result<(Var, Var)> {
    let p = format!("{prefix}.agg");
    let mut side = |bar: Var, hat: Var| -> Result<Var> {
        let cat = tape.concat_cols(&[bar, hat])?;
        let g = bilstm(tape, params, &p, cat)?;
        tape.max_rows(g)
    };
    let rq = side(q_bar, q_hat)?;
    let rs = side(s_bar, s_hat)?;
    Ok((rq, rs))
}

/// `1 x 2 * aggregation_hidden` summaries of both sequences.
#[derive(Clone, Copy, Debug)]
pub struct MatchOutput {
    pub r_q: Var,
    pub r_s: Var,
}

/// Full matching pass from word-embedded sequences.
pub fn ebimpm_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    q_emb: Var,
    s_emb: Var,
    cfg: &EbimpmConfig,
) -> Result<MatchOutput> {
    let (q, s) = context_encode(tape, params, prefix, q_emb, s_emb)?;
    let (q_att, s_att) = cross_attention(tape, q, s)?;
    let q_hat = enhance(tape, params, prefix, q, q_att)?;
    let s_hat = enhance(tape, params, prefix, s, s_att)?;
    let (q_bar, s_bar) = multi_perspective_match(tape, params, prefix, q, s, cfg)?;
    let (r_q, r_s) = aggregate_final(tape, params, prefix, q_bar, q_hat, s_bar, s_hat)?;
    Ok(MatchOutput { r_q, r_s })
}
