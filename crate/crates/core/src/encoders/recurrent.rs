//! Length-masked RNN and LSTM layers over flattened `[batch * width, dim]`
//! sequences.

use rand::Rng;

use super::{zeros_const, ForwardCtx, SeqBatch};
use crate::error::{Error, Result};
use crate::tensor::{init_uniform_fan_in, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Reads each row from its last real token back to position 0.
    Backward,
}

impl Direction {
    /// Sequence position visited at `step`. Backward maps real positions
    /// onto their mirror and leaves padding in place, so it is an involution.
    fn position(self, step: usize, len: usize) -> usize {
        match self {
            Direction::Backward if step < len => len - 1 - step,
            _ => step,
        }
    }
}

/// `x W_ih + h W_hh + b`, with the LSTM gates packed as `[i | f | g | o]`.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

impl RecurrentWeights {
    pub(crate) fn bind(ctx: &ForwardCtx<'_>, prefix: &str) -> Result<Self> {
        Ok(RecurrentWeights {
            w_ih: ctx.param(&format!("{prefix}.w_ih"))?,
            w_hh: ctx.param(&format!("{prefix}.w_hh"))?,
            bias: ctx.param(&format!("{prefix}.b"))?,
        })
    }
}

pub(crate) fn init<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    lstm: bool,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    let gates = if lstm { 4 } else { 1 };
    store.insert(format!("{prefix}.w_ih"), init_uniform_fan_in(rng, input, gates * hidden));
    store.insert(format!("{prefix}.w_hh"), init_uniform_fan_in(rng, hidden, gates * hidden));
    let mut b = Tensor::zeros(&[gates * hidden]);
    if lstm {
        b.data_mut()[hidden..2 * hidden].fill(1.0);
    }
    store.insert(format!("{prefix}.b"), b);
}

/// Plain tanh RNN layer.
pub fn rnn_layer(
    tape: &mut Tape,
    w: &RecurrentWeights,
    x: Var,
    lengths: &[usize],
    width: usize,
    dir: Direction,
) -> Result<Var> {
    run(tape, w, false, x, lengths, width, dir)
}

/// Four-gate LSTM layer.
pub fn lstm_layer(
    tape: &mut Tape,
    w: &RecurrentWeights,
    x: Var,
    lengths: &[usize],
    width: usize,
    dir: Direction,
) -> Result<Var> {
    run(tape, w, true, x, lengths, width, dir)
}

pub(crate) fn run(
    tape: &mut Tape,
    w: &RecurrentWeights,
    lstm: bool,
    x: Var,
    lengths: &[usize],
    width: usize,
    dir: Direction,
) -> Result<Var> {
    let op = if lstm { "lstm_layer" } else { "rnn_layer" };
    let gates = if lstm { 4 } else { 1 };
    let batch = lengths.len();
    let xs = tape.shape(x).to_vec();
    let hh = tape.shape(w.w_hh).to_vec();
    let ih = tape.shape(w.w_ih).to_vec();
    let hidden = hh.first().copied().unwrap_or(0);
    if xs.len() != 2 || xs[0] != batch * width || lengths.iter().any(|&l| l == 0 || l > width) {
        return Err(Error::op(
            op,
            format!("input {xs:?} does not match {batch} rows of width {width} with lengths {lengths:?}"),
        ));
    }
    if hh != [hidden, gates * hidden] || ih != [xs[1], gates * hidden] {
        return Err(Error::shape(op, &ih, &hh));
    }
    if tape.shape(w.bias) != [gates * hidden] {
        return Err(Error::shape(op, &[gates * hidden], tape.shape(w.bias)));
    }

    let xw = tape.matmul(x, w.w_ih)?;
    let xw = tape.add(xw, w.bias)?;
    let zeros = zeros_const(tape, &[batch, hidden]);
    let (mut h, mut c) = (zeros, zeros);
    let mut outputs = Vec::with_capacity(width);
    for step in 0..width {
        let rows: Vec<usize> = lengths
            .iter()
            .enumerate()
            .map(|(r, &len)| r * width + dir.position(step, len))
            .collect();
        let live: Vec<bool> = lengths.iter().map(|&len| step < len).collect();
        let xt = tape.gather_rows(xw, &rows)?;
        let hw = tape.matmul(h, w.w_hh)?;
        let pre = tape.add(xt, hw)?;
        let (h_new, c_new) = if lstm {
            let i = tape.narrow(pre, 1, 0, hidden)?;
            let i = tape.sigmoid(i)?;
            let f = tape.narrow(pre, 1, hidden, hidden)?;
            let f = tape.sigmoid(f)?;
            let g = tape.narrow(pre, 1, 2 * hidden, hidden)?;
            let g = tape.tanh(g)?;
            let o = tape.narrow(pre, 1, 3 * hidden, hidden)?;
            let o = tape.sigmoid(o)?;
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            let c_new = tape.add(fc, ig)?;
            let tc = tape.tanh(c_new)?;
            (tape.mul(o, tc)?, c_new)
        } else {
            (tape.tanh(pre)?, c)
        };
        if live.iter().all(|&l| l) {
            h = h_new;
            c = c_new;
        } else {
            h = tape.select_rows(&live, h_new, h)?;
            if lstm {
                c = tape.select_rows(&live, c_new, c)?;
            }
        }
        outputs.push(h);
    }
    // outputs are step-major; put every state back at the position it read
    let stacked = tape.concat(&outputs, 0)?;
    let order: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(r, &len)| (0..width).map(move |p| dir.position(p, len) * batch + r))
        .collect();
    tape.gather_rows(stacked, &order)
}

/// Forward and backward layers side by side, concatenated per position.
pub(crate) fn bidirectional(
    ctx: &mut ForwardCtx<'_>,
    prefix: &str,
    lstm: bool,
    x: Var,
    batch: &SeqBatch,
) -> Result<Var> {
    let fw = RecurrentWeights::bind(ctx, &format!("{prefix}.fwd"))?;
    let bw = RecurrentWeights::bind(ctx, &format!("{prefix}.bwd"))?;
    let f = run(ctx.tape, &fw, lstm, x, batch.lengths(), batch.width(), Direction::Forward)?;
    let b = run(ctx.tape, &bw, lstm, x, batch.lengths(), batch.width(), Direction::Backward)?;
    ctx.tape.concat(&[f, b], 1)
}
