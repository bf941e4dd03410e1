//! Stacked biLSTM with a learned scalar mix over all layers, the token
//! embedding layer included.

use super::{recurrent, EncoderConfig, ForwardCtx, SeqBatch};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub(crate) const MIX_WEIGHTS: &str = "enc.mix.s";
pub(crate) const MIX_SCALE: &str = "enc.mix.gamma";

pub(crate) fn init(store: &mut ParamStore, num_layers: usize) {
    store.insert(MIX_WEIGHTS, Tensor::zeros(&[num_layers + 1]));
    store.insert(MIX_SCALE, Tensor::scalar(1.0));
}

/// `softmax(s)` in plain arithmetic.
pub fn scalar_mix_weights(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `gamma * sum_l softmax(s)_l * layers[l]`; `s` has one entry per layer
/// and `gamma` is a scalar.
pub fn scalar_mix(tape: &mut Tape, layers: &[Var], s: Var, gamma: Var) -> Result<Var> {
    if layers.is_empty() || tape.shape(s) != [layers.len()] || !tape.shape(gamma).is_empty() {
        return Err(Error::op(
            "scalar_mix",
            format!(
                "{} layers with mix weights {:?} and scale {:?}",
                layers.len(),
                tape.shape(s),
                tape.shape(gamma)
            ),
        ));
    }
    let w = tape.softmax(s)?;
    let mut acc: Option<Var> = None;
    for (l, &layer) in layers.iter().enumerate() {
        let wl = tape.narrow(w, 0, l, 1)?;
        let wl = tape.reshape(wl, &[])?;
        let term = tape.mul(layer, wl)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.mul(acc.expect("at least one layer"), gamma)
}

pub(crate) fn forward(
    config: &EncoderConfig,
    ctx: &mut ForwardCtx<'_>,
    emb: Var,
    batch: &SeqBatch,
    heads: &[usize],
) -> Result<Var> {
    let mut pooled = vec![ctx.tape.gather_rows(emb, heads)?];
    let mut x = emb;
    for l in 0..config.num_layers {
        let input = ctx.dropout(x, config.dropout)?;
        x = recurrent::bidirectional(ctx, &format!("enc.l{l}"), true, input, batch)?;
        pooled.push(ctx.tape.gather_rows(x, heads)?);
    }
    let s = ctx.param(MIX_WEIGHTS)?;
    let gamma = ctx.param(MIX_SCALE)?;
    scalar_mix(ctx.tape, &pooled, s, gamma)
}
