//! Pre-norm Transformer encoder with learned positions and optional
//! residual cutting in one block.

use rand::Rng;

use super::{EncoderConfig, ForwardCtx, SeqBatch};
use crate::error::Result;
use crate::tensor::{init_embedding, init_uniform_fan_in, ParamStore, Tensor, Var};

pub(crate) const POS_PARAM: &str = "enc.pos";
const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, w: String, b: String, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert(w, init_uniform_fan_in(rng, fan_in, fan_out));
    store.insert(b, Tensor::zeros(&[fan_out]));
}

fn init_norm(store: &mut ParamStore, prefix: &str, h: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[h], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[h]));
}

pub(crate) fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, l: usize, h: usize, rng: &mut R) {
    let p = format!("enc.b{l}");
    init_norm(store, &format!("{p}.ln1"), h);
    for name in ["q", "k", "v", "o"] {
        init_linear(store, format!("{p}.attn.w{name}"), format!("{p}.attn.b{name}"), h, h, rng);
    }
    init_norm(store, &format!("{p}.ln2"), h);
    init_linear(store, format!("{p}.ffn.w1"), format!("{p}.ffn.b1"), h, 4 * h, rng);
    init_linear(store, format!("{p}.ffn.w2"), format!("{p}.ffn.b2"), 4 * h, h, rng);
}

pub(crate) fn init_globals<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) {
    store.insert(POS_PARAM, init_embedding(rng, config.max_len, config.hidden_size));
    init_norm(store, "enc.ln_f", config.hidden_size);
}

fn linear(ctx: &mut ForwardCtx<'_>, x: Var, w: &str, b: &str) -> Result<Var> {
    let (w, b) = (ctx.param(w)?, ctx.param(b)?);
    let y = ctx.tape.matmul(x, w)?;
    ctx.tape.add(y, b)
}

fn norm(ctx: &mut ForwardCtx<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = ctx.param(&format!("{prefix}.g"))?;
    let b = ctx.param(&format!("{prefix}.b"))?;
    let y = ctx.tape.layer_norm(x, LN_EPS)?;
    let y = ctx.tape.mul(y, g)?;
    ctx.tape.add(y, b)
}

/// `[batch * width, hidden]` in, same shape out, final norm applied.
pub(crate) fn forward(config: &EncoderConfig, ctx: &mut ForwardCtx<'_>, emb: Var, batch: &SeqBatch) -> Result<Var> {
    let (b, t, h) = (batch.batch(), batch.width(), config.hidden_size);
    let nh = config.num_heads;
    let dh = h / nh;

    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let table = ctx.param(POS_PARAM)?;
    let pe = ctx.tape.embedding_lookup(table, &positions)?;
    let x = ctx.tape.add(emb, pe)?;
    let mut x = ctx.dropout(x, config.dropout)?;

    let mask = if batch.lengths().iter().all(|&l| l == t) {
        None
    } else {
        let mut m = Vec::with_capacity(b * nh * t * t);
        for &len in batch.lengths() {
            for _ in 0..nh * t {
                m.extend((0..t).map(|k| if k < len { 0.0 } else { MASKED }));
            }
        }
        Some(ctx.tape.constant(Tensor::new(vec![b * nh, t, t], m)?))
    };

    for l in 0..config.num_layers {
        let p = format!("enc.b{l}");
        let cut = config.cut_layer() == Some(l);

        let a = norm(ctx, x, &format!("{p}.ln1"))?;
        let mut heads = Vec::with_capacity(3);
        for name in ["q", "k", "v"] {
            let y = linear(ctx, a, &format!("{p}.attn.w{name}"), &format!("{p}.attn.b{name}"))?;
            let y = ctx.tape.reshape(y, &[b, t, nh, dh])?;
            let y = ctx.tape.permute(y, &[0, 2, 1, 3])?;
            heads.push(ctx.tape.reshape(y, &[b * nh, t, dh])?);
        }
        let kt = ctx.tape.permute(heads[1], &[0, 2, 1])?;
        let scores = ctx.tape.matmul(heads[0], kt)?;
        let mut scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = ctx.tape.add(scores, m)?;
        }
        let attn = ctx.tape.softmax(scores)?;
        let mixed = ctx.tape.matmul(attn, heads[2])?;
        let mixed = ctx.tape.reshape(mixed, &[b, nh, t, dh])?;
        let mixed = ctx.tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = ctx.tape.reshape(mixed, &[b * t, h])?;
        let out = linear(ctx, mixed, &format!("{p}.attn.wo"), &format!("{p}.attn.bo"))?;
        let out = ctx.dropout(out, config.dropout)?;
        x = if cut { out } else { ctx.tape.add(x, out)? };

        let a = norm(ctx, x, &format!("{p}.ln2"))?;
        let f = linear(ctx, a, &format!("{p}.ffn.w1"), &format!("{p}.ffn.b1"))?;
        let f = ctx.tape.relu(f)?;
        let f = linear(ctx, f, &format!("{p}.ffn.w2"), &format!("{p}.ffn.b2"))?;
        let f = ctx.dropout(f, config.dropout)?;
        x = if cut { f } else { ctx.tape.add(x, f)? };
    }
    norm(ctx, x, "enc.ln_f")
}
