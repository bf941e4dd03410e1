//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of the backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{encode_batch, init_encoder, EncoderConfig, EncoderKind, ForwardCtx, SeqBatch};
use crate::error::Result;
use crate::tensor::{Binding, ParamStore, Tape, Tensor, Var};

/// Denominator floor for the relative error, so that gradients which are
/// both essentially zero do not produce spurious large ratios.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if self.worst.is_none() || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

/// Checks `d loss / d inputs` for a loss built by `f` from leaf variables.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = leaves.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaves[i].len()]);
        for j in 0..leaves[i].len() {
            let orig = leaves[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(i, j, analytic[j], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Like [`check_gradients`], over every tensor of a parameter store.
pub fn check_param_gradients<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Binding) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let loss = f(&mut tape, &b)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let loss = f(&mut tape, &binding)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let var = binding.get(name)?;
        let len = store.get(name).map(Tensor::len).unwrap_or(0);
        let analytic = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len]);
        for j in 0..len {
            let orig = store.get(name).expect("present").data()[j];
            work.get_mut(name).expect("present").data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[j] = orig;
            report.record(i, j, analytic[j], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Small configuration for end-to-end encoder checks: 2 layers, hidden 8,
/// vocabulary 20, sequences up to 5 tokens, no dropout.
pub fn toy_encoder_config(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig {
        kind,
        num_layers: 2,
        hidden_size: 8,
        input_size: 8,
        dropout: 0.0,
        num_heads: 2,
        residual_cut_layer: None,
        vocab_size: 20,
        max_len: 5,
    }
}

/// Finite-difference check of `d mse(encoder(ids), target) / d params`
/// over a two-row batch (lengths 5 and 3, so padding is exercised).
pub fn check_encoder_gradients(config: &EncoderConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_encoder(config, &mut rng, &mut store)?;
    // move every tensor off its structured initial value (zero biases,
    // unit gains, uniform mix) so each gradient path is exercised
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let v = config.vocab_size;
    let seqs: Vec<Vec<usize>> = [config.max_len, config.max_len.div_ceil(2)]
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(0..v)).collect())
        .collect();
    let batch = SeqBatch::new(&seqs, config.max_len)?;
    let target: Vec<f64> = (0..2 * config.hidden_size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target = Tensor::new(vec![2, config.hidden_size], target)?;
    check_param_gradients(&store, eps, |tape, params| {
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx {
            tape,
            params,
            train: false,
            rng: &mut dummy,
        };
        let out = encode_batch(config, &mut ctx, &batch)?;
        let t = ctx.tape.constant(target.clone());
        ctx.tape.mse(out, t)
    })
}
