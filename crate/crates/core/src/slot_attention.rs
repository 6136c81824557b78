//! Query sampling and competitive slot aggregation.
//!
//! Each iteration normalizes the slots, attends from slots to the (normalized,
//! projected) tokens with a softmax taken over the slot axis so slots compete
//! for every token, reads out a per-slot weighted mean of the values, and
//! updates the slots with a GRU cell followed by a residual MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{OcvtpError, Result};
use crate::matrix::Matrix;
use crate::params::{self, affine_norm, glorot, linear, param_block, ParamSet};
use crate::scalar::Scalar;

/// Initial bias of the GRU update gate, so fresh slots mostly take the readout.
pub const GRU_UPDATE_BIAS: f64 = 3.0;

/// Added to the weighted-mean denominators so an empty slot reads out zeros.
pub const READOUT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotConfig {
    /// Token / slot channel width.
    pub c: usize,
    /// Attention width.
    pub d: usize,
    pub mlp_hidden: usize,
    pub iterations: usize,
}

impl SlotConfig {
    pub fn new(c: usize) -> Self {
        SlotConfig {
            c,
            d: c,
            mlp_hidden: 2 * c,
            iterations: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.d == 0 || self.mlp_hidden == 0 {
            return Err(OcvtpError::config("slot_attention", "widths must be positive"));
        }
        if self.iterations == 0 {
            return Err(OcvtpError::config("slot_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

param_block! {
    /// Learned Gaussian over query vectors: `q = mu + exp(log_sigma) ⊙ z`.
    QueryDistribution / QueryVars { mu, log_sigma }
}

impl<T: Scalar> QueryDistribution<T> {
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        QueryDistribution {
            mu: glorot(1, c, rng),
            log_sigma: Matrix::zeros(1, c),
        }
    }

    pub fn c(&self) -> usize {
        self.mu.cols()
    }
}

param_block! {
    /// Learnable tensors of the aggregation module.
    SlotWeights / SlotVars {
        norm_in_gain, norm_in_bias,
        w_k, w_v, w_q,
        norm_slot_gain, norm_slot_bias,
        gru_w_z, gru_u_z, gru_b_z,
        gru_w_r, gru_u_r, gru_b_r,
        gru_w_h, gru_u_h, gru_b_h,
        norm_mlp_gain, norm_mlp_bias,
        mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotAttentionParams<T> {
    pub config: SlotConfig,
    pub weights: SlotWeights<T>,
}

impl<T: Scalar> ParamSet<T> for SlotAttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.weights.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.weights.visit_mut(prefix, f);
    }
}

impl<T: Scalar> SlotAttentionParams<T> {
    pub fn init(config: SlotConfig, rng: &mut impl Rng) -> Self {
        let SlotConfig {
            c, d, mlp_hidden, ..
        } = config;
        // Starts out as soft k-means on the normalized inputs: keys, queries
        // and values share one orthonormal map, the recurrent update mostly
        // adopts the readout mapped back, and the residual MLP is silent.
        let shared: Matrix<T> = params::orthonormal(c, d, rng);
        let weights = SlotWeights {
            norm_in_gain: params::ones(c),
            norm_in_bias: params::zeros(c),
            w_k: shared.clone(),
            w_v: shared.clone(),
            w_q: shared.clone(),
            norm_slot_gain: params::ones(c),
            norm_slot_bias: params::zeros(c),
            gru_w_z: glorot(d, c, rng),
            gru_u_z: glorot(c, c, rng),
            gru_b_z: Matrix::filled(1, c, T::lit(GRU_UPDATE_BIAS)),
            gru_w_r: glorot(d, c, rng),
            gru_u_r: glorot(c, c, rng),
            gru_b_r: params::zeros(c),
            gru_w_h: shared.transpose(),
            gru_u_h: Matrix::zeros(c, c),
            gru_b_h: params::zeros(c),
            norm_mlp_gain: params::ones(c),
            norm_mlp_bias: params::zeros(c),
            mlp_w1: glorot(c, mlp_hidden, rng),
            mlp_b1: params::zeros(mlp_hidden),
            mlp_w2: Matrix::zeros(mlp_hidden, c),
            mlp_b2: params::zeros(c),
        };
        SlotAttentionParams { config, weights }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut bad = None;
        self.visit("", &mut |name, m| {
            if bad.is_none() && !m.is_finite() {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(OcvtpError::Validation(format!("non-finite parameter {name}"))),
            None => Ok(()),
        }
    }
}

/// Slots and final-iteration attention of one aggregation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState<T> {
    /// s×c
    pub slots: Matrix<T>,
    /// s×n, softmax over the slot axis (every column sums to 1).
    pub attn: Matrix<T>,
}

impl<T: Scalar> SlotState<T> {
    pub fn s(&self) -> usize {
        self.slots.rows()
    }

    pub fn n(&self) -> usize {
        self.attn.cols()
    }
}

/// Standard-normal noise used to draw `s` queries of width `c`.
pub fn query_noise<T: Scalar>(s: usize, c: usize, seed: u64) -> Matrix<T> {
    params::standard_normal(s, c, &mut params::rng(seed))
}

/// Draws `s` queries `mu + exp(log_sigma) ⊙ z_i`; deterministic in `(dist, s, seed)`.
pub fn sample_queries<T: Scalar>(dist: &QueryDistribution<T>, s: usize, seed: u64) -> Matrix<T> {
    let z = query_noise::<T>(s, dist.c(), seed);
    let mut q = z;
    for i in 0..s {
        for (j, v) in q.row_mut(i).iter_mut().enumerate() {
            *v = dist.mu.get(0, j) + dist.log_sigma.get(0, j).exp() * *v;
        }
    }
    q
}

/// Queries on the tape, differentiable in `mu` and `log_sigma`.
pub fn queries_on_tape<T: Scalar>(tape: &mut Tape<T>, dist: &QueryVars, noise: Matrix<T>) -> Var {
    let z = tape.constant(noise);
    let sigma = tape.exp(dist.log_sigma);
    let scaled = tape.mul_row(z, sigma);
    tape.add_row(scaled, dist.mu)
}

/// Tape handles of one aggregation.
#[derive(Debug, Clone)]
pub struct SlotTrace {
    pub slots: Var,
    pub attn: Var,
    /// Attention of every iteration, last one equal to `attn`.
    pub iteration_attn: Vec<Var>,
}

/// Runs the aggregation on `tape`.
pub fn aggregate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &SlotConfig,
    w: &SlotVars,
    queries: Var,
    tokens: Var,
) -> Result<SlotTrace> {
    let (s, cq) = tape.value(queries).shape();
    let (n, ct) = tape.value(tokens).shape();
    if cq != config.c || ct != config.c {
        return Err(OcvtpError::Shape(format!(
            "aggregate expects width {}, got queries {s}x{cq} and tokens {n}x{ct}",
            config.c
        )));
    }
    if s == 0 || n == 0 {
        return Err(OcvtpError::Shape(format!(
            "aggregate needs at least one slot and token, got s={s} n={n}"
        )));
    }
    let inv_sqrt_d = T::lit(1.0 / (config.d as f64).sqrt());
    let eps = T::lit(READOUT_EPS);

    let x = affine_norm(tape, tokens, w.norm_in_gain, w.norm_in_bias);
    let k = tape.matmul(x, w.w_k);
    let v = tape.matmul(x, w.w_v);

    let mut slots = queries;
    let mut iteration_attn = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let prev = slots;
        let sn = affine_norm(tape, slots, w.norm_slot_gain, w.norm_slot_bias);
        let q = tape.matmul(sn, w.w_q);
        let logits = tape.matmul_bt(q, k);
        let logits = tape.scale(logits, inv_sqrt_d);
        let attn = tape.softmax_cols(logits);
        if !tape.value(attn).is_finite() {
            return Err(OcvtpError::Numerical(format!(
                "non-finite attention at slot iteration {iter}"
            )));
        }
        iteration_attn.push(attn);
        let weights = tape.normalize_rows(attn, eps);
        let updates = tape.matmul(weights, v);

        // GRU cell: updates are the input, previous slots the hidden state.
        let z = gate(tape, updates, prev, w.gru_w_z, w.gru_u_z, w.gru_b_z);
        let z = tape.sigmoid(z);
        let r = gate(tape, updates, prev, w.gru_w_r, w.gru_u_r, w.gru_b_r);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, prev);
        let cand = gate(tape, updates, rh, w.gru_w_h, w.gru_u_h, w.gru_b_h);
        let cand = tape.tanh(cand);
        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, prev);
        let fresh = tape.mul(z, cand);
        let gru = tape.add(kept, fresh);

        let h = affine_norm(tape, gru, w.norm_mlp_gain, w.norm_mlp_bias);
        let h = linear(tape, h, w.mlp_w1, w.mlp_b1);
        let h = tape.relu(h);
        let h = linear(tape, h, w.mlp_w2, w.mlp_b2);
        slots = tape.add(gru, h);
        if !tape.value(slots).is_finite() {
            return Err(OcvtpError::Numerical(format!(
                "non-finite slots at slot iteration {iter}"
            )));
        }
    }
    Ok(SlotTrace {
        slots,
        attn: *iteration_attn.last().expect("iterations >= 1"),
        iteration_attn,
    })
}

fn gate<T: Scalar>(tape: &mut Tape<T>, x: Var, h: Var, wx: Var, wh: Var, b: Var) -> Var {
    let a = tape.matmul(x, wx);
    let c = tape.matmul(h, wh);
    let s = tape.add(a, c);
    tape.add_row(s, b)
}

/// Aggregates `tokens` (n×c) into `queries.rows()` slots.
pub fn aggregate<T: Scalar>(
    params: &SlotAttentionParams<T>,
    queries: &Matrix<T>,
    tokens: &Matrix<T>,
) -> Result<SlotState<T>> {
    aggregate_traced(params, queries, tokens).map(|(state, _)| state)
}

/// Like [`aggregate`], also returning the attention of every iteration.
pub fn aggregate_traced<T: Scalar>(
    params: &SlotAttentionParams<T>,
    queries: &Matrix<T>,
    tokens: &Matrix<T>,
) -> Result<(SlotState<T>, Vec<Matrix<T>>)> {
    params.config.validate()?;
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let w = params.weights.bind(&mut tape, &mut leaves);
    let q = tape.constant(queries.clone());
    let x = tape.constant(tokens.clone());
    let trace = aggregate_on_tape(&mut tape, &params.config, &w, q, x)?;
    let state = SlotState {
        slots: tape.value(trace.slots).clone(),
        attn: tape.value(trace.attn).clone(),
    };
    let iters = trace
        .iteration_attn
        .iter()
        .map(|&a| tape.value(a).clone())
        .collect();
    Ok((state, iters))
}
