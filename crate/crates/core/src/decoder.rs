//! Random-order auto-regressive transformer decoder.
//!
//! The decoder reconstructs all `n` target tokens from a short condition
//! sequence (slots during training, kept tokens when scoring a pruned set).
//! Targets are predicted one at a time in a random order drawn from a seed.
//! The input at permuted step `t` carries the previous target (a learned start
//! token at step 0) tagged with that target's position, plus a query embedding
//! for the position being predicted. Attention is causal over the permuted
//! steps and every step sees the whole condition prefix; condition rows only
//! see each other.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{OcvtpError, Result};
use crate::matrix::Matrix;
use crate::objective::{loss_on_tape, HardMasks, LossKind};
use crate::params::{self, affine_norm, glorot, linear, param_block, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Token channel width (input and output).
    pub c: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    /// Positional table length; the longest sequence the decoder accepts.
    pub n_max: usize,
}

impl DecoderConfig {
    /// Two layers, width 128, four heads, feed-forward 256.
    pub fn new(c: usize, n_max: usize) -> Self {
        DecoderConfig {
            c,
            width: 128,
            heads: 4,
            layers: 2,
            ffn: 256,
            n_max,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("decoder.c", self.c),
            ("decoder.width", self.width),
            ("decoder.heads", self.heads),
            ("decoder.layers", self.layers),
            ("decoder.ffn", self.ffn),
            ("decoder.n_max", self.n_max),
        ] {
            if v == 0 {
                return Err(OcvtpError::config(name, "must be positive"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(OcvtpError::config(
                "decoder.heads",
                format!("width {} not divisible by {} heads", self.width, self.heads),
            ));
        }
        Ok(())
    }
}

param_block! {
    HeadWeights / HeadVars { w_q, w_k, w_v, w_o }
}

param_block! {
    BlockWeights / BlockVars {
        ln1_gain, ln1_bias, attn_out_bias,
        ln2_gain, ln2_bias,
        ff_w1, ff_b1, ff_w2, ff_b2,
    }
}

param_block! {
    DecoderIo / DecoderIoVars {
        cond_in, cond_in_bias,
        tok_in, tok_in_bias,
        start, pos_prev, pos_query,
        final_gain, final_bias,
        head_w, head_b,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<T> {
    pub heads: Vec<HeadWeights<T>>,
    pub block: BlockWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub config: DecoderConfig,
    pub io: DecoderIo<T>,
    pub blocks: Vec<DecoderBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub io: DecoderIoVars,
    pub blocks: Vec<(Vec<HeadVars>, BlockVars)>,
}

impl<T: Scalar> ParamSet<T> for DecoderParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.io.visit(prefix, f);
        for (l, b) in self.blocks.iter().enumerate() {
            for (h, head) in b.heads.iter().enumerate() {
                head.visit(&format!("{prefix}block{l}.head{h}."), f);
            }
            b.block.visit(&format!("{prefix}block{l}."), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.io.visit_mut(prefix, f);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (h, head) in b.heads.iter_mut().enumerate() {
                head.visit_mut(&format!("{prefix}block{l}.head{h}."), f);
            }
            b.block.visit_mut(&format!("{prefix}block{l}."), f);
        }
    }
}

impl<T: Scalar> DecoderParams<T> {
    pub fn init(config: DecoderConfig, rng: &mut impl Rng) -> Self {
        let DecoderConfig {
            c,
            width: w,
            ffn,
            n_max,
            ..
        } = config;
        let dh = config.head_dim();
        let io = DecoderIo {
            cond_in: glorot(c, w, rng),
            cond_in_bias: params::zeros(w),
            tok_in: glorot(c, w, rng),
            tok_in_bias: params::zeros(w),
            start: small(1, w, rng),
            pos_prev: sinusoidal(n_max, w),
            pos_query: sinusoidal(n_max, w),
            final_gain: params::ones(w),
            final_bias: params::zeros(w),
            head_w: glorot(w, c, rng),
            head_b: params::zeros(c),
        };
        let blocks = (0..config.layers)
            .map(|_| DecoderBlock {
                heads: (0..config.heads)
                    .map(|_| HeadWeights {
                        w_q: glorot(w, dh, rng),
                        w_k: glorot(w, dh, rng),
                        w_v: glorot(w, dh, rng),
                        w_o: glorot(dh, w, rng),
                    })
                    .collect(),
                block: BlockWeights {
                    ln1_gain: params::ones(w),
                    ln1_bias: params::zeros(w),
                    attn_out_bias: params::zeros(w),
                    ln2_gain: params::ones(w),
                    ln2_bias: params::zeros(w),
                    ff_w1: glorot(w, ffn, rng),
                    ff_b1: params::zeros(ffn),
                    ff_w2: glorot(ffn, w, rng),
                    ff_b2: params::zeros(w),
                },
            })
            .collect();
        DecoderParams { config, io, blocks }
    }

    pub fn bind(&self, tape: &mut Tape<T>, leaves: &mut Vec<Var>) -> DecoderVars {
        let io = self.io.bind(tape, leaves);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let heads = b.heads.iter().map(|h| h.bind(tape, leaves)).collect();
                (heads, b.block.bind(tape, leaves))
            })
            .collect();
        DecoderVars { io, blocks }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction<T> {
    /// n×c, rows in original token order.
    pub v_prime: Matrix<T>,
    /// `permutation[t]` is the token predicted at step `t`.
    pub permutation: Vec<usize>,
}

fn small<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<T> {
    let mut m: Matrix<T> = params::standard_normal(rows, cols, rng);
    m.scale_assign(T::lit(0.02));
    m
}

/// Standard sine/cosine position table, used as the starting point of both
/// learned position tables so nearby positions start out similar.
fn sinusoidal<T: Scalar>(rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |p, i| {
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / cols as f64);
        let angle = p as f64 * freq;
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut params::rng(seed));
    p
}

/// Attention mask over `[condition (s rows); steps (n rows)]`.
fn prefix_causal_mask(s: usize, n: usize) -> Rc<Vec<bool>> {
    let len = s + n;
    let mut mask = vec![false; len * len];
    for i in 0..len {
        let limit = if i < s { s } else { i + 1 };
        for j in 0..limit {
            mask[i * len + j] = true;
        }
    }
    Rc::new(mask)
}

/// Runs the decoder on the tape and returns the n×c reconstruction in
/// original token order.
pub fn reconstruct_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &DecoderConfig,
    w: &DecoderVars,
    condition: Var,
    targets: Var,
    permutation: &[usize],
) -> Result<Var> {
    let (s, cc) = tape.value(condition).shape();
    let (n, ct) = tape.value(targets).shape();
    if cc != config.c || ct != config.c {
        return Err(OcvtpError::Shape(format!(
            "decoder expects width {}, got condition {s}x{cc} and targets {n}x{ct}",
            config.c
        )));
    }
    if n > config.n_max {
        return Err(OcvtpError::Capacity {
            n,
            n_max: config.n_max,
        });
    }
    if n == 0 || permutation.len() != n {
        return Err(OcvtpError::Shape(format!(
            "permutation of length {} for {n} targets",
            permutation.len()
        )));
    }
    let io = &w.io;

    // step inputs: previous target (start token first) + its position + queried position
    let prev_targets = tape.gather_rows(targets, permutation[..n - 1].to_vec());
    let prev_emb = if n > 1 {
        let e = linear(tape, prev_targets, io.tok_in, io.tok_in_bias);
        let p = tape.gather_rows(io.pos_prev, permutation[..n - 1].to_vec());
        let e = tape.add(e, p);
        tape.concat_rows(&[io.start, e])
    } else {
        io.start
    };
    let query_pos = tape.gather_rows(io.pos_query, permutation.to_vec());
    let steps = tape.add(prev_emb, query_pos);

    let mut x = if s > 0 {
        let cond = linear(tape, condition, io.cond_in, io.cond_in_bias);
        tape.concat_rows(&[cond, steps])
    } else {
        steps
    };
    let mask = prefix_causal_mask(s, n);
    let scale = T::lit(1.0 / (config.head_dim() as f64).sqrt());

    for (heads, b) in &w.blocks {
        let h = affine_norm(tape, x, b.ln1_gain, b.ln1_bias);
        let mut attn_out: Option<Var> = None;
        for head in heads {
            let q = tape.matmul(h, head.w_q);
            let k = tape.matmul(h, head.w_k);
            let v = tape.matmul(h, head.w_v);
            let scores = tape.matmul_bt(q, k);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_rows(scores, Some(mask.clone()));
            let o = tape.matmul(p, v);
            let o = tape.matmul(o, head.w_o);
            attn_out = Some(match attn_out {
                Some(acc) => tape.add(acc, o),
                None => o,
            });
        }
        let a = tape.add_row(attn_out.expect("heads >= 1"), b.attn_out_bias);
        x = tape.add(x, a);
        let h = affine_norm(tape, x, b.ln2_gain, b.ln2_bias);
        let h = linear(tape, h, b.ff_w1, b.ff_b1);
        let h = tape.gelu(h);
        let h = linear(tape, h, b.ff_w2, b.ff_b2);
        x = tape.add(x, h);
    }

    let step_rows = if s > 0 {
        tape.gather_rows(x, (s..s + n).collect())
    } else {
        x
    };
    let y = affine_norm(tape, step_rows, io.final_gain, io.final_bias);
    let out = linear(tape, y, io.head_w, io.head_b);
    // out[t] predicts token permutation[t]; put rows back in token order
    let mut inverse = vec![0; n];
    for (t, &j) in permutation.iter().enumerate() {
        inverse[j] = t;
    }
    let v_prime = tape.gather_rows(out, inverse);
    if !tape.value(v_prime).is_finite() {
        return Err(OcvtpError::Numerical("non-finite decoder output".into()));
    }
    Ok(v_prime)
}

fn check_permutation(p: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &j in p {
        if j >= n || std::mem::replace(&mut seen[j], true) {
            return Err(OcvtpError::Validation(format!(
                "not a permutation of 0..{n}"
            )));
        }
    }
    Ok(())
}

/// Teacher-forced reconstruction of `targets` from `condition` in the random
/// order drawn from `perm_seed`.
pub fn reconstruct<T: Scalar>(
    params: &DecoderParams<T>,
    condition: &Matrix<T>,
    targets: &Matrix<T>,
    perm_seed: u64,
) -> Result<Reconstruction<T>> {
    let permutation = random_permutation(targets.rows(), perm_seed);
    reconstruct_with_permutation(params, condition, targets, permutation)
}

pub fn reconstruct_with_permutation<T: Scalar>(
    params: &DecoderParams<T>,
    condition: &Matrix<T>,
    targets: &Matrix<T>,
    permutation: Vec<usize>,
) -> Result<Reconstruction<T>> {
    params.config.validate()?;
    check_permutation(&permutation, targets.rows())?;
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let w = params.bind(&mut tape, &mut leaves);
    let cond = tape.constant(condition.clone());
    let tgt = tape.constant(targets.clone());
    let v = reconstruct_on_tape(&mut tape, &params.config, &w, cond, tgt, &permutation)?;
    Ok(Reconstruction {
        v_prime: tape.value(v).clone(),
        permutation,
    })
}

/// Reconstruction error of `targets` given `condition` under the chosen loss.
pub fn recon_distance<T: Scalar>(
    params: &DecoderParams<T>,
    condition: &Matrix<T>,
    targets: &Matrix<T>,
    perm_seed: u64,
    loss: LossKind,
    masks: Option<&HardMasks>,
) -> Result<f64> {
    if loss == LossKind::AwMse && masks.is_none() {
        return Err(OcvtpError::config("masks", "aw_mse needs hard masks"));
    }
    let rec = reconstruct(params, condition, targets, perm_seed)?;
    let mut tape = Tape::new();
    let vp = tape.constant(rec.v_prime);
    let tg = tape.constant(targets.clone());
    let l = loss_on_tape(&mut tape, vp, tg, loss, masks)?;
    Ok(tape.value(l).get(0, 0).as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::rng;

    fn tiny() -> (DecoderParams<f64>, Matrix<f64>, Matrix<f64>) {
        let mut r = rng(1);
        let config = DecoderConfig {
            c: 4,
            width: 8,
            heads: 2,
            layers: 2,
            ffn: 16,
            n_max: 8,
        };
        let p = DecoderParams::init(config, &mut r);
        let cond = params::standard_normal(2, 4, &mut r);
        let tgt = params::standard_normal(6, 4, &mut r);
        (p, cond, tgt)
    }

    #[test]
    fn output_shape_and_permutation() {
        let (p, cond, tgt) = tiny();
        let rec = reconstruct(&p, &cond, &tgt, 3).unwrap();
        assert_eq!(rec.v_prime.shape(), (6, 4));
        let mut sorted = rec.permutation.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_given_seed() {
        let (p, cond, tgt) = tiny();
        assert_eq!(
            reconstruct(&p, &cond, &tgt, 9).unwrap(),
            reconstruct(&p, &cond, &tgt, 9).unwrap()
        );
    }

    #[test]
    fn capacity_error_when_sequence_too_long() {
        let (p, cond, _) = tiny();
        let long = Matrix::zeros(9, 4);
        assert!(matches!(
            reconstruct(&p, &cond, &long, 0),
            Err(OcvtpError::Capacity { n: 9, n_max: 8 })
        ));
    }

    #[test]
    fn prediction_ignores_later_targets() {
        let (p, cond, tgt) = tiny();
        let perm = vec![3, 0, 5, 1, 4, 2];
        let base = reconstruct_with_permutation(&p, &cond, &tgt, perm.clone()).unwrap();
        // perturb the targets predicted at steps 3.. ; steps 0..=3 see only steps < t
        let mut changed = tgt.clone();
        for &j in &perm[3..] {
            for v in changed.row_mut(j) {
                *v += 5.0;
            }
        }
        let pert = reconstruct_with_permutation(&p, &cond, &changed, perm.clone()).unwrap();
        for &j in &perm[..4] {
            for k in 0..4 {
                assert!((base.v_prime.get(j, k) - pert.v_prime.get(j, k)).abs() < 1e-12);
            }
        }
        // the step right after the perturbation does see it
        let j = perm[4];
        assert!(base.v_prime.row(j) != pert.v_prime.row(j));
    }

    #[test]
    fn empty_condition_is_allowed() {
        let (p, _, tgt) = tiny();
        let rec = reconstruct(&p, &Matrix::zeros(0, 4), &tgt, 1).unwrap();
        assert_eq!(rec.v_prime.shape(), (6, 4));
    }

    #[test]
    fn aw_mse_distance_requires_masks() {
        let (p, cond, tgt) = tiny();
        assert!(matches!(
            recon_distance(&p, &cond, &tgt, 0, LossKind::AwMse, None),
            Err(OcvtpError::Config { .. })
        ));
        assert!(recon_distance(&p, &cond, &tgt, 0, LossKind::Mse, None).unwrap() > 0.0);
    }

    #[test]
    fn bad_permutation_rejected() {
        let (p, cond, tgt) = tiny();
        assert!(reconstruct_with_permutation(&p, &cond, &tgt, vec![0, 0, 1, 2, 3, 4]).is_err());
    }
}
