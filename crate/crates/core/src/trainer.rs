//! End-to-end training of the query distribution, slot attention and decoder.
//!
//! Every step draws one budget from the budget set, picks a batch of items
//! sharing the same token count, and for each item: samples that many queries,
//! aggregates, derives hard masks from the final attention, reconstructs the
//! item from the slots with a freshly permuted decoder and scores it with the
//! configured loss. Per-item gradients are summed in item order, averaged, and
//! applied by first-order descent (plain or Adam). All randomness is derived
//! from the config seed, so identical inputs give identical checkpoints.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::{random_permutation, reconstruct_on_tape, DecoderConfig, DecoderParams, DecoderVars};
use crate::error::{OcvtpError, Result};
use crate::matrix::Matrix;
use crate::objective::{loss_on_tape, HardMasks, LossKind};
use crate::params::{derive_seed, rng, ParamSet};
use crate::pruner::{hard_masks, prune, prune_from_attention, PadMode, PruneInput, PruneResult};
use crate::scalar::Scalar;
use crate::slot_attention::{
    aggregate_on_tape, queries_on_tape, query_noise, QueryDistribution, QueryVars, SlotAttentionParams, SlotConfig,
    SlotState, SlotVars,
};
use crate::token_store::{TokenCorpus, TokenSequence};

const STREAM_INIT: u64 = 1;
const STREAM_BUDGET: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_QUERY: u64 = 4;
const STREAM_PERM: u64 = 5;
const STREAM_CONDITION: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How items of different token counts are batched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bucketing {
    /// Batches only ever mix items with identical `n`.
    #[default]
    ByTokenCount,
}

/// Model widths not implied by the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub slot_dim: usize,
    pub slot_mlp_hidden: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_ffn: usize,
    /// Positional capacity; defaults to the longest corpus item.
    pub n_max: Option<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            slot_dim: 64,
            slot_mlp_hidden: 128,
            decoder_width: 128,
            decoder_heads: 4,
            decoder_layers: 2,
            decoder_ffn: 256,
            n_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub budget_set: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub slot_iterations: usize,
    /// Progress callback period in steps (0 disables).
    pub eval_every: usize,
    pub bucketing: Bucketing,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Probability that an item is reconstructed from its kept tokens instead
    /// of its slots. Those items train only the decoder; they let the frozen
    /// decoder score kept-token sets later.
    pub token_condition_prob: f64,
    pub model: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            budget_set: vec![32, 64, 128, 192],
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            loss_kind: LossKind::AwMse,
            slot_iterations: 3,
            eval_every: 50,
            bucketing: Bucketing::ByTokenCount,
            optimizer: Optimizer::Sgd,
            grad_clip: None,
            token_condition_prob: 0.0,
            model: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget_set.is_empty() || self.budget_set.contains(&0) {
            return Err(OcvtpError::config("budget_set", "must be a nonempty set of positive budgets"));
        }
        if self.steps == 0 {
            return Err(OcvtpError::config("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(OcvtpError::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OcvtpError::config("learning_rate", "must be positive"));
        }
        if self.slot_iterations == 0 {
            return Err(OcvtpError::config("slot_iterations", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.token_condition_prob) {
            return Err(OcvtpError::config("token_condition_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn validate_for(&self, corpus: &TokenCorpus) -> Result<()> {
        self.validate()?;
        corpus.validate()?;
        let min_n = corpus
            .min_tokens()
            .ok_or_else(|| OcvtpError::config("corpus", "empty corpus"))?;
        if let Some(&b) = self.budget_set.iter().find(|&&b| b > min_n) {
            return Err(OcvtpError::config(
                "budget_set",
                format!("budget {b} exceeds the smallest item ({min_n} tokens)"),
            ));
        }
        Ok(())
    }

    fn slot_config(&self, c: usize) -> SlotConfig {
        SlotConfig {
            c,
            d: self.model.slot_dim,
            mlp_hidden: self.model.slot_mlp_hidden,
            iterations: self.slot_iterations,
        }
    }

    fn decoder_config(&self, c: usize, n_max: usize) -> DecoderConfig {
        DecoderConfig {
            c,
            width: self.model.decoder_width,
            heads: self.model.decoder_heads,
            layers: self.model.decoder_layers,
            ffn: self.model.decoder_ffn,
            n_max,
        }
    }
}

/// Every trainable piece of the pruner.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub query: QueryDistribution<T>,
    pub slot: SlotAttentionParams<T>,
    pub decoder: DecoderParams<T>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub query: QueryVars,
    pub slot: SlotVars,
    pub decoder: DecoderVars,
}

impl<T: Scalar> ParamSet<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        self.query.visit(&format!("{prefix}query."), f);
        self.slot.visit(&format!("{prefix}slot."), f);
        self.decoder.visit(&format!("{prefix}decoder."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        self.query.visit_mut(&format!("{prefix}query."), f);
        self.slot.visit_mut(&format!("{prefix}slot."), f);
        self.decoder.visit_mut(&format!("{prefix}decoder."), f);
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(c: usize, n_max: usize, config: &TrainConfig) -> Result<Self> {
        let slot_config = config.slot_config(c);
        slot_config.validate()?;
        let dec_config = config.decoder_config(c, n_max);
        dec_config.validate()?;
        let mut r = rng(derive_seed(config.seed, &[STREAM_INIT]));
        Ok(Model {
            query: QueryDistribution::init(c, &mut r),
            slot: SlotAttentionParams::init(slot_config, &mut r),
            decoder: DecoderParams::init(dec_config, &mut r),
        })
    }

    pub fn c(&self) -> usize {
        self.query.c()
    }

    pub fn bind(&self, tape: &mut Tape<T>, leaves: &mut Vec<Var>) -> ModelVars {
        ModelVars {
            query: self.query.bind(tape, leaves),
            slot: self.slot.weights.bind(tape, leaves),
            decoder: self.decoder.bind(tape, leaves),
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |_, m| out.push(m.shape()));
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model {
            query: QueryDistribution::init(self.c(), &mut rng(0)),
            slot: SlotAttentionParams::init(self.slot.config, &mut rng(0)),
            decoder: DecoderParams::init(self.decoder.config, &mut rng(0)),
        };
        let mut src = Vec::new();
        self.visit("", &mut |_, m| src.push(m.cast::<U>()));
        let mut it = src.into_iter();
        out.visit_mut("", &mut |_, m| *m = it.next().expect("same layout"));
        out
    }
}

/// What the decoder is conditioned on for one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Slots,
    /// The pad-mode kept set of the item's own tokens (no gradient into the
    /// aggregation).
    KeptTokens,
}

/// Seeds and choices for one item's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ItemSetup {
    pub budget: usize,
    pub query_seed: u64,
    pub perm_seed: u64,
    pub condition: Condition,
    pub loss_kind: LossKind,
}

/// Builds one item's training loss on `tape`. Hard masks come from the final
/// attention unless `fixed_masks` is given; either way they are constants.
pub fn item_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &ModelVars,
    tokens: &Matrix<T>,
    setup: &ItemSetup,
    fixed_masks: Option<&HardMasks>,
) -> Result<(Var, HardMasks)> {
    let c = model.c();
    let noise = query_noise::<T>(setup.budget, c, setup.query_seed);
    let q = queries_on_tape(tape, &vars.query, noise);
    let x = tape.constant(tokens.clone());
    let trace = aggregate_on_tape(tape, &model.slot.config, &vars.slot, q, x)?;
    let masks = match fixed_masks {
        Some(m) => m.clone(),
        None => hard_masks(tape.value(trace.attn)),
    };
    let condition = match setup.condition {
        Condition::Slots => trace.slots,
        Condition::KeptTokens => {
            let kept = prune_from_attention(tape.value(trace.attn), tokens, PadMode::Pad)?;
            tape.constant(kept.kept)
        }
    };
    let perm = random_permutation(tokens.rows(), setup.perm_seed);
    let v_prime = reconstruct_on_tape(tape, &model.decoder.config, &vars.decoder, condition, x, &perm)?;
    let loss = loss_on_tape(tape, v_prime, x, setup.loss_kind, Some(&masks))?;
    Ok((loss, masks))
}

/// Loss value and gradients (in [`ParamSet`] visiting order) of one item.
pub fn item_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    tokens: &Matrix<T>,
    setup: &ItemSetup,
    fixed_masks: Option<&HardMasks>,
) -> Result<(T, Vec<Matrix<T>>, HardMasks)> {
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let vars = model.bind(&mut tape, &mut leaves);
    let (loss, masks) = item_loss_on_tape(&mut tape, model, &vars, tokens, setup, fixed_masks)?;
    let grads = tape.backward(loss);
    let g = leaves
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v).shape()))
        .collect();
    Ok((tape.value(loss).get(0, 0), g, masks))
}

/// Loss value only.
pub fn item_loss<T: Scalar>(
    model: &Model<T>,
    tokens: &Matrix<T>,
    setup: &ItemSetup,
    fixed_masks: Option<&HardMasks>,
) -> Result<(T, HardMasks)> {
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let vars = model.bind(&mut tape, &mut leaves);
    let (loss, masks) = item_loss_on_tape(&mut tape, model, &vars, tokens, setup, fixed_masks)?;
    Ok((tape.value(loss).get(0, 0), masks))
}

/// The trained artifact: parameters plus the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub step: usize,
    pub loss_history: Vec<f64>,
}

impl<T: Scalar> CheckpointBundle<T> {
    pub fn c(&self) -> usize {
        self.model.c()
    }

    pub fn n_max(&self) -> usize {
        self.model.decoder.config.n_max
    }

    /// Prunes one item with the trained query distribution and slot attention.
    pub fn prune(&self, input: &PruneInput<'_, T>, seed: u64) -> Result<(PruneResult<T>, SlotState<T>)> {
        prune(input, &self.model.query, &self.model.slot, seed)
    }
}

/// Budget drawn at every step, uniformly from the budget set.
pub fn budget_schedule(config: &TrainConfig) -> Vec<usize> {
    let mut r = rng(derive_seed(config.seed, &[STREAM_BUDGET]));
    (0..config.steps)
        .map(|_| config.budget_set[r.random_range(0..config.budget_set.len())])
        .collect()
}

fn buckets(corpus: &TokenCorpus) -> Vec<Vec<usize>> {
    let mut by_n: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in corpus.items.iter().enumerate() {
        by_n.entry(item.n()).or_default().push(i);
    }
    by_n.into_values().collect()
}

fn sample_batch(buckets: &[Vec<usize>], total: usize, batch: usize, r: &mut impl Rng) -> Vec<usize> {
    // bucket chosen with probability proportional to its size
    let mut pick = r.random_range(0..total);
    let bucket = buckets
        .iter()
        .find(|b| {
            if pick < b.len() {
                true
            } else {
                pick -= b.len();
                false
            }
        })
        .expect("pick within total");
    let k = batch.min(bucket.len());
    let mut chosen: Vec<usize> = index::sample(r, bucket.len(), k).into_iter().map(|i| bucket[i]).collect();
    chosen.sort_unstable();
    chosen
}

struct OptimizerState<T> {
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
    t: i32,
}

fn apply_update<T: Scalar>(
    model: &mut Model<T>,
    grads: &[Matrix<T>],
    config: &TrainConfig,
    state: &mut OptimizerState<T>,
) {
    let lr = config.learning_rate;
    state.t += 1;
    let mut k = 0;
    match config.optimizer {
        Optimizer::Sgd => {
            let step = T::lit(-lr);
            model.visit_mut("", &mut |_, m| {
                for (p, &g) in m.as_mut_slice().iter_mut().zip(grads[k].as_slice()) {
                    *p += step * g;
                }
                k += 1;
            });
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let b1 = T::lit(beta1);
            let b2 = T::lit(beta2);
            let c1 = T::lit(1.0 - beta1.powi(state.t));
            let c2 = T::lit(1.0 - beta2.powi(state.t));
            let lr = T::lit(lr);
            let eps = T::lit(eps);
            let first = &mut state.first;
            let second = &mut state.second;
            model.visit_mut("", &mut |_, m| {
                let g = grads[k].as_slice();
                let m1 = first[k].as_mut_slice();
                let m2 = second[k].as_mut_slice();
                for (i, p) in m.as_mut_slice().iter_mut().enumerate() {
                    m1[i] = b1 * m1[i] + (T::one() - b1) * g[i];
                    m2[i] = b2 * m2[i] + (T::one() - b2) * g[i] * g[i];
                    let mh = m1[i] / c1;
                    let vh = m2[i] / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
                k += 1;
            });
        }
    }
}

pub fn train<T: Scalar>(corpus: &TokenCorpus, config: &TrainConfig) -> Result<CheckpointBundle<T>> {
    train_with_progress(corpus, config, |_, _| {})
}

/// [`train`] with a callback `(step, loss)` fired every `eval_every` steps and
/// at the last step.
pub fn train_with_progress<T: Scalar>(
    corpus: &TokenCorpus,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<CheckpointBundle<T>> {
    config.validate_for(corpus)?;
    let c = corpus.channels().expect("validated nonempty");
    let longest = corpus.items.iter().map(TokenSequence::n).max().unwrap_or(0);
    let n_max = config.model.n_max.unwrap_or(longest);
    if longest > n_max {
        return Err(OcvtpError::Capacity { n: longest, n_max });
    }
    let mut model = Model::<T>::init(c, n_max, config)?;
    let shapes = model.shapes();
    let mut state = OptimizerState {
        first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        t: 0,
    };
    let tokens: Vec<Matrix<T>> = corpus.items.iter().map(TokenSequence::tokens_as).collect();
    let buckets = buckets(corpus);
    let schedule = budget_schedule(config);
    let mut batch_rng = rng(derive_seed(config.seed, &[STREAM_BATCH]));
    let mut history = Vec::with_capacity(config.steps);

    for (step, &budget) in schedule.iter().enumerate() {
        let batch = sample_batch(&buckets, corpus.len(), config.batch_size, &mut batch_rng);
        let mut total: Option<Vec<Matrix<T>>> = None;
        let mut loss_sum = 0.0;
        for (slot, &item) in batch.iter().enumerate() {
            let coords = [step as u64, slot as u64];
            let use_tokens = config.token_condition_prob > 0.0 && {
                let mut cr = rng(derive_seed(config.seed, &[STREAM_CONDITION, coords[0], coords[1]]));
                cr.random::<f64>() < config.token_condition_prob
            };
            let setup = ItemSetup {
                budget,
                query_seed: derive_seed(config.seed, &[STREAM_QUERY, coords[0], coords[1]]),
                perm_seed: derive_seed(config.seed, &[STREAM_PERM, coords[0], coords[1]]),
                condition: if use_tokens {
                    Condition::KeptTokens
                } else {
                    Condition::Slots
                },
                loss_kind: config.loss_kind,
            };
            let (loss, grads, _) = item_loss_and_grads(&model, &tokens[item], &setup, None).map_err(|e| {
                OcvtpError::Training {
                    step,
                    message: e.to_string(),
                }
            })?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(OcvtpError::Training {
                    step,
                    message: format!("non-finite loss {loss}"),
                });
            }
            loss_sum += loss;
            match &mut total {
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                None => total = Some(grads),
            }
        }
        let mut grads = total.expect("batch nonempty");
        let inv = T::one() / T::from_usize(batch.len()).expect("len");
        let mut norm_sq = 0.0;
        for g in &mut grads {
            g.scale_assign(inv);
            norm_sq += g.as_slice().iter().map(|x| x.as_f64().powi(2)).sum::<f64>();
        }
        if !norm_sq.is_finite() {
            return Err(OcvtpError::Training {
                step,
                message: "non-finite gradient".into(),
            });
        }
        if let Some(clip) = config.grad_clip {
            let norm = norm_sq.sqrt();
            if norm > clip {
                let k = T::lit(clip / norm);
                grads.iter_mut().for_each(|g| g.scale_assign(k));
            }
        }
        apply_update(&mut model, &grads, config, &mut state);
        let mean_loss = loss_sum / batch.len() as f64;
        history.push(mean_loss);
        if (config.eval_every > 0 && (step + 1) % config.eval_every == 0) || step + 1 == config.steps {
            progress(step + 1, mean_loss);
        }
    }
    Ok(CheckpointBundle {
        model,
        config: config.clone(),
        step: config.steps,
        loss_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameter name and flat offset of the worst coordinate.
    pub worst: String,
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (numerically) zero do not divide by noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the full training loss (slot-conditioned,
/// configured loss kind, masks frozen at the unperturbed point) against
/// central finite differences on `n_coords` randomly chosen parameter
/// coordinates. Runs in 64-bit regardless of the checkpoint's scalar type.
pub fn grad_check<T: Scalar>(
    checkpoint: &CheckpointBundle<T>,
    batch: &[TokenSequence],
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(OcvtpError::config("epsilon", "must be positive"));
    }
    if batch.is_empty() {
        return Err(OcvtpError::config("batch", "must hold at least one item"));
    }
    let model: Model<f64> = checkpoint.model.cast();
    let min_n = batch.iter().map(TokenSequence::n).min().unwrap_or(0);
    let budget = checkpoint
        .config
        .budget_set
        .iter()
        .copied()
        .filter(|&b| b <= min_n)
        .min()
        .ok_or_else(|| OcvtpError::config("budget_set", "no budget fits the batch"))?;
    let tokens: Vec<Matrix<f64>> = batch.iter().map(TokenSequence::tokens_as).collect();
    let setups: Vec<ItemSetup> = (0..batch.len())
        .map(|i| ItemSetup {
            budget,
            query_seed: derive_seed(seed, &[STREAM_QUERY, i as u64]),
            perm_seed: derive_seed(seed, &[STREAM_PERM, i as u64]),
            condition: Condition::Slots,
            loss_kind: checkpoint.config.loss_kind,
        })
        .collect();

    let mut masks = Vec::new();
    let mut analytic: Option<Vec<Matrix<f64>>> = None;
    for (x, setup) in tokens.iter().zip(&setups) {
        let (_, g, m) = item_loss_and_grads(&model, x, setup, None)?;
        masks.push(m);
        match &mut analytic {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            None => analytic = Some(g),
        }
    }
    let mut analytic = analytic.expect("batch nonempty");
    let inv = 1.0 / batch.len() as f64;
    analytic.iter_mut().for_each(|g| g.scale_assign(inv));

    let batch_loss = |m: &Model<f64>| -> Result<f64> {
        let mut total = 0.0;
        for ((x, setup), mk) in tokens.iter().zip(&setups).zip(&masks) {
            total += item_loss(m, x, setup, Some(mk))?.0;
        }
        Ok(total * inv)
    };

    let mut names = Vec::new();
    model.visit("", &mut |name, m| names.push((name, m.len())));
    let total: usize = names.iter().map(|(_, l)| l).sum();
    let mut r = rng(derive_seed(seed, &[STREAM_INIT]));
    let picks = index::sample(&mut r, total, n_coords.min(total)).into_vec();

    let mut worst = (0.0f64, String::new());
    for flat in &picks {
        let (mut p, mut off) = (0, *flat);
        while off >= names[p].1 {
            off -= names[p].1;
            p += 1;
        }
        let perturbed = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            let mut k = 0;
            m.visit_mut("", &mut |_, mat| {
                if k == p {
                    mat.as_mut_slice()[off] += delta;
                }
                k += 1;
            });
            batch_loss(&m)
        };
        let numeric = (perturbed(epsilon)? - perturbed(-epsilon)?) / (2.0 * epsilon);
        let a = analytic[p].as_slice()[off];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, format!("{}[{off}] analytic={a:.6e} numeric={numeric:.6e}", names[p].0));
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        checked: picks.len(),
        worst: worst.1,
    })
}
