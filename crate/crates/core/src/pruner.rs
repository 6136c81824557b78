//! From attention maps to kept tokens.
//!
//! Every slot elects its most-attended token. Elections are deduplicated; in
//! pad mode the deficit is refilled with the not-yet-kept tokens of highest
//! column-max attention so exactly `s` tokens are forwarded. Aggregation reads
//! the reference tokens while the forwarded rows come from the last-layer
//! tokens, which may be a different encoder layer of the same image.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{OcvtpError, Result};
use crate::matrix::Matrix;
use crate::objective::HardMasks;
use crate::scalar::Scalar;
use crate::slot_attention::{aggregate, sample_queries, QueryDistribution, SlotAttentionParams, SlotState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Pad,
    NoPad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneInput<'a, T> {
    /// Reference tokens read by the aggregation (n×c).
    pub v_ref: &'a Matrix<T>,
    /// Tokens gathered into the output (n×c').
    pub v_last: &'a Matrix<T>,
    pub budget: usize,
    pub pad_mode: PadMode,
}

impl<T: Scalar> PruneInput<'_, T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.v_ref.rows();
        if self.v_last.rows() != n {
            return Err(OcvtpError::Shape(format!(
                "reference has {n} tokens, forwarded layer has {}",
                self.v_last.rows()
            )));
        }
        if self.budget == 0 || self.budget > n {
            return Err(OcvtpError::config(
                "budget",
                format!("need 1 <= s <= n = {n}, got {}", self.budget),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult<T> {
    /// Distinct slot elections, ascending.
    pub indices: Vec<usize>,
    /// Refill tokens added in pad mode, ascending.
    pub padded: Vec<usize>,
    /// Everything forwarded (`indices ∪ padded`), ascending.
    pub forwarded: Vec<usize>,
    /// Rows of the forwarded layer at `forwarded`.
    pub kept: Matrix<T>,
    pub masks: HardMasks,
    /// Raw per-slot elections before deduplication.
    pub elections: Vec<usize>,
    pub n_duplicates: usize,
    pub n_padded: usize,
}

impl<T: Scalar> PruneResult<T> {
    pub fn areas(&self) -> &[usize] {
        &self.masks.areas
    }

    pub fn empty_slots(&self) -> usize {
        self.masks.areas.iter().filter(|&&a| a == 0).count()
    }
}

fn check_attention<T: Scalar>(a: &Matrix<T>) -> Result<()> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(OcvtpError::Shape(format!(
            "attention map is empty ({}x{})",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(OcvtpError::Numerical("non-finite attention map".into()));
    }
    Ok(())
}

/// Row-wise argmax; ties go to the lowest token index.
pub fn select_indices<T: Scalar>(a: &Matrix<T>) -> Result<Vec<usize>> {
    check_attention(a)?;
    Ok((0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Per slot, the `k` most-attended tokens (descending attention, ties to the
/// lowest index), concatenated slot-major.
pub fn select_indices_topk<T: Scalar>(a: &Matrix<T>, k: usize) -> Result<Vec<usize>> {
    check_attention(a)?;
    if k == 0 || k > a.cols() {
        return Err(OcvtpError::config(
            "k",
            format!("need 1 <= k <= n = {}, got {k}", a.cols()),
        ));
    }
    let mut out = Vec::with_capacity(a.rows() * k);
    for i in 0..a.rows() {
        let row = a.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).expect("finite").then(x.cmp(&y)));
        out.extend_from_slice(&order[..k]);
    }
    Ok(out)
}

pub fn gather<T: Scalar>(v_last: &Matrix<T>, indices: &[usize]) -> Result<Matrix<T>> {
    v_last.gather_rows(indices)
}

/// Assigns every token to its maximally-attending slot (ties to the lowest slot).
pub fn hard_masks<T: Scalar>(a: &Matrix<T>) -> HardMasks {
    let (s, n) = a.shape();
    let owner = (0..n)
        .map(|j| {
            let mut best = 0;
            for i in 1..s {
                if a.get(i, j) > a.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect();
    HardMasks::from_owner(owner, s).expect("owners within slot range")
}

/// Selection, dedup, padding and gather for a given attention map.
pub fn prune_from_attention<T: Scalar>(
    attn: &Matrix<T>,
    v_last: &Matrix<T>,
    pad_mode: PadMode,
) -> Result<PruneResult<T>> {
    let elections = select_indices(attn)?;
    let s = attn.rows();
    let n = attn.cols();
    if v_last.rows() != n {
        return Err(OcvtpError::Shape(format!(
            "attention covers {n} tokens, forwarded layer has {}",
            v_last.rows()
        )));
    }
    let unique: BTreeSet<usize> = elections.iter().copied().collect();
    let n_duplicates = s - unique.len();
    let mut padded = Vec::new();
    if pad_mode == PadMode::Pad && unique.len() < s {
        let col_max: Vec<T> = (0..n)
            .map(|j| (0..s).map(|i| attn.get(i, j)).fold(T::neg_infinity(), T::max))
            .collect();
        let mut candidates: Vec<usize> = (0..n).filter(|j| !unique.contains(j)).collect();
        candidates.sort_by(|&x, &y| {
            col_max[y]
                .partial_cmp(&col_max[x])
                .expect("finite")
                .then(x.cmp(&y))
        });
        padded = candidates[..s - unique.len()].to_vec();
        padded.sort_unstable();
    }
    let indices: Vec<usize> = unique.into_iter().collect();
    let mut forwarded: Vec<usize> = indices.iter().chain(&padded).copied().collect();
    forwarded.sort_unstable();
    let kept = gather(v_last, &forwarded)?;
    Ok(PruneResult {
        n_padded: padded.len(),
        indices,
        padded,
        forwarded,
        kept,
        masks: hard_masks(attn),
        elections,
        n_duplicates,
    })
}

/// Full pruning pass: sample `budget` queries, aggregate over the reference
/// tokens, then select and gather from the forwarded layer.
pub fn prune<T: Scalar>(
    input: &PruneInput<'_, T>,
    dist: &QueryDistribution<T>,
    params: &SlotAttentionParams<T>,
    seed: u64,
) -> Result<(PruneResult<T>, SlotState<T>)> {
    input.validate()?;
    let queries = sample_queries(dist, input.budget, seed);
    let state = aggregate(params, &queries, input.v_ref)?;
    let result = prune_from_attention(&state.attn, input.v_last, input.pad_mode)?;
    Ok((result, state))
}
