//! Reconstruction losses: plain MSE and the area-weighted MSE.
//!
//! Both losses first average each token's squared error over the channels.
//! MSE then averages over tokens. AW-MSE averages the token errors inside each
//! hard-mask slot and then averages over the non-empty slots, so a token owned
//! by a slot of area `a` carries weight `1 / (a · nonempty)`; a lone token in
//! its own slot counts as much as a whole large object.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{OcvtpError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    #[default]
    AwMse,
}

impl std::str::FromStr for LossKind {
    type Err = OcvtpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "aw_mse" | "aw-mse" | "awmse" => Ok(LossKind::AwMse),
            other => Err(OcvtpError::config("loss", format!("unknown loss kind {other}"))),
        }
    }
}

/// One-hot token-to-slot assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardMasks {
    /// Owning slot of every token (length n).
    pub owner: Vec<usize>,
    /// Tokens per slot (length s); sums to n.
    pub areas: Vec<usize>,
}

impl HardMasks {
    pub fn from_owner(owner: Vec<usize>, s: usize) -> Result<Self> {
        let mut areas = vec![0; s];
        for &o in &owner {
            *areas.get_mut(o).ok_or(OcvtpError::Bounds { index: o, len: s })? += 1;
        }
        Ok(HardMasks { owner, areas })
    }

    /// Validates a dense 0/1 mask against declared areas.
    pub fn from_matrix<T: Scalar>(m: &Matrix<T>, areas: &[usize]) -> Result<Self> {
        let (s, n) = m.shape();
        if areas.len() != s {
            return Err(OcvtpError::Validation(format!(
                "{} areas for {s} mask rows",
                areas.len()
            )));
        }
        let mut owner = Vec::with_capacity(n);
        for j in 0..n {
            let mut found = None;
            for i in 0..s {
                let v = m.get(i, j);
                if v == T::one() {
                    if found.is_some() {
                        return Err(OcvtpError::Validation(format!(
                            "mask column {j} has several owners"
                        )));
                    }
                    found = Some(i);
                } else if v != T::zero() {
                    return Err(OcvtpError::Validation(format!(
                        "mask entry ({i}, {j}) is not 0/1"
                    )));
                }
            }
            owner.push(found.ok_or_else(|| {
                OcvtpError::Validation(format!("mask column {j} has no owner"))
            })?);
        }
        let masks = Self::from_owner(owner, s)?;
        if masks.areas != areas {
            return Err(OcvtpError::Validation(format!(
                "areas {areas:?} disagree with mask row sums {:?}",
                masks.areas
            )));
        }
        Ok(masks)
    }

    pub fn s(&self) -> usize {
        self.areas.len()
    }

    pub fn n(&self) -> usize {
        self.owner.len()
    }

    pub fn nonempty(&self) -> usize {
        self.areas.iter().filter(|&&a| a > 0).count()
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(self.s(), self.n(), |i, j| {
            if self.owner[j] == i {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Per-token AW-MSE weights `1 / (area(owner) · nonempty)`; they sum to 1.
    pub fn token_weights<T: Scalar>(&self) -> Vec<T> {
        let k = T::from_usize(self.nonempty()).expect("count");
        self.owner
            .iter()
            .map(|&o| T::one() / (T::from_usize(self.areas[o]).expect("area") * k))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    /// Per-slot share of `value`. Plain MSE has no slots and reports one entry.
    pub per_slot_contrib: Vec<f64>,
    pub loss_kind: LossKind,
}

fn token_errors<T: Scalar>(v_prime: &Matrix<T>, v: &Matrix<T>) -> Result<Vec<f64>> {
    if v_prime.shape() != v.shape() {
        return Err(OcvtpError::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            v_prime.shape(),
            v.shape()
        )));
    }
    let c = v.cols() as f64;
    Ok((0..v.rows())
        .map(|j| {
            v_prime
                .row(j)
                .iter()
                .zip(v.row(j))
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum::<f64>()
                / c
        })
        .collect())
}

pub fn mse<T: Scalar>(v_prime: &Matrix<T>, v: &Matrix<T>) -> Result<LossReport> {
    let errs = token_errors(v_prime, v)?;
    let value = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    Ok(LossReport {
        value,
        per_slot_contrib: vec![value],
        loss_kind: LossKind::Mse,
    })
}

/// Area-weighted MSE with a dense 0/1 mask `m` (s×n) and its row sums.
pub fn aw_mse<T: Scalar>(
    v_prime: &Matrix<T>,
    v: &Matrix<T>,
    m: &Matrix<T>,
    areas: &[usize],
) -> Result<LossReport> {
    let masks = HardMasks::from_matrix(m, areas)?;
    aw_mse_masks(v_prime, v, &masks)
}

pub fn aw_mse_masks<T: Scalar>(
    v_prime: &Matrix<T>,
    v: &Matrix<T>,
    masks: &HardMasks,
) -> Result<LossReport> {
    let errs = token_errors(v_prime, v)?;
    if masks.n() != errs.len() {
        return Err(OcvtpError::Validation(format!(
            "mask covers {} tokens, reconstruction has {}",
            masks.n(),
            errs.len()
        )));
    }
    let k = masks.nonempty() as f64;
    let mut per_slot = vec![0.0; masks.s()];
    for (j, e) in errs.iter().enumerate() {
        let o = masks.owner[j];
        per_slot[o] += e / masks.areas[o] as f64;
    }
    for p in &mut per_slot {
        *p /= k;
    }
    Ok(LossReport {
        value: per_slot.iter().sum(),
        per_slot_contrib: per_slot,
        loss_kind: LossKind::AwMse,
    })
}

/// Differentiable loss on the tape. `weights` are per-token and constant.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    v_prime: Var,
    target: Var,
    kind: LossKind,
    masks: Option<&HardMasks>,
) -> Result<Var> {
    let diff = tape.sub(v_prime, target);
    let sq = tape.mul(diff, diff);
    match kind {
        LossKind::Mse => Ok(tape.mean(sq)),
        LossKind::AwMse => {
            let masks = masks.ok_or_else(|| {
                OcvtpError::config("masks", "aw_mse needs hard masks")
            })?;
            let n = tape.value(sq).rows();
            if masks.n() != n {
                return Err(OcvtpError::Validation(format!(
                    "mask covers {} tokens, reconstruction has {n}",
                    masks.n()
                )));
            }
            let per_token = tape.row_mean(sq);
            let w = tape.constant(Matrix::from_vec(1, n, masks.token_weights())?);
            Ok(tape.matmul(w, per_token))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop_oracle_aw(errs: &[f64], owner: &[usize], s: usize) -> f64 {
        let mut sums = vec![0.0; s];
        let mut counts = vec![0usize; s];
        for (j, &e) in errs.iter().enumerate() {
            sums[owner[j]] += e;
            counts[owner[j]] += 1;
        }
        let mut total = 0.0;
        let mut k = 0;
        for i in 0..s {
            if counts[i] > 0 {
                total += sums[i] / counts[i] as f64;
                k += 1;
            }
        }
        total / k as f64
    }

    #[test]
    fn mse_zero_and_offset() {
        let v = Matrix::<f64>::from_fn(4, 3, |i, j| (i + j) as f64);
        assert_eq!(mse(&v, &v).unwrap().value, 0.0);
        let shifted = v.map(|x| x + 1.0);
        assert_eq!(mse(&shifted, &v).unwrap().value, 1.0);
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let a = Matrix::<f64>::from_f64_rows(&[&[0.3, -1.2], &[2.0, 0.5], &[-0.7, 0.1]]);
        let b = Matrix::<f64>::from_f64_rows(&[&[1.1, 0.4], &[-0.2, 0.5], &[0.9, -2.3]]);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                acc += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        assert!((mse(&a, &b).unwrap().value - acc / 6.0).abs() < 1e-15);
    }

    #[test]
    fn aw_mse_hand_example() {
        // token errors (1, 1, 1, 9), areas [3, 1]
        let v = Matrix::<f64>::zeros(4, 1);
        let vp = Matrix::<f64>::from_f64_rows(&[&[1.0], &[-1.0], &[1.0], &[3.0]]);
        let masks = HardMasks::from_owner(vec![0, 0, 0, 1], 2).unwrap();
        let m = masks.to_matrix::<f64>();
        let report = aw_mse(&vp, &v, &m, &[3, 1]).unwrap();
        assert!((report.value - 5.0).abs() < 1e-12);
        let oracle = loop_oracle_aw(&[1.0, 1.0, 1.0, 9.0], &[0, 0, 0, 1], 2);
        assert!((report.value - oracle).abs() < 1e-12);
        assert!((report.per_slot_contrib.iter().sum::<f64>() - report.value).abs() < 1e-15);
    }

    #[test]
    fn empty_slots_contribute_nothing() {
        let v = Matrix::<f64>::zeros(3, 2);
        let vp = Matrix::<f64>::filled(3, 2, 2.0);
        let masks = HardMasks::from_owner(vec![0, 2, 2], 3).unwrap();
        let r = aw_mse_masks(&vp, &v, &masks).unwrap();
        assert_eq!(r.per_slot_contrib[1], 0.0);
        assert!((r.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_areas_rejected() {
        let masks = HardMasks::from_owner(vec![0, 1, 1], 2).unwrap();
        let m = masks.to_matrix::<f64>();
        let v = Matrix::<f64>::zeros(3, 1);
        assert!(matches!(
            aw_mse(&v, &v, &m, &[2, 1]),
            Err(OcvtpError::Validation(_))
        ));
        let mut bad = m.clone();
        bad.set(0, 1, 1.0);
        assert!(matches!(
            aw_mse(&v, &v, &bad, &[1, 2]),
            Err(OcvtpError::Validation(_))
        ));
    }

    #[test]
    fn small_slot_token_weight_ratio() {
        // slot 0 holds 5 tokens, slot 1 a single token
        let masks = HardMasks::from_owner(vec![0, 0, 0, 0, 0, 1], 2).unwrap();
        let w = masks.token_weights::<f64>();
        assert!((w[5] / w[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_match_reports() {
        let a = Matrix::<f64>::from_fn(5, 3, |i, j| ((i * 3 + j) as f64).sin());
        let b = Matrix::<f64>::from_fn(5, 3, |i, j| ((i + 2 * j) as f64).cos());
        let masks = HardMasks::from_owner(vec![1, 0, 1, 1, 2], 4).unwrap();
        for kind in [LossKind::Mse, LossKind::AwMse] {
            let mut t = Tape::new();
            let va = t.param(a.clone());
            let vb = t.constant(b.clone());
            let l = loss_on_tape(&mut t, va, vb, kind, Some(&masks)).unwrap();
            let want = match kind {
                LossKind::Mse => mse(&a, &b).unwrap().value,
                LossKind::AwMse => aw_mse_masks(&a, &b, &masks).unwrap().value,
            };
            assert!((t.value(l).get(0, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn aw_mse_without_masks_is_config_error() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Matrix::zeros(2, 2));
        let b = t.constant(Matrix::zeros(2, 2));
        assert!(matches!(
            loss_on_tape(&mut t, a, b, LossKind::AwMse, None),
            Err(OcvtpError::Config { .. })
        ));
    }
}
