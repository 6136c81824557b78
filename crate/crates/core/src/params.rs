//! Named parameter blocks, seeded initialization and seed derivation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// A collection of named trainable matrices with a fixed visiting order.
///
/// The order of `visit`, `visit_mut` and the leaves registered by `bind`
/// must agree; gradient vectors and checkpoints are laid out in that order.
pub trait ParamSet<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }
}

/// Declares a struct of matrices, its tape-bound twin of [`Var`]s and the
/// [`ParamSet`] plumbing between them.
macro_rules! param_block {
    ($(#[$meta:meta])* $name:ident / $vars:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: $crate::matrix::Matrix<T>,)+
        }

        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: $crate::autograd::Var,)+
        }

        impl<T: $crate::scalar::Scalar> $name<T> {
            pub fn bind(
                &self,
                tape: &mut $crate::autograd::Tape<T>,
                leaves: &mut Vec<$crate::autograd::Var>,
            ) -> $vars {
                $vars {
                    $($field: $crate::params::leaf(tape, leaves, &self.$field),)+
                }
            }
        }

        impl<T: $crate::scalar::Scalar> $crate::params::ParamSet<T> for $name<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::matrix::Matrix<T>),
            ) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::matrix::Matrix<T>),
            ) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }
        }
    };
}
pub(crate) use param_block;

/// Registers `m` as a trainable leaf and records it in `leaves`.
pub fn leaf<T: Scalar>(tape: &mut Tape<T>, leaves: &mut Vec<Var>, m: &Matrix<T>) -> Var {
    let v = tape.param(m.clone());
    leaves.push(v);
    v
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with stream coordinates (step, item, purpose, ...).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(base ^ 0x6a09_e667_f3bc_c908);
    for &p in parts {
        h = splitmix(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn standard_normal<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Glorot-uniform weight matrix.
pub fn glorot<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-limit..limit)))
}

/// Random matrix with orthonormal columns (or rows, when wider than tall).
pub fn orthonormal<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<T> {
    let (long, short) = (rows.max(cols), rows.min(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    if rows >= cols {
        Matrix::from_fn(rows, cols, |i, j| T::lit(basis[j][i]))
    } else {
        Matrix::from_fn(rows, cols, |i, j| T::lit(basis[i][j]))
    }
}

pub fn ones<T: Scalar>(cols: usize) -> Matrix<T> {
    Matrix::filled(1, cols, T::one())
}

pub fn zeros<T: Scalar>(cols: usize) -> Matrix<T> {
    Matrix::zeros(1, cols)
}

/// Layer norm with learned gain and bias: standardize rows, then scale and shift.
pub fn affine_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.layer_norm(x, T::lit(1e-5));
    let g = tape.mul_row(n, gain);
    tape.add_row(g, bias)
}

/// `x · w + b`
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_coordinate() {
        let a = derive_seed(7, &[1, 2]);
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
        assert_eq!(a, derive_seed(7, &[1, 2]));
    }
}
