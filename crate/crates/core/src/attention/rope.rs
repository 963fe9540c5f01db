//! Rotary position embedding over adjacent channel pairs.
//!
//! Channel pair `(2j, 2j+1)` of the token at position `m` is rotated by
//! `m · θ_j` with `θ_j = 10000^(−2j/dim)`.

use nalgebra::DMatrix;

use crate::coding_rate::TokenMatrix;
use crate::error::{invalid, Result};

pub const ROPE_BASE: f64 = 10_000.0;

/// Precomputed rotation angles, `max_len × dim/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    max_len: usize,
    dim: usize,
    angles: Vec<f64>,
}

impl RopeTable {
    /// Table whose every angle is zero (identity rotation).
    pub fn zero(max_len: usize, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(invalid(format!("rotary dim must be even, got {dim}")));
        }
        Ok(Self {
            max_len,
            dim,
            angles: vec![0.0; max_len * dim / 2],
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn angle(&self, position: usize, pair: usize) -> f64 {
        self.angles[position * self.dim / 2 + pair]
    }

    /// Rotates one token in place. `inverse` rotates by the negated angles.
    pub fn rotate(&self, token: &mut [f64], position: usize, inverse: bool) {
        debug_assert_eq!(token.len(), self.dim);
        let sign = if inverse { -1.0 } else { 1.0 };
        for pair in 0..self.dim / 2 {
            let (sin, cos) = (sign * self.angle(position, pair)).sin_cos();
            let (a, b) = (token[2 * pair], token[2 * pair + 1]);
            token[2 * pair] = a * cos - b * sin;
            token[2 * pair + 1] = a * sin + b * cos;
        }
    }
}

pub fn rope_precompute(max_len: usize, dim: usize) -> Result<RopeTable> {
    let mut table = RopeTable::zero(max_len, dim)?;
    let half = dim / 2;
    for pair in 0..half {
        let theta = ROPE_BASE.powf(-2.0 * pair as f64 / dim as f64);
        for pos in 0..max_len {
            table.angles[pos * half + pair] = pos as f64 * theta;
        }
    }
    Ok(table)
}

/// Rotates token `j` by position `j`.
pub fn rope_apply(tokens: &TokenMatrix, table: &RopeTable) -> Result<TokenMatrix> {
    let positions: Vec<usize> = (0..tokens.tokens()).collect();
    rope_apply_at(tokens, table, &positions)
}

/// Rotates token `j` by `positions[j]`.
pub fn rope_apply_at(tokens: &TokenMatrix, table: &RopeTable, positions: &[usize]) -> Result<TokenMatrix> {
    if positions.len() != tokens.tokens() {
        return Err(invalid("one position per token is required"));
    }
    if tokens.dim() != table.dim() {
        return Err(invalid(format!(
            "rotary table has dim {}, tokens have dim {}",
            table.dim(),
            tokens.dim()
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= table.max_len()) {
        return Err(invalid(format!(
            "position {p} exceeds rotary table length {}",
            table.max_len()
        )));
    }
    let mut out: DMatrix<f64> = tokens.matrix().clone();
    for (mut col, &pos) in out.column_iter_mut().zip(positions) {
        table.rotate(col.as_mut_slice(), pos, false);
    }
    TokenMatrix::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_identity() {
        let t = rope_precompute(8, 6).unwrap();
        assert!((0..3).all(|j| t.angle(0, j) == 0.0));
    }

    #[test]
    fn two_dim_schedule() {
        let t = rope_precompute(5, 2).unwrap();
        for m in 0..5 {
            assert_eq!(t.angle(m, 0), m as f64);
        }
    }

    #[test]
    fn angle_increments_are_position_independent() {
        let t = rope_precompute(16, 8).unwrap();
        for j in 0..4 {
            let step = t.angle(1, j) - t.angle(0, j);
            for m in 1..15 {
                assert!((t.angle(m + 1, j) - t.angle(m, j) - step).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn odd_dim_and_overflow_rejected() {
        assert!(rope_precompute(4, 3).is_err());
        let t = rope_precompute(2, 2).unwrap();
        let z = TokenMatrix::zeros(2, 3).unwrap();
        assert!(rope_apply(&z, &t).is_err());
    }

    #[test]
    fn zero_table_is_identity() {
        let z = TokenMatrix::new(DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64)).unwrap();
        let t = RopeTable::zero(3, 4).unwrap();
        assert_eq!(rope_apply(&z, &t).unwrap(), z);
    }
}
