//! Rotary position embedding.
//!
//! Dimensions are rotated in adjacent pairs `(2k, 2k+1)` by the angle
//! `position * base^(-2k/dim)`. The same routine rotates full-width embedding
//! rows (for token matching) and per-head query/key slices inside attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_BASE: f64 = 10_000.0;
pub const DEFAULT_MAX_POSITION: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub base: f64,
    pub dim: usize,
    #[serde(default = "default_max_position")]
    pub max_position: usize,
}

fn default_max_position() -> usize {
    DEFAULT_MAX_POSITION
}

impl RopeParams {
    pub fn new(base: f64, dim: usize) -> Result<Self> {
        let p = Self { base, dim, max_position: DEFAULT_MAX_POSITION };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("rope dim {} must be even and positive", self.dim)));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return Err(Error::Config(format!("rope base {} must exceed 1", self.base)));
        }
        Ok(())
    }

    /// `theta_k = base^(-2k/dim)` for every pair.
    pub fn frequencies(&self) -> Vec<f64> {
        let d = self.dim as f64;
        (0..self.dim / 2).map(|k| self.base.powf(-2.0 * k as f64 / d)).collect()
    }
}

/// Rotate a single row in place using precomputed pair frequencies.
///
/// The row length must be a multiple of `2 * freqs.len()`; longer rows are
/// treated as consecutive heads that share the same frequency table.
pub fn rotate_row(row: &mut [f32], position: usize, freqs: &[f64], direction: Direction) {
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Inverse => -1.0,
    };
    let width = freqs.len() * 2;
    for head in row.chunks_exact_mut(width) {
        for (k, &theta) in freqs.iter().enumerate() {
            let angle = sign * position as f64 * theta;
            let (sin, cos) = angle.sin_cos();
            let x0 = head[2 * k] as f64;
            let x1 = head[2 * k + 1] as f64;
            head[2 * k] = (x0 * cos - x1 * sin) as f32;
            head[2 * k + 1] = (x0 * sin + x1 * cos) as f32;
        }
    }
}

/// Rotate every row `r` of `matrix` by `positions[r]`.
pub fn apply_rope(
    matrix: &Matrix,
    positions: &[usize],
    params: &RopeParams,
    direction: Direction,
) -> Result<Matrix> {
    params.validate()?;
    if matrix.cols() != params.dim {
        return Err(Error::Shape(format!(
            "rope dim {} does not match matrix width {}",
            params.dim,
            matrix.cols()
        )));
    }
    apply_rope_heads(matrix, positions, params, direction)
}

/// Like [`apply_rope`], but `matrix` may hold several `params.dim`-wide heads
/// side by side; each head is rotated independently.
pub fn apply_rope_heads(
    matrix: &Matrix,
    positions: &[usize],
    params: &RopeParams,
    direction: Direction,
) -> Result<Matrix> {
    params.validate()?;
    if positions.len() != matrix.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            matrix.rows()
        )));
    }
    if matrix.cols() % params.dim != 0 {
        return Err(Error::Shape(format!(
            "matrix width {} is not a multiple of rope dim {}",
            matrix.cols(),
            params.dim
        )));
    }
    if let Some(&position) = positions.iter().find(|&&p| p >= params.max_position) {
        return Err(Error::PositionOutOfRange { position, ceiling: params.max_position });
    }
    let freqs = params.frequencies();
    let mut out = matrix.clone();
    for (r, &pos) in positions.iter().enumerate() {
        rotate_row(out.row_mut(r), pos, &freqs, direction);
    }
    Ok(out)
}

/// Rotate rows by their own index (`positions = 0..T`).
pub fn encode_sequence(matrix: &Matrix, params: &RopeParams) -> Result<Matrix> {
    let positions: Vec<usize> = (0..matrix.rows()).collect();
    apply_rope(matrix, &positions, params, Direction::Forward)
}
