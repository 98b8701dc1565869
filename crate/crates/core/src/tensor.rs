// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense vector kernels: mean pooling, L2 norm, cosine similarity.
//!
//! Storage is `f32`; every reduction accumulates in `f64`.

use std::ops::Deref;

use crate::error::{Result, TrusError};

/// Degeneracy threshold applied to squared L2 norms.
pub const EPS: f64 = 1e-12;

/// One activation vector of length `d` (a pooled cell, a prototype cell,
/// a steering direction).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector(Vec<f32>);

impl ChannelVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Index of the first NaN/Inf entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        squared_norm(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn dot(&self, other: &ChannelVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl Deref for ChannelVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl From<Vec<f32>> for ChannelVector {
    fn from(values: Vec<f32>) -> Self {
        Self(values)
    }
}

/// `F` frames by `d` channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TrusError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TrusError::ShapeMismatch(format!(
                "ragged rows: {} vs {cols}",
                bad.len()
            )));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// A single-frame matrix holding `v`.
    pub fn from_vector(v: &ChannelVector) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; a zero-width matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub fn squared_norm(a: &[f32]) -> f64 {
    dot(a, a)
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TrusError::ShapeMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (squared_norm(a), squared_norm(b));
    for n in [na, nb] {
        if n < EPS {
            return Err(TrusError::DegenerateVector(n));
        }
    }
    Ok((dot(a, b) / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Column-wise mean over the frames of `m`.
pub fn pool_frames(m: &FrameMatrix) -> Result<ChannelVector> {
    if m.rows() == 0 {
        return Err(TrusError::EmptyMatrix);
    }
    let mut acc = vec![0.0f64; m.cols()];
    for row in m.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    let n = m.rows() as f64;
    Ok(ChannelVector(acc.into_iter().map(|s| (s / n) as f32).collect()))
}

pub fn l2_normalize(v: &[f32]) -> Result<ChannelVector> {
    let sq = squared_norm(v);
    if sq < EPS {
        return Err(TrusError::DegenerateVector(sq));
    }
    let norm = sq.sqrt();
    Ok(ChannelVector(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()))
}
