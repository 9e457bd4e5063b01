//! Points and offsets in the shared vision-language space.
//!
//! Values are stored as `f32`; every reduction (dot products, norms, means)
//! accumulates in `f64`. Vectors are kept raw and only normalized inside
//! cosine computations.

use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};

/// Norms below this are treated as zero by every cosine operation.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(AirError::EmptySet);
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(AirError::config("values", format!("non-finite entry {bad}")));
        }
        Ok(Self { values })
    }

    /// Rounds a 64-bit computation result into storage precision.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.to_f64())
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Difference `to - from` between two points of one space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetVector {
    values: Vec<f32>,
    pub from_id: String,
    pub to_id: String,
}

impl OffsetVector {
    pub fn from_values(values: Vec<f32>, from_id: impl Into<String>, to_id: impl Into<String>) -> Self {
        Self {
            values,
            from_id: from_id.into(),
            to_id: to_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn is_zero(&self) -> bool {
        norm(&self.to_f64()) < ZERO_NORM_EPS
    }

    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
            from_id: self.to_id.clone(),
            to_id: self.from_id.clone(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(AirError::DimMismatch { expected, got });
    }
    Ok(())
}

/// Cosine similarity of two 64-bit vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let na = norm(a);
    if na < ZERO_NORM_EPS {
        return Err(AirError::ZeroNorm(na));
    }
    let nb = norm(b);
    if nb < ZERO_NORM_EPS {
        return Err(AirError::ZeroNorm(nb));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(a, b)?)
}

pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let x = v.to_f64();
    let n = norm(&x);
    if n < ZERO_NORM_EPS {
        return Err(AirError::ZeroNorm(n));
    }
    EmbeddingVector::from_f64(&x.iter().map(|c| c / n).collect::<Vec<_>>())
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    cosine(&a, &b)
}

pub fn offset(from: &EmbeddingVector, to: &EmbeddingVector) -> Result<OffsetVector> {
    check_dims(from.dim(), to.dim())?;
    let values = from.as_slice().iter().zip(to.as_slice()).map(|(f, t)| t - f).collect();
    Ok(OffsetVector::from_values(values, "from", "to"))
}

/// Elementwise `to - from` in 64-bit.
pub fn sub(to: &[f64], from: &[f64]) -> Vec<f64> {
    to.iter().zip(from).map(|(t, f)| t - f).collect()
}

/// Coordinate-wise mean of 64-bit rows.
pub fn mean_rows(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or(AirError::EmptySet)?;
    let mut acc = vec![0.0f64; first.len()];
    for row in rows {
        check_dims(first.len(), row.len())?;
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

pub fn mean_embedding(set: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let rows: Vec<Vec<f64>> = set.iter().map(EmbeddingVector::to_f64).collect();
    EmbeddingVector::from_f64(&mean_rows(&rows)?)
}
