//! Cosine-direction losses.
//!
//! One function covers all three objectives of the method: the source-anchored
//! directional loss, the anchor-anchored adaptive loss, and the prompt
//! alignment loss. They differ only in which offsets are passed in. Each
//! latent sample contributes its own image offset; the loss is the batch mean.

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, OffsetVector, ZERO_NORM_EPS};
use crate::error::{AirError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionLossValue {
    pub value: f64,
    pub per_sample: Vec<f64>,
}

/// Image offsets for one batch of latent samples.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetBatch {
    offsets: Vec<OffsetVector>,
}

impl OffsetBatch {
    pub fn new(offsets: Vec<OffsetVector>) -> Result<Self> {
        let first = offsets.first().ok_or(AirError::EmptySet)?;
        let d = first.dim();
        if let Some(bad) = offsets.iter().find(|o| o.dim() != d) {
            return Err(AirError::DimMismatch {
                expected: d,
                got: bad.dim(),
            });
        }
        Ok(Self { offsets })
    }

    pub fn offsets(&self) -> &[OffsetVector] {
        &self.offsets
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.offsets.iter().map(OffsetVector::to_f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    ImageOffsets,
    TextOffset,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossGradient {
    /// One gradient row per image offset.
    ImageOffsets(Vec<Vec<f64>>),
    TextOffset(Vec<f64>),
}

fn checked_norm(v: &[f64]) -> Result<f64> {
    let n = norm(v);
    if n < ZERO_NORM_EPS {
        return Err(AirError::ZeroNorm(n));
    }
    Ok(n)
}

fn check_batch(image_offsets: &[Vec<f64>], text_offset: &[f64]) -> Result<()> {
    if image_offsets.is_empty() {
        return Err(AirError::EmptySet);
    }
    for o in image_offsets {
        if o.len() != text_offset.len() {
            return Err(AirError::DimMismatch {
                expected: text_offset.len(),
                got: o.len(),
            });
        }
    }
    Ok(())
}

/// `per_sample[i] = 1 - cos(image_offsets[i], text_offset)`, value = batch mean.
pub fn direction_loss(image_offsets: &[Vec<f64>], text_offset: &[f64]) -> Result<DirectionLossValue> {
    check_batch(image_offsets, text_offset)?;
    let tn = checked_norm(text_offset)?;
    let per_sample = image_offsets
        .iter()
        .map(|u| {
            let un = checked_norm(u)?;
            Ok(1.0 - (dot(u, text_offset) / (un * tn)).clamp(-1.0, 1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    let value = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(DirectionLossValue { value, per_sample })
}

pub fn direction_loss_batch(batch: &OffsetBatch, text_offset: &OffsetVector) -> Result<DirectionLossValue> {
    direction_loss(&batch.to_f64(), &text_offset.to_f64())
}

/// `L = L_direction + L_adaptive` with unit weights; the adaptive term is
/// absent before the threshold iteration.
pub fn combined_loss(direction: &DirectionLossValue, adaptive: Option<&DirectionLossValue>) -> f64 {
    direction.value + adaptive.map_or(0.0, |a| a.value)
}

/// Analytic gradient of [`direction_loss`].
pub fn loss_gradient(image_offsets: &[Vec<f64>], text_offset: &[f64], wrt: Wrt) -> Result<LossGradient> {
    check_batch(image_offsets, text_offset)?;
    let b = image_offsets.len() as f64;
    let tn = checked_norm(text_offset)?;
    let t_hat: Vec<f64> = text_offset.iter().map(|x| x / tn).collect();
    match wrt {
        Wrt::ImageOffsets => image_offsets
            .iter()
            .map(|u| {
                let un = checked_norm(u)?;
                let c = dot(u, &t_hat) / un;
                Ok(u.iter()
                    .zip(&t_hat)
                    .map(|(ui, ti)| -(ti - c * ui / un) / (un * b))
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()
            .map(LossGradient::ImageOffsets),
        Wrt::TextOffset => {
            let mut g = vec![0.0; text_offset.len()];
            for u in image_offsets {
                let un = checked_norm(u)?;
                let c = dot(u, &t_hat) / un;
                for (gk, (uk, tk)) in g.iter_mut().zip(u.iter().zip(&t_hat)) {
                    *gk -= (uk / un - c * tk) / (tn * b);
                }
            }
            Ok(LossGradient::TextOffset(g))
        }
    }
}
