//! Latent-space tooling: interpolation, attribute directions, editing, and
//! coordinate mixing.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[cfg(not(feature = "std"))]
use crate::fmath::FloatMathExt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LatentError {
    EmptySet,
    DimensionMismatch,
}

impl core::fmt::Display for LatentError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LatentError::EmptySet => write!(f, "exemplar set must be nonempty"),
            LatentError::DimensionMismatch => write!(f, "latent dimension mismatch"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for LatentError {}

/// `(1 - t) z1 + t z2`.
pub fn lerp(z1: &[f32], z2: &[f32], t: f32) -> Vec<f32> {
    assert_eq!(z1.len(), z2.len());
    z1.iter().zip(z2).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Spherical interpolation result; `fell_back` marks degenerate inputs
/// (zero or antipodal vectors) where linear interpolation was used instead.
#[derive(Clone, Debug, PartialEq)]
pub struct SlerpResult {
    pub z: Vec<f32>,
    pub fell_back: bool,
}

/// Spherical interpolation. For inputs of equal norm `r` the result keeps
/// norm `r` for every `t`.
pub fn slerp(z1: &[f32], z2: &[f32], t: f32) -> SlerpResult {
    assert_eq!(z1.len(), z2.len());
    let n1 = z1.iter().map(|v| v * v).sum::<f32>().sqrt();
    let n2 = z2.iter().map(|v| v * v).sum::<f32>().sqrt();
    if n1 < 1e-12 || n2 < 1e-12 {
        return SlerpResult { z: lerp(z1, z2, t), fell_back: true };
    }
    let cos_omega = (z1.iter().zip(z2).map(|(a, b)| a * b).sum::<f32>() / (n1 * n2)).clamp(-1.0, 1.0);
    if cos_omega <= -1.0 + 1e-7 {
        // antipodal: the great-circle path is ambiguous
        return SlerpResult { z: lerp(z1, z2, t), fell_back: true };
    }
    let omega = cos_omega.acos();
    if omega.sin().abs() < 1e-6 {
        // effectively parallel; lerp is the exact limit
        return SlerpResult { z: lerp(z1, z2, t), fell_back: false };
    }
    let sin_omega = omega.sin();
    let w1 = ((1.0 - t) * omega).sin() / sin_omega;
    let w2 = (t * omega).sin() / sin_omega;
    SlerpResult {
        z: z1.iter().zip(z2).map(|(a, b)| w1 * a + w2 * b).collect(),
        fell_back: false,
    }
}

/// An attribute direction with its exemplar provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeDirection {
    pub label: String,
    pub vector: Vec<f32>,
    pub pos_count: usize,
    pub neg_count: usize,
}

/// Difference of exemplar means: `mean(pos) - mean(neg)`, rows are latents.
pub fn attribute_direction(
    label: &str,
    pos: &[Vec<f32>],
    neg: &[Vec<f32>],
) -> Result<AttributeDirection, LatentError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(LatentError::EmptySet);
    }
    let d = pos[0].len();
    if pos.iter().chain(neg).any(|v| v.len() != d) {
        return Err(LatentError::DimensionMismatch);
    }
    let mean = |set: &[Vec<f32>]| -> Vec<f32> {
        let mut m = alloc::vec![0.0f32; d];
        for v in set {
            for (acc, x) in m.iter_mut().zip(v) {
                *acc += x;
            }
        }
        let n = set.len() as f32;
        m.iter_mut().for_each(|x| *x /= n);
        m
    };
    let mp = mean(pos);
    let mn = mean(neg);
    Ok(AttributeDirection {
        label: label.into(),
        vector: mp.iter().zip(&mn).map(|(a, b)| a - b).collect(),
        pos_count: pos.len(),
        neg_count: neg.len(),
    })
}

/// `z + alpha * direction`.
pub fn edit(z: &[f32], direction: &[f32], alpha: f32) -> Vec<f32> {
    assert_eq!(z.len(), direction.len());
    z.iter().zip(direction).map(|(a, d)| a + alpha * d).collect()
}

/// Coordinate-wise selection: mask-true coordinates come from `zb`.
pub fn mix(za: &[f32], zb: &[f32], mask: &[bool]) -> Vec<f32> {
    assert_eq!(za.len(), zb.len());
    assert_eq!(za.len(), mask.len());
    za.iter()
        .zip(zb)
        .zip(mask)
        .map(|((a, b), &m)| if m { *b } else { *a })
        .collect()
}
