//! Normalized image batches.

use alloc::vec::Vec;

use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use crate::fmath::FloatMathExt;

/// A batch of images as an `[N, C, H, W]` tensor with every element in
/// `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    t: Tensor,
}

impl ImageBatch {
    /// Wrap a tensor, enforcing the range and batch invariants.
    pub fn new(t: Tensor) -> Self {
        let (n, _, _, _) = t.dims4();
        assert!(n >= 1, "image batch must be nonempty");
        assert!(
            t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)),
            "image batch values must lie in [-1, 1]"
        );
        ImageBatch { t }
    }

    /// Wrap a tensor clamping into range (used for decoder outputs where
    /// tanh guarantees the range up to rounding).
    pub fn clamped(mut t: Tensor) -> Self {
        for v in t.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        ImageBatch { t }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor {
        self.t
    }

    pub fn len(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Map `[0, 255]` pixels onto `[-1, 1]` via `p / 127.5 - 1`.
pub fn normalize(pixels: &[u8], n: usize, c: usize, h: usize, w: usize) -> ImageBatch {
    assert_eq!(pixels.len(), n * c * h * w, "pixel count mismatch");
    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    ImageBatch::new(Tensor::from_vec(&[n, c, h, w], data))
}

/// Inverse of [`normalize`] up to u8 rounding.
pub fn denormalize(batch: &ImageBatch) -> Vec<u8> {
    batch
        .tensor()
        .data()
        .iter()
        .map(|&v| {
            let p = (v + 1.0) * 127.5;
            p.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}
