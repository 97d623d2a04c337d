//! Loss terms: Gaussian KL, reconstruction, the instance-level InfoNCE
//! contrast with its negative queue, the three-stream set-level GAN loss, and
//! the per-mode objective composition.
//!
//! [`math`] holds double-precision reference implementations with analytic
//! gradients. They are the ground truth the f32 tape ops are tested against,
//! and the functions the finite-difference gradient checks exercise.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, Mode};
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use crate::fmath::FloatMathExt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ObjectiveError {
    EmptyNegatives,
    ZeroVector,
    DimensionMismatch,
    InconsistentMode { mode: Mode, component: &'static str },
}

impl core::fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ObjectiveError::EmptyNegatives => write!(f, "instance loss requires at least one negative"),
            ObjectiveError::ZeroVector => write!(f, "cosine critic is undefined for zero vectors"),
            ObjectiveError::DimensionMismatch => write!(f, "embedding dimension mismatch"),
            ObjectiveError::InconsistentMode { mode, component } => {
                write!(f, "component `{component}` is inconsistent with mode `{}`", mode.as_str())
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ObjectiveError {}

pub mod math {
    //! f64 reference implementations with analytic gradients.

    use alloc::vec;
    use alloc::vec::Vec;

    #[cfg(not(feature = "std"))]
    use crate::fmath::FloatMathExt;

    use super::ObjectiveError;

    /// Batch-mean KL divergence of diagonal Gaussians `N(mu, exp(logvar))`
    /// to the standard normal: `mean_n 1/2 sum_j (e^lv + mu^2 - 1 - lv)`.
    pub fn kl_gaussian(mu: &[f64], logvar: &[f64], batch: usize) -> f64 {
        assert_eq!(mu.len(), logvar.len());
        assert!(batch >= 1 && mu.len() % batch == 0);
        let mut acc = 0.0;
        for (m, l) in mu.iter().zip(logvar) {
            acc += 0.5 * (l.exp() + m * m - 1.0 - l);
        }
        acc / batch as f64
    }

    /// Gradients of [`kl_gaussian`] with respect to `mu` and `logvar`.
    pub fn kl_gaussian_grad(mu: &[f64], logvar: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let n = batch as f64;
        let dmu = mu.iter().map(|m| m / n).collect();
        let dlv = logvar.iter().map(|l| 0.5 * (l.exp() - 1.0) / n).collect();
        (dmu, dlv)
    }

    /// `z = mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
        assert_eq!(mu.len(), logvar.len());
        assert_eq!(mu.len(), eps.len());
        mu.iter()
            .zip(logvar)
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect()
    }

    /// Mean squared error over all elements.
    pub fn mse(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += (x - y) * (x - y);
        }
        acc / a.len() as f64
    }

    pub fn mse_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = 2.0 / a.len() as f64;
        let da: Vec<f64> = a.iter().zip(b).map(|(x, y)| s * (x - y)).collect();
        let db = da.iter().map(|v| -v).collect();
        (da, db)
    }

    /// Cosine similarity `a.b / (|a||b|)`.
    pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ObjectiveError> {
        if a.len() != b.len() {
            return Err(ObjectiveError::DimensionMismatch);
        }
        let na = norm(a);
        let nb = norm(b);
        if na == 0.0 || nb == 0.0 {
            return Err(ObjectiveError::ZeroVector);
        }
        Ok(dot(a, b) / (na * nb))
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    /// d cosine(a, b) / d a.
    fn cosine_grad_wrt_first(a: &[f64], b: &[f64]) -> Vec<f64> {
        let na = norm(a);
        let nb = norm(b);
        let c = dot(a, b) / (na * nb);
        a.iter()
            .zip(b)
            .map(|(ai, bi)| bi / (na * nb) - c * ai / (na * na))
            .collect()
    }

    /// Instance-level InfoNCE with the cosine critic: the anchor (embedded
    /// reconstruction) is pulled toward its positive (the input instance) and
    /// away from the negatives (other instances). The positive term appears
    /// once in the denominator alongside every negative.
    pub fn info_nce(
        anchor: &[f64],
        positive: &[f64],
        negatives: &[Vec<f64>],
        temperature: f64,
    ) -> Result<f64, ObjectiveError> {
        if negatives.is_empty() {
            return Err(ObjectiveError::EmptyNegatives);
        }
        let s_pos = cosine(positive, anchor)? / temperature;
        let mut sims = vec![s_pos];
        for n in negatives {
            sims.push(cosine(n, anchor)? / temperature);
        }
        let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + sims.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
        Ok(lse - s_pos)
    }

    /// Analytic gradients of [`info_nce`] with respect to the anchor, the
    /// positive, and each negative.
    #[allow(clippy::type_complexity)]
    pub fn info_nce_grad(
        anchor: &[f64],
        positive: &[f64],
        negatives: &[Vec<f64>],
        temperature: f64,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>), ObjectiveError> {
        if negatives.is_empty() {
            return Err(ObjectiveError::EmptyNegatives);
        }
        let mut sims = vec![cosine(positive, anchor)? / temperature];
        for n in negatives {
            sims.push(cosine(n, anchor)? / temperature);
        }
        let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sims.iter().map(|s| (s - mx).exp()).sum();
        let softmax: Vec<f64> = sims.iter().map(|s| (s - mx).exp() / z).collect();

        // dL/ds_pos = softmax_pos - 1 ; dL/ds_neg = softmax_neg (all / tau)
        let mut danchor = vec![0.0; anchor.len()];
        let coef_pos = (softmax[0] - 1.0) / temperature;
        let g = cosine_grad_wrt_first(anchor, positive);
        for (d, gi) in danchor.iter_mut().zip(&g) {
            *d += coef_pos * gi;
        }
        let dpositive: Vec<f64> = cosine_grad_wrt_first(positive, anchor)
            .iter()
            .map(|gi| coef_pos * gi)
            .collect();
        let mut dnegatives = Vec::with_capacity(negatives.len());
        for (m, n) in negatives.iter().enumerate() {
            let coef = softmax[m + 1] / temperature;
            let gn = cosine_grad_wrt_first(anchor, n);
            for (d, gi) in danchor.iter_mut().zip(&gn) {
                *d += coef * gi;
            }
            dnegatives.push(cosine_grad_wrt_first(n, anchor).iter().map(|gi| coef * gi).collect());
        }
        Ok((danchor, dpositive, dnegatives))
    }

    const LOG_FLOOR: f64 = 1e-7;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Set-level adversarial losses over the three streams (real, sampled,
    /// reconstructed). Returns `(l_d, l_g)`:
    /// `l_d` is the discriminator objective (maximized by the discriminator),
    /// `l_g` the non-saturating generator surrogate (minimized by the
    /// encoder/decoder). Log arguments are floored at 1e-7.
    pub fn gan_losses(real: &[f64], fake_sample: &[f64], fake_recon: &[f64]) -> (f64, f64) {
        assert_eq!(real.len(), fake_sample.len());
        assert_eq!(real.len(), fake_recon.len());
        let n = real.len() as f64;
        let mut l_d = 0.0;
        let mut l_g = 0.0;
        for &l in real {
            l_d += sigmoid(l).max(LOG_FLOOR).ln();
        }
        for stream in [fake_sample, fake_recon] {
            for &l in stream {
                let s = sigmoid(l);
                l_d += (1.0 - s).max(LOG_FLOOR).ln();
                l_g -= s.max(LOG_FLOOR).ln();
            }
        }
        (l_d / n, l_g / n)
    }

    /// Gradients of the discriminator objective `l_d` with respect to the
    /// three logit streams.
    #[allow(clippy::type_complexity)]
    pub fn gan_d_grad(real: &[f64], fake_sample: &[f64], fake_recon: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = real.len() as f64;
        let dr = real
            .iter()
            .map(|&l| {
                let s = sigmoid(l);
                if s > LOG_FLOOR { (1.0 - s) / n } else { 0.0 }
            })
            .collect();
        let dfake = |stream: &[f64]| -> Vec<f64> {
            stream
                .iter()
                .map(|&l| {
                    let s = sigmoid(l);
                    if 1.0 - s > LOG_FLOOR { -s / n } else { 0.0 }
                })
                .collect()
        };
        (dr, dfake(fake_sample), dfake(fake_recon))
    }

    /// Gradients of the non-saturating generator surrogate `l_g` with respect
    /// to the two fake logit streams.
    pub fn gan_g_grad(fake_sample: &[f64], fake_recon: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = fake_sample.len() as f64;
        let d = |stream: &[f64]| -> Vec<f64> {
            stream
                .iter()
                .map(|&l| {
                    let s = sigmoid(l);
                    if s > LOG_FLOOR { -(1.0 - s) / n } else { 0.0 }
                })
                .collect()
        };
        (d(fake_sample), d(fake_recon))
    }
}

// ---------------------------------------------------------------------------
// Negative queue
// ---------------------------------------------------------------------------

/// FIFO bank of detached unit-norm embeddings supplying contrastive
/// negatives. Eviction is strictly oldest-first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeQueue {
    dim: usize,
    capacity: usize,
    head: usize,
    fill: usize,
    data: Vec<f32>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity >= 1 && dim >= 1);
        NegativeQueue {
            dim,
            capacity,
            head: 0,
            fill: 0,
            data: vec![0.0; capacity * dim],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    /// Append rows of a `[B, dim]` matrix, evicting the oldest entries once
    /// capacity is exceeded. Rows must already be unit-norm and detached.
    pub fn push_rows(&mut self, rows: &Tensor) {
        let (b, d) = rows.dims2();
        assert_eq!(d, self.dim, "queue dim mismatch");
        let data = rows.data();
        for i in 0..b {
            let row = &data[i * d..(i + 1) * d];
            debug_assert!(
                (row.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs() < 1e-3,
                "queue rows must be unit-norm"
            );
            self.data[self.head * d..(self.head + 1) * d].copy_from_slice(row);
            self.head = (self.head + 1) % self.capacity;
            if self.fill < self.capacity {
                self.fill += 1;
            }
        }
    }

    /// Current contents in insertion order (oldest first), without mutation.
    pub fn snapshot(&self) -> Tensor {
        let d = self.dim;
        let mut out = vec![0.0f32; self.fill * d];
        for i in 0..self.fill {
            let slot = (self.head + self.capacity - self.fill + i) % self.capacity;
            out[i * d..(i + 1) * d].copy_from_slice(&self.data[slot * d..(slot + 1) * d]);
        }
        Tensor::from_vec(&[self.fill, d], out)
    }
}

// ---------------------------------------------------------------------------
// Loss bookkeeping and per-mode composition
// ---------------------------------------------------------------------------

/// Raw per-term values of one step, before weighting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub kl: f64,
    pub pixel_recon: Option<f64>,
    pub feature_recon: Option<f64>,
    /// Per-tap instance losses, keyed by tap name.
    pub instance: Vec<(String, f64)>,
    /// Set when instance taps were skipped because their queues were cold.
    pub instance_warmup: bool,
    /// Discriminator objective (the value the max player ascends).
    pub gan_d: Option<f64>,
    /// Non-saturating generator surrogate (the value the min player descends).
    pub gan_g: Option<f64>,
}

/// Weighted per-term breakdown with player totals. The totals always equal
/// the weighted sums of the reported components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub pixel_recon: Option<f64>,
    pub feature_recon: Option<f64>,
    pub instance: Vec<(String, f64)>,
    pub instance_warmup: bool,
    pub gan_d: Option<f64>,
    pub gan_g: Option<f64>,
    pub total_min_player: f64,
    pub total_max_player: f64,
}

/// Compose the two player totals for a mode from raw components.
///
/// vae: `pixel + kl` (min only); vae_gan: `feature + kl + gan`;
/// vae_contrastive: `instance + kl` (min only); dc_vae: `instance + kl + gan`.
/// The max-player total contains only the GAN term.
pub fn mode_objective(
    mode: Mode,
    weights: &LossWeights,
    c: &LossComponents,
) -> Result<(f64, f64), ObjectiveError> {
    let inconsistent = |component: &'static str| ObjectiveError::InconsistentMode { mode, component };
    if mode.pixel_recon_active() != c.pixel_recon.is_some() {
        return Err(inconsistent("pixel_recon"));
    }
    if mode.feature_recon_active() != c.feature_recon.is_some() {
        return Err(inconsistent("feature_recon"));
    }
    if mode.gan_active() != (c.gan_d.is_some() && c.gan_g.is_some()) {
        return Err(inconsistent("gan"));
    }
    if mode.instance_active() != (!c.instance.is_empty() || c.instance_warmup) {
        return Err(inconsistent("instance"));
    }
    let mut min_total = weights.kl as f64 * c.kl;
    if let Some(p) = c.pixel_recon {
        min_total += weights.pixel as f64 * p;
    }
    if let Some(fr) = c.feature_recon {
        min_total += weights.pixel as f64 * fr;
    }
    for (_, v) in &c.instance {
        min_total += weights.instance as f64 * v;
    }
    if let Some(g) = c.gan_g {
        min_total += weights.gan as f64 * g;
    }
    let max_total = c.gan_d.map(|d| weights.gan as f64 * d).unwrap_or(0.0);
    Ok((min_total, max_total))
}

impl LossBreakdown {
    pub fn compose(mode: Mode, weights: &LossWeights, c: LossComponents) -> Result<Self, ObjectiveError> {
        let (total_min_player, total_max_player) = mode_objective(mode, weights, &c)?;
        Ok(LossBreakdown {
            kl: c.kl,
            pixel_recon: c.pixel_recon,
            feature_recon: c.feature_recon,
            instance: c.instance,
            instance_warmup: c.instance_warmup,
            gan_d: c.gan_d,
            gan_g: c.gan_g,
            total_min_player,
            total_max_player,
        })
    }

    pub fn all_finite(&self) -> bool {
        let mut vals = vec![self.kl, self.total_min_player, self.total_max_player];
        vals.extend(self.pixel_recon);
        vals.extend(self.feature_recon);
        vals.extend(self.gan_d);
        vals.extend(self.gan_g);
        vals.extend(self.instance.iter().map(|(_, v)| *v));
        vals.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn kl_closed_forms() {
        // prior equals posterior
        assert_eq!(math::kl_gaussian(&[0.0], &[0.0], 1), 0.0);
        // d=1, mu=1, logvar=0 -> 1/2 mu^2
        assert!((math::kl_gaussian(&[1.0], &[0.0], 1) - 0.5).abs() < 1e-12);
        // d=1, mu=0, var=4 -> 0.5 (4 - 1 - ln 4)
        let expect = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((math::kl_gaussian(&[0.0], &[4.0f64.ln()], 1) - expect).abs() < 1e-12);
        assert!((expect - 0.8068528194400547).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_prior() {
        let mut rng = crate::rng::RngStream::derive(11, "kltest");
        for _ in 0..200 {
            let mu: alloc::vec::Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
            let lv: alloc::vec::Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
            let kl = math::kl_gaussian(&mu, &lv, 1);
            assert!(kl >= 0.0);
            let at_prior = mu.iter().all(|v| v.abs() < 1e-9) && lv.iter().all(|v| v.abs() < 1e-9);
            if kl < 1e-9 {
                assert!(at_prior || (kl >= 0.0 && kl < 1e-9));
            }
        }
    }

    #[test]
    fn info_nce_uniform_and_frozen_cases() {
        // all similarities equal with 7 negatives -> ln 8
        let v = vec![1.0, 0.0, 0.0];
        let negs: alloc::vec::Vec<alloc::vec::Vec<f64>> = (0..7).map(|_| v.clone()).collect();
        let l = math::info_nce(&v, &v, &negs, 1.0).unwrap();
        assert!((l - 8.0f64.ln()).abs() < 1e-12);
        assert!((8.0f64.ln() - 2.0794415416798357).abs() < 1e-12);

        // pos sim 1, two negatives at -1 -> ln(1 + 2 e^-2)
        let anchor = vec![1.0, 0.0];
        let pos = vec![1.0, 0.0];
        let negs = vec![vec![-1.0, 0.0], vec![-1.0, 0.0]];
        let l = math::info_nce(&anchor, &pos, &negs, 1.0).unwrap();
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((expect - 0.23954476622188453).abs() < 1e-12);
    }

    #[test]
    fn info_nce_monotone_in_positive_similarity() {
        // raising the positive similarity with negatives fixed lowers the loss
        let negs = vec![vec![0.3, 0.9], vec![-0.5, 0.5]];
        let anchor = vec![1.0, 0.0];
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let t = k as f64 / 7.0;
            // positive rotates toward the anchor
            let pos = vec![(1.0 - t) * 0.1 + t * 1.0, (1.0 - t) * 0.9];
            let l = math::info_nce(&anchor, &pos, &negs, 1.0).unwrap();
            assert!(l < prev, "loss should strictly decrease (step {k}: {l} !< {prev})");
            prev = l;
        }
    }

    #[test]
    fn info_nce_error_paths() {
        assert_eq!(
            math::info_nce(&[1.0, 0.0], &[1.0, 0.0], &[], 1.0),
            Err(ObjectiveError::EmptyNegatives)
        );
        assert_eq!(
            math::info_nce(&[0.0, 0.0], &[1.0, 0.0], &[vec![1.0, 0.0]], 1.0),
            Err(ObjectiveError::ZeroVector)
        );
    }

    #[test]
    fn cosine_endpoints() {
        let v = vec![0.6, 0.8];
        assert!((math::cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let w = vec![-0.8, 0.6];
        assert!(math::cosine(&v, &w).unwrap().abs() < 1e-12);
        let nv: alloc::vec::Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((math::cosine(&v, &nv).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gan_symmetric_and_limit_cases() {
        // D = 0.5 on all streams: logits 0
        let z = vec![0.0; 4];
        let (l_d, l_g) = math::gan_losses(&z, &z, &z);
        assert!((l_d - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((l_d + 2.0794415416798357).abs() < 1e-9);
        // non-saturating generator at D = 0.5 over two fake streams
        assert!((l_g - 2.0 * 2.0f64.ln()).abs() < 1e-12);
        assert!((l_g - 1.3862943611198906).abs() < 1e-9);

        // perfect discrimination approaches the supremum 0
        let big = vec![30.0; 4];
        let small = vec![-30.0; 4];
        let (l_d, _) = math::gan_losses(&big, &small, &small);
        assert!(l_d.abs() < 1e-9);
    }

    #[test]
    fn queue_fifo_eviction() {
        let mut q = NegativeQueue::new(4, 2);
        let unit = |x: f32, y: f32| {
            let n = (x * x + y * y).sqrt();
            [x / n, y / n]
        };
        let items: alloc::vec::Vec<[f32; 2]> = (0..6).map(|i| unit(1.0, i as f32)).collect();
        for it in &items {
            q.push_rows(&Tensor::from_vec(&[1, 2], it.to_vec()));
        }
        // capacity 4, pushed 6 -> keeps the last four in order c,d,e,f
        assert_eq!(q.fill(), 4);
        let snap = q.snapshot();
        let expect: alloc::vec::Vec<f32> = items[2..].iter().flatten().cloned().collect();
        assert_eq!(snap.data(), expect.as_slice());
        // snapshot twice -> identical
        assert_eq!(q.snapshot(), snap);
    }

    #[test]
    fn queue_batch_fill() {
        let mut q = NegativeQueue::new(8096, 16);
        let mut rows = vec![0.0f32; 128 * 16];
        for r in 0..128 {
            rows[r * 16] = 1.0;
        }
        q.push_rows(&Tensor::from_vec(&[128, 16], rows));
        assert_eq!(q.fill(), 128);
    }

    #[test]
    fn queue_holds_most_recent_k_in_order() {
        let mut q = NegativeQueue::new(5, 1);
        for i in 0..17 {
            // 1-d unit vectors alternate sign; track identity via sign * index parity
            let v = if i % 2 == 0 { 1.0 } else { -1.0 };
            q.push_rows(&Tensor::from_vec(&[1, 1], vec![v]));
        }
        assert_eq!(q.fill(), 5);
        let snap = q.snapshot();
        // entries 12..17 have signs +,-,+,-,+
        assert_eq!(snap.data(), &[1.0, -1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn mode_objective_masks_and_linearity() {
        let w = LossWeights { kl: 1.0, instance: 1.0, gan: 1.0, pixel: 1.0 };
        let dc = LossComponents {
            kl: 0.5,
            instance: vec![("low".to_string(), 2.0), ("high".to_string(), 1.5)],
            gan_d: Some(-1.2),
            gan_g: Some(1.4),
            ..LossComponents::default()
        };
        let (min_t, max_t) = mode_objective(Mode::DcVae, &w, &dc).unwrap();
        assert!((min_t - (0.5 + 3.5 + 1.4)).abs() < 1e-12);
        assert!((max_t + 1.2).abs() < 1e-12);

        // vae mode: gan contributions exactly zero
        let vae = LossComponents {
            kl: 0.5,
            pixel_recon: Some(0.25),
            ..LossComponents::default()
        };
        let (min_t, max_t) = mode_objective(Mode::Vae, &w, &vae).unwrap();
        assert_eq!(max_t, 0.0);
        assert!((min_t - 0.75).abs() < 1e-12);

        // doubling the instance weight doubles its contribution
        let w2 = LossWeights { instance: 2.0, ..w };
        let (min_t2, _) = mode_objective(Mode::DcVae, &w2, &dc).unwrap();
        assert!((min_t2 - (0.5 + 7.0 + 1.4)).abs() < 1e-12);

        // inconsistent components are rejected
        let bad = LossComponents {
            kl: 0.1,
            gan_d: Some(0.0),
            gan_g: Some(0.0),
            pixel_recon: Some(0.1),
            ..LossComponents::default()
        };
        assert!(mode_objective(Mode::Vae, &w, &bad).is_err());
    }
}
