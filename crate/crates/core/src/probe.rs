//! Linear probes: multinomial logistic regression on frozen latent
//! representations, with a trial protocol for confidence intervals.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

#[cfg(not(feature = "std"))]
use crate::fmath::FloatMathExt;

/// Probe fitting hyperparameters. Full-batch Adam on the convex softmax
/// objective; iterations stop early once the loss improvement falls below
/// `tol`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbeFitConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub l2: f64,
    pub tol: f64,
    /// Fraction of the training set drawn (without replacement) per trial.
    pub subsample: f64,
}

impl Default for ProbeFitConfig {
    fn default() -> Self {
        ProbeFitConfig {
            max_iters: 400,
            lr: 0.05,
            l2: 1e-4,
            tol: 1e-7,
            subsample: 0.9,
        }
    }
}

/// A fitted multinomial logistic classifier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `[classes, dim]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearClassifier {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let mut v = self.b[c];
            for j in 0..self.dim {
                v += self.w[c * self.dim + j] * x[j];
            }
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best
    }
}

/// Fit on `[n, d]` features with integer labels via full-batch Adam.
pub fn fit_logistic(
    x: &[f64],
    y: &[usize],
    n: usize,
    d: usize,
    classes: usize,
    cfg: &ProbeFitConfig,
) -> LinearClassifier {
    assert_eq!(x.len(), n * d);
    assert_eq!(y.len(), n);
    let mut w = vec![0.0f64; classes * d];
    let mut b = vec![0.0f64; classes];
    let mut mw = vec![0.0f64; classes * d];
    let mut vw = vec![0.0f64; classes * d];
    let mut mb = vec![0.0f64; classes];
    let mut vb = vec![0.0f64; classes];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut prev_loss = f64::INFINITY;
    let mut logits = vec![0.0f64; classes];
    for it in 1..=cfg.max_iters {
        let mut gw = vec![0.0f64; classes * d];
        let mut gb = vec![0.0f64; classes];
        let mut loss = 0.0f64;
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            for c in 0..classes {
                let mut v = b[c];
                for j in 0..d {
                    v += w[c * d + j] * xi[j];
                }
                logits[c] = v;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            loss -= logits[y[i]] - mx - z.ln();
            for c in 0..classes {
                let p = (logits[c] - mx).exp() / z;
                let delta = p - if c == y[i] { 1.0 } else { 0.0 };
                gb[c] += delta;
                for j in 0..d {
                    gw[c * d + j] += delta * xi[j];
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        loss *= inv_n;
        for (g, wv) in gw.iter_mut().zip(&w) {
            *g = *g * inv_n + cfg.l2 * wv;
        }
        for g in gb.iter_mut() {
            *g *= inv_n;
        }
        loss += 0.5 * cfg.l2 * w.iter().map(|v| v * v).sum::<f64>();
        let bc1 = 1.0 - b1.powi(it as i32);
        let bc2 = 1.0 - b2.powi(it as i32);
        for i in 0..w.len() {
            mw[i] = b1 * mw[i] + (1.0 - b1) * gw[i];
            vw[i] = b2 * vw[i] + (1.0 - b2) * gw[i] * gw[i];
            w[i] -= cfg.lr * (mw[i] / bc1) / ((vw[i] / bc2).sqrt() + eps);
        }
        for i in 0..b.len() {
            mb[i] = b1 * mb[i] + (1.0 - b1) * gb[i];
            vb[i] = b2 * vb[i] + (1.0 - b2) * gb[i] * gb[i];
            b[i] -= cfg.lr * (mb[i] / bc1) / ((vb[i] / bc2).sqrt() + eps);
        }
        if (prev_loss - loss).abs() < cfg.tol {
            break;
        }
        prev_loss = loss;
    }
    LinearClassifier { classes, dim: d, w, b }
}

/// Held-out classification error rate in `[0, 1]`.
pub fn error_rate(clf: &LinearClassifier, x: &[f64], y: &[usize]) -> f64 {
    let n = y.len();
    assert_eq!(x.len(), n * clf.dim);
    let mut wrong = 0usize;
    for i in 0..n {
        if clf.predict(&x[i * clf.dim..(i + 1) * clf.dim]) != y[i] {
            wrong += 1;
        }
    }
    wrong as f64 / n as f64
}

/// Linear-probe outcome: held-out error with a 95% confidence half-width
/// over the trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub error_rate: f64,
    pub half_width_95: f64,
    pub d_z: usize,
    pub trials: usize,
    pub trial_errors: Vec<f64>,
    pub trial_seeds: Vec<u64>,
}

/// Two-sided 97.5% Student-t critical value for small trial counts.
pub fn t_critical_975(df: usize) -> f64 {
    const TABLE: [f64; 10] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    ];
    if df == 0 {
        f64::INFINITY
    } else if df <= TABLE.len() {
        TABLE[df - 1]
    } else {
        1.96
    }
}

pub fn mean_and_half_width(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let hw = t_critical_975(n - 1) * (var / n as f64).sqrt();
    (mean, hw)
}

/// Run the trial protocol: each trial subsamples the training features with
/// its own seed, fits, and scores on the untouched held-out set. The fit
/// never sees held-out labels.
#[allow(clippy::too_many_arguments)]
pub fn probe_trials(
    train_x: &[f64],
    train_y: &[usize],
    test_x: &[f64],
    test_y: &[usize],
    d: usize,
    classes: usize,
    trials: usize,
    base_seed: u64,
    cfg: &ProbeFitConfig,
) -> ProbeResult {
    assert!(trials >= 1);
    let n = train_y.len();
    let keep = ((n as f64) * cfg.subsample).round().max(1.0) as usize;
    let mut trial_errors = Vec::with_capacity(trials);
    let mut trial_seeds = Vec::with_capacity(trials);
    for t in 0..trials {
        let seed = base_seed.wrapping_add(t as u64);
        let mut rng = RngStream::derive(seed, "probe.trial");
        let idx = rng.shuffled_indices(n);
        let mut sx = Vec::with_capacity(keep * d);
        let mut sy = Vec::with_capacity(keep);
        for &i in idx.iter().take(keep) {
            sx.extend_from_slice(&train_x[i * d..(i + 1) * d]);
            sy.push(train_y[i]);
        }
        let clf = fit_logistic(&sx, &sy, keep, d, classes, cfg);
        trial_errors.push(error_rate(&clf, test_x, test_y));
        trial_seeds.push(seed);
    }
    let (mean, hw) = mean_and_half_width(&trial_errors);
    ProbeResult {
        error_rate: mean,
        half_width_95: hw,
        d_z: d,
        trials,
        trial_errors,
        trial_seeds,
    }
}
