//! Reverse-mode autodiff over a per-step tape.
//!
//! The trainer rebuilds a tape every step: parameters enter as leaves, ops
//! record enough context to run their backward pass, and `backward` walks the
//! node list in reverse. Inputs always have smaller indices than the node that
//! consumes them, so a single reverse sweep with a `split_at_mut` is enough.
//!
//! All heavy lifting (convolution, linear layers, the fused InfoNCE loss) is
//! expressed as GEMM calls so the engine stays deterministic: each output
//! element is produced by one sequential inner loop regardless of build
//! options.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use crate::fmath::FloatMathExt;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

const LOG_FLOOR: f32 = 1e-7;

// ---------------------------------------------------------------------------
// GEMM helpers (row-major)
// ---------------------------------------------------------------------------

/// c[m,n] = a[m,k] * b[k,n] + beta * c
pub(crate) fn mm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m,n] = a[m,k] * b[n,k]^T + beta * c
pub(crate) fn mm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m,n] = a[k,m]^T * b[k,n] + beta * c
pub(crate) fn mm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im for stride-1 convolution
// ---------------------------------------------------------------------------

fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f32]) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    debug_assert_eq!(cols.len(), c * k * k * ho * wo);
    let o = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * o;
                for oi in 0..ho {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        cols[row + oi * wo..row + (oi + 1) * wo].fill(0.0);
                        continue;
                    }
                    let src = (ci * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj + kj) as isize - pad as isize;
                        cols[row + oi * wo + oj] = if jj < 0 || jj >= w as isize {
                            0.0
                        } else {
                            x[src + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [f32]) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let o = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * o;
                for oi in 0..ho {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dx[dst + jj as usize] += cols[row + oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Scale(Var, f32),
    WeightedSum(Vec<(Var, f32)>),
    Relu(Var),
    Tanh(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    AvgPool2(Var),
    UpsampleNearest2(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    RowNormalize { x: Var, eps: f32 },
    SpectralNorm { w: Var, u: Vec<f32>, v: Vec<f32>, sigma: f32 },
    Reparam { mu: Var, logvar: Var, eps: Vec<f32> },
    ExtractFiber { x: Var, row: usize, col: usize },
    KlGaussian { mu: Var, logvar: Var },
    Mse { a: Var, b: Var },
    InstanceNce { anchor: Var, real: Var, queue: Option<Var>, inv_temp: f32, softmax: Vec<f32> },
    GanD { real: Var, fake_sample: Var, fake_recon: Var },
    GanGNonSat { fake_sample: Var, fake_recon: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.g[v.0].as_deref()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// The recording tape. Build ops, then call [`Tape::backward`] on scalar
/// roots as often as needed; each call returns an independent gradient set.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable input (gradients are tracked).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Re-enter a computed value as a constant (stops gradient flow).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let req = self.req(a) || self.req(b);
        self.push(t, Op::Add(a, b), req)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let req = self.req(a);
        self.push(t, Op::Scale(a, c), req)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut acc = 0.0f32;
        for &(v, w) in terms {
            acc += self.nodes[v.0].value.item() * w;
        }
        let req = terms.iter().any(|&(v, _)| self.req(v));
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let req = self.req(a);
        self.push(t, Op::Relu(a), req)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.tanh()).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let req = self.req(a);
        self.push(t, Op::Tanh(a), req)
    }

    /// Stride-1 2-D convolution, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let (n, cin, h, wd) = self.nodes[x.0].value.dims4();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv channel mismatch");
        assert_eq!(k, k2, "conv kernel must be square");
        assert_eq!(self.nodes[b.0].value.numel(), cout, "conv bias size");
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let r = cin * k * k;
        let o = ho * wo;
        let mut out = vec![0.0f32; n * cout * o];
        let mut cols = vec![0.0f32; r * o];
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        for i in 0..n {
            im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, k, pad, &mut cols);
            let oi = &mut out[i * cout * o..(i + 1) * cout * o];
            mm_nn(cout, r, o, wv, &cols, oi, 0.0);
            for c in 0..cout {
                let bvc = bv[c];
                for v in oi[c * o..(c + 1) * o].iter_mut() {
                    *v += bvc;
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, ho, wo], out);
        let req = self.req(x) || self.req(w) || self.req(b);
        self.push(t, Op::Conv2d { x, w, b, pad }, req)
    }

    /// Affine map `y = x * w^T + b`, `x: [N, din]`, `w: [dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, din) = self.nodes[x.0].value.dims2();
        let (dout, wdin) = self.nodes[w.0].value.dims2();
        assert_eq!(din, wdin, "linear dim mismatch");
        assert_eq!(self.nodes[b.0].value.numel(), dout, "linear bias size");
        let mut out = vec![0.0f32; n * dout];
        mm_nt(n, din, dout, self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), &mut out, 0.0);
        let bv = self.nodes[b.0].value.data();
        for i in 0..n {
            for j in 0..dout {
                out[i * dout + j] += bv[j];
            }
        }
        let t = Tensor::from_vec(&[n, dout], out);
        let req = self.req(x) || self.req(w) || self.req(b);
        self.push(t, Op::Linear { x, w, b }, req)
    }

    /// 2x2 average pooling (spatial dims must be even).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = 0.25
                        * (src[(2 * i) * w + 2 * j]
                            + src[(2 * i) * w + 2 * j + 1]
                            + src[(2 * i + 1) * w + 2 * j]
                            + src[(2 * i + 1) * w + 2 * j + 1]);
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, ho, wo], out);
        let req = self.req(x);
        self.push(t, Op::AvgPool2(x), req)
    }

    /// 2x nearest-neighbor upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        let (ho, wo) = (h * 2, w * 2);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, ho, wo], out);
        let req = self.req(x);
        self.push(t, Op::UpsampleNearest2(x), req)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; n * c];
        let inv = 1.0 / (h * w) as f32;
        for nc in 0..n * c {
            out[nc] = xv[nc * h * w..(nc + 1) * h * w].iter().sum::<f32>() * inv;
        }
        let t = Tensor::from_vec(&[n, c], out);
        let req = self.req(x);
        self.push(t, Op::GlobalAvgPool(x), req)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.nodes[x.0].value.clone().reshaped(shape);
        let req = self.req(x);
        self.push(t, Op::Reshape(x), req)
    }

    /// L2-normalize each row of a `[N, E]` matrix.
    pub fn row_normalize(&mut self, x: Var, eps: f32) -> Var {
        let (n, e) = self.nodes[x.0].value.dims2();
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; n * e];
        for i in 0..n {
            let row = &xv[i * e..(i + 1) * e];
            let nrm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(eps);
            for j in 0..e {
                out[i * e + j] = row[j] / nrm;
            }
        }
        let t = Tensor::from_vec(&[n, e], out);
        let req = self.req(x);
        self.push(t, Op::RowNormalize { x, eps }, req)
    }

    /// Divide a weight by its largest singular value estimate `u^T W v`.
    /// `u` and `v` are the persisted power-iteration vectors, treated as
    /// constants; the division itself is differentiated.
    pub fn spectral_norm(&mut self, w: Var, u: &[f32], v: &[f32]) -> Var {
        let tw = &self.nodes[w.0].value;
        let rows = tw.shape()[0];
        let cols = tw.numel() / rows;
        assert_eq!(u.len(), rows, "spectral norm u size");
        assert_eq!(v.len(), cols, "spectral norm v size");
        let wd = tw.data();
        let mut sigma = 0.0f32;
        for i in 0..rows {
            let mut acc = 0.0f32;
            for j in 0..cols {
                acc += wd[i * cols + j] * v[j];
            }
            sigma += u[i] * acc;
        }
        let sigma = sigma.max(1e-12);
        let data = wd.iter().map(|x| x / sigma).collect();
        let t = Tensor::from_vec(tw.shape(), data);
        let req = self.req(w);
        self.push(t, Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma }, req)
    }

    /// `z = mu + exp(logvar / 2) * eps` with fixed noise `eps`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: &[f32]) -> Var {
        let tm = &self.nodes[mu.0].value;
        let tl = &self.nodes[logvar.0].value;
        assert_eq!(tm.shape(), tl.shape(), "reparameterize shape mismatch");
        assert_eq!(tm.numel(), eps.len(), "reparameterize eps length");
        let data = tm
            .data()
            .iter()
            .zip(tl.data())
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect();
        let t = Tensor::from_vec(tm.shape(), data);
        let req = self.req(mu) || self.req(logvar);
        self.push(t, Op::Reparam { mu, logvar, eps: eps.to_vec() }, req)
    }

    /// Extract the depth fiber at one spatial location: `[N,C,H,W] -> [N,C]`.
    pub fn extract_fiber(&mut self, x: Var, row: usize, col: usize) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        assert!(row < h && col < w, "fiber location out of bounds");
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; n * c];
        for i in 0..n {
            for ch in 0..c {
                out[i * c + ch] = xv[((i * c + ch) * h + row) * w + col];
            }
        }
        let t = Tensor::from_vec(&[n, c], out);
        let req = self.req(x);
        self.push(t, Op::ExtractFiber { x, row, col }, req)
    }

    /// Batch-mean KL divergence of `N(mu, exp(logvar))` to the standard
    /// normal prior.
    pub fn kl_gaussian(&mut self, mu: Var, logvar: Var) -> Var {
        let tm = &self.nodes[mu.0].value;
        let tl = &self.nodes[logvar.0].value;
        assert_eq!(tm.shape(), tl.shape());
        let n = tm.shape()[0] as f32;
        let mut acc = 0.0f64;
        for (m, l) in tm.data().iter().zip(tl.data()) {
            acc += 0.5 * (l.exp() + m * m - 1.0 - l) as f64;
        }
        let t = Tensor::scalar((acc / n as f64) as f32);
        let req = self.req(mu) || self.req(logvar);
        self.push(t, Op::KlGaussian { mu, logvar }, req)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let mut acc = 0.0f64;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let d = (x - y) as f64;
            acc += d * d;
        }
        let t = Tensor::scalar((acc / ta.numel() as f64) as f32);
        let req = self.req(a) || self.req(b);
        self.push(t, Op::Mse { a, b }, req)
    }

    /// Fused instance-level InfoNCE over a batch.
    ///
    /// Row `i` of `anchor` (embedded reconstruction) is scored against row `i`
    /// of `real` (its positive), the other in-batch rows of `real`, and the
    /// queue snapshot. All rows are assumed unit-norm so dot products are
    /// cosine similarities. Returns the batch-mean loss.
    pub fn instance_nce(&mut self, anchor: Var, real: Var, queue: Option<Var>, temperature: f32) -> Var {
        let (n, e) = self.nodes[anchor.0].value.dims2();
        let (np, ep) = self.nodes[real.0].value.dims2();
        assert_eq!((n, e), (np, ep), "anchor/positive shape mismatch");
        let m = match queue {
            Some(q) => {
                let (m, eq) = self.nodes[q.0].value.dims2();
                assert_eq!(eq, e, "queue embedding dim mismatch");
                m
            }
            None => 0,
        };
        assert!(n >= 2 || m >= 1, "instance loss needs at least one negative");
        let inv_temp = 1.0 / temperature;
        let total = n + m;
        let mut s = vec![0.0f32; n * total];
        {
            let av = self.nodes[anchor.0].value.data();
            let pv = self.nodes[real.0].value.data();
            // in-batch block: A * P^T
            let mut in_block = vec![0.0f32; n * n];
            mm_nt(n, e, n, av, pv, &mut in_block, 0.0);
            for i in 0..n {
                s[i * total..i * total + n].copy_from_slice(&in_block[i * n..(i + 1) * n]);
            }
            if let Some(q) = queue {
                let qv = self.nodes[q.0].value.data();
                let mut q_block = vec![0.0f32; n * m];
                mm_nt(n, e, m, av, qv, &mut q_block, 0.0);
                for i in 0..n {
                    s[i * total + n..(i + 1) * total].copy_from_slice(&q_block[i * m..(i + 1) * m]);
                }
            }
        }
        for v in s.iter_mut() {
            *v *= inv_temp;
        }
        let mut softmax = vec![0.0f32; n * total];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &s[i * total..(i + 1) * total];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &v in row {
                z += ((v - mx) as f64).exp();
            }
            let lse = mx as f64 + z.ln();
            loss += lse - row[i] as f64;
            for (j, &v) in row.iter().enumerate() {
                softmax[i * total + j] = (((v - mx) as f64).exp() / z) as f32;
            }
        }
        let t = Tensor::scalar((loss / n as f64) as f32);
        let req = self.req(anchor) || self.req(real);
        self.push(t, Op::InstanceNce { anchor, real, queue, inv_temp, softmax }, req)
    }

    /// Set-level discriminator objective: batch mean of
    /// `log D(x) + log(1 - D(G(z_prior))) + log(1 - D(G(z_post)))`, with log
    /// arguments floored at 1e-7. The discriminator maximizes this value.
    pub fn gan_d_loss(&mut self, real: Var, fake_sample: Var, fake_recon: Var) -> Var {
        let n = self.nodes[real.0].value.numel();
        assert_eq!(self.nodes[fake_sample.0].value.numel(), n);
        assert_eq!(self.nodes[fake_recon.0].value.numel(), n);
        let mut acc = 0.0f64;
        for &l in self.nodes[real.0].value.data() {
            acc += (sigmoid(l).max(LOG_FLOOR) as f64).ln();
        }
        for v in [fake_sample, fake_recon] {
            for &l in self.nodes[v.0].value.data() {
                acc += ((1.0 - sigmoid(l)).max(LOG_FLOOR) as f64).ln();
            }
        }
        let t = Tensor::scalar((acc / n as f64) as f32);
        let req = self.req(real) || self.req(fake_sample) || self.req(fake_recon);
        self.push(t, Op::GanD { real, fake_sample, fake_recon }, req)
    }

    /// Non-saturating generator surrogate: batch mean of `-log D(fake)` over
    /// both fake streams.
    pub fn gan_g_nonsat(&mut self, fake_sample: Var, fake_recon: Var) -> Var {
        let n = self.nodes[fake_sample.0].value.numel();
        assert_eq!(self.nodes[fake_recon.0].value.numel(), n);
        let mut acc = 0.0f64;
        for v in [fake_sample, fake_recon] {
            for &l in self.nodes[v.0].value.data() {
                acc -= (sigmoid(l).max(LOG_FLOOR) as f64).ln();
            }
        }
        let t = Tensor::scalar((acc / n as f64) as f32);
        let req = self.req(fake_sample) || self.req(fake_recon);
        self.push(t, Op::GanGNonSat { fake_sample, fake_recon }, req)
    }

    /// Mean softmax cross-entropy for classifier training.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, c) = self.nodes[logits.0].value.dims2();
        assert_eq!(labels.len(), n, "label count mismatch");
        let lv = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for i in 0..n {
            assert!(labels[i] < c, "label out of range");
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &v in row {
                z += ((v - mx) as f64).exp();
            }
            for (j, &v) in row.iter().enumerate() {
                probs[i * c + j] = (((v - mx) as f64).exp() / z) as f32;
            }
            loss -= ((row[labels[i]] - mx) as f64) - z.ln();
        }
        let t = Tensor::scalar((loss / n as f64) as f32);
        let req = self.req(logits);
        self.push(t, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, req)
    }

    /// Reverse sweep from a scalar root. Can be called repeatedly on the same
    /// tape; each call produces an independent gradient set.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut g: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        g[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if g[idx].is_none() || !self.nodes[idx].requires {
                continue;
            }
            let (head, tail) = g.split_at_mut(idx);
            let gout = tail[0].as_ref().unwrap();
            self.backprop_node(idx, gout, head);
        }
        Grads { g }
    }

    fn backprop_node(&self, idx: usize, gout: &[f32], g: &mut [Option<Vec<f32>>]) {
        fn acc<'a>(g: &'a mut [Option<Vec<f32>>], v: Var, len: usize) -> &'a mut [f32] {
            g[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
        }
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for &v in [a, b].iter() {
                    if self.req(*v) {
                        let ga = acc(g, *v, gout.len());
                        for (d, s) in ga.iter_mut().zip(gout) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.req(*a) {
                    let ga = acc(g, *a, gout.len());
                    for (d, s) in ga.iter_mut().zip(gout) {
                        *d += s * c;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let go = gout[0];
                for &(v, w) in terms {
                    if self.req(v) {
                        acc(g, v, 1)[0] += go * w;
                    }
                }
            }
            Op::Relu(a) => {
                if self.req(*a) {
                    let xv = self.nodes[a.0].value.data();
                    let ga = acc(g, *a, gout.len());
                    for i in 0..gout.len() {
                        if xv[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if self.req(*a) {
                    let yv = self.nodes[idx].value.data();
                    let ga = acc(g, *a, gout.len());
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (n, cin, h, wd) = self.nodes[x.0].value.dims4();
                let ws = self.nodes[w.0].value.shape();
                let (cout, k) = (ws[0], ws[2]);
                let ho = h + 2 * pad - k + 1;
                let wo = wd + 2 * pad - k + 1;
                let r = cin * k * k;
                let o = ho * wo;
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                if self.req(*b) {
                    let gb = acc(g, *b, cout);
                    for i in 0..n {
                        for c in 0..cout {
                            gb[c] += gout[(i * cout + c) * o..(i * cout + c + 1) * o].iter().sum::<f32>();
                        }
                    }
                }
                let need_w = self.req(*w);
                let need_x = self.req(*x);
                if !need_w && !need_x {
                    return;
                }
                let mut cols = vec![0.0f32; r * o];
                let mut dcols = vec![0.0f32; r * o];
                // split mutable access to dw / dx slots
                for i in 0..n {
                    let gi = &gout[i * cout * o..(i + 1) * cout * o];
                    if need_w {
                        im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, k, *pad, &mut cols);
                        let gw = g[w.0].get_or_insert_with(|| vec![0.0; cout * r]);
                        mm_nt(cout, o, r, gi, &cols, gw, 1.0);
                    }
                    if need_x {
                        mm_tn(r, cout, o, wv, gi, &mut dcols, 0.0);
                        let gx = g[x.0].get_or_insert_with(|| vec![0.0; n * cin * h * wd]);
                        col2im(&dcols, cin, h, wd, k, *pad, &mut gx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.nodes[x.0].value.dims2();
                let (dout, _) = self.nodes[w.0].value.dims2();
                if self.req(*b) {
                    let gb = acc(g, *b, dout);
                    for i in 0..n {
                        for j in 0..dout {
                            gb[j] += gout[i * dout + j];
                        }
                    }
                }
                if self.req(*w) {
                    let xv = self.nodes[x.0].value.data();
                    let gw = g[w.0].get_or_insert_with(|| vec![0.0; dout * din]);
                    mm_tn(dout, n, din, gout, xv, gw, 1.0);
                }
                if self.req(*x) {
                    let wv = self.nodes[w.0].value.data();
                    let gx = g[x.0].get_or_insert_with(|| vec![0.0; n * din]);
                    mm_nn(n, dout, din, gout, wv, gx, 1.0);
                }
            }
            Op::AvgPool2(x) => {
                if self.req(*x) {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4();
                    let (ho, wo) = (h / 2, w / 2);
                    let gx = acc(g, *x, n * c * h * w);
                    for nc in 0..n * c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = 0.25 * gout[nc * ho * wo + i * wo + j];
                                gx[nc * h * w + (2 * i) * w + 2 * j] += gv;
                                gx[nc * h * w + (2 * i) * w + 2 * j + 1] += gv;
                                gx[nc * h * w + (2 * i + 1) * w + 2 * j] += gv;
                                gx[nc * h * w + (2 * i + 1) * w + 2 * j + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest2(x) => {
                if self.req(*x) {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4();
                    let (ho, wo) = (h * 2, w * 2);
                    let gx = acc(g, *x, n * c * h * w);
                    for nc in 0..n * c {
                        for i in 0..ho {
                            for j in 0..wo {
                                gx[nc * h * w + (i / 2) * w + j / 2] += gout[nc * ho * wo + i * wo + j];
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.req(*x) {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4();
                    let inv = 1.0 / (h * w) as f32;
                    let gx = acc(g, *x, n * c * h * w);
                    for nc in 0..n * c {
                        let gv = gout[nc] * inv;
                        for v in gx[nc * h * w..(nc + 1) * h * w].iter_mut() {
                            *v += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.req(*x) {
                    let ga = acc(g, *x, gout.len());
                    for (d, s) in ga.iter_mut().zip(gout) {
                        *d += s;
                    }
                }
            }
            Op::RowNormalize { x, eps } => {
                if self.req(*x) {
                    let (n, e) = self.nodes[x.0].value.dims2();
                    let xv = self.nodes[x.0].value.data();
                    let yv = self.nodes[idx].value.data();
                    let gx = acc(g, *x, n * e);
                    for i in 0..n {
                        let row = &xv[i * e..(i + 1) * e];
                        let yrow = &yv[i * e..(i + 1) * e];
                        let grow = &gout[i * e..(i + 1) * e];
                        let raw = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                        let nrm = raw.max(*eps);
                        if raw >= *eps {
                            let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..e {
                                gx[i * e + j] += (grow[j] - dot * yrow[j]) / nrm;
                            }
                        } else {
                            for j in 0..e {
                                gx[i * e + j] += grow[j] / nrm;
                            }
                        }
                    }
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                if self.req(*w) {
                    let yv = self.nodes[idx].value.data();
                    let rows = u.len();
                    let cols = v.len();
                    let dot: f32 = gout.iter().zip(yv).map(|(a, b)| a * b).sum();
                    let gw = acc(g, *w, gout.len());
                    for i in 0..rows {
                        for j in 0..cols {
                            gw[i * cols + j] += (gout[i * cols + j] - dot * u[i] * v[j]) / sigma;
                        }
                    }
                }
            }
            Op::Reparam { mu, logvar, eps } => {
                if self.req(*mu) {
                    let gm = acc(g, *mu, gout.len());
                    for (d, s) in gm.iter_mut().zip(gout) {
                        *d += s;
                    }
                }
                if self.req(*logvar) {
                    let lv = self.nodes[logvar.0].value.data();
                    let gl = acc(g, *logvar, gout.len());
                    for i in 0..gout.len() {
                        gl[i] += gout[i] * 0.5 * (0.5 * lv[i]).exp() * eps[i];
                    }
                }
            }
            Op::ExtractFiber { x, row, col } => {
                if self.req(*x) {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4();
                    let gx = acc(g, *x, n * c * h * w);
                    for i in 0..n {
                        for ch in 0..c {
                            gx[((i * c + ch) * h + row) * w + col] += gout[i * c + ch];
                        }
                    }
                }
            }
            Op::KlGaussian { mu, logvar } => {
                let go = gout[0];
                let n = self.nodes[mu.0].value.shape()[0] as f32;
                if self.req(*mu) {
                    let mv = self.nodes[mu.0].value.data();
                    let gm = acc(g, *mu, mv.len());
                    for i in 0..mv.len() {
                        gm[i] += go * mv[i] / n;
                    }
                }
                if self.req(*logvar) {
                    let lv = self.nodes[logvar.0].value.data();
                    let gl = acc(g, *logvar, lv.len());
                    for i in 0..lv.len() {
                        gl[i] += go * 0.5 * (lv[i].exp() - 1.0) / n;
                    }
                }
            }
            Op::Mse { a, b } => {
                let go = gout[0];
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let scale = 2.0 * go / av.len() as f32;
                if self.req(*a) {
                    let ga = acc(g, *a, av.len());
                    for i in 0..av.len() {
                        ga[i] += scale * (av[i] - bv[i]);
                    }
                }
                if self.req(*b) {
                    let gb = acc(g, *b, bv.len());
                    for i in 0..bv.len() {
                        gb[i] -= scale * (av[i] - bv[i]);
                    }
                }
            }
            Op::InstanceNce { anchor, real, queue, inv_temp, softmax } => {
                let go = gout[0];
                let (n, e) = self.nodes[anchor.0].value.dims2();
                let m = queue.map(|q| self.nodes[q.0].value.shape()[0]).unwrap_or(0);
                let total = n + m;
                let coef = go * inv_temp / n as f32;
                // W_in = softmax(in-batch block) - I (positive column)
                let mut w_in = vec![0.0f32; n * n];
                for i in 0..n {
                    for j in 0..n {
                        w_in[i * n + j] = softmax[i * total + j];
                    }
                    w_in[i * n + i] -= 1.0;
                }
                let pv = self.nodes[real.0].value.data();
                let av = self.nodes[anchor.0].value.data();
                if self.req(*anchor) {
                    let mut da = vec![0.0f32; n * e];
                    mm_nn(n, n, e, &w_in, pv, &mut da, 0.0);
                    if let Some(q) = queue {
                        let qv = self.nodes[q.0].value.data();
                        let mut w_q = vec![0.0f32; n * m];
                        for i in 0..n {
                            w_q[i * m..(i + 1) * m].copy_from_slice(&softmax[i * total + n..(i + 1) * total]);
                        }
                        mm_nn(n, m, e, &w_q, qv, &mut da, 1.0);
                    }
                    let ga = acc(g, *anchor, n * e);
                    for i in 0..n * e {
                        ga[i] += coef * da[i];
                    }
                }
                if self.req(*real) {
                    let mut dp = vec![0.0f32; n * e];
                    mm_tn(n, n, e, &w_in, av, &mut dp, 0.0);
                    let gp = acc(g, *real, n * e);
                    for i in 0..n * e {
                        gp[i] += coef * dp[i];
                    }
                }
            }
            Op::GanD { real, fake_sample, fake_recon } => {
                let go = gout[0];
                let n = self.nodes[real.0].value.numel() as f32;
                if self.req(*real) {
                    let lv = self.nodes[real.0].value.data();
                    let gr = acc(g, *real, lv.len());
                    for i in 0..lv.len() {
                        let s = sigmoid(lv[i]);
                        if s > LOG_FLOOR {
                            gr[i] += go * (1.0 - s) / n;
                        }
                    }
                }
                for v in [fake_sample, fake_recon] {
                    if self.req(*v) {
                        let lv = self.nodes[v.0].value.data();
                        let gf = acc(g, *v, lv.len());
                        for i in 0..lv.len() {
                            let s = sigmoid(lv[i]);
                            if 1.0 - s > LOG_FLOOR {
                                gf[i] -= go * s / n;
                            }
                        }
                    }
                }
            }
            Op::GanGNonSat { fake_sample, fake_recon } => {
                let go = gout[0];
                let n = self.nodes[fake_sample.0].value.numel() as f32;
                for v in [fake_sample, fake_recon] {
                    if self.req(*v) {
                        let lv = self.nodes[v.0].value.data();
                        let gf = acc(g, *v, lv.len());
                        for i in 0..lv.len() {
                            let s = sigmoid(lv[i]);
                            if s > LOG_FLOOR {
                                gf[i] -= go * (1.0 - s) / n;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.req(*logits) {
                    let go = gout[0];
                    let (n, c) = self.nodes[logits.0].value.dims2();
                    let gl = acc(g, *logits, n * c);
                    for i in 0..n {
                        for j in 0..c {
                            let delta = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += go * (probs[i * c + j] - delta) / n as f32;
                        }
                    }
                }
            }
        }
    }
}
