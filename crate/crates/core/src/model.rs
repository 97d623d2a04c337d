//! Network graphs: Gaussian encoder, decoder/generator, discriminator with
//! multi-scale feature taps, projection heads, and spectral normalization.
//!
//! The backbone is a parametric residual trunk: stages halve the spatial
//! resolution down to a small base grid (a 32x32 input gives the four-stage
//! trunk; smaller inputs give proportionally fewer stages), the decoder
//! mirrors the trunk with nearest-neighbor upsampling, and the discriminator
//! exposes two contrast taps: the output of the second residual block
//! (`"low"`, spatial) and the output of the first linear layer (`"high"`).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use crate::fmath::FloatMathExt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelError {
    ResolutionMismatch { expected: Vec<usize>, got: Vec<usize> },
    WrongLatentDim { expected: usize, got: usize },
    UnknownTap(String),
    NonSpatialTap(String),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::ResolutionMismatch { expected, got } => {
                write!(f, "input shape {got:?} does not match configured {expected:?}")
            }
            ModelError::WrongLatentDim { expected, got } => {
                write!(f, "latent dimension {got} does not match configured {expected}")
            }
            ModelError::UnknownTap(t) => write!(f, "unknown tap `{t}`"),
            ModelError::NonSpatialTap(t) => write!(f, "tap `{t}` is not a spatial feature map"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

// ---------------------------------------------------------------------------
// Parameters and spectral normalization
// ---------------------------------------------------------------------------

/// Persisted power-iteration vectors for one spectrally normalized weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnState {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl SnState {
    pub fn init(rows: usize, cols: usize, rng: &mut RngStream) -> Self {
        let mut u = vec![0.0f32; rows];
        let mut v = vec![0.0f32; cols];
        rng.fill_normal_f32(&mut u);
        rng.fill_normal_f32(&mut v);
        normalize_in_place(&mut u);
        normalize_in_place(&mut v);
        SnState { u, v }
    }
}

fn normalize_in_place(x: &mut [f32]) {
    let n = x.iter().map(|v| v * v).sum::<f32>().sqrt();
    if n > 1e-24 {
        for v in x.iter_mut() {
            *v /= n;
        }
    }
}

/// One power-iteration step on the 2-D view `[rows, cols]` of `w`,
/// refreshing the stored singular-vector estimates.
pub fn power_iteration_step(w: &Tensor, state: &mut SnState) {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let wd = w.data();
    // v <- normalize(W^T u)
    let mut v = vec![0.0f32; cols];
    for i in 0..rows {
        let ui = state.u[i];
        if ui == 0.0 {
            continue;
        }
        for j in 0..cols {
            v[j] += wd[i * cols + j] * ui;
        }
    }
    let vn = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if vn > 1e-24 {
        for x in v.iter_mut() {
            *x /= vn;
        }
        state.v = v;
    }
    // u <- normalize(W v)
    let mut u = vec![0.0f32; rows];
    for i in 0..rows {
        let mut acc = 0.0f32;
        for j in 0..cols {
            acc += wd[i * cols + j] * state.v[j];
        }
        u[i] = acc;
    }
    let un = u.iter().map(|x| x * x).sum::<f32>().sqrt();
    if un > 1e-24 {
        for x in u.iter_mut() {
            *x /= un;
        }
        state.u = u;
    }
}

/// Current largest-singular-value estimate `u^T W v`.
pub fn sigma_estimate(w: &Tensor, state: &SnState) -> f32 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let wd = w.data();
    let mut sigma = 0.0f32;
    for i in 0..rows {
        let mut acc = 0.0f32;
        for j in 0..cols {
            acc += wd[i * cols + j] * state.v[j];
        }
        sigma += state.u[i] * acc;
    }
    sigma
}

/// One power-iteration update followed by the normalization `w / sigma`.
/// The estimate is floored at 1e-12, so a zero matrix comes back unchanged.
pub fn spectral_normalize(weight: &Tensor, state: &mut SnState) -> Tensor {
    power_iteration_step(weight, state);
    let sigma = sigma_estimate(weight, state).max(1e-12);
    let data = weight.data().iter().map(|v| v / sigma).collect();
    Tensor::from_vec(weight.shape(), data)
}

/// A named parameter tensor, optionally spectrally normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub sn: Option<SnState>,
}

pub type ParamId = usize;

/// Per-step binding of parameters into a tape. `leaf` is the raw parameter
/// node (gradients are harvested there); `var` is the effective value after
/// spectral normalization, where applicable.
pub struct Binding {
    vars: Vec<Var>,
    leaves: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }

    pub fn leaf(&self, id: ParamId) -> Var {
        self.leaves[id]
    }
}

// ---------------------------------------------------------------------------
// Architecture plan
// ---------------------------------------------------------------------------

/// Resolved backbone dimensions for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchPlan {
    pub resolution: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub downsample: Vec<bool>,
    pub base_spatial: usize,
    pub d_z: usize,
    pub embed_dim: usize,
    pub fc_dim: usize,
    pub head_channels: usize,
    pub tap_stage: usize,
    pub tap_channels: usize,
    pub tap_spatial: usize,
}

impl ArchPlan {
    pub fn from_config(cfg: &ExperimentConfig) -> ArchPlan {
        let resolution = cfg.dataset.resolution();
        let in_channels = cfg.dataset.channels();
        assert!(resolution >= 8 && resolution % 2 == 0, "unsupported resolution {resolution}");
        let base = cfg.arch.base_width;
        let mut spatial = resolution;
        let mut n_down = 0usize;
        while spatial > 4 && spatial % 2 == 0 {
            spatial /= 2;
            n_down += 1;
        }
        let stages = n_down + 1;
        let widths: Vec<usize> = (0..stages).map(|i| base << i.min(2)).collect();
        let downsample: Vec<bool> = (0..stages).map(|i| i < n_down).collect();
        let tap_stage = 1.min(stages - 1);
        let pools_before_tap: usize = downsample[..tap_stage].iter().filter(|&&d| d).count();
        let tap_spatial = resolution >> pools_before_tap;
        ArchPlan {
            resolution,
            in_channels,
            widths: widths.clone(),
            downsample,
            base_spatial: spatial,
            d_z: cfg.latent_dim,
            embed_dim: cfg.embed_dim,
            fc_dim: cfg.arch.fc_dim,
            head_channels: cfg.arch.head_channels,
            tap_stage,
            tap_channels: widths[tap_stage],
            tap_spatial,
        }
    }

    fn width_in(&self, stage: usize) -> usize {
        if stage == 0 {
            self.widths[0]
        } else {
            self.widths[stage - 1]
        }
    }
}

// ---------------------------------------------------------------------------
// Layer specs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConvSpec {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LinSpec {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResBlock {
    conv1: ConvSpec,
    conv2: ConvSpec,
    skip: Option<ConvSpec>,
    /// Encoder/discriminator: average-pool after the block.
    pool: bool,
    /// Decoder: nearest-neighbor upsample before the block.
    upsample: bool,
}

/// Architecture manifest emitted next to checkpoints for shape validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchManifest {
    pub plan: ArchPlan,
    pub taps: Vec<String>,
    pub params: Vec<ParamInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub spectral_norm: bool,
}

/// Discriminator outputs: per-image logits plus the configured feature taps.
pub struct DiscOut {
    pub logits: Var,
    pub taps: BTreeMap<String, Var>,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// All networks and their parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub plan: ArchPlan,
    pub params: Vec<Param>,
    enc_stem: ConvSpec,
    enc_blocks: Vec<ResBlock>,
    enc_mu: LinSpec,
    enc_logvar: LinSpec,
    dec_in: LinSpec,
    dec_blocks: Vec<ResBlock>,
    dec_out: ConvSpec,
    disc_stem: ConvSpec,
    disc_blocks: Vec<ResBlock>,
    disc_fc: LinSpec,
    disc_logit: LinSpec,
    head_low_conv: ConvSpec,
    head_low_lin: LinSpec,
    head_high_lin: LinSpec,
    enc_ids: Vec<ParamId>,
    dec_ids: Vec<ParamId>,
    head_ids: Vec<ParamId>,
    disc_trunk_ids: Vec<ParamId>,
    disc_logit_ids: Vec<ParamId>,
}

struct Builder {
    params: Vec<Param>,
    group: Vec<ParamId>,
}

impl Builder {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, pad: usize, sn: bool) -> ConvSpec {
        let w = self.push(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]), sn);
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[cout]), false);
        ConvSpec { w, b, pad }
    }

    fn lin(&mut self, name: &str, dout: usize, din: usize, sn: bool) -> LinSpec {
        let w = self.push(format!("{name}.w"), Tensor::zeros(&[dout, din]), sn);
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[dout]), false);
        LinSpec { w, b }
    }

    fn push(&mut self, name: String, value: Tensor, sn: bool) -> ParamId {
        let id = self.params.len();
        self.params.push(Param {
            name,
            value,
            // placeholder states; real vectors are drawn during init
            sn: if sn { Some(SnState { u: Vec::new(), v: Vec::new() }) } else { None },
        });
        self.group.push(id);
        id
    }

    fn take_group(&mut self) -> Vec<ParamId> {
        core::mem::take(&mut self.group)
    }
}

impl Model {
    /// Build and deterministically initialize all parameters from the `init`
    /// stream of the run seed (variance-scaled fan-in initialization).
    pub fn init(cfg: &ExperimentConfig) -> Model {
        let plan = ArchPlan::from_config(cfg);
        let mut b = Builder { params: Vec::new(), group: Vec::new() };
        let stages = plan.widths.len();

        // encoder: spectrally normalized residual trunk, plain output heads
        let enc_stem = b.conv("enc.stem", plan.widths[0], plan.in_channels, 3, 1, true);
        let enc_blocks: Vec<ResBlock> = (0..stages)
            .map(|i| Self::make_block(&mut b, &format!("enc.block{i}"), &plan, i, true, false))
            .collect();
        let flat = plan.widths[stages - 1] * plan.base_spatial * plan.base_spatial;
        let enc_mu = b.lin("enc.mu", plan.d_z, flat, false);
        let enc_logvar = b.lin("enc.logvar", plan.d_z, flat, false);
        let enc_ids = b.take_group();

        // decoder mirrors the trunk with nearest-neighbor upsampling
        let dec_in = b.lin("dec.in", flat, plan.d_z, false);
        let mut dec_blocks = Vec::new();
        for i in (0..stages).rev() {
            let name = format!("dec.block{i}");
            let cin = plan.widths[i];
            let cout = plan.width_in(i);
            let conv1 = b.conv(&format!("{name}.conv1"), cout, cin, 3, 1, false);
            let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false);
            let skip = (cin != cout).then(|| b.conv(&format!("{name}.skip"), cout, cin, 1, 0, false));
            let upsample = i > 0 && plan.downsample[i - 1];
            dec_blocks.push(ResBlock { conv1, conv2, skip, pool: false, upsample });
        }
        let dec_out = b.conv("dec.out", plan.in_channels, plan.widths[0], 3, 1, false);
        let dec_ids = b.take_group();

        // discriminator trunk (spectrally normalized end to end)
        let disc_stem = b.conv("disc.stem", plan.widths[0], plan.in_channels, 3, 1, true);
        let disc_blocks: Vec<ResBlock> = (0..stages)
            .map(|i| Self::make_block(&mut b, &format!("disc.block{i}"), &plan, i, true, false))
            .collect();
        let disc_fc = b.lin("disc.fc", plan.fc_dim, plan.widths[stages - 1], true);
        let disc_trunk_ids = b.take_group();
        let disc_logit = b.lin("disc.logit", 1, plan.fc_dim, true);
        let disc_logit_ids = b.take_group();

        // projection heads: 1x1 channel reduction + linear for the spatial
        // tap, a linear map for the vector tap; outputs are L2-normalized
        let head_low_conv = b.conv("head.low.conv", plan.head_channels, plan.tap_channels, 1, 0, false);
        let head_low_lin = b.lin(
            "head.low.lin",
            plan.embed_dim,
            plan.head_channels * plan.tap_spatial * plan.tap_spatial,
            false,
        );
        let head_high_lin = b.lin("head.high.lin", plan.embed_dim, plan.fc_dim, false);
        let head_ids = b.take_group();

        let mut model = Model {
            plan,
            params: b.params,
            enc_stem,
            enc_blocks,
            enc_mu,
            enc_logvar,
            dec_in,
            dec_blocks,
            dec_out,
            disc_stem,
            disc_blocks,
            disc_fc,
            disc_logit,
            head_low_conv,
            head_low_lin,
            head_high_lin,
            enc_ids,
            dec_ids,
            head_ids,
            disc_trunk_ids,
            disc_logit_ids,
        };
        let mut rng = RngStream::derive(cfg.seed, "init");
        model.initialize(&mut rng);
        // warm the singular-vector estimates so sigma is meaningful from the
        // first forward pass
        for _ in 0..5 {
            model.refresh_spectral_estimates();
        }
        model
    }

    fn make_block(b: &mut Builder, name: &str, plan: &ArchPlan, stage: usize, sn: bool, upsample: bool) -> ResBlock {
        let cin = plan.width_in(stage);
        let cout = plan.widths[stage];
        let conv1 = b.conv(&format!("{name}.conv1"), cout, cin, 3, 1, sn);
        let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, sn);
        let skip = (cin != cout).then(|| b.conv(&format!("{name}.skip"), cout, cin, 1, 0, sn));
        ResBlock { conv1, conv2, skip, pool: plan.downsample[stage], upsample }
    }

    fn initialize(&mut self, rng: &mut RngStream) {
        // output-ish layers get unit-variance-preserving scale, hidden ones He
        let out_layers = ["enc.mu.w", "enc.logvar.w", "dec.out.w", "disc.logit.w",
                          "head.low.conv.w", "head.low.lin.w", "head.high.lin.w"];
        for p in self.params.iter_mut() {
            let shape = p.value.shape().to_vec();
            if shape.len() == 1 {
                continue; // biases stay zero
            }
            let fan_in: usize = shape[1..].iter().product();
            let gain = if out_layers.contains(&p.name.as_str()) { 1.0 } else { 2.0 };
            let std = (gain / fan_in as f32).sqrt();
            for v in p.value.data_mut() {
                *v = rng.normal_f32() * std;
            }
        }
        for p in self.params.iter_mut() {
            if p.sn.is_some() {
                let rows = p.value.shape()[0];
                let cols = p.value.numel() / rows;
                p.sn = Some(SnState::init(rows, cols, rng));
            }
        }
    }

    /// One persisted power-iteration step for every spectrally normalized
    /// weight; called once per training step.
    pub fn refresh_spectral_estimates(&mut self) {
        for p in self.params.iter_mut() {
            if let Some(sn) = p.sn.as_mut() {
                power_iteration_step(&p.value, sn);
            }
        }
    }

    /// Enter parameters into a tape. `trainable` decides leaf vs constant.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(ParamId) -> bool) -> Binding {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut leaves = Vec::with_capacity(self.params.len());
        for (id, p) in self.params.iter().enumerate() {
            let leaf = if trainable(id) {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            let var = match &p.sn {
                Some(sn) => tape.spectral_norm(leaf, &sn.u, &sn.v),
                None => leaf,
            };
            vars.push(var);
            leaves.push(leaf);
        }
        Binding { vars, leaves }
    }

    fn conv_fwd(&self, tape: &mut Tape, bind: &Binding, spec: &ConvSpec, x: Var) -> Var {
        tape.conv2d(x, bind.var(spec.w), bind.var(spec.b), spec.pad)
    }

    fn lin_fwd(&self, tape: &mut Tape, bind: &Binding, spec: &LinSpec, x: Var) -> Var {
        tape.linear(x, bind.var(spec.w), bind.var(spec.b))
    }

    fn block_fwd(&self, tape: &mut Tape, bind: &Binding, blk: &ResBlock, x: Var) -> (Var, Var) {
        let mut x = x;
        if blk.upsample {
            x = tape.upsample_nearest2(x);
        }
        let h = tape.relu(x);
        let h = self.conv_fwd(tape, bind, &blk.conv1, h);
        let h = tape.relu(h);
        let h = self.conv_fwd(tape, bind, &blk.conv2, h);
        let s = match &blk.skip {
            Some(cs) => self.conv_fwd(tape, bind, cs, x),
            None => x,
        };
        let y = tape.add(h, s);
        let out = if blk.pool { tape.avg_pool2(y) } else { y };
        (y, out)
    }

    fn check_image(&self, tape: &Tape, x: Var) -> Result<(), ModelError> {
        let shape = tape.value(x).shape().to_vec();
        let expected = vec![shape.first().copied().unwrap_or(0), self.plan.in_channels, self.plan.resolution, self.plan.resolution];
        if shape.len() != 4 || shape[1..] != expected[1..] {
            return Err(ModelError::ResolutionMismatch { expected, got: shape });
        }
        Ok(())
    }

    fn trunk_fwd(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        stem: &ConvSpec,
        blocks: &[ResBlock],
        x: Var,
    ) -> (Var, Var) {
        let mut h = self.conv_fwd(tape, bind, stem, x);
        let mut tap_low = h;
        for (i, blk) in blocks.iter().enumerate() {
            let (pre_pool, out) = self.block_fwd(tape, bind, blk, h);
            if i == self.plan.tap_stage {
                tap_low = pre_pool;
            }
            h = out;
        }
        (h, tap_low)
    }

    /// Gaussian posterior parameters `(mu, logvar)`, each `[N, d_z]`.
    pub fn encode(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<(Var, Var), ModelError> {
        self.check_image(tape, x)?;
        let (h, _) = self.trunk_fwd(tape, bind, &self.enc_stem, &self.enc_blocks, x);
        let h = tape.relu(h);
        let n = tape.value(h).shape()[0];
        let flat = tape.value(h).numel() / n;
        let h = tape.reshape(h, &[n, flat]);
        let mu = self.lin_fwd(tape, bind, &self.enc_mu, h);
        let logvar = self.lin_fwd(tape, bind, &self.enc_logvar, h);
        Ok((mu, logvar))
    }

    /// Decode latents into `[-1, 1]` images via the mirrored trunk.
    pub fn decode(&self, tape: &mut Tape, bind: &Binding, z: Var) -> Result<Var, ModelError> {
        let (n, dz) = tape.value(z).dims2();
        if dz != self.plan.d_z {
            return Err(ModelError::WrongLatentDim { expected: self.plan.d_z, got: dz });
        }
        let h = self.lin_fwd(tape, bind, &self.dec_in, z);
        let stages = self.plan.widths.len();
        let c_top = self.plan.widths[stages - 1];
        let mut h = tape.reshape(h, &[n, c_top, self.plan.base_spatial, self.plan.base_spatial]);
        for blk in &self.dec_blocks {
            let (_, out) = self.block_fwd(tape, bind, blk, h);
            h = out;
        }
        let h = tape.relu(h);
        let h = self.conv_fwd(tape, bind, &self.dec_out, h);
        Ok(tape.tanh(h))
    }

    /// Per-image logits and the configured taps.
    pub fn discriminate(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<DiscOut, ModelError> {
        self.check_image(tape, x)?;
        let (h, tap_low) = self.trunk_fwd(tape, bind, &self.disc_stem, &self.disc_blocks, x);
        let h = tape.relu(h);
        let pooled = tape.global_avg_pool(h);
        let tap_high = self.lin_fwd(tape, bind, &self.disc_fc, pooled);
        let lh = tape.relu(tap_high);
        let logit = self.lin_fwd(tape, bind, &self.disc_logit, lh);
        let n = tape.value(logit).shape()[0];
        let logits = tape.reshape(logit, &[n]);
        let mut taps = BTreeMap::new();
        taps.insert("low".to_string(), tap_low);
        taps.insert("high".to_string(), tap_high);
        Ok(DiscOut { logits, taps })
    }

    /// Project tap features to unit-norm contrast embeddings `[N, embed_dim]`.
    pub fn project(&self, tape: &mut Tape, bind: &Binding, tap: &str, features: Var) -> Result<Var, ModelError> {
        let v = match tap {
            "low" => {
                let h = self.conv_fwd(tape, bind, &self.head_low_conv, features);
                let n = tape.value(h).shape()[0];
                let flat = tape.value(h).numel() / n;
                let h = tape.reshape(h, &[n, flat]);
                self.lin_fwd(tape, bind, &self.head_low_lin, h)
            }
            "high" => self.lin_fwd(tape, bind, &self.head_high_lin, features),
            other => return Err(ModelError::UnknownTap(other.to_string())),
        };
        Ok(tape.row_normalize(v, 1e-12))
    }

    /// Parameter groups.
    pub fn encoder_ids(&self) -> &[ParamId] {
        &self.enc_ids
    }

    pub fn decoder_ids(&self) -> &[ParamId] {
        &self.dec_ids
    }

    pub fn head_ids(&self) -> &[ParamId] {
        &self.head_ids
    }

    pub fn disc_trunk_ids(&self) -> &[ParamId] {
        &self.disc_trunk_ids
    }

    pub fn disc_logit_ids(&self) -> &[ParamId] {
        &self.disc_logit_ids
    }

    pub fn manifest(&self) -> ArchManifest {
        ArchManifest {
            plan: self.plan.clone(),
            taps: vec!["low".to_string(), "high".to_string()],
            params: self
                .params
                .iter()
                .map(|p| ParamInfo {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    spectral_norm: p.sn.is_some(),
                })
                .collect(),
        }
    }
}

/// Select one spatial location uniformly (shared across the batch) and
/// return the L2-normalized depth fibers `[N, C]` plus the location.
pub fn sample_patch_embedding(
    tape: &mut Tape,
    tap_name: &str,
    features: Var,
    rng: &mut RngStream,
) -> Result<(Var, (usize, usize)), ModelError> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 4 {
        return Err(ModelError::NonSpatialTap(tap_name.to_string()));
    }
    let (h, w) = (shape[2], shape[3]);
    let loc = (rng.index(h), rng.index(w));
    let fiber = tape.extract_fiber(features, loc.0, loc.1);
    Ok((tape.row_normalize(fiber, 1e-12), loc))
}
