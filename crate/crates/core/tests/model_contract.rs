//! Backbone contract checks: shapes, determinism, output ranges, projection
//! normalization, tap structure, and spectral normalization against a
//! singular-value oracle.

use dcvae_core::config::{ArchSettings, Mode, RawConfig};
use dcvae_core::metrics::sym_eigen;
use dcvae_core::model::{power_iteration_step, sample_patch_embedding, Model, SnState};
use dcvae_core::rng::RngStream;
use dcvae_core::tape::Tape;
use dcvae_core::tensor::Tensor;

fn config(resolution: usize, d_z: usize) -> dcvae_core::ExperimentConfig {
    RawConfig {
        mode: Some(Mode::DcVae),
        latent_dim: Some(d_z),
        embed_dim: Some(16),
        queue_capacity: Some(8),
        batch_size: Some(4),
        dataset: Some(dcvae_core::DatasetSpec::Toy {
            n: 16,
            n_eval: 8,
            resolution,
            seed: 0,
        }),
        seed: Some(7),
        arch: Some(ArchSettings {
            base_width: 8,
            fc_dim: 24,
            head_channels: 4,
        }),
        ..RawConfig::default()
    }
    .resolve()
    .unwrap()
}

fn randn_batch(n: usize, c: usize, r: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::derive(seed, "mc.batch");
    let mut data = vec![0.0f32; n * c * r * r];
    rng.fill_normal_f32(&mut data);
    for v in data.iter_mut() {
        *v = (*v * 0.5).tanh();
    }
    Tensor::from_vec(&[n, c, r, r], data)
}

/// Largest singular value via the eigendecomposition of the Gram matrix — an
/// independent algorithm from the power-iteration path it checks.
fn svd_sigma_max(w: &Tensor) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let wd = w.data();
    let mut gram = vec![0.0f64; cols * cols];
    for i in 0..cols {
        for j in i..cols {
            let mut acc = 0.0f64;
            for r in 0..rows {
                acc += wd[r * cols + i] as f64 * wd[r * cols + j] as f64;
            }
            gram[i * cols + j] = acc;
            gram[j * cols + i] = acc;
        }
    }
    let (eig, _) = sym_eigen(&gram, cols);
    eig.iter().cloned().fold(0.0f64, f64::max).sqrt()
}

#[test]
fn encode_decode_shapes_and_determinism() {
    for resolution in [8usize, 16, 28] {
        let cfg = config(resolution, 128);
        let model = Model::init(&cfg);
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, &|_| false);
        let x = tape.constant(randn_batch(4, 1, resolution, 1));
        let (mu, logvar) = model.encode(&mut tape, &bind, x).unwrap();
        assert_eq!(tape.value(mu).shape(), &[4, 128]);
        assert_eq!(tape.value(logvar).shape(), &[4, 128]);
        assert!(tape.value(mu).is_finite() && tape.value(logvar).is_finite());

        let z = tape.constant(Tensor::from_vec(
            &[2, 128],
            (0..256).map(|i| ((i as f32) * 0.01).sin()).collect::<Vec<_>>(),
        ));
        let img = model.decode(&mut tape, &bind, z).unwrap();
        assert_eq!(tape.value(img).shape(), &[2, 1, resolution, resolution]);
        assert!(tape.value(img).data().iter().all(|v| v.abs() <= 1.0));

        // decode twice -> identical
        let img2 = model.decode(&mut tape, &bind, z).unwrap();
        assert_eq!(tape.value(img), tape.value(img2));
    }
}

#[test]
fn four_stage_trunk_at_32() {
    let cfg = config(32, 16);
    let model = Model::init(&cfg);
    assert_eq!(model.plan.widths.len(), 4, "32x32 backbone is a 4-stage trunk");
    assert_eq!(model.plan.base_spatial, 4);
    assert_eq!(model.plan.downsample, vec![true, true, true, false]);
    // decoder mirrors: output already checked; tap sits at stage 1
    assert_eq!(model.plan.tap_stage, 1);
    assert_eq!(model.plan.tap_spatial, 16);
}

#[test]
fn duplicated_rows_encode_identically() {
    let cfg = config(8, 12);
    let model = Model::init(&cfg);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, &|_| false);
    let one = randn_batch(1, 1, 8, 3);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let x = tape.constant(Tensor::from_vec(&[2, 1, 8, 8], data));
    let (mu, _) = model.encode(&mut tape, &bind, x).unwrap();
    let m = tape.value(mu).data();
    assert_eq!(&m[..12], &m[12..24], "identical inputs give identical rows");
}

#[test]
fn zero_input_is_finite_at_init() {
    let cfg = config(8, 12);
    let model = Model::init(&cfg);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, &|_| false);
    let x = tape.constant(Tensor::zeros(&[3, 1, 8, 8]));
    let (mu, logvar) = model.encode(&mut tape, &bind, x).unwrap();
    assert!(tape.value(mu).is_finite() && tape.value(logvar).is_finite());
    let d = model.discriminate(&mut tape, &bind, x).unwrap();
    assert!(tape.value(d.logits).is_finite());
}

#[test]
fn discriminator_taps_and_permutation_equivariance() {
    let cfg = config(16, 12);
    let model = Model::init(&cfg);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, &|_| false);
    let x = randn_batch(3, 1, 16, 5);
    let xv = tape.constant(x.clone());
    let out = model.discriminate(&mut tape, &bind, xv).unwrap();
    assert_eq!(out.taps.len(), 2, "exactly the configured taps are emitted");
    // tap_low: stage-1 block output (pre-pool), tap_high: first linear output
    let low = tape.value(out.taps["low"]);
    assert_eq!(low.shape(), &[3, model.plan.tap_channels, 8, 8]);
    let high = tape.value(out.taps["high"]);
    assert_eq!(high.shape(), &[3, 24]);
    assert_eq!(tape.value(out.logits).shape(), &[3]);

    // permuting batch rows permutes logits identically
    let per = x.numel() / 3;
    let mut permuted = Vec::with_capacity(x.numel());
    for i in [2usize, 0, 1] {
        permuted.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let xp = tape.constant(Tensor::from_vec(&[3, 1, 16, 16], permuted));
    let outp = model.discriminate(&mut tape, &bind, xp).unwrap();
    let l = tape.value(out.logits).data();
    let lp = tape.value(outp.logits).data();
    for (i, &j) in [2usize, 0, 1].iter().enumerate() {
        assert!((lp[i] - l[j]).abs() < 1e-5);
    }
}

#[test]
fn projections_are_unit_norm_under_arbitrary_parameters() {
    let cfg = config(8, 12);
    let mut model = Model::init(&cfg);
    // scramble parameters; the postcondition is structural, not learned
    let mut rng = RngStream::derive(99, "scramble");
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = 3.0 * rng.normal_f32();
        }
    }
    // re-align the persisted singular-vector estimates with the new weights
    for _ in 0..5 {
        model.refresh_spectral_estimates();
    }
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, &|_| false);
    let x = tape.constant(randn_batch(128, 1, 8, 6));
    let out = model.discriminate(&mut tape, &bind, x).unwrap();
    for tap in ["low", "high"] {
        let e = model.project(&mut tape, &bind, tap, out.taps[tap]).unwrap();
        let t = tape.value(e);
        let (n, d) = t.dims2();
        assert_eq!((n, d), (128, 16));
        for i in 0..n {
            let nrm = t.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f32>()
                .sqrt();
            assert!((nrm - 1.0).abs() < 1e-6, "row {i} norm {nrm}");
        }
    }
    assert!(model.project(&mut tape, &bind, "mid", out.taps["low"]).is_err());
}

#[test]
fn projection_scale_invariance_with_zero_bias() {
    let cfg = config(8, 12);
    let mut model = Model::init(&cfg);
    // disable head biases so the head is purely linear
    for p in model.params.iter_mut() {
        if p.name.starts_with("head.") && p.name.ends_with(".b") {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
    }
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, &|_| false);
    let feats = randn_batch(4, model.plan.tap_channels, model.plan.tap_spatial, 8);
    let f1 = tape.constant(feats.clone());
    let scaled = Tensor::from_vec(feats.shape(), feats.data().iter().map(|v| v * 10.0).collect());
    let f2 = tape.constant(scaled);
    let e1 = model.project(&mut tape, &bind, "low", f1).unwrap();
    let e2 = model.project(&mut tape, &bind, "low", f2).unwrap();
    for (a, b) in tape.value(e1).data().iter().zip(tape.value(e2).data()) {
        assert!((a - b).abs() < 1e-5, "scaling input must not change the embedding");
    }
}

#[test]
fn patch_embedding_contract() {
    let cfg = config(16, 12);
    let model = Model::init(&cfg);
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, &|_| false);
    let x = tape.constant(randn_batch(5, 1, 16, 9));
    let out = model.discriminate(&mut tape, &bind, x).unwrap();

    let mut rng = RngStream::derive(4, "patch");
    let (emb, loc) = sample_patch_embedding(&mut tape, "low", out.taps["low"], &mut rng).unwrap();
    let t = tape.value(emb);
    assert_eq!(t.shape(), &[5, model.plan.tap_channels]);
    assert!(loc.0 < 8 && loc.1 < 8);
    for i in 0..5 {
        let d = model.plan.tap_channels;
        let nrm = t.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((nrm - 1.0).abs() < 1e-5);
    }

    // same stream state -> same location
    let mut rng2 = RngStream::derive(4, "patch");
    let (_, loc2) = sample_patch_embedding(&mut tape, "low", out.taps["low"], &mut rng2).unwrap();
    assert_eq!(loc, loc2);

    // constant feature map -> identical embeddings at any location
    let c = model.plan.tap_channels;
    let mut flat = vec![0.0f32; 2 * c * 9];
    for i in 0..2 {
        for ch in 0..c {
            for s in 0..9 {
                flat[(i * c + ch) * 9 + s] = (ch as f32 + 1.0) * if i == 0 { 1.0 } else { -0.5 };
            }
        }
    }
    let cmap = tape.constant(Tensor::from_vec(&[2, c, 3, 3], flat));
    let mut embs = Vec::new();
    for (h, w) in [(0usize, 0usize), (1, 2), (2, 1)] {
        let f = tape.extract_fiber(cmap, h, w);
        let e = tape.row_normalize(f, 1e-12);
        embs.push(tape.value(e).clone());
    }
    assert_eq!(embs[0], embs[1]);
    assert_eq!(embs[0], embs[2]);

    // vector taps are rejected
    assert!(sample_patch_embedding(&mut tape, "high", out.taps["high"], &mut rng).is_err());
}

#[test]
fn init_is_deterministic_and_manifest_matches() {
    let cfg = config(8, 12);
    let a = Model::init(&cfg);
    let b = Model::init(&cfg);
    for (pa, pb) in a.params.iter().zip(&b.params) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
        assert_eq!(pa.sn, pb.sn, "{}", pa.name);
    }
    let manifest = a.manifest();
    assert_eq!(manifest.params.len(), a.params.len());
    for (info, p) in manifest.params.iter().zip(&a.params) {
        assert_eq!(info.shape, p.value.shape());
        assert_eq!(info.spectral_norm, p.sn.is_some());
    }
    // encoder/discriminator trunks carry spectral norm; decoder does not
    assert!(manifest.params.iter().any(|p| p.name.starts_with("enc.stem") && p.spectral_norm));
    assert!(manifest
        .params
        .iter()
        .filter(|p| p.name.starts_with("dec."))
        .all(|p| !p.spectral_norm));
}

#[test]
fn spectral_normalize_analytic_diagonal() {
    // diag(3, 1): sigma_max = 3, normalized weight converges to diag(1, 1/3)
    let w = Tensor::from_vec(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]);
    let mut rng = RngStream::derive(21, "sn.diag");
    let mut sn = SnState::init(2, 2, &mut rng);
    let mut out = w.clone();
    for _ in 0..200 {
        out = dcvae_core::model::spectral_normalize(&w, &mut sn);
    }
    let d = out.data();
    assert!((d[0] - 1.0).abs() < 1e-5, "got {:?}", d);
    assert!((d[3] - 1.0 / 3.0).abs() < 1e-5);
    assert!(d[1].abs() < 1e-6 && d[2].abs() < 1e-6);

    // idempotence at the fixpoint: an already-normalized matrix is unchanged
    let mut sn2 = SnState::init(2, 2, &mut rng);
    let mut w2 = out.clone();
    for _ in 0..100 {
        w2 = dcvae_core::model::spectral_normalize(&out, &mut sn2);
    }
    for (a, b) in w2.data().iter().zip(out.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn spectral_normalize_matches_svd_oracle() {
    // 50 iterations on a 64x128 matrix: sigma_max of the output within 1e-4
    let mut rng = RngStream::derive(40, "sn.svd");
    let mut data = vec![0.0f32; 64 * 128];
    rng.fill_normal_f32(&mut data);
    let w = Tensor::from_vec(&[64, 128], data);
    let mut sn = SnState::init(64, 128, &mut rng);
    let mut out = w.clone();
    for _ in 0..50 {
        out = dcvae_core::model::spectral_normalize(&w, &mut sn);
    }
    let sigma = svd_sigma_max(&out);
    assert!((sigma - 1.0).abs() < 1e-4, "sigma_max {sigma}");

    // never increases the estimate beyond the input's true sigma_max
    let sigma_in = svd_sigma_max(&w);
    let est = dcvae_core::model::sigma_estimate(&w, &sn) as f64;
    assert!(est <= sigma_in * (1.0 + 1e-5), "estimate {est} vs true {sigma_in}");
}

#[test]
fn spectral_normalize_zero_matrix_unchanged() {
    let w = Tensor::zeros(&[3, 4]);
    let mut rng = RngStream::derive(23, "sn.zero");
    let mut sn = SnState::init(3, 4, &mut rng);
    let out = dcvae_core::model::spectral_normalize(&w, &mut sn);
    assert_eq!(out.data(), w.data());
}

#[test]
fn power_iteration_convergence_up_to_256() {
    // criterion-level contract: <= 100 iterations, random matrices up to
    // 256x128, sigma_max of the normalized output within 1e-3 of 1
    for (rows, cols, seed) in [(256usize, 128usize, 31u64), (128, 96, 32), (96, 256, 33)] {
        let mut rng = RngStream::derive(seed, "sn.conv");
        let mut data = vec![0.0f32; rows * cols];
        rng.fill_normal_f32(&mut data);
        let w = Tensor::from_vec(&[rows, cols], data);
        let mut sn = SnState::init(rows, cols, &mut rng);
        let mut out = w.clone();
        for _ in 0..100 {
            out = dcvae_core::model::spectral_normalize(&w, &mut sn);
        }
        let sigma = svd_sigma_max(&out);
        assert!((sigma - 1.0).abs() < 1e-3, "{rows}x{cols}: sigma {sigma}");
    }
}
