//! Central finite-difference checks of the analytic loss gradients at double
//! precision: 20+ random small instances per loss, h = 1e-5, relative error
//! below 1e-4.

use dcvae_core::objectives::math;
use dcvae_core::rng::RngStream;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Vector-level relative error plus a per-component guard.
fn assert_close(analytic: &[f64], fd: &[f64], what: &str) {
    assert_eq!(analytic.len(), fd.len());
    let mut num = 0.0;
    let mut na = 0.0;
    let mut nf = 0.0;
    for (a, f) in analytic.iter().zip(fd) {
        num += (a - f) * (a - f);
        na += a * a;
        nf += f * f;
        let denom = a.abs().max(f.abs()).max(1e-6);
        assert!(
            (a - f).abs() / denom < 1e-3,
            "{what}: component mismatch analytic={a} fd={f}"
        );
    }
    let rel = num.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-12);
    assert!(rel < TOL, "{what}: relative gradient error {rel:.3e} >= {TOL:.0e}");
}

fn central_diff(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(H) - f(-H)) / (2.0 * H)
}

#[test]
fn kl_gaussian_gradients_match_finite_differences() {
    let mut rng = RngStream::derive(101, "gc.kl");
    for case in 0..25 {
        let batch = 1 + rng.index(3);
        let d = 1 + rng.index(8);
        let mu: Vec<f64> = (0..batch * d).map(|_| rng.standard_normal()).collect();
        let lv: Vec<f64> = (0..batch * d).map(|_| rng.standard_normal()).collect();
        let (dmu, dlv) = math::kl_gaussian_grad(&mu, &lv, batch);
        let mut fd_mu = vec![0.0; mu.len()];
        let mut fd_lv = vec![0.0; lv.len()];
        for i in 0..mu.len() {
            fd_mu[i] = central_diff(|h| {
                let mut m = mu.clone();
                m[i] += h;
                math::kl_gaussian(&m, &lv, batch)
            });
            fd_lv[i] = central_diff(|h| {
                let mut l = lv.clone();
                l[i] += h;
                math::kl_gaussian(&mu, &l, batch)
            });
        }
        assert_close(&dmu, &fd_mu, &format!("kl mu case {case}"));
        assert_close(&dlv, &fd_lv, &format!("kl logvar case {case}"));
    }
}

#[test]
fn mse_gradients_match_finite_differences() {
    let mut rng = RngStream::derive(102, "gc.mse");
    for case in 0..25 {
        let n = 2 + rng.index(10);
        let a: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let (da, db) = math::mse_grad(&a, &b);
        let mut fd_a = vec![0.0; n];
        let mut fd_b = vec![0.0; n];
        for i in 0..n {
            fd_a[i] = central_diff(|h| {
                let mut x = a.clone();
                x[i] += h;
                math::mse(&x, &b)
            });
            fd_b[i] = central_diff(|h| {
                let mut y = b.clone();
                y[i] += h;
                math::mse(&a, &y)
            });
        }
        assert_close(&da, &fd_a, &format!("mse a case {case}"));
        assert_close(&db, &fd_b, &format!("mse b case {case}"));
    }
}

#[test]
fn info_nce_gradients_match_finite_differences() {
    let mut rng = RngStream::derive(103, "gc.nce");
    for case in 0..25 {
        let e = 2 + rng.index(7); // dim <= 8
        let m = 1 + rng.index(8); // negatives <= 8
        let draw = |rng: &mut RngStream| -> Vec<f64> { (0..e).map(|_| rng.standard_normal()).collect() };
        let anchor = draw(&mut rng);
        let positive = draw(&mut rng);
        let negatives: Vec<Vec<f64>> = (0..m).map(|_| draw(&mut rng)).collect();
        let temp = 0.5 + rng.uniform();
        let (da, dp, dn) = math::info_nce_grad(&anchor, &positive, &negatives, temp).unwrap();

        let eval = |anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>]| {
            math::info_nce(anchor, positive, negatives, temp).unwrap()
        };
        let mut fd_a = vec![0.0; e];
        let mut fd_p = vec![0.0; e];
        for i in 0..e {
            fd_a[i] = central_diff(|h| {
                let mut x = anchor.clone();
                x[i] += h;
                eval(&x, &positive, &negatives)
            });
            fd_p[i] = central_diff(|h| {
                let mut x = positive.clone();
                x[i] += h;
                eval(&anchor, &x, &negatives)
            });
        }
        assert_close(&da, &fd_a, &format!("nce anchor case {case}"));
        assert_close(&dp, &fd_p, &format!("nce positive case {case}"));
        for (k, dnk) in dn.iter().enumerate() {
            let mut fd_n = vec![0.0; e];
            for i in 0..e {
                fd_n[i] = central_diff(|h| {
                    let mut negs = negatives.clone();
                    negs[k][i] += h;
                    eval(&anchor, &positive, &negs)
                });
            }
            assert_close(dnk, &fd_n, &format!("nce negative {k} case {case}"));
        }
    }
}

#[test]
fn gan_logit_gradients_match_finite_differences() {
    let mut rng = RngStream::derive(104, "gc.gan");
    for case in 0..25 {
        let n = 1 + rng.index(6);
        let draw = |rng: &mut RngStream| -> Vec<f64> {
            (0..n).map(|_| 3.0 * rng.standard_normal()).collect()
        };
        let real = draw(&mut rng);
        let fs = draw(&mut rng);
        let fr = draw(&mut rng);

        let (dr, dfs, dfr) = math::gan_d_grad(&real, &fs, &fr);
        let d_of = |real: &[f64], fs: &[f64], fr: &[f64]| math::gan_losses(real, fs, fr).0;
        let mut fd = vec![0.0; n];
        for i in 0..n {
            fd[i] = central_diff(|h| {
                let mut x = real.clone();
                x[i] += h;
                d_of(&x, &fs, &fr)
            });
        }
        assert_close(&dr, &fd, &format!("gan_d real case {case}"));
        for i in 0..n {
            fd[i] = central_diff(|h| {
                let mut x = fs.clone();
                x[i] += h;
                d_of(&real, &x, &fr)
            });
        }
        assert_close(&dfs, &fd, &format!("gan_d fake_sample case {case}"));
        for i in 0..n {
            fd[i] = central_diff(|h| {
                let mut x = fr.clone();
                x[i] += h;
                d_of(&real, &fs, &x)
            });
        }
        assert_close(&dfr, &fd, &format!("gan_d fake_recon case {case}"));

        let (gfs, gfr) = math::gan_g_grad(&fs, &fr);
        let g_of = |fs: &[f64], fr: &[f64]| math::gan_losses(&real, fs, fr).1;
        for i in 0..n {
            fd[i] = central_diff(|h| {
                let mut x = fs.clone();
                x[i] += h;
                g_of(&x, &fr)
            });
        }
        assert_close(&gfs, &fd, &format!("gan_g fake_sample case {case}"));
        for i in 0..n {
            fd[i] = central_diff(|h| {
                let mut x = fr.clone();
                x[i] += h;
                g_of(&fs, &x)
            });
        }
        assert_close(&gfr, &fd, &format!("gan_g fake_recon case {case}"));
    }
}
