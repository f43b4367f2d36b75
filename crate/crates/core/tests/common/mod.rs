//! Reference computations shared by the integration suites and the
//! acceptance harness. Each one reaches its answer by a different route from
//! the library code it is compared against: explicit loops instead of
//! vectorized passes, full sorts instead of selection, quadrature instead of
//! sampling, scalar formulas instead of the tape.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod suites;

use std::f64::consts::PI;

use lsnpc::data::Labels;
use lsnpc::distributions::StudentCoupling;
use lsnpc::model::{Batch, LsnpcModel, ProposalFamily};
use lsnpc::pipeline::tiny_model_config;
use lsnpc::rng;
use lsnpc::tensor::{Tape, Tensor};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

/// Micro and macro F1 by walking every cell.
pub fn f1_by_cells(truth: &Labels, pred: &Labels) -> (f64, f64) {
    let (n, k) = (truth.n(), truth.k());
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let mut per_label = Vec::with_capacity(k);
    for j in 0..k {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for i in 0..n {
            match (truth.get(i, j) == 1, pred.get(i, j) == 1) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_label.push(if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        });
    }
    let denom = 2 * tp_all + fp_all + fn_all;
    let micro = if denom == 0 { 0.0 } else { 2.0 * tp_all as f64 / denom as f64 };
    (micro, per_label.iter().sum::<f64>() / k as f64)
}

pub fn random_labels<R: Rng>(rng: &mut R, n: usize, k: usize, density: f64) -> Labels {
    let bits = (0..n * k).map(|_| u8::from(rng.gen::<f64>() < density)).collect();
    Labels::new(n, k, bits).unwrap()
}

/// Majority vote over the `kn` nearest rows, found by sorting every
/// distance. Ties in distance go to the lower index; half the votes is a 1.
pub fn knn_scan(train_x: &Tensor, train_y: &Labels, query: &[f64], kn: usize) -> Vec<u8> {
    let mut order: Vec<(f64, usize)> = (0..train_x.rows())
        .map(|i| {
            let d: f64 = train_x.row_slice(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    (0..train_y.k())
        .map(|j| {
            let votes = order[..kn].iter().filter(|(_, i)| train_y.get(*i, j) == 1).count();
            u8::from(votes * 2 >= kn)
        })
        .collect()
}

pub fn normal_logpdf(x: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(scale)
        .map(|((x, m), s)| -0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * ((x - m) / s).powi(2))
        .sum()
}

pub fn std_normal_logpdf(x: &[f64]) -> f64 {
    x.iter().map(|x| -0.5 * (2.0 * PI).ln() - 0.5 * x * x).sum()
}

/// Diagonal Student log-density with unit scale when `scale` is `None`.
pub fn student_logpdf(x: &[f64], mean: &[f64], scale: Option<&[f64]>, nu: f64, coupling: StudentCoupling) -> f64 {
    let m = x.len();
    let s = |i: usize| scale.map_or(1.0, |s| s[i]);
    let t2: Vec<f64> = (0..m).map(|i| ((x[i] - mean[i]) / s(i)).powi(2)).collect();
    let log_det: f64 = (0..m).map(|i| s(i).ln()).sum();
    match coupling {
        StudentCoupling::Joint => {
            let mf = m as f64;
            ln_gamma((nu + mf) / 2.0) - ln_gamma(nu / 2.0) - mf / 2.0 * (nu * PI).ln() - log_det
                - (nu + mf) / 2.0 * (1.0 + t2.iter().sum::<f64>() / nu).ln()
        }
        StudentCoupling::Independent => {
            t2.iter()
                .map(|t| ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * PI).ln() - (nu + 1.0) / 2.0 * (1.0 + t / nu).ln())
                .sum::<f64>()
                - log_det
        }
    }
}

pub fn bernoulli_logpmf(y: &[u8], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(&y, &p)| if y == 1 { p.ln() } else { (1.0 - p).ln() }).sum()
}

fn bits(row: &[f64]) -> Vec<u8> {
    row.iter().map(|&v| v as u8).collect()
}

/// The training loss recomputed one row at a time from the network outputs
/// and scalar densities. `rng` must be in the state the library call starts
/// from; the oracle replays the same noise through `draw_noise` and, for
/// supervised batches, the η branch draws that follow it.
pub fn straight_line_loss(model: &LsnpcModel, batch: &Batch, mut rng: rng::Rng) -> f64 {
    let rows = batch.x.rows();
    let m = model.m();
    let cfg = &model.cfg;
    let noise = model.draw_noise(rows, &vec![cfg.nu; rows], &mut rng);
    let theta_branch: Vec<bool> = match batch.y {
        Some(_) => (0..rows).map(|_| rng.gen::<f64>() < cfg.eta).collect(),
        None => vec![false; rows],
    };
    let mut total = 0.0;
    for r in 0..rows {
        let x = batch.x.row_slice(r);
        let yhat = bits(batch.yhat.row_slice(r));
        let (mean, scale) = model.encode_xy(x, &yhat).unwrap();
        let zhat: Vec<f64> = (0..m).map(|i| mean[i] + scale[i] * noise.zhat.get(r, i)).collect();
        let q_z = model.encode_zhat_to_z(&zhat).unwrap();
        let e_z = noise.z.row_slice(r);
        let (z, lq_z) = if theta_branch[r] {
            let y = bits(batch.y.as_ref().unwrap().row_slice(r));
            let (ym, ys) = model.encode_xy(x, &y).unwrap();
            let z: Vec<f64> = (0..m).map(|i| ym[i] + ys[i] * e_z[i]).collect();
            let lq = normal_logpdf(&z, &ym, &ys);
            (z, lq)
        } else {
            let z: Vec<f64> = (0..m).map(|i| q_z.mean[i] + q_z.scale[i] * e_z[i]).collect();
            let lq = normal_logpdf(&z, &q_z.mean, &q_z.scale);
            (z, lq)
        };
        let rec = bernoulli_logpmf(&yhat, model.decode_labels(x, &zhat).unwrap().probs());
        let rec_y = match &batch.y {
            Some(y) => bernoulli_logpmf(&bits(y.row_slice(r)), model.decode_labels(x, &z).unwrap().probs()),
            None => 0.0,
        };
        let lq_zhat = match cfg.family {
            ProposalFamily::Student => student_logpdf(&zhat, &mean, Some(&scale), cfg.nu, cfg.coupling),
            ProposalFamily::Normal => normal_logpdf(&zhat, &mean, &scale),
        };
        let lp_zhat = student_logpdf(&zhat, &model.decode_shift(&z).unwrap(), None, cfg.nu0, cfg.coupling);
        let lp_z = std_normal_logpdf(&z);
        total += rec + rec_y + cfg.beta * (lp_zhat + lp_z - lq_zhat - lq_z);
    }
    -total / rows as f64
}

/// A `d = 3`, `k = 2`, `m = 1` model small enough for 2-D quadrature.
pub fn tiny_model(seed: u64, family: ProposalFamily, nu: f64) -> LsnpcModel {
    let cfg = lsnpc::model::LsnpcConfig {
        family,
        ..tiny_model_config(nu)
    };
    LsnpcModel::new(3, 2, cfg, &mut rng::stream(seed, "tiny-model")).unwrap()
}

/// Trapezoid nodes and weights on `[lo, hi]`.
fn trapezoid(lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| (lo + h * i as f64, if i == 0 || i == n - 1 { h / 2.0 } else { h }))
        .collect()
}

/// Exact expectation of the corrected probabilities for a one-dimensional
/// latent model: a sum over every label vector weighted by the base
/// probabilities, a trapezoid rule over the standardized `ẑ` offset and
/// another over the standardized `z` offset.
pub fn quadrature_correction(model: &LsnpcModel, x: &[f64], base: &[f64]) -> Vec<f64> {
    assert_eq!(model.m(), 1, "quadrature needs a one-dimensional latent");
    let k = model.k;
    let nu = model.cfg.nu;
    let t_nodes = trapezoid(-30.0, 30.0, 1201);
    let u_nodes = trapezoid(-8.0, 8.0, 65);
    let t_density = |t: f64| match model.cfg.family {
        ProposalFamily::Student => student_logpdf(&[t], &[0.0], None, nu, StudentCoupling::Joint).exp(),
        ProposalFamily::Normal => std_normal_logpdf(&[t]).exp(),
    };
    let t_w: Vec<f64> = t_nodes.iter().map(|&(t, w)| w * t_density(t)).collect();
    let t_mass: f64 = t_w.iter().sum();
    let u_w: Vec<f64> = u_nodes.iter().map(|&(u, w)| w * std_normal_logpdf(&[u]).exp()).collect();
    let u_mass: f64 = u_w.iter().sum();

    let mut out = vec![0.0; k];
    for code in 0..1usize << k {
        let yhat: Vec<u8> = (0..k).map(|j| ((code >> j) & 1) as u8).collect();
        let w_y: f64 = yhat.iter().zip(base).map(|(&b, &p)| if b == 1 { p } else { 1.0 - p }).product();
        if w_y == 0.0 {
            continue;
        }
        let (mean, scale) = model.encode_xy(x, &yhat).unwrap();
        let zhat: Vec<f64> = t_nodes.iter().map(|&(t, _)| mean[0] + scale[0] * t).collect();

        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let zv = tape.input("zhat", Tensor::matrix(zhat.len(), 1, zhat.clone()).unwrap());
        let (kmu, ks) = model.kappa_forward(&mut tape, &p, zv).unwrap();
        let (kmu, ks) = (tape.value(kmu).clone(), tape.value(ks).clone());

        let rows = zhat.len() * u_nodes.len();
        let mut z = Vec::with_capacity(rows);
        for i in 0..zhat.len() {
            for &(u, _) in &u_nodes {
                z.push(kmu.get(i, 0) + ks.get(i, 0) * u);
            }
        }
        let xs: Vec<f64> = (0..rows).flat_map(|_| x.iter().copied()).collect();
        let xv = tape.input("x", Tensor::matrix(rows, model.d, xs).unwrap());
        let zv = tape.input("z", Tensor::matrix(rows, 1, z).unwrap());
        let probs = model.phi_forward(&mut tape, &p, xv, zv).unwrap();
        let probs = tape.value(probs);
        for i in 0..zhat.len() {
            for (c, uw) in u_w.iter().enumerate() {
                let w = w_y * t_w[i] / t_mass * uw / u_mass;
                for (j, o) in out.iter_mut().enumerate() {
                    *o += w * probs.get(i * u_nodes.len() + c, j);
                }
            }
        }
    }
    out
}

/// `ln p(x, ŷ)` of a one-dimensional latent model by 2-D quadrature over
/// `(ẑ, z)` on `[-lim, lim]²`.
pub fn log_evidence(model: &LsnpcModel, x: &[f64], yhat: &[u8], lim: f64, n: usize) -> f64 {
    assert_eq!(model.m(), 1);
    let nodes = trapezoid(-lim, lim, n);
    let log_lik: Vec<f64> = nodes
        .iter()
        .map(|&(zh, _)| bernoulli_logpmf(yhat, model.decode_labels(x, &[zh]).unwrap().probs()))
        .collect();
    let mut terms = Vec::with_capacity(n * n);
    for &(z, wz) in &nodes {
        let shift = model.decode_shift(&[z]).unwrap();
        let log_pz = std_normal_logpdf(&[z]);
        for (&(zh, wh), ll) in nodes.iter().zip(&log_lik) {
            let lp = log_pz + student_logpdf(&[zh], &shift, None, model.cfg.nu0, model.cfg.coupling) + ll;
            terms.push(lp + (wz * wh).ln());
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `2·(0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5))`: two disagreeing labels, the
/// matched labels contribute nothing.
pub fn amortization_oracle() -> f64 {
    2.0 * (0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln())
}

pub fn fixed_batch(seed: u64, rows: usize, d: usize, k: usize, supervised: bool) -> Batch {
    let mut r = rng::stream(seed, "fixed-batch");
    let x = Tensor::matrix(rows, d, (0..rows * d).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap();
    let labels = |r: &mut rng::Rng| {
        Tensor::matrix(rows, k, (0..rows * k).map(|_| f64::from(u8::from(r.gen::<bool>()))).collect()).unwrap()
    };
    let yhat = labels(&mut r);
    let y = supervised.then(|| labels(&mut r));
    Batch { x, yhat, y }
}
