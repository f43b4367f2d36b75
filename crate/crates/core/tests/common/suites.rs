//! Oracle suites shared by the integration tests and the acceptance harness.
//! Each returns a one-line summary or the first mismatch.

use lsnpc::correction::{correct_from_probs, knn_correct, CorrectionConfig};
use lsnpc::distributions::StudentCoupling;
use lsnpc::metrics::{macro_f1, micro_f1};
use lsnpc::model::{LsnpcConfig, LsnpcModel, ProposalFamily};
use lsnpc::rng;
use lsnpc::tensor::{grad_check, Tensor};
use rand::Rng;

use super::*;

pub type Outcome = std::result::Result<String, String>;

pub fn small(cfg: LsnpcConfig, seed: u64) -> LsnpcModel {
    let cfg = LsnpcConfig {
        m: 3,
        hidden: 6,
        label_hidden: 5,
        label_embed: 4,
        ..cfg
    };
    LsnpcModel::new(4, 3, cfg, &mut rng::stream(seed, "small-model")).unwrap()
}

/// Default, Normal proposals, independent coupling with unequal ν, and
/// β = 1 with a different η.
pub fn variants() -> Vec<LsnpcConfig> {
    vec![
        LsnpcConfig::default(),
        LsnpcConfig {
            family: ProposalFamily::Normal,
            ..Default::default()
        },
        LsnpcConfig {
            coupling: StudentCoupling::Independent,
            nu: 4.0,
            nu0: 6.0,
            beta: 0.7,
            ..Default::default()
        },
        LsnpcConfig {
            beta: 1.0,
            eta: 0.3,
            ..Default::default()
        },
    ]
}

/// Random label matrices of every small shape against cell counting.
pub fn metrics_suite(cases: usize) -> Outcome {
    let mut r = rng::stream(9, "metrics-suite");
    for case in 0..cases {
        let (n, k) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let density = r.gen_range(0.01..0.99);
        let truth = random_labels(&mut r, n, k, density);
        let pred = random_labels(&mut r, n, k, density);
        let (micro, macro_) = f1_by_cells(&truth, &pred);
        let (got_micro, got_macro) = (micro_f1(&truth, &pred).map_err(|e| e.to_string())?, macro_f1(&truth, &pred).map_err(|e| e.to_string())?);
        if (got_micro - micro).abs() > 1e-12 || (got_macro - macro_).abs() > 1e-12 {
            return Err(format!("case {case}: ({got_micro}, {got_macro}) vs ({micro}, {macro_})"));
        }
    }
    Ok(format!("{cases} label matrices"))
}

/// Integer-grid queries, so distance ties are common.
pub fn knn_suite(queries: usize) -> Outcome {
    let mut r = rng::stream(11, "knn");
    let (n, d, k) = (80, 3, 4);
    let grid = |r: &mut rng::Rng, len: usize| (0..len).map(|_| r.gen_range(-2i32..=2) as f64).collect::<Vec<f64>>();
    let train_x = Tensor::matrix(n, d, grid(&mut r, n * d)).unwrap();
    let train_y = random_labels(&mut r, n, k, 0.4);
    let qx = Tensor::matrix(queries, d, grid(&mut r, queries * d)).unwrap();
    for kn in [1, 4, 5] {
        let got = knn_correct(&train_x, &train_y, &qx, kn).map_err(|e| e.to_string())?;
        for q in 0..queries {
            let want = knn_scan(&train_x, &train_y, qx.row_slice(q), kn);
            if got.row(q) != want.as_slice() {
                return Err(format!("query {q}, K = {kn}: {:?} vs {want:?}", got.row(q)));
            }
        }
    }
    Ok(format!("{queries} queries × K ∈ {{1, 4, 5}}"))
}

/// Both losses on frozen noise against the straight-line recomputation.
pub fn loss_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, cfg) in variants().into_iter().enumerate() {
        let model = small(cfg, i as u64);
        for supervised in [false, true] {
            let (batch, seed) = if supervised {
                (fixed_batch(10 + i as u64, 24, 4, 3, true), rng::stream(50 + i as u64, "frozen"))
            } else {
                (fixed_batch(i as u64, 7, 4, 3, false), rng::stream(40 + i as u64, "frozen"))
            };
            let eval = if supervised {
                model.supervised_loss(&batch, &mut seed.clone())
            } else {
                model.unsupervised_loss(&batch, &mut seed.clone())
            }
            .map_err(|e| e.to_string())?;
            if supervised && !(eval.theta_branch > 0 && eval.theta_branch < batch.x.rows()) {
                return Err(format!("variant {i}: supervised batch uses one branch only ({})", eval.theta_branch));
            }
            let oracle = straight_line_loss(&model, &batch, seed);
            let rel = (eval.value - oracle).abs() / oracle.abs().max(1.0);
            if rel > 1e-9 {
                return Err(format!("variant {i} supervised={supervised}: {} vs {oracle}", eval.value));
            }
            worst = worst.max(rel);
        }
    }
    Ok(format!("8 losses, worst relative error {worst:.1e}"))
}

pub fn gradient_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, cfg) in variants().into_iter().enumerate() {
        let model = small(cfg, i as u64);
        let names: Vec<String> = model.params.names().map(String::from).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        for supervised in [false, true] {
            let batch = fixed_batch(i as u64, 3, 4, 3, supervised);
            let r = &mut rng::stream(7, "grad");
            let mut g = if supervised {
                model.supervised_graph(&batch, r)
            } else {
                model.unsupervised_graph(&batch, r)
            }
            .map_err(|e| e.to_string())?;
            let err = grad_check(&mut g.tape, g.loss, &refs, 1e-6).map_err(|e| e.to_string())?;
            if err >= 1e-4 {
                return Err(format!("variant {i} supervised={supervised}: relative error {err}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("8 loss graphs, worst relative error {worst:.1e}"))
}

/// Monte-Carlo correction of tiny models against exact quadrature.
pub fn correction_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    for (seed, family) in [(1, ProposalFamily::Student), (2, ProposalFamily::Student), (3, ProposalFamily::Normal)] {
        let model = tiny_model(seed, family, 8.0);
        let mut r = rng::stream(seed, "tiny-inputs");
        let rows = 3;
        let x = Tensor::matrix(rows, 3, (0..rows * 3).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        let base = Tensor::matrix(rows, 2, (0..rows * 2).map(|_| r.gen_range(0.1..0.9)).collect()).unwrap();
        let cfg = CorrectionConfig {
            s_y: 2500,
            s_zhat: 4,
            s_z: 1,
            seed,
            ..Default::default()
        };
        let mc = correct_from_probs(&model, &x, &base, &cfg).map_err(|e| e.to_string())?;
        for i in 0..rows {
            let exact = quadrature_correction(&model, x.row_slice(i), base.row_slice(i));
            for (j, want) in exact.iter().enumerate() {
                let err = (mc.probs.get(i, j) - want).abs();
                if err > 0.01 {
                    return Err(format!("seed {seed} row {i} label {j}: {} vs {want}", mc.probs.get(i, j)));
                }
                worst = worst.max(err);
            }
        }
    }
    Ok(format!("18 probabilities, worst error {worst:.4}"))
}
