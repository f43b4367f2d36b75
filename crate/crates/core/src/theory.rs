//! Numerical checks of the model's KL guarantees.
//!
//! * First-order bound (`theorem1` checks): the expected KL between `q(z | ẑ)` and the marginal posterior
//!   `p(z | x, ŷ)` is at most the joint KL of the two-level proposal. Both
//!   sides are computed by quadrature on a product grid, so only `m ≤ 2`.
//! * Label-shift bound (`theorem2` checks): the KL between proposals under two label vectors is at most
//!   `C1 + C2·Δ`, with constants estimated from the trained encoder. The
//!   Student KL has no closed form and is estimated by Monte Carlo.
//! * The Normal-proposal corollary, which replaces the bound by
//!   `(3Mm/2)Δ − m/2 + (mL²/λ)Δ²`.
//! * The Bernoulli KL amortization argument.
//!
//! `Δ` is the Hamming distance between label vectors.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::data::Labels;
use crate::distributions::{
    draw_chi2, entropy_diag_student, kl_diag_normal, kl_mv_bernoulli, logpdf_diag_normal, logpdf_diag_student_with,
    rsample_diag_student, standard_normal_vec, BernoulliVec, DiagNormalParams, DiagStudentParams, StudentCoupling,
};
use crate::error::{Error, Result};
use crate::model::{LsnpcModel, NuMode, ProposalFamily};
use crate::special::{digamma, ln_gamma};
use crate::tensor::{Tape, Tensor};

/// Probability mass a grid may lose or gain before it is rejected.
pub const NORMALIZATION_TOL: f64 = 1e-3;

/// A product grid with the same range and step in every latent dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid {
            lo: -8.0,
            hi: 8.0,
            step: 0.02,
        }
    }
}

impl QuadratureGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("bad quadrature grid [{lo}, {hi}] step {step}")));
        }
        Ok(QuadratureGrid { lo, hi, step })
    }

    /// One-dimensional nodes, endpoints included.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.lo + i as f64 * self.step).collect()
    }

    /// All `m`-dimensional nodes as rows, last dimension fastest.
    pub fn nodes(&self, m: usize) -> Tensor {
        let pts = self.points();
        let count = pts.len().pow(m as u32);
        let mut data = Vec::with_capacity(count * m);
        for flat in 0..count {
            let mut rem = flat;
            let mut row = vec![0.0; m];
            for slot in row.iter_mut().rev() {
                *slot = pts[rem % pts.len()];
                rem /= pts.len();
            }
            data.extend(row);
        }
        Tensor::matrix(count, m, data).expect("grid shape")
    }

    /// Volume of one cell in `m` dimensions.
    pub fn cell(&self, m: usize) -> f64 {
        self.step.powi(m as i32)
    }
}

/// Every log-density the first-order check needs, tabulated on the grid.
/// Tables indexed `[i * g + j]` pair the `i`-th `ẑ` node with the `j`-th `z`
/// node.
#[derive(Clone, Debug)]
pub struct Theorem1Tables {
    pub nodes: Tensor,
    pub cell: f64,
    /// `log q(ẑ_i | x, ŷ)`.
    pub log_q_zhat: Vec<f64>,
    /// `log q(z_j | ẑ_i)`.
    pub log_q_z: Vec<f64>,
    /// `log p(z_j) + log p(ẑ_i | z_j) + log p(ŷ | x, ẑ_i)`.
    pub log_joint: Vec<f64>,
    /// Differential entropy of `q(ẑ | x, ŷ)`.
    pub entropy: f64,
}

impl Theorem1Tables {
    pub fn len(&self) -> usize {
        self.log_q_zhat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_q_zhat.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theorem1Result {
    /// `E_{ẑ~q}[KL(q(z | ẑ) ‖ p(z | x, ŷ))]`.
    pub lhs: f64,
    /// `KL(q(z, ẑ | x, ŷ) ‖ p(z, ẑ | x, ŷ))`.
    pub rhs: f64,
    pub entropy: f64,
    /// Grid mass of `q(ẑ | x, ŷ)` before renormalization.
    pub mass: f64,
}

impl Theorem1Result {
    pub fn holds(&self, tol: f64) -> bool {
        self.lhs <= self.rhs + tol
    }

    /// The proof drops the proposal entropy assuming it is non-negative.
    pub fn entropy_step_vacuous(&self) -> bool {
        self.entropy < 0.0
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Evaluates `θ(x, labels)` for every row; returns means, scales and ν.
fn encode_rows(model: &LsnpcModel, x: Tensor, labels: Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let rows = x.rows();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.input("x", x);
    let yv = tape.input("y", labels);
    let th = model.theta_forward(&mut tape, &p, xv, yv)?;
    let nus = model.nu_values(&tape, &th, rows);
    Ok((tape.value(th.mean).clone(), tape.value(th.scale).clone(), nus))
}

fn proposal_logpdf(model: &LsnpcModel, point: &[f64], mean: &[f64], scale: &[f64], nu: f64) -> Result<f64> {
    match model.cfg.family {
        ProposalFamily::Normal => logpdf_diag_normal(point, &DiagNormalParams::new(mean.to_vec(), scale.to_vec())?),
        ProposalFamily::Student => logpdf_diag_student_with(
            point,
            &DiagStudentParams::new(mean.to_vec(), scale.to_vec(), nu)?,
            model.cfg.coupling,
        ),
    }
}

fn proposal_entropy(model: &LsnpcModel, scale: &[f64], nu: f64) -> Result<f64> {
    match (model.cfg.family, model.cfg.coupling) {
        (ProposalFamily::Normal, _) => Ok(scale
            .iter()
            .map(|s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + s.ln())
            .sum()),
        (ProposalFamily::Student, StudentCoupling::Joint) => {
            entropy_diag_student(&DiagStudentParams::new(vec![0.0; scale.len()], scale.to_vec(), nu)?)
        }
        (ProposalFamily::Student, StudentCoupling::Independent) => scale
            .iter()
            .map(|&s| entropy_diag_student(&DiagStudentParams::new(vec![0.0], vec![s], nu)?))
            .sum(),
    }
}

/// Tabulates the densities of one instance `(x, ŷ)` on `grid`.
pub fn theorem1_tables(model: &LsnpcModel, x: &[f64], yhat: &[u8], grid: &QuadratureGrid) -> Result<Theorem1Tables> {
    let m = model.m();
    if !(1..=2).contains(&m) {
        return Err(Error::invalid(format!("quadrature needs a latent dimension of 1 or 2, got {m}")));
    }
    if x.len() != model.d || yhat.len() != model.k {
        return Err(Error::DimMismatch {
            expected: model.d + model.k,
            got: x.len() + yhat.len(),
        });
    }
    let nodes = grid.nodes(m);
    let g = nodes.rows();
    let label_row = Tensor::row(yhat.iter().map(|&b| b as f64).collect());
    let (mean, scale, nus) = encode_rows(model, Tensor::row(x.to_vec()), label_row)?;
    let (mean, scale, nu) = (mean.data().to_vec(), scale.data().to_vec(), nus[0]);

    let log_q_zhat = (0..g)
        .map(|i| proposal_logpdf(model, nodes.row_slice(i), &mean, &scale, nu))
        .collect::<Result<Vec<_>>>()?;

    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let nv = tape.input("nodes", nodes.clone());
    let (kmu, ks) = model.kappa_forward(&mut tape, &p, nv)?;
    let loc = model.psi_forward(&mut tape, &p, nv)?;
    let xv = tape.input("x", Tensor::row(x.to_vec()).repeat_rows(g));
    let probs = model.phi_forward(&mut tape, &p, xv, nv)?;
    let (kmu, ks, loc, probs) = (
        tape.value(kmu).clone(),
        tape.value(ks).clone(),
        tape.value(loc).clone(),
        tape.value(probs).clone(),
    );

    let log_lik: Vec<f64> = (0..g)
        .map(|i| {
            probs
                .row_slice(i)
                .iter()
                .zip(yhat)
                .map(|(&q, &b)| if b == 1 { q.ln() } else { (1.0 - q).ln() })
                .sum()
        })
        .collect();
    let log_prior: Vec<f64> = (0..g)
        .map(|j| logpdf_diag_normal(nodes.row_slice(j), &DiagNormalParams::standard(m)))
        .collect::<Result<_>>()?;

    let nu0 = model.cfg.nu0;
    let joint_const = ln_gamma((nu0 + m as f64) / 2.0) - ln_gamma(nu0 / 2.0) - 0.5 * m as f64 * (nu0 * std::f64::consts::PI).ln();
    let dim_const = ln_gamma((nu0 + 1.0) / 2.0) - ln_gamma(nu0 / 2.0) - 0.5 * (nu0 * std::f64::consts::PI).ln();
    let shift_logpdf = |zhat: &[f64], centre: &[f64]| -> f64 {
        match model.cfg.coupling {
            StudentCoupling::Joint => {
                let d2: f64 = zhat.iter().zip(centre).map(|(a, b)| (a - b).powi(2)).sum();
                joint_const - 0.5 * (nu0 + m as f64) * (d2 / nu0).ln_1p()
            }
            StudentCoupling::Independent => zhat
                .iter()
                .zip(centre)
                .map(|(a, b)| dim_const - 0.5 * (nu0 + 1.0) * ((a - b).powi(2) / nu0).ln_1p())
                .sum(),
        }
    };

    let mut log_q_z = Vec::with_capacity(g * g);
    let mut log_joint = Vec::with_capacity(g * g);
    for i in 0..g {
        let (mu_i, s_i) = (kmu.row_slice(i), ks.row_slice(i));
        let log_s: f64 = s_i.iter().map(|s| s.ln()).sum();
        for j in 0..g {
            let z = nodes.row_slice(j);
            let quad: f64 = z.iter().zip(mu_i).zip(s_i).map(|((z, mu), s)| ((z - mu) / s).powi(2)).sum();
            log_q_z.push(-0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln() - log_s - 0.5 * quad);
            log_joint.push(log_prior[j] + shift_logpdf(nodes.row_slice(i), loc.row_slice(j)) + log_lik[i]);
        }
    }
    Ok(Theorem1Tables {
        cell: grid.cell(m),
        entropy: proposal_entropy(model, &scale, nu)?,
        nodes,
        log_q_zhat,
        log_q_z,
        log_joint,
    })
}

/// `log p(z_j | x, ŷ)` on the grid, marginalizing `ẑ` and normalizing over
/// the grid.
pub fn marginal_posterior(t: &Theorem1Tables) -> Vec<f64> {
    let g = t.len();
    let log_h = t.cell.ln();
    let log_z = log_sum_exp(t.log_joint.iter().copied()) + 2.0 * log_h;
    (0..g)
        .map(|j| log_sum_exp((0..g).map(|i| t.log_joint[i * g + j])) + log_h - log_z)
        .collect()
}

/// Computes both sides of the inequality from tabulated densities. The
/// proposal weights are renormalized on the grid after the mass check.
pub fn evaluate_theorem1(t: &Theorem1Tables) -> Result<Theorem1Result> {
    let g = t.len();
    let h = t.cell;
    let wq: Vec<f64> = t.log_q_zhat.iter().map(|l| l.exp() * h).collect();
    let mass: f64 = wq.iter().sum();
    if (mass - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::CoarseGrid { normalization: mass });
    }
    let row_mass: Vec<f64> = (0..g)
        .map(|i| t.log_q_z[i * g..(i + 1) * g].iter().map(|l| l.exp() * h).sum())
        .collect();
    let cond_mass: f64 = wq.iter().zip(&row_mass).map(|(w, r)| w * r).sum::<f64>() / mass;
    if (cond_mass - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::CoarseGrid { normalization: cond_mass });
    }

    let log_z = log_sum_exp(t.log_joint.iter().copied()) + 2.0 * h.ln();
    let post = marginal_posterior(t);
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for i in 0..g {
        let wi = wq[i] / mass;
        if wi == 0.0 || row_mass[i] == 0.0 {
            continue;
        }
        let (mut l_i, mut r_i) = (0.0, 0.0);
        for j in 0..g {
            let lq = t.log_q_z[i * g + j];
            let w = lq.exp() * h / row_mass[i];
            if w == 0.0 {
                continue;
            }
            l_i += w * (lq - post[j]);
            r_i += w * (t.log_q_zhat[i] + lq - t.log_joint[i * g + j] + log_z);
        }
        lhs += wi * l_i;
        rhs += wi * r_i;
    }
    Ok(Theorem1Result {
        lhs,
        rhs,
        entropy: t.entropy,
        mass,
    })
}

pub fn verify_theorem1(model: &LsnpcModel, x: &[f64], yhat: &[u8], grid: &QuadratureGrid) -> Result<Theorem1Result> {
    evaluate_theorem1(&theorem1_tables(model, x, yhat, grid)?)
}

/// Symmetric label distance: the number of differing bits.
pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// An instance with its reference labels `y0` and alternative labels `y1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPair {
    pub x: Vec<f64>,
    pub y0: Vec<u8>,
    pub y1: Vec<u8>,
}

impl LabelPair {
    pub fn delta(&self) -> usize {
        hamming(&self.y0, &self.y1)
    }
}

/// Pairs each chosen row's labels with a copy that has `delta(rng)` distinct
/// bits flipped.
pub fn flip_pairs<R: Rng>(
    x: &Tensor,
    y: &Labels,
    rows: &[usize],
    mut delta: impl FnMut(&mut R) -> usize,
    rng: &mut R,
) -> Result<Vec<LabelPair>> {
    let k = y.k();
    rows.iter()
        .map(|&r| {
            let d = delta(rng);
            if d == 0 || d > k {
                return Err(Error::invalid(format!("cannot flip {d} of {k} labels")));
            }
            let y0 = y.row(r).to_vec();
            let mut y1 = y0.clone();
            for j in sample(rng, k, d) {
                y1[j] ^= 1;
            }
            Ok(LabelPair {
                x: x.row_slice(r).to_vec(),
                y0,
                y1,
            })
        })
        .collect()
}

/// Proposal parameters under `y0` and `y1` for every pair.
struct EncodedPairs {
    mean0: Tensor,
    scale0: Tensor,
    mean1: Tensor,
    scale1: Tensor,
    nu: Vec<f64>,
}

fn encode_pairs(model: &LsnpcModel, pairs: &[LabelPair]) -> Result<EncodedPairs> {
    let n = pairs.len();
    let x: Vec<f64> = pairs.iter().flat_map(|p| p.x.iter().copied()).collect();
    let x = Tensor::matrix(n, model.d, x)?;
    let labels = |f: fn(&LabelPair) -> &Vec<u8>| -> Result<Tensor> {
        Tensor::matrix(n, model.k, pairs.iter().flat_map(|p| f(p).iter().map(|&b| b as f64)).collect())
    };
    let (mean0, scale0, nu) = encode_rows(model, x.clone(), labels(|p| &p.y0)?)?;
    let (mean1, scale1, _) = encode_rows(model, x, labels(|p| &p.y1)?)?;
    Ok(EncodedPairs {
        mean0,
        scale0,
        mean1,
        scale1,
        nu,
    })
}

/// Empirical constants of the variance-ratio, mean-Lipschitz and
/// variance-floor assumptions, together with the derived bound terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConstants {
    /// Largest per-dimension variance ratio over `Δ`, both orderings.
    pub m_ratio: f64,
    /// Largest L1 mean difference over `Δ`.
    pub lipschitz: f64,
    /// Smallest observed variance.
    pub lambda: f64,
    pub nu: f64,
    pub dim: usize,
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
}

impl BoundConstants {
    pub fn new(m_ratio: f64, lipschitz: f64, lambda: f64, dim: usize, nu: f64) -> Result<Self> {
        if !(m_ratio > 0.0 && lipschitz > 0.0 && lambda > 0.0) {
            return Err(Error::invalid(format!(
                "constants must be positive: M={m_ratio}, L={lipschitz}, λ={lambda}"
            )));
        }
        if !(nu > 2.0) {
            return Err(Error::invalid(format!("bound requires ν > 2, got {nu}")));
        }
        let (m, sqrt_m) = (dim as f64, (dim as f64).sqrt());
        let alpha = (nu * lambda).sqrt() / lipschitz;
        let c1 = 0.5 * (nu + m) * (m_ratio * sqrt_m * alpha / (2.0 * (nu - 2.0)) - digamma((nu + m) / 2.0)? + digamma(nu / 2.0)?);
        let c2 = m * m_ratio / (2.0 * std::f64::consts::E) + (nu + m) * sqrt_m / (2.0 * alpha);
        Ok(BoundConstants {
            m_ratio,
            lipschitz,
            lambda,
            nu,
            dim,
            alpha,
            c1,
            c2,
        })
    }

    /// Widens the empirical constants by `factor`: the suprema `M` and `L`
    /// grow, the infimum `λ` shrinks.
    pub fn inflated(&self, factor: f64) -> Result<Self> {
        BoundConstants::new(self.m_ratio * factor, self.lipschitz * factor, self.lambda / factor, self.dim, self.nu)
    }
}

/// Estimates the constants from label pairs. Empirical maxima under-estimate
/// the true suprema; callers inflate them before checking bounds.
pub fn estimate_constants(model: &LsnpcModel, pairs: &[LabelPair]) -> Result<BoundConstants> {
    if pairs.is_empty() {
        return Err(Error::invalid("constant estimation needs at least one label pair"));
    }
    if let Some(p) = pairs.iter().find(|p| p.delta() == 0) {
        return Err(Error::invalid(format!("label pair with Δ = 0 at x = {:?}", &p.x[..p.x.len().min(3)])));
    }
    if pairs.len() < 100 {
        log::warn!("estimating bound constants from only {} label pairs", pairs.len());
    }
    let e = encode_pairs(model, pairs)?;
    let (mut m_ratio, mut lipschitz, mut lambda) = (0.0f64, 0.0f64, f64::INFINITY);
    for (r, p) in pairs.iter().enumerate() {
        let delta = p.delta() as f64;
        let (s0, s1) = (e.scale0.row_slice(r), e.scale1.row_slice(r));
        for (a, b) in s0.iter().zip(s1) {
            let (v0, v1) = (a * a, b * b);
            m_ratio = m_ratio.max((v0 / v1).max(v1 / v0) / delta);
            lambda = lambda.min(v0.min(v1));
        }
        let l1: f64 = e.mean0.row_slice(r).iter().zip(e.mean1.row_slice(r)).map(|(a, b)| (a - b).abs()).sum();
        lipschitz = lipschitz.max(l1 / delta);
    }
    if lipschitz == 0.0 {
        log::warn!("encoder mean does not depend on the labels; using machine epsilon for L");
        lipschitz = f64::EPSILON;
    }
    let nu = match model.cfg.family {
        ProposalFamily::Student => model.cfg.nu,
        // The Normal corollary does not involve ν; any value above 2 keeps
        // the derived Student terms finite.
        ProposalFamily::Normal => model.cfg.nu.max(2.0 + f64::EPSILON.sqrt()),
    };
    BoundConstants::new(m_ratio, lipschitz, lambda, model.m(), nu)
}

/// `C1 + C2·Δ` for shared degrees of freedom `ν > 2` and `Δ ≥ 1`.
pub fn theorem2_bound(m: usize, nu: f64, c: &BoundConstants, delta: f64) -> Result<f64> {
    if !(nu > 2.0) {
        return Err(Error::invalid(format!("bound requires ν > 2, got {nu}")));
    }
    if !(delta >= 1.0) {
        return Err(Error::invalid(format!("bound is stated for Δ ≥ 1, got {delta}")));
    }
    let c = BoundConstants::new(c.m_ratio, c.lipschitz, c.lambda, m, nu)?;
    Ok(c.c1 + c.c2 * delta)
}

/// Monte-Carlo `KL[p ‖ q]` from `n` draws of `p`; returns (estimate, SE).
pub fn mc_student_kl<R: Rng>(
    p: &DiagStudentParams,
    q: &DiagStudentParams,
    coupling: StudentCoupling,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::invalid("Monte-Carlo KL needs at least two samples"));
    }
    let m = p.dim();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let eps = standard_normal_vec(rng, m);
        let chi2 = draw_chi2(rng, p.nu, m, coupling);
        let s = rsample_diag_student(p, &eps, &chi2)?;
        let v = logpdf_diag_student_with(&s, p, coupling)? - logpdf_diag_student_with(&s, q, coupling)?;
        sum += v;
        sum_sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

/// Outcome of one bound comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInstance {
    pub delta: usize,
    pub kl: f64,
    pub kl_se: f64,
    pub bound: f64,
}

impl BoundInstance {
    pub fn margin(&self) -> f64 {
        self.bound - self.kl
    }
}

/// Compares `KL[q(ẑ|x,y1) ‖ q(ẑ|x,y0)]` against `C1 + C2·Δ` on every pair.
/// Needs a Student model in fixed-ν mode with `ν = ν0`.
pub fn theorem2_check<R: Rng>(
    model: &LsnpcModel,
    pairs: &[LabelPair],
    constants: &BoundConstants,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<BoundInstance>> {
    if model.cfg.family != ProposalFamily::Student || model.cfg.nu_mode != NuMode::Fixed {
        return Err(Error::invalid("the Student bound needs a Student proposal with fixed ν"));
    }
    if model.cfg.nu != model.cfg.nu0 {
        return Err(Error::invalid(format!(
            "the Student bound assumes ν = ν0, got {} and {}",
            model.cfg.nu, model.cfg.nu0
        )));
    }
    let e = encode_pairs(model, pairs)?;
    pairs
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let q1 = DiagStudentParams::new(e.mean1.row_slice(r).to_vec(), e.scale1.row_slice(r).to_vec(), e.nu[r])?;
            let q0 = DiagStudentParams::new(e.mean0.row_slice(r).to_vec(), e.scale0.row_slice(r).to_vec(), e.nu[r])?;
            let (kl, kl_se) = mc_student_kl(&q1, &q0, StudentCoupling::Joint, samples, rng)?;
            Ok(BoundInstance {
                delta: p.delta(),
                kl,
                kl_se,
                bound: theorem2_bound(model.m(), e.nu[r], constants, p.delta() as f64)?,
            })
        })
        .collect()
}

/// `(3Mm/2)Δ − m/2 + (mL²/λ)Δ²`.
pub fn gaussian_bound(c: &BoundConstants, delta: f64) -> f64 {
    let m = c.dim as f64;
    1.5 * c.m_ratio * m * delta - 0.5 * m + m * c.lipschitz.powi(2) / c.lambda * delta * delta
}

/// Closed-form Normal KLs against the quadratic bound.
pub fn gaussian_bound_check(model: &LsnpcModel, pairs: &[LabelPair], constants: &BoundConstants) -> Result<Vec<BoundInstance>> {
    if model.cfg.family != ProposalFamily::Normal {
        return Err(Error::invalid("the quadratic bound applies to Normal proposals"));
    }
    let e = encode_pairs(model, pairs)?;
    pairs
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let q1 = DiagNormalParams::new(e.mean1.row_slice(r).to_vec(), e.scale1.row_slice(r).to_vec())?;
            let q0 = DiagNormalParams::new(e.mean0.row_slice(r).to_vec(), e.scale0.row_slice(r).to_vec())?;
            Ok(BoundInstance {
                delta: p.delta(),
                kl: kl_diag_normal(&q1, &q0)?,
                kl_se: 0.0,
                bound: gaussian_bound(constants, p.delta() as f64),
            })
        })
        .collect()
}

/// Least-squares slope of `ln(mean KL)` against `ln Δ`, one point per
/// distinct `Δ`.
pub fn fitted_delta_exponent(instances: &[BoundInstance]) -> Result<f64> {
    let mut deltas: Vec<usize> = instances.iter().map(|i| i.delta).collect();
    deltas.sort_unstable();
    deltas.dedup();
    if deltas.len() < 2 {
        return Err(Error::invalid("fitting an exponent needs at least two distinct Δ"));
    }
    let points: Vec<(f64, f64)> = deltas
        .iter()
        .map(|&d| {
            let kls: Vec<f64> = instances.iter().filter(|i| i.delta == d).map(|i| i.kl).collect();
            ((d as f64).ln(), (kls.iter().sum::<f64>() / kls.len() as f64).ln())
        })
        .collect();
    if points.iter().any(|(_, y)| !y.is_finite()) {
        return Err(Error::invalid("mean KL must be positive at every Δ"));
    }
    let n = points.len() as f64;
    let (mx, my) = (points.iter().map(|p| p.0).sum::<f64>() / n, points.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Two Bernoulli vectors over `k` labels that agree on `k − n_pos` labels at
/// probability `matched` and put `pos_a` against `pos_b` on the rest.
/// Returns the total KL and the KL per disagreeing label.
pub fn amortization_demo(k: usize, matched: f64, pos_a: f64, pos_b: f64, n_pos: usize) -> Result<(f64, f64)> {
    if n_pos > k {
        return Err(Error::invalid(format!("{n_pos} positives exceed {k} labels")));
    }
    let build = |pos: f64| {
        let mut probs = vec![matched; k];
        probs[..n_pos].fill(pos);
        BernoulliVec::new(probs)
    };
    let kl = kl_mv_bernoulli(&build(pos_a)?, &build(pos_b)?)?;
    Ok((kl, if n_pos == 0 { 0.0 } else { kl / n_pos as f64 }))
}

/// One line of the verification report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub instances: usize,
    pub passes: usize,
    /// Smallest slack over the instances; negative means a violation.
    pub worst_margin: f64,
}

impl CheckRow {
    pub fn new(name: impl Into<String>, margins: &[f64], pass: impl Fn(f64) -> bool) -> Self {
        CheckRow {
            name: name.into(),
            instances: margins.len(),
            passes: margins.iter().filter(|&&m| pass(m)).count(),
            worst_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.passes == self.instances
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TheoryReport {
    pub rows: Vec<CheckRow>,
    /// Free-form findings, one per line.
    pub notes: Vec<String>,
}

impl TheoryReport {
    pub fn find(&self, name: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,instances,passes,worst_margin\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.name, r.instances, r.passes, r.worst_margin);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>4}/{:<4}  worst margin {:.6e}",
                r.name, r.passes, r.instances, r.worst_margin
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes_and_cell() {
        let g = QuadratureGrid::new(-1.0, 1.0, 0.5).unwrap();
        assert_eq!(g.points(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        let n = g.nodes(2);
        assert_eq!(n.shape(), &[25, 2]);
        assert_eq!(n.row_slice(1), &[-1.0, -0.5]);
        assert_eq!(g.cell(2), 0.25);
        assert!(QuadratureGrid::new(1.0, -1.0, 0.1).is_err());
        assert!(QuadratureGrid::new(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn bound_is_affine_in_delta_with_slope_c2() {
        let c = BoundConstants::new(1.3, 0.7, 0.05, 16, 4.0).unwrap();
        assert!(c.c2 > 0.0);
        let b: Vec<f64> = (1..=4).map(|d| theorem2_bound(16, 4.0, &c, d as f64).unwrap()).collect();
        for w in b.windows(2) {
            assert!((w[1] - w[0] - c.c2).abs() < 1e-9);
        }
        assert!(theorem2_bound(16, 2.0, &c, 1.0).is_err());
        assert!(theorem2_bound(16, 4.0, &c, 0.0).is_err());
    }

    #[test]
    fn inflation_moves_constants_outward() {
        let c = BoundConstants::new(2.0, 1.0, 0.1, 4, 4.0).unwrap();
        let w = c.inflated(1.5).unwrap();
        assert_eq!((w.m_ratio, w.lipschitz), (3.0, 1.5));
        assert!((w.lambda - 0.1 / 1.5).abs() < 1e-15);
        assert!(w.c2 > c.c2);
    }

    #[test]
    fn amortization_edge_cases() {
        assert_eq!(amortization_demo(20, 0.01, 0.9, 0.5, 0).unwrap(), (0.0, 0.0));
        assert!(amortization_demo(2, 0.01, 0.9, 0.5, 3).is_err());
        let (kl, per) = amortization_demo(20, 0.01, 0.9, 0.5, 2).unwrap();
        assert!((per * 2.0 - kl).abs() < 1e-15);
    }

    #[test]
    fn exponent_of_an_exact_power_law() {
        let inst: Vec<BoundInstance> = (1..=3)
            .map(|d| BoundInstance {
                delta: d,
                kl: 0.3 * (d as f64).powi(2),
                kl_se: 0.0,
                bound: 0.0,
            })
            .collect();
        assert!((fitted_delta_exponent(&inst).unwrap() - 2.0).abs() < 1e-12);
        assert!(fitted_delta_exponent(&inst[..1]).is_err());
    }

    #[test]
    fn report_formats() {
        let report = TheoryReport {
            rows: vec![CheckRow::new("theorem2", &[0.5, -0.1, 2.0], |m| m >= 0.0)],
            notes: vec![],
        };
        assert_eq!(report.to_csv(), "name,instances,passes,worst_margin\ntheorem2,3,2,-0.1\n");
        assert!(!report.rows[0].all_pass());
    }
}
