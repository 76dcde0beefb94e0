//! Frame determinants, maximal frames and the ball-box experiments.
//!
//! `λ_I(x) = det[Y_{i_1}(x), …, Y_{i_n}(x)]` is computed exactly from the
//! cached rational coefficients (`x` is converted to the rational it
//! represents). Candidate frames are index sets `i_1 < … < i_n`: reordering
//! only flips the sign of `λ_I`, so `|Λ|` over ordered tuples is `√(n!)` times
//! the norm over these sets.
//!
//! Volumes use the one-piece `ρ` ball of `metric::RhoBall` (or the `cc`
//! estimator) and Monte Carlo sampling over a bounding box. Sample `i` draws
//! from its own ChaCha stream, so results do not depend on the worker count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx_exp::CommutatorFrame;
use crate::linalg_mp::{min_norm_solve, RANK_TOL};
use crate::metric::{path_cost, DistanceKind, MetricConfig, MetricEstimator, RhoBall};
use crate::perm_words::Word;
use crate::poly::{f64_to_rational, rational_to_f64, Poly};
use crate::vfield::VfError;

/// Above this many index sets, `select_maximal` falls back to greedy pivoting.
pub const MAX_CANDIDATES: usize = 20_000;

/// Largest accepted box radius `ε`.
pub const MAX_BOX_EPS: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BallBoxError {
    #[error(transparent)]
    Vf(#[from] VfError),
    #[error("every frame determinant vanishes at {0:?}: the fields do not span")]
    NotSpanning(Vec<f64>),
    #[error("no sample fell in the ball of radius {0}")]
    EmptyBall(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Exact determinant by fraction-free elimination.
fn det_exact(mut m: Vec<Vec<BigRational>>) -> BigRational {
    let n = m.len();
    let mut sign = BigRational::one();
    let mut prev = BigRational::one();
    for k in 0..n {
        let Some(p) = (k..n).find(|&i| !m[i][k].is_zero()) else {
            return BigRational::zero();
        };
        if p != k {
            m.swap(p, k);
            sign = -sign;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let v = (&m[i][j] * &m[k][k] - &m[i][k] * &m[k][j]) / &prev;
                m[i][j] = v;
            }
        }
        prev = m[k][k].clone();
    }
    sign * &m[n - 1][n - 1]
}

/// Exact values `g_j(x)` of every frame field at a rational point.
pub fn frame_values_exact(frame: &CommutatorFrame, x: &[BigRational]) -> Vec<Vec<BigRational>> {
    (1..=frame.q())
        .map(|j| frame.coeffs(j).eval_rational(x))
        .collect()
}

fn lambda_from_values(vals: &[Vec<BigRational>], idx: &[usize]) -> BigRational {
    let n = idx.len();
    if n == 0 {
        return BigRational::one();
    }
    // rows = coordinates, columns = fields
    let m: Vec<Vec<BigRational>> = (0..n)
        .map(|i| idx.iter().map(|&j| vals[j - 1][i].clone()).collect())
        .collect();
    det_exact(m)
}

/// `λ_I(x)` exactly, at a rational point.
pub fn lambda_exact(
    frame: &CommutatorFrame,
    idx: &[usize],
    x: &[BigRational],
) -> Result<BigRational, BallBoxError> {
    check_index(frame, idx)?;
    Ok(lambda_from_values(&frame_values_exact(frame, x), idx))
}

/// `λ_I(x)`, evaluated exactly at the binary value of `x` and rounded once.
pub fn lambda_i(frame: &CommutatorFrame, idx: &[usize], x: &[f64]) -> Result<f64, BallBoxError> {
    let xr: Vec<BigRational> = x.iter().map(|&v| f64_to_rational(v)).collect();
    Ok(rational_to_f64(&lambda_exact(frame, idx, &xr)?))
}

fn check_index(frame: &CommutatorFrame, idx: &[usize]) -> Result<(), BallBoxError> {
    if idx.len() != frame.n() {
        return Err(BallBoxError::Invalid(format!(
            "frame needs {} indices, got {}",
            frame.n(),
            idx.len()
        )));
    }
    if let Some(&j) = idx.iter().find(|&&j| j == 0 || j > frame.q()) {
        return Err(BallBoxError::Invalid(format!(
            "index {j} outside 1..={}",
            frame.q()
        )));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// All `n`-subsets of `1..=q` in lexicographic order.
pub fn index_sets(q: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if n > q {
        return out;
    }
    let mut cur: Vec<usize> = (1..=n).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..n).rev().find(|&i| cur[i] < q - (n - 1 - i)) else {
            break;
        };
        cur[i] += 1;
        for k in i + 1..n {
            cur[k] = cur[k - 1] + 1;
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaEntry {
    pub frame: Vec<usize>,
    pub degree: usize,
    pub lambda: f64,
    /// `λ_I(x) r^{ℓ(I)}`.
    pub scaled: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaVector {
    pub r: f64,
    /// Nonzero entries, largest `|scaled|` first (ties by enumeration order).
    pub entries: Vec<LambdaEntry>,
    /// `|Λ(x, r)|` over ordered tuples.
    pub norm: f64,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `Λ(x, r)`, optionally truncated to the `top_k` largest entries (the norm
/// always uses every entry).
pub fn lambda_vector(
    frame: &CommutatorFrame,
    x: &[f64],
    r: f64,
    top_k: Option<usize>,
) -> LambdaVector {
    let xr: Vec<BigRational> = x.iter().map(|&v| f64_to_rational(v)).collect();
    let vals = frame_values_exact(frame, &xr);
    let sets = candidate_sets(frame, x, r);
    let mut entries: Vec<LambdaEntry> = sets
        .into_iter()
        .filter_map(|idx| {
            let l = lambda_from_values(&vals, &idx);
            if l.is_zero() {
                return None;
            }
            let lambda = rational_to_f64(&l);
            let degree = frame.degree_sum(&idx);
            Some(LambdaEntry {
                scaled: lambda * r.powi(degree as i32),
                frame: idx,
                degree,
                lambda,
            })
        })
        .collect();
    let norm =
        (factorial(frame.n()) * entries.iter().map(|e| e.scaled * e.scaled).sum::<f64>()).sqrt();
    entries.sort_by(|a, b| b.scaled.abs().total_cmp(&a.scaled.abs()));
    if let Some(k) = top_k {
        entries.truncate(k);
    }
    LambdaVector { r, entries, norm }
}

/// Index sets considered at `(x, r)`: all of them, or the greedy pivoted
/// frame when there are more than `MAX_CANDIDATES`.
fn candidate_sets(frame: &CommutatorFrame, x: &[f64], r: f64) -> Vec<Vec<usize>> {
    if binomial(frame.q(), frame.n()) <= MAX_CANDIDATES {
        index_sets(frame.q(), frame.n())
    } else {
        vec![pivoted_frame(frame, x, r)]
    }
}

/// Greedy column pivoting on the scaled columns `r^{ℓ_j} Y_j(x)`.
pub fn pivoted_frame(frame: &CommutatorFrame, x: &[f64], r: f64) -> Vec<usize> {
    let vals = frame.values_at(x);
    let mut cols: Vec<DVector<f64>> = (0..frame.q())
        .map(|j| vals.column(j).into_owned() * r.powi(frame.degree(j + 1) as i32))
        .collect();
    let mut chosen = Vec::new();
    for _ in 0..frame.n() {
        let (best, _) = cols
            .iter()
            .enumerate()
            .filter(|(j, _)| !chosen.contains(&(j + 1)))
            .map(|(j, c)| (j, c.norm()))
            .fold(
                (usize::MAX, -1.0),
                |acc, (j, v)| if v > acc.1 { (j, v) } else { acc },
            );
        if best == usize::MAX {
            break;
        }
        chosen.push(best + 1);
        let nrm = cols[best].norm();
        if nrm > 0.0 {
            let u = &cols[best] / nrm;
            for c in cols.iter_mut() {
                let d = u.dot(c);
                *c -= &u * d;
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

/// `ν(A) = min_{x∈A} |Λ(x, 1)|` over the sample set.
pub fn nu(frame: &CommutatorFrame, samples: &[Vec<f64>]) -> f64 {
    samples
        .par_iter()
        .map(|x| lambda_vector(frame, x, 1.0, Some(0)).norm)
        .reduce(|| f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, Serialize)]
pub struct MaximalTriple {
    pub frame: Vec<usize>,
    pub words: Vec<String>,
    pub x: Vec<f64>,
    pub r: f64,
    pub eta: f64,
    pub lambda: f64,
    /// `|λ_I(x)| r^{ℓ(I)}`.
    pub score: f64,
    /// `max_J |λ_J(x)| r^{ℓ(J)}`.
    pub max_score: f64,
    /// `score > η · max_score`.
    pub eta_maximal: bool,
}

/// The frame with the largest score; ties go to the earliest index set.
pub fn select_maximal(
    frame: &CommutatorFrame,
    x: &[f64],
    r: f64,
    eta: f64,
) -> Result<MaximalTriple, BallBoxError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(BallBoxError::Invalid(format!(
            "η must lie in (0,1), got {eta}"
        )));
    }
    if x.len() != frame.n() {
        return Err(BallBoxError::Invalid(
            "point has the wrong dimension".into(),
        ));
    }
    let xr: Vec<BigRational> = x.iter().map(|&v| f64_to_rational(v)).collect();
    let vals = frame_values_exact(frame, &xr);
    let rr = f64_to_rational(r);
    let mut best: Option<(Vec<usize>, BigRational, BigRational)> = None;
    for idx in candidate_sets(frame, x, r) {
        let l = lambda_from_values(&vals, &idx);
        if l.is_zero() {
            continue;
        }
        let score = l.abs() * num_traits::pow(rr.clone(), frame.degree_sum(&idx));
        if best.as_ref().map_or(true, |b| score > b.2) {
            best = Some((idx, l, score));
        }
    }
    let (idx, l, score) = best.ok_or_else(|| BallBoxError::NotSpanning(x.to_vec()))?;
    let score = rational_to_f64(&score);
    Ok(MaximalTriple {
        words: idx.iter().map(|&j| frame.word(j).to_string()).collect(),
        frame: idx,
        x: x.to_vec(),
        r,
        eta,
        lambda: rational_to_f64(&l),
        score,
        max_score: score,
        eta_maximal: true,
    })
}

/// Whether a given frame is `η`-maximal at `(x, r)`.
pub fn is_eta_maximal(
    frame: &CommutatorFrame,
    idx: &[usize],
    x: &[f64],
    r: f64,
    eta: f64,
) -> Result<MaximalTriple, BallBoxError> {
    check_index(frame, idx)?;
    let best = select_maximal(frame, x, r, eta)?;
    let lambda = lambda_i(frame, idx, x)?;
    let score = lambda.abs() * r.powi(frame.degree_sum(idx) as i32);
    Ok(MaximalTriple {
        words: idx.iter().map(|&j| frame.word(j).to_string()).collect(),
        frame: idx.to_vec(),
        lambda,
        score,
        eta_maximal: score > eta * best.max_score,
        max_score: best.max_score,
        ..best
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FrameExpansion {
    pub coefficients: Vec<f64>,
    pub residual: f64,
    pub max_abs: f64,
    pub in_span: bool,
}

/// Min-norm `b` with `Σ_j b_j Y_j(x) = v`.
pub fn express_in_frame(frame: &CommutatorFrame, v: &[f64], x: &[f64], tol: f64) -> FrameExpansion {
    let a = frame.values_at(x);
    match min_norm_solve(&a, v, RANK_TOL) {
        Ok(s) => FrameExpansion {
            max_abs: s.x.iter().map(|b| b.abs()).fold(0.0, f64::max),
            in_span: s.residual <= tol,
            residual: s.residual,
            coefficients: s.x,
        },
        Err(_) => FrameExpansion {
            coefficients: vec![f64::NAN; frame.q()],
            residual: f64::INFINITY,
            max_abs: f64::INFINITY,
            in_span: false,
        },
    }
}

/// `max_t ‖b(t)‖_∞` for `ad_{X_z} X_w = Σ_u b^u Y_u` along `t ↦ e^{tX_z}x`.
pub fn bracket_coefficient_bound(
    frame: &CommutatorFrame,
    z: usize,
    w: &Word,
    x: &[f64],
    times: &[f64],
) -> Result<FrameExpansion, BallBoxError> {
    let sys = frame.system();
    let ad = sys.ad_map(sys.field(z), w)?;
    let mut worst: Option<FrameExpansion> = None;
    for &t in times {
        let p = sys.flow(z, t, x)?;
        let e = express_in_frame(frame, &ad.eval(&p), &p, 1e-8);
        if worst
            .as_ref()
            .map_or(true, |b| e.max_abs > b.max_abs || !e.in_span)
        {
            worst = Some(e);
        }
    }
    worst.ok_or_else(|| BallBoxError::Invalid("no sample times".into()))
}

fn sample_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

fn unit_ball_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim)
        .map(|_| -> f64 { StandardNormal.sample(rng) })
        .collect();
    let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let rad = rng.gen::<f64>().powf(1.0 / dim as f64);
    dir.iter().map(|d| d / len * rad).collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub max_iter: usize,
    /// Converged when `‖E(h) − y‖ ≤ tol · r`.
    pub tol: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NewtonResult {
    pub h: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Newton for `E_{I,x,r}(h) = y` from `h = 0`.
pub fn solve_e(
    frame: &CommutatorFrame,
    idx: &[usize],
    x: &[f64],
    r: f64,
    y: &[f64],
    cfg: &NewtonConfig,
) -> NewtonResult {
    let n = idx.len();
    let mut h = vec![0.0; n];
    let dist = |p: &[f64]| {
        p.iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut res = match frame.e_map(idx, x, r, &h) {
        Ok(p) => dist(&p),
        Err(_) => f64::INFINITY,
    };
    let mut it = 0;
    while it < cfg.max_iter && res > cfg.tol * r {
        it += 1;
        let Ok(e) = frame.e_map(idx, x, r, &h) else {
            break;
        };
        let Ok(jac) = frame.jacobian_e(idx, x, r, &h) else {
            break;
        };
        let rhs = DVector::from_iterator(n, (0..n).map(|i| y[i] - e[i]));
        let Some(step) = jac.matrix.clone().lu().solve(&rhs) else {
            break;
        };
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..20 {
            let trial: Vec<f64> = h
                .iter()
                .zip(step.iter())
                .map(|(a, d)| a + alpha * d)
                .collect();
            if let Ok(p) = frame.e_map(idx, x, r, &trial) {
                let tr = dist(&p);
                if tr < res {
                    h = trial;
                    res = tr;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    NewtonResult {
        converged: res <= cfg.tol * r,
        h,
        residual: res,
        iterations: it,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct InclusionConfig {
    pub eps: f64,
    /// Targets satisfy `ρ̂(x, y) < c · ε^s · r`.
    pub c: f64,
    pub samples: usize,
    pub collision_pairs: usize,
    pub seed: u64,
    pub newton: NewtonConfig,
}

impl Default for InclusionConfig {
    fn default() -> Self {
        Self {
            eps: 0.3,
            c: 0.05,
            samples: 200,
            collision_pairs: 200,
            seed: 0,
            newton: NewtonConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InclusionReport {
    pub frame: Vec<usize>,
    pub x: Vec<f64>,
    pub r: f64,
    pub eps: f64,
    /// Radius of the sampled `ρ` ball, `c · ε^s · r` (strictly less).
    pub rho_radius: f64,
    pub samples: usize,
    pub solved: usize,
    pub fraction: f64,
    pub diverged: usize,
    pub max_residual: f64,
    pub max_box_norm: f64,
    /// Largest certified `ρ̂(x, y)` among the targets.
    pub max_rho_hat: f64,
    pub collision_pairs: usize,
    pub collisions: usize,
    /// `min ‖E(h) − E(h')‖ / ‖h − h'‖` over the probe pairs.
    pub min_separation_ratio: f64,
    pub seed: u64,
}

/// Samples targets `y = exp(Σ_j c_j Y_j)(x)` with `Σ_j c_j² ρ₀^{-2ℓ_j} ≤ 1`
/// (so `ρ(x, y) ≤ ρ₀ < c ε^s r` by a one-piece path), solves `E(h) = y` and
/// counts solutions with `‖h‖_I < ε`. Also probes for collisions
/// `E(h) = E(h')` with `h ≠ h'` in `Q_I(ε)`.
pub fn inclusion_check(
    frame: &CommutatorFrame,
    idx: &[usize],
    x: &[f64],
    r: f64,
    cfg: &InclusionConfig,
) -> Result<InclusionReport, BallBoxError> {
    check_index(frame, idx)?;
    if !(cfg.eps > 0.0 && cfg.eps <= MAX_BOX_EPS) {
        return Err(BallBoxError::Invalid(format!(
            "ε = {} outside (0, {MAX_BOX_EPS}]",
            cfg.eps
        )));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(BallBoxError::Invalid(format!("r = {r} outside (0, 1]")));
    }
    let s = frame.system().s() as i32;
    let rho_radius = cfg.c * cfg.eps.powi(s) * r;
    let rho0 = rho_radius * (1.0 - 1e-9);
    let ball = RhoBall::new(frame);
    let q = frame.q();
    let degrees = frame.degrees().to_vec();
    let per: Vec<Option<(bool, f64, f64, f64)>> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, 1, i as u64);
            let b = unit_ball_point(&mut rng, q);
            let c: Vec<f64> = b
                .iter()
                .zip(&degrees)
                .map(|(v, &l)| v * rho0.powi(l as i32))
                .collect();
            let y = ball.exp_point(&c, x, &mut ball.work()).ok()?;
            let rho_hat = path_cost(&c, q, &degrees);
            let sol = solve_e(frame, idx, x, r, &y, &cfg.newton);
            let bn = frame.box_norm(&sol.h, idx);
            Some((sol.converged && bn < cfg.eps, sol.residual, bn, rho_hat))
        })
        .collect();
    let mut rep = InclusionReport {
        frame: idx.to_vec(),
        x: x.to_vec(),
        r,
        eps: cfg.eps,
        rho_radius,
        samples: cfg.samples,
        solved: 0,
        fraction: 0.0,
        diverged: 0,
        max_residual: 0.0,
        max_box_norm: 0.0,
        max_rho_hat: 0.0,
        collision_pairs: cfg.collision_pairs,
        collisions: 0,
        min_separation_ratio: f64::INFINITY,
        seed: cfg.seed,
    };
    for p in &per {
        match p {
            Some((ok, res, bn, rho)) => {
                if *ok {
                    rep.solved += 1;
                } else {
                    rep.diverged += 1;
                }
                rep.max_residual = rep.max_residual.max(*res);
                rep.max_box_norm = rep.max_box_norm.max(*bn);
                rep.max_rho_hat = rep.max_rho_hat.max(*rho);
            }
            None => rep.diverged += 1,
        }
    }
    rep.fraction = if cfg.samples == 0 {
        1.0
    } else {
        rep.solved as f64 / cfg.samples as f64
    };
    let deg_i: Vec<usize> = idx.iter().map(|&j| frame.degree(j)).collect();
    let probes: Vec<Option<(bool, f64)>> = (0..cfg.collision_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, 2, i as u64);
            let mut draw = || -> Vec<f64> {
                deg_i
                    .iter()
                    .map(|&l| {
                        cfg.eps.powi(l as i32) * (2.0 * rng.gen::<f64>() - 1.0) * (1.0 - 1e-12)
                    })
                    .collect()
            };
            let (h1, h2) = (draw(), draw());
            let e1 = frame.e_map(idx, x, r, &h1).ok()?;
            let e2 = frame.e_map(idx, x, r, &h2).ok()?;
            let de = e1
                .iter()
                .zip(&e2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let dh = h1
                .iter()
                .zip(&h2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Some((dh > 0.0 && de <= 1e-10, de / dh))
        })
        .collect();
    for p in probes.into_iter().flatten() {
        rep.collisions += p.0 as usize;
        rep.min_separation_ratio = rep.min_separation_ratio.min(p.1);
    }
    Ok(rep)
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparability {
    pub det0: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub samples: usize,
}

/// `det dE(h) / det dE(0)` over `h` uniform in `{‖h‖_I ≤ bound}`.
pub fn jacobian_comparability(
    frame: &CommutatorFrame,
    idx: &[usize],
    x: &[f64],
    r: f64,
    bound: f64,
    samples: usize,
    seed: u64,
) -> Result<Comparability, BallBoxError> {
    check_index(frame, idx)?;
    let n = idx.len();
    let det0 = frame.jacobian_e(idx, x, r, &vec![0.0; n])?.det;
    let deg: Vec<usize> = idx.iter().map(|&j| frame.degree(j)).collect();
    let ratios: Vec<Result<f64, VfError>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, 3, i as u64);
            let h: Vec<f64> = deg
                .iter()
                .map(|&l| bound.powi(l as i32) * (2.0 * rng.gen::<f64>() - 1.0))
                .collect();
            Ok(frame.jacobian_e(idx, x, r, &h)?.det / det0)
        })
        .collect();
    let mut out = Comparability {
        det0,
        min_ratio: f64::INFINITY,
        max_ratio: f64::NEG_INFINITY,
        samples,
    };
    for v in ratios {
        let v = v?;
        out.min_ratio = out.min_ratio.min(v);
        out.max_ratio = out.max_ratio.max(v);
    }
    Ok(out)
}

/// Ball membership used for volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Rho,
    Cc,
}

/// Monte Carlo volume machinery for balls around one center.
pub struct BallSampler {
    frame: CommutatorFrame,
    ball: RhoBall,
    metric: Option<MetricEstimator>,
    pub membership: Membership,
    pub box_samples: usize,
}

impl BallSampler {
    pub fn new(frame: CommutatorFrame, membership: Membership) -> Self {
        let ball = RhoBall::new(&frame);
        let metric = (membership == Membership::Cc)
            .then(|| MetricEstimator::new(frame.clone(), MetricConfig::default()));
        Self {
            frame,
            ball,
            metric,
            membership,
            box_samples: 2000,
        }
    }

    /// Distance settings for `cc` membership.
    pub fn with_metric_config(mut self, config: MetricConfig) -> Self {
        if let Some(m) = self.metric.as_mut() {
            m.config = config;
        }
        self
    }

    pub fn frame(&self) -> &CommutatorFrame {
        &self.frame
    }

    /// Bounding box of `B(x, radius)`. The `cc` ball lies inside the `ρ` ball
    /// of the same radius only up to the one-piece restriction, so the `cc`
    /// box is taken from the `ρ` ball of twice the radius.
    pub fn bounding_box(
        &self,
        x: &[f64],
        radius: f64,
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>), BallBoxError> {
        let rad = match self.membership {
            Membership::Rho => radius,
            Membership::Cc => 2.0 * radius,
        };
        self.ball
            .bounding_box(x, rad, self.box_samples, seed)
            .map_err(|e| BallBoxError::Vf(e.into()))
    }

    fn contains(
        &self,
        x: &[f64],
        y: &[f64],
        radius: f64,
        w: &mut crate::metric::EngineWork,
    ) -> bool {
        match &self.metric {
            None => self.ball.contains(x, y, radius, w),
            Some(m) => m.cc_distance(x, y).value < radius,
        }
    }

    /// `(hits, box volume)` for `n` uniform samples in the bounding box.
    pub fn count(
        &self,
        x: &[f64],
        radius: f64,
        n: usize,
        seed: u64,
        tag: u64,
    ) -> Result<(usize, f64, (Vec<f64>, Vec<f64>)), BallBoxError> {
        let (lo, hi) = self.bounding_box(x, radius, seed)?;
        let vol: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
        let hits = self
            .sample_points(&lo, &hi, n, seed, tag, |y, w| {
                self.contains(x, y, radius, w) as usize
            })
            .into_iter()
            .sum();
        Ok((hits, vol, (lo, hi)))
    }

    /// Applies `f` to `n` uniform points of the box, in sample order.
    fn sample_points<T: Send>(
        &self,
        lo: &[f64],
        hi: &[f64],
        n: usize,
        seed: u64,
        tag: u64,
        f: impl Fn(&[f64], &mut crate::metric::EngineWork) -> T + Sync,
    ) -> Vec<T> {
        const CHUNK: usize = 4096;
        let chunks: Vec<Vec<T>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut w = self.ball.work();
                let mut y = vec![0.0; lo.len()];
                (c * CHUNK..((c + 1) * CHUNK).min(n))
                    .map(|i| {
                        let mut rng = sample_rng(seed, tag, i as u64);
                        for k in 0..lo.len() {
                            y[k] = lo[k] + (hi[k] - lo[k]) * rng.gen::<f64>();
                        }
                        f(&y, &mut w)
                    })
                    .collect()
            })
            .collect();
        chunks.into_iter().flatten().collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DoublingReport {
    pub x: Vec<f64>,
    pub r: f64,
    pub membership: Membership,
    pub samples: usize,
    pub hits_r: usize,
    pub hits_2r: usize,
    pub volume_r: f64,
    pub volume_2r: f64,
    pub ratio: f64,
    /// 95% interval from the binomial variance of the log-ratio.
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

/// `|B(x, 2r)| / |B(x, r)|` with `n` samples per ball.
pub fn doubling_ratio(
    sampler: &BallSampler,
    x: &[f64],
    r: f64,
    n: usize,
    seed: u64,
) -> Result<DoublingReport, BallBoxError> {
    let (h1, v1, _) = sampler.count(x, r, n, seed, 10)?;
    let (h2, v2, _) = sampler.count(x, 2.0 * r, n, seed, 11)?;
    if h1 == 0 {
        return Err(BallBoxError::EmptyBall(r));
    }
    if h2 == 0 {
        return Err(BallBoxError::EmptyBall(2.0 * r));
    }
    let (p1, p2) = (h1 as f64 / n as f64, h2 as f64 / n as f64);
    let (vol1, vol2) = (v1 * p1, v2 * p2);
    let ratio = vol2 / vol1;
    let sd = ((1.0 - p1) / (n as f64 * p1) + (1.0 - p2) / (n as f64 * p2)).sqrt();
    Ok(DoublingReport {
        x: x.to_vec(),
        r,
        membership: sampler.membership,
        samples: n,
        hits_r: h1,
        hits_2r: h2,
        volume_r: vol1,
        volume_2r: vol2,
        ratio,
        ci_low: ratio * (-1.96 * sd).exp(),
        ci_high: ratio * (1.96 * sd).exp(),
        seed,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PoincareReport {
    pub function: String,
    /// `∫_{B(x,r)} |f − f_B|`.
    pub lhs: f64,
    /// `Σ_j ∫_{B(x,Cr)} |r X_j f|`.
    pub rhs: f64,
    pub ratio: f64,
    pub inner_hits: usize,
    pub outer_hits: usize,
    pub mean: f64,
}

/// Both sides of the Poincaré inequality from one sample stream over the box
/// of `B(x, C r)`; `B(x, r)` is contained in it.
pub fn poincare_check(
    sampler: &BallSampler,
    f: &Poly,
    x: &[f64],
    r: f64,
    c_enlarge: f64,
    n: usize,
    seed: u64,
) -> Result<PoincareReport, BallBoxError> {
    if !(c_enlarge >= 1.0) {
        return Err(BallBoxError::Invalid(format!(
            "enlargement {c_enlarge} < 1"
        )));
    }
    let sys = sampler.frame().system();
    let grads: Vec<Poly> = (1..=sys.m())
        .map(|j| sys.horizontal_derivative(j, f))
        .collect();
    let big = c_enlarge * r;
    let (lo, hi) = sampler.bounding_box(x, big, seed)?;
    let vol: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
    let pts = sampler.sample_points(&lo, &hi, n, seed, 20, |y, w| {
        if !sampler.contains(x, y, big, w) {
            return None;
        }
        let inner = sampler.contains(x, y, r, w);
        let g: f64 = grads.iter().map(|g| (r * g.eval(y)).abs()).sum();
        Some((inner, f.eval(y), g))
    });
    let outer: Vec<(bool, f64, f64)> = pts.into_iter().flatten().collect();
    let inner: Vec<f64> = outer.iter().filter(|p| p.0).map(|p| p.1).collect();
    if inner.is_empty() {
        return Err(BallBoxError::EmptyBall(r));
    }
    let mean = inner.iter().sum::<f64>() / inner.len() as f64;
    let cell = vol / n as f64;
    let lhs = cell * inner.iter().map(|v| (v - mean).abs()).sum::<f64>();
    let rhs = cell * outer.iter().map(|p| p.2).sum::<f64>();
    Ok(PoincareReport {
        function: f.to_string(),
        lhs,
        rhs,
        ratio: if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        },
        inner_hits: inner.len(),
        outer_hits: outer.len(),
        mean,
    })
}

/// The fixed test functions of the Poincaré suite, in `n = 3` variables.
pub fn poincare_suite_functions() -> Vec<Poly> {
    let v = |k| Poly::var(3, k);
    let (x, y, z) = (v(0), v(1), v(2));
    vec![
        x.clone(),
        y.clone(),
        z.clone(),
        &x * &x,
        &x * &y,
        &z + &(&x * &x),
        &x * &z,
        &(&y * &y) * &y,
        &z * &z,
        &(&x + &y) + &z,
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct PoincareSuite {
    pub reports: Vec<PoincareReport>,
    /// Largest ratio: the empirical constant.
    pub max_ratio: f64,
}

pub fn poincare_suite(
    sampler: &BallSampler,
    functions: &[Poly],
    x: &[f64],
    r: f64,
    c_enlarge: f64,
    n: usize,
    seed: u64,
) -> Result<PoincareSuite, BallBoxError> {
    let reports = functions
        .iter()
        .map(|f| poincare_check(sampler, f, x, r, c_enlarge, n, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let max_ratio = reports.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(PoincareSuite { reports, max_ratio })
}

/// Convenience: a frame for a built-in model.
pub fn builtin_frame(name: &str) -> Result<CommutatorFrame, BallBoxError> {
    Ok(CommutatorFrame::new(Arc::new(
        crate::vfield::VectorFieldSystem::builtin(name)?,
    )))
}

/// Samples a membership-tested volume as a plain number (used by the CLI).
pub fn ball_volume(
    sampler: &BallSampler,
    x: &[f64],
    radius: f64,
    n: usize,
    seed: u64,
) -> Result<f64, BallBoxError> {
    let (h, v, _) = sampler.count(x, radius, n, seed, 12)?;
    Ok(v * h as f64 / n as f64)
}

/// Distance kind used by a membership mode.
pub fn membership_kind(m: Membership) -> DistanceKind {
    match m {
        Membership::Rho => DistanceKind::Rho,
        Membership::Cc => DistanceKind::Cc,
    }
}

/// Dense copy of the `n × q` frame matrix at `x` (for reports).
pub fn frame_matrix(frame: &CommutatorFrame, x: &[f64]) -> DMatrix<f64> {
    frame.values_at(x)
}
