//! Upper-bound estimators for the distances `d` (single-field flows),
//! `d_cc` (horizontal controls) and `ρ` (weighted commutator controls).
//!
//! A path is `K` pieces; piece `k` flows `Σ_j a_kj F_j` for unit time, where
//! `F` is the generator list (`fl`, `cc`) or the commutator frame (`ρ`). With
//! free reparametrization, the smallest admissible `r` for a fixed path solves
//! `Σ_k (Σ_j a_kj² r^{-2ℓ_j})^{1/2} = 1`; for `ℓ ≡ 1` this is the length
//! `Σ_k |a_k|`. `fl` paths are one-hot with a fixed letter pattern.
//!
//! The endpoint constraint is enforced by weighted minimum-norm Gauss–Newton
//! steps (iteratively reweighted towards the true cost) from several starts.
//! `cc` is warm-started from the `fl` path and `ρ` from the `cc` path, so the
//! ordering `ρ̂ ≤ d̂_cc ≤ d̂` holds by construction. Each estimate is the better
//! of the forward search and the reversed backward search, which makes it
//! symmetric.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx_exp::CommutatorFrame;
use crate::linalg_mp::{min_norm_solve, RANK_TOL};
use crate::poly::{BasisScratch, FieldBasis};
use crate::vfield::ode::{self, OdeConfig, OdeError, OdeWork};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Fl,
    Cc,
    Rho,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 3] = [DistanceKind::Fl, DistanceKind::Cc, DistanceKind::Rho];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::Fl => "fl",
            DistanceKind::Cc => "cc",
            DistanceKind::Rho => "rho",
        }
    }
}

impl FromStr for DistanceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fl" => Ok(DistanceKind::Fl),
            "cc" => Ok(DistanceKind::Cc),
            "rho" => Ok(DistanceKind::Rho),
            _ => Err(format!("unknown distance kind `{s}` (fl, cc, rho)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MetricConfig {
    /// Pieces per path (`μ` for `fl`).
    pub segments: usize,
    /// Random starts per letter pattern / kind.
    pub starts: usize,
    pub max_iter: usize,
    /// Endpoint residual accepted as reaching the target.
    pub feas_tol: f64,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            segments: 8,
            starts: 2,
            max_iter: 60,
            feas_tol: 1e-9,
            seed: 0,
        }
    }
}

/// Piecewise-constant control path from its start point.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ControlPath {
    pub kind: DistanceKind,
    /// Number of fields per piece (`m`, or `q` for `ρ`).
    pub dim: usize,
    /// Piece `k` occupies `coeffs[k*dim..(k+1)*dim]`.
    pub coeffs: Vec<f64>,
    /// Field (1-based) of each piece for `fl` paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub letters: Option<Vec<usize>>,
    pub r: f64,
}

impl ControlPath {
    pub fn segments(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.coeffs.len() / self.dim
        }
    }

    pub fn piece(&self, k: usize) -> &[f64] {
        &self.coeffs[k * self.dim..(k + 1) * self.dim]
    }

    /// The same curve run backwards.
    pub fn reversed(&self) -> Self {
        let k = self.segments();
        let mut coeffs = Vec::with_capacity(self.coeffs.len());
        for i in (0..k).rev() {
            coeffs.extend(self.piece(i).iter().map(|v| -v));
        }
        Self {
            kind: self.kind,
            dim: self.dim,
            coeffs,
            letters: self
                .letters
                .as_ref()
                .map(|l| l.iter().rev().copied().collect()),
            r: self.r,
        }
    }

    /// Pads with identity pieces up to `k` pieces.
    pub fn padded(&self, k: usize) -> Self {
        let mut out = self.clone();
        let extra = k.saturating_sub(self.segments());
        out.coeffs
            .extend(std::iter::repeat(0.0).take(extra * self.dim));
        if let Some(l) = out.letters.as_mut() {
            let m = self.dim;
            for i in 0..extra {
                l.push((self.segments() + i) % m + 1);
            }
        }
        out
    }

    /// Concatenation: `self` first, then `other`.
    pub fn concat(&self, other: &ControlPath) -> Self {
        let mut out = self.clone();
        out.coeffs.extend_from_slice(&other.coeffs);
        out.letters = match (&self.letters, &other.letters) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        out.r = self.r + other.r;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceStatus {
    /// `x = y`.
    Zero,
    Feasible,
    /// No path reached the target within the budget; the value is `+∞`.
    BudgetExhausted,
}

#[derive(Clone, Debug, Serialize)]
pub struct DistanceEstimate {
    pub kind: DistanceKind,
    pub value: f64,
    pub status: DistanceStatus,
    pub path: Option<ControlPath>,
    pub residual: f64,
    /// Best feasible `r` after each start, in search order.
    pub trace: Vec<f64>,
}

impl DistanceEstimate {
    fn zero(kind: DistanceKind) -> Self {
        Self {
            kind,
            value: 0.0,
            status: DistanceStatus::Zero,
            path: None,
            residual: 0.0,
            trace: Vec::new(),
        }
    }
}

/// Smallest `r` with `Σ_k (Σ_j a_kj² r^{-2ℓ_j})^{1/2} ≤ 1`.
pub fn path_cost(coeffs: &[f64], dim: usize, degrees: &[usize]) -> f64 {
    let pieces: Vec<&[f64]> = coeffs.chunks(dim).collect();
    let r1: f64 = pieces
        .iter()
        .map(|a| a.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    if r1 == 0.0 || degrees.iter().all(|&l| l == 1) {
        return r1;
    }
    let f = |r: f64| -> f64 {
        pieces
            .iter()
            .map(|a| {
                a.iter()
                    .zip(degrees)
                    .map(|(v, &l)| v * v * r.powi(-2 * l as i32))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum()
    };
    let (mut lo, mut hi) = (r1.min(1.0).ln(), r1.max(1.0).ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid.exp()) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    hi.exp()
}

/// Integrates pieces over a fixed field list.
#[derive(Clone, Debug)]
pub struct PathEngine {
    basis: FieldBasis,
    degrees: Vec<usize>,
    n: usize,
    ode: OdeConfig,
}

/// Reusable buffers for `PathEngine`.
pub struct EngineWork {
    scratch: BasisScratch,
    ode: OdeWork,
    jac: Vec<f64>,
    vals: Vec<f64>,
    state: Vec<f64>,
}

impl PathEngine {
    pub fn new(basis: FieldBasis, degrees: Vec<usize>, ode: OdeConfig) -> Self {
        let n = basis.dim();
        Self {
            basis,
            degrees,
            n,
            ode,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn work(&self) -> EngineWork {
        let n = self.n;
        EngineWork {
            scratch: self.basis.scratch(),
            ode: OdeWork::default(),
            jac: vec![0.0; n * n],
            vals: vec![0.0; n * self.dim()],
            state: Vec::new(),
        }
    }

    /// Endpoint of the path from `x`.
    pub fn endpoint(
        &self,
        coeffs: &[f64],
        x: &[f64],
        w: &mut EngineWork,
    ) -> Result<Vec<f64>, OdeError> {
        let mut y = x.to_vec();
        let basis = &self.basis;
        for a in coeffs.chunks(self.dim()) {
            if a.iter().all(|v| *v == 0.0) {
                continue;
            }
            let EngineWork {
                scratch, ode: ow, ..
            } = w;
            ode::integrate(
                |p, d| basis.eval_combination(a, p, scratch, d, None),
                &mut y,
                1.0,
                self.n,
                &self.ode,
                ow,
            )?;
        }
        Ok(y)
    }

    /// Endpoint and its Jacobian (`n × K·dim`) with respect to all coefficients.
    pub fn endpoint_jac(
        &self,
        coeffs: &[f64],
        x: &[f64],
        w: &mut EngineWork,
    ) -> Result<(Vec<f64>, DMatrix<f64>), OdeError> {
        let n = self.n;
        let p = self.dim();
        let k = coeffs.len() / p;
        let mut y = x.to_vec();
        let mut ss = Vec::with_capacity(k);
        let mut ms = Vec::with_capacity(k);
        let basis = &self.basis;
        for a in coeffs.chunks(p) {
            let EngineWork {
                scratch,
                ode: ow,
                jac,
                vals,
                state,
            } = w;
            state.clear();
            state.extend_from_slice(&y);
            state.resize(n + n * p + n * n, 0.0);
            for c in 0..n {
                state[n + n * p + c * n + c] = 1.0;
            }
            ode::integrate(
                |st, d| {
                    let (g, rest) = st.split_at(n);
                    let (s, m) = rest.split_at(n * p);
                    let (dg, drest) = d.split_at_mut(n);
                    let (ds, dm) = drest.split_at_mut(n * p);
                    basis.eval_combination(a, g, scratch, dg, Some(jac));
                    basis.eval_all(g, scratch, vals);
                    for j in 0..p {
                        for i in 0..n {
                            let mut acc = vals[j * n + i];
                            for l in 0..n {
                                acc += jac[i * n + l] * s[j * n + l];
                            }
                            ds[j * n + i] = acc;
                        }
                    }
                    for c in 0..n {
                        for i in 0..n {
                            let mut acc = 0.0;
                            for l in 0..n {
                                acc += jac[i * n + l] * m[c * n + l];
                            }
                            dm[c * n + i] = acc;
                        }
                    }
                },
                state,
                1.0,
                n,
                &self.ode,
                ow,
            )?;
            y.copy_from_slice(&state[..n]);
            ss.push(DMatrix::from_column_slice(n, p, &state[n..n + n * p]));
            ms.push(DMatrix::from_column_slice(n, n, &state[n + n * p..]));
        }
        let mut jac = DMatrix::zeros(n, k * p);
        let mut prod = DMatrix::<f64>::identity(n, n);
        for i in (0..k).rev() {
            let block = &prod * &ss[i];
            jac.columns_mut(i * p, p).copy_from(&block);
            prod = &prod * &ms[i];
        }
        Ok((y, jac))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Path parametrization: free coefficients or one-hot pieces.
#[derive(Clone)]
enum Layout {
    Free,
    Letters(Vec<usize>),
}

impl Layout {
    fn expand(&self, theta: &[f64], p: usize) -> Vec<f64> {
        match self {
            Layout::Free => theta.to_vec(),
            Layout::Letters(l) => {
                let mut out = vec![0.0; l.len() * p];
                for (k, (&j, &t)) in l.iter().zip(theta).enumerate() {
                    out[k * p + j - 1] = t;
                }
                out
            }
        }
    }

    fn restrict_jac(&self, jac: DMatrix<f64>, p: usize) -> DMatrix<f64> {
        match self {
            Layout::Free => jac,
            Layout::Letters(l) => {
                DMatrix::from_fn(jac.nrows(), l.len(), |i, k| jac[(i, k * p + l[k] - 1)])
            }
        }
    }
}

struct Search<'a> {
    engine: &'a PathEngine,
    x: &'a [f64],
    y: &'a [f64],
    layout: Layout,
    cfg: &'a MetricConfig,
    kind: DistanceKind,
}

struct Found {
    coeffs: Vec<f64>,
    r: f64,
    residual: f64,
}

impl Search<'_> {
    fn eval(&self, theta: &[f64], w: &mut EngineWork) -> (f64, f64) {
        let p = self.engine.dim();
        let coeffs = self.layout.expand(theta, p);
        match self.engine.endpoint(&coeffs, self.x, w) {
            Ok(e) => (
                dist(&e, self.y),
                path_cost(&coeffs, p, self.engine.degrees()),
            ),
            Err(_) => (f64::INFINITY, f64::INFINITY),
        }
    }

    fn weights(&self, theta: &[f64], r_est: f64) -> Vec<f64> {
        let p = self.engine.dim();
        match (&self.layout, self.kind) {
            (Layout::Letters(_), _) => {
                let mean = theta.iter().map(|t| t.abs()).sum::<f64>() / theta.len().max(1) as f64;
                let eps = 1e-2 * mean + 1e-300;
                theta.iter().map(|t| 1.0 / (t.abs() + eps)).collect()
            }
            (Layout::Free, DistanceKind::Rho) => {
                let r = r_est.max(1e-300);
                (0..theta.len())
                    .map(|i| r.powi(-2 * self.engine.degrees()[i % p] as i32))
                    .collect()
            }
            _ => vec![1.0; theta.len()],
        }
    }

    /// A few min-norm Newton corrections back onto the constraint set.
    fn restore(
        &self,
        mut theta: Vec<f64>,
        mut res: f64,
        scale: &[f64],
        w: &mut EngineWork,
    ) -> (Vec<f64>, f64, f64) {
        let p = self.engine.dim();
        let mut cost = f64::INFINITY;
        for _ in 0..4 {
            let Ok((end, jac)) =
                self.engine
                    .endpoint_jac(&self.layout.expand(&theta, p), self.x, w)
            else {
                break;
            };
            let mut a = self.layout.restrict_jac(jac, p);
            for (c, s) in scale.iter().enumerate() {
                a.column_mut(c).scale_mut(*s);
            }
            let rhs: Vec<f64> = (0..end.len()).map(|i| self.y[i] - end[i]).collect();
            let Ok(sol) = min_norm_solve(&a, &rhs, RANK_TOL) else {
                break;
            };
            let next: Vec<f64> = theta
                .iter()
                .zip(&sol.x)
                .zip(scale)
                .map(|((t, d), s)| t + d * s)
                .collect();
            let (nr, nc) = self.eval(&next, w);
            if !(nr < res) {
                break;
            }
            (theta, res, cost) = (next, nr, nc);
            if res <= self.cfg.feas_tol {
                break;
            }
        }
        if !cost.is_finite() {
            cost = self.eval(&theta, w).1;
        }
        (theta, res, cost)
    }

    /// Weighted min-norm Gauss–Newton from `theta`; best feasible point found.
    fn run(&self, mut theta: Vec<f64>, r_guess: f64, w: &mut EngineWork) -> Option<Found> {
        let p = self.engine.dim();
        let tol = self.cfg.feas_tol;
        let (mut res, mut cost) = self.eval(&theta, w);
        let mut best: Option<Found> = None;
        let keep = |theta: &[f64], res: f64, cost: f64, best: &mut Option<Found>| {
            if res <= tol && best.as_ref().map_or(true, |b| cost < b.r) {
                *best = Some(Found {
                    coeffs: self.layout.expand(theta, p),
                    r: cost,
                    residual: res,
                });
            }
        };
        keep(&theta, res, cost, &mut best);
        for _ in 0..self.cfg.max_iter {
            let coeffs = self.layout.expand(&theta, p);
            let Ok((end, jac)) = self.engine.endpoint_jac(&coeffs, self.x, w) else {
                break;
            };
            let jac = self.layout.restrict_jac(jac, p);
            let r_est = if cost.is_finite() && cost > 0.0 {
                cost
            } else {
                r_guess
            };
            let wts = self.weights(&theta, r_est);
            let scale: Vec<f64> = wts.iter().map(|v| 1.0 / v.sqrt()).collect();
            let mut a = jac.clone();
            for (c, s) in scale.iter().enumerate() {
                a.column_mut(c).scale_mut(*s);
            }
            let jt = &jac * nalgebra::DVector::from_column_slice(&theta);
            let rhs: Vec<f64> = (0..end.len()).map(|i| self.y[i] - end[i] + jt[i]).collect();
            let Ok(sol) = min_norm_solve(&a, &rhs, RANK_TOL) else {
                break;
            };
            let target: Vec<f64> = sol.x.iter().zip(&scale).map(|(z, s)| z * s).collect();
            let mut accepted = false;
            if res > tol {
                // reach the target first: plain Newton corrections converge fastest
                let (t2, r2, c2) = self.restore(theta.clone(), res, &scale, w);
                if r2 < 0.5 * res {
                    (theta, res, cost) = (t2, r2, c2);
                    keep(&theta, res, cost, &mut best);
                    continue;
                }
            }
            let mut alpha = 1.0;
            for _ in 0..12 {
                let trial: Vec<f64> = theta
                    .iter()
                    .zip(&target)
                    .map(|(t, g)| t + alpha * (g - t))
                    .collect();
                let (mut trial, (mut tr, mut tc)) = (trial.clone(), self.eval(&trial, w));
                if res <= tol && tr > tol && tr.is_finite() {
                    (trial, tr, tc) = self.restore(trial, tr, &scale, w);
                }
                let ok = if res > tol {
                    tr < (1.0 - 1e-4 * alpha) * res
                } else {
                    tr <= tol && tc < cost * (1.0 - 1e-12)
                };
                if ok {
                    theta = trial;
                    res = tr;
                    cost = tc;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted && res > tol {
                // the min-norm jump overshoots: fall back to plain Newton corrections
                let (t2, r2, c2) = self.restore(theta.clone(), res, &scale, w);
                if r2 < res {
                    (theta, res, cost) = (t2, r2, c2);
                    accepted = true;
                }
            }
            keep(&theta, res, cost, &mut best);
            if !accepted {
                break;
            }
        }
        best
    }
}

/// Piece budgets grow by doubling up to this factor when a search finds no
/// feasible path.
pub const MAX_SEGMENT_GROWTH: usize = 4;

/// Distance estimators for one system.
#[derive(Clone, Debug)]
pub struct MetricEstimator {
    frame: CommutatorFrame,
    gens: PathEngine,
    full: PathEngine,
    pub config: MetricConfig,
}

impl MetricEstimator {
    pub fn new(frame: CommutatorFrame, config: MetricConfig) -> Self {
        let sys = frame.system();
        let ode = sys.ode;
        let m = sys.m();
        let gens = PathEngine::new(sys.generators().clone(), vec![1; m], ode);
        let full = PathEngine::new(frame.basis().clone(), frame.degrees().to_vec(), ode);
        Self {
            frame,
            gens,
            full,
            config,
        }
    }

    pub fn frame(&self) -> &CommutatorFrame {
        &self.frame
    }

    pub fn engine(&self, kind: DistanceKind) -> &PathEngine {
        match kind {
            DistanceKind::Rho => &self.full,
            _ => &self.gens,
        }
    }

    fn step(&self) -> usize {
        self.frame.system().s().max(1)
    }

    /// Initial size guess `max(|y−x|, |y−x|^{1/s})`.
    fn r_guess(&self, x: &[f64], y: &[f64]) -> f64 {
        let e = dist(x, y);
        e.max(e.powf(1.0 / self.step() as f64))
    }

    /// Horizontal steps realizing the first-order move to `y`: the frame
    /// expansion of `y − x` at `x`, with every bracket component replaced by
    /// its commutator of flows.
    fn bracket_seed(&self, x: &[f64], y: &[f64]) -> Vec<(usize, f64)> {
        let f = &self.frame;
        let d: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
        let Ok(sol) = min_norm_solve(&f.values_at(x), &d, RANK_TOL) else {
            return Vec::new();
        };
        let mut steps = Vec::new();
        for (j, &c) in sol.x.iter().enumerate() {
            let w = f.word(j + 1);
            if c == 0.0 || !c.is_finite() {
                continue;
            }
            if w.len() == 1 {
                steps.push((w.letters()[0] as usize, c));
            } else {
                steps.extend(CommutatorFrame::exp_ap_steps(c, w));
            }
        }
        // adjacent flows of one field compose
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(steps.len());
        for (j, t) in steps {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += t,
                _ => merged.push((j, t)),
            }
        }
        merged.retain(|s| s.1 != 0.0);
        merged
    }

    /// Places seed steps on the pieces of a layout, or `None` if they do not fit.
    fn place_seed(
        steps: &[(usize, f64)],
        layout: &Layout,
        segments: usize,
        p: usize,
    ) -> Option<Vec<f64>> {
        if steps.is_empty() {
            return None;
        }
        match layout {
            Layout::Free => {
                if steps.len() > segments {
                    return None;
                }
                let mut c = vec![0.0; segments * p];
                for (k, &(j, t)) in steps.iter().enumerate() {
                    c[k * p + j - 1] = t;
                }
                Some(c)
            }
            Layout::Letters(letters) => {
                let mut theta = vec![0.0; letters.len()];
                let mut slot = 0;
                for &(j, t) in steps {
                    while slot < letters.len() && letters[slot] != j {
                        slot += 1;
                    }
                    if slot == letters.len() {
                        return None;
                    }
                    theta[slot] = t;
                    slot += 1;
                }
                Some(theta)
            }
        }
    }

    fn rng(&self, kind: DistanceKind, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream * 4 + kind as u64);
        rng
    }

    /// One-directional search from `x` to `y`.
    fn search(
        &self,
        kind: DistanceKind,
        x: &[f64],
        y: &[f64],
        segments: usize,
        warm: &[ControlPath],
        stream: u64,
    ) -> (Option<Found>, Vec<f64>) {
        let engine = self.engine(kind);
        let p = engine.dim();
        let mut w = engine.work();
        let r0 = self.r_guess(x, y);
        let mut best: Option<Found> = None;
        let mut trace = Vec::new();
        let consider = |f: Option<Found>, best: &mut Option<Found>, trace: &mut Vec<f64>| {
            if let Some(f) = f {
                if best.as_ref().map_or(true, |b| f.r < b.r) {
                    *best = Some(f);
                }
            }
            trace.push(best.as_ref().map_or(f64::INFINITY, |b| b.r));
        };
        let mut rng = self.rng(kind, stream);
        let noise = r0 / (segments as f64).sqrt();
        // straight-line guess: the linearization at x split over the pieces
        let lin = {
            let mut s = engine.basis.scratch();
            let mut vals = vec![0.0; x.len() * p];
            engine.basis.eval_all(x, &mut s, &mut vals);
            let a = DMatrix::from_column_slice(x.len(), p, &vals);
            let d: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
            min_norm_solve(&a, &d, RANK_TOL)
                .map(|s| s.x)
                .unwrap_or_else(|_| vec![0.0; p])
        };
        let seed = if kind == DistanceKind::Rho {
            Vec::new()
        } else {
            self.bracket_seed(x, y)
        };
        if kind == DistanceKind::Fl {
            let m = p;
            // warm paths keep their own letter sequence
            for wp in warm
                .iter()
                .filter(|wp| wp.kind == kind && wp.segments() <= segments)
            {
                let wp = wp.padded(segments);
                let Some(letters) = wp.letters.clone() else {
                    continue;
                };
                let theta: Vec<f64> = letters
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| wp.piece(k)[l - 1])
                    .collect();
                let search = Search {
                    engine,
                    x,
                    y,
                    layout: Layout::Letters(letters),
                    cfg: &self.config,
                    kind,
                };
                let (res, cost) = search.eval(&theta, &mut w);
                if res <= self.config.feas_tol {
                    let coeffs = search.layout.expand(&theta, p);
                    consider(
                        Some(Found {
                            coeffs,
                            r: cost,
                            residual: res,
                        }),
                        &mut best,
                        &mut trace,
                    );
                }
                consider(search.run(theta, r0, &mut w), &mut best, &mut trace);
            }
            let patterns: Vec<Vec<usize>> = (0..m.min(2))
                .map(|off| (0..segments).map(|k| (k + off) % m + 1).collect())
                .collect();
            for letters in patterns {
                let layout = Layout::Letters(letters.clone());
                let search = Search {
                    engine,
                    x,
                    y,
                    layout,
                    cfg: &self.config,
                    kind,
                };
                // the linear guess: each letter carries its share of the displacement
                let counts: Vec<usize> = (1..=m)
                    .map(|j| letters.iter().filter(|&&l| l == j).count())
                    .collect();
                let theta0: Vec<f64> = letters
                    .iter()
                    .map(|&l| lin[l - 1] / counts[l - 1].max(1) as f64)
                    .collect();
                consider(
                    search.run(theta0.clone(), r0, &mut w),
                    &mut best,
                    &mut trace,
                );
                if let Some(th) = Self::place_seed(&seed, &search.layout, segments, p) {
                    consider(search.run(th, r0, &mut w), &mut best, &mut trace);
                }
                for _ in 0..self.config.starts {
                    let th: Vec<f64> = theta0
                        .iter()
                        .map(|t| {
                            t + noise * {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                z
                            }
                        })
                        .collect();
                    consider(search.run(th, r0, &mut w), &mut best, &mut trace);
                }
            }
            return (best, trace);
        }
        let search = Search {
            engine,
            x,
            y,
            layout: Layout::Free,
            cfg: &self.config,
            kind,
        };
        for wp in warm {
            let mut c = vec![0.0; segments * p];
            let k = wp.segments().min(segments);
            for i in 0..k {
                let src = wp.piece(i);
                c[i * p..i * p + src.len().min(p)].copy_from_slice(&src[..src.len().min(p)]);
            }
            if wp.segments() <= segments {
                let (res, cost) = search.eval(&c, &mut w);
                if res <= self.config.feas_tol {
                    consider(
                        Some(Found {
                            coeffs: c.clone(),
                            r: cost,
                            residual: res,
                        }),
                        &mut best,
                        &mut trace,
                    );
                }
            }
            consider(search.run(c, r0, &mut w), &mut best, &mut trace);
        }
        let theta0: Vec<f64> = (0..segments)
            .flat_map(|_| lin.iter().map(|v| v / segments as f64))
            .collect();
        consider(
            search.run(theta0.clone(), r0, &mut w),
            &mut best,
            &mut trace,
        );
        if kind == DistanceKind::Cc {
            if let Some(th) = Self::place_seed(&seed, &Layout::Free, segments, p) {
                consider(search.run(th, r0, &mut w), &mut best, &mut trace);
            }
        }
        for _ in 0..self.config.starts {
            let th: Vec<f64> = theta0
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let l = engine.degrees()[i % p] as i32;
                    t + noise.powi(l) * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    }
                })
                .collect();
            consider(search.run(th, r0, &mut w), &mut best, &mut trace);
        }
        (best, trace)
    }

    fn to_path(&self, kind: DistanceKind, f: &Found, segments: usize) -> ControlPath {
        let p = self.engine(kind).dim();
        let letters = (kind == DistanceKind::Fl).then(|| {
            (0..segments)
                .map(|k| {
                    f.coeffs[k * p..(k + 1) * p]
                        .iter()
                        .position(|v| *v != 0.0)
                        .map_or(k % p + 1, |j| j + 1)
                })
                .collect()
        });
        ControlPath {
            kind,
            dim: p,
            coeffs: f.coeffs.clone(),
            letters,
            r: f.r,
        }
    }

    fn finish(
        &self,
        kind: DistanceKind,
        best: Option<(ControlPath, f64)>,
        trace: Vec<f64>,
    ) -> DistanceEstimate {
        match best {
            Some((path, residual)) => DistanceEstimate {
                kind,
                value: path.r,
                status: DistanceStatus::Feasible,
                path: Some(path),
                residual,
                trace,
            },
            None => DistanceEstimate {
                kind,
                value: f64::INFINITY,
                status: DistanceStatus::BudgetExhausted,
                path: None,
                residual: f64::NAN,
                trace,
            },
        }
    }

    /// Estimates of every kind up to `upto`, each warm-started from the
    /// previous one, in both directions.
    pub fn estimate_chain(
        &self,
        upto: DistanceKind,
        x: &[f64],
        y: &[f64],
        segments: usize,
        extra: &[ControlPath],
    ) -> Vec<DistanceEstimate> {
        if x == y {
            return DistanceKind::ALL
                .iter()
                .filter(|k| **k <= upto)
                .map(|&k| DistanceEstimate::zero(k))
                .collect();
        }
        // canonical pair order, so that swapping x and y reruns the same search
        let ord = x
            .iter()
            .zip(y)
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal);
        if ord.is_gt() {
            let rev: Vec<ControlPath> = extra.iter().map(ControlPath::reversed).collect();
            let mut out = self.estimate_chain(upto, y, x, segments, &rev);
            for e in out.iter_mut() {
                e.path = e.path.as_ref().map(ControlPath::reversed);
            }
            return out;
        }
        let mut out = Vec::new();
        let mut prev_fwd: Option<ControlPath> = None;
        let mut prev_bwd: Option<ControlPath> = None;
        for kind in DistanceKind::ALL.into_iter().filter(|k| *k <= upto) {
            let mut warm_f: Vec<ControlPath> =
                extra.iter().filter(|p| p.kind <= kind).cloned().collect();
            let mut warm_b: Vec<ControlPath> = warm_f.iter().map(ControlPath::reversed).collect();
            if let Some(p) = &prev_fwd {
                warm_f.push(p.clone());
            }
            if let Some(p) = &prev_bwd {
                warm_b.push(p.clone());
            }
            let (mut f, mut trace) = self.search(kind, x, y, segments, &warm_f, 0);
            let (mut b, trace_b) = self.search(kind, y, x, segments, &warm_b, 1);
            trace.extend(trace_b);
            // nothing feasible: allow more pieces before giving up
            let mut segs = segments;
            while f.is_none() && b.is_none() && segs < MAX_SEGMENT_GROWTH * segments {
                segs *= 2;
                let (f2, t1) = self.search(kind, x, y, segs, &warm_f, 2);
                let (b2, t2) = self.search(kind, y, x, segs, &warm_b, 3);
                (f, b) = (f2, b2);
                trace.extend(t1);
                trace.extend(t2);
            }
            let fwd = f.map(|f| (self.to_path(kind, &f, segs), f.residual));
            let bwd = b.map(|b| (self.to_path(kind, &b, segs), b.residual));
            prev_fwd = fwd.as_ref().map(|p| p.0.clone()).or(prev_fwd);
            prev_bwd = bwd.as_ref().map(|p| p.0.clone()).or(prev_bwd);
            let best = match (fwd, bwd) {
                (Some(a), Some(b)) => Some(if b.0.r < a.0.r {
                    (b.0.reversed(), b.1)
                } else {
                    a
                }),
                (Some(a), None) => Some(a),
                (None, Some(b)) => Some((b.0.reversed(), b.1)),
                (None, None) => None,
            };
            // keep the warm-start chain feasible even if this kind found nothing new
            if let Some((p, _)) = &best {
                prev_fwd = Some(p.clone());
                prev_bwd = Some(p.reversed());
            }
            out.push(self.finish(kind, best, trace));
        }
        // ordering: a cheaper earlier path is admissible for later kinds
        for i in 1..out.len() {
            if out[i - 1].value < out[i].value {
                let mut e = out[i - 1].clone();
                e.kind = out[i].kind;
                if let Some(p) = e.path.as_mut() {
                    *p = self.lift(p, out[i].kind);
                }
                e.trace = out[i].trace.clone();
                out[i] = e;
            }
        }
        out
    }

    /// Re-expresses a path in the field list of a later kind.
    fn lift(&self, p: &ControlPath, kind: DistanceKind) -> ControlPath {
        let dim = self.engine(kind).dim();
        let k = p.segments();
        let mut coeffs = vec![0.0; k * dim];
        for i in 0..k {
            coeffs[i * dim..i * dim + p.dim].copy_from_slice(p.piece(i));
        }
        ControlPath {
            kind,
            dim,
            coeffs,
            letters: None,
            r: p.r,
        }
    }

    pub fn estimate(&self, kind: DistanceKind, x: &[f64], y: &[f64]) -> DistanceEstimate {
        self.estimate_chain(kind, x, y, self.config.segments, &[])
            .pop()
            .expect("nonempty chain")
    }

    pub fn fl_distance(&self, x: &[f64], y: &[f64]) -> DistanceEstimate {
        self.estimate(DistanceKind::Fl, x, y)
    }

    pub fn cc_distance(&self, x: &[f64], y: &[f64]) -> DistanceEstimate {
        self.estimate(DistanceKind::Cc, x, y)
    }

    pub fn rho_distance(&self, x: &[f64], y: &[f64]) -> DistanceEstimate {
        self.estimate(DistanceKind::Rho, x, y)
    }

    /// `[fl, cc, ρ]` estimates for one pair.
    pub fn estimate_all(&self, x: &[f64], y: &[f64]) -> Vec<DistanceEstimate> {
        self.estimate_chain(DistanceKind::Rho, x, y, self.config.segments, &[])
    }

    /// Estimates for increasing segment budgets, each warm-started from the
    /// previous best; values are non-increasing.
    pub fn segment_sweep(
        &self,
        kind: DistanceKind,
        x: &[f64],
        y: &[f64],
        budgets: &[usize],
    ) -> Vec<DistanceEstimate> {
        let mut out: Vec<DistanceEstimate> = Vec::new();
        for &k in budgets {
            let extra: Vec<ControlPath> = out
                .last()
                .and_then(|e| e.path.as_ref())
                .map(|p| vec![p.padded(k)])
                .unwrap_or_default();
            let mut e = self
                .estimate_chain(kind, x, y, k, &extra)
                .pop()
                .expect("nonempty chain");
            if let Some(prev) = out.last() {
                if prev.value < e.value {
                    let mut keep = prev.clone();
                    keep.path = keep.path.map(|p| p.padded(k));
                    e = keep;
                }
            }
            out.push(e);
        }
        out
    }

    /// Endpoint of a path from `x` (for certificate checks).
    pub fn follow(&self, path: &ControlPath, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        let engine = self.engine(path.kind);
        engine.endpoint(&path.coeffs, x, &mut engine.work())
    }

    /// Admissible `r` of an arbitrary path.
    pub fn path_r(&self, path: &ControlPath) -> f64 {
        path_cost(&path.coeffs, path.dim, self.engine(path.kind).degrees())
    }
}

/// Membership in the one-piece `ρ` ball: `y = exp(Σ c_j Y_j)(x)` with
/// `Σ_j c_j² R^{-2ℓ_j} ≤ 1`. Every such `y` has `ρ(x, y) ≤ R`, so this ball is
/// contained in `B_ρ(x, R)`.
#[derive(Clone, Debug)]
pub struct RhoBall {
    engine: PathEngine,
    max_iter: usize,
}

impl RhoBall {
    pub fn new(frame: &CommutatorFrame) -> Self {
        let engine = PathEngine::new(
            frame.basis().clone(),
            frame.degrees().to_vec(),
            frame.system().ode,
        );
        Self {
            engine,
            max_iter: 25,
        }
    }

    pub fn work(&self) -> EngineWork {
        self.engine.work()
    }

    /// Endpoint of the unit-time flow of `Σ c_j Y_j`.
    pub fn exp_point(
        &self,
        c: &[f64],
        x: &[f64],
        w: &mut EngineWork,
    ) -> Result<Vec<f64>, OdeError> {
        self.engine.endpoint(c, x, w)
    }

    /// Weighted norm `(Σ c_j² R^{-2ℓ_j})^{1/2}` of the (locally) smallest
    /// coefficient vector reaching `y`, or `None` if none was found.
    pub fn weighted_norm(
        &self,
        x: &[f64],
        y: &[f64],
        radius: f64,
        w: &mut EngineWork,
    ) -> Option<f64> {
        let q = self.engine.dim();
        let scale: Vec<f64> = self
            .engine
            .degrees()
            .iter()
            .map(|&l| radius.powi(l as i32))
            .collect();
        let tol = 1e-10 * (1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max));
        let mut c = vec![0.0; q];
        let mut res = dist(x, y);
        let norm = |c: &[f64]| {
            c.iter()
                .zip(&scale)
                .map(|(v, s)| (v / s) * (v / s))
                .sum::<f64>()
                .sqrt()
        };
        for _ in 0..self.max_iter {
            let (end, jac) = self.engine.endpoint_jac(&c, x, w).ok()?;
            res = dist(&end, y);
            let mut a = jac.clone();
            for (j, s) in scale.iter().enumerate() {
                a.column_mut(j).scale_mut(*s);
            }
            let jc = &jac * nalgebra::DVector::from_column_slice(&c);
            let rhs: Vec<f64> = (0..y.len()).map(|i| y[i] - end[i] + jc[i]).collect();
            let sol = min_norm_solve(&a, &rhs, RANK_TOL).ok()?;
            let target: Vec<f64> = sol.x.iter().zip(&scale).map(|(z, s)| z * s).collect();
            let step = c
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if res <= tol && step <= 1e-12 * (1.0 + norm(&c)) {
                return Some(norm(&c));
            }
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..10 {
                let trial: Vec<f64> = c
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| a + alpha * (b - a))
                    .collect();
                if let Ok(e) = self.engine.endpoint(&trial, x, w) {
                    let tr = dist(&e, y);
                    if tr <= tol.max((1.0 - 1e-4 * alpha) * res) {
                        c = trial;
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
        (res <= tol).then(|| norm(&c))
    }

    pub fn contains(&self, x: &[f64], y: &[f64], radius: f64, w: &mut EngineWork) -> bool {
        self.weighted_norm(x, y, radius, w)
            .is_some_and(|v| v <= 1.0)
    }

    /// Axis box around the ball: extremes of `count` images of uniform unit
    /// coefficient samples, widened by 25% of the half-widths on each side.
    pub fn bounding_box(
        &self,
        x: &[f64],
        radius: f64,
        count: usize,
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>), OdeError> {
        let q = self.engine.dim();
        let n = x.len();
        let mut lo = x.to_vec();
        let mut hi = x.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut w = self.work();
        let scale: Vec<f64> = self
            .engine
            .degrees()
            .iter()
            .map(|&l| radius.powi(l as i32))
            .collect();
        for i in 0..count {
            let dir: Vec<f64> = (0..q)
                .map(|_| -> f64 { StandardNormal.sample(&mut rng) })
                .collect();
            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            // alternate boundary and interior radii
            let rad = if i % 2 == 0 {
                1.0
            } else {
                rng.gen::<f64>().powf(1.0 / q as f64)
            };
            let c: Vec<f64> = dir
                .iter()
                .zip(&scale)
                .map(|(d, s)| d / len * rad * s)
                .collect();
            let e = self.engine.endpoint(&c, x, &mut w)?;
            for k in 0..n {
                lo[k] = lo[k].min(e[k]);
                hi[k] = hi[k].max(e[k]);
            }
        }
        for k in 0..n {
            let pad = 0.25 * (hi[k] - lo[k]).max(1e-300);
            lo[k] -= pad;
            hi[k] += pad;
        }
        Ok((lo, hi))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FpScale {
    pub separation: f64,
    pub max_ratio: f64,
    pub min_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FeffermanPhong {
    pub kind: DistanceKind,
    pub exponent: f64,
    pub scales: Vec<FpScale>,
    /// Supremum of `d̂(x,y)/|x−y|^{1/s}` over all pairs.
    pub empirical_c: f64,
    /// Largest over smallest per-scale supremum.
    pub variation: f64,
}

/// `d̂(x, x + δu)/δ^{1/s}` for every base point, unit direction and separation.
pub fn fefferman_phong_check(
    est: &MetricEstimator,
    kind: DistanceKind,
    bases: &[Vec<f64>],
    directions: &[Vec<f64>],
    separations: &[f64],
) -> FeffermanPhong {
    let s = est.step() as f64;
    let scales: Vec<FpScale> = separations
        .iter()
        .map(|&delta| {
            let ratios: Vec<f64> = bases
                .par_iter()
                .flat_map_iter(|b| directions.iter().map(move |u| (b, u)))
                .map(|(b, u)| {
                    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y: Vec<f64> = b.iter().zip(u).map(|(p, d)| p + delta * d / un).collect();
                    est.estimate(kind, b, &y).value / delta.powf(1.0 / s)
                })
                .collect();
            FpScale {
                separation: delta,
                max_ratio: ratios.iter().copied().fold(0.0, f64::max),
                min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })
        .collect();
    let sup = scales.iter().map(|s| s.max_ratio).fold(0.0, f64::max);
    let inf = scales
        .iter()
        .map(|s| s.max_ratio)
        .fold(f64::INFINITY, f64::min);
    FeffermanPhong {
        kind,
        exponent: 1.0 / s,
        empirical_c: sup,
        variation: sup / inf,
        scales,
    }
}
