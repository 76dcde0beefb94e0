//! Regularized and exact minimum-norm least squares.
//!
//! `tychonoff_solve` returns `x_λ = (AᵀA + λ²I)⁻¹Aᵀb`. The normal matrix is
//! factored once by Cholesky (shifted if `λ²` is below its rounding level) and
//! the solution is polished by iterative
//! refinement whose residual `Aᵀ(b − Ax) − λ²x` is accumulated in
//! double-double arithmetic without forming `AᵀA`, so `x_λ` stays accurate
//! even when `λ²` is far below `‖A‖²·ε`. `min_norm_solve` uses an SVD.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::poly::FieldBasis;

/// Dense real matrix (`n × q`).
pub type DenseMatrix = DMatrix<f64>;

/// Singular values below `RANK_TOL · σ_max` count as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("non-finite input")]
    NonFinite,
    #[error("regularization parameter must be positive, got {0}")]
    BadLambda(f64),
    #[error("dimension mismatch: matrix has {rows} rows, right-hand side {rhs}")]
    Dimension { rows: usize, rhs: usize },
    #[error("normal matrix is not numerically positive definite")]
    NotPositiveDefinite,
}

fn check_inputs(a: &DenseMatrix, b: &[f64]) -> Result<(), LinalgError> {
    if a.nrows() != b.len() {
        return Err(LinalgError::Dimension {
            rows: a.nrows(),
            rhs: b.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(())
}

// Error-free transformations.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Double-double accumulator.
#[derive(Clone, Copy, Default)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn add(&mut self, v: f64) {
        let (s, e) = two_sum(self.hi, v);
        self.hi = s;
        self.lo += e;
    }

    fn add_prod(&mut self, a: f64, b: f64) {
        let (p, e) = two_prod(a, b);
        self.add(p);
        self.lo += e;
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = m.nrows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(LinalgError::NotPositiveDefinite);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &DenseMatrix, rhs: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut y = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// `Aᵀ(b − Ax) − λ²x` for `x = hi + lo`, accumulated in double-double.
fn normal_residual(a: &DenseMatrix, b: &[f64], hi: &[f64], lo: &[f64], lam2: f64) -> Vec<f64> {
    let (n, q) = a.shape();
    let resid: Vec<Dd> = (0..n)
        .map(|i| {
            let mut acc = Dd { hi: b[i], lo: 0.0 };
            for j in 0..q {
                acc.add_prod(-a[(i, j)], hi[j]);
                acc.add_prod(-a[(i, j)], lo[j]);
            }
            acc
        })
        .collect();
    (0..q)
        .map(|j| {
            let mut acc = Dd::default();
            for (i, r) in resid.iter().enumerate() {
                acc.add_prod(a[(i, j)], r.hi);
                acc.add_prod(a[(i, j)], r.lo);
            }
            acc.add_prod(-lam2, hi[j]);
            acc.add_prod(-lam2, lo[j]);
            acc.value()
        })
        .collect()
}

/// Adds `d` to the double-double vector `(hi, lo)`; returns `‖d‖`.
fn dd_update(hi: &mut [f64], lo: &mut [f64], d: &[f64]) -> f64 {
    for j in 0..hi.len() {
        let (s, e) = two_sum(hi[j], d[j]);
        (hi[j], lo[j]) = two_sum(s, lo[j] + e);
    }
    d.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

/// `x_λ = (AᵀA + λ²I_q)⁻¹Aᵀb`.
pub fn tychonoff_solve(a: &DenseMatrix, b: &[f64], lambda: f64) -> Result<Vec<f64>, LinalgError> {
    let (hi, lo) = tychonoff_parts(a, b, lambda)?;
    Ok(hi.iter().zip(&lo).map(|(h, l)| h + l).collect())
}

/// `x_λ` as an unevaluated sum `hi + lo`.
fn tychonoff_parts(
    a: &DenseMatrix,
    b: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    check_inputs(a, b)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(LinalgError::BadLambda(lambda));
    }
    let lam2 = lambda * lambda;
    let q = a.ncols();
    let gram = a.transpose() * a;
    // When λ² is below the rounding level of AᵀA the factorization uses a
    // larger shift; refinement still converges to the unshifted solution.
    let scale = (0..q)
        .map(|j| gram[(j, j)])
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut shift = lam2;
    let l = loop {
        let mut normal = gram.clone();
        for j in 0..q {
            normal[(j, j)] += shift;
        }
        match cholesky(&normal) {
            Ok(l) => break l,
            Err(_) if shift < scale => shift = (shift * 10.0).max(f64::EPSILON * scale),
            Err(e) => return Err(e),
        }
    };
    let (mut hi, mut lo) = (vec![0.0; q], vec![0.0; q]);
    let mut last = f64::INFINITY;
    // with a shifted factor the contraction per step is about 1 − λ²/shift
    for _ in 0..300 {
        let r = normal_residual(a, b, &hi, &lo, lam2);
        let d = cholesky_solve(&l, &r);
        let dn = dd_update(&mut hi, &mut lo, &d);
        if dn <= 1e-30 * norm2(&hi) || dn >= last {
            break;
        }
        last = dn;
    }
    if hi.iter().chain(&lo).any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok((hi, lo))
}

#[derive(Clone, Debug, Serialize)]
pub struct MinNorm {
    pub x: Vec<f64>,
    pub rank: usize,
    /// `‖b − Ax‖₂`.
    pub residual: f64,
    pub singular_values: Vec<f64>,
    /// Absolute threshold used for the rank decision.
    pub threshold: f64,
}

/// Minimum-norm least-squares solution. `tol` is relative to `σ_max`
/// (`RANK_TOL` is the usual choice).
pub fn min_norm_solve(a: &DenseMatrix, b: &[f64], tol: f64) -> Result<MinNorm, LinalgError> {
    check_inputs(a, b)?;
    let q = a.ncols();
    if a.nrows() == 0 || q == 0 {
        return Ok(MinNorm {
            x: vec![0.0; q],
            rank: 0,
            residual: b.iter().map(|v| v * v).sum::<f64>().sqrt(),
            singular_values: Vec::new(),
            threshold: 0.0,
        });
    }
    // nalgebra's SVD loses orthogonality on some exactly rank-deficient
    // inputs, so the factorization comes from faer
    let fa = faer::Mat::<f64>::from_fn(a.nrows(), q, |i, j| a[(i, j)]);
    let svd = fa.thin_svd().map_err(|_| LinalgError::NonFinite)?;
    let (u, v) = (svd.U(), svd.V());
    let sv: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let threshold = tol * smax;
    let bv = DVector::from_column_slice(b);
    let mut x = DVector::zeros(q);
    let mut rank = 0;
    for (k, &s) in sv.iter().enumerate() {
        if s > threshold && s > 0.0 {
            rank += 1;
            let beta: f64 = (0..a.nrows()).map(|i| u[(i, k)] * b[i]).sum();
            for j in 0..q {
                x[j] += v[(j, k)] * (beta / s);
            }
        }
    }
    let residual = (&bv - a * &x).norm();
    Ok(MinNorm {
        x: x.iter().copied().collect(),
        rank,
        residual,
        singular_values: sv,
        threshold,
    })
}

/// One sample `(γ(t), γ̇(t))` of a path.
#[derive(Clone, Debug, Serialize)]
pub struct PathSample {
    pub t: f64,
    pub point: Vec<f64>,
    pub velocity: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RecoveredControls {
    pub controls: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub max_norm: f64,
    /// Indices of samples whose velocity is not in the span of the fields.
    pub non_horizontal: Vec<usize>,
}

/// Min-norm controls `b(t)` with `γ̇(t) = Σ_j b_j(t) X_j(γ(t))`. A sample is
/// flagged when the span residual exceeds `tol · max(1, ‖γ̇‖)`.
pub fn recover_controls(
    samples: &[PathSample],
    fields: &FieldBasis,
    n: usize,
    tol: f64,
) -> RecoveredControls {
    let m = fields.len();
    let mut scratch = fields.scratch();
    let mut buf = vec![0.0; n * m];
    let mut out = RecoveredControls {
        controls: Vec::with_capacity(samples.len()),
        residuals: Vec::with_capacity(samples.len()),
        max_norm: 0.0,
        non_horizontal: Vec::new(),
    };
    for (idx, s) in samples.iter().enumerate() {
        fields.eval_all(&s.point, &mut scratch, &mut buf);
        let a = DMatrix::from_column_slice(n, m, &buf);
        let sol = match min_norm_solve(&a, &s.velocity, RANK_TOL) {
            Ok(sol) => sol,
            Err(_) => {
                out.controls.push(vec![f64::NAN; m]);
                out.residuals.push(f64::INFINITY);
                out.non_horizontal.push(idx);
                continue;
            }
        };
        let vn = s.velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sol.residual > tol * vn.max(1.0) {
            out.non_horizontal.push(idx);
        }
        let bn = sol.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.max_norm = out.max_norm.max(bn);
        out.residuals.push(sol.residual);
        out.controls.push(sol.x);
    }
    out
}

/// `x_LS` as `hi + lo`: the SVD solution refined on the normal equations
/// in double-double, with its null-space component projected out.
fn min_norm_parts(
    a: &DenseMatrix,
    b: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    let first = min_norm_solve(a, b, tol)?;
    let q = a.ncols();
    let (mut hi, mut lo) = (first.x, vec![0.0; q]);
    if first.rank == 0 {
        return Ok((vec![0.0; q], lo));
    }
    let fa = faer::Mat::<f64>::from_fn(a.nrows(), q, |i, j| a[(i, j)]);
    let svd = fa.svd().map_err(|_| LinalgError::NonFinite)?;
    let v = svd.V();
    let sv: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let rank = first.rank;
    let mut last = f64::INFINITY;
    for _ in 0..20 {
        let g = normal_residual(a, b, &hi, &lo, 0.0);
        let mut d = vec![0.0; q];
        for k in 0..rank {
            let c: f64 = (0..q).map(|j| v[(j, k)] * g[j]).sum::<f64>() / (sv[k] * sv[k]);
            for j in 0..q {
                d[j] += c * v[(j, k)];
            }
        }
        let dn = dd_update(&mut hi, &mut lo, &d);
        for k in rank..q {
            let mut c = Dd::default();
            for j in 0..q {
                c.add_prod(v[(j, k)], hi[j]);
                c.add_prod(v[(j, k)], lo[j]);
            }
            let p: Vec<f64> = (0..q).map(|j| -c.value() * v[(j, k)]).collect();
            dd_update(&mut hi, &mut lo, &p);
        }
        if dn <= 1e-30 * norm2(&hi) || dn >= last {
            break;
        }
        last = dn;
    }
    Ok((hi, lo))
}

/// `(λ, ‖x_LS − x_λ‖)` over a sweep of `λ`. Both solutions are carried in
/// double-double so the difference stays meaningful below `ε‖x‖`.
pub fn lambda_sweep(
    a: &DenseMatrix,
    b: &[f64],
    lambdas: &[f64],
) -> Result<Vec<(f64, f64)>, LinalgError> {
    let (ls_hi, ls_lo) = min_norm_parts(a, b, RANK_TOL)?;
    lambdas
        .iter()
        .map(|&l| {
            let (hi, lo) = tychonoff_parts(a, b, l)?;
            let err = (0..hi.len())
                .map(|j| {
                    let d = (ls_hi[j] - hi[j]) + (ls_lo[j] - lo[j]);
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            Ok((l, err))
        })
        .collect()
}

/// Reads a matrix from CSV text, one row per line.
pub fn parse_csv_matrix(text: &str) -> Result<DenseMatrix, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| format!("bad entry `{v}`: {e}"))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err("ragged CSV matrix".into());
    }
    Ok(DenseMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{geometric_grid, loglog_slope};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    }

    /// `P·Q` with small integer factors: exactly representable and of rank at
    /// most `r`; retried until the smallest nonzero singular value is `>= smin`.
    fn low_rank(rng: &mut ChaCha8Rng, n: usize, q: usize, r: usize, smin: f64) -> DenseMatrix {
        loop {
            let p = DenseMatrix::from_fn(n, r, |_, _| rng.gen_range(-2i32..=2) as f64);
            let f = DenseMatrix::from_fn(r, q, |_, _| rng.gen_range(-2i32..=2) as f64);
            let a = &p * &f;
            let sol = min_norm_solve(&a, &vec![0.0; n], RANK_TOL).unwrap();
            let nz: Vec<f64> = sol
                .singular_values
                .iter()
                .copied()
                .filter(|&s| s > sol.threshold)
                .collect();
            if sol.rank == r && nz.iter().all(|&s| s >= smin) {
                return a;
            }
        }
    }

    #[test]
    fn trivial_examples() {
        let a = DenseMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let x = tychonoff_solve(&a, &[1.0], 1e-8).unwrap();
        assert!(diff(&x, &[0.5, 0.5]) < 1e-12);
        let a = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        for l in [0.5, 1e-3] {
            let x = tychonoff_solve(&a, &[1.0, 0.0], l).unwrap();
            assert!(diff(&x, &[1.0 / (1.0 + l * l), 0.0]) < 1e-15);
        }
        assert!(tychonoff_solve(&a, &[1.0, 0.0], 0.0).is_err());
        assert!(tychonoff_solve(&a, &[f64::NAN, 0.0], 1.0).is_err());
        assert!(tychonoff_solve(&a, &[1.0], 1.0).is_err());
    }

    #[test]
    fn min_norm_examples() {
        let a = DenseMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let s = min_norm_solve(&a, &[3.0, 4.0], RANK_TOL).unwrap();
        assert_eq!(s.rank, 2);
        assert!(diff(&s.x, &[1.0, 1.0]) < 1e-14);
        // rank one: x = (bᵀu / (‖u‖²‖v‖²)) v
        let u = [1.0, 2.0, -1.0];
        let v = [3.0, 0.0, 1.0, 2.0];
        let a = DenseMatrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        let b = [0.5, -1.0, 2.0];
        let s = min_norm_solve(&a, &b, RANK_TOL).unwrap();
        assert_eq!(s.rank, 1);
        let coef =
            (b[0] * u[0] + b[1] * u[1] + b[2] * u[2]) / (norm(&u).powi(2) * norm(&v).powi(2));
        let expect: Vec<f64> = v.iter().map(|x| coef * x).collect();
        assert!(diff(&s.x, &expect) < 1e-14);
    }

    #[test]
    fn consistency_with_tychonoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = low_rank(&mut rng, 5, 8, 3, 0.25);
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ls = min_norm_solve(&a, &b, RANK_TOL).unwrap();
            let t = tychonoff_solve(&a, &b, 1e-6).unwrap();
            assert!(
                diff(&ls.x, &t) <= 1e-9 * norm(&b).max(1.0),
                "{}",
                diff(&ls.x, &t)
            );
            // residual orthogonal to the column space
            let r = DVector::from_column_slice(&b) - &a * DVector::from_column_slice(&ls.x);
            let ortho = (a.transpose() * r).norm();
            assert!(ortho <= 1e-10 * a.norm() * norm(&b).max(1.0));
        }
    }

    #[test]
    fn error_components_exact_spectrum() {
        // U = H/2, V = permuted H/2 with H the 4x4 Hadamard matrix: both
        // orthogonal in floating point, so A = UΣVᵀ has the exact spectrum.
        let h = [
            [1.0, 1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, -1.0, 1.0],
        ];
        let u = DenseMatrix::from_fn(4, 4, |i, j| h[i][j] / 2.0);
        let perm = [2, 0, 3, 1];
        let v = DenseMatrix::from_fn(4, 4, |i, j| h[perm[i]][j] / 2.0);
        let sig = [1.5, 0.5, 0.25, 0.0];
        let a = &u * DenseMatrix::from_diagonal(&DVector::from_column_slice(&sig)) * v.transpose();
        let b = [0.3, -0.7, 1.1, 0.2];
        let bv = DVector::from_column_slice(&b);
        let ls = min_norm_solve(&a, &b, RANK_TOL).unwrap();
        assert_eq!(ls.rank, 3);
        for lam in [1e-1, 1e-2, 1e-3] {
            let x = tychonoff_solve(&a, &b, lam).unwrap();
            let d = DVector::from_column_slice(&ls.x) - DVector::from_column_slice(&x);
            for i in 0..3 {
                let beta = u.column(i).dot(&bv);
                let expect = lam * lam * beta / (sig[i] * (sig[i] * sig[i] + lam * lam));
                let got = v.column(i).dot(&d);
                assert!((got - expect).abs() < 1e-10, "{lam} {i}: {got} vs {expect}");
            }
            assert!(v.column(3).dot(&d).abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lams = geometric_grid(1e-6, 1e-2, 9);
        for _ in 0..5 {
            let a = low_rank(&mut rng, 5, 8, 3, 0.1);
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sweep = lambda_sweep(&a, &b, &lams).unwrap();
            let (ls, es): (Vec<f64>, Vec<f64>) = sweep.into_iter().unzip();
            let slope = loglog_slope(&ls, &es).unwrap();
            assert!((slope - 2.0).abs() < 0.1, "{slope} {es:?}");
        }
    }

    #[test]
    fn recover_heisenberg_controls() {
        use crate::vfield::VectorFieldSystem;
        let sys = VectorFieldSystem::builtin("heisenberg").unwrap();
        let g = sys.generators();
        let mut samples = Vec::new();
        let mut s = g.scratch();
        let mut buf = vec![0.0; 6];
        for k in 0..8 {
            let t = 0.3 * k as f64;
            let p = vec![0.2 * t.sin(), -0.1 * t, 0.05 * t * t];
            g.eval_all(&p, &mut s, &mut buf);
            let vel: Vec<f64> = (0..3)
                .map(|i| t.cos() * buf[i] + t.sin() * buf[3 + i])
                .collect();
            samples.push(PathSample {
                t,
                point: p,
                velocity: vel,
            });
        }
        let rec = recover_controls(&samples, g, 3, 1e-9);
        assert!(rec.non_horizontal.is_empty());
        for (smp, c) in samples.iter().zip(&rec.controls) {
            assert!(diff(c, &[smp.t.cos(), smp.t.sin()]) < 1e-8);
        }
        let vertical = [PathSample {
            t: 0.0,
            point: vec![0.0; 3],
            velocity: vec![0.0, 0.0, 1.0],
        }];
        assert_eq!(
            recover_controls(&vertical, g, 3, 1e-9).non_horizontal,
            vec![0]
        );
    }

    #[test]
    fn csv_matrix() {
        let m = parse_csv_matrix("1, 2\n3,4\n").unwrap();
        assert_eq!(m[(1, 0)], 3.0);
        assert!(parse_csv_matrix("1,2\n3").is_err());
    }
}
