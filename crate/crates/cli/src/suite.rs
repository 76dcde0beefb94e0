//! The acceptance checks as one report. Sample sizes follow the acceptance
//! target unless `--quick` is given.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use liebox_core::approx_exp::CommutatorFrame;
use liebox_core::ballbox::{
    builtin_frame, doubling_ratio, inclusion_check, jacobian_comparability, lambda_i,
    poincare_suite, poincare_suite_functions, select_maximal, BallSampler, InclusionConfig,
    Membership,
};
use liebox_core::fit::{geometric_grid, loglog_slope};
use liebox_core::free_lie::{
    check_baker, check_generalized_jacobi, check_j2, f_sum, sweep_f, sweep_generalized_jacobi,
    sweep_j2,
};
use liebox_core::linalg_mp::{lambda_sweep, min_norm_solve, tychonoff_solve, RANK_TOL};
use liebox_core::metric::{fefferman_phong_check, DistanceKind, MetricConfig, MetricEstimator};
use liebox_core::nc_poly::{is_trivial, NcPoly};
use liebox_core::perm_words::{pi_table, Word};
use liebox_core::poly::{rat, Poly};
use liebox_core::vfield::VectorFieldSystem;

use crate::config::RunConfig;
use crate::report::{Outcome, Table};
use crate::{Failure, SuiteArgs};

#[derive(Serialize)]
struct Criterion {
    id: usize,
    passed: bool,
    detail: String,
    /// Omitted with `--no-timestamp`, like every other wall-clock value.
    #[serde(skip_serializing_if = "Option::is_none")]
    seconds: Option<f64>,
}

struct Ctx {
    quick: bool,
    seed: u64,
    metric: MetricConfig,
}

type Check = fn(&Ctx) -> Result<(bool, String), String>;

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn w(s: &str) -> Result<Word, String> {
    s.parse().map_err(e)
}

fn pi_tables(_: &Ctx) -> Result<(bool, String), String> {
    let rows = |l| -> Result<Vec<(String, i8)>, String> {
        Ok(pi_table(l)
            .map_err(e)?
            .nonzero()
            .map(|(p, c)| (p.to_string(), *c))
            .collect())
    };
    let want3 = [("123", 1), ("132", -1), ("231", -1), ("321", 1)];
    let want4 = [
        ("1234", 1),
        ("1243", -1),
        ("1342", -1),
        ("1432", 1),
        ("2341", -1),
        ("2431", 1),
        ("3421", 1),
        ("4321", -1),
    ];
    let same = |got: &[(String, i8)], want: &[(&str, i8)]| {
        got.len() == want.len() && got.iter().zip(want).all(|(a, b)| a.0 == b.0 && a.1 == b.1)
    };
    let (t3, t4) = (rows(3)?, rows(4)?);
    Ok((
        same(&t3, &want3) && same(&t4, &want4),
        format!("{} and {} nonzero terms", t3.len(), t4.len()),
    ))
}

fn jacobi(_: &Ctx) -> Result<(bool, String), String> {
    let gj = sweep_generalized_jacobi(3, 6);
    let j2 = sweep_j2(3, 6);
    Ok((
        gj.passed() && j2.passed(),
        format!(
            "{} + {} instances, {} failures",
            gj.instances,
            j2.instances,
            gj.failures.len() + j2.failures.len()
        ),
    ))
}

fn f_family(_: &Ctx) -> Result<(bool, String), String> {
    let rep = sweep_f(5, 4, 1);
    let mut nonzero = 0;
    for l in 2..=5usize {
        let v = Word::new((1..=l as u8).collect()).map_err(e)?;
        if !f_sum(l, &vec![1; l], &v, &Word::empty())
            .map_err(e)?
            .is_zero()
        {
            nonzero += 1;
        }
    }
    Ok((
        rep.passed() && nonzero > 0,
        format!(
            "{} instances, {} failures, p = l nonzero in {nonzero}/4",
            rep.instances,
            rep.failures.len()
        ),
    ))
}

fn baker(_: &Ctx) -> Result<(bool, String), String> {
    let checks = check_baker(1, 2).map_err(e)?;
    let held = checks.iter().filter(|c| c.holds).count();
    Ok((
        held == checks.len(),
        format!("{held}/{} identities hold", checks.len()),
    ))
}

fn witness(ctx: &Ctx) -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 5);
    let mut flagged = 0;
    for _ in 0..20 {
        let q = loop {
            let p = rng.gen_range(2..=4usize);
            let m = rng.gen_range(1..=3usize);
            let mut q = NcPoly::zero(m);
            for _ in 0..rng.gen_range(1..=5) {
                let word: Vec<u8> = (0..p).map(|_| rng.gen_range(1..=m as u8)).collect();
                q.add_term(word, rat(rng.gen_range(-3i64..=3), 1));
            }
            if !q.is_zero() {
                break q;
            }
        };
        let rep = is_trivial(&q).map_err(e)?;
        if !rep.trivial && rep.certificate.is_some() {
            flagged += 1;
        }
    }
    let mut residuals = Vec::new();
    for (v, x) in [("12", "3"), ("123", "1"), ("21", "21")] {
        residuals.push(check_generalized_jacobi(&w(v)?, &w(x)?).map_err(e)?);
    }
    for v in ["12", "123", "2131"] {
        residuals.push(check_j2(&w(v)?).map_err(e)?);
    }
    let mut trivial = 0;
    for r in &residuals {
        if is_trivial(&NcPoly::from_word_sum(r, 3).map_err(e)?)
            .map_err(e)?
            .trivial
        {
            trivial += 1;
        }
    }
    Ok((
        flagged == 20 && trivial == residuals.len(),
        format!(
            "{flagged}/20 nontrivial, {trivial}/{} residuals trivial",
            residuals.len()
        ),
    ))
}

fn limit(_: &Ctx) -> Result<(bool, String), String> {
    let sys = VectorFieldSystem::builtin("heisenberg").map_err(e)?;
    let fit = sys
        .bracket_limit_fit(
            &w("12")?,
            &Poly::var(3, 2),
            &[0.0; 3],
            &geometric_grid(1e-3, 1e-1, 9),
        )
        .map_err(e)?;
    let q = fit.samples.first().map_or(f64::NAN, |s| s.quotient);
    let pass = (q - 1.0).abs() < 1e-2 && fit.slope.is_some_and(|s| (s - 1.0).abs() <= 0.2);
    Ok((
        pass,
        format!("quotient at t=1e-3 {q}, slope {:?}", fit.slope),
    ))
}

fn c_map(_: &Ctx) -> Result<(bool, String), String> {
    let f = builtin_frame("heisenberg").map_err(e)?;
    let mut worst: f64 = 0.0;
    for s in [0.05, 0.1, 0.2] {
        let p = f.c_map(s, &[1, 2], &[0.0; 3]).map_err(e)?;
        worst = worst.max(p[0].abs().max(p[1].abs()).max((p[2] - s * s).abs()));
    }
    Ok((worst <= 1e-8, format!("max deviation {worst:e}")))
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (d / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
}

fn jacobian(_: &Ctx) -> Result<(bool, String), String> {
    let mut col: f64 = 0.0;
    let mut det: f64 = 0.0;
    for (m, x, r) in [
        ("heisenberg", vec![0.3, -0.2, 0.1], 0.5),
        ("heisenberg", vec![0.0; 3], 0.1),
        ("grushin", vec![0.5, 0.2], 0.1),
        ("grushin", vec![0.05, 0.1], 0.5),
    ] {
        let f = builtin_frame(m).map_err(e)?;
        let t = select_maximal(&f, &x, r, 0.5).map_err(e)?;
        let jac = f
            .jacobian_e(&t.frame, &x, r, &vec![0.0; x.len()])
            .map_err(e)?;
        for (k, &j) in t.frame.iter().enumerate() {
            let c: Vec<f64> = jac.matrix.column(k).iter().copied().collect();
            col = col.max(rel(&c, &f.scaled_field(j, r, &x)));
        }
        let want = lambda_i(&f, &t.frame, &x).map_err(e)? * r.powi(f.degree_sum(&t.frame) as i32);
        det = det.max(((jac.det - want) / want).abs());
    }
    Ok((
        col <= 1e-4 && det <= 1e-4,
        format!("column error {col:e}, det error {det:e}"),
    ))
}

fn inclusion(ctx: &Ctx) -> Result<(bool, String), String> {
    let f = builtin_frame("heisenberg").map_err(e)?;
    let mut pass = true;
    let mut worst: f64 = 1.0;
    for (x, r, eps) in [([0.1, -0.2, 0.05], 0.5, 0.5), ([0.0; 3], 0.2, 0.3)] {
        let t = select_maximal(&f, &x, r, 0.5).map_err(e)?;
        let jc = jacobian_comparability(&f, &t.frame, &x, r, 0.2, 200, ctx.seed).map_err(e)?;
        let cfg = InclusionConfig {
            eps,
            samples: if ctx.quick { 50 } else { 200 },
            seed: ctx.seed,
            ..Default::default()
        };
        let rep = inclusion_check(&f, &t.frame, &x, r, &cfg).map_err(e)?;
        pass &= jc.min_ratio >= 0.5 && jc.max_ratio <= 2.0 && rep.fraction == 1.0;
        worst = worst.min(rep.fraction);
    }
    Ok((pass, format!("smallest solved fraction {worst}")))
}

fn doubling(ctx: &Ctx) -> Result<(bool, String), String> {
    let n = if ctx.quick { 100_000 } else { 1_000_000 };
    let mut pass = true;
    let mut out = Vec::new();
    for (m, dim, want) in [("heisenberg", 3, 16.0), ("grushin", 2, 8.0)] {
        let s = BallSampler::new(builtin_frame(m).map_err(e)?, Membership::Rho);
        let rep = doubling_ratio(&s, &vec![0.0; dim], 0.25, n, ctx.seed).map_err(e)?;
        pass &= (rep.ratio - want).abs() <= 0.15 * want;
        out.push(format!("{m} {:.3}", rep.ratio));
    }
    Ok((pass, out.join(", ")))
}

fn poincare(ctx: &Ctx) -> Result<(bool, String), String> {
    let n = if ctx.quick { 20_000 } else { 100_000 };
    let s = BallSampler::new(builtin_frame("heisenberg").map_err(e)?, Membership::Rho);
    let fs = poincare_suite_functions();
    let mut maxes = Vec::new();
    for k in 0..3 {
        let suite = poincare_suite(&s, &fs, &[0.0; 3], 0.5, 2.0, n, ctx.seed + k).map_err(e)?;
        if suite.reports.iter().any(|r| !r.ratio.is_finite()) {
            return Ok((false, "non-finite ratio".into()));
        }
        maxes.push(suite.max_ratio);
    }
    let hi = maxes.iter().copied().fold(0.0, f64::max);
    let lo = maxes.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        lo > 0.0 && hi <= 1.1 * lo,
        format!("suite max per seed {maxes:.4?}"),
    ))
}

fn tychonoff(ctx: &Ctx) -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 12);
    let lams = geometric_grid(1e-6, 1e-2, 9);
    let mut bad = 0;
    let mut made = 0;
    while made < 20 {
        let n = rng.gen_range(3..=7);
        let q = rng.gen_range(3..=8);
        let r = rng.gen_range(1..n.min(q));
        let a = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-2i32..=2) as f64)
            * DMatrix::from_fn(r, q, |_, _| rng.gen_range(-2i32..=2) as f64);
        let sol = min_norm_solve(&a, &vec![0.0; n], RANK_TOL).map_err(e)?;
        let smin = sol
            .singular_values
            .iter()
            .copied()
            .filter(|&s| s > sol.threshold)
            .fold(f64::INFINITY, f64::min);
        if sol.rank != r || smin < 0.1 {
            continue;
        }
        made += 1;
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ls, es): (Vec<f64>, Vec<f64>) =
            lambda_sweep(&a, &b, &lams).map_err(e)?.into_iter().unzip();
        if !loglog_slope(&ls, &es).is_some_and(|s| (s - 2.0).abs() <= 0.1) {
            bad += 1;
        }
    }
    // diagonal spectrum: x_LS − x_λ has components λ²β_i/(σ_i(σ_i²+λ²))
    let sig = [2.0, 1.0, 0.5, 0.0];
    let b = [0.4, -0.3, 0.9, -1.2];
    let a = DMatrix::from_diagonal(&DVector::from_column_slice(&sig));
    let ls = min_norm_solve(&a, &b, RANK_TOL).map_err(e)?;
    let mut worst: f64 = 0.0;
    for lam in [1e-1, 1e-2, 1e-3] {
        let x = tychonoff_solve(&a, &b, lam).map_err(e)?;
        for i in 0..4 {
            let want = if sig[i] > 0.0 {
                lam * lam * b[i] / (sig[i] * (sig[i] * sig[i] + lam * lam))
            } else {
                0.0
            };
            worst = worst.max((ls.x[i] - x[i] - want).abs());
        }
    }
    Ok((
        bad == 0 && worst <= 1e-10,
        format!("{bad}/20 slopes off, component error {worst:e}"),
    ))
}

fn distances(ctx: &Ctx) -> Result<(bool, String), String> {
    let frame = CommutatorFrame::new(Arc::new(
        VectorFieldSystem::builtin("heisenberg").map_err(e)?,
    ));
    let est = MetricEstimator::new(frame, ctx.metric);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 13);
    let pairs = if ctx.quick { 20 } else { 100 };
    let mut violations = 0;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let d = est.estimate_all(&x, &y);
        if !(d[1].value <= d[0].value + 1e-9 && d[2].value <= d[1].value + 1e-9) {
            violations += 1;
        }
    }
    let fp = fefferman_phong_check(
        &est,
        DistanceKind::Cc,
        &[vec![0.0; 3], vec![0.3, -0.2, 0.1]],
        &[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ],
        &[1e-4, 1e-3, 1e-2, 1e-1],
    );
    Ok((
        violations == 0 && fp.variation < 3.0,
        format!(
            "{violations}/{pairs} ordering violations, variation {:.3}",
            fp.variation
        ),
    ))
}

const CHECKS: [Check; 13] = [
    pi_tables, jacobi, f_family, baker, witness, limit, c_map, jacobian, inclusion, doubling,
    poincare, tychonoff, distances,
];

pub fn run(cfg: &RunConfig, a: &SuiteArgs) -> Result<Outcome, Failure> {
    if let Some(bad) = a.only.iter().find(|&&i| i == 0 || i > CHECKS.len()) {
        return Err(Failure::usage(format!("no criterion {bad}")));
    }
    let ctx = Ctx {
        quick: a.quick,
        seed: cfg.seed,
        metric: cfg.metric,
    };
    let mut out = Vec::new();
    for (k, check) in CHECKS.iter().enumerate() {
        let id = k + 1;
        if !a.only.is_empty() && !a.only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = check(&ctx).unwrap_or_else(|err| (false, format!("error: {err}")));
        out.push(Criterion {
            id,
            passed,
            detail,
            seconds: cfg.timestamp.then(|| start.elapsed().as_secs_f64()),
        });
    }
    let mut table = Table::new(&["criterion", "passed", "detail"]);
    for c in &out {
        table.push([c.id.to_string(), c.passed.to_string(), c.detail.clone()]);
    }
    Outcome::new(out.iter().all(|c| c.passed), &out, table)
}
