use std::path::Path;

use serde::Serialize;
use serde_json::json;

use liebox_core::approx_exp::CommutatorFrame;
use liebox_core::ballbox::{
    doubling_ratio, inclusion_check, is_eta_maximal, jacobian_comparability, poincare_suite,
    poincare_suite_functions, select_maximal, BallSampler, InclusionConfig, Membership,
};
use liebox_core::fit::{geometric_grid, loglog_slope};
use liebox_core::free_lie::{
    check_baker, sweep_f, sweep_generalized_jacobi, sweep_j2, sweep_placement_bracket,
    sweep_signed_expansion,
};
use liebox_core::linalg_mp::{
    lambda_sweep, min_norm_solve, parse_csv_matrix, tychonoff_solve, RANK_TOL,
};
use liebox_core::metric::{DistanceKind, MetricEstimator};
use liebox_core::nc_poly::{is_trivial, NcPoly, NcPolySpec};
use liebox_core::perm_words::{pi_table as core_pi_table, Word};
use liebox_core::poly::Poly;
use liebox_core::vfield::parse_point;

use crate::config::RunConfig;
use crate::report::{Outcome, Table};
use crate::Failure;
use crate::{
    BallboxArgs, BracketArgs, DistanceArgs, DoublingArgs, EmapArgs, Expect, Family, FlowArgs,
    IdentitiesArgs, LimitArgs, MembershipArg, PiTableArgs, PinvArgs, PoincareArgs, WitnessArgs,
};

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::runtime(e.to_string())
}

fn point(s: &str, n: usize, what: &str) -> Result<Vec<f64>, Failure> {
    let p = parse_point(s).map_err(usage)?;
    if p.len() != n {
        return Err(usage(format!(
            "{what} has {} coordinates, the model has {n}",
            p.len()
        )));
    }
    Ok(p)
}

fn word(s: &str) -> Result<Word, Failure> {
    s.parse::<Word>().map_err(usage)
}

fn fmt_point(p: &[f64]) -> String {
    p.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn positive(v: f64, what: &str) -> Result<(), Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("{what} must be positive, got {v}")))
    }
}

pub fn pi_table(a: &PiTableArgs) -> Result<Outcome, Failure> {
    let t = core_pi_table(a.order).map_err(usage)?;
    let mut table = Table::new(&["permutation", "coefficient"]);
    for (p, c) in &t.entries {
        table.push([p.to_string(), c.to_string()]);
    }
    let body = json!({
        "order": t.order,
        "nonzero": t.nonzero_count(),
        "entries": t.entries.iter().map(|(p, c)| json!({"permutation": p.to_string(), "coefficient": c})).collect::<Vec<_>>(),
    });
    Outcome::new(true, &body, table)
}

pub fn identities(a: &IdentitiesArgs) -> Result<Outcome, Failure> {
    if a.alphabet == 0 || a.alphabet > 9 {
        return Err(usage("--alphabet must be in 1..=9"));
    }
    if let Family::Baker = a.family {
        let checks = check_baker(1, 2).map_err(runtime)?;
        let mut table = Table::new(&["identity", "holds", "residual_terms"]);
        for c in &checks {
            table.push([
                c.name.clone(),
                c.holds.to_string(),
                c.residual_terms.to_string(),
            ]);
        }
        let passed = checks.iter().all(|c| c.holds);
        return Outcome::new(
            passed,
            &json!({ "family": "baker", "checks": checks }),
            table,
        );
    }
    let rep = match a.family {
        Family::GeneralizedJacobi => {
            sweep_generalized_jacobi(a.alphabet, a.max_degree.unwrap_or(6))
        }
        Family::J2 => sweep_j2(a.alphabet, a.max_degree.unwrap_or(6)),
        Family::F => sweep_f(a.max_degree.unwrap_or(5), 4, 1),
        Family::Placement => sweep_placement_bracket(a.alphabet, a.max_degree.unwrap_or(4)),
        Family::Signed => sweep_signed_expansion(a.alphabet, a.max_degree.unwrap_or(5)),
        Family::Baker => unreachable!(),
    };
    let mut table = Table::new(&["family", "instances", "failures", "passed"]);
    table.push([
        rep.family.clone(),
        rep.instances.to_string(),
        rep.failures.len().to_string(),
        rep.passed().to_string(),
    ]);
    Outcome::new(rep.passed(), &rep, table)
}

fn read(p: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))
}

pub fn witness(a: &WitnessArgs) -> Result<Outcome, Failure> {
    let spec: NcPolySpec = serde_json::from_str(&read(&a.poly)?)
        .map_err(|e| usage(format!("{}: {e}", a.poly.display())))?;
    let q = NcPoly::from_spec(&spec).map_err(usage)?;
    let rep = is_trivial(&q).map_err(runtime)?;
    let verdict = if rep.trivial {
        Expect::Trivial
    } else {
        Expect::Nontrivial
    };
    let passed = a.expect.map_or(true, |e| e == verdict);
    let mut table = Table::new(&[
        "trivial",
        "components",
        "certificate_perm",
        "certificate_coeff",
    ]);
    let (perm, coeff) = rep
        .certificate
        .as_ref()
        .map_or((String::new(), String::new()), |c| {
            (c.perm.to_string(), c.coeff.clone())
        });
    table.push([
        rep.trivial.to_string(),
        rep.components.to_string(),
        perm,
        coeff,
    ]);
    Outcome::new(passed, &rep, table)
}

pub fn bracket(cfg: &RunConfig, a: &BracketArgs) -> Result<Outcome, Failure> {
    let sys = cfg.system()?;
    let w = word(&a.word)?;
    let f = sys.commutator_coeffs(&w).map_err(usage)?;
    let components: Vec<String> = f.components.iter().map(|c| c.to_string()).collect();
    let value = match &a.at {
        Some(s) => Some(f.eval(&point(s, sys.n(), "--at")?)),
        None => None,
    };
    let mut table = Table::new(&["component", "polynomial", "value"]);
    for (i, c) in components.iter().enumerate() {
        table.push([
            (i + 1).to_string(),
            c.clone(),
            value.as_ref().map_or(String::new(), |v| v[i].to_string()),
        ]);
    }
    let body = json!({ "model": sys.name(), "word": w.to_string(), "components": components, "value": value });
    Outcome::new(true, &body, table)
}

pub fn flow(cfg: &RunConfig, a: &FlowArgs) -> Result<Outcome, Failure> {
    let sys = cfg.system()?;
    if a.field == 0 || a.field > sys.m() {
        return Err(usage(format!("--field must be in 1..={}", sys.m())));
    }
    let x = point(&a.at, sys.n(), "--at")?;
    let y = sys.flow(a.field, a.time, &x).map_err(runtime)?;
    let mut table = Table::new(&["coordinate", "start", "end"]);
    for i in 0..x.len() {
        table.push([(i + 1).to_string(), x[i].to_string(), y[i].to_string()]);
    }
    Outcome::new(
        true,
        &json!({ "model": sys.name(), "start": x, "end": y }),
        table,
    )
}

pub fn limit_check(cfg: &RunConfig, a: &LimitArgs) -> Result<Outcome, Failure> {
    let sys = cfg.system()?;
    let w = word(&a.word)?;
    if a.psi == 0 || a.psi > sys.n() {
        return Err(usage(format!("--psi must be in 1..={}", sys.n())));
    }
    positive(a.t_min, "--t-min")?;
    if !(a.t_max > a.t_min) || a.points < 2 {
        return Err(usage("need t_min < t_max and at least two points"));
    }
    let x = point(&a.at, sys.n(), "--at")?;
    let psi = Poly::var(sys.n(), a.psi - 1);
    let ts = geometric_grid(a.t_min, a.t_max, a.points);
    let fit = sys.bracket_limit_fit(&w, &psi, &x, &ts).map_err(runtime)?;
    let passed = match a.expect_slope {
        Some(e) => fit.slope.is_some_and(|s| (s - e).abs() <= a.slope_tol),
        None => true,
    };
    let mut table = Table::new(&["t", "quotient", "error"]);
    for s in &fit.samples {
        table.push([s.t, s.quotient, s.error]);
    }
    Outcome::new(passed, &fit, table)
}

fn frame_indices(frame: &CommutatorFrame, words: &[String]) -> Result<Vec<usize>, Failure> {
    words
        .iter()
        .map(|s| {
            let w = word(s)?;
            frame
                .index_of(&w)
                .ok_or_else(|| usage(format!("word {w} is not a commutator of the model")))
        })
        .collect()
}

pub fn emap(cfg: &RunConfig, a: &EmapArgs) -> Result<Outcome, Failure> {
    let f = cfg.frame()?;
    let x = point(&a.center, f.n(), "--center")?;
    positive(a.radius, "--radius")?;
    let idx = if a.frame.is_empty() {
        select_maximal(&f, &x, a.radius, 0.5)
            .map_err(runtime)?
            .frame
    } else {
        frame_indices(&f, &a.frame)?
    };
    if idx.len() != f.n() {
        return Err(usage(format!("a frame needs {} words", f.n())));
    }
    let h = match &a.h {
        Some(s) => point(s, f.n(), "--h")?,
        None => vec![0.0; f.n()],
    };
    let p = f.e_map(&idx, &x, a.radius, &h).map_err(runtime)?;
    let jac = f.jacobian_e(&idx, &x, a.radius, &h).map_err(runtime)?;
    let box_norm = f.box_norm(&h, &idx);
    let words: Vec<String> = idx.iter().map(|&j| f.word(j).to_string()).collect();
    let mut table = Table::new(&["row", "point", "jacobian_row"]);
    for i in 0..f.n() {
        let row: Vec<f64> = jac.matrix.row(i).iter().copied().collect();
        table.push([(i + 1).to_string(), p[i].to_string(), fmt_point(&row)]);
    }
    #[derive(Serialize)]
    struct Body<'a> {
        frame: Vec<String>,
        h: &'a [f64],
        point: &'a [f64],
        jacobian: &'a liebox_core::approx_exp::JacobianE,
        det: f64,
        box_norm: f64,
    }
    let body = Body {
        frame: words,
        h: &h,
        point: &p,
        jacobian: &jac,
        det: jac.det,
        box_norm,
    };
    Outcome::new(true, &body, table)
}

pub fn ballbox(cfg: &RunConfig, a: &BallboxArgs) -> Result<Outcome, Failure> {
    let f = cfg.frame()?;
    let x = point(&a.center, f.n(), "--center")?;
    positive(a.radius, "--radius")?;
    let best = select_maximal(&f, &x, a.radius, a.eta).map_err(usage)?;
    let check = is_eta_maximal(&f, &best.frame, &x, a.radius, a.eta).map_err(runtime)?;
    let comp = jacobian_comparability(&f, &best.frame, &x, a.radius, a.bound, a.samples, cfg.seed)
        .map_err(runtime)?;
    let icfg = InclusionConfig {
        eps: a.eps,
        c: a.c,
        samples: a.samples,
        seed: cfg.seed,
        ..InclusionConfig::default()
    };
    let inc = inclusion_check(&f, &best.frame, &x, a.radius, &icfg).map_err(usage)?;
    let passed =
        check.eta_maximal && comp.min_ratio >= 0.5 && comp.max_ratio <= 2.0 && inc.fraction >= 1.0;
    let mut table = Table::new(&["quantity", "value"]);
    table.push(["frame".to_string(), best.words.join(" ")]);
    table.push(["lambda".to_string(), best.lambda.to_string()]);
    table.push(["det_ratio_min".to_string(), comp.min_ratio.to_string()]);
    table.push(["det_ratio_max".to_string(), comp.max_ratio.to_string()]);
    table.push(["solved_fraction".to_string(), inc.fraction.to_string()]);
    table.push(["collisions".to_string(), inc.collisions.to_string()]);
    let body = json!({ "maximal": best, "comparability": comp, "inclusion": inc });
    Outcome::new(passed, &body, table)
}

pub fn distance(cfg: &RunConfig, a: &DistanceArgs) -> Result<Outcome, Failure> {
    let f = cfg.frame()?;
    let x = point(&a.from, f.n(), "--from")?;
    let y = point(&a.to, f.n(), "--to")?;
    if cfg.metric.segments == 0 {
        return Err(usage("--segments must be positive"));
    }
    let est = MetricEstimator::new(f, cfg.metric);
    let all = match &a.kind {
        Some(k) => {
            let kind: DistanceKind = k.parse().map_err(usage)?;
            est.estimate_chain(kind, &x, &y, cfg.metric.segments, &[])
        }
        None => est.estimate_all(&x, &y),
    };
    let shown: Vec<_> = match &a.kind {
        Some(_) => all.last().into_iter().cloned().collect(),
        None => all,
    };
    let passed = shown.iter().all(|e| e.value.is_finite());
    let mut table = Table::new(&["kind", "value", "status", "segments", "residual"]);
    for e in &shown {
        table.push([
            e.kind.name().to_string(),
            e.value.to_string(),
            serde_json::to_value(e.status)
                .map_err(runtime)?
                .as_str()
                .unwrap_or_default()
                .to_string(),
            e.path.as_ref().map_or(0, |p| p.segments()).to_string(),
            e.residual.to_string(),
        ]);
    }
    Outcome::new(
        passed,
        &json!({ "from": x, "to": y, "estimates": shown }),
        table,
    )
}

pub fn doubling(cfg: &RunConfig, a: &DoublingArgs) -> Result<Outcome, Failure> {
    let f = cfg.frame()?;
    let x = point(&a.center, f.n(), "--center")?;
    positive(a.radius, "--radius")?;
    if a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    let membership = match a.membership {
        MembershipArg::Rho => Membership::Rho,
        MembershipArg::Cc => Membership::Cc,
    };
    let sampler = BallSampler::new(f, membership).with_metric_config(cfg.metric);
    let rep = doubling_ratio(&sampler, &x, a.radius, a.samples, cfg.seed).map_err(runtime)?;
    let passed = rep.ratio.is_finite()
        && a.expect
            .map_or(true, |e| (rep.ratio - e).abs() <= a.rel_tol * e);
    let mut table = Table::new(&["radius", "hits", "volume"]);
    table.push([
        rep.r.to_string(),
        rep.hits_r.to_string(),
        rep.volume_r.to_string(),
    ]);
    table.push([
        (2.0 * rep.r).to_string(),
        rep.hits_2r.to_string(),
        rep.volume_2r.to_string(),
    ]);
    Outcome::new(passed, &rep, table)
}

pub fn poincare(cfg: &RunConfig, a: &PoincareArgs) -> Result<Outcome, Failure> {
    let f = cfg.frame()?;
    let x = point(&a.center, f.n(), "--center")?;
    positive(a.radius, "--radius")?;
    let functions = poincare_suite_functions();
    if functions.iter().any(|p| p.nvars() != f.n()) {
        return Err(usage(format!(
            "the Poincaré suite is defined for 3 variables, the model has {}",
            f.n()
        )));
    }
    let sampler = BallSampler::new(f, Membership::Rho);
    let suite = poincare_suite(
        &sampler, &functions, &x, a.radius, a.enlarge, a.samples, cfg.seed,
    )
    .map_err(runtime)?;
    let passed = suite.reports.iter().all(|r| r.ratio.is_finite());
    let mut table = Table::new(&["function", "lhs", "rhs", "ratio"]);
    for r in &suite.reports {
        table.push([
            r.function.clone(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.ratio.to_string(),
        ]);
    }
    Outcome::new(passed, &suite, table)
}

pub fn pinv(a: &PinvArgs) -> Result<Outcome, Failure> {
    let m = parse_csv_matrix(&read(&a.matrix)?).map_err(usage)?;
    let b: Vec<f64> = parse_csv_matrix(&read(&a.rhs)?)
        .map_err(usage)?
        .iter()
        .copied()
        .collect();
    if let Some(l) = a.lambda {
        positive(l, "--lambda")?;
    }
    let ls = min_norm_solve(&m, &b, RANK_TOL).map_err(usage)?;
    let x_lambda = match a.lambda {
        Some(l) => Some(tychonoff_solve(&m, &b, l).map_err(usage)?),
        None => None,
    };
    let (sweep, slope) = if a.lambda_sweep {
        let lams = geometric_grid(1e-6, 1e-2, a.sweep_points.max(2));
        let s = lambda_sweep(&m, &b, &lams).map_err(usage)?;
        let (ls_, es): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
        (Some(s), loglog_slope(&ls_, &es))
    } else {
        (None, None)
    };
    let passed = match a.expect_slope {
        Some(e) => slope.is_some_and(|s| (s - e).abs() <= 0.1),
        None => true,
    };
    let table = match &sweep {
        Some(s) => {
            let mut t = Table::new(&["lambda", "error"]);
            for (l, e) in s {
                t.push([l, e]);
            }
            t
        }
        None => {
            let mut t = Table::new(&["index", "x_ls", "x_lambda"]);
            for (i, v) in ls.x.iter().enumerate() {
                t.push([
                    i.to_string(),
                    v.to_string(),
                    x_lambda
                        .as_ref()
                        .map_or(String::new(), |x| x[i].to_string()),
                ]);
            }
            t
        }
    };
    let body = json!({
        "min_norm": ls,
        "lambda": a.lambda,
        "x_lambda": x_lambda,
        "sweep": sweep.map(|s| s.into_iter().map(|(l, e)| json!({"lambda": l, "error": e})).collect::<Vec<_>>()),
        "slope": slope,
    });
    Outcome::new(passed, &body, table)
}
