use std::sync::Arc;

use proptest::prelude::*;

use liebox_core::approx_exp::CommutatorFrame;
use liebox_core::ballbox::{
    builtin_frame, doubling_ratio, express_in_frame, is_eta_maximal, lambda_vector, select_maximal,
    BallSampler, Membership,
};
use liebox_core::metric::RhoBall;
use liebox_core::vfield::{VectorFieldSystem, BUILTIN_MODELS};

fn frame(name: &str) -> CommutatorFrame {
    CommutatorFrame::new(Arc::new(VectorFieldSystem::builtin(name).unwrap()))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn point(n: usize, half: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-half..half, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flows_reverse(m in 0..BUILTIN_MODELS.len(), t in -1.0f64..1.0, seed in point(4, 0.8)) {
        let sys = VectorFieldSystem::builtin(BUILTIN_MODELS[m]).unwrap();
        let x = &seed[..sys.n()];
        for j in 1..=sys.m() {
            let y = sys.flow(j, t, x).unwrap();
            let back = sys.flow(j, -t, &y).unwrap();
            prop_assert!(dist(&back, x) <= 10.0 * sys.ode.atol.max(sys.ode.rtol), "{}", dist(&back, x));
        }
    }

    #[test]
    fn exp_ap_inverts(m in 0..BUILTIN_MODELS.len(), t in -0.5f64..0.5, seed in point(4, 0.5), k in 0usize..64) {
        let f = frame(BUILTIN_MODELS[m]);
        let x = &seed[..f.n()];
        let w = f.word(1 + k % f.q()).clone();
        let y = f.exp_ap(t, &w, x).unwrap();
        let back = f.exp_ap(-t, &w, &y).unwrap();
        prop_assert!(dist(&back, x) <= 10.0 * 1e-10 * w.len() as f64 * 8.0, "{} {}", w, dist(&back, x));
    }

    #[test]
    fn lambda_scaling_is_exact(m in 0..BUILTIN_MODELS.len(), seed in point(4, 1.0), r in 0.01f64..1.0) {
        let f = frame(BUILTIN_MODELS[m]);
        let x = &seed[..f.n()];
        let v = lambda_vector(&f, x, r, None);
        let mut total = 0.0;
        for e in &v.entries {
            prop_assert_eq!(e.scaled, e.lambda * r.powi(e.degree as i32));
            total += e.scaled * e.scaled;
        }
        let nf: f64 = (1..=f.n()).map(|k| k as f64).product();
        prop_assert!((v.norm - (nf * total).sqrt()).abs() <= 1e-12 * v.norm.max(1e-300));
    }

    #[test]
    fn frames_span(m in 0..BUILTIN_MODELS.len(), seed in point(4, 1.0)) {
        let f = frame(BUILTIN_MODELS[m]);
        let x = &seed[..f.n()];
        for i in 0..f.n() {
            let mut e = vec![0.0; f.n()];
            e[i] = 1.0;
            let ex = express_in_frame(&f, &e, x, 1e-8);
            prop_assert!(ex.in_span && ex.residual <= 1e-8, "{:?} {}", x, ex.residual);
        }
    }

    /// A maximal frame stays ½-maximal at points reached by short one-piece
    /// `ρ` paths, and the selection itself is kept when it wins by a margin.
    #[test]
    fn maximality_is_stable(
        m in prop::sample::select(vec!["heisenberg", "grushin", "engel", "martinet"]),
        seed in point(4, 0.6),
        dir in point(4, 1.0),
        r in 0.05f64..0.8,
    ) {
        let f = frame(m);
        let n = f.n();
        let x = &seed[..n];
        let best = select_maximal(&f, x, r, 0.5).unwrap();
        let v = lambda_vector(&f, x, r, Some(2));
        let margin = v.entries.get(1).map_or(0.0, |e| e.scaled.abs() / v.entries[0].scaled.abs());
        let ball = RhoBall::new(&f);
        let q = f.q();
        let d: Vec<f64> = (0..q).map(|j| dir[j % 4] * (j as f64 + 1.0).cos()).collect();
        let len = d.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let c: Vec<f64> = d.iter().zip(f.degrees()).map(|(a, &l)| a / len * (0.01 * r).powi(l as i32)).collect();
        let y = ball.exp_point(&c, x, &mut ball.work()).unwrap();
        let at_y = is_eta_maximal(&f, &best.frame, &y, r, 0.5).unwrap();
        prop_assert!(at_y.eta_maximal, "{m} {x:?} {r}");
        if margin < 0.9 {
            prop_assert_eq!(select_maximal(&f, &y, r, 0.5).unwrap().frame, best.frame);
        }
    }
}

#[test]
fn doubling_agrees_across_seeds() {
    let s = BallSampler::new(builtin_frame("heisenberg").unwrap(), Membership::Rho);
    let a = doubling_ratio(&s, &[0.0; 3], 0.3, 1_000_000, 3).unwrap();
    let b = doubling_ratio(&s, &[0.0; 3], 0.3, 1_000_000, 4).unwrap();
    assert!(
        a.ci_low <= b.ci_high && b.ci_low <= a.ci_high,
        "{a:?} {b:?}"
    );
    assert!((a.ratio - 16.0).abs() < 0.15 * 16.0);
}

#[test]
fn jacobian_columns_match_scaled_fields() {
    for (m, x, r) in [
        ("heisenberg", vec![0.2, 0.1, -0.3], 0.3),
        ("grushin", vec![0.3, -0.1], 0.2),
        ("engel", vec![0.1, 0.2, 0.0, 0.1], 0.3),
    ] {
        let f = frame(m);
        let t = select_maximal(&f, &x, r, 0.5).unwrap();
        let jac = f.jacobian_e(&t.frame, &x, r, &vec![0.0; x.len()]).unwrap();
        for (k, &j) in t.frame.iter().enumerate() {
            let want = f.scaled_field(j, r, &x);
            let got: Vec<f64> = jac.matrix.column(k).iter().copied().collect();
            let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dist(&got, &want) <= 1e-4 * scale + 1e-9, "{m} column {k}");
        }
    }
}
