use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use liebox_core::approx_exp::CommutatorFrame;
use liebox_core::ballbox::{builtin_frame, jacobian_comparability, select_maximal};
use liebox_core::linalg_mp::{min_norm_solve, tychonoff_solve, RANK_TOL};
use liebox_core::metric::{DistanceKind, MetricConfig, MetricEstimator};
use liebox_core::vfield::VectorFieldSystem;

fn estimator(name: &str) -> MetricEstimator {
    let f = CommutatorFrame::new(Arc::new(VectorFieldSystem::builtin(name).unwrap()));
    MetricEstimator::new(f, MetricConfig::default())
}

fn point(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.4f64..0.4, n)
}

const TOL: f64 = 1e-9;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn estimates_are_symmetric(x in point(3), y in point(3)) {
        let e = estimator("heisenberg");
        let a = e.estimate_all(&x, &y);
        let b = e.estimate_all(&y, &x);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p.value - q.value).abs() <= 2.0 * TOL, "{:?} {} {}", p.kind, p.value, q.value);
        }
    }

    #[test]
    fn estimates_are_ordered(x in point(2), y in point(2)) {
        let e = estimator("grushin");
        let d = e.estimate_all(&x, &y);
        prop_assert!(d[1].value <= d[0].value + TOL && d[2].value <= d[1].value + TOL);
    }

    /// The path through `y` is admissible for `(x, z)` once the piece budget
    /// covers both halves.
    #[test]
    fn triangle_by_concatenation(x in point(3), y in point(3), z in point(3)) {
        let e = estimator("heisenberg");
        let segs = e.config.segments;
        for kind in DistanceKind::ALL {
            let xy = e.estimate(kind, &x, &y);
            let yz = e.estimate(kind, &y, &z);
            let (Some(p), Some(q)) = (&xy.path, &yz.path) else {
                return Err(TestCaseError::fail(format!("{kind:?} infeasible")));
            };
            let joined = p.concat(q);
            let end = e.follow(&joined, &x).unwrap();
            let gap = end.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(gap < 1e-6);
            prop_assert!(e.path_r(&joined) <= xy.value + yz.value + 3.0 * TOL);
            let xz = e.estimate_chain(kind, &x, &z, 2 * segs, &[joined]).pop().unwrap();
            prop_assert!(xz.value <= xy.value + yz.value + 3.0 * TOL, "{kind:?}");
        }
    }

    #[test]
    fn engel_estimates_are_feasible(x in point(4), y in point(4)) {
        let e = estimator("engel");
        let d = e.estimate_all(&x, &y);
        for est in &d {
            prop_assert!(est.value.is_finite() && est.residual <= e.config.feas_tol, "{:?}", est.kind);
        }
        prop_assert!(d[1].value <= d[0].value + TOL && d[2].value <= d[1].value + TOL);
    }

    #[test]
    fn more_segments_never_hurt(x in point(3), y in point(3)) {
        let e = estimator("heisenberg");
        for kind in [DistanceKind::Fl, DistanceKind::Cc] {
            let sweep = e.segment_sweep(kind, &x, &y, &[2, 4, 8]);
            for w in sweep.windows(2) {
                prop_assert!(w[1].value <= w[0].value + TOL, "{kind:?} {} -> {}", w[0].value, w[1].value);
            }
        }
    }
}

fn matrix() -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>)> {
    (2usize..6, 2usize..6, 1usize..4).prop_flat_map(|(n, q, r)| {
        let r = r.min(n).min(q);
        (
            prop::collection::vec(-2i32..=2, n * r),
            prop::collection::vec(-2i32..=2, r * q),
            prop::collection::vec(-1.0f64..1.0, n),
        )
            .prop_map(move |(p, f, b)| {
                let p = DMatrix::from_fn(n, r, |i, j| p[i * r + j] as f64);
                let f = DMatrix::from_fn(r, q, |i, j| f[i * q + j] as f64);
                (p * f, b)
            })
    })
}

proptest! {
    #[test]
    fn tychonoff_norm_decreases(ab in matrix()) {
        let (a, b) = ab;
        let mut last = f64::INFINITY;
        for lam in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let x = tychonoff_solve(&a, &b, lam).unwrap();
            let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(nrm <= last * (1.0 + 1e-9) + 1e-12, "{lam}: {nrm} > {last}");
            last = nrm;
        }
    }

    #[test]
    fn min_norm_residual_is_orthogonal(ab in matrix()) {
        let (a, b) = ab;
        let s = min_norm_solve(&a, &b, RANK_TOL).unwrap();
        let res = DVector::from_column_slice(&b) - &a * DVector::from_column_slice(&s.x);
        let g = a.transpose() * res;
        let scale = a.norm() * DVector::from_column_slice(&b).norm() + 1.0;
        prop_assert!(g.amax() <= 1e-10 * scale, "{}", g.amax());
    }
}

#[test]
fn comparability_on_heisenberg_and_grushin() {
    for (m, x, r) in [
        ("heisenberg", vec![0.3, -0.1, 0.2], 0.4),
        ("grushin", vec![0.4, 0.1], 0.1),
        ("grushin", vec![0.02, -0.1], 0.5),
        ("grushin", vec![0.0, 0.0], 0.3),
    ] {
        let f = builtin_frame(m).unwrap();
        let t = select_maximal(&f, &x, r, 0.5).unwrap();
        let c = jacobian_comparability(&f, &t.frame, &x, r, 0.2, 200, 1).unwrap();
        assert!(c.min_ratio >= 0.5 && c.max_ratio <= 2.0, "{m} {x:?} {c:?}");
    }
}
