//! Adaptive Dormand–Prince 5(4) integrator for autonomous systems.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("trajectory left the domain box |x_i| <= {bound} at time {t}")]
    DomainEscape { t: f64, bound: f64 },
    #[error("step size underflow at time {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("step budget of {0} exhausted")]
    TooManySteps(usize),
    #[error("non-finite state at time {0}")]
    NonFinite(f64),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct OdeConfig {
    pub atol: f64,
    pub rtol: f64,
    /// Half-width of the domain box `[-bound, bound]^n`.
    pub bound: f64,
    pub max_steps: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            atol: 1e-10,
            rtol: 1e-10,
            bound: 10.0,
            max_steps: 100_000,
        }
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Reusable stage buffers.
#[derive(Default, Clone, Debug)]
pub struct OdeWork {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    ynew: Vec<f64>,
}

impl OdeWork {
    fn ensure(&mut self, n: usize) {
        if self.tmp.len() != n {
            for k in self.k.iter_mut() {
                *k = vec![0.0; n];
            }
            self.tmp = vec![0.0; n];
            self.ynew = vec![0.0; n];
        }
    }
}

/// Integrates `y' = f(y)` from 0 to `t_end` (either sign), in place.
///
/// Only the first `checked` components are tested against the domain box;
/// the rest (e.g. variational components) are unconstrained. The first trial
/// step is the whole interval.
pub fn integrate<F>(
    mut f: F,
    y: &mut [f64],
    t_end: f64,
    checked: usize,
    cfg: &OdeConfig,
    work: &mut OdeWork,
) -> Result<usize, OdeError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if t_end == 0.0 {
        return Ok(0);
    }
    let n = y.len();
    work.ensure(n);
    let span = t_end.abs();
    let dir = t_end.signum();
    let h_min = 1e-14 * span;
    let mut t = 0.0f64;
    let mut h = span;
    let mut steps = 0usize;
    let OdeWork { k, tmp, ynew } = work;
    f(y, &mut k[0]);
    let mut accepted = 0usize;
    while t < span {
        if steps >= cfg.max_steps {
            return Err(OdeError::TooManySteps(cfg.max_steps));
        }
        steps += 1;
        if t + h > span {
            h = span - t;
        }
        let hs = h * dir;
        for i in 0..n {
            tmp[i] = y[i] + hs * A21 * k[0][i];
        }
        f(tmp, &mut k[1]);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A31 * k[0][i] + A32 * k[1][i]);
        }
        f(tmp, &mut k[2]);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
        }
        f(tmp, &mut k[3]);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
        }
        f(tmp, &mut k[4]);
        for i in 0..n {
            tmp[i] = y[i]
                + hs * (A61 * k[0][i]
                    + A62 * k[1][i]
                    + A63 * k[2][i]
                    + A64 * k[3][i]
                    + A65 * k[4][i]);
        }
        f(tmp, &mut k[5]);
        for i in 0..n {
            ynew[i] = y[i]
                + hs * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i] + B6 * k[5][i]);
        }
        f(ynew, &mut k[6]);
        let mut err = 0.0f64;
        for i in 0..n {
            let e = hs
                * (E1 * k[0][i]
                    + E3 * k[2][i]
                    + E4 * k[3][i]
                    + E5 * k[4][i]
                    + E6 * k[5][i]
                    + E7 * k[6][i]);
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            if h <= h_min {
                return Err(OdeError::NonFinite(t * dir));
            }
            h *= 0.2;
            continue;
        }
        if err <= 1.0 {
            t += h;
            y.copy_from_slice(ynew);
            k.swap(0, 6);
            accepted += 1;
            if y[..checked].iter().any(|v| v.abs() > cfg.bound) {
                return Err(OdeError::DomainEscape {
                    t: t * dir,
                    bound: cfg.bound,
                });
            }
            let fac = if err == 0.0 {
                10.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
            };
            h = (h * fac).min(span);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            if h < h_min {
                return Err(OdeError::StepUnderflow { t: t * dir, h });
            }
        }
    }
    Ok(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth() {
        let cfg = OdeConfig::default();
        let mut w = OdeWork::default();
        for t in [1.0, -0.7, 1.5] {
            let mut y = [1.5];
            integrate(|y, d| d[0] = y[0], &mut y, t, 1, &cfg, &mut w).unwrap();
            let exact = 1.5 * f64::exp(t);
            assert!(
                (y[0] - exact).abs() < 1e-8 * exact,
                "{t}: {} vs {exact}",
                y[0]
            );
        }
    }

    #[test]
    fn rotation_is_reversible() {
        let cfg = OdeConfig::default();
        let mut w = OdeWork::default();
        let f = |y: &[f64], d: &mut [f64]| {
            d[0] = -y[1];
            d[1] = y[0];
        };
        let mut y = [1.0, 0.0];
        integrate(f, &mut y, 3.0, 2, &cfg, &mut w).unwrap();
        assert!((y[0] - 3f64.cos()).abs() < 1e-9 && (y[1] - 3f64.sin()).abs() < 1e-9);
        integrate(f, &mut y, -3.0, 2, &cfg, &mut w).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9 && y[1].abs() < 1e-9);
    }

    #[test]
    fn escape_and_blowup() {
        let cfg = OdeConfig::default();
        let mut w = OdeWork::default();
        let mut y = [0.0];
        let r = integrate(|_, d| d[0] = 1.0, &mut y, 20.0, 1, &cfg, &mut w);
        assert!(matches!(r, Err(OdeError::DomainEscape { .. })));
        // y' = y^2 blows up at t = 1; unchecked components must still stop
        let mut y = [1.0];
        let r = integrate(|y, d| d[0] = y[0] * y[0], &mut y, 1.5, 0, &cfg, &mut w);
        assert!(r.is_err());
    }

    #[test]
    fn linear_in_time_takes_one_step() {
        let cfg = OdeConfig::default();
        let mut w = OdeWork::default();
        let mut y = [0.0, 0.0];
        let steps = integrate(
            |y, d| {
                d[0] = 1.0;
                d[1] = y[0];
            },
            &mut y,
            0.5,
            2,
            &cfg,
            &mut w,
        )
        .unwrap();
        assert_eq!(steps, 1);
        assert!((y[0] - 0.5).abs() < 1e-15 && (y[1] - 0.125).abs() < 1e-15);
    }
}
