//! Polynomial vector-field systems: exact commutator coefficients, numeric
//! flows, and the flow-based checks built on them.
//!
//! A system has fields `X_j = f_j · ∇`, `j = 1..m`, on `R^n` and a step `s`.
//! For every word `w` with `|w| <= s` the coefficient `f_w` of the nested
//! commutator `X_w` is computed once, exactly, from
//! `f_w = Σ_σ π_ℓ(σ) X_{σ_1(w)}⋯X_{σ_{ℓ-1}(w)} f_{σ_ℓ(w)}`.

pub mod models;
pub mod ode;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::loglog_slope;
use crate::perm_words::{apply_perm, pi_support, PermError, Word, DEFAULT_MAX_ORDER};
use crate::poly::{FieldBasis, Poly, PolyError, PolyMap};
pub use models::{ModelSpec, BUILTIN_MODELS};
pub use ode::{OdeConfig, OdeError, OdeWork};

/// A scalar test function `ψ`.
pub type ScalarField = Poly;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VfError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Perm(#[from] PermError),
    #[error("word {word} is longer than the step {s}")]
    WordTooLong { word: String, s: usize },
    #[error("letter {0} is not a field index")]
    BadLetter(u8),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("time {t} exceeds the flow horizon {horizon}")]
    Horizon { t: f64, horizon: f64 },
    #[error("{count} composed flows exceed the limit {limit}")]
    TooManyFlows { count: usize, limit: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Limits on flow usage: the largest allowed `|t|` for a single flow and the
/// longest allowed composition.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FlowLimits {
    pub horizon: f64,
    pub max_compositions: usize,
}

impl Default for FlowLimits {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            max_compositions: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VectorFieldSystem {
    name: String,
    n: usize,
    s: usize,
    fields: Vec<PolyMap>,
    coeffs: BTreeMap<Word, PolyMap>,
    generators: FieldBasis,
    pub ode: OdeConfig,
    pub limits: FlowLimits,
}

/// `f_w` straight from the π-weighted definition.
fn coefficient_from_definition(fields: &[PolyMap], w: &Word) -> Result<PolyMap, VfError> {
    let n = fields[0].dim();
    let mut out = PolyMap::zero(n);
    for (sigma, c) in pi_support(w.len())?.iter() {
        let sw = apply_perm(sigma, w)?;
        let letters = sw.letters();
        let mut g = fields[*letters.last().unwrap() as usize - 1].clone();
        for &l in letters[..letters.len() - 1].iter().rev() {
            g = g.directional(&fields[l as usize - 1]);
        }
        out = if *c > 0 { out.add(&g) } else { out.sub(&g) };
    }
    Ok(out)
}

impl VectorFieldSystem {
    pub fn new(name: impl Into<String>, fields: Vec<PolyMap>, s: usize) -> Result<Self, VfError> {
        let m = fields.len();
        if m == 0 || m > u8::MAX as usize {
            return Err(VfError::Invalid(format!("need 1..=255 fields, got {m}")));
        }
        if s == 0 || s > DEFAULT_MAX_ORDER {
            return Err(VfError::Invalid(format!(
                "step must be in 1..={DEFAULT_MAX_ORDER}"
            )));
        }
        let n = fields[0].dim();
        if n == 0
            || fields
                .iter()
                .any(|f| f.dim() != n || f.components.iter().any(|c| c.nvars() != n))
        {
            return Err(VfError::Invalid(
                "fields must share a positive dimension".into(),
            ));
        }
        let mut coeffs = BTreeMap::new();
        for len in 1..=s {
            for w in Word::all_of_length(len, m) {
                let f = coefficient_from_definition(&fields, &w)?;
                coeffs.insert(w, f);
            }
        }
        let generators = FieldBasis::new(&fields, n);
        Ok(Self {
            name: name.into(),
            n,
            s,
            fields,
            coeffs,
            generators,
            ode: OdeConfig::default(),
            limits: FlowLimits::default(),
        })
    }

    pub fn builtin(name: &str) -> Result<Self, VfError> {
        let (fields, s) =
            models::builtin(name).ok_or_else(|| VfError::UnknownModel(name.to_string()))?;
        Self::new(name, fields, s)
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self, VfError> {
        let fields = spec.to_fields()?;
        if fields.iter().any(|f| f.dim() != spec.n) {
            return Err(VfError::Invalid("field dimension differs from n".into()));
        }
        Self::new(
            spec.name.clone().unwrap_or_else(|| "custom".into()),
            fields,
            spec.s,
        )
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec::from_fields(Some(self.name.clone()), self.s, &self.fields)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.fields.len()
    }

    pub fn s(&self) -> usize {
        self.s
    }

    /// Coefficients of field `j` (1-based).
    pub fn field(&self, j: usize) -> &PolyMap {
        &self.fields[j - 1]
    }

    pub fn fields(&self) -> &[PolyMap] {
        &self.fields
    }

    pub fn generators(&self) -> &FieldBasis {
        &self.generators
    }

    fn check_word(&self, w: &Word) -> Result<(), VfError> {
        if let Some(&l) = w
            .letters()
            .iter()
            .find(|&&l| l == 0 || l as usize > self.m())
        {
            return Err(VfError::BadLetter(l));
        }
        if w.is_empty() {
            return Err(VfError::Invalid("empty word".into()));
        }
        Ok(())
    }

    /// Exact `f_w` for `|w| <= s`.
    pub fn commutator_coeffs(&self, w: &Word) -> Result<&PolyMap, VfError> {
        self.check_word(w)?;
        self.coeffs.get(w).ok_or_else(|| VfError::WordTooLong {
            word: w.to_string(),
            s: self.s,
        })
    }

    /// All words of length `1..=s`, ordered by length then lexicographically,
    /// paired with their coefficients.
    pub fn words(&self) -> Vec<(Word, &PolyMap)> {
        let mut v: Vec<(Word, &PolyMap)> =
            self.coeffs.iter().map(|(w, f)| (w.clone(), f)).collect();
        v.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then(a.0.cmp(&b.0)));
        v
    }

    /// `X_j g = f_j · ∇g`.
    pub fn horizontal_derivative(&self, j: usize, g: &Poly) -> Poly {
        g.directional(&self.fields[j - 1])
    }

    /// `X_j` applied to each component of `g`.
    pub fn horizontal_derivative_map(&self, j: usize, g: &PolyMap) -> PolyMap {
        g.directional(&self.fields[j - 1])
    }

    /// `X_w^♯ ψ = f_w · ∇ψ`.
    pub fn sharp_derivative(&self, w: &Word, psi: &Poly) -> Result<Poly, VfError> {
        Ok(psi.directional(self.commutator_coeffs(w)?))
    }

    /// `X_w ψ = Σ_σ π(σ) X_{σ_1(w)}⋯X_{σ_ℓ(w)} ψ`, iterated derivatives.
    pub fn iterated_derivative(&self, w: &Word, psi: &Poly) -> Result<Poly, VfError> {
        self.check_word(w)?;
        let mut out = Poly::zero(self.n);
        for (sigma, c) in pi_support(w.len())?.iter() {
            let sw = apply_perm(sigma, w)?;
            let mut g = psi.clone();
            for &l in sw.letters().iter().rev() {
                g = self.horizontal_derivative(l as usize, &g);
            }
            out = if *c > 0 { &out + &g } else { &out - &g };
        }
        Ok(out)
    }

    /// `ad_Z X_w` coefficients: `(Z·∇) f_w − (f_w·∇) Z`.
    pub fn ad_map(&self, z: &PolyMap, w: &Word) -> Result<PolyMap, VfError> {
        Ok(z.lie_bracket(self.commutator_coeffs(w)?))
    }

    pub fn ad(&self, z: &PolyMap, w: &Word, x: &[f64]) -> Result<Vec<f64>, VfError> {
        Ok(self.ad_map(z, w)?.eval(x))
    }

    fn check_time(&self, t: f64) -> Result<(), VfError> {
        if !(t.abs() <= self.limits.horizon) {
            return Err(VfError::Horizon {
                t,
                horizon: self.limits.horizon,
            });
        }
        Ok(())
    }

    /// `e^{t X_j} x` for a generator `j` (1-based).
    pub fn flow(&self, j: usize, t: f64, x: &[f64]) -> Result<Vec<f64>, VfError> {
        if j == 0 || j > self.m() {
            return Err(VfError::BadLetter(j.min(255) as u8));
        }
        self.check_time(t)?;
        let mut y = x.to_vec();
        let mut scratch = self.generators.scratch();
        let mut work = OdeWork::default();
        let b = &self.generators;
        ode::integrate(
            |p, d| b.eval_field(j - 1, p, &mut scratch, d),
            &mut y,
            t,
            self.n,
            &self.ode,
            &mut work,
        )?;
        Ok(y)
    }

    /// Flow of an arbitrary polynomial field.
    pub fn flow_field(&self, field: &PolyMap, t: f64, x: &[f64]) -> Result<Vec<f64>, VfError> {
        self.check_time(t)?;
        let basis = FieldBasis::new(std::slice::from_ref(field), self.n);
        let mut scratch = basis.scratch();
        let mut y = x.to_vec();
        ode::integrate(
            |p, d| basis.eval_field(0, p, &mut scratch, d),
            &mut y,
            t,
            self.n,
            &self.ode,
            &mut OdeWork::default(),
        )?;
        Ok(y)
    }

    /// Flow of `field` from `x` for time `t` together with the pushed-forward
    /// tangent vector `D e^{t field}(x) v`.
    pub fn flow_tangent(
        &self,
        field: &PolyMap,
        t: f64,
        x: &[f64],
        v: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), VfError> {
        self.check_time(t)?;
        let n = self.n;
        let basis = FieldBasis::new(std::slice::from_ref(field), n);
        let mut scratch = basis.scratch();
        let mut jac = vec![0.0; n * n];
        let mut state = x.to_vec();
        state.extend_from_slice(v);
        ode::integrate(
            |p, d| {
                let (dx, dv) = d.split_at_mut(n);
                basis.eval_combination(&[1.0], &p[..n], &mut scratch, dx, Some(&mut jac));
                for i in 0..n {
                    dv[i] = (0..n).map(|k| jac[i * n + k] * p[n + k]).sum();
                }
            },
            &mut state,
            t,
            n,
            &self.ode,
            &mut OdeWork::default(),
        )?;
        let v = state.split_off(n);
        Ok((state, v))
    }

    /// Flow of generator `j` carrying `k` tangent vectors (stored one after
    /// another in `vs`) through the linearized flow.
    pub fn flow_tangents(
        &self,
        j: usize,
        t: f64,
        x: &[f64],
        vs: &mut [f64],
    ) -> Result<Vec<f64>, VfError> {
        if j == 0 || j > self.m() {
            return Err(VfError::BadLetter(j.min(255) as u8));
        }
        self.check_time(t)?;
        let n = self.n;
        let k = vs.len() / n;
        let b = &self.generators;
        let mut scratch = b.scratch();
        let mut coeffs = vec![0.0; self.m()];
        coeffs[j - 1] = 1.0;
        let mut jac = vec![0.0; n * n];
        let mut state = x.to_vec();
        state.extend_from_slice(vs);
        ode::integrate(
            |p, d| {
                let (dx, dv) = d.split_at_mut(n);
                b.eval_combination(&coeffs, &p[..n], &mut scratch, dx, Some(&mut jac));
                for c in 0..k {
                    let v = &p[n + c * n..n + (c + 1) * n];
                    for i in 0..n {
                        dv[c * n + i] = (0..n).map(|l| jac[i * n + l] * v[l]).sum();
                    }
                }
            },
            &mut state,
            t,
            n,
            &self.ode,
            &mut OdeWork::default(),
        )?;
        vs.copy_from_slice(&state[n..]);
        state.truncate(n);
        Ok(state)
    }

    /// Applies generator flows in list order: `steps = [(j, t), …]`.
    pub fn flow_steps(&self, steps: &[(usize, f64)], x: &[f64]) -> Result<Vec<f64>, VfError> {
        if steps.len() > self.limits.max_compositions {
            return Err(VfError::TooManyFlows {
                count: steps.len(),
                limit: self.limits.max_compositions,
            });
        }
        let mut y = x.to_vec();
        for &(j, t) in steps {
            y = self.flow(j, t, &y)?;
        }
        Ok(y)
    }

    /// `Δ^{j_1⋯j_q} x = e^{tX_{j_1}}⋯e^{tX_{j_q}} x` (the flow of `j_q` acts first).
    pub fn compose_delta(&self, js: &[u8], t: f64, x: &[f64]) -> Result<Vec<f64>, VfError> {
        let steps: Vec<(usize, f64)> = js.iter().rev().map(|&j| (j as usize, t)).collect();
        self.flow_steps(&steps, x)
    }

    /// `t^{-ℓ} Σ_σ π_ℓ(σ) ψ(Δ^{σ_ℓ(w)⋯σ_1(w)} x)`.
    pub fn bracket_via_flows(
        &self,
        w: &Word,
        psi: &Poly,
        x: &[f64],
        t: f64,
    ) -> Result<f64, VfError> {
        self.commutator_coeffs(w)?;
        if !(t > 0.0) {
            return Err(VfError::Invalid("t must be positive".into()));
        }
        let mut sum = 0.0;
        for (sigma, c) in pi_support(w.len())?.iter() {
            let sw = apply_perm(sigma, w)?;
            let js: Vec<u8> = sw.letters().iter().rev().copied().collect();
            let y = self.compose_delta(&js, t, x)?;
            sum += *c as f64 * psi.eval(&y);
        }
        Ok(sum / t.powi(w.len() as i32))
    }

    /// Quotients at each `t` against the exact `f_w · ∇ψ(x)` and the
    /// log-log slope of the error.
    pub fn bracket_limit_fit(
        &self,
        w: &Word,
        psi: &Poly,
        x: &[f64],
        ts: &[f64],
    ) -> Result<LimitFit, VfError> {
        let exact = self.sharp_derivative(w, psi)?.eval(x);
        let mut samples = Vec::with_capacity(ts.len());
        for &t in ts {
            let q = self.bracket_via_flows(w, psi, x, t)?;
            samples.push(LimitSample {
                t,
                quotient: q,
                error: (q - exact).abs(),
            });
        }
        let slope = loglog_slope(
            &samples.iter().map(|s| s.t).collect::<Vec<_>>(),
            &samples.iter().map(|s| s.error).collect::<Vec<_>>(),
        );
        Ok(LimitFit {
            exact,
            samples,
            slope,
        })
    }

    /// `F(t) = X_w(ψ ∘ e^{-tZ})(e^{tZ} y) = ∇ψ(y) · D e^{-tZ}(p) f(p)` with
    /// `p = e^{tZ} y`, for a coefficient field `f`.
    fn conjugated_value(
        &self,
        z: &PolyMap,
        f: &PolyMap,
        grad: &[f64],
        y: &[f64],
        t: f64,
    ) -> Result<f64, VfError> {
        let p = self.flow_field(z, t, y)?;
        let (_, v) = self.flow_tangent(z, -t, &p, &f.eval(&p))?;
        Ok(grad.iter().zip(&v).map(|(a, b)| a * b).sum())
    }

    /// Compares `d/dt X_w(ψ e^{-tZ})(e^{tZ}y)` (central differences with
    /// step `h`, and a Richardson extrapolation) with `ad_Z X_w(ψ e^{-tZ})(e^{tZ}y)`.
    pub fn conjugated_derivative_check(
        &self,
        z: &PolyMap,
        w: &Word,
        psi: &Poly,
        y: &[f64],
        t: f64,
        h: f64,
    ) -> Result<ConjugatedCheck, VfError> {
        let fw = self.commutator_coeffs(w)?.clone();
        let ad = self.ad_map(z, w)?;
        let grad: Vec<f64> = psi.gradient().iter().map(|g| g.eval(y)).collect();
        let central = |h: f64| -> Result<f64, VfError> {
            let up = self.conjugated_value(z, &fw, &grad, y, t + h)?;
            let down = self.conjugated_value(z, &fw, &grad, y, t - h)?;
            Ok((up - down) / (2.0 * h))
        };
        let c1 = central(h)?;
        let c2 = central(h / 2.0)?;
        let richardson = (4.0 * c2 - c1) / 3.0;
        let ad_side = self.conjugated_value(z, &ad, &grad, y, t)?;
        Ok(ConjugatedCheck {
            central: c1,
            richardson,
            ad_side,
            residual: (c1 - ad_side).abs(),
            residual_richardson: (richardson - ad_side).abs(),
        })
    }

    /// Taylor polynomial of `t ↦ ψ(Δ^{j_1⋯j_q} x)` through total order
    /// `ℓ-1`: `Σ_{|k|<ℓ} X_{j_q}^{k_q}⋯X_{j_1}^{k_1}ψ(x) t^{|k|}/k!`.
    pub fn taylor_partial_sum(
        &self,
        psi: &Poly,
        js: &[u8],
        x: &[f64],
        t: f64,
        l: usize,
    ) -> Result<f64, VfError> {
        for &j in js {
            if j == 0 || j as usize > self.m() {
                return Err(VfError::BadLetter(j));
            }
        }
        fn rec(
            sys: &VectorFieldSystem,
            js: &[u8],
            i: usize,
            g: &Poly,
            budget: usize,
            x: &[f64],
            t: f64,
            weight: f64,
        ) -> f64 {
            if i == js.len() {
                return g.eval(x) * weight;
            }
            let mut total = 0.0;
            let mut gk = g.clone();
            let mut w = weight;
            for k in 0..=budget {
                if k > 0 {
                    gk = sys.horizontal_derivative(js[i] as usize, &gk);
                    w *= t / k as f64;
                    if gk.is_zero() {
                        break;
                    }
                }
                total += rec(sys, js, i + 1, &gk, budget - k, x, t, w);
            }
            total
        }
        if l == 0 {
            return Ok(0.0);
        }
        Ok(rec(self, js, 0, psi, l - 1, x, t, 1.0))
    }

    /// Remainders `|ψ(Δx) − partial sum|` at each `t` and their fitted order.
    pub fn taylor_composed_flows(
        &self,
        psi: &Poly,
        js: &[u8],
        x: &[f64],
        l: usize,
        ts: &[f64],
    ) -> Result<TaylorFit, VfError> {
        let mut samples = Vec::with_capacity(ts.len());
        for &t in ts {
            let partial = self.taylor_partial_sum(psi, js, x, t, l)?;
            let actual = psi.eval(&self.compose_delta(js, t, x)?);
            samples.push(TaylorSample {
                t,
                partial_sum: partial,
                actual,
                remainder: (actual - partial).abs(),
            });
        }
        let order = loglog_slope(
            &samples.iter().map(|s| s.t).collect::<Vec<_>>(),
            &samples.iter().map(|s| s.remainder).collect::<Vec<_>>(),
        );
        Ok(TaylorFit { samples, order })
    }

    /// `f_w(x)` numerically.
    pub fn eval_coeffs(&self, w: &Word, x: &[f64]) -> Result<Vec<f64>, VfError> {
        Ok(self.commutator_coeffs(w)?.eval(x))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitSample {
    pub t: f64,
    pub quotient: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitFit {
    pub exact: f64,
    pub samples: Vec<LimitSample>,
    /// `None` when fewer than two errors are positive (e.g. exact quotients).
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConjugatedCheck {
    pub central: f64,
    pub richardson: f64,
    pub ad_side: f64,
    pub residual: f64,
    pub residual_richardson: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaylorSample {
    pub t: f64,
    pub partial_sum: f64,
    pub actual: f64,
    pub remainder: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaylorFit {
    pub samples: Vec<TaylorSample>,
    pub order: Option<f64>,
}

/// Parses `"0,0.5,-1"` into a point.
pub fn parse_point(s: &str) -> Result<Vec<f64>, VfError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| VfError::Invalid(format!("bad coordinate `{p}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::geometric_grid;
    use crate::poly::rat;

    fn sys(name: &str) -> VectorFieldSystem {
        VectorFieldSystem::builtin(name).unwrap()
    }

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    fn var(n: usize, k: usize) -> Poly {
        Poly::var(n, k)
    }

    /// Oracle: `f_{jw'} = [f_j, f_{w'}]` by recursion on the first letter.
    fn recursive_coeffs(s: &VectorFieldSystem, w: &Word) -> PolyMap {
        let l = w.letters();
        if l.len() == 1 {
            return s.field(l[0] as usize).clone();
        }
        let rest = recursive_coeffs(s, &Word::from_raw(l[1..].to_vec()));
        s.field(l[0] as usize).lie_bracket(&rest)
    }

    #[test]
    fn horizontal_derivative_examples() {
        let h = sys("heisenberg");
        assert_eq!(
            h.horizontal_derivative(1, &var(3, 2)),
            var(3, 1).scale(&rat(-1, 2))
        );
        assert!(h.horizontal_derivative(2, &Poly::one(3)).is_zero());
        let g = sys("grushin");
        assert_eq!(g.horizontal_derivative(2, &var(2, 1)), var(2, 0));
    }

    #[test]
    fn commutator_coefficients() {
        let h = sys("heisenberg");
        assert_eq!(
            h.commutator_coeffs(&w("12")).unwrap(),
            &PolyMap::coordinate(3, 2)
        );
        assert!(h.commutator_coeffs(&w("11")).unwrap().is_zero());
        assert!(h.commutator_coeffs(&w("121")).is_err());
        assert!(h.commutator_coeffs(&w("13")).is_err());
        let g = sys("grushin");
        assert_eq!(
            g.commutator_coeffs(&w("12")).unwrap(),
            &PolyMap::coordinate(2, 1)
        );
        for name in BUILTIN_MODELS {
            let s = sys(name);
            for (word, f) in s.words() {
                assert_eq!(f, &recursive_coeffs(&s, &word), "{name} {word}");
            }
        }
    }

    #[test]
    fn antisymmetry_and_jacobi_of_coefficients() {
        for name in ["engel", "martinet", "heisenberg"] {
            let s = sys(name);
            let m = s.m() as u8;
            // f_{[u]v} = [f_u, f_v]; antisymmetry for |u|+|v| <= s
            for (u, fu) in s.words() {
                for (v, fv) in s.words() {
                    if u.len() + v.len() > s.s() {
                        continue;
                    }
                    assert_eq!(fu.lie_bracket(fv), fv.lie_bracket(fu).neg());
                }
            }
            let gens: Vec<&PolyMap> = (1..=m as usize).map(|j| s.field(j)).collect();
            for a in &gens {
                for b in &gens {
                    for c in &gens {
                        let cyc = a
                            .lie_bracket(&b.lie_bracket(c))
                            .add(&b.lie_bracket(&c.lie_bracket(a)))
                            .add(&c.lie_bracket(&a.lie_bracket(b)));
                        assert!(cyc.is_zero());
                    }
                }
            }
        }
    }

    #[test]
    fn sharp_equals_iterated_below_step() {
        for name in BUILTIN_MODELS {
            let s = sys(name);
            let n = s.n();
            let mut psi = Poly::zero(n);
            for k in 0..n {
                psi = &psi + &(&var(n, k) * &var(n, (k + 1) % n));
                psi = &psi + &var(n, k).scale(&rat(k as i64 + 1, 3));
            }
            for (word, _) in s.words() {
                if word.len() + 1 > s.s() && s.s() > 1 {
                    continue;
                }
                assert_eq!(
                    s.sharp_derivative(&word, &psi).unwrap(),
                    s.iterated_derivative(&word, &psi).unwrap(),
                    "{name} {word}"
                );
            }
        }
    }

    #[test]
    fn flows_match_closed_forms() {
        let h = sys("heisenberg");
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-14);
        assert!(close(&h.flow(1, 0.7, &[0.0; 3]).unwrap(), &[0.7, 0.0, 0.0]));
        // from (a,b,c): e^{tX1} = (a+t, b, c − bt/2)
        let y = h.flow(1, 0.3, &[0.1, 0.4, -0.2]).unwrap();
        assert!((y[2] - (-0.2 - 0.4 * 0.3 / 2.0)).abs() < 1e-14);
        let f = sys("flat3");
        assert!(close(
            &f.flow(2, -1.5, &[1.0, 1.0, 1.0]).unwrap(),
            &[1.0, -0.5, 1.0]
        ));
        // linear field x∂x
        let lin = PolyMap::new(vec![var(1, 0)]).unwrap();
        let one = VectorFieldSystem::new("lin", vec![lin.clone()], 1).unwrap();
        let y = one.flow_field(&lin, 1.2, &[0.5]).unwrap();
        assert!((y[0] - 0.5 * 1.2f64.exp()).abs() < 1e-9);
        assert!(matches!(
            h.flow(1, 11.0, &[0.0; 3]),
            Err(VfError::Horizon { .. })
        ));
        assert!(matches!(
            h.flow(1, 9.0, &[5.0, 0.0, 0.0]),
            Err(VfError::Ode(OdeError::DomainEscape { .. }))
        ));
    }

    #[test]
    fn flows_are_reversible() {
        for name in BUILTIN_MODELS {
            let s = sys(name);
            let tol = s.ode.atol;
            let x: Vec<f64> = (0..s.n()).map(|k| 0.3 - 0.2 * k as f64).collect();
            for j in 1..=s.m() {
                for t in [-1.0, -0.3, 0.5, 1.0] {
                    let y = s.flow(j, t, &x).unwrap();
                    let back = s.flow(j, -t, &y).unwrap();
                    let err = x
                        .iter()
                        .zip(&back)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    assert!(err <= 10.0 * tol, "{name} j={j} t={t}: {err}");
                }
            }
        }
    }

    #[test]
    fn bracket_quotients() {
        let h = sys("heisenberg");
        for t in [0.1, 0.01] {
            let q = h
                .bracket_via_flows(&w("12"), &var(3, 2), &[0.0; 3], t)
                .unwrap();
            assert!((q - 1.0).abs() < 1e-10);
        }
        let flat = sys("flat2");
        let flat2 = VectorFieldSystem::new("flat2", flat.fields().to_vec(), 2).unwrap();
        for t in [0.3, 0.01] {
            let psi = &(&var(2, 0) * &var(2, 1)) + &var(2, 0);
            let q = flat2
                .bracket_via_flows(&w("12"), &psi, &[0.2, 0.1], t)
                .unwrap();
            assert!(q.abs() < 1e-9, "{q}");
        }
    }

    #[test]
    fn engel_bracket_converges() {
        let e = sys("engel");
        // a ψ linear in x4 makes the quotient exact on this group
        let psi = &(&var(4, 3) + &(&var(4, 2) * &var(4, 0))) + &(&var(4, 3) * &var(4, 1));
        let x = [0.2, -0.1, 0.3, 0.1];
        let word = w("112");
        let fit = e
            .bracket_limit_fit(&word, &psi, &x, &geometric_grid(1e-3, 1e-1, 6))
            .unwrap();
        assert!(fit.exact.abs() > 0.1);
        let slope = fit.slope.unwrap();
        assert!((slope - 1.0).abs() < 0.2, "slope {slope}");
    }

    #[test]
    fn ad_examples() {
        let h = sys("heisenberg");
        let x1 = h.field(1).clone();
        assert_eq!(h.ad(&x1, &w("12"), &[0.3, 0.2, 0.1]).unwrap(), vec![0.0; 3]);
        // ad_{X_j} X_k = f_{jk}
        for j in 1..=2 {
            for k in 1..=2u8 {
                let z = h.field(j).clone();
                assert_eq!(
                    &h.ad_map(&z, &Word::letter(k)).unwrap(),
                    h.commutator_coeffs(&Word::from_raw(vec![j as u8, k]))
                        .unwrap()
                );
            }
        }
        let e = sys("engel");
        let z = e.field(1).clone();
        assert_eq!(
            &e.ad_map(&z, &w("12")).unwrap(),
            e.commutator_coeffs(&w("112")).unwrap()
        );
    }

    #[test]
    fn conjugated_derivative() {
        let h = sys("heisenberg");
        let z = h.field(1).clone();
        let r = h
            .conjugated_derivative_check(&z, &w("2"), &var(3, 2), &[0.1, 0.2, 0.0], 0.3, 1e-3)
            .unwrap();
        assert!(r.residual < 1e-7, "{r:?}");
        let g = sys("grushin");
        let z = g.field(2).clone();
        let r = g
            .conjugated_derivative_check(
                &z,
                &w("1"),
                &(&var(2, 1) * &var(2, 0)),
                &[0.4, 0.1],
                0.2,
                1e-3,
            )
            .unwrap();
        assert!(r.residual < 1e-7, "{r:?}");
        // Z = X_w: both sides vanish
        let z = g.field(1).clone();
        let r = g
            .conjugated_derivative_check(&z, &w("1"), &var(2, 1), &[0.4, 0.1], 0.2, 1e-3)
            .unwrap();
        assert!(r.central.abs() < 1e-8 && r.ad_side.abs() < 1e-12);
    }

    #[test]
    fn conjugated_derivative_second_order_in_h() {
        // Z = ∂x with the field x³∂y: F(t) is a cubic, so central differences
        // are second order
        let x = var(2, 0);
        let cubic = PolyMap::new(vec![Poly::zero(2), &(&x * &x) * &x]).unwrap();
        let s = VectorFieldSystem::new("cubic", vec![PolyMap::coordinate(2, 0), cubic], 2).unwrap();
        let z = s.field(1).clone();
        let hs = [1e-1, 5e-2, 2.5e-2, 1.25e-2];
        let res: Vec<f64> = hs
            .iter()
            .map(|&h| {
                s.conjugated_derivative_check(&z, &w("2"), &var(2, 1), &[0.3, 0.0], 0.2, h)
                    .unwrap()
                    .residual
            })
            .collect();
        let slope = loglog_slope(&hs, &res).unwrap();
        assert!((slope - 2.0).abs() < 0.2, "{slope} {res:?}");
    }

    #[test]
    fn taylor_orders() {
        let ts = geometric_grid(1e-2, 1e-1, 6);
        // single affine flow: order ℓ
        let g = sys("grushin");
        let y = var(2, 1);
        let psi = &(&(&(&y * &y) * &y) * &y) + &var(2, 0);
        for l in 1..=3 {
            let fit = g
                .taylor_composed_flows(&psi, &[2], &[0.5, 0.2], l, &ts)
                .unwrap();
            assert!(
                fit.order.unwrap() >= l as f64 - 0.2,
                "l={l}: {:?}",
                fit.order
            );
        }
        let h = sys("heisenberg");
        let psi = &(&var(3, 2) * &var(3, 0)) + &(&(&var(3, 1) * &var(3, 1)) * &var(3, 1));
        let fit = h
            .taylor_composed_flows(&psi, &[1, 2], &[0.1, 0.2, 0.3], 3, &ts)
            .unwrap();
        assert!(fit.order.unwrap() >= 2.8, "{:?}", fit.order);
        // constant fields: exact once ℓ exceeds deg ψ
        let f = sys("flat2");
        let psi = &(&var(2, 0) * &var(2, 1)) + &var(2, 1);
        let fit = f
            .taylor_composed_flows(&psi, &[1, 2], &[0.3, 0.4], 3, &ts)
            .unwrap();
        assert!(fit.samples.iter().all(|s| s.remainder < 1e-14));
    }

    #[test]
    fn spec_round_trip_and_errors() {
        let h = sys("heisenberg");
        let back = VectorFieldSystem::from_spec(&h.to_spec()).unwrap();
        assert_eq!(back.fields(), h.fields());
        assert!(matches!(
            VectorFieldSystem::builtin("nope"),
            Err(VfError::UnknownModel(_))
        ));
        assert_eq!(parse_point("0, 1.5,-2").unwrap(), vec![0.0, 1.5, -2.0]);
        assert!(parse_point("a").is_err());
    }
}
