//! Sparse multivariate polynomials with exact rational coefficients.
//!
//! `Poly` is the exact object used for symbolic differentiation of vector
//! fields; `PolyMap` is an n-tuple of them (the coefficient vector of a
//! vector field). Numeric work goes through [`FieldBasis`], which compiles a
//! family of maps into a shared monomial table for fast `f64` evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolyError {
    #[error("invalid rational literal `{0}`")]
    BadRational(String),
    #[error("exponent vector has {got} entries, expected {expected}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("component count {got} does not match dimension {expected}")]
    ComponentMismatch { expected: usize, got: usize },
}

/// Parses `"a"`, `"a/b"` or a decimal such as `"-0.25"` into an exact rational.
pub fn parse_rational(s: &str) -> Result<BigRational, PolyError> {
    let s = s.trim();
    let bad = || PolyError::BadRational(s.to_string());
    if let Some((num, den)) = s.split_once('/') {
        let n: BigInt = num.trim().parse().map_err(|_| bad())?;
        let d: BigInt = den.trim().parse().map_err(|_| bad())?;
        if d.is_zero() {
            return Err(bad());
        }
        return Ok(BigRational::new(n, d));
    }
    if let Some((int, frac)) = s.split_once('.') {
        let negative = int.trim_start().starts_with('-');
        let int_part: BigInt = if int.is_empty() || int == "-" || int == "+" {
            BigInt::zero()
        } else {
            int.parse().map_err(|_| bad())?
        };
        if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let frac_part: BigInt = frac.parse().map_err(|_| bad())?;
        let scale = num_traits::pow(BigInt::from(10), frac.len());
        let mut value =
            BigRational::from_integer(int_part.abs()) + BigRational::new(frac_part, scale);
        if negative {
            value = -value;
        }
        return Ok(value);
    }
    let n: BigInt = s.parse().map_err(|_| bad())?;
    Ok(BigRational::from_integer(n))
}

pub fn format_rational(q: &BigRational) -> String {
    if q.denom().is_one() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

pub fn rational_to_f64(q: &BigRational) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

pub fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Exact rational approximation of a finite float (binary expansion is exact).
pub fn f64_to_rational(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap_or_else(BigRational::zero)
}

/// A polynomial in `nvars` commuting variables over the rationals.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, BigRational>,
}

impl fmt::Debug for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (exps, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{}", format_rational(c))?;
            for (i, &e) in exps.iter().enumerate() {
                match e {
                    0 => {}
                    1 => write!(f, "*x{}", i + 1)?,
                    _ => write!(f, "*x{}^{}", i + 1, e)?,
                }
            }
        }
        Ok(())
    }
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: BigRational) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    pub fn one(nvars: usize) -> Self {
        Self::constant(nvars, BigRational::one())
    }

    /// The coordinate function `x_{var+1}` (0-based `var`).
    pub fn var(nvars: usize, var: usize) -> Self {
        let mut exps = vec![0; nvars];
        exps[var] = 1;
        let mut p = Self::zero(nvars);
        p.add_term(exps, BigRational::one());
        p
    }

    pub fn monomial(exps: Vec<u32>, c: BigRational) -> Self {
        let mut p = Self::zero(exps.len());
        p.add_term(exps, c);
        p
    }

    pub fn from_terms<I>(nvars: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (Vec<u32>, BigRational)>,
    {
        let mut p = Self::zero(nvars);
        for (exps, c) in terms {
            if exps.len() != nvars {
                return Err(PolyError::ArityMismatch {
                    expected: nvars,
                    got: exps.len(),
                });
            }
            p.add_term(exps, c);
        }
        Ok(p)
    }

    /// Adds `c * x^exps`, dropping the entry if it cancels.
    pub fn add_term(&mut self, exps: Vec<u32>, c: BigRational) {
        debug_assert_eq!(exps.len(), self.nvars);
        if c.is_zero() {
            return;
        }
        match self.terms.entry(exps) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if e.get().is_zero() {
                    e.remove();
                }
            }
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &BTreeMap<Vec<u32>, BigRational> {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    /// Coefficient of the monomial `x^exps` (zero when absent).
    pub fn coefficient(&self, exps: &[u32]) -> BigRational {
        self.terms
            .get(exps)
            .cloned()
            .unwrap_or_else(BigRational::zero)
    }

    pub fn scale(&self, c: &BigRational) -> Self {
        if c.is_zero() {
            return Self::zero(self.nvars);
        }
        Self {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(e, v)| (e.clone(), v * c)).collect(),
        }
    }

    /// Partial derivative with respect to the 0-based variable `var`.
    pub fn derivative(&self, var: usize) -> Self {
        let mut out = Self::zero(self.nvars);
        for (exps, c) in &self.terms {
            let e = exps[var];
            if e == 0 {
                continue;
            }
            let mut ne = exps.clone();
            ne[var] -= 1;
            out.add_term(ne, c * BigRational::from_integer(BigInt::from(e)));
        }
        out
    }

    pub fn gradient(&self) -> Vec<Poly> {
        (0..self.nvars).map(|k| self.derivative(k)).collect()
    }

    /// Derivative along the vector field with coefficient vector `field`,
    /// i.e. `field · ∇self`.
    pub fn directional(&self, field: &PolyMap) -> Self {
        let mut out = Self::zero(self.nvars);
        for k in 0..self.nvars {
            let d = self.derivative(k);
            if d.is_zero() || field.components[k].is_zero() {
                continue;
            }
            out = &out + &(&d * &field.components[k]);
        }
        out
    }

    pub fn eval_rational(&self, x: &[BigRational]) -> BigRational {
        let mut acc = BigRational::zero();
        for (exps, c) in &self.terms {
            let mut term = c.clone();
            for (xi, &e) in x.iter().zip(exps) {
                if e > 0 {
                    term *= num_traits::pow(xi.clone(), e as usize);
                }
            }
            acc += term;
        }
        acc
    }

    /// Slow direct evaluation; use [`FieldBasis`] in hot loops.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(exps, c)| {
                let mut v = rational_to_f64(c);
                for (xi, &e) in x.iter().zip(exps) {
                    if e > 0 {
                        v *= xi.powi(e as i32);
                    }
                }
                v
            })
            .sum()
    }
}

impl Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &rhs.terms {
            out.add_term(e.clone(), c.clone());
        }
        out
    }
}

impl Sub for &Poly {
    type Output = Poly;
    fn sub(self, rhs: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &rhs.terms {
            out.add_term(e.clone(), -c.clone());
        }
        out
    }
}

impl Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        Poly {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(e, c)| (e.clone(), -c)).collect(),
        }
    }
}

impl Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &rhs.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }
}

/// Coefficient vector `f = (f^1, …, f^n)` of the vector field `f · ∇`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PolyMap {
    pub components: Vec<Poly>,
}

impl PolyMap {
    pub fn new(components: Vec<Poly>) -> Result<Self, PolyError> {
        let n = components.len();
        for c in &components {
            if c.nvars() != n {
                return Err(PolyError::ComponentMismatch {
                    expected: n,
                    got: c.nvars(),
                });
            }
        }
        Ok(Self { components })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            components: (0..n).map(|_| Poly::zero(n)).collect(),
        }
    }

    /// The constant field `∂_{k+1}`.
    pub fn coordinate(n: usize, k: usize) -> Self {
        let mut m = Self::zero(n);
        m.components[k] = Poly::one(n);
        m
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(Poly::is_zero)
    }

    pub fn scale(&self, c: &BigRational) -> Self {
        Self {
            components: self.components.iter().map(|p| p.scale(c)).collect(),
        }
    }

    pub fn neg(&self) -> Self {
        Self {
            components: self.components.iter().map(|p| -p).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Componentwise derivative along `field`: `(field · ∇) self`.
    pub fn directional(&self, field: &PolyMap) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|p| p.directional(field))
                .collect(),
        }
    }

    /// Vector field commutator coefficients `(self·∇)other − (other·∇)self`.
    pub fn lie_bracket(&self, other: &PolyMap) -> Self {
        other.directional(self).sub(&self.directional(other))
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|p| p.eval(x)).collect()
    }

    pub fn eval_rational(&self, x: &[BigRational]) -> Vec<BigRational> {
        self.components.iter().map(|p| p.eval_rational(x)).collect()
    }
}

/// Serialized polynomial term: `{"exps":[..], "coeff":"a/b"}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TermSpec {
    pub exps: Vec<u32>,
    pub coeff: String,
}

impl Poly {
    pub fn from_specs(nvars: usize, specs: &[TermSpec]) -> Result<Self, PolyError> {
        let terms = specs
            .iter()
            .map(|t| Ok((t.exps.clone(), parse_rational(&t.coeff)?)))
            .collect::<Result<Vec<_>, PolyError>>()?;
        Self::from_terms(nvars, terms)
    }

    pub fn to_specs(&self) -> Vec<TermSpec> {
        self.terms
            .iter()
            .map(|(e, c)| TermSpec {
                exps: e.clone(),
                coeff: format_rational(c),
            })
            .collect()
    }
}

/// A family of polynomial maps `R^n → R^n` compiled for fast evaluation of
/// values and Jacobians at `f64` points.
///
/// All monomials appearing in any component or in any partial derivative are
/// collected in one table, so evaluating the whole family at a point costs a
/// single pass over the table plus sparse dot products.
#[derive(Clone, Debug)]
pub struct FieldBasis {
    n: usize,
    max_exp: Vec<u32>,
    monomials: Vec<Vec<(usize, u32)>>,
    /// values[j][i] = sparse (monomial, coeff) list of component i of field j
    values: Vec<Vec<Vec<(usize, f64)>>>,
    /// jac[j][i][k] = d component i / d x_k of field j
    jac: Vec<Vec<Vec<Vec<(usize, f64)>>>>,
}

/// Scratch space reused across evaluations.
#[derive(Clone, Debug, Default)]
pub struct BasisScratch {
    powers: Vec<Vec<f64>>,
    mono: Vec<f64>,
}

impl FieldBasis {
    pub fn new(fields: &[PolyMap], n: usize) -> Self {
        let mut index: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        let mut monomials = Vec::new();
        let mut intern = |exps: &Vec<u32>| -> usize {
            if let Some(&i) = index.get(exps) {
                return i;
            }
            let i = monomials.len();
            monomials.push(
                exps.iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(v, &e)| (v, e))
                    .collect::<Vec<_>>(),
            );
            index.insert(exps.clone(), i);
            i
        };
        let mut compile = |p: &Poly| -> Vec<(usize, f64)> {
            p.terms()
                .iter()
                .map(|(e, c)| (intern(e), rational_to_f64(c)))
                .collect()
        };
        let mut values = Vec::with_capacity(fields.len());
        let mut jac = Vec::with_capacity(fields.len());
        for f in fields {
            assert_eq!(f.dim(), n, "field dimension mismatch");
            values.push(f.components.iter().map(&mut compile).collect());
            jac.push(
                f.components
                    .iter()
                    .map(|p| (0..n).map(|k| compile(&p.derivative(k))).collect())
                    .collect(),
            );
        }
        let mut max_exp = vec![0u32; n];
        for m in &monomials {
            for &(v, e) in m {
                max_exp[v] = max_exp[v].max(e);
            }
        }
        Self {
            n,
            max_exp,
            monomials,
            values,
            jac,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scratch(&self) -> BasisScratch {
        BasisScratch {
            powers: self
                .max_exp
                .iter()
                .map(|&e| vec![1.0; e as usize + 1])
                .collect(),
            mono: vec![0.0; self.monomials.len()],
        }
    }

    fn load(&self, x: &[f64], s: &mut BasisScratch) {
        for (v, pw) in s.powers.iter_mut().enumerate() {
            for e in 1..pw.len() {
                pw[e] = pw[e - 1] * x[v];
            }
        }
        for (slot, m) in s.mono.iter_mut().zip(&self.monomials) {
            let mut v = 1.0;
            for &(var, e) in m {
                v *= s.powers[var][e as usize];
            }
            *slot = v;
        }
    }

    #[inline]
    fn dot(list: &[(usize, f64)], mono: &[f64]) -> f64 {
        list.iter().map(|&(i, c)| c * mono[i]).sum()
    }

    /// Evaluates field `j` at `x` into `out`.
    pub fn eval_field(&self, j: usize, x: &[f64], s: &mut BasisScratch, out: &mut [f64]) {
        self.load(x, s);
        for (o, comp) in out.iter_mut().zip(&self.values[j]) {
            *o = Self::dot(comp, &s.mono);
        }
    }

    /// Evaluates all fields at `x`; `out[j*n + i]` is component `i` of field `j`.
    pub fn eval_all(&self, x: &[f64], s: &mut BasisScratch, out: &mut [f64]) {
        self.load(x, s);
        let n = self.n;
        for (j, field) in self.values.iter().enumerate() {
            for (i, comp) in field.iter().enumerate() {
                out[j * n + i] = Self::dot(comp, &s.mono);
            }
        }
    }

    /// Value and Jacobian of the combination `Σ_j coeffs[j] f_j` at `x`.
    /// `jac_out` is row-major `n × n`.
    pub fn eval_combination(
        &self,
        coeffs: &[f64],
        x: &[f64],
        s: &mut BasisScratch,
        val_out: &mut [f64],
        jac_out: Option<&mut [f64]>,
    ) {
        self.load(x, s);
        let n = self.n;
        val_out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (i, comp) in self.values[j].iter().enumerate() {
                val_out[i] += c * Self::dot(comp, &s.mono);
            }
        }
        if let Some(jo) = jac_out {
            jo.iter_mut().for_each(|v| *v = 0.0);
            for (j, &c) in coeffs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for i in 0..n {
                    for k in 0..n {
                        let list = &self.jac[j][i][k];
                        if !list.is_empty() {
                            jo[i * n + k] += c * Self::dot(list, &s.mono);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xy() -> (Poly, Poly) {
        (Poly::var(2, 0), Poly::var(2, 1))
    }

    #[test]
    fn parse_forms() {
        assert_eq!(parse_rational("3/4").unwrap(), rat(3, 4));
        assert_eq!(parse_rational("-2").unwrap(), rat(-2, 1));
        assert_eq!(parse_rational("-0.25").unwrap(), rat(-1, 4));
        assert_eq!(parse_rational("1.5").unwrap(), rat(3, 2));
        assert!(parse_rational("1/0").is_err());
        assert!(parse_rational("abc").is_err());
    }

    #[test]
    fn product_and_derivative() {
        let (x, y) = xy();
        let p = &(&x * &x) * &y; // x^2 y
        assert_eq!(p.derivative(0), (&x * &y).scale(&rat(2, 1)));
        assert_eq!(p.derivative(1), &x * &x);
        assert!(Poly::one(2).derivative(0).is_zero());
        assert_eq!((&p - &p), Poly::zero(2));
    }

    #[test]
    fn grushin_bracket() {
        // [∂x, x∂y] = ∂y
        let (x, _) = xy();
        let f1 = PolyMap::coordinate(2, 0);
        let f2 = PolyMap::new(vec![Poly::zero(2), x]).unwrap();
        assert_eq!(f1.lie_bracket(&f2), PolyMap::coordinate(2, 1));
        assert_eq!(f2.lie_bracket(&f1), PolyMap::coordinate(2, 1).neg());
    }

    #[test]
    fn basis_matches_direct_eval() {
        let (x, y) = xy();
        let f = PolyMap::new(vec![&(&x * &y) + &Poly::one(2), &(&y * &y) * &x]).unwrap();
        let g = PolyMap::coordinate(2, 1);
        let basis = FieldBasis::new(&[f.clone(), g], 2);
        let mut s = basis.scratch();
        let pt = [0.3, -1.7];
        let mut v = [0.0; 2];
        let mut j = [0.0; 4];
        basis.eval_combination(&[2.0, -1.0], &pt, &mut s, &mut v, Some(&mut j));
        let direct = f.eval(&pt);
        assert!((v[0] - 2.0 * direct[0]).abs() < 1e-14);
        assert!((v[1] - (2.0 * direct[1] - 1.0)).abs() < 1e-14);
        // d/dx (x y^2) = y^2
        assert!((j[2] - 2.0 * pt[1] * pt[1]).abs() < 1e-14);
    }
}
