//! Noncommutative polynomials `Σ C(k_1..k_p) X_{k_1}⋯X_{k_p}` and an exact
//! triviality test.
//!
//! The test reduces a polynomial to multilinear pieces and evaluates each on
//! the operators `x_j ∂_{j+1}` acting on `ψ = x_{p+1}` in `p+1` variables.
//! Only the ordering `σ` assigned to `x_1∂_2, …, x_p∂_{p+1}` survives, and it
//! produces `x_1`, so the coefficient of `x_1` in the result is `B(σ)`.

use std::collections::BTreeMap;

use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::free_lie::WordSum;
use crate::perm_words::{Perm, Word};
use crate::poly::{format_rational, parse_rational, Poly, PolyError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NcPolyError {
    #[error("letter {letter} outside alphabet 1..={alphabet}")]
    LetterOutOfRange { letter: u8, alphabet: usize },
    #[error("term {word:?} has length {got}, declared degree is {degree}")]
    DegreeMismatch {
        word: Vec<u8>,
        got: usize,
        degree: usize,
    },
    #[error("variable {var} has degree {degree} < 2; nothing to multilinearize")]
    LowDegree { var: u8, degree: u32 },
    #[error("polynomial is not homogeneous in variable {0}")]
    NotHomogeneous(u8),
    #[error("polynomial is not multilinear")]
    NotMultilinear,
    #[error("alphabet too large")]
    AlphabetOverflow,
    #[error(transparent)]
    Coefficient(#[from] PolyError),
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct NcPoly {
    alphabet: usize,
    terms: BTreeMap<Vec<u8>, BigRational>,
}

/// JSON form: `{"degree":p, "alphabet":m, "terms":[{"word":[..],"coeff":"a/b"}]}`.
/// `degree` may be omitted for polynomials of mixed degree.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NcPolySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    pub alphabet: usize,
    pub terms: Vec<NcTermSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NcTermSpec {
    pub word: Vec<u8>,
    pub coeff: String,
}

impl NcPoly {
    pub fn zero(alphabet: usize) -> Self {
        Self {
            alphabet,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_terms<I>(alphabet: usize, terms: I) -> Result<Self, NcPolyError>
    where
        I: IntoIterator<Item = (Vec<u8>, BigRational)>,
    {
        let mut p = Self::zero(alphabet);
        for (w, c) in terms {
            if let Some(&l) = w.iter().find(|&&l| l == 0 || l as usize > alphabet) {
                return Err(NcPolyError::LetterOutOfRange {
                    letter: l,
                    alphabet,
                });
            }
            p.add_term(w, c);
        }
        Ok(p)
    }

    pub fn from_word_sum(ws: &WordSum, alphabet: usize) -> Result<Self, NcPolyError> {
        Self::from_terms(
            alphabet,
            ws.iter().map(|(w, c)| (w.letters().to_vec(), c.clone())),
        )
    }

    pub fn from_spec(spec: &NcPolySpec) -> Result<Self, NcPolyError> {
        let mut terms = Vec::with_capacity(spec.terms.len());
        for t in &spec.terms {
            if let Some(d) = spec.degree {
                if t.word.len() != d {
                    return Err(NcPolyError::DegreeMismatch {
                        word: t.word.clone(),
                        got: t.word.len(),
                        degree: d,
                    });
                }
            }
            terms.push((t.word.clone(), parse_rational(&t.coeff)?));
        }
        Self::from_terms(spec.alphabet, terms)
    }

    pub fn to_spec(&self) -> NcPolySpec {
        let degrees: Vec<usize> = self.terms.keys().map(Vec::len).collect();
        let degree = match degrees.first() {
            Some(&d) if degrees.iter().all(|&e| e == d) => Some(d),
            _ => None,
        };
        NcPolySpec {
            degree,
            alphabet: self.alphabet,
            terms: self
                .terms
                .iter()
                .map(|(w, c)| NcTermSpec {
                    word: w.clone(),
                    coeff: format_rational(c),
                })
                .collect(),
        }
    }

    pub fn add_term(&mut self, w: Vec<u8>, c: BigRational) {
        if c.is_zero() {
            return;
        }
        let slot = self
            .terms
            .entry(w.clone())
            .or_insert_with(BigRational::zero);
        *slot += c;
        if slot.is_zero() {
            self.terms.remove(&w);
        }
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn terms(&self) -> &BTreeMap<Vec<u8>, BigRational> {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, w: &[u8]) -> BigRational {
        self.terms.get(w).cloned().unwrap_or_else(BigRational::zero)
    }

    /// Degree in each variable of a word, indexed `0..alphabet`.
    fn multidegree_of(&self, w: &[u8]) -> Vec<u32> {
        let mut d = vec![0u32; self.alphabet];
        for &l in w {
            d[l as usize - 1] += 1;
        }
        d
    }

    /// `Some(d)` when every term has the same multidegree `d`.
    pub fn multidegree(&self) -> Option<Vec<u32>> {
        let mut it = self.terms.keys().map(|w| self.multidegree_of(w));
        let first = it.next()?;
        it.all(|d| d == first).then_some(first)
    }
}

/// Components of fixed degree in every variable, sorted by multidegree.
pub fn homogeneous_split(p: &NcPoly) -> Vec<(Vec<u32>, NcPoly)> {
    let mut parts: BTreeMap<Vec<u32>, NcPoly> = BTreeMap::new();
    for (w, c) in &p.terms {
        parts
            .entry(p.multidegree_of(w))
            .or_insert_with(|| NcPoly::zero(p.alphabet))
            .add_term(w.clone(), c.clone());
    }
    parts.into_iter().collect()
}

/// `P(U+T) − P(U) − P(T)` where `U` is variable `var` and `T` is the new
/// variable `alphabet + 1`.
pub fn multilinearize(p: &NcPoly, var: u8) -> Result<NcPoly, NcPolyError> {
    if var == 0 || var as usize > p.alphabet {
        return Err(NcPolyError::LetterOutOfRange {
            letter: var,
            alphabet: p.alphabet,
        });
    }
    let t = u8::try_from(p.alphabet + 1).map_err(|_| NcPolyError::AlphabetOverflow)?;
    let mut degree = None;
    for w in p.terms.keys() {
        let d = w.iter().filter(|&&l| l == var).count() as u32;
        if *degree.get_or_insert(d) != d {
            return Err(NcPolyError::NotHomogeneous(var));
        }
    }
    let d = degree.unwrap_or(0);
    if d < 2 {
        return Err(NcPolyError::LowDegree { var, degree: d });
    }
    let mut out = NcPoly::zero(p.alphabet + 1);
    for (w, c) in &p.terms {
        let slots: Vec<usize> = (0..w.len()).filter(|&i| w[i] == var).collect();
        // skip the all-U and all-T assignments
        for mask in 1..(1u64 << d) - 1 {
            let mut word = w.clone();
            for (b, &i) in slots.iter().enumerate() {
                if mask & (1 << b) != 0 {
                    word[i] = t;
                }
            }
            out.add_term(word, c.clone());
        }
    }
    Ok(out)
}

/// Multilinear pieces of a homogeneous polynomial: the lexicographically
/// first variable of degree `>= 2` is multilinearized, the result split into
/// homogeneous components, and each component processed again. Output order
/// is deterministic (depth first, components by multidegree).
pub fn multilinear_components(p: &NcPoly) -> Result<Vec<NcPoly>, NcPolyError> {
    let mut out = Vec::new();
    let mut stack = vec![p.clone()];
    while let Some(cur) = stack.pop() {
        if cur.is_zero() {
            continue;
        }
        let d = cur.multidegree().ok_or(NcPolyError::NotHomogeneous(0))?;
        match d.iter().position(|&e| e >= 2) {
            Some(i) => {
                let m = multilinearize(&cur, i as u8 + 1)?;
                let parts = homogeneous_split(&m);
                stack.extend(parts.into_iter().rev().map(|(_, c)| c));
            }
            None => out.push(cur),
        }
    }
    Ok(out)
}

/// The operators `x_j ∂_{j+1}`, `j = 1..p`, on polynomials in `p+1`
/// variables, with test function `ψ = x_{p+1}`.
#[derive(Clone, Debug)]
pub struct WitnessModel {
    p: usize,
}

impl WitnessModel {
    pub fn new(p: usize) -> Self {
        Self { p }
    }

    pub fn dimension(&self) -> usize {
        self.p + 1
    }

    pub fn psi(&self) -> Poly {
        Poly::var(self.p + 1, self.p)
    }

    /// `x_j ∂_{j+1} g` for `j` in `1..=p`.
    pub fn apply(&self, j: usize, g: &Poly) -> Poly {
        let n = self.p + 1;
        &Poly::var(n, j - 1) * &g.derivative(j)
    }

    /// `Q(X)ψ` where variable `vars[k]` is sent to operator `op[k]`
    /// (1-based operator indices).
    pub fn evaluate(&self, q: &NcPoly, vars: &[u8], op: &[usize]) -> Poly {
        let n = self.p + 1;
        let mut lookup = vec![0usize; q.alphabet + 1];
        for (&v, &o) in vars.iter().zip(op) {
            lookup[v as usize] = o;
        }
        let psi = self.psi();
        let mut total = Poly::zero(n);
        for (w, c) in &q.terms {
            let mut g = psi.clone();
            for &l in w.iter().rev() {
                g = self.apply(lookup[l as usize], &g);
                if g.is_zero() {
                    break;
                }
            }
            total = &total + &g.scale(c);
        }
        total
    }
}

/// Variables of a multilinear polynomial, ascending; every word must be an
/// ordering of exactly these.
fn multilinear_vars(q: &NcPoly) -> Result<Vec<u8>, NcPolyError> {
    let Some(first) = q.terms.keys().next() else {
        return Ok(Vec::new());
    };
    let mut vars = first.clone();
    vars.sort_unstable();
    if vars.windows(2).any(|w| w[0] == w[1]) {
        return Err(NcPolyError::NotMultilinear);
    }
    for w in q.terms.keys() {
        let mut s = w.clone();
        s.sort_unstable();
        if s != vars {
            return Err(NcPolyError::NotMultilinear);
        }
    }
    Ok(vars)
}

/// Coefficients `B(σ)` of a multilinear polynomial recovered by witness
/// evaluation. Variables are relabelled `1..p` in ascending order; `σ` lists
/// which relabelled variable sits at each position.
pub fn witness_coefficients(
    q: &NcPoly,
) -> Result<(Vec<u8>, BTreeMap<Perm, BigRational>), NcPolyError> {
    let vars = multilinear_vars(q)?;
    let p = vars.len();
    let mut out = BTreeMap::new();
    if p == 0 {
        return Ok((vars, out));
    }
    let model = WitnessModel::new(p);
    let mut x1 = vec![0u32; p + 1];
    x1[0] = 1;
    for sigma in Perm::all(p) {
        // X_{σ_j} = x_j ∂_{j+1}: relabelled variable σ_j gets operator j
        let mut op = vec![0usize; p];
        for (j, &s) in sigma.images().iter().enumerate() {
            op[s as usize - 1] = j + 1;
        }
        let result = model.evaluate(q, &vars, &op);
        out.insert(sigma, result.coefficient(&x1));
    }
    Ok((vars, out))
}

/// `Σ_σ B(σ) X_{vars[σ_1]}⋯X_{vars[σ_p]}`.
pub fn from_witness(alphabet: usize, vars: &[u8], b: &BTreeMap<Perm, BigRational>) -> NcPoly {
    let mut out = NcPoly::zero(alphabet);
    for (sigma, c) in b {
        let w = sigma
            .images()
            .iter()
            .map(|&s| vars[s as usize - 1])
            .collect();
        out.add_term(w, c.clone());
    }
    out
}

/// A nonzero witness coefficient proving a polynomial nontrivial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    /// Multidegree of the homogeneous component it came from.
    pub multidegree: Vec<u32>,
    /// Word in the (possibly enlarged) alphabet after multilinearization.
    pub word: Word,
    pub perm: Perm,
    pub coeff: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrivialityReport {
    pub trivial: bool,
    pub components: usize,
    pub certificate: Option<Certificate>,
}

/// Full pipeline: split, multilinearize, evaluate on witnesses.
///
/// The certificate is the lexicographically smallest nonzero `σ` of the
/// first nontrivial component.
pub fn is_trivial(p: &NcPoly) -> Result<TrivialityReport, NcPolyError> {
    let parts = homogeneous_split(p);
    let components = parts.len();
    for (deg, comp) in parts {
        for ml in multilinear_components(&comp)? {
            let (vars, coeffs) = witness_coefficients(&ml)?;
            if let Some((sigma, c)) = coeffs.iter().find(|(_, c)| !c.is_zero()) {
                let word = sigma
                    .images()
                    .iter()
                    .map(|&s| vars[s as usize - 1])
                    .collect();
                return Ok(TrivialityReport {
                    trivial: false,
                    components,
                    certificate: Some(Certificate {
                        multidegree: deg,
                        word: Word::from_raw(word),
                        perm: sigma.clone(),
                        coeff: format_rational(c),
                    }),
                });
            }
        }
    }
    Ok(TrivialityReport {
        trivial: true,
        components,
        certificate: None,
    })
}
