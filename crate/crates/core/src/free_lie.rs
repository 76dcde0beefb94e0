//! Exact computations in the free associative algebra on letters `1..m`.
//!
//! A [`WordSum`] is a finite rational combination of words, with the
//! concatenation product. The nested commutator of a word `w` is
//! `[A_{w_1},[A_{w_2},…,A_{w_ℓ}]]`; [`expand_nested`] writes it out through
//! the `π_ℓ` coefficients. The identity checks all return the residual
//! (left side minus right side) so callers can inspect what failed.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::BigRational;
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::perm_words::{apply_perm, pi_support, PermError, Word};
use crate::poly::format_rational;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FreeLieError {
    #[error(transparent)]
    Perm(#[from] PermError),
    #[error("F identity with p = l = {0} is known to fail; use f_sum to compute it")]
    KnownFailure(usize),
    #[error("invalid arguments: {0}")]
    Invalid(String),
}

/// Formal combination `Σ c_u u` of words with exact rational coefficients.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct WordSum {
    terms: BTreeMap<Word, BigRational>,
}

impl WordSum {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn word(w: Word) -> Self {
        let mut s = Self::zero();
        s.add_term(w, BigRational::one());
        s
    }

    pub fn from_terms<I: IntoIterator<Item = (Word, BigRational)>>(terms: I) -> Self {
        let mut s = Self::zero();
        for (w, c) in terms {
            s.add_term(w, c);
        }
        s
    }

    pub fn add_term(&mut self, w: Word, c: BigRational) {
        if c.is_zero() {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(w) {
            Entry::Vacant(e) => {
                e.insert(c);
            }
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if e.get().is_zero() {
                    e.remove();
                }
            }
        }
    }

    pub fn add_scaled(&mut self, other: &WordSum, c: &BigRational) {
        for (w, d) in &other.terms {
            self.add_term(w.clone(), d * c);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, w: &Word) -> BigRational {
        self.terms.get(w).cloned().unwrap_or_else(BigRational::zero)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Word, &BigRational)> {
        self.terms.iter()
    }

    pub fn scale(&self, c: &BigRational) -> WordSum {
        let mut out = WordSum::zero();
        out.add_scaled(self, c);
        out
    }

    pub fn neg(&self) -> WordSum {
        self.scale(&-BigRational::one())
    }

    pub fn add(&self, other: &WordSum) -> WordSum {
        let mut out = self.clone();
        out.add_scaled(other, &BigRational::one());
        out
    }

    pub fn sub(&self, other: &WordSum) -> WordSum {
        let mut out = self.clone();
        out.add_scaled(other, &-BigRational::one());
        out
    }

    /// Concatenation product.
    pub fn mul(&self, other: &WordSum) -> WordSum {
        let mut out = WordSum::zero();
        for (a, ca) in &self.terms {
            for (b, cb) in &other.terms {
                out.add_term(a.concat(b), ca * cb);
            }
        }
        out
    }

    /// Replaces every word by its nested commutator expansion.
    pub fn expand_linear(&self) -> Result<WordSum, FreeLieError> {
        let mut out = WordSum::zero();
        for (w, c) in &self.terms {
            out.add_scaled(&expand_nested(w)?, c);
        }
        Ok(out)
    }

    /// `(word, coefficient)` pairs in word order, coefficients as `a/b` strings.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        self.terms
            .iter()
            .map(|(w, c)| (w.to_string(), format_rational(c)))
            .collect()
    }
}

impl fmt::Debug for WordSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for WordSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|(w, c)| format!("{}·{}", format_rational(c), w))
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}

fn int(c: i64) -> BigRational {
    BigRational::from_integer(c.into())
}

/// `[A_{w_1},[A_{w_2},…,A_{w_ℓ}]] = Σ_σ π_ℓ(σ) σ(w)`.
///
/// The empty word expands to the empty sum.
pub fn expand_nested(w: &Word) -> Result<WordSum, FreeLieError> {
    if w.is_empty() {
        return Ok(WordSum::zero());
    }
    let support = pi_support(w.len())?;
    let mut out = WordSum::zero();
    for (sigma, c) in support.iter() {
        out.add_term(apply_perm(sigma, w)?, int(*c as i64));
    }
    Ok(out)
}

/// `ab − ba` in the concatenation algebra.
pub fn assoc_bracket(a: &WordSum, b: &WordSum) -> WordSum {
    a.mul(b).sub(&b.mul(a))
}

/// Cyclic sum `[X_u,[X_v,X_w]] + [X_v,[X_w,X_u]] + [X_w,[X_u,X_v]]`.
pub fn check_jacobi(u: &Word, v: &Word, w: &Word) -> Result<WordSum, FreeLieError> {
    let (xu, xv, xw) = (expand_nested(u)?, expand_nested(v)?, expand_nested(w)?);
    let mut out = assoc_bracket(&xu, &assoc_bracket(&xv, &xw));
    out = out.add(&assoc_bracket(&xv, &assoc_bracket(&xw, &xu)));
    out = out.add(&assoc_bracket(&xw, &assoc_bracket(&xu, &xv)));
    Ok(out)
}

/// `[X_v, X_w] − Σ_σ π_p(σ) X_{σ(v) w}` with `p = |v|`.
pub fn check_generalized_jacobi(v: &Word, w: &Word) -> Result<WordSum, FreeLieError> {
    if v.is_empty() || w.is_empty() {
        return Err(FreeLieError::Invalid("v and w must be nonempty".into()));
    }
    let lhs = assoc_bracket(&expand_nested(v)?, &expand_nested(w)?);
    let mut rhs = WordSum::zero();
    for (sigma, c) in pi_support(v.len())?.iter() {
        let word = apply_perm(sigma, v)?.concat(w);
        rhs.add_scaled(&expand_nested(&word)?, &int(*c as i64));
    }
    Ok(lhs.sub(&rhs))
}

/// `X_v − (1/ℓ) Σ_σ π_ℓ(σ) X_{σ(v)}`.
pub fn check_j2(v: &Word) -> Result<WordSum, FreeLieError> {
    if v.len() < 2 {
        return Err(FreeLieError::Invalid("J2 needs |v| >= 2".into()));
    }
    let l = v.len() as i64;
    let mut rhs = WordSum::zero();
    for (sigma, c) in pi_support(v.len())?.iter() {
        rhs.add_scaled(
            &expand_nested(&apply_perm(sigma, v)?)?,
            &BigRational::new((*c as i64).into(), l.into()),
        );
    }
    Ok(expand_nested(v)?.sub(&rhs))
}

/// The formal words of the F sum, before expansion:
/// `Σ_σ π_ℓ(σ) Σ_{i_1<…<i_p} σ_{i_p}(v)^{b_p} ⋯ σ_{i_1}(v)^{b_1} w`.
pub fn f_formal(p: usize, b: &[u32], v: &Word, w: &Word) -> Result<WordSum, FreeLieError> {
    let l = v.len();
    if l == 0 || p == 0 || p > l || b.len() != p {
        return Err(FreeLieError::Invalid(format!(
            "need 1 <= p <= |v| and |b| = p (p={p}, |v|={l}, |b|={})",
            b.len()
        )));
    }
    if b.iter().sum::<u32>() == 0 {
        return Err(FreeLieError::Invalid("b must have positive sum".into()));
    }
    let support = pi_support(l)?;
    let mut out = WordSum::zero();
    let mut idx: Vec<usize> = (0..p).collect();
    loop {
        for (sigma, c) in support.iter() {
            let sv = apply_perm(sigma, v)?;
            let mut letters = Vec::new();
            for k in (0..p).rev() {
                let letter = sv.letters()[idx[k]];
                letters.extend(std::iter::repeat(letter).take(b[k] as usize));
            }
            letters.extend_from_slice(w.letters());
            out.add_term(Word::from_raw(letters), int(*c as i64));
        }
        // next increasing index tuple
        let Some(k) = (0..p).rev().find(|&k| idx[k] < l - p + k) else {
            break;
        };
        idx[k] += 1;
        for j in k + 1..p {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(out)
}

/// The F sum for any `1 <= p <= ℓ`, expanded into the free algebra.
pub fn f_sum(p: usize, b: &[u32], v: &Word, w: &Word) -> Result<WordSum, FreeLieError> {
    f_formal(p, b, v, w)?.expand_linear()
}

/// The F identity residual; `p = ℓ` is rejected because the identity is
/// false there (the sum is then `±ℓ X_v`-like, see [`f_sum`]).
pub fn check_f(l: usize, p: usize, b: &[u32], v: &Word, w: &Word) -> Result<WordSum, FreeLieError> {
    if v.len() != l {
        return Err(FreeLieError::Invalid(format!(
            "|v| = {} but l = {l}",
            v.len()
        )));
    }
    if p == l {
        return Err(FreeLieError::KnownFailure(l));
    }
    f_sum(p, b, v, w)
}

/// Word obtained from `v` by the left/right placement rule: starting from
/// `v_ℓ`, each earlier letter `v_j` goes in front when `k_j = 1` and at the
/// back when `k_j = -1`. Returns the word and the sign `(-1)^{#{k_j = -1}}`.
pub fn placement(v: &Word, ks: &[i8]) -> (Word, i8) {
    let letters = v.letters();
    let l = letters.len();
    assert_eq!(ks.len() + 1, l, "need |v| - 1 placement choices");
    let mut block = std::collections::VecDeque::with_capacity(l);
    block.push_back(letters[l - 1]);
    let mut sign = 1i8;
    for j in (0..l - 1).rev() {
        if ks[j] == 1 {
            block.push_front(letters[j]);
        } else {
            block.push_back(letters[j]);
            sign = -sign;
        }
    }
    (Word::from_raw(block.into_iter().collect()), sign)
}

fn for_each_choice(n: usize, mut f: impl FnMut(&[i8])) {
    let mut ks = vec![1i8; n];
    for mask in 0u32..(1u32 << n) {
        for (j, k) in ks.iter_mut().enumerate() {
            *k = if mask & (1 << j) == 0 { 1 } else { -1 };
        }
        f(&ks);
    }
}

/// `Σ_k sign(k) · placement(v, k)`, an alternative expansion of `X_v`.
pub fn signed_expansion(v: &Word) -> WordSum {
    let mut out = WordSum::zero();
    if v.is_empty() {
        return out;
    }
    for_each_choice(v.len() - 1, |ks| {
        let (word, sign) = placement(v, ks);
        out.add_term(word, int(sign as i64));
    });
    out
}

/// Formal bracket words of `[w v] + Σ_k sign(k)[placement(v,k), w]`, before
/// expansion. `w` must be a single letter.
pub fn placement_bracket_formal(v: &Word, w: &Word) -> Result<WordSum, FreeLieError> {
    if w.len() != 1 || v.len() < 2 {
        return Err(FreeLieError::Invalid("need |w| = 1 and |v| >= 2".into()));
    }
    let mut out = WordSum::word(w.concat(v));
    for_each_choice(v.len() - 1, |ks| {
        let (word, sign) = placement(v, ks);
        out.add_term(word.concat(w), int(sign as i64));
    });
    Ok(out)
}

pub fn check_placement_bracket(v: &Word, w: &Word) -> Result<WordSum, FreeLieError> {
    placement_bracket_formal(v, w)?.expand_linear()
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub holds: bool,
    pub residual_terms: usize,
}

/// Baker-type identities in two letters `a`, `b`:
/// `X_{abab} = X_{baab} = −X_{abba}`, `X_{abab} = −X_{baba}`,
/// `X_{b³aba} = X_{b²ab²a}` and `X_{ab⁴a} − 2X_{bab³a} + X_{b²ab²a} = 0`.
pub fn check_baker(a: u8, b: u8) -> Result<Vec<IdentityCheck>, FreeLieError> {
    let w = |s: &[u8]| Word::from_raw(s.to_vec());
    let x = |s: &[u8]| expand_nested(&w(s));
    let mut out = Vec::new();
    let mut push = |name: &str, r: WordSum| {
        out.push(IdentityCheck {
            name: name.to_string(),
            holds: r.is_zero(),
            residual_terms: r.len(),
        })
    };
    push("X_abab - X_baab", x(&[a, b, a, b])?.sub(&x(&[b, a, a, b])?));
    push("X_abab + X_abba", x(&[a, b, a, b])?.add(&x(&[a, b, b, a])?));
    push("X_abab + X_baba", x(&[a, b, a, b])?.add(&x(&[b, a, b, a])?));
    push(
        "X_bbbaba - X_bbabba",
        x(&[b, b, b, a, b, a])?.sub(&x(&[b, b, a, b, b, a])?),
    );
    let two = int(2);
    let mut six = x(&[a, b, b, b, b, a])?;
    six.add_scaled(&x(&[b, a, b, b, b, a])?, &-two.clone());
    six.add_scaled(&x(&[b, b, a, b, b, a])?, &BigRational::one());
    push("X_abbbba - 2 X_babbba + X_bbabba", six);
    // the intermediate form before using X_bbbaba = X_bbabba
    let mut mid = x(&[a, b, b, b, b, a])?;
    mid.add_scaled(&x(&[b, b, b, a, b, a])?, &-two.clone());
    mid.add_scaled(&x(&[b, b, a, b, b, a])?, &int(3));
    mid.add_scaled(&x(&[b, a, b, b, b, a])?, &-two);
    push("X_abbbba - 2 X_bbbaba + 3 X_bbabba - 2 X_babbba", mid);
    Ok(out)
}

/// Outcome of an exhaustive sweep; `failures` lists instance labels.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SweepReport {
    pub family: String,
    pub instances: usize,
    pub failures: Vec<String>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.instances > 0
    }
}

fn words_up_to(max_len: usize, alphabet: usize, min_len: usize) -> Vec<Word> {
    (min_len..=max_len)
        .flat_map(|l| Word::all_of_length(l, alphabet))
        .collect()
}

/// The generalized Jacobi identity for all nonempty `v, w` with
/// `|v| + |w| <= max_total`.
pub fn sweep_generalized_jacobi(alphabet: usize, max_total: usize) -> SweepReport {
    let vs = words_up_to(max_total.saturating_sub(1), alphabet, 1);
    let results: Vec<(usize, Vec<String>)> = vs
        .par_iter()
        .map(|v| {
            let mut fails = Vec::new();
            let ws = words_up_to(max_total - v.len(), alphabet, 1);
            for w in &ws {
                match check_generalized_jacobi(v, w) {
                    Ok(r) if r.is_zero() => {}
                    _ => fails.push(format!("v={v} w={w}")),
                }
            }
            (ws.len(), fails)
        })
        .collect();
    collect("generalized_jacobi", results)
}

pub fn sweep_j2(alphabet: usize, max_len: usize) -> SweepReport {
    let vs = words_up_to(max_len, alphabet, 2);
    let results: Vec<(usize, Vec<String>)> = vs
        .par_iter()
        .map(|v| match check_j2(v) {
            Ok(r) if r.is_zero() => (1, vec![]),
            _ => (1, vec![format!("v={v}")]),
        })
        .collect();
    collect("j2", results)
}

/// F identities over generic letters `v = 1 2 … ℓ`, `w` empty or the fresh
/// letter `ℓ+1`; generic letters imply every specialization.
pub fn sweep_f(max_l: usize, max_b_sum: u32, max_w: usize) -> SweepReport {
    let mut cases = Vec::new();
    for l in 2..=max_l {
        let v = Word::from_raw((1..=l as u8).collect());
        for p in 1..l {
            for b in exponent_vectors(p, max_b_sum) {
                for wl in 0..=max_w {
                    let w = Word::from_raw((l as u8 + 1..=(l + wl) as u8).collect());
                    cases.push((l, p, b.clone(), v.clone(), w));
                }
            }
        }
    }
    let results: Vec<(usize, Vec<String>)> = cases
        .par_iter()
        .map(|(l, p, b, v, w)| match check_f(*l, *p, b, v, w) {
            Ok(r) if r.is_zero() => (1, vec![]),
            _ => (1, vec![format!("l={l} p={p} b={b:?} w={w}")]),
        })
        .collect();
    collect("f", results)
}

/// All `b ∈ N^p` with `1 <= Σb <= max_sum`.
pub fn exponent_vectors(p: usize, max_sum: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; p];
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i == cur.len() {
            if cur.iter().sum::<u32>() >= 1 {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur[i] = e;
            rec(i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    rec(0, max_sum, &mut cur, &mut out);
    out
}

/// The placement bracket identity for all `v` with `2 <= |v| <= max_len` and letters `w`.
pub fn sweep_placement_bracket(alphabet: usize, max_len: usize) -> SweepReport {
    let vs = words_up_to(max_len, alphabet, 2);
    let results: Vec<(usize, Vec<String>)> = vs
        .par_iter()
        .map(|v| {
            let mut fails = Vec::new();
            for l in 1..=alphabet as u8 {
                let w = Word::letter(l);
                match check_placement_bracket(v, &w) {
                    Ok(r) if r.is_zero() => {}
                    _ => fails.push(format!("v={v} w={w}")),
                }
            }
            (alphabet, fails)
        })
        .collect();
    collect("placement_bracket", results)
}

/// `signed_expansion(v) == expand_nested(v)` for all `v` up to `max_len`.
pub fn sweep_signed_expansion(alphabet: usize, max_len: usize) -> SweepReport {
    let vs = words_up_to(max_len, alphabet, 1);
    let results: Vec<(usize, Vec<String>)> = vs
        .par_iter()
        .map(|v| match expand_nested(v) {
            Ok(e) if e == signed_expansion(v) => (1, vec![]),
            _ => (1, vec![format!("v={v}")]),
        })
        .collect();
    collect("signed_expansion", results)
}

fn collect(family: &str, results: Vec<(usize, Vec<String>)>) -> SweepReport {
    let mut rep = SweepReport {
        family: family.into(),
        ..Default::default()
    };
    for (n, f) in results {
        rep.instances += n;
        rep.failures.extend(f);
    }
    rep
}
