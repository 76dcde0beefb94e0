//! Words, permutations and the signed coefficients `π_ℓ(σ)` of the
//! associative expansion of a right-nested commutator.
//!
//! Positions and letters are 1-based. A permutation `σ ∈ S_ℓ` is stored as its
//! image sequence `σ(1)…σ(ℓ)`; applying it to a word `w` gives
//! `w_{σ(1)} … w_{σ(ℓ)}`.
//!
//! The coefficients are defined recursively. `π_1 = 1`, and for `ℓ ≥ 2` a
//! permutation `τ ∈ S_ℓ` falls in one of three cases:
//!
//! * `τ(1) = 1`: `π_ℓ(τ) = π_{ℓ-1}(τ(2)-1, …, τ(ℓ)-1)`;
//! * `τ(ℓ) = 1`: `π_ℓ(τ) = -π_{ℓ-1}(τ(1)-1, …, τ(ℓ-1)-1)`;
//! * otherwise `π_ℓ(τ) = 0`.
//!
//! (In 0-based notation the first case reads `τ(01⋯ℓ) = 0σ(1⋯ℓ)`, the second
//! `τ(01⋯ℓ) = σ(1⋯ℓ)0`; shifting every position by one gives the rule above.)
//! With these values `[A_{w_1},[A_{w_2},…,A_{w_ℓ}]] = Σ_σ π_ℓ(σ) A_{σ_1(w)}⋯A_{σ_ℓ(w)}`.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_ORDER: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PermError {
    #[error("order {order} outside supported range 1..={max}")]
    OrderOutOfRange { order: usize, max: usize },
    #[error("{0:?} is not a permutation of 1..=len")]
    NotAPermutation(Vec<u8>),
    #[error("length mismatch: permutation has {perm} entries, word has {word}")]
    LengthMismatch { perm: usize, word: usize },
    #[error("empty word")]
    EmptyWord,
    #[error("letter {letter} outside alphabet 1..={alphabet}")]
    LetterOutOfRange { letter: u8, alphabet: usize },
    #[error("cannot parse word `{0}`")]
    Parse(String),
}

/// A finite word over the alphabet `{1, …, m}`.
///
/// The empty word is representable (it shows up as the trailing factor `w`
/// in several identities) but [`Word::new`] rejects it.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Word(Vec<u8>);

impl Word {
    pub fn new(letters: Vec<u8>) -> Result<Self, PermError> {
        if letters.is_empty() {
            return Err(PermError::EmptyWord);
        }
        if let Some(&bad) = letters.iter().find(|&&l| l == 0) {
            return Err(PermError::LetterOutOfRange {
                letter: bad,
                alphabet: u8::MAX as usize,
            });
        }
        Ok(Self(letters))
    }

    pub fn over_alphabet(letters: Vec<u8>, alphabet: usize) -> Result<Self, PermError> {
        if let Some(&bad) = letters.iter().find(|&&l| l == 0 || l as usize > alphabet) {
            return Err(PermError::LetterOutOfRange {
                letter: bad,
                alphabet,
            });
        }
        Self::new(letters)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn letter(l: u8) -> Self {
        Self(vec![l])
    }

    /// Word from raw letters without validation; used by the expansion code
    /// where letters come from already validated words.
    pub(crate) fn from_raw(letters: Vec<u8>) -> Self {
        Self(letters)
    }

    pub fn letters(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concat(&self, other: &Word) -> Word {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Word(v)
    }

    pub fn reversed(&self) -> Word {
        Word(self.0.iter().rev().copied().collect())
    }

    pub fn max_letter(&self) -> u8 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    /// All words of length `len` over `{1..alphabet}`, lexicographic order.
    pub fn all_of_length(len: usize, alphabet: usize) -> Vec<Word> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            let mut next = Vec::with_capacity(out.len() * alphabet);
            for w in &out {
                for l in 1..=alphabet as u8 {
                    let mut v: Vec<u8> = w.clone();
                    v.push(l);
                    next.push(v);
                }
            }
            out = next;
        }
        out.into_iter().map(Word).collect()
    }
}

impl fmt::Debug for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Word({self})")
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.iter().all(|&l| l < 10) {
            for l in &self.0 {
                write!(f, "{l}")?;
            }
            Ok(())
        } else {
            let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
            write!(f, "{}", parts.join(","))
        }
    }
}

/// Accepts `"1212"` (single-digit letters) or `"1,12,3"`.
impl FromStr for Word {
    type Err = PermError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let letters: Result<Vec<u8>, ()> = if s.contains(',') {
            s.split(',')
                .map(|p| p.trim().parse::<u8>().map_err(|_| ()))
                .collect()
        } else {
            s.chars()
                .map(|c| c.to_digit(10).map(|d| d as u8).ok_or(()))
                .collect()
        };
        let letters = letters.map_err(|_| PermError::Parse(s.to_string()))?;
        Word::new(letters).map_err(|_| PermError::Parse(s.to_string()))
    }
}

/// A permutation of `{1..ℓ}` as its image sequence.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Perm(Vec<u8>);

impl Perm {
    pub fn new(images: Vec<u8>) -> Result<Self, PermError> {
        let l = images.len();
        let mut seen = vec![false; l + 1];
        for &i in &images {
            let i = i as usize;
            if i == 0 || i > l || seen[i] {
                return Err(PermError::NotAPermutation(images));
            }
            seen[i] = true;
        }
        if l == 0 {
            return Err(PermError::NotAPermutation(images));
        }
        Ok(Self(images))
    }

    pub fn identity(order: usize) -> Self {
        Self((1..=order as u8).collect())
    }

    pub fn images(&self) -> &[u8] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    /// `σ_1⋯σ_ℓ ↦ σ_ℓ⋯σ_1`.
    pub fn reversed(&self) -> Perm {
        Perm(self.0.iter().rev().copied().collect())
    }

    /// All permutations of order `ℓ` in lexicographic order of image sequences.
    pub fn all(order: usize) -> Vec<Perm> {
        let mut cur: Vec<u8> = (1..=order as u8).collect();
        let mut out = vec![Perm(cur.clone())];
        // standard next-permutation
        loop {
            let Some(i) = (0..cur.len().saturating_sub(1))
                .rev()
                .find(|&i| cur[i] < cur[i + 1])
            else {
                break;
            };
            let j = (i + 1..cur.len()).rev().find(|&j| cur[j] > cur[i]).unwrap();
            cur.swap(i, j);
            cur[i + 1..].reverse();
            out.push(Perm(cur.clone()));
        }
        out
    }
}

impl fmt::Debug for Perm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Perm({self})")
    }
}

impl fmt::Display for Perm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Word(self.0.clone()).fmt(f)
    }
}

impl FromStr for Perm {
    type Err = PermError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let w: Word = s.parse()?;
        Perm::new(w.0)
    }
}

/// `σ(w) = w_{σ(1)} … w_{σ(ℓ)}`.
pub fn apply_perm(sigma: &Perm, w: &Word) -> Result<Word, PermError> {
    if sigma.order() != w.len() {
        return Err(PermError::LengthMismatch {
            perm: sigma.order(),
            word: w.len(),
        });
    }
    Ok(Word(sigma.0.iter().map(|&i| w.0[i as usize - 1]).collect()))
}

/// Recursion on the image sequence; `images` must already be a permutation.
fn pi_recursive(images: &[u8]) -> i8 {
    let l = images.len();
    if l == 1 {
        return 1;
    }
    let shifted = |s: &[u8]| -> Vec<u8> { s.iter().map(|&i| i - 1).collect() };
    if images[0] == 1 {
        pi_recursive(&shifted(&images[1..]))
    } else if images[l - 1] == 1 {
        -pi_recursive(&shifted(&images[..l - 1]))
    } else {
        0
    }
}

/// Complete table of `π_ℓ` over `S_ℓ`, lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PiTable {
    pub order: usize,
    pub entries: Vec<(Perm, i8)>,
}

impl PiTable {
    pub fn nonzero(&self) -> impl Iterator<Item = &(Perm, i8)> {
        self.entries.iter().filter(|(_, c)| *c != 0)
    }

    pub fn nonzero_count(&self) -> usize {
        self.nonzero().count()
    }

    pub fn get(&self, sigma: &Perm) -> Option<i8> {
        self.entries
            .binary_search_by(|(p, _)| p.cmp(sigma))
            .ok()
            .map(|i| self.entries[i].1)
    }
}

/// Memoized coefficient tables up to a configurable maximum order.
///
/// Full tables grow like `ℓ!`; the support (the `2^{ℓ-1}` nonzero entries) is
/// generated directly and is what the expansion code uses.
pub struct PiCoefficients {
    max_order: usize,
    tables: Vec<OnceLock<Arc<PiTable>>>,
    supports: Vec<OnceLock<Arc<Vec<(Perm, i8)>>>>,
}

impl PiCoefficients {
    pub fn new(max_order: usize) -> Self {
        Self {
            max_order,
            tables: (0..=max_order).map(|_| OnceLock::new()).collect(),
            supports: (0..=max_order).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Shared instance with [`DEFAULT_MAX_ORDER`].
    pub fn global() -> &'static PiCoefficients {
        static GLOBAL: OnceLock<PiCoefficients> = OnceLock::new();
        GLOBAL.get_or_init(|| PiCoefficients::new(DEFAULT_MAX_ORDER))
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    fn check_order(&self, order: usize) -> Result<(), PermError> {
        if order == 0 || order > self.max_order {
            return Err(PermError::OrderOutOfRange {
                order,
                max: self.max_order,
            });
        }
        Ok(())
    }

    pub fn coefficient(&self, order: usize, sigma: &Perm) -> Result<i8, PermError> {
        self.check_order(order)?;
        if sigma.order() != order {
            return Err(PermError::NotAPermutation(sigma.0.clone()));
        }
        Ok(self
            .table(order)?
            .get(sigma)
            .expect("table covers every permutation"))
    }

    pub fn table(&self, order: usize) -> Result<Arc<PiTable>, PermError> {
        self.check_order(order)?;
        Ok(self.tables[order]
            .get_or_init(|| {
                let entries = Perm::all(order)
                    .into_iter()
                    .map(|p| {
                        let c = pi_recursive(&p.0);
                        (p, c)
                    })
                    .collect();
                Arc::new(PiTable { order, entries })
            })
            .clone())
    }

    /// The nonzero entries of `π_ℓ`, built by prepending/appending the new
    /// smallest position to each support element of order `ℓ-1`.
    pub fn support(&self, order: usize) -> Result<Arc<Vec<(Perm, i8)>>, PermError> {
        self.check_order(order)?;
        if let Some(s) = self.supports[order].get() {
            return Ok(s.clone());
        }
        let built = if order == 1 {
            vec![(Perm(vec![1]), 1)]
        } else {
            let prev = self.support(order - 1)?;
            let mut out = Vec::with_capacity(prev.len() * 2);
            for (p, c) in prev.iter() {
                let lifted: Vec<u8> = p.0.iter().map(|&i| i + 1).collect();
                let mut front = vec![1];
                front.extend_from_slice(&lifted);
                out.push((Perm(front), *c));
                let mut back = lifted;
                back.push(1);
                out.push((Perm(back), -*c));
            }
            out.sort();
            out
        };
        Ok(self.supports[order].get_or_init(|| Arc::new(built)).clone())
    }
}

pub fn pi_coefficient(order: usize, sigma: &Perm) -> Result<i8, PermError> {
    PiCoefficients::global().coefficient(order, sigma)
}

pub fn pi_table(order: usize) -> Result<Arc<PiTable>, PermError> {
    PiCoefficients::global().table(order)
}

pub fn pi_support(order: usize) -> Result<Arc<Vec<(Perm, i8)>>, PermError> {
    PiCoefficients::global().support(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Perm {
        s.parse().unwrap()
    }

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(pi_coefficient(2, &p("12")).unwrap(), 1);
        assert_eq!(pi_coefficient(2, &p("21")).unwrap(), -1);
        assert_eq!(pi_coefficient(3, &p("213")).unwrap(), 0);
        assert_eq!(pi_coefficient(4, &p("4321")).unwrap(), -1);
        assert_eq!(pi_coefficient(1, &p("1")).unwrap(), 1);
    }

    #[test]
    fn coefficient_errors() {
        assert!(matches!(
            pi_coefficient(9, &Perm::identity(9)),
            Err(PermError::OrderOutOfRange { .. })
        ));
        assert!(matches!(
            pi_coefficient(0, &p("1")),
            Err(PermError::OrderOutOfRange { .. })
        ));
        assert!(Perm::new(vec![1, 1, 3]).is_err());
        assert!(Perm::new(vec![1, 4, 2]).is_err());
        assert!(pi_coefficient(3, &p("12")).is_err());
        let small = PiCoefficients::new(3);
        assert!(small.table(4).is_err());
        assert_eq!(small.table(3).unwrap().nonzero_count(), 4);
    }

    #[test]
    fn order_three_and_four_tables() {
        let t3 = pi_table(3).unwrap();
        assert_eq!(t3.entries.len(), 6);
        let nz: Vec<(String, i8)> = t3.nonzero().map(|(p, c)| (p.to_string(), *c)).collect();
        assert_eq!(
            nz,
            vec![
                ("123".into(), 1),
                ("132".into(), -1),
                ("231".into(), -1),
                ("321".into(), 1)
            ]
        );
        let t4 = pi_table(4).unwrap();
        let expected = [
            ("1234", 1),
            ("1243", -1),
            ("1342", -1),
            ("1432", 1),
            ("2341", -1),
            ("2431", 1),
            ("3421", 1),
            ("4321", -1),
        ];
        assert_eq!(t4.nonzero_count(), 8);
        for (s, c) in expected {
            assert_eq!(t4.get(&p(s)), Some(c), "{s}");
        }
    }

    #[test]
    fn support_matches_table_and_count() {
        for order in 1..=7 {
            let table = pi_table(order).unwrap();
            let support = pi_support(order).unwrap();
            assert_eq!(support.len(), 1 << (order - 1));
            let from_table: Vec<(Perm, i8)> = table.nonzero().cloned().collect();
            assert_eq!(&from_table, support.as_ref());
        }
    }

    #[test]
    fn reversal_law() {
        for order in 1..=7 {
            let sign = if order % 2 == 1 { 1 } else { -1 };
            for (sigma, c) in &pi_table(order).unwrap().entries {
                assert_eq!(
                    *c,
                    sign * pi_coefficient(order, &sigma.reversed()).unwrap(),
                    "{sigma}"
                );
            }
        }
    }

    #[test]
    fn support_fixes_an_end_recursively() {
        fn ends_ok(images: &[u8]) -> bool {
            if images.len() == 1 {
                return true;
            }
            let sh: Vec<u8> =
                |s: &[u8]| -> Vec<u8> { s.iter().map(|&i| i - 1).collect() }(if images[0] == 1 {
                    &images[1..]
                } else if images[images.len() - 1] == 1 {
                    &images[..images.len() - 1]
                } else {
                    return false;
                });
            ends_ok(&sh)
        }
        for (sigma, _) in pi_support(6).unwrap().iter() {
            assert!(ends_ok(sigma.images()));
        }
    }

    #[test]
    fn apply_perm_examples() {
        assert_eq!(apply_perm(&p("21"), &w("13")).unwrap(), w("31"));
        assert_eq!(apply_perm(&p("123"), &w("312")).unwrap(), w("312"));
        assert_eq!(apply_perm(&p("231"), &w("123")).unwrap(), w("231"));
        assert!(matches!(
            apply_perm(&p("21"), &w("123")),
            Err(PermError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn word_parsing() {
        assert_eq!(w("1,12,3").letters(), &[1, 12, 3]);
        assert_eq!(w("1212").letters(), &[1, 2, 1, 2]);
        assert!("".parse::<Word>().is_err());
        assert!("1a".parse::<Word>().is_err());
        assert!(Word::over_alphabet(vec![1, 4], 3).is_err());
        assert_eq!(Word::all_of_length(2, 2).len(), 4);
    }

    #[test]
    fn deterministic_tables() {
        let a = PiCoefficients::new(6);
        let b = PiCoefficients::new(6);
        assert_eq!(*a.table(6).unwrap(), *b.table(6).unwrap());
    }
}
