use proptest::prelude::*;

use liebox_core::free_lie::{assoc_bracket, check_jacobi, expand_nested, WordSum};
use liebox_core::nc_poly::{
    from_witness, is_trivial, multilinearize, witness_coefficients, NcPoly,
};
use liebox_core::perm_words::{pi_coefficient, pi_table, Perm, Word};
use liebox_core::poly::rat;

fn perm(max_order: usize) -> impl Strategy<Value = Vec<u8>> {
    (1..=max_order).prop_flat_map(|l| Just((1..=l as u8).collect::<Vec<u8>>()).prop_shuffle())
}

fn word(alphabet: u8, len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Word> {
    prop::collection::vec(1..=alphabet, len).prop_map(|v| Word::new(v).unwrap())
}

/// Nonzero exactly when the smallest letter sits at one end and the rest is
/// again of this shape.
fn peelable(s: &[u8]) -> bool {
    if s.len() <= 1 {
        return true;
    }
    let m = *s.iter().min().unwrap();
    if s[0] == m {
        peelable(&s[1..])
    } else if s[s.len() - 1] == m {
        peelable(&s[..s.len() - 1])
    } else {
        false
    }
}

proptest! {
    #[test]
    fn pi_reversal(images in perm(7)) {
        let p = Perm::new(images).unwrap();
        let l = p.order() as i32;
        let sign = if (l + 1) % 2 == 0 { 1 } else { -1 };
        prop_assert_eq!(pi_coefficient(l as usize, &p).unwrap(), sign * pi_coefficient(l as usize, &p.reversed()).unwrap());
    }

    #[test]
    fn pi_support_shape(images in perm(7)) {
        let p = Perm::new(images.clone()).unwrap();
        let c = pi_coefficient(images.len(), &p).unwrap();
        prop_assert_eq!(c != 0, peelable(&images));
        prop_assert!(c.abs() <= 1);
    }

    #[test]
    fn expansion_of_distinct_letters(images in perm(7)) {
        let e = expand_nested(&Word::new(images.clone()).unwrap()).unwrap();
        prop_assert_eq!(e.len(), 1usize << (images.len() - 1));
        prop_assert!(e.iter().all(|(_, c)| *c == rat(1, 1) || *c == rat(-1, 1)));
    }

    #[test]
    fn letter_bracket_extends_word(i in 1u8..=3, v in word(3, 1..=5)) {
        let lhs = assoc_bracket(&WordSum::word(Word::letter(i)), &expand_nested(&v).unwrap());
        prop_assert_eq!(lhs, expand_nested(&Word::letter(i).concat(&v)).unwrap());
    }

    #[test]
    fn jacobi_vanishes(u in word(3, 1..=2), v in word(3, 1..=2), w in word(3, 1..=2)) {
        prop_assert!(check_jacobi(&u, &v, &w).unwrap().is_zero());
    }
}

fn multilinear(max_p: usize) -> impl Strategy<Value = NcPoly> {
    (1..=max_p)
        .prop_flat_map(|p| {
            prop::collection::vec(
                (
                    Just((1..=p as u8).collect::<Vec<u8>>()).prop_shuffle(),
                    -3i64..=3,
                ),
                1..6,
            )
            .prop_map(move |terms| (p, terms))
        })
        .prop_map(|(p, terms)| {
            let mut q = NcPoly::zero(p);
            for (w, c) in terms {
                q.add_term(w, rat(c, 1));
            }
            q
        })
}

fn sparse(max_p: usize, m: u8) -> impl Strategy<Value = NcPoly> {
    prop::collection::vec((prop::collection::vec(1..=m, 1..=max_p), -2i64..=2), 0..6).prop_map(
        move |terms| {
            let mut q = NcPoly::zero(m as usize);
            for (w, c) in terms {
                q.add_term(w, rat(c, 1));
            }
            q
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn witness_round_trip(q in multilinear(4)) {
        let (vars, b) = witness_coefficients(&q).unwrap();
        prop_assert_eq!(from_witness(q.alphabet(), &vars, &b), q);
    }

    #[test]
    fn trivial_iff_zero(q in sparse(5, 3)) {
        prop_assert_eq!(is_trivial(&q).unwrap().trivial, q.is_zero());
    }
}

proptest! {
    #[test]
    fn multilinearization_keeps_zero_and_nonzero(q in sparse(5, 2), var in 1u8..=2) {
        for (d, comp) in liebox_core::nc_poly::homogeneous_split(&q) {
            if d[var as usize - 1] < 2 {
                continue;
            }
            let ml = multilinearize(&comp, var).unwrap();
            prop_assert!(!ml.is_zero());
            prop_assert_eq!(is_trivial(&ml).unwrap().trivial, false);
            // the same component with every term cancelled
            let mut z = comp.clone();
            for (w, c) in comp.terms() {
                z.add_term(w.clone(), -c.clone());
            }
            prop_assert!(is_trivial(&z).unwrap().trivial);
        }
    }
}

#[test]
fn tables_are_deterministic() {
    for l in 1..=7 {
        let a = pi_table(l).unwrap();
        let b = liebox_core::perm_words::PiCoefficients::new(7)
            .table(l)
            .unwrap();
        assert_eq!(a.entries, b.entries);
    }
}
