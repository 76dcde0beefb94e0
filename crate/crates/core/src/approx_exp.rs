//! Approximate exponentials of commutators and the almost exponential map.
//!
//! `C_τ(X_{w_1},…,X_{w_ℓ})` is a composition of `3·2^{ℓ-1} − 2` generator
//! flows (counting merged steps separately), stored as a list of
//! `(generator, time)` steps applied in list order. `exp_ap(t X_w)` runs it
//! with `τ = |t|^{1/ℓ}`, inverted for `t < 0`. The map
//! `E_{I,x,r}(h) = exp_ap(h_1 r^{ℓ_1} Y_{i_1})⋯exp_ap(h_n r^{ℓ_n} Y_{i_n})(x)`
//! applies the `i_n` factor first and realizes the scaling through
//! `τ = |h_k|^{1/ℓ} r`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::perm_words::Word;
use crate::poly::{FieldBasis, PolyMap};
use crate::vfield::{VectorFieldSystem, VfError};

/// A flow step `(generator index, time)`.
/// Below this, `h_k` is treated as zero by [`CommutatorFrame::jacobian_e`].
pub const ZERO_H: f64 = 1e-10;

pub type Step = (usize, f64);

/// The commutators `Y_1..Y_q` of a system: every word of length `1..=s` in
/// (length, lexicographic) order whose last two letters increase strictly.
/// The dropped words give `X_{…aa} = 0` or `X_{…ba} = −X_{…ab}`, so the span is
/// unchanged. Fields that happen to vanish in a model are kept so indices
/// depend only on `m` and `s`.
#[derive(Clone, Debug)]
pub struct CommutatorFrame {
    sys: Arc<VectorFieldSystem>,
    words: Vec<Word>,
    degrees: Vec<usize>,
    coeffs: Vec<PolyMap>,
    basis: FieldBasis,
}

impl CommutatorFrame {
    pub fn new(sys: Arc<VectorFieldSystem>) -> Self {
        let entries: Vec<_> = sys
            .words()
            .into_iter()
            .filter(|(w, _)| {
                let l = w.letters();
                l.len() < 2 || l[l.len() - 2] < l[l.len() - 1]
            })
            .collect();
        let words: Vec<Word> = entries.iter().map(|(w, _)| w.clone()).collect();
        let coeffs: Vec<PolyMap> = entries.iter().map(|(_, f)| (*f).clone()).collect();
        let degrees = words.iter().map(Word::len).collect();
        let basis = FieldBasis::new(&coeffs, sys.n());
        Self {
            sys,
            words,
            degrees,
            coeffs,
            basis,
        }
    }

    pub fn system(&self) -> &VectorFieldSystem {
        &self.sys
    }

    pub fn system_arc(&self) -> Arc<VectorFieldSystem> {
        self.sys.clone()
    }

    pub fn q(&self) -> usize {
        self.words.len()
    }

    pub fn n(&self) -> usize {
        self.sys.n()
    }

    /// Word of `Y_j` (1-based).
    pub fn word(&self, j: usize) -> &Word {
        &self.words[j - 1]
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn degree(&self, j: usize) -> usize {
        self.degrees[j - 1]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn coeffs(&self, j: usize) -> &PolyMap {
        &self.coeffs[j - 1]
    }

    pub fn basis(&self) -> &FieldBasis {
        &self.basis
    }

    pub fn index_of(&self, w: &Word) -> Option<usize> {
        self.words.iter().position(|x| x == w).map(|i| i + 1)
    }

    /// `n × q` matrix whose column `j` is `Y_{j+1}(x)`.
    pub fn values_at(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut buf = vec![0.0; n * self.q()];
        let mut s = self.basis.scratch();
        self.basis.eval_all(x, &mut s, &mut buf);
        DMatrix::from_column_slice(n, self.q(), &buf)
    }

    /// `ℓ(I) = Σ_k ℓ_{i_k}`.
    pub fn degree_sum(&self, frame: &[usize]) -> usize {
        frame.iter().map(|&i| self.degree(i)).sum()
    }

    fn check_frame(&self, frame: &[usize], h: Option<&[f64]>) -> Result<(), VfError> {
        if frame.len() != self.n() {
            return Err(VfError::Invalid(format!(
                "frame has {} entries, expected {}",
                frame.len(),
                self.n()
            )));
        }
        if let Some(&bad) = frame.iter().find(|&&i| i == 0 || i > self.q()) {
            return Err(VfError::Invalid(format!(
                "frame index {bad} outside 1..={}",
                self.q()
            )));
        }
        if let Some(h) = h {
            if h.len() != frame.len() {
                return Err(VfError::Invalid("h and frame lengths differ".into()));
            }
        }
        Ok(())
    }

    /// Steps of `C_τ(X_{w_1},…,X_{w_ℓ})`.
    pub fn c_steps(tau: f64, letters: &[u8]) -> Vec<Step> {
        let first = letters[0] as usize;
        if letters.len() == 1 {
            return vec![(first, tau)];
        }
        let inner = Self::c_steps(tau, &letters[1..]);
        let mut out = Vec::with_capacity(2 * inner.len() + 2);
        out.push((first, tau));
        out.extend_from_slice(&inner);
        out.push((first, -tau));
        out.extend(inverse_steps(&inner));
        out
    }

    pub fn c_map(&self, tau: f64, letters: &[u8], x: &[f64]) -> Result<Vec<f64>, VfError> {
        if letters.is_empty() {
            return Err(VfError::Invalid("empty generator list".into()));
        }
        self.sys.flow_steps(&Self::c_steps(tau, letters), x)
    }

    /// Steps of `exp_ap(t X_w)`.
    pub fn exp_ap_steps(t: f64, w: &Word) -> Vec<Step> {
        let tau = t.abs().powf(1.0 / w.len() as f64);
        let steps = Self::c_steps(tau, w.letters());
        if t >= 0.0 {
            steps
        } else {
            inverse_steps(&steps)
        }
    }

    pub fn exp_ap(&self, t: f64, w: &Word, x: &[f64]) -> Result<Vec<f64>, VfError> {
        self.sys.commutator_coeffs(w)?;
        self.sys.flow_steps(&Self::exp_ap_steps(t, w), x)
    }

    /// Steps of `E_{I,x,r}(h)` in application order.
    pub fn e_steps(&self, frame: &[usize], r: f64, h: &[f64]) -> Vec<Step> {
        let mut out = Vec::new();
        for k in (0..frame.len()).rev() {
            if h[k] == 0.0 {
                continue;
            }
            let w = self.word(frame[k]);
            let l = w.len() as f64;
            let tau = h[k].abs().powf(1.0 / l) * r;
            let steps = Self::c_steps(tau, w.letters());
            if h[k] > 0.0 {
                out.extend(steps);
            } else {
                out.extend(inverse_steps(&steps));
            }
        }
        out
    }

    pub fn e_map(
        &self,
        frame: &[usize],
        x: &[f64],
        r: f64,
        h: &[f64],
    ) -> Result<Vec<f64>, VfError> {
        self.check_frame(frame, Some(h))?;
        self.sys.flow_steps(&self.e_steps(frame, r, h), x)
    }

    /// `‖h‖_I = max_k |h_k|^{1/ℓ_{i_k}}`.
    pub fn box_norm(&self, h: &[f64], frame: &[usize]) -> f64 {
        box_norm(
            h,
            &frame.iter().map(|&i| self.degree(i)).collect::<Vec<_>>(),
        )
    }

    /// Strict membership `‖h‖_I < ε`.
    pub fn in_box(&self, h: &[f64], frame: &[usize], eps: f64) -> bool {
        self.box_norm(h, frame) < eps
    }

    /// Jacobian of `E_{I,x,r}` at `h` by the chain rule: tangent vectors
    /// ride along every flow, and each step adds `(dt/dh_k) X_j` at its end
    /// point. A factor with `|h_k| <= ZERO_H` contributes its limit column
    /// `r^{ℓ} Y_{i_k}` at the point where it would act.
    pub fn jacobian_e(
        &self,
        frame: &[usize],
        x: &[f64],
        r: f64,
        h: &[f64],
    ) -> Result<JacobianE, VfError> {
        self.check_frame(frame, Some(h))?;
        let n = self.n();
        // column k of the Jacobian lives at vs[k*n..(k+1)*n]
        let mut vs = vec![0.0; n * n];
        let mut p = x.to_vec();
        let mut field = vec![0.0; n];
        let mut scratch = self.sys.generators().scratch();
        for k in (0..n).rev() {
            let w = self.word(frame[k]);
            let l = w.len();
            if h[k].abs() <= ZERO_H {
                let col = self.scaled_field(frame[k], r, &p);
                vs[k * n..(k + 1) * n]
                    .iter_mut()
                    .zip(&col)
                    .for_each(|(v, c)| *v += c);
                continue;
            }
            let tau = h[k].abs().powf(1.0 / l as f64) * r;
            let dtau = h[k].signum() * tau / (l as f64 * h[k].abs());
            let steps = Self::c_steps(tau, w.letters());
            let steps = if h[k] > 0.0 {
                steps
            } else {
                inverse_steps(&steps)
            };
            for (j, t) in steps {
                p = self.sys.flow_tangents(j, t, &p, &mut vs)?;
                self.sys
                    .generators()
                    .eval_field(j - 1, &p, &mut scratch, &mut field);
                let d = (t / tau) * dtau;
                for i in 0..n {
                    vs[k * n + i] += d * field[i];
                }
            }
        }
        let jac = DMatrix::from_column_slice(n, n, &vs);
        let det = jac.determinant();
        if !det.is_finite() {
            return Err(VfError::Invalid("non-finite Jacobian".into()));
        }
        Ok(JacobianE { matrix: jac, det })
    }

    /// The leading column term `r^{ℓ_{i_k}} Y_{i_k}(p)`.
    pub fn scaled_field(&self, j: usize, r: f64, p: &[f64]) -> Vec<f64> {
        let scale = r.powi(self.degree(j) as i32);
        self.coeffs(j)
            .eval(p)
            .into_iter()
            .map(|v| v * scale)
            .collect()
    }
}

/// Steps of the inverse composition.
pub fn inverse_steps(steps: &[Step]) -> Vec<Step> {
    steps.iter().rev().map(|&(j, t)| (j, -t)).collect()
}

/// `max_k |h_k|^{1/ℓ_k}`.
pub fn box_norm(h: &[f64], degrees: &[usize]) -> f64 {
    h.iter()
        .zip(degrees)
        .map(|(v, &l)| v.abs().powf(1.0 / l as f64))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct JacobianE {
    #[serde(serialize_with = "serialize_matrix")]
    pub matrix: DMatrix<f64>,
    pub det: f64,
}

/// Row-major nested arrays.
pub fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = (0..m.ncols()).map(|j| m[(i, j)]).collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{geometric_grid, loglog_slope};

    fn frame(name: &str) -> CommutatorFrame {
        CommutatorFrame::new(Arc::new(VectorFieldSystem::builtin(name).unwrap()))
    }

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn frame_enumeration() {
        let f = frame("heisenberg");
        assert_eq!(f.q(), 3);
        let words: Vec<String> = f.words().iter().map(|w| w.to_string()).collect();
        assert_eq!(words, ["1", "2", "12"]);
        assert_eq!(f.index_of(&w("12")), Some(3));
        assert_eq!(f.index_of(&w("11")), None);
        let e: Vec<String> = frame("engel")
            .words()
            .iter()
            .map(|w| w.to_string())
            .collect();
        assert_eq!(e, ["1", "2", "12", "112", "212"]);
        assert_eq!(f.index_of(&w("21")), None);
        assert_eq!(f.degree_sum(&[1, 2, 3]), 4);
    }

    #[test]
    fn c_map_cases() {
        let f = frame("heisenberg");
        let x = [0.1, -0.2, 0.3];
        assert!(
            dist(
                &f.c_map(0.4, &[1], &x).unwrap(),
                &f.system().flow(1, 0.4, &x).unwrap()
            ) < 1e-15
        );
        for s in [0.05, 0.1, 0.2] {
            let y = f.c_map(s, &[1, 2], &[0.0; 3]).unwrap();
            assert!(dist(&y, &[0.0, 0.0, s * s]) < 1e-8, "{y:?}");
        }
        let flat = frame("flat2");
        let y = flat.c_map(0.3, &[1, 2], &[0.5, 0.5]).unwrap();
        assert!(dist(&y, &[0.5, 0.5]) < 1e-9);
        assert_eq!(CommutatorFrame::c_steps(1.0, &[1, 2, 3]).len(), 10);
    }

    #[test]
    fn exp_ap_cases() {
        let f = frame("heisenberg");
        let x = [0.2, 0.1, -0.1];
        let y = f.exp_ap(0.3, &w("1"), &x).unwrap();
        assert!(dist(&y, &f.system().flow(1, 0.3, &x).unwrap()) < 1e-15);
        let y = f.exp_ap(0.04, &w("12"), &[0.0; 3]).unwrap();
        assert!(dist(&y, &[0.0, 0.0, 0.04]) < 1e-8);
        for name in ["heisenberg", "grushin", "engel", "martinet"] {
            let f = frame(name);
            let x: Vec<f64> = (0..f.n()).map(|k| 0.1 * k as f64 - 0.1).collect();
            for word in f.words().to_vec() {
                for t in [0.5, 0.1, -0.3] {
                    let y = f.exp_ap(t, &word, &x).unwrap();
                    let back = f.exp_ap(-t, &word, &y).unwrap();
                    assert!(dist(&back, &x) < 1e-9, "{name} {word} {t}");
                }
            }
        }
    }

    fn skewed() -> CommutatorFrame {
        use crate::poly::Poly;
        let x = Poly::var(2, 0);
        let y = Poly::var(2, 1);
        let fields = vec![
            PolyMap::new(vec![Poly::one(2), y.clone()]).unwrap(),
            PolyMap::new(vec![y, x]).unwrap(),
        ];
        CommutatorFrame::new(Arc::new(
            VectorFieldSystem::new("skewed", fields, 3).unwrap(),
        ))
    }

    #[test]
    fn exp_ap_first_order() {
        let f = skewed();
        let x = [0.3, -0.2];
        for word in [w("12"), w("112"), w("212")] {
            let fw = f.system().eval_coeffs(&word, &x).unwrap();
            assert!(fw.iter().any(|v| *v != 0.0));
            let ts = geometric_grid(1e-4, 1e-2, 6);
            let errs: Vec<f64> = ts
                .iter()
                .map(|&t| {
                    let y = f.exp_ap(t, &word, &x).unwrap();
                    y.iter()
                        .zip(&x)
                        .zip(&fw)
                        .map(|((a, b), c)| (a - b - t * c).abs())
                        .fold(0.0, f64::max)
                })
                .collect();
            let slope = loglog_slope(&ts, &errs).unwrap();
            let l = word.len() as f64;
            assert!(slope > 1.0 + 0.5 / l, "{word}: {slope} {errs:?}");
        }
    }

    #[test]
    fn e_map_cases() {
        let f = frame("heisenberg");
        let x = [0.1, 0.2, 0.3];
        let i = [1, 2, 3];
        assert_eq!(f.e_map(&i, &x, 0.5, &[0.0; 3]).unwrap(), x.to_vec());
        let y = f.e_map(&i, &[0.0; 3], 0.5, &[0.0, 0.0, 0.2]).unwrap();
        assert!(dist(&y, &[0.0, 0.0, 0.2 * 0.25]) < 1e-9);
        // generator-only frame: plain flows with times h_k r
        let g = frame("flat3");
        let y = g
            .e_map(&[1, 2, 3], &[0.0; 3], 0.5, &[0.2, -0.4, 0.1])
            .unwrap();
        assert!(dist(&y, &[0.1, -0.2, 0.05]) < 1e-12);
        assert!(f.e_map(&[1, 2], &x, 0.5, &[0.0; 2]).is_err());
    }

    #[test]
    fn box_norms() {
        assert_eq!(box_norm(&[0.1, -0.3], &[1, 1]), 0.3);
        assert!((box_norm(&[0.04], &[2]) - 0.2).abs() < 1e-15);
        assert!((box_norm(&[0.1, 0.001], &[1, 3]) - 0.1).abs() < 1e-12);
        let f = frame("heisenberg");
        assert!(f.in_box(&[0.1, 0.1, 0.01], &[1, 2, 3], 0.2));
        assert!(!f.in_box(&[0.2, 0.0, 0.0], &[1, 2, 3], 0.2));
    }

    #[test]
    fn jacobian_at_zero() {
        let f = frame("heisenberg");
        let x = [0.3, -0.2, 0.1];
        let r = 0.5;
        let jac = f.jacobian_e(&[1, 2, 3], &x, r, &[0.0; 3]).unwrap();
        for (k, &j) in [1usize, 2, 3].iter().enumerate() {
            let col = f.scaled_field(j, r, &x);
            for i in 0..3 {
                assert!((jac.matrix[(i, k)] - col[i]).abs() < 1e-6);
            }
        }
        assert!((jac.det - r.powi(4)).abs() < 1e-4 * r.powi(4));
        let flat = frame("flat2");
        let jac = flat
            .jacobian_e(&[1, 2], &[0.0, 0.0], 0.3, &[0.1, 0.2])
            .unwrap();
        assert!((jac.matrix[(0, 0)] - 0.3).abs() < 1e-9 && jac.matrix[(0, 1)].abs() < 1e-9);
        let g = frame("grushin");
        let r = 0.1;
        let jac = g.jacobian_e(&[1, 2], &[1.0, 0.0], r, &[0.0, 0.0]).unwrap();
        assert!((jac.det - r * r).abs() < 1e-4 * r * r);
    }

    #[test]
    fn jacobian_matches_differences_away_from_zero() {
        let f = frame("engel");
        let x = [0.1, 0.2, 0.0, 0.1];
        let (r, idx) = (0.4, [1, 2, 3, 4]);
        let h = [0.05, -0.1, 0.02, -0.03];
        let jac = f.jacobian_e(&idx, &x, r, &h).unwrap();
        let mut hp = h;
        for k in 0..4 {
            let d = 1e-5;
            hp[k] = h[k] + d;
            let up = f.e_map(&idx, &x, r, &hp).unwrap();
            hp[k] = h[k] - d;
            let down = f.e_map(&idx, &x, r, &hp).unwrap();
            hp[k] = h[k];
            for i in 0..4 {
                let fd = (up[i] - down[i]) / (2.0 * d);
                assert!(
                    (jac.matrix[(i, k)] - fd).abs() < 1e-5,
                    "{i} {k}: {} vs {fd}",
                    jac.matrix[(i, k)]
                );
            }
        }
        // at h = 0 the columns are the scaled frame fields
        let jac = f.jacobian_e(&idx, &x, r, &[0.0; 4]).unwrap();
        for (k, &j) in idx.iter().enumerate() {
            let col = f.scaled_field(j, r, &x);
            for i in 0..4 {
                assert!((jac.matrix[(i, k)] - col[i]).abs() < 1e-9);
            }
        }
    }
}
