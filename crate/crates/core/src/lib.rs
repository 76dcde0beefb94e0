//! Nested commutator calculus and ball-box experiments for polynomial
//! vector fields.

pub mod approx_exp;
pub mod ballbox;
pub mod fit;
pub mod free_lie;
pub mod linalg_mp;
pub mod metric;
pub mod nc_poly;
pub mod perm_words;
pub mod poly;
pub mod vfield;
