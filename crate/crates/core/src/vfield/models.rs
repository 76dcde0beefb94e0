//! Built-in model registry and the JSON model format.
//!
//! | name        | n | m | s | fields                                          |
//! |-------------|---|---|---|-------------------------------------------------|
//! | `heisenberg`| 3 | 2 | 2 | `∂x − (y/2)∂z`, `∂y + (x/2)∂z`                  |
//! | `grushin`   | 2 | 2 | 2 | `∂x`, `x∂y`                                     |
//! | `engel`     | 4 | 2 | 3 | `∂1`, `∂2 + x1∂3 + (x1²/2)∂4`                   |
//! | `martinet`  | 3 | 2 | 3 | `∂x + (y²/2)∂z`, `∂y`                           |
//! | `flat2`     | 2 | 2 | 1 | `∂1`, `∂2`                                      |
//! | `flat3`     | 3 | 3 | 1 | `∂1`, `∂2`, `∂3`                                |

use serde::{Deserialize, Serialize};

use crate::poly::{rat, Poly, PolyError, PolyMap, TermSpec};

pub const BUILTIN_MODELS: [&str; 6] = [
    "heisenberg",
    "grushin",
    "engel",
    "martinet",
    "flat2",
    "flat3",
];

/// `{"n":…, "m":…, "s":…, "fields":[[terms of component 1, …], …]}` where
/// `fields[j][i]` lists the terms `{"exps":[…],"coeff":"a/b"}` of component
/// `i` of field `j`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub fields: Vec<Vec<Vec<TermSpec>>>,
}

impl ModelSpec {
    pub fn to_fields(&self) -> Result<Vec<PolyMap>, PolyError> {
        if self.fields.len() != self.m {
            return Err(PolyError::ComponentMismatch {
                expected: self.m,
                got: self.fields.len(),
            });
        }
        self.fields
            .iter()
            .map(|comps| {
                if comps.len() != self.n {
                    return Err(PolyError::ComponentMismatch {
                        expected: self.n,
                        got: comps.len(),
                    });
                }
                let polys = comps
                    .iter()
                    .map(|terms| Poly::from_specs(self.n, terms))
                    .collect::<Result<Vec<_>, _>>()?;
                PolyMap::new(polys)
            })
            .collect()
    }

    pub fn from_fields(name: Option<String>, s: usize, fields: &[PolyMap]) -> Self {
        let n = fields.first().map_or(0, PolyMap::dim);
        Self {
            name,
            n,
            m: fields.len(),
            s,
            fields: fields
                .iter()
                .map(|f| f.components.iter().map(Poly::to_specs).collect())
                .collect(),
        }
    }
}

fn map(components: Vec<Poly>) -> PolyMap {
    PolyMap::new(components).expect("built-in fields are well formed")
}

fn mono(n: usize, exps: &[u32], num: i64, den: i64) -> Poly {
    let mut e = vec![0u32; n];
    e[..exps.len()].copy_from_slice(exps);
    Poly::monomial(e, rat(num, den))
}

/// `(fields, step)` for a built-in model, or `None` for an unknown name.
pub fn builtin(name: &str) -> Option<(Vec<PolyMap>, usize)> {
    let z = Poly::zero;
    let one = Poly::one;
    Some(match name {
        "heisenberg" => (
            vec![
                map(vec![one(3), z(3), mono(3, &[0, 1], -1, 2)]),
                map(vec![z(3), one(3), mono(3, &[1], 1, 2)]),
            ],
            2,
        ),
        "grushin" => (
            vec![
                PolyMap::coordinate(2, 0),
                map(vec![z(2), mono(2, &[1], 1, 1)]),
            ],
            2,
        ),
        "engel" => (
            vec![
                PolyMap::coordinate(4, 0),
                map(vec![z(4), one(4), mono(4, &[1], 1, 1), mono(4, &[2], 1, 2)]),
            ],
            3,
        ),
        "martinet" => (
            vec![
                map(vec![one(3), z(3), mono(3, &[0, 2], 1, 2)]),
                PolyMap::coordinate(3, 1),
            ],
            3,
        ),
        "flat2" => ((0..2).map(|k| PolyMap::coordinate(2, k)).collect(), 1),
        "flat3" => ((0..3).map(|k| PolyMap::coordinate(3, k)).collect(), 1),
        _ => return None,
    })
}
