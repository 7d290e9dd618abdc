//! The basis solver's dimension against an independently built dense
//! constraint system: for exactly-acting cyclic groups, the number of basis
//! elements must equal the null-space dimension of the stacked vectorized
//! constraints, as an exact integer.

use equiseg_core::group::{make_group, FieldType, Group, GroupKind, Representation};
use equiseg_core::kernels::build_basis;
use equiseg_oracles::{constraint_nullity_cyclic, OracleRep};

fn field_type(group: &Group, spec: &[OracleRep]) -> FieldType {
    let reps: Vec<Representation> = spec
        .iter()
        .map(|r| match r {
            OracleRep::Trivial => equiseg_core::group::trivial_rep(group),
            OracleRep::Regular => equiseg_core::group::regular_rep(group),
        })
        .collect();
    FieldType::new(group, reps).unwrap()
}

#[test]
fn basis_count_equals_independent_nullity() {
    use OracleRep::*;
    let type_options: Vec<Vec<OracleRep>> = vec![
        vec![Trivial],
        vec![Regular],
        vec![Trivial, Trivial],
        vec![Regular, Regular],
        vec![Trivial, Regular],
    ];
    for n in [2usize, 4] {
        let group = make_group(GroupKind::Cyclic, n).unwrap();
        for in_spec in &type_options {
            for out_spec in &type_options {
                for k in [1usize, 3] {
                    let in_t = field_type(&group, in_spec);
                    let out_t = field_type(&group, out_spec);
                    let count = build_basis(&in_t, &out_t, k).unwrap().count();
                    let nullity = constraint_nullity_cyclic(n, in_spec, out_spec, k);
                    assert_eq!(
                        count, nullity,
                        "C{} {:?} -> {:?} k={}: basis {} vs nullity {}",
                        n, in_spec, out_spec, k, count, nullity
                    );
                }
            }
        }
    }
}
