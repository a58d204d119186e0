use bbvi::targets::ComponentStructure;
use bbvi::{BlockLayout, ScaleMatrix, SparsityDescriptor, Structure, VariationalParams};
use nalgebra::DVector;
use proptest::prelude::*;

fn structure() -> impl Strategy<Value = Structure> {
    prop_oneof![
        (1usize..8).prop_map(|dim| Structure::Diagonal { dim }),
        (1usize..8).prop_map(|dim| Structure::DenseLowerTriangular { dim }),
        (0usize..3, 1usize..3, 1usize..4).prop_map(|(z, y, n)| Structure::BorderedBlockDiagonal(
            BlockLayout::new(z, y, n).unwrap()
        )),
    ]
}

/// A feasible scale matrix: stored entries in [-2, 2], diagonal in [0.1, 3].
fn scale() -> impl Strategy<Value = ScaleMatrix> {
    structure().prop_flat_map(|s| {
        (
            prop::collection::vec(-2.0f64..2.0, s.param_count()),
            prop::collection::vec(0.1f64..3.0, s.dim()),
        )
            .prop_map(move |(mut vals, diag)| {
                for (i, d) in diag.into_iter().enumerate() {
                    vals[s.diagonal_offset(i)] = d;
                }
                ScaleMatrix::from_values(s, vals).unwrap()
            })
    })
}

fn with_vectors(k: usize) -> impl Strategy<Value = (ScaleMatrix, Vec<Vec<f64>>)> {
    scale().prop_flat_map(move |c| {
        let d = c.dim();
        (
            Just(c),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), k),
        )
    })
}

proptest! {
    #[test]
    fn matvec_matches_dense((c, v) in with_vectors(1)) {
        let got = c.matvec(&v[0]).unwrap();
        let want = c.to_dense() * DVector::from_column_slice(&v[0]);
        for (a, b) in got.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn frobenius_matches_dense(c in scale()) {
        let dense = c.to_dense().norm_squared();
        prop_assert!((c.frobenius_norm_sq() - dense).abs() <= 1e-12 * (1.0 + dense));
    }

    #[test]
    fn prox_is_positive_and_stationary(c in -50.0f64..50.0, log_gamma in -8.0f64..2.0) {
        let gamma = 10f64.powf(log_gamma);
        let cp = ScaleMatrix::diagonal(vec![c]).prox_diagonal(gamma).unwrap().diag(0);
        prop_assert!(cp > 0.0);
        let resid = (cp - c) * cp - gamma;
        prop_assert!(resid.abs() <= 1e-12 * (cp * cp + (c * cp).abs() + gamma));
    }

    #[test]
    fn prox_leaves_off_diagonal_alone(c in scale(), gamma in 1e-4f64..1.0) {
        let p = c.prox_diagonal(gamma).unwrap();
        let s = c.structure();
        for (k, (a, b)) in c.values().iter().zip(p.values()).enumerate() {
            let on_diag = (0..s.dim()).any(|i| s.diagonal_offset(i) == k);
            if !on_diag {
                prop_assert_eq!(a, b);
            } else {
                prop_assert!(b > a);
            }
        }
    }

    #[test]
    fn outer_accumulate_respects_pattern((c, v) in with_vectors(2), alpha in -2.0f64..2.0) {
        let mut acc = ScaleMatrix::zeros(c.structure());
        acc.outer_accumulate(&v[0], &v[1], alpha).unwrap();
        let s = c.structure();
        for i in 0..s.dim() {
            for j in 0..s.dim() {
                let want = match s.stored_offset(i, j) {
                    Some(_) => alpha * v[0][i] * v[1][j],
                    None => 0.0,
                };
                prop_assert!((acc.get(i, j) - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn reparameterize_is_affine((c, v) in with_vectors(3), a in -2.0f64..2.0) {
        let q = VariationalParams::new(v[2].clone(), c).unwrap();
        let mix: Vec<f64> = v[0].iter().zip(&v[1]).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let z0 = q.reparameterize(&v[0]).unwrap();
        let z1 = q.reparameterize(&v[1]).unwrap();
        let zm = q.reparameterize(&mix).unwrap();
        for i in 0..zm.len() {
            let want = a * z0[i] + (1.0 - a) * z1[i];
            prop_assert!((zm[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn csv_row_round_trips(c in scale()) {
        let back = ScaleMatrix::from_csv_row(&c.to_csv_row()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn effective_dimensionality_ignores_component_order(
        z in 0usize..3, y in 1usize..3, n in 1usize..5, rot in 0usize..5, dense in any::<bool>()
    ) {
        let layout = BlockLayout::new(z, y, n).unwrap();
        let s = if dense {
            Structure::DenseLowerTriangular { dim: layout.dim() }
        } else {
            Structure::BorderedBlockDiagonal(layout)
        };
        let mut rows = ComponentStructure::hierarchical(layout).all().to_vec();
        let base = SparsityDescriptor::new(s, &rows).unwrap().effective_dimensionality();
        rows.rotate_left(rot % n);
        rows.reverse();
        prop_assert_eq!(SparsityDescriptor::new(s, &rows).unwrap().effective_dimensionality(), base);
    }
}
