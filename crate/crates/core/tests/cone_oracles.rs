//! Oracle-backed checks for the cone layer.
//!
//! The operator norm is cross-checked against a full SVD from nalgebra,
//! an implementation with no code shared with the power iteration under
//! test. Perron data is checked against hand-solved eigensystems.

use proptest::prelude::*;
use taillab::cone::{
    operator_norm, perron, projective_action, proximal_limit_check, ConeError, PositiveMatrix,
};
use taillab::Matrix;

fn m(rows: &[&[f64]]) -> Matrix {
    PositiveMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn svd_norm(a: &Matrix) -> f64 {
    let d = a.dim();
    let na = nalgebra::DMatrix::from_row_slice(d, d, a.entries());
    na.svd(false, false).singular_values[0]
}

#[test]
fn operator_norm_diagonal_and_rank_one() {
    assert!((operator_norm(&m(&[&[3.0, 0.0], &[0.0, 4.0]])) - 4.0).abs() < 1e-12);
    // [[1,1],[1,1]] = (1,1)(1,1)^T has norm |(1,1)|^2 = 2
    assert!((operator_norm(&m(&[&[1.0, 1.0], &[1.0, 1.0]])) - 2.0).abs() < 1e-12);
}

#[test]
fn operator_norm_matches_svd_oracle_on_fixed_3x3() {
    let a = m(&[
        &[1.3, 0.2, 2.1],
        &[0.7, 1.9, 0.1],
        &[2.2, 0.4, 0.9],
    ]);
    let ours = operator_norm(&a);
    let oracle = svd_norm(&a);
    assert!(
        (ours - oracle).abs() <= 1e-10 * oracle,
        "power iteration {ours} vs svd {oracle}"
    );
}

#[test]
fn perron_symmetric_two_by_two() {
    // eigensystem of [[2,1],[1,2]]: lambda = 3, direction (1,1)/sqrt(2)
    let p = perron(&m(&[&[2.0, 1.0], &[1.0, 2.0]]), 1e-14).unwrap();
    let s = 1.0 / 2.0f64.sqrt();
    assert!((p.lambda - 3.0).abs() < 1e-12);
    for i in 0..2 {
        assert!((p.v[i] - s).abs() < 1e-9, "v = {:?}", p.v);
        assert!((p.w[i] - s).abs() < 1e-9, "w = {:?}", p.w);
    }
    let dot: f64 = p.v.iter().zip(&p.w).map(|(a, b)| a * b).sum();
    assert!((dot - 1.0).abs() < 1e-12);
}

#[test]
fn perron_diagonal_with_distinct_moduli() {
    let p = perron(&m(&[&[2.0, 0.0], &[0.0, 1.0]]), 1e-14).unwrap();
    assert!((p.lambda - 2.0).abs() < 1e-12);
    assert!(p.v[0] > 0.999 && p.v[1].abs() < 1e-9);
    assert!(p.w[0] > 0.999 && p.w[1].abs() < 1e-9);
}

#[test]
fn perron_rejects_permutation() {
    // eigenvalue moduli tie at 1, no contraction
    let err = perron(&m(&[&[0.0, 1.0], &[1.0, 0.0]]), 1e-14).unwrap_err();
    match err {
        ConeError::NotProximal { ratio, .. } => assert!(ratio >= 1.0 - 1e-6),
        other => panic!("expected NotProximal, got {other:?}"),
    }
}

#[test]
fn perron_strictly_positive_has_positive_eigenvectors() {
    let p = perron(&m(&[&[0.2, 1.7, 0.3], &[0.5, 0.1, 0.9], &[1.1, 0.6, 0.4]]), 1e-13).unwrap();
    assert!(p.v.iter().all(|&e| e > 0.0));
    assert!(p.w.iter().all(|&e| e > 0.0));
    // residual check against the matrix itself
    let a = m(&[&[0.2, 1.7, 0.3], &[0.5, 0.1, 0.9], &[1.1, 0.6, 0.4]]);
    let av = a.matvec(&p.v);
    for i in 0..3 {
        assert!((av[i] - p.lambda * p.v[i]).abs() < 1e-9 * p.lambda);
    }
}

#[test]
fn projective_iteration_contracts_to_dominant_direction() {
    let a = m(&[&[2.0, 1.0], &[1.0, 1.0]]);
    let out = proximal_limit_check(&a, &[1.0, 0.0], 60).unwrap();
    assert!(out.converged, "distances {:?}", &out.distances[..6]);
    let rate = out.rate.unwrap();
    // contraction ratio should match |lambda_2| / lambda_1 for a symmetric
    // matrix: eigenvalues (3 +- sqrt(5)) / 2, ratio ~ 0.1459
    let expected = (3.0 - 5.0f64.sqrt()) / (3.0 + 5.0f64.sqrt());
    assert!(
        (rate - expected).abs() < 0.02,
        "fitted rate {rate}, expected about {expected}"
    );
}

#[test]
fn boundary_start_stalls_without_error() {
    // x = e2 lies in the invariant complement of diag(2,1)
    let out = proximal_limit_check(&m(&[&[2.0, 0.0], &[0.0, 1.0]]), &[0.0, 1.0], 40).unwrap();
    assert!(!out.converged);
    assert!(out.boundary_stall);
    let first = out.distances[0];
    let last = *out.distances.last().unwrap();
    assert!((first - last).abs() < 1e-12, "distance should be constant");
}

fn allowable_strategy(d: usize) -> impl Strategy<Value = Matrix> {
    // strictly positive entries keep every product allowable and proximal
    prop::collection::vec(0.05f64..4.0, d * d)
        .prop_map(move |data| PositiveMatrix::from_row_major(d, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn products_of_allowable_matrices_stay_allowable(
        a in allowable_strategy(3),
        b in allowable_strategy(3),
    ) {
        prop_assert!(a.is_allowable());
        prop_assert!(a.mul(&b).is_allowable());
    }

    #[test]
    fn interior_absorbs_products(a in allowable_strategy(3)) {
        // one zero entry keeps b allowable but outside the interior
        let mut rows = vec![vec![1.0; 3]; 3];
        rows[0][1] = 0.0;
        let b = PositiveMatrix::from_rows(&rows).unwrap();
        prop_assert!(!b.is_strictly_positive());
        prop_assert!(a.mul(&b).is_strictly_positive());
        prop_assert!(b.mul(&a).is_strictly_positive());
    }

    #[test]
    fn operator_norm_submultiplicative_and_matches_oracle(
        a in allowable_strategy(2),
        b in allowable_strategy(2),
    ) {
        let na = operator_norm(&a);
        let nb = operator_norm(&b);
        let nab = operator_norm(&a.mul(&b));
        prop_assert!(nab <= na * nb * (1.0 + 1e-10));
        let oracle = svd_norm(&a);
        prop_assert!((na - oracle).abs() <= 1e-10 * oracle.max(1.0));
    }

    #[test]
    fn projective_action_lands_on_unit_sphere(
        a in allowable_strategy(3),
        x in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        prop_assume!(x.iter().any(|&e| e > 1e-3));
        let y = projective_action(&a, &x).unwrap();
        let n: f64 = y.iter().map(|e| e * e).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&e| e >= 0.0));
    }
}
