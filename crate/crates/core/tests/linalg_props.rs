mod support;

use cdekf_core::linalg::{
    block_triangularize, cholesky_lower, phi, solve_lower, solve_lower_transpose, solve_right_lower,
    solve_right_lower_transpose, triangularize_lower,
};
use cdekf_core::{LinalgError, LowerTriangular, Matrix};
use proptest::prelude::*;
use support::lti_oracle::to_na;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Matrix::from_col_major(rows, cols, v).unwrap())
}

fn lower(n: usize) -> impl Strategy<Value = LowerTriangular> {
    matrix(n, n).prop_map(move |m| {
        let mut m = m.tril();
        for i in 0..n {
            m[(i, i)] = 0.3 + m[(i, i)].abs();
        }
        LowerTriangular::from_tril(&m)
    })
}

fn sized<T: std::fmt::Debug>(f: impl Fn(usize) -> BoxedStrategy<T>) -> impl Strategy<Value = (usize, T)> {
    (1usize..=5).prop_flat_map(move |n| (Just(n), f(n)))
}

fn max_gap(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).max_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn triangularization_preserves_the_gram_matrix(
        (n, (k, pre)) in (1usize..=5).prop_flat_map(|n| (Just(n), (n..=2 * n + 2).prop_flat_map(move |k| (Just(k), matrix(n, k)))))
    ) {
        let l = triangularize_lower(&pre).unwrap();
        prop_assert_eq!(l.order(), n);
        prop_assert!(l.as_matrix().strict_upper_max_abs() == 0.0);
        prop_assert!(l.diagonal().iter().all(|d| *d >= 0.0));
        let gram = pre.mul_transpose(&pre);
        prop_assert!(max_gap(&l.gram(), &gram) <= 1e-12 * (1.0 + gram.max_abs() * k as f64));
        // nalgebra's Cholesky factor of the same Gram matrix is the unique positive-diagonal one.
        if let Some(ch) = to_na(&gram).cholesky() {
            let err = (ch.l() - to_na(l.as_matrix())).abs().max();
            prop_assert!(err <= 1e-8 * (1.0 + gram.max_abs()), "{:e}", err);
        }
    }

    #[test]
    fn cholesky_round_trips((_, s) in sized(|n| lower(n).boxed())) {
        let p = s.gram();
        let c = cholesky_lower(&p).unwrap();
        prop_assert!(max_gap(c.as_matrix(), s.as_matrix()) <= 1e-9);
    }

    #[test]
    fn triangular_solves_invert_their_products(
        (n, (s, b)) in (1usize..=5).prop_flat_map(|n| (Just(n), (lower(n), matrix(n, 3))))
    ) {
        let l = s.as_matrix();
        let x = solve_lower(&s, &b).unwrap();
        prop_assert!(max_gap(&(l * &x), &b) <= 1e-9 * (1.0 + x.max_abs()));
        let y = solve_lower_transpose(&s, &b).unwrap();
        prop_assert!(max_gap(&(&l.transpose() * &y), &b) <= 1e-9 * (1.0 + y.max_abs()));
        let bt = b.transpose();
        let u = solve_right_lower(&bt, &s).unwrap();
        prop_assert!(max_gap(&(&u * l), &bt) <= 1e-9 * (1.0 + u.max_abs()));
        let v = solve_right_lower_transpose(&bt, &s).unwrap();
        prop_assert!(max_gap(&(&v * &l.transpose()), &bt) <= 1e-9 * (1.0 + v.max_abs()));
        prop_assert_eq!(x.shape(), (n, 3));
    }

    #[test]
    fn block_post_array_matches_the_covariance_update(
        (n, m, z, x, r) in (1usize..=4, 1usize..=3).prop_flat_map(|(n, m)| {
            (Just(n), Just(m), matrix(m, n), matrix(n, n), lower(m))
        })
    ) {
        let post = block_triangularize(&z, &x, &r).unwrap();
        let re = &z.mul_transpose(&z) + &r.gram();
        let pxz = x.mul_transpose(&z);
        prop_assert!(max_gap(&post.re_sqrt.gram(), &re) <= 1e-10 * (1.0 + re.max_abs()));
        prop_assert!(max_gap(&post.pxz_bar.mul_transpose(post.re_sqrt.as_matrix()), &pxz) <= 1e-10 * (1.0 + pxz.max_abs()));
        // P+ = X X^T - Pxz Re^-1 Pxz^T from an explicit nalgebra inverse.
        let (xn, pn, ren) = (to_na(&x), to_na(&pxz), to_na(&re));
        let p_plus = &xn * xn.transpose() - &pn * ren.try_inverse().unwrap() * pn.transpose();
        let err = (to_na(&post.p_sqrt.gram()) - &p_plus).abs().max();
        prop_assert!(err <= 1e-8 * (1.0 + p_plus.abs().max()), "{:e}", err);
        prop_assert_eq!(post.pxz_bar.shape(), (n, m));
    }

    #[test]
    fn phi_splits_symmetric_matrices_exactly((n, a) in sized(|n| matrix(n, n).boxed())) {
        let mut sym = &a + &a.transpose();
        sym.symmetrize();
        let p = phi(&sym);
        let p = p.as_matrix();
        prop_assert!(p.strict_upper_max_abs() == 0.0);
        prop_assert_eq!(&(p + &p.transpose()), &sym);
        // Linearity, and the diagonal is halved.
        let doubled = phi(&sym.scale(2.0));
        prop_assert_eq!(doubled.as_matrix(), &p.scale(2.0));
        for i in 0..n {
            prop_assert_eq!(p[(i, i)], 0.5 * sym[(i, i)]);
        }
    }
}

#[test]
fn rank_deficiency_is_reported_only_for_exact_zeros() {
    let zero_row = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 0.0]]);
    assert!(matches!(triangularize_lower(&zero_row), Err(LinalgError::RankDeficient { .. })));
    // A roundoff-sized pivot is a valid (if nearly singular) factor.
    let tiny = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 1e-200]]);
    assert!(triangularize_lower(&tiny).is_ok());
}

#[test]
fn indefinite_input_fails_cholesky() {
    let p = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
    assert!(matches!(cholesky_lower(&p), Err(LinalgError::NotPositiveDefinite { .. })));
}
