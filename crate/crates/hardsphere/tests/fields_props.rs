use hardsphere::fields::{div, grad, helmholtz_project, laplacian, Boundary, GridSpec, ScalarField, VectorField};
use proptest::prelude::*;

fn grid(pick: usize) -> GridSpec {
    match pick {
        0 => GridSpec::new(2, 1.0, 8, Boundary::Periodic).unwrap(),
        1 => GridSpec::new(2, 1.5, 12, Boundary::NoSlipBox).unwrap(),
        _ => GridSpec::new(3, 1.0, 8, Boundary::NoSlipBox).unwrap(),
    }
}

fn scalar(g: GridSpec, seed: &[f64]) -> ScalarField {
    ScalarField::from_vec(g, (0..g.len()).map(|i| seed[i % seed.len()] * ((i * 7919) % 13) as f64).collect()).unwrap()
}

fn vector(g: GridSpec, seed: &[f64]) -> VectorField {
    VectorField::from_fn(g, |x| {
        let k = ((x[0] * 37.0 + x[1] * 101.0 + x[2] * 13.0).abs() * 1000.0) as usize;
        let v = seed[k % seed.len()] + (k % 5) as f64 * 0.1;
        [v, -v * 0.5, v * v]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn operators_are_linear(pick in 0..3usize, a in -3.0..3.0f64,
                            s1 in prop::collection::vec(-1.0..1.0f64, 5..20),
                            s2 in prop::collection::vec(-1.0..1.0f64, 5..20)) {
        let g = grid(pick);
        let (f, h) = (scalar(g, &s1), scalar(g, &s2));
        let lhs = laplacian(&f.scale(a).axpy(1.0, &h));
        let rhs = laplacian(&f).scale(a).axpy(1.0, &laplacian(&h));
        prop_assert!(lhs.axpy(-1.0, &rhs).max_abs() <= 1e-10 * (1.0 + rhs.max_abs()));
        let (u, w) = (vector(g, &s1), vector(g, &s2));
        let lhs = div(&u.scale(a).axpy(1.0, &w));
        let rhs = div(&u).scale(a).axpy(1.0, &div(&w));
        prop_assert!(lhs.axpy(-1.0, &rhs).max_abs() <= 1e-10 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn gradient_is_adjoint_to_divergence(pick in 0..3usize,
                                          s1 in prop::collection::vec(-1.0..1.0f64, 5..20),
                                          s2 in prop::collection::vec(-1.0..1.0f64, 5..20)) {
        let g = grid(pick);
        let phi = scalar(g, &s1);
        let u = vector(g, &s2);
        let lhs = grad(&phi).dot(&u);
        let rhs = -phi.dot(&div(&u));
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn projection_is_orthogonal_to_gradients(pick in 0..2usize,
                                              s1 in prop::collection::vec(-1.0..1.0f64, 5..20),
                                              s2 in prop::collection::vec(-1.0..1.0f64, 5..20)) {
        let g = grid(pick);
        let u = vector(g, &s1);
        let hu = helmholtz_project(&u).unwrap();
        let gp = grad(&scalar(g, &s2));
        prop_assert!(hu.dot(&gp).abs() <= 1e-9 * (1.0 + hu.l2() * gp.l2()));
    }
}
