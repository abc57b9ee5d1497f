use std::f64::consts::PI;

use hardsphere::euler::{euler_pressure, momentum_residual, EulerData};
use hardsphere::fields::{self, Boundary, GridSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recovered_pressure_removes_gradient_part(seed in 0u64..10_000, modes in 1usize..8, amp in 0.1f64..5.0) {
        let g = GridSpec::new(2, PI, 32, Boundary::Periodic).unwrap();
        let v = EulerData::RandomBandLimited { modes, amplitude: amp, seed }.velocity(g).unwrap();
        prop_assert!(fields::div(&v).max_abs() < 1e-12 * amp.max(1.0));
        let pi = euler_pressure(&v).unwrap();
        prop_assert!(pi.mean().abs() < 1e-12 * amp * amp);
        let res = momentum_residual(&v, &pi, None).unwrap();
        prop_assert!(res.gradient_part < 1e-9);
    }

    #[test]
    fn pressure_is_quadratic_in_velocity(seed in 0u64..10_000, lambda in -3.0f64..3.0) {
        let g = GridSpec::new(2, PI, 32, Boundary::Periodic).unwrap();
        let v = EulerData::RandomBandLimited { modes: 4, amplitude: 1.0, seed }.velocity(g).unwrap();
        let p1 = euler_pressure(&v).unwrap();
        let p2 = euler_pressure(&v.scale(lambda)).unwrap();
        prop_assert!(p2.axpy(-lambda * lambda, &p1).max_abs() < 1e-12 * (1.0 + p1.max_abs()) * lambda * lambda + 1e-15);
    }
}
