use hardsphere::acoustics::{AcousticParams, AcousticState};
use hardsphere::cns::FluidState;
use hardsphere::eos::PressureLaw;
use hardsphere::fields::{Boundary, GridSpec, ScalarField, VectorField};
use hardsphere::relent::*;
use proptest::prelude::*;

fn law() -> PressureLaw {
    PressureLaw::power(1.0, 2.0, 3.0, 10.0).unwrap()
}

fn base() -> RateInputs {
    RateInputs {
        eps: 0.05,
        nu: 0.1,
        radius: 20.0,
        alpha: 0.5,
        eps0: 0.25,
        eps1: 1.0,
        window_gap: 6.5,
        dist_u: 0.01,
        dist_rho: 0.01,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn relative_entropy_is_nonnegative(seed in proptest::collection::vec(-1.0f64..1.0, 6), eps in 0.05f64..0.5) {
        let law = law();
        let g = GridSpec::new(1, 4.0, 32, Boundary::NoSlipBox).unwrap();
        let rho = ScalarField::from_fn(g, |x| 3.0 + 2.0 * seed[0] * (seed[1] * x[0]).sin() + 2.0 * seed[2].abs());
        let u = VectorField::from_fn(g, |x| [seed[3] * (x[0] * seed[4]).cos(), 0.0, 0.0]);
        let ap = AcousticParams::from_law(&law, eps, 3.0).unwrap();
        let ac = AcousticState {
            s: ScalarField::from_fn(g, |x| seed[5] * (x[0]).cos()),
            psi: ScalarField::zeros(g),
            grad_psi: VectorField::zeros(g),
            t: 0.0,
            params: ap,
        };
        let cmp = comparison_trajectory(&[ac], &still_target(g, &[0.0]), &law, 2.0).unwrap().remove(0);
        let st = FluidState { rho, u, t: 0.0, ledger: Default::default() };
        let e = relative_entropy(&st, &cmp, &law).unwrap();
        prop_assert!(e.kinetic >= 0.0 && e.potential >= -1e-12);
    }

    #[test]
    fn cutoff_stays_in_unit_interval(l in 2.5f64..6.0, shell_frac in 0.3f64..0.9) {
        let g = GridSpec::new(2, l, 24, Boundary::NoSlipBox).unwrap();
        let shell = (shell_frac * l).max(4.0 * g.h());
        prop_assume!(shell < l);
        let chi = face_cutoff(g, shell).unwrap();
        for c in chi.comps.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(c));
        }
    }

    #[test]
    fn rate_bound_grows_with_its_small_quantities(
        alpha in 0.05f64..0.95, r_scale in 1.1f64..4.0, du in 0.0f64..1.0, dr in 0.0f64..1.0
    ) {
        let k = RateConstants { c_dt: 1.0, c2: 1.0, c: 1.0 };
        let mut a = base();
        a.alpha = alpha;
        let v = rate_bound_rhs(&a, &k).unwrap();
        // Smaller alpha means a larger eps^alpha.
        let mut b = a;
        b.alpha = alpha * 0.5;
        prop_assert!(rate_bound_rhs(&b, &k).unwrap() > v);
        // Smaller R means a larger 1/R.
        let mut c = a;
        c.radius = a.radius / r_scale;
        prop_assert!(rate_bound_rhs(&c, &k).unwrap() > v);
        let mut d = a;
        d.dist_u += du;
        d.dist_rho += dr;
        prop_assert!(rate_bound_rhs(&d, &k).unwrap() >= v);
    }
}
