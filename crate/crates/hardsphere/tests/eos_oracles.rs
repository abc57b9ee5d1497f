use hardsphere::eos::{
    l2_control_sides, l2_density_control_constant, pointwise_bounds_certificate, potential_identities_check,
    renorm_b, PressureLaw,
};
use hardsphere::Error;

fn unit_power() -> PressureLaw {
    PressureLaw::power(1.0, 2.0, 3.0, 1.0).unwrap()
}

fn cs() -> PressureLaw {
    PressureLaw::carnahan_starling(1.0, 1.0).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn derivative_values_match_oracle() {
    let law = unit_power();
    let (d1, _) = law.pressure_derivatives(0.5).unwrap();
    assert!(rel(d1, 20.0) < 1e-14);
    let (_, d2) = law.pressure_derivatives(0.7).unwrap();
    assert!(rel(d2, 3530.864197530864) < 1e-12);
    let c = cs();
    assert!(rel(c.pressure(0.5).unwrap(), 6.5) < 1e-15);
    let (d1, d2) = c.pressure_derivatives(0.5).unwrap();
    assert!(rel(d1, 57.0) < 1e-14 && rel(d2, 544.0) < 1e-13);
}

#[test]
fn finite_difference_refinement_matches_analytic() {
    let law = unit_power();
    let s = 0.7;
    let fd = |h: f64| (law.dpressure(s + h).unwrap() - law.dpressure(s - h).unwrap()) / (2.0 * h);
    let (_, d2) = law.pressure_derivatives(s).unwrap();
    let rich = (4.0 * fd(1e-4) - fd(2e-4)) / 3.0;
    assert!(rel(rich, d2) < 1e-6);
}

#[test]
fn potential_matches_oracle() {
    let law = unit_power();
    assert!(rel(law.potential(0.75).unwrap(), 4.5) < 1e-10);
    assert!(rel(law.potential(0.2).unwrap(), -0.24375) < 1e-10);
    assert!(rel(law.potential(0.999).unwrap(), 499498.002) < 1e-10);
    let c = cs();
    for (s, v) in [
        (0.0005, -0.005952877014115850),
        (0.1, -0.6152647788977310),
        (0.75, 12.30409883108112),
        (0.95, 411.0097611918638),
    ] {
        assert!(rel(c.potential(s).unwrap(), v) < 1e-10, "{s}");
        assert!(rel(c.potential_fast(s).unwrap(), v) < 1e-9, "{s}");
    }
}

#[test]
fn bregman_gap_matches_remainder_oracle() {
    let law = unit_power();
    assert!((law.relative_potential(0.8, 0.5).unwrap() - 7.2).abs() < 1e-8);
    assert_eq!(law.relative_potential(0.6, 0.6).unwrap(), 0.0);
    // gap(0, r) = p(r) by the first identity
    assert!(rel(law.relative_potential(0.0, 0.4).unwrap(), law.pressure(0.4).unwrap()) < 1e-9);
}

#[test]
fn identities_on_both_laws() {
    let nodes: Vec<f64> = (0..200).map(|i| 0.05 + 0.9 * i as f64 / 199.0).collect();
    for law in [unit_power(), cs()] {
        let rep = potential_identities_check(&law, &nodes, 1e-6).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
    let law = unit_power();
    let (_, dp, _) = law.potential_cached(0.5).unwrap();
    assert!(rel(dp * 0.5, law.pressure(0.5).unwrap()) < 1e-9);
}

#[test]
fn ceiling_is_rejected() {
    let law = cs();
    assert!(matches!(law.potential(1.0 - 1e-13), Err(Error::Domain { .. })));
    assert!(law.potential(1.0 - 1e-11).is_ok());
    assert!(law.pressure(0.999).unwrap() > law.pressure(0.99).unwrap());
}

#[test]
fn certificate_and_l2_control() {
    let law = unit_power();
    let cert = pointwise_bounds_certificate(&law, 0.1).unwrap();
    assert!(cert.alpha1 < 0.1 && cert.c_low > 0.0 && cert.c_up.is_finite());
    let c = l2_density_control_constant(&law, &cert).unwrap();
    assert!(c.is_finite() && c > 0.0);
    let r = vec![0.5; 64];
    let mut rho = vec![0.5; 64];
    rho[7] = 1.0 - 1e-4;
    let (lhs, rhs) = l2_control_sides(&law, &rho, &r, 1.0 / 64.0).unwrap();
    assert!(lhs <= c * rhs);
    let (lhs, rhs) = l2_control_sides(&law, &r, &r, 1.0 / 64.0).unwrap();
    assert_eq!((lhs, rhs), (0.0, 0.0));
}

#[test]
fn renormalization_branches() {
    let law = unit_power();
    let b = renorm_b(&law, 0.05, 0.0).unwrap();
    assert!(b.alpha2 <= 0.025);
    assert_eq!(b.b(0.9), 0.0);
    let s = 1.0 - 0.5 * b.alpha2;
    assert!(rel(b.b(s), -(1.0 - s).ln()) < 1e-14);
    assert!(b.admissibility.is_finite());
    let ba = b.truncated(b.alpha2 / 2.0);
    let cut = 1.0 - b.alpha2 / 2.0;
    assert_eq!(ba.b(cut + 1e-6), b.b(cut));
    assert_eq!(ba.db(cut + 1e-6), 0.0);
}
