use hardsphere::acoustics::{
    acoustic_energy, bump, leapfrog_energy, decay_exponent, gradient_part, initial_state, leapfrog_limit, max_outside,
    propagate_spectral, sobolev_pair, solve_acoustic, AcousticParams, Integrator, RadialProblem,
};
use hardsphere::eos::PressureLaw;
use hardsphere::fields::{grad, Boundary, GridSpec, ScalarField, VectorField};
use hardsphere::Error;

fn params() -> AcousticParams {
    AcousticParams::new(0.2, 0.5, 1.7).unwrap()
}

fn norm(x: [f64; 3]) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

#[test]
fn zero_data_stays_zero() {
    let g = GridSpec::new(2, 1.0, 16, Boundary::Periodic).unwrap();
    let traj = solve_acoustic(&ScalarField::zeros(g), &VectorField::zeros(g), params(), 1.0, 0.25, Integrator::Spectral)
        .unwrap();
    assert_eq!(traj.len(), 5);
    assert!(traj.iter().all(|st| st.s.max_abs() == 0.0 && st.grad_psi.max_abs() == 0.0));
}

#[test]
fn plane_wave_translates() {
    let p = params();
    let c = p.speed();
    let g = GridSpec::new(1, 1.0, 64, Boundary::Periodic).unwrap();
    let k = 3.0 * std::f64::consts::PI;
    let amp = p.varrho / p.dp.sqrt() * k;
    let wave = |x: f64, t: f64| amp * (k * (x - c * t)).cos();
    let s0 = ScalarField::from_fn(g, |x| wave(x[0], 0.0));
    let gp0 = VectorField::from_fn(g, |x| [k * (k * x[0]).cos(), 0.0, 0.0]);
    let t = 0.37;
    let traj = solve_acoustic(&s0, &gp0, p, t, t, Integrator::Spectral).unwrap();
    let exact = ScalarField::from_fn(g, |x| wave(x[0], t));
    assert!(traj[1].s.axpy(-1.0, &exact).max_abs() < 1e-10);
}

#[test]
fn energy_and_reversibility() {
    let p = params();
    let g = GridSpec::new(2, 1.0, 64, Boundary::Periodic).unwrap();
    let s0 = ScalarField::from_fn(g, |x| bump(norm(x), 0.5));
    let u0 = VectorField::from_fn(g, |x| [bump(norm(x), 0.6), 0.3 * x[0] * bump(norm(x), 0.6), 0.0]);
    let gp0 = gradient_part(&u0).unwrap();
    let traj = solve_acoustic(&s0, &gp0, p, 1.0, 0.1, Integrator::Spectral).unwrap();
    let e0 = acoustic_energy(&traj[0]);
    for st in &traj {
        assert!((acoustic_energy(st) - e0).abs() < 1e-10 * e0);
        let (a, b) = sobolev_pair(st, 2);
        let (a0, b0) = sobolev_pair(&traj[0], 2);
        assert!(a * a * p.dp + b * b * p.varrho * p.varrho <= 1.0001 * (a0 * a0 * p.dp + b0 * b0 * p.varrho * p.varrho));
    }
    let end = traj.last().unwrap();
    let back = propagate_spectral(end, -end.t).unwrap();
    assert!(back.s.axpy(-1.0, &s0).max_abs() < 1e-9);
    assert!(back.grad_psi.axpy(-1.0, &traj[0].grad_psi).max_abs() < 1e-9);
    // grad_psi is kept consistent with psi
    assert!(grad(&end.psi).axpy(-1.0, &end.grad_psi).max_abs() < 1e-14);
}

#[test]
fn superposition() {
    let p = params();
    let g = GridSpec::new(1, 1.0, 64, Boundary::Periodic).unwrap();
    let a = ScalarField::from_fn(g, |x| bump(x[0] - 0.2, 0.3));
    let b = ScalarField::from_fn(g, |x| bump(x[0] + 0.1, 0.4));
    let z = VectorField::zeros(g);
    let ta = solve_acoustic(&a, &z, p, 0.5, 0.5, Integrator::Spectral).unwrap();
    let tb = solve_acoustic(&b, &z, p, 0.5, 0.5, Integrator::Spectral).unwrap();
    let tab = solve_acoustic(&a.axpy(2.0, &b), &z, p, 0.5, 0.5, Integrator::Spectral).unwrap();
    let sum = ta[1].s.axpy(2.0, &tb[1].s);
    assert!(tab[1].s.axpy(-1.0, &sum).max_abs() < 1e-13);
}

#[test]
fn finite_speed_in_one_dimension() {
    let p = params();
    let n = 1024;
    let g = GridSpec::new(1, 1.0, n, Boundary::Periodic).unwrap();
    let h = g.h();
    let support = 100.0 * h;
    let horizon = 0.5 / p.speed();
    let s0 = ScalarField::from_fn(g, |x| bump(x[0], support));
    let traj = solve_acoustic(&s0, &VectorField::zeros(g), p, horizon, horizon / 10.0, Integrator::Spectral).unwrap();
    for st in &traj {
        let radius = support + p.speed() * st.t + 2.0 * h;
        assert!(max_outside(st, radius) < 1e-12, "t={} {}", st.t, max_outside(st, radius));
    }
}

#[test]
fn leapfrog_on_box() {
    let p = AcousticParams::new(1.0, 0.5, 1.0).unwrap();
    let g = GridSpec::new(1, 1.0, 256, Boundary::NoSlipBox).unwrap();
    let s0 = ScalarField::from_fn(g, |x| bump(x[0], 0.4));
    let dt = 0.5 * g.h() * p.eps / p.dp.sqrt();
    let traj = solve_acoustic(&s0, &VectorField::zeros(g), p, 1.0, 0.1, Integrator::Leapfrog { dt }).unwrap();
    let e0 = leapfrog_energy(&traj[0], dt);
    let drift = traj.iter().map(|st| (leapfrog_energy(st, dt) - e0).abs() / e0).fold(0.0, f64::max);
    assert!(drift < 1e-6, "{drift}");
    // The plain energy deviation converges at second order in the step.
    let plain = |dt: f64| {
        let traj = solve_acoustic(&s0, &VectorField::zeros(g), p, 1.0, 0.1, Integrator::Leapfrog { dt }).unwrap();
        let e0 = acoustic_energy(&traj[0]);
        traj.iter().map(|st| (acoustic_energy(st) - e0).abs() / e0).fold(0.0, f64::max)
    };
    let ratio = plain(dt) / plain(0.5 * dt);
    assert!((ratio - 4.0).abs() < 0.5, "{ratio}");
    let too_big = 1.01 * leapfrog_limit(&g, &p);
    assert!(matches!(
        solve_acoustic(&s0, &VectorField::zeros(g), p, 1.0, 0.1, Integrator::Leapfrog { dt: too_big }),
        Err(Error::Cfl(_))
    ));
}

#[test]
fn rotational_data_rejected() {
    let g = GridSpec::new(2, 1.0, 16, Boundary::Periodic).unwrap();
    let rot = VectorField::from_fn(g, |x| [-(std::f64::consts::PI * x[1]).sin(), (std::f64::consts::PI * x[0]).sin(), 0.0]);
    assert!(matches!(initial_state(&ScalarField::zeros(g), &rot, params()), Err(Error::Curl(_))));
}

#[test]
fn radial_decay_rates() {
    let law = PressureLaw::carnahan_starling(1.0, 1.0).unwrap();
    let params = AcousticParams::from_law(&law, 0.1, 0.1).unwrap();
    let pr = RadialProblem { params, support: 1.0, r_max: 150.0, cells: 16384 };
    let r2 = decay_exponent(&pr, 2.0, (10.0, 100.0), 12).unwrap();
    assert!(r2.slope.abs() < 0.05);
    let r4 = decay_exponent(&pr, 4.0, (10.0, 100.0), 12).unwrap();
    assert!((r4.slope - r4.predicted).abs() < 0.1 && r4.predicted == -0.5);
    assert!(matches!(decay_exponent(&pr, 4.0, (10.0, 50.0), 12), Err(Error::Window(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decay.csv");
    r4.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("tau,Lq_norm,fitted_slope\n"));
    assert_eq!(text.lines().count(), 13);
}
