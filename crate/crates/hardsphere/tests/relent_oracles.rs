use hardsphere::acoustics::*;
use hardsphere::cns::*;
use hardsphere::eos::*;
use hardsphere::fields::{grad, Boundary, GridSpec, ScalarField, VectorField};
use hardsphere::relent::*;
use hardsphere::Error;

fn law() -> PressureLaw {
    PressureLaw::power(1.0, 2.0, 3.0, 10.0).unwrap()
}

fn control_constant(law: &PressureLaw) -> f64 {
    let cert = pointwise_bounds_certificate(law, 0.25).unwrap();
    l2_density_control_constant(law, &cert).unwrap()
}

struct Pulse {
    traj: Vec<FluidState>,
    cmp: Vec<ComparisonFields>,
    params: ScalingParams,
}

/// One-dimensional acoustic pulse on `[-4, 4]` with a corrector shell of width 2.
fn pulse(eps: f64, nu: f64, n: usize, emit: f64, horizon: f64) -> Pulse {
    let law = law();
    let params = ScalingParams::new(eps, nu, 2.0, 2.0, 3.0, horizon, 1.0).unwrap();
    let g = GridSpec::new(1, 4.0, n, Boundary::NoSlipBox).unwrap();
    let s0 = ScalarField::from_fn(g, |x| bump(x[0].abs(), 1.5));
    let gp0 = VectorField::from_fn(g, |x| [0.5 * bump(x[0].abs(), 1.5), 0.0, 0.0]);
    let ap = AcousticParams::from_law(&law, eps, 3.0).unwrap();
    let gp = initial_state(&s0, &gp0, ap).unwrap().grad_psi;
    let dt = 0.5 * leapfrog_limit(&g, &ap);
    let ac = solve_acoustic(&s0, &gp, ap, horizon, emit, Integrator::Leapfrog { dt }).unwrap();
    let rho0 = s0.map(|s| 3.0 + eps * s);
    let traj = solve_cns(&rho0, &gp, &law, params, emit).unwrap();
    let times: Vec<f64> = ac.iter().map(|a| a.t).collect();
    let cmp = comparison_trajectory(&ac, &still_target(g, &times), &law, 2.0).unwrap();
    Pulse { traj, cmp, params }
}

fn rei(p: &Pulse) -> RelEntropyReport {
    let law = law();
    let b = renorm_b(&law, 7.5, divergence_bound(&p.cmp)).unwrap();
    rei_check(&p.traj, &p.cmp, &b, &law, &p.params, control_constant(&law), ReiTolerance::default()).unwrap()
}

#[test]
fn cutoff_profile_and_corrector() {
    let g = GridSpec::new(2, 4.0, 32, Boundary::NoSlipBox).unwrap();
    let v = VectorField::from_fn(g, |_| [1.0, -2.0, 0.0]);
    let (chi, w) = build_corrector(&v, &VectorField::zeros(g), 2.0).unwrap();
    for (i, &c) in chi.data.iter().enumerate() {
        let x = g.center_point(i);
        let d = (4.0 - x[0].abs()).min(4.0 - x[1].abs());
        assert!((0.0..=1.0).contains(&c));
        if d <= 1.0 {
            assert_eq!(c, 1.0);
        }
        if d >= 2.0 {
            assert_eq!(c, 0.0);
        }
    }
    // On every wall the corrected velocity v + w vanishes.
    let total = v.axpy(1.0, &w);
    let fs = g.face_len(0);
    for idx in 0..fs {
        let x = g.face_point(0, idx);
        if (4.0 - x[0].abs()) < 1e-12 {
            assert_eq!(total.comps[0][idx], 0.0);
        }
    }
    let thin = build_corrector(&v, &VectorField::zeros(g), 0.5);
    assert!(matches!(thin, Err(Error::Grid(_))));
    let per = GridSpec::new(2, 4.0, 32, Boundary::Periodic).unwrap();
    assert!(matches!(face_cutoff(per, 2.0), Err(Error::Grid(_))));
}

#[test]
fn relative_entropy_matches_pointwise_quadrature() {
    let law = law();
    let g = GridSpec::new(2, 2.0, 24, Boundary::NoSlipBox).unwrap();
    let rho = ScalarField::from_fn(g, |x| 3.0 + 1.5 * (x[0] * 1.3).sin() * (x[1] * 0.7).cos() + 4.0 * bump(x[0].hypot(x[1]), 1.0));
    let u = VectorField::from_fn(g, |x| [x[1].sin(), 0.5 * x[0], 0.0]);
    let eps = 0.3;
    let s = ScalarField::from_fn(g, |x| (x[0] - 0.2 * x[1]).cos());
    let gp = grad(&ScalarField::from_fn(g, |x| 0.3 * x[0] * x[1]));
    let ap = AcousticParams::from_law(&law, eps, 3.0).unwrap();
    let ac = AcousticState { s: s.clone(), psi: ScalarField::zeros(g), grad_psi: gp.clone(), t: 0.0, params: ap };
    let cmp = comparison_trajectory(&[ac], &still_target(g, &[0.0]), &law, 0.8).unwrap().remove(0);
    let state = FluidState { rho: rho.clone(), u: u.clone(), t: 0.0, ledger: Default::default() };
    let parts = relative_entropy(&state, &cmp, &law).unwrap();

    // Independent evaluation from the closed-form potential.
    let mut pot = 0.0;
    for i in 0..rho.data.len() {
        let (a, r) = (rho.data[i], 3.0 + eps * s.data[i]);
        let (pa, _, _) = law.potential_exact_derivs(a).unwrap();
        let (pr, dpr, _) = law.potential_exact_derivs(r).unwrap();
        pot += pa - pr - dpr * (a - r);
    }
    pot *= g.cell_volume() / (eps * eps);
    assert!((parts.potential - pot).abs() < 1e-9 * pot.abs(), "{} vs {pot}", parts.potential);

    let n = g.cells;
    let mut kin = 0.0;
    for a in 0..2 {
        for idx in 0..g.face_len(a) {
            let (i, j) = if a == 0 { (idx % (n + 1), idx / (n + 1)) } else { (idx % n, idx / n) };
            let along = if a == 0 { i } else { j };
            let cell = |ii: usize, jj: usize| rho.data[ii + n * jj];
            let rf = if along == 0 {
                cell(i, j)
            } else if along == n {
                if a == 0 { cell(i - 1, j) } else { cell(i, j - 1) }
            } else if a == 0 {
                0.5 * (cell(i, j) + cell(i - 1, j))
            } else {
                0.5 * (cell(i, j) + cell(i, j - 1))
            };
            let d = u.comps[a][idx] - cmp.velocity.comps[a][idx];
            kin += 0.5 * rf * d * d;
        }
    }
    kin *= g.cell_volume();
    assert!((parts.kinetic - kin).abs() < 1e-12 * kin, "{} vs {kin}", parts.kinetic);

    let same = FluidState { rho: cmp.r.clone(), u: cmp.velocity.clone(), t: 0.0, ledger: Default::default() };
    assert_eq!(relative_entropy(&same, &cmp, &law).unwrap().total(), 0.0);
}

#[test]
fn comparison_rejects_mismatched_inputs() {
    let law = law();
    let g = GridSpec::new(1, 4.0, 64, Boundary::NoSlipBox).unwrap();
    let ap = AcousticParams::from_law(&law, 0.5, 3.0).unwrap();
    let ac = |t: f64, amp: f64| AcousticState {
        s: ScalarField::constant(g, amp),
        psi: ScalarField::zeros(g),
        grad_psi: VectorField::zeros(g),
        t,
        params: ap,
    };
    let r = comparison_trajectory(&[ac(0.0, 0.0), ac(0.1, 0.0)], &still_target(g, &[0.0]), &law, 2.0);
    assert!(matches!(r, Err(Error::Sync(_))));
    let r = comparison_trajectory(&[ac(0.0, 0.0)], &still_target(g, &[0.3]), &law, 2.0);
    assert!(matches!(r, Err(Error::Sync(_))));
    // varrho + eps*s = 3 + 0.5*15 = 10.5 leaves the admissible window.
    let r = comparison_trajectory(&[ac(0.0, 15.0)], &still_target(g, &[0.0]), &law, 2.0);
    assert!(matches!(r, Err(Error::Parameter(m)) if m.contains("density bound")));
}

#[test]
fn inequality_holds_on_smooth_pulse() {
    let p = pulse(0.1, 0.05, 256, 0.002, 0.2);
    let rep = rei(&p);
    assert!(rep.pass, "{:?}", rep.rows.last());
    assert!(rep.density_control_pass);
    assert!(rep.max_source_mean < 1e-12);
    let last = rep.rows.last().unwrap();
    assert!(last.entropy > 0.0 && last.dissipation > 0.0);
    // The slack is a small fraction of the right side.
    assert!(last.lhs_minus_rhs.abs() < 0.05 * last.rhs.abs(), "{last:?}");
}

#[test]
fn inequality_slack_shrinks_with_resolution() {
    let slack = |n: usize| {
        let rep = rei(&pulse(0.2, 0.05, n, 0.004, 0.2));
        assert!(rep.pass);
        let last = rep.rows.last().unwrap();
        last.lhs_minus_rhs.abs() / last.rhs.abs()
    };
    let (coarse, fine) = (slack(64), slack(256));
    assert!(fine < coarse, "{coarse:e} -> {fine:e}");
}

#[test]
fn paired_terms_cancel() {
    let p = pulse(0.1, 0.05, 256, 0.002, 0.2);
    let pairs = cancellation_pairs(&p.traj, &p.cmp).unwrap();
    assert_eq!(pairs.len(), 3);
    for pair in &pairs {
        assert!(pair.first.abs() > 1e-3, "{pair:?}");
        assert!(pair.relative_mismatch < 1e-3, "{pair:?}");
    }
}

#[test]
fn corrector_decays_with_domain_size() {
    let d = 1.0;
    let mut norms = vec![];
    for l in [2.0 * d, 4.0 * d, 8.0 * d] {
        let cells = (16.0 * l) as usize;
        let g = GridSpec::new(2, l, cells, Boundary::NoSlipBox).unwrap();
        let v = VectorField::from_fn(g, |x| {
            let q = 1.0 + x[0] * x[0] + x[1] * x[1];
            [-x[1] / q, x[0] / q, 0.0]
        });
        let (_, w) = build_corrector(&v, &VectorField::zeros(g), d).unwrap();
        norms.push((w.l2(), w.lq(4.0)));
    }
    for k in 1..norms.len() {
        assert!(norms[k].0 < norms[k - 1].0, "{norms:?}");
        assert!(norms[k].1 < norms[k - 1].1, "{norms:?}");
    }
}

#[test]
fn corrector_norm_report() {
    let p = pulse(0.2, 0.05, 128, 0.01, 0.1);
    let rows = corrector_norms(&p.cmp, 2.0);
    assert_eq!(rows.len(), p.cmp.len());
    // The pulse starts inside the interior region, so the corrector starts at zero.
    assert!(rows[0].l2 < 1e-12);
    assert!(rows.iter().all(|r| r.w2p >= r.l2));
}

#[test]
fn mean_pressure_chain_at_equilibrium() {
    let law = law();
    let params = ScalingParams::new(0.1, 0.05, 2.0, 2.0, 3.0, 0.2, 1.0).unwrap();
    let g = GridSpec::new(2, 4.0, 16, Boundary::NoSlipBox).unwrap();
    let traj = solve_cns(&ScalarField::constant(g, 3.0), &VectorField::zeros(g), &law, params, 0.05).unwrap();
    let rep = mean_pressure_estimate(&traj, &law, &params, 0.25).unwrap();
    let expect = 0.2 * law.pressure(3.0).unwrap();
    assert!((rep.direct - expect).abs() < 1e-12 * expect, "{} vs {expect}", rep.direct);
    assert_eq!(rep.centered_direct, 0.0);
    assert_eq!(rep.centered_bogovskii, 0.0);
    assert!(rep.pass && rep.mean_below_ceiling);
}

#[test]
fn mean_pressure_chain_on_pulse() {
    let p = pulse(0.1, 0.05, 256, 0.002, 0.2);
    let rep = mean_pressure_estimate(&p.traj, &law(), &p.params, 0.25).unwrap();
    assert!(rep.pass);
    assert!(rep.direct <= rep.bound);
    let rel = (rep.centered_direct - rep.centered_bogovskii).abs() / rep.centered_direct.abs();
    assert!(rel < 0.05, "{} vs {}", rep.centered_direct, rep.centered_bogovskii);
}

/// Second, independent transcription of the rate bound.
fn rate_bound_oracle(i: &RateInputs, k: &RateConstants) -> f64 {
    let (e, n, r) = (i.eps, i.nu, i.radius);
    let first = k.c_dt * (e.powf(i.alpha) + 1.0 / r + n + e * e + e * e / (r * r) + e / n) + k.c2 * i.dist_u + k.c2 * i.dist_rho;
    let inner = 1.0 / (n * r) + k.c * n.sqrt() / r.powf(1.5) + 1.0;
    let ex = k.c_dt
        * (1.0 + e * e * n + e.powf(4.0 / 3.0) * (1.0 + r.powi(-4)) / n + e * e + r.powi(-2) + e * e * r.powi(-2))
        + k.c * e * e * inner / i.window_gap;
    first * ex.exp()
}

fn inputs(eps: f64) -> RateInputs {
    RateInputs {
        eps,
        nu: eps.powf(2.0 / 3.0),
        radius: 0.25 * eps.powf(-1.5),
        alpha: 0.5,
        eps0: 0.25,
        eps1: 1.0,
        window_gap: 6.5,
        dist_u: eps,
        dist_rho: eps,
    }
}

#[test]
fn rate_bound_matches_oracle_and_vanishes_on_path() {
    let k = RateConstants { c_dt: 1.7, c2: 0.4, c: 2.5 };
    let mut prev = f64::INFINITY;
    for eps in [0.2, 0.1, 0.05, 0.02, 0.01, 0.001, 1e-5] {
        let i = inputs(eps);
        let a = rate_bound_rhs(&i, &k).unwrap();
        let b = rate_bound_oracle(&i, &k);
        assert!((a - b).abs() <= 1e-13 * b, "{a} vs {b}");
        assert!(a < prev);
        prev = a;
    }
    assert!(prev < 0.2 * rate_bound_rhs(&inputs(0.2), &k).unwrap());
}

#[test]
fn rate_bound_domain_errors() {
    let k = RateConstants { c_dt: 1.0, c2: 1.0, c: 1.0 };
    let mut i = inputs(0.1);
    i.eps1 = 0.1;
    assert!(matches!(rate_bound_rhs(&i, &k), Err(Error::Parameter(_))));
    let mut i = inputs(0.3);
    i.eps1 = 1.0;
    assert!(matches!(rate_bound_rhs(&i, &k), Err(Error::Parameter(_))));
    let mut i = inputs(0.1);
    i.alpha = 1.0;
    assert!(matches!(rate_bound_rhs(&i, &k), Err(Error::Parameter(_))));
    assert_eq!(eps1_ceiling(&law(), 3.0, 2.0), 1.5);
    assert_eq!(eps1_ceiling(&law(), 8.0, 4.0), 0.5);
}

#[test]
fn calibration_meets_reference_gap() {
    let i = inputs(0.1);
    let k = calibrate_rate_constants(&i, 3.0).unwrap();
    let v = rate_bound_rhs(&i, &k).unwrap();
    assert!(v >= 3.0 && v < 3.0 * (1.0 + 1e-9), "{v}");
    assert!(matches!(calibrate_rate_constants(&i, f64::NAN), Err(Error::Fit(_))));
}

#[test]
fn report_files_round_trip() {
    let p = pulse(0.2, 0.05, 64, 0.02, 0.1);
    let rep = rei(&p);
    let dir = tempfile::tempdir().unwrap();
    rep.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("relent.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "tau,E,dissipation,pb_term,R1,R2,R3,lhs_minus_rhs");
    assert_eq!(lines.count(), rep.rows.len());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["pass"], serde_json::Value::Bool(rep.pass));
    assert_eq!(json["rows"].as_array().unwrap().len(), rep.rows.len());
}
