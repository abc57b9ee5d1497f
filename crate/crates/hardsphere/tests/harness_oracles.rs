use std::path::{Path, PathBuf};

use hardsphere::harness::*;
use hardsphere::Error;

fn reference_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference_1d.json")
}

fn small(out: &Path) -> StudyConfig {
    let mut cfg = StudyConfig::load(&reference_path()).unwrap();
    cfg.grid.cells = 128;
    cfg.horizon = 0.1;
    cfg.emit_dt = 0.01;
    cfg.output = out.to_path_buf();
    cfg
}

#[test]
fn fit_recovers_exact_power_laws() {
    let eps = [0.2, 0.1, 0.05, 0.025];
    let f = fit_rate(&eps, &eps).unwrap();
    assert!((f.slope - 1.0).abs() < 1e-12 && f.stderr < 1e-12);
    let g: Vec<f64> = eps.iter().map(|e| 3.0 * e.sqrt()).collect();
    assert!((fit_rate(&eps, &g).unwrap().slope - 0.5).abs() < 1e-12);
    assert!(matches!(fit_rate(&eps, &[1.0, 0.0, 1.0, 1.0]), Err(Error::Fit(_))));
    assert!(matches!(fit_rate(&eps[..2], &eps[..2]), Err(Error::Fit(_))));
}

#[test]
fn path_and_radius_violations_are_named() {
    let mut cfg = StudyConfig::load(&reference_path()).unwrap();
    cfg.path.a_r = 0.5;
    match validate_config(&cfg) {
        Err(Error::Config(m)) => assert!(m.contains("εR(ε) must diverge"), "{m}"),
        other => panic!("{other:?}"),
    }
    let mut cfg = StudyConfig::load(&reference_path()).unwrap();
    cfg.path.a_nu = 1.2;
    assert!(matches!(validate_config(&cfg), Err(Error::Config(m)) if m.contains("ε/ν(ε)")));
    let mut cfg = StudyConfig::load(&reference_path()).unwrap();
    cfg.path.r0 = 0.1;
    match validate_config(&cfg) {
        Err(Error::Config(m)) => assert!(m.contains("radius condition"), "{m}"),
        other => panic!("{other:?}"),
    }
    let mut cfg = StudyConfig::load(&reference_path()).unwrap();
    cfg.eps = vec![0.1, 0.2];
    assert!(matches!(validate_config(&cfg), Err(Error::Config(_))));
    let mut cfg = StudyConfig::load(&reference_path()).unwrap();
    cfg.data.rho_amplitude = 3.0;
    assert!(matches!(validate_config(&cfg), Err(Error::Config(m)) if m.contains("initial data bound")));
    let mut cfg = StudyConfig::load(&reference_path()).unwrap();
    cfg.eps0 = 0.15;
    assert!(matches!(validate_config(&cfg), Err(Error::Config(m)) if m.contains("eps0")));
}

#[test]
fn reference_config_normalizes_to_golden_points() {
    let cfg = StudyConfig::load(&reference_path()).unwrap();
    let norm = validate_config(&cfg).unwrap();
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("golden/reference_points.json")).unwrap();
    let pts = golden.as_array().unwrap();
    assert_eq!(norm.points.len(), pts.len());
    for (p, g) in norm.points.iter().zip(pts) {
        assert_eq!(p.cells as u64, g["cells"].as_u64().unwrap());
        for (a, key) in [(p.eps, "eps"), (p.nu, "nu"), (p.radius, "R"), (p.half_width, "half_width")] {
            let b = g[key].as_f64().unwrap();
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{key}: {a} vs {b}");
        }
        let e1 = g["eps1"].as_f64().unwrap();
        assert!((p.eps1 - e1).abs() <= 1e-6 * e1, "eps1 {} vs {e1}", p.eps1);
        assert!(p.eps < p.eps1 && p.data_size <= cfg.data_radius);
    }
}

#[test]
fn empty_report_writes_header_only() {
    let norm = NormalizedConfig {
        config: StudyConfig::load(&reference_path()).unwrap(),
        points: vec![],
        h: 0.1,
        config_hash: String::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let rep = run_study(&norm, &RunOptions { out: Some(dir.path().to_path_buf()), ..Default::default() }).unwrap();
    assert!(!rep.pass);
    let csv = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
    assert_eq!(csv, "eps,nu,R,sup_vel_gap,sup_dens_gap,rhs_bound,rei_pass\n");
}

#[test]
fn equilibrium_has_zero_gaps_and_no_slope() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.scenario = Scenario::Equilibrium;
    cfg.perturbation = Default::default();
    let rep = run_study(&validate_config(&cfg).unwrap(), &RunOptions::default()).unwrap();
    assert_eq!(rep.rows.len(), 3);
    for r in &rep.rows {
        assert_eq!(r.sup_vel_gap, 0.0);
        assert_eq!(r.sup_dens_gap, 0.0);
        assert_eq!(r.rei_pass, Some(true));
        let mp = r.mean_pressure.as_ref().unwrap();
        let expect = 0.1 * 3f64.powi(2) / 7f64.powi(3);
        assert!((mp.direct - expect).abs() < 1e-12 * expect);
    }
    assert!(rep.velocity_fit.is_none() && rep.fit_note.is_some());
    assert!(rep.pass && rep.monotone);
}

#[test]
fn single_point_report_has_no_slope() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.eps = vec![0.2];
    let rep = run_study(&validate_config(&cfg).unwrap(), &RunOptions::default()).unwrap();
    assert_eq!(rep.rows.len(), 1);
    assert!(rep.velocity_fit.is_none() && rep.density_fit.is_none());
    assert!(rep.rows[0].rei_pass == Some(true));
}

#[test]
fn reruns_are_byte_identical_and_seed_sensitive() {
    let run = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.seed = seed;
        let rep = run_study(&validate_config(&cfg).unwrap(), &RunOptions::default()).unwrap();
        assert!(rep.rows.iter().all(|r| r.error.is_none() && r.rei_pass == Some(true)));
        let csv = std::fs::read(dir.path().join("rates.csv")).unwrap();
        let json = std::fs::read(dir.path().join("report.json")).unwrap();
        assert!(dir.path().join("plot.gp").exists());
        (csv, json)
    };
    let a = run(7);
    let b = run(7);
    assert_eq!(a, b);
    assert_ne!(a.0, run(8).0);
}

#[test]
fn failed_point_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let norm = validate_config(&cfg).unwrap();
    let base = run_study(&norm, &RunOptions { out: Some(dir.path().join("a")), ..Default::default() }).unwrap();
    let mut broken = norm.clone();
    // A box too small to hold the corrector shell fails inside the point, not in validation.
    broken.points[1].half_width = 1.0;
    broken.points[1].cells = 16;
    let rep = run_study(&broken, &RunOptions { out: Some(dir.path().join("b")), ..Default::default() }).unwrap();
    assert!(rep.rows[1].error.is_some());
    assert!(!rep.pass);
    for k in [0, 2] {
        assert_eq!(rep.rows[k].sup_vel_gap, base.rows[k].sup_vel_gap);
        assert_eq!(rep.rows[k].sup_dens_gap, base.rows[k].sup_dens_gap);
        assert_eq!(rep.rows[k].rei_pass, base.rows[k].rei_pass);
    }
}

#[test]
fn only_flag_limits_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let rep = run_study(&validate_config(&cfg).unwrap(), &RunOptions { only: Some(Only::MeanPressure), out: None }).unwrap();
    assert!(rep.rows.iter().all(|r| r.rei_pass.is_none() && r.mean_pressure.is_some()));
    let csv = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",skipped")));
    assert!("bogus".parse::<Only>().is_err());
}

#[test]
fn config_hash_tracks_content() {
    let a = StudyConfig::load(&reference_path()).unwrap();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.output = PathBuf::from("elsewhere");
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}
