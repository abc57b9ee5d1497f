//! Study configuration, scenario library, ε-sweeps along limit paths, rate fits
//! and output emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::{bump, initial_state, leapfrog_limit, ols, solve_acoustic, AcousticParams, Integrator};
use crate::cns::{solve_cns, FluidState, ScalingParams};
use crate::eos::{l2_density_control_constant, pointwise_bounds_certificate, renorm_b, LawSpec, PressureLaw};
use crate::error::{Error, Result};
use crate::euler::{solve_euler_with, EulerData, EulerOptions};
use crate::fields::{grad, Boundary, GridSpec, ScalarField, VectorField};
use crate::par;
use crate::relent::{
    acoustic_sup, calibrate_rate_constants, cancellation_pairs, comparison_trajectory, divergence_bound, limit_distance,
    mean_pressure_estimate, periodic_target, rate_bound_rhs, rei_check, restrict_target, still_target,
    CancellationPair, MeanPressureReport, RateConstants, RateInputs, ReiTolerance, TargetFlow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Equilibrium,
    #[serde(rename = "acoustic-pulse-1d")]
    AcousticPulse1d,
    #[serde(rename = "taylor-green-coupled-2d")]
    TaylorGreenCoupled2d,
    NearBarrierBump,
}

impl Scenario {
    fn dim(&self, requested: Option<usize>) -> usize {
        match self {
            Scenario::Equilibrium => requested.unwrap_or(1),
            Scenario::AcousticPulse1d | Scenario::NearBarrierBump => 1,
            Scenario::TaylorGreenCoupled2d => 2,
        }
    }
}

/// `ν = nu0·ε^{a_nu}`, `R = R0·ε^{−a_R}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathRule {
    pub a_nu: f64,
    #[serde(default = "one")]
    pub nu0: f64,
    #[serde(rename = "a_R")]
    pub a_r: f64,
    #[serde(rename = "R0")]
    pub r0: f64,
}

/// Cells per axis at the first (largest) ε; the spacing is then held fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRule {
    pub cells: usize,
    #[serde(default)]
    pub dim: Option<usize>,
}

/// Amplitudes of the limit data `ρ⁽¹⁾₀`, `∇Ψ₀` and the Euler velocity.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub rho_amplitude: f64,
    pub u_amplitude: f64,
    #[serde(default)]
    pub v_amplitude: f64,
}

/// Seeded smooth offsets `amplitude·ε^power·g(x)` supported in `B(0, D)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub rho_amplitude: f64,
    pub u_amplitude: f64,
    #[serde(default = "one")]
    pub power: f64,
    #[serde(default = "three")]
    pub modes: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec { rho_amplitude: 0.0, u_amplitude: 0.0, power: 1.0, modes: 3 }
    }
}

fn one() -> f64 {
    1.0
}
fn three() -> usize {
    3
}
fn half() -> f64 {
    0.5
}
fn euler_tail() -> f64 {
    EulerOptions::default().tail_tol
}
fn one_worker() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub law: LawSpec,
    /// Strictly descending.
    pub eps: Vec<f64>,
    pub path: PathRule,
    pub grid: GridRule,
    #[serde(rename = "D")]
    pub data_radius: f64,
    pub varrho: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mu: f64,
    pub eps0: f64,
    pub emit_dt: f64,
    pub data: DataSpec,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    /// Exponent `α` of the rate bound.
    #[serde(default = "half")]
    pub alpha: f64,
    /// Outer threshold handed to the pointwise-bounds certificate.
    pub certificate_alpha0: f64,
    #[serde(default)]
    pub tolerance: ReiTolerance,
    #[serde(default = "one_worker")]
    pub workers: usize,
    /// Spectral tail tolerance of the Euler solve.
    #[serde(default = "euler_tail")]
    pub euler_tail_tol: f64,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON serialization.
    /// Digest of everything except the output location.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.output = PathBuf::new();
        let bytes = serde_json::to_vec(&keyed).unwrap_or_default();
        Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn dim(&self) -> usize {
        self.scenario.dim(self.grid.dim)
    }
}

/// One admissible sweep point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PointSpec {
    pub eps: f64,
    pub nu: f64,
    /// Radius after snapping the box to the common spacing.
    #[serde(rename = "R")]
    pub radius: f64,
    pub half_width: f64,
    pub cells: usize,
    /// `min{rho_bar − varrho, varrho} / sup|s|`.
    pub eps1: f64,
    /// `‖u₀,ε‖ + ‖ρ⁽¹⁾₀,ε‖ + ‖ρ⁽¹⁾₀,ε‖∞`.
    pub data_size: f64,
}

impl PointSpec {
    pub fn grid(&self, dim: usize) -> Result<GridSpec> {
        GridSpec::new(dim, self.half_width, self.cells, Boundary::NoSlipBox)
    }

    pub fn params(&self, cfg: &StudyConfig) -> Result<ScalingParams> {
        ScalingParams::new(self.eps, self.nu, self.radius, cfg.data_radius, cfg.varrho, cfg.horizon, cfg.mu)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalizedConfig {
    pub config: StudyConfig,
    pub points: Vec<PointSpec>,
    pub h: f64,
    pub config_hash: String,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    }
}

/// Limit data on a box grid: `(ρ⁽¹⁾₀, raw ∇Ψ₀)`.
fn limit_data(cfg: &StudyConfig, g: GridSpec) -> (ScalarField, VectorField) {
    let d = cfg.data_radius;
    let DataSpec { rho_amplitude: ar, u_amplitude: au, .. } = cfg.data;
    let r = |x: [f64; 3]| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    match cfg.scenario {
        Scenario::Equilibrium => (ScalarField::zeros(g), VectorField::zeros(g)),
        Scenario::AcousticPulse1d => (
            ScalarField::from_fn(g, |x| ar * bump(r(x), d)),
            VectorField::from_fn(g, |x| [au * bump(r(x), d), 0.0, 0.0]),
        ),
        Scenario::NearBarrierBump => (
            ScalarField::from_fn(g, |x| ar * bump(r(x), 0.5 * d)),
            VectorField::from_fn(g, |x| [au * bump(r(x), d), 0.0, 0.0]),
        ),
        Scenario::TaylorGreenCoupled2d => (
            ScalarField::from_fn(g, |x| ar * bump(r(x), d)),
            grad(&ScalarField::from_fn(g, |x| au * d * bump(r(x), d))),
        ),
    }
}

fn euler_data(cfg: &StudyConfig) -> Option<EulerData> {
    (cfg.scenario == Scenario::TaylorGreenCoupled2d && cfg.data.v_amplitude != 0.0)
        .then_some(EulerData::TaylorGreenPatch { radius: cfg.data_radius, amplitude: cfg.data.v_amplitude })
}

/// Random smooth profile `Σ c_m cos(mπx/D + φ_m)` per axis under a bump window.
struct Profile {
    coef: Vec<Vec<(f64, f64)>>,
    radius: f64,
}

impl Profile {
    fn new(rng: &mut ChaCha8Rng, dim: usize, modes: usize, radius: f64) -> Self {
        let coef = (0..dim)
            .map(|_| (1..=modes).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU))).collect())
            .collect();
        Profile { coef, radius }
    }

    fn at(&self, x: [f64; 3]) -> f64 {
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let w = bump(r, self.radius);
        if w == 0.0 {
            return 0.0;
        }
        let mut v = w;
        for (a, cs) in self.coef.iter().enumerate() {
            let k = std::f64::consts::PI / self.radius;
            v *= cs.iter().enumerate().map(|(m, (c, ph))| c * ((m + 1) as f64 * k * x[a] + ph).cos()).sum::<f64>();
        }
        v
    }
}

/// `(δρ⁽¹⁾, δu)` at one ε.
fn perturbations(cfg: &StudyConfig, g: GridSpec, eps: f64) -> (ScalarField, VectorField) {
    let p = cfg.perturbation;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = g.dim;
    let shape_rho = Profile::new(&mut rng, dim, p.modes, cfg.data_radius);
    let shape_u: Vec<Profile> = (0..dim).map(|_| Profile::new(&mut rng, dim, p.modes, cfg.data_radius)).collect();
    let scale = eps.powf(p.power);
    let drho = ScalarField::from_fn(g, |x| p.rho_amplitude * scale * shape_rho.at(x));
    let du = VectorField::from_fn(g, |x| {
        let mut out = [0.0; 3];
        for (a, prof) in shape_u.iter().enumerate() {
            out[a] = p.u_amplitude * scale * prof.at(x);
        }
        out
    });
    (drho, du)
}

fn acoustic_run(cfg: &StudyConfig, law: &PressureLaw, g: GridSpec, eps: f64) -> Result<Vec<crate::acoustics::AcousticState>> {
    let (s0, gp_raw) = limit_data(cfg, g);
    let ap = AcousticParams::from_law(law, eps, cfg.varrho)?;
    let gp0 = initial_state(&s0, &gp_raw, ap)?.grad_psi;
    let dt = 0.5 * leapfrog_limit(&g, &ap);
    solve_acoustic(&s0, &gp0, ap, cfg.horizon, cfg.emit_dt, Integrator::Leapfrog { dt })
}

/// Checks every admissibility inequality and fixes the sweep geometry.
pub fn validate_config(cfg: &StudyConfig) -> Result<NormalizedConfig> {
    let bad = |m: String| Err(Error::Config(m));
    if cfg.eps.is_empty() {
        return bad("eps list is empty".into());
    }
    if cfg.eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return bad(format!("eps values must be positive: {:?}", cfg.eps));
    }
    if cfg.eps.windows(2).any(|w| w[1] >= w[0]) {
        return bad(format!("eps list must be strictly descending: {:?}", cfg.eps));
    }
    let PathRule { a_nu, nu0, a_r, r0 } = cfg.path;
    if !(a_r > 1.0) {
        return bad(format!("limit path: εR(ε) must diverge (need a_R > 1, got {a_r})"));
    }
    if !(a_nu > 0.0) {
        return bad(format!("limit path: ν(ε) must vanish (need a_nu > 0, got {a_nu})"));
    }
    if !(a_nu < 1.0) {
        return bad(format!("limit path: ε/ν(ε) must vanish (need a_nu < 1, got {a_nu})"));
    }
    if !(nu0 > 0.0 && r0 > 0.0) {
        return bad(format!("path prefactors must be positive (nu0 = {nu0}, R0 = {r0})"));
    }
    for (name, v) in [("D", cfg.data_radius), ("varrho", cfg.varrho), ("T", cfg.horizon), ("mu", cfg.mu), ("eps0", cfg.eps0), ("emit_dt", cfg.emit_dt)] {
        if !(v > 0.0 && v.is_finite()) {
            return bad(format!("{name} = {v} must be positive"));
        }
    }
    if cfg.emit_dt > cfg.horizon {
        return bad(format!("emit_dt = {} exceeds T = {}", cfg.emit_dt, cfg.horizon));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return bad(format!("alpha = {} must lie in (0, 1)", cfg.alpha));
    }
    if cfg.workers == 0 {
        return bad("workers must be at least 1".into());
    }
    let dim = cfg.dim();
    if !(1..=2).contains(&dim) {
        return bad(format!("dimension {dim} not supported by the sweep"));
    }
    let law = cfg.law.build().map_err(config_err)?;
    if !(cfg.certificate_alpha0 > 0.0 && cfg.certificate_alpha0 < 0.5 * law.rho_bar()) {
        return bad(format!("certificate_alpha0 = {} must lie in (0, rho_bar/2)", cfg.certificate_alpha0));
    }
    let d = cfg.data_radius;
    let nominal = |e: f64| (nu0 * e.powf(a_nu), r0 * e.powf(-a_r));
    let l0 = nominal(cfg.eps[0]).1 + d;
    let cells0 = cfg.grid.cells;
    if cells0 < 8 || cells0 % 2 != 0 {
        return bad(format!("grid.cells = {cells0} must be even and at least 8"));
    }
    let h = 2.0 * l0 / cells0 as f64;
    let mut points = Vec::with_capacity(cfg.eps.len());
    for &eps in &cfg.eps {
        let (nu, r_nom) = nominal(eps);
        let half_cells = ((r_nom + d) / h).round() as usize;
        let cells = 2 * half_cells;
        let half_width = half_cells as f64 * h;
        let radius = half_width - d;
        let p = PointSpec { eps, nu, radius, half_width, cells, eps1: f64::INFINITY, data_size: 0.0 };
        let params = p.params(cfg).map_err(config_err)?;
        params.check_background(&law, cfg.eps0).map_err(config_err)?;
        params.check_isolation(&law).map_err(config_err)?;
        if 2.0 * d > half_width {
            return bad(format!("box half width {half_width} leaves no room for data and corrector shell (2D = {})", 2.0 * d));
        }
        points.push(p);
    }
    // Initial-data size and the density ceiling need the grids and acoustic solves.
    let checked: Vec<Result<PointSpec>> = par::map_slice(&points, |p| {
        let g = p.grid(dim)?;
        let (rho1, gp_raw) = limit_data(cfg, g);
        let (drho, du) = perturbations(cfg, g, p.eps);
        let ap = AcousticParams::from_law(&law, p.eps, cfg.varrho)?;
        let gp0 = initial_state(&rho1, &gp_raw, ap)?.grad_psi;
        let rho_e = rho1.axpy(1.0, &drho);
        let u_e = gp0.axpy(1.0, &du);
        let size = u_e.l2() + rho_e.l2() + rho_e.max_abs();
        let sup = acoustic_sup(&acoustic_run(cfg, &law, g, p.eps)?);
        let eps1 = crate::relent::eps1_ceiling(&law, cfg.varrho, sup);
        Ok(PointSpec { eps1, data_size: size, ..*p })
    });
    let mut out = Vec::with_capacity(points.len());
    for p in checked {
        let p = p.map_err(config_err)?;
        if p.data_size > d {
            return bad(format!("initial data bound: ‖u₀‖ + ‖ρ⁽¹⁾₀‖ + ‖ρ⁽¹⁾₀‖∞ = {:.4} exceeds D = {d} at eps = {}", p.data_size, p.eps));
        }
        if !(p.eps < p.eps1) {
            return bad(format!("density ceiling: eps = {} must lie below eps1 = {:.4}", p.eps, p.eps1));
        }
        out.push(p);
    }
    Ok(NormalizedConfig { config: cfg.clone(), points: out, h, config_hash: cfg.hash() })
}

/// Which per-point evaluations to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Only {
    LimitDistance,
    Rei,
    MeanPressure,
}

impl std::str::FromStr for Only {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "limit-distance" => Ok(Only::LimitDistance),
            "rei" => Ok(Only::Rei),
            "mean-pressure" => Ok(Only::MeanPressure),
            _ => Err(Error::Config(format!("unknown test {s:?}; expected limit-distance, rei or mean-pressure"))),
        }
    }
}

/// Run-time overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub only: Option<Only>,
    pub out: Option<PathBuf>,
}

/// Outcome of one sweep point.
#[derive(Clone, Debug, Serialize)]
pub struct RateRow {
    pub eps: f64,
    pub nu: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    pub cells: usize,
    pub sup_vel_gap: f64,
    pub sup_dens_gap: f64,
    pub rhs_bound: f64,
    /// `None` when the inequality check was skipped.
    pub rei_pass: Option<bool>,
    pub rei_max_violation: Option<f64>,
    pub b_active: Option<bool>,
    pub density_control_pass: Option<bool>,
    pub mean_pressure: Option<MeanPressureReport>,
    pub cancellation: Option<Vec<CancellationPair>>,
    pub eps1: f64,
    pub dist_u: f64,
    pub dist_rho: f64,
    pub bound_pass: bool,
    pub error: Option<String>,
}

impl RateRow {
    fn failed(p: &PointSpec, msg: String) -> Self {
        RateRow {
            eps: p.eps,
            nu: p.nu,
            radius: p.radius,
            cells: p.cells,
            sup_vel_gap: f64::NAN,
            sup_dens_gap: f64::NAN,
            rhs_bound: f64::NAN,
            rei_pass: Some(false),
            rei_max_violation: None,
            b_active: None,
            density_control_pass: None,
            mean_pressure: None,
            cancellation: None,
            eps1: p.eps1,
            dist_u: f64::NAN,
            dist_rho: f64::NAN,
            bound_pass: false,
            error: Some(msg),
        }
    }

    fn ok(&self) -> bool {
        self.error.is_none()
            && self.rei_pass.unwrap_or(true)
            && self.density_control_pass.unwrap_or(true)
            && self.mean_pressure.as_ref().map(|m| m.pass).unwrap_or(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub stderr: f64,
    pub points: usize,
}

/// Least squares of `log gap` against `log ε`.
pub fn fit_rate(eps: &[f64], gaps: &[f64]) -> Result<RateFit> {
    if eps.len() != gaps.len() {
        return Err(Error::Fit(format!("{} eps values for {} gaps", eps.len(), gaps.len())));
    }
    if eps.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", eps.len())));
    }
    if let Some(g) = gaps.iter().find(|&&g| !(g > 0.0 && g.is_finite())) {
        return Err(Error::Fit(format!("gap {g} is not positive")));
    }
    if let Some(e) = eps.iter().find(|&&e| !(e > 0.0)) {
        return Err(Error::Fit(format!("eps {e} is not positive")));
    }
    let x: Vec<f64> = eps.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = gaps.iter().map(|v| v.ln()).collect();
    let (slope, stderr) = ols(&x, &y);
    Ok(RateFit { slope, stderr: if stderr.is_nan() { 0.0 } else { stderr }, points: eps.len() })
}

#[derive(Clone, Debug, Serialize)]
pub struct RateReport {
    pub scenario: Scenario,
    pub config_hash: String,
    pub tolerance: ReiTolerance,
    pub h: f64,
    pub rows: Vec<RateRow>,
    pub constants: Option<RateConstants>,
    pub velocity_fit: Option<RateFit>,
    pub density_fit: Option<RateFit>,
    pub fit_note: Option<String>,
    /// Both sup gaps are nonincreasing as ε decreases.
    pub monotone: bool,
    /// Every point lies below the bound calibrated at the smallest ε. Reported,
    /// not part of `pass`: the calibration point fixes the constants only there.
    pub bound_consistent: bool,
    pub pass: bool,
}

impl RateReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("eps,nu,R,sup_vel_gap,sup_dens_gap,rhs_bound,rei_pass\n");
        for r in &self.rows {
            let flag = match r.rei_pass {
                Some(true) => "true",
                Some(false) => "false",
                None => "skipped",
            };
            let _ = writeln!(
                s,
                "{:.6e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{flag}",
                r.eps, r.nu, r.radius, r.sup_vel_gap, r.sup_dens_gap, r.rhs_bound
            );
        }
        s
    }
}

/// Per-point directory name.
pub fn point_dir(out: &Path, eps: f64) -> PathBuf {
    out.join("points").join(format!("eps_{eps:.4e}"))
}

struct Shared {
    law: PressureLaw,
    control_c: f64,
    alpha1: f64,
    /// Euler target on the periodic cell of the largest box.
    target: Option<Vec<TargetFlow>>,
}

struct PointOutcome {
    row: RateRow,
    gap_total: f64,
    inputs: RateInputs,
}

fn gaps_csv(traj: &[FluidState], gaps: &[(f64, f64)], entropy: Option<&[f64]>) -> String {
    let mut s = String::from("tau,vel_gap,dens_gap,E,kinetic,potential,dissipation\n");
    for (k, (st, (v, d))) in traj.iter().zip(gaps).enumerate() {
        let e = entropy.map(|e| e[k]).unwrap_or(f64::NAN);
        let l = st.ledger;
        let _ = writeln!(s, "{:.9e},{v:.12e},{d:.12e},{e:.12e},{:.12e},{:.12e},{:.12e}", st.t, l.kinetic, l.potential, l.dissipation);
    }
    s
}

fn run_point(cfg: &StudyConfig, p: &PointSpec, shared: &Shared, opts: &RunOptions, out: &Path) -> Result<PointOutcome> {
    let law = &shared.law;
    let dim = cfg.dim();
    let g = p.grid(dim)?;
    let params = p.params(cfg)?;
    let eps = p.eps;
    let d = cfg.data_radius;
    let ac = acoustic_run(cfg, law, g, eps)?;
    let target = match &shared.target {
        Some(t) => restrict_target(t, g)?,
        None => still_target(g, &ac.iter().map(|a| a.t).collect::<Vec<_>>()),
    };
    let cmp = comparison_trajectory(&ac, &target, law, d)?;
    let (rho1, _) = limit_data(cfg, g);
    let (drho, du) = perturbations(cfg, g, eps);
    let c0 = &cmp[0];
    let rho0 = rho1.axpy(1.0, &drho).map(|x| cfg.varrho + eps * x);
    let u0 = c0.velocity.axpy(1.0, &du);
    let traj = solve_cns(&rho0, &u0, law, params, cfg.emit_dt)?;
    if traj.len() != cmp.len() {
        return Err(Error::Sync(format!("{} fluid and {} comparison snapshots", traj.len(), cmp.len())));
    }
    let dir = point_dir(out, eps);
    fs::create_dir_all(&dir)?;

    let run_all = opts.only.is_none();
    let wants = |o: Only| run_all || opts.only == Some(o);
    let gaps: Vec<(f64, f64)> = if wants(Only::LimitDistance) || wants(Only::Rei) {
        traj.iter().zip(&cmp).map(|(s, c)| limit_distance(s, c)).collect::<Result<_>>()?
    } else {
        vec![]
    };
    let sup_vel = gaps.iter().map(|g| g.0).fold(f64::NAN, f64::max);
    let sup_dens = gaps.iter().map(|g| g.1).fold(f64::NAN, f64::max);

    let (mut rei_pass, mut viol, mut b_active, mut dc, mut entropy) = (None, None, None, None, None);
    let mut cancellation = None;
    if wants(Only::Rei) {
        let b = renorm_b(law, shared.alpha1, divergence_bound(&cmp))?;
        let rep = rei_check(&traj, &cmp, &b, law, &params, shared.control_c, cfg.tolerance)?;
        rep.write(&dir)?;
        rei_pass = Some(rep.pass);
        viol = Some(rep.rows.iter().map(|r| r.lhs_minus_rhs).fold(f64::NEG_INFINITY, f64::max));
        b_active = Some(rep.b_active);
        dc = Some(rep.density_control_pass);
        entropy = Some(rep.rows.iter().map(|r| r.entropy).collect::<Vec<_>>());
        if traj.len() >= 3 {
            cancellation = Some(cancellation_pairs(&traj, &cmp)?);
        }
    }
    if !gaps.is_empty() {
        fs::write(dir.join("gaps.csv"), gaps_csv(&traj, &gaps, entropy.as_deref()))?;
    }
    let mean_pressure = if wants(Only::MeanPressure) {
        let mp = mean_pressure_estimate(&traj, law, &params, cfg.eps0)?;
        fs::write(dir.join("mean_pressure.json"), serde_json::to_string_pretty(&mp)?)?;
        Some(mp)
    } else {
        None
    };
    let dist_u = du.l2().powi(2);
    let dist_rho = drho.l2().powi(2);
    let inputs = RateInputs {
        eps,
        nu: p.nu,
        radius: p.radius,
        alpha: cfg.alpha,
        eps0: cfg.eps0,
        eps1: p.eps1,
        window_gap: law.rho_bar() - cfg.varrho - cfg.eps0 * d,
        dist_u,
        dist_rho,
    };
    let row = RateRow {
        eps,
        nu: p.nu,
        radius: p.radius,
        cells: p.cells,
        sup_vel_gap: sup_vel,
        sup_dens_gap: sup_dens,
        rhs_bound: f64::NAN,
        rei_pass,
        rei_max_violation: viol,
        b_active,
        density_control_pass: dc,
        mean_pressure,
        cancellation,
        eps1: p.eps1,
        dist_u,
        dist_rho,
        bound_pass: true,
        error: None,
    };
    let gap_total = gaps.iter().map(|g| g.0 + g.1).fold(0.0, f64::max);
    Ok(PointOutcome { row, gap_total, inputs })
}

#[cfg(feature = "parallel")]
fn with_workers<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_workers<T: Send>(_: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}

/// Runs every sweep point, isolating failures, and then calibrates and applies
/// the rate bound.
pub fn run_study(norm: &NormalizedConfig, opts: &RunOptions) -> Result<RateReport> {
    let cfg = &norm.config;
    let out = opts.out.clone().unwrap_or_else(|| cfg.output.clone());
    fs::create_dir_all(&out)?;
    let law = cfg.law.build()?;
    let cert = pointwise_bounds_certificate(&law, cfg.certificate_alpha0)?;
    let control_c = l2_density_control_constant(&law, &cert)?;
    let target = match euler_data(cfg) {
        Some(data) => {
            let widest = norm.points.iter().max_by_key(|p| p.cells).ok_or_else(|| Error::Config("no sweep points".into()))?;
            let g = GridSpec::new(2, widest.half_width, widest.cells, Boundary::Periodic)?;
            let opts = EulerOptions { tail_tol: cfg.euler_tail_tol, ..EulerOptions::default() };
            let traj = solve_euler_with(&data.velocity(g)?, cfg.horizon, cfg.emit_dt, &opts)?;
            Some(periodic_target(&traj)?)
        }
        None => None,
    };
    let shared = Shared { law, control_c, alpha1: cert.alpha1, target };
    let outcomes: Vec<std::result::Result<PointOutcome, String>> = with_workers(cfg.workers, || {
        par::map_slice(&norm.points, |p| run_point(cfg, p, &shared, opts, &out).map_err(|e| e.to_string()))
    });

    // Calibrate at the smallest successful ε.
    let reference = outcomes.iter().rev().find_map(|o| o.as_ref().ok());
    let constants = match reference {
        Some(r) if r.gap_total.is_finite() => Some(calibrate_rate_constants(&r.inputs, r.gap_total)?),
        _ => None,
    };
    let mut rows = Vec::with_capacity(outcomes.len());
    for (p, o) in norm.points.iter().zip(outcomes) {
        match o {
            Ok(mut pt) => {
                if let Some(k) = &constants {
                    match rate_bound_rhs(&pt.inputs, k) {
                        Ok(v) => {
                            pt.row.rhs_bound = v;
                            pt.row.bound_pass = !(pt.gap_total > v * (1.0 + 1e-9));
                        }
                        Err(e) => {
                            pt.row.bound_pass = false;
                            pt.row.error = Some(e.to_string());
                        }
                    }
                }
                rows.push(pt.row);
            }
            Err(msg) => rows.push(RateRow::failed(p, msg)),
        }
    }
    let good: Vec<&RateRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let monotone = good.windows(2).all(|w| w[1].sup_vel_gap <= w[0].sup_vel_gap && w[1].sup_dens_gap <= w[0].sup_dens_gap);
    let eps: Vec<f64> = good.iter().map(|r| r.eps).collect();
    let vel: Vec<f64> = good.iter().map(|r| r.sup_vel_gap).collect();
    let dens: Vec<f64> = good.iter().map(|r| r.sup_dens_gap).collect();
    let (velocity_fit, density_fit, fit_note) = match (fit_rate(&eps, &vel), fit_rate(&eps, &dens)) {
        (Ok(a), Ok(b)) => (Some(a), Some(b), None),
        (a, b) => {
            let note = [a.err(), b.err()].into_iter().flatten().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
            (None, None, Some(note))
        }
    };
    let slopes_ok = match (&velocity_fit, &density_fit) {
        (Some(a), Some(b)) => a.slope > 0.0 && b.slope > 0.0,
        _ => true,
    };
    let pass = !rows.is_empty() && rows.iter().all(|r| r.ok()) && monotone && slopes_ok;
    let rows_bound = rows.iter().all(|r| r.bound_pass);
    let report = RateReport {
        scenario: cfg.scenario,
        config_hash: norm.config_hash.clone(),
        tolerance: cfg.tolerance,
        h: norm.h,
        rows,
        constants,
        velocity_fit,
        density_fit,
        fit_note,
        monotone,
        bound_consistent: rows_bound,
        pass,
    };
    emit_outputs(&report, &out)?;
    Ok(report)
}

const PLOT_SCRIPT: &str = r#"# gnuplot script: gap-vs-eps, energy ledgers and decay fits
set datafile separator ','
set terminal pngcairo size 1200,400
set output 'study.png'
set multiplot layout 1,3
set logscale xy
set key top left
set xlabel 'eps'
fv(x) = av * x**bv
fd(x) = ad * x**bd
av = 1; bv = 1; ad = 1; bd = 1
fit log(fv(x)) 'rates.csv' every ::1 using 1:(log($4)) via av, bv
fit log(fd(x)) 'rates.csv' every ::1 using 1:(log($5)) via ad, bd
set title 'sup gaps'
plot 'rates.csv' every ::1 using 1:4 with linespoints title 'velocity gap', \
     'rates.csv' every ::1 using 1:5 with linespoints title 'density gap', \
     'rates.csv' every ::1 using 1:6 with lines title 'bound', \
     fv(x) title sprintf('fit slope %.2f', bv), fd(x) title sprintf('fit slope %.2f', bd)
unset logscale
set xlabel 'tau'
set title 'energy ledgers'
files = system('ls points/*/gaps.csv')
plot for [f in files] f every ::1 using 1:($5+$6) with lines title f
set title 'relative entropy'
plot for [f in files] f every ::1 using 1:4 with lines title f
unset multiplot
"#;

/// Writes `rates.csv`, `report.json` and `plot.gp`.
pub fn emit_outputs(report: &RateReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("rates.csv"), report.csv())?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("plot.gp"), PLOT_SCRIPT)?;
    Ok(())
}

/// Reads `rates.csv` back as `(eps, sup_vel_gap, sup_dens_gap)` rows.
pub fn read_rates(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("eps,nu,R,sup_vel_gap,sup_dens_gap,rhs_bound,rei_pass") => {}
        other => return Err(Error::Config(format!("unexpected rates header {other:?}"))),
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .ok_or_else(|| Error::Config(format!("short row {l:?}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("row {l:?}: {e}")))
            };
            Ok((num(0)?, num(3)?, num(4)?))
        })
        .collect()
}
