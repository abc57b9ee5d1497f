//! Linear acoustic system `ε ∂t s + ϱ ΔΨ = 0`, `ε ∂t ∇Ψ + (p′(ϱ)/ϱ) ∇s = 0`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::eos::PressureLaw;
use crate::error::{Error, Result};
use crate::fields::{self, grad, laplacian, spectral, Boundary, GridSpec, ScalarField, VectorField};
use crate::par;

/// Mach number, background density and sound-speed squared `p′(ϱ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AcousticParams {
    pub eps: f64,
    pub varrho: f64,
    pub dp: f64,
}

impl AcousticParams {
    pub fn new(eps: f64, varrho: f64, dp: f64) -> Result<Self> {
        if !(eps > 0.0 && varrho > 0.0 && dp > 0.0) {
            return Err(Error::Parameter(format!("acoustic parameters must be positive (eps={eps}, varrho={varrho}, p'={dp})")));
        }
        Ok(AcousticParams { eps, varrho, dp })
    }

    pub fn from_law(law: &PressureLaw, eps: f64, varrho: f64) -> Result<Self> {
        Self::new(eps, varrho, law.dpressure(varrho)?)
    }

    /// Wave speed `√p′(ϱ)/ε`.
    pub fn speed(&self) -> f64 {
        self.dp.sqrt() / self.eps
    }
}

#[derive(Clone, Debug)]
pub struct AcousticState {
    pub s: ScalarField,
    pub psi: ScalarField,
    pub grad_psi: VectorField,
    pub t: f64,
    pub params: AcousticParams,
}

/// Builds the initial state, recovering `Ψ₀` from `div grad_psi0` by a Poisson solve.
pub fn initial_state(s0: &ScalarField, grad_psi0: &VectorField, params: AcousticParams) -> Result<AcousticState> {
    s0.grid.ensure_same(&grad_psi0.grid)?;
    let d = fields::div(grad_psi0);
    let psi = match s0.grid.boundary {
        Boundary::Periodic => fields::poisson_periodic(&d)?,
        Boundary::NoSlipBox => fields::poisson_neumann(&d)?,
    };
    let grad_psi = grad(&psi);
    let scale = grad_psi0.l2();
    let mismatch = grad_psi.axpy(-1.0, grad_psi0).l2();
    if mismatch > 1e-8 * scale.max(f64::MIN_POSITIVE) && mismatch > 1e-14 {
        return Err(Error::Curl(format!("initial potential gradient has a rotational part of relative size {:e}", mismatch / scale)));
    }
    Ok(AcousticState { s: s0.clone(), psi, grad_psi, t: 0.0, params })
}

/// Energy `p′(ϱ)‖s‖² + ϱ²‖∇Ψ‖²`.
pub fn acoustic_energy(state: &AcousticState) -> f64 {
    let p = state.params;
    p.dp * state.s.l2().powi(2) + p.varrho * p.varrho * state.grad_psi.l2().powi(2)
}

/// Discrete energy conserved by the leapfrog step of size `dt`: the potential
/// term pairs `∇Ψ` at the two half steps around the current time.
pub fn leapfrog_energy(state: &AcousticState, dt: f64) -> f64 {
    let p = state.params;
    let kick = p.dp / (p.varrho * p.eps);
    let gs = grad(&state.s).l2().powi(2);
    acoustic_energy(state) - p.varrho * p.varrho * (0.5 * dt * kick).powi(2) * gs
}

/// Exact spectral propagation of a periodic state by `dt` (any sign).
pub fn propagate_spectral(state: &AcousticState, dt: f64) -> Result<AcousticState> {
    let g = state.s.grid;
    if g.boundary != Boundary::Periodic {
        return Err(Error::Grid("spectral propagator needs a periodic grid".into()));
    }
    let AcousticParams { eps, varrho, dp } = state.params;
    let c = state.params.speed();
    let s_hat = spectral::forward(&g, &state.s.data);
    let psi_hat = spectral::forward(&g, &state.psi.data);
    let mut s_new = Vec::with_capacity(s_hat.len());
    let mut psi_new = Vec::with_capacity(s_hat.len());
    for (idx, (&sh, &ph)) in s_hat.iter().zip(&psi_hat).enumerate() {
        let (k, _) = spectral::wavevector(&g, idx);
        let kk = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
        if kk == 0.0 {
            s_new.push(sh);
            psi_new.push(ph - dp / (varrho * eps) * dt * sh);
            continue;
        }
        let w = c * kk;
        let (sn, cs) = (w * dt).sin_cos();
        s_new.push(sh * cs + varrho * kk * kk / (eps * w) * sn * ph);
        psi_new.push(ph * cs - dp / (varrho * eps * w) * sn * sh);
    }
    let s = ScalarField { grid: g, data: spectral::inverse(&g, s_new) };
    let psi = ScalarField { grid: g, data: spectral::inverse(&g, psi_new) };
    let grad_psi = grad(&psi);
    Ok(AcousticState { s, psi, grad_psi, t: state.t + dt, params: state.params })
}

/// Largest stable leapfrog step `0.9 h ε / (√p′(ϱ) √dim)`.
pub fn leapfrog_limit(grid: &GridSpec, params: &AcousticParams) -> f64 {
    0.9 * grid.h() / (params.speed() * (grid.dim as f64).sqrt())
}

/// One velocity-Verlet step of the wave system on any grid.
pub fn leapfrog_step(state: &AcousticState, dt: f64) -> Result<AcousticState> {
    let limit = leapfrog_limit(&state.s.grid, &state.params);
    if dt.abs() > limit {
        return Err(Error::Cfl(format!("leapfrog step {dt:e} exceeds {limit:e}")));
    }
    let AcousticParams { eps, varrho, dp } = state.params;
    let kick = dp / (varrho * eps);
    let half = state.psi.axpy(-0.5 * dt * kick, &state.s);
    let s = state.s.axpy(-dt * varrho / eps, &laplacian(&half));
    let psi = half.axpy(-0.5 * dt * kick, &s);
    let grad_psi = grad(&psi);
    Ok(AcousticState { s, psi, grad_psi, t: state.t + dt, params: state.params })
}

/// Integrator choice for [`solve_acoustic`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Integrator {
    /// Exact per-mode propagator (periodic grids).
    Spectral,
    /// Velocity Verlet with the given step.
    Leapfrog { dt: f64 },
}

/// Trajectory emitted every `emit_dt` on `[0, horizon]`.
pub fn solve_acoustic(
    s0: &ScalarField,
    grad_psi0: &VectorField,
    params: AcousticParams,
    horizon: f64,
    emit_dt: f64,
    integrator: Integrator,
) -> Result<Vec<AcousticState>> {
    if !(horizon >= 0.0 && emit_dt > 0.0) {
        return Err(Error::Parameter(format!("horizon {horizon} and emit interval {emit_dt} must be positive")));
    }
    let init = initial_state(s0, grad_psi0, params)?;
    let count = (horizon / emit_dt).round() as usize;
    let times: Vec<f64> = (0..=count).map(|k| (k as f64 * emit_dt).min(horizon)).collect();
    match integrator {
        Integrator::Spectral => {
            let states: Vec<Result<AcousticState>> = par::map_slice(&times, |&t| propagate_spectral(&init, t));
            states.into_iter().collect()
        }
        Integrator::Leapfrog { dt } => {
            let limit = leapfrog_limit(&s0.grid, &params);
            if dt > limit {
                return Err(Error::Cfl(format!("leapfrog step {dt:e} exceeds {limit:e}")));
            }
            let mut out = vec![init.clone()];
            let mut state = init;
            for &t in &times[1..] {
                while state.t < t - 1e-12 * t.max(1.0) {
                    let step = dt.min(t - state.t);
                    state = leapfrog_step(&state, step)?;
                }
                out.push(state.clone());
            }
            Ok(out)
        }
    }
}

/// `u₀ − H(u₀)`: the gradient part feeding the acoustic potential.
pub fn gradient_part(u0: &VectorField) -> Result<VectorField> {
    Ok(u0.axpy(-1.0, &fields::helmholtz_project(u0)?))
}

/// `(‖s‖_{W^{k,2}}, ‖∇Ψ‖_{W^{k,2}})`.
pub fn sobolev_pair(state: &AcousticState, k: u32) -> (f64, f64) {
    (state.s.sobolev(k), state.grad_psi.sobolev(k))
}

/// Largest `|s|` or `|∇Ψ|` at points farther than `radius` from the origin.
pub fn max_outside(state: &AcousticState, radius: f64) -> f64 {
    let g = state.s.grid;
    let norm = |x: [f64; 3]| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let mut m: f64 = 0.0;
    for (i, v) in state.s.data.iter().enumerate() {
        if norm(g.center_point(i)) > radius {
            m = m.max(v.abs());
        }
    }
    for a in 0..g.dim {
        for (i, v) in state.grad_psi.comps[a].iter().enumerate() {
            if norm(g.face_point(a, i)) > radius {
                m = m.max(v.abs());
            }
        }
    }
    m
}

/// Smooth compactly supported profile `exp(1 − 1/(1 − (r/D)²)²)`.
pub fn bump(r: f64, radius: f64) -> f64 {
    let x = r / radius;
    if x.abs() >= 1.0 {
        0.0
    } else {
        let q = 1.0 - x * x;
        (1.0 - 1.0 / (q * q)).exp()
    }
}

/// One row of a decay measurement.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecaySample {
    pub tau: f64,
    pub lq_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub q: f64,
    pub predicted: f64,
    pub slope: f64,
    pub stderr: f64,
    pub samples: Vec<DecaySample>,
}

impl DecayReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "tau,Lq_norm,fitted_slope")?;
        for s in &self.samples {
            writeln!(f, "{},{},{}", s.tau, s.lq_norm, self.slope)?;
        }
        Ok(())
    }
}

/// Radially symmetric 3D acoustic problem reduced to the 1D wave system for `(r s, r Ψ)`.
#[derive(Clone, Debug)]
pub struct RadialProblem {
    pub params: AcousticParams,
    /// Support radius of the initial density perturbation.
    pub support: f64,
    /// Outer radius of the computational line `[-r_max, r_max]`.
    pub r_max: f64,
    pub cells: usize,
}

impl RadialProblem {
    fn line(&self) -> Result<GridSpec> {
        GridSpec::new(1, self.r_max, self.cells, Boundary::Periodic)
    }

    /// Reduced state at `tau` with `s₀ = bump`, `Ψ₀ = 0`.
    fn reduced(&self, tau: f64) -> Result<AcousticState> {
        let line = self.line()?;
        let s0 = ScalarField::from_fn(line, |x| x[0] * bump(x[0], self.support));
        let init = AcousticState {
            s: s0,
            psi: ScalarField::zeros(line),
            grad_psi: VectorField::zeros(line),
            t: 0.0,
            params: self.params,
        };
        propagate_spectral(&init, tau)
    }

    /// `‖s(τ)‖_{L^q(R³)}` of the radial solution.
    pub fn lq_norm(&self, tau: f64, q: f64) -> Result<f64> {
        let st = self.reduced(tau)?;
        let line = st.s.grid;
        let h = line.h();
        let mut acc = 0.0;
        for (i, v) in st.s.data.iter().enumerate() {
            let r = line.center(i);
            if r <= 0.0 {
                continue;
            }
            acc += 4.0 * PI * r * r * (v / r).abs().powf(q) * h;
        }
        Ok(acc.powf(1.0 / q))
    }
}

/// Ordinary least squares slope and its standard error.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let stderr = if n > 2.0 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    (slope, stderr)
}

/// Fits `log ‖s‖_{L^q}` against `log(1 + τ/ε)` over `τ/ε ∈ window`.
pub fn decay_exponent(problem: &RadialProblem, q: f64, window: (f64, f64), samples: usize) -> Result<DecayReport> {
    let (lo, hi) = window;
    if !(lo > 0.0 && hi / lo >= 10.0 * (1.0 - 1e-12)) {
        return Err(Error::Window(format!("window [{lo}, {hi}] in τ/ε spans less than a decade")));
    }
    if samples < 3 {
        return Err(Error::Window("need at least three samples".into()));
    }
    if !(q >= 2.0) {
        return Err(Error::Parameter(format!("decay exponent needs q >= 2, got {q}")));
    }
    let eps = problem.params.eps;
    let reach = problem.support + problem.params.speed() * hi * eps;
    if reach >= problem.r_max {
        return Err(Error::Grid(format!("radial line {} too short for reach {reach}", problem.r_max)));
    }
    let taus: Vec<f64> =
        (0..samples).map(|i| eps * lo * (hi / lo).powf(i as f64 / (samples - 1) as f64)).collect();
    let norms: Vec<Result<f64>> = par::map_slice(&taus, |&t| problem.lq_norm(t, q));
    let norms: Vec<f64> = norms.into_iter().collect::<Result<_>>()?;
    let x: Vec<f64> = taus.iter().map(|t| (1.0 + t / eps).ln()).collect();
    let y: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let (slope, stderr) = ols(&x, &y);
    let samples = taus.iter().zip(&norms).map(|(&tau, &lq_norm)| DecaySample { tau, lq_norm }).collect();
    Ok(DecayReport { q, predicted: 1.0 / q - (1.0 - 1.0 / q), slope, stderr, samples })
}

