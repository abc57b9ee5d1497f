//! Incompressible Euler flow on a 2D periodic box in vorticity form,
//! `∂t ω + v·∇ω = 0`, with pressure recovery `Π = (−Δ)⁻¹ div div (v ⊗ v)`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::bump;
use crate::error::{Error, Result};
use crate::fields::{self, spectral, Boundary, GridSpec, ScalarField, VectorField};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Clone, Debug)]
pub struct EulerState {
    pub omega: ScalarField,
    pub v: VectorField,
    pub pi: ScalarField,
    pub t: f64,
}

/// Step control for [`solve_euler_with`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EulerOptions {
    /// Target advective Courant number `dt·(|v_x|+|v_y|)_max / h`.
    pub cfl: f64,
    /// Bound on `dt·|ω|_max`.
    pub rotation: f64,
    /// Fixed step; rejected with a CFL error when it violates `cfl_limit`.
    pub dt: Option<f64>,
    /// Hard Courant limit for a user supplied step.
    pub cfl_limit: f64,
    /// Largest tolerated enstrophy fraction in the outer third of the retained band.
    pub tail_tol: f64,
}

impl Default for EulerOptions {
    fn default() -> Self {
        EulerOptions { cfl: 0.5, rotation: 0.05, dt: None, cfl_limit: 1.0, tail_tol: 1e-6 }
    }
}

/// Wavenumber tables of a 2D periodic grid with the two-thirds mask.
struct Modes {
    grid: GridSpec,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    keep: Vec<bool>,
    shell: Vec<bool>,
}

impl Modes {
    fn new(grid: GridSpec) -> Result<Self> {
        if grid.dim != 2 || grid.boundary != Boundary::Periodic {
            return Err(Error::Grid("Euler solver needs a 2D periodic grid".into()));
        }
        let n = grid.cells;
        let cutoff = ((n - 1) / 3) as i64;
        let inner = 2 * cutoff / 3;
        let mut m = Modes {
            grid,
            kx: Vec::with_capacity(n * n),
            ky: Vec::with_capacity(n * n),
            k2: Vec::with_capacity(n * n),
            keep: Vec::with_capacity(n * n),
            shell: Vec::with_capacity(n * n),
        };
        for idx in 0..n * n {
            let (k, _) = spectral::wavevector(&grid, idx);
            let mx = spectral::mode(idx % n, n).abs();
            let my = spectral::mode(idx / n, n).abs();
            let keep = mx <= cutoff && my <= cutoff;
            m.kx.push(k[0]);
            m.ky.push(k[1]);
            m.k2.push(k[0] * k[0] + k[1] * k[1]);
            m.keep.push(keep);
            m.shell.push(keep && mx.max(my) > inner);
        }
        Ok(m)
    }

    fn forward(&self, data: &[f64]) -> Vec<Complex64> {
        spectral::forward(&self.grid, data)
    }

    fn inverse(&self, hat: Vec<Complex64>) -> Vec<f64> {
        spectral::inverse(&self.grid, hat)
    }

    fn map(&self, hat: &[Complex64], f: impl Fn(usize, Complex64) -> Complex64) -> Vec<Complex64> {
        hat.iter().enumerate().map(|(i, &c)| f(i, c)).collect()
    }

    fn stream(&self, w: &[Complex64]) -> Vec<Complex64> {
        self.map(w, |i, c| if self.k2[i] == 0.0 { ZERO } else { -c / self.k2[i] })
    }

    /// Colocated velocity `(−∂y ψ, ∂x ψ)` at cell centers.
    fn velocity(&self, w: &[Complex64]) -> [Vec<f64>; 2] {
        let psi = self.stream(w);
        [
            self.inverse(self.map(&psi, |i, c| -I * self.ky[i] * c)),
            self.inverse(self.map(&psi, |i, c| I * self.kx[i] * c)),
        ]
    }

    fn truncate(&self, hat: &mut [Complex64]) {
        for (c, &k) in hat.iter_mut().zip(&self.keep) {
            if !k {
                *c = ZERO;
            }
        }
    }

    /// `∂t ω̂ = −(v·∇ω)^` restricted to retained modes.
    fn tendency(&self, w: &[Complex64]) -> Vec<Complex64> {
        let [u, v] = self.velocity(w);
        let wx = self.inverse(self.map(w, |i, c| I * self.kx[i] * c));
        let wy = self.inverse(self.map(w, |i, c| I * self.ky[i] * c));
        let adv: Vec<f64> = (0..u.len()).map(|i| u[i] * wx[i] + v[i] * wy[i]).collect();
        let mut hat = self.forward(&adv);
        self.truncate(&mut hat);
        hat.iter_mut().for_each(|c| *c = -*c);
        hat
    }

    fn tail_fraction(&self, w: &[Complex64]) -> f64 {
        let (mut total, mut tail) = (0.0, 0.0);
        for (i, c) in w.iter().enumerate() {
            let e = c.norm_sqr();
            total += e;
            if self.shell[i] {
                tail += e;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            tail / total
        }
    }

    fn discarded_fraction(&self, w: &[Complex64]) -> f64 {
        let total: f64 = w.iter().map(|c| c.norm_sqr()).sum();
        let lost: f64 = w.iter().zip(&self.keep).filter(|(_, &k)| !k).map(|(c, _)| c.norm_sqr()).sum();
        if total == 0.0 {
            0.0
        } else {
            lost / total
        }
    }

    /// Staggered velocity from the vorticity spectrum.
    fn mac_velocity(&self, w: &[Complex64]) -> VectorField {
        let h = self.grid.h();
        let psi = self.stream(w);
        let vx = self.map(&psi, |i, c| -I * self.ky[i] * spectral::half_shift(self.kx[i], h, -1.0) * c);
        let vy = self.map(&psi, |i, c| I * self.kx[i] * spectral::half_shift(self.ky[i], h, -1.0) * c);
        VectorField { grid: self.grid, comps: vec![self.inverse(vx), self.inverse(vy)] }
    }

    /// Spectra of the colocated velocity recovered from the staggered one.
    fn centered_spectra(&self, v: &VectorField) -> [Vec<Complex64>; 2] {
        let h = self.grid.h();
        let ax = self.forward(&v.comps[0]);
        let ay = self.forward(&v.comps[1]);
        [
            self.map(&ax, |i, c| c * spectral::half_shift(self.kx[i], h, 1.0)),
            self.map(&ay, |i, c| c * spectral::half_shift(self.ky[i], h, 1.0)),
        ]
    }

    /// Truncated spectra of `v_i v_j` for `(xx, xy, yy)`.
    fn products(&self, v: &VectorField) -> [Vec<Complex64>; 3] {
        let [ax, ay] = self.centered_spectra(v);
        let ux = self.inverse(ax);
        let uy = self.inverse(ay);
        let prod = |f: &dyn Fn(usize) -> f64| {
            let data: Vec<f64> = (0..ux.len()).map(f).collect();
            let mut hat = self.forward(&data);
            self.truncate(&mut hat);
            hat
        };
        [prod(&|i| ux[i] * ux[i]), prod(&|i| ux[i] * uy[i]), prod(&|i| uy[i] * uy[i])]
    }

    fn pressure_hat(&self, m: &[Vec<Complex64>; 3]) -> Vec<Complex64> {
        (0..m[0].len())
            .map(|i| {
                if self.k2[i] == 0.0 {
                    return ZERO;
                }
                let (kx, ky) = (self.kx[i], self.ky[i]);
                -(kx * kx * m[0][i] + 2.0 * kx * ky * m[1][i] + ky * ky * m[2][i]) / self.k2[i]
            })
            .collect()
    }
}

/// Pressure `Π` with zero mean from a divergence-free staggered velocity.
pub fn euler_pressure(v: &VectorField) -> Result<ScalarField> {
    let modes = Modes::new(v.grid)?;
    let m = modes.products(v);
    ScalarField::from_vec(v.grid, modes.inverse(modes.pressure_hat(&m)))
}

/// Norms of `∂t v + v·∇v + ∇Π` and of its gradient part, relative to `‖v·∇v‖`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MomentumResidual {
    pub total: f64,
    pub gradient_part: f64,
    pub advection_norm: f64,
}

/// Momentum balance with `∂t v` supplied (or taken as zero).
pub fn momentum_residual(v: &VectorField, pi: &ScalarField, dvdt: Option<&VectorField>) -> Result<MomentumResidual> {
    let modes = Modes::new(v.grid)?;
    v.grid.ensure_same(&pi.grid)?;
    let m = modes.products(v);
    let pih = modes.forward(&pi.data);
    let dt = match dvdt {
        Some(d) => modes.centered_spectra(d),
        None => [vec![ZERO; pih.len()], vec![ZERO; pih.len()]],
    };
    let (mut total, mut grad_part, mut adv) = (0.0, 0.0, 0.0);
    for i in 0..pih.len() {
        let (kx, ky) = (modes.kx[i], modes.ky[i]);
        let nx = I * (kx * m[0][i] + ky * m[1][i]);
        let ny = I * (kx * m[1][i] + ky * m[2][i]);
        let rx = dt[0][i] + nx + I * kx * pih[i];
        let ry = dt[1][i] + ny + I * ky * pih[i];
        adv += nx.norm_sqr() + ny.norm_sqr();
        total += rx.norm_sqr() + ry.norm_sqr();
        if modes.k2[i] > 0.0 {
            let proj = (kx * rx + ky * ry) / modes.k2[i];
            grad_part += (proj * kx).norm_sqr() + (proj * ky).norm_sqr();
        }
    }
    let scale = if adv > 0.0 { adv.sqrt() } else { 1.0 };
    Ok(MomentumResidual { total: total.sqrt() / scale, gradient_part: grad_part.sqrt() / scale, advection_norm: adv.sqrt() })
}

/// Exact semi-discrete `∂t v` of the state.
pub fn velocity_tendency(state: &EulerState) -> Result<VectorField> {
    let modes = Modes::new(state.omega.grid)?;
    let mut w = modes.forward(&state.omega.data);
    modes.truncate(&mut w);
    Ok(modes.mac_velocity(&modes.tendency(&w)))
}

fn state_from(modes: &Modes, w: &[Complex64], t: f64) -> Result<EulerState> {
    let omega = ScalarField::from_vec(modes.grid, modes.inverse(w.to_vec()))?;
    let v = modes.mac_velocity(w);
    let pi = ScalarField::from_vec(modes.grid, modes.inverse(modes.pressure_hat(&modes.products(&v))))?;
    Ok(EulerState { omega, v, pi, t })
}

fn rk4(modes: &Modes, w: &[Complex64], dt: f64) -> Vec<Complex64> {
    let stage = |base: &[Complex64], k: &[Complex64], a: f64| -> Vec<Complex64> {
        base.iter().zip(k).map(|(b, k)| b + k * a).collect()
    };
    let k1 = modes.tendency(w);
    let k2 = modes.tendency(&stage(w, &k1, 0.5 * dt));
    let k3 = modes.tendency(&stage(w, &k2, 0.5 * dt));
    let k4 = modes.tendency(&stage(w, &k3, dt));
    (0..w.len()).map(|i| w[i] + (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * (dt / 6.0)).collect()
}

fn advective_rate(modes: &Modes, w: &[Complex64]) -> (f64, f64) {
    let [u, v] = modes.velocity(w);
    let speed = u.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max(a.abs() + b.abs()));
    let wmax = modes.inverse(w.to_vec()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    (speed, wmax)
}

pub fn solve_euler(v0: &VectorField, horizon: f64, emit_dt: f64) -> Result<Vec<EulerState>> {
    solve_euler_with(v0, horizon, emit_dt, &EulerOptions::default())
}

/// RK4 vorticity transport from a divergence-free staggered `v0`; emits at multiples of `emit_dt`.
pub fn solve_euler_with(v0: &VectorField, horizon: f64, emit_dt: f64, opts: &EulerOptions) -> Result<Vec<EulerState>> {
    let modes = Modes::new(v0.grid)?;
    if !(emit_dt > 0.0 && horizon >= 0.0) {
        return Err(Error::Parameter(format!("need emit_dt > 0 and horizon >= 0 (got {emit_dt}, {horizon})")));
    }
    let dv = fields::div(v0);
    let scale = v0.max_abs().max(1.0);
    if dv.max_abs() > 1e-8 * scale / v0.grid.h() {
        return Err(Error::Parameter(format!("initial velocity not divergence-free (max |div v| = {:e})", dv.max_abs())));
    }
    let omega0 = fields::curl(v0)?.planar().expect("2D curl");
    let mut w = modes.forward(&omega0.data);
    w[0] = ZERO;
    let lost = modes.discarded_fraction(&w);
    if lost > opts.tail_tol {
        return Err(Error::Resolution(format!("initial vorticity has {lost:e} of its enstrophy beyond the dealiasing cutoff")));
    }
    modes.truncate(&mut w);
    let h = v0.grid.h();
    let mut out = vec![state_from(&modes, &w, 0.0)?];
    let emits = (horizon / emit_dt + 1e-9).floor() as usize;
    let mut t = 0.0;
    for e in 1..=emits {
        let target = e as f64 * emit_dt;
        let span = target - t;
        let (speed, wmax) = advective_rate(&modes, &w);
        let dt_cap = match opts.dt {
            Some(dt) => {
                if dt * speed / h > opts.cfl_limit {
                    return Err(Error::Cfl(format!("dt = {dt:e} gives Courant number {:.3} above {}", dt * speed / h, opts.cfl_limit)));
                }
                dt
            }
            None => {
                let mut cap = span;
                if speed > 0.0 {
                    cap = cap.min(opts.cfl * h / speed);
                }
                if wmax > 0.0 {
                    cap = cap.min(opts.rotation / wmax);
                }
                cap
            }
        };
        let steps = (span / dt_cap - 1e-9).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        for _ in 0..steps {
            w = rk4(&modes, &w, dt);
        }
        t = target;
        let tail = modes.tail_fraction(&w);
        if tail > opts.tail_tol {
            return Err(Error::Resolution(format!("spectral tail fraction {tail:e} at t = {t}")));
        }
        out.push(state_from(&modes, &w, t)?);
    }
    Ok(out)
}

/// Invariants and pressure norms at each snapshot; `∂tΠ` by differencing adjacent snapshots.
#[derive(Clone, Debug, Serialize)]
pub struct EulerDiagnostics {
    pub t: Vec<f64>,
    pub energy: Vec<f64>,
    pub enstrophy: Vec<f64>,
    pub max_div: Vec<f64>,
    pub pi_l2: Vec<f64>,
    pub grad_pi_l2: Vec<f64>,
    pub dt_pi_l2: Vec<f64>,
}

impl EulerDiagnostics {
    pub fn energy_drift(&self) -> f64 {
        relative_drift(&self.energy)
    }

    pub fn enstrophy_drift(&self) -> f64 {
        relative_drift(&self.enstrophy)
    }
}

fn relative_drift(series: &[f64]) -> f64 {
    let Some(&first) = series.first() else { return 0.0 };
    let worst = series.iter().fold(0.0f64, |m, &x| m.max((x - first).abs()));
    if first == 0.0 {
        worst
    } else {
        worst / first.abs()
    }
}

pub fn euler_diagnostics(traj: &[EulerState]) -> EulerDiagnostics {
    let mut d = EulerDiagnostics {
        t: vec![],
        energy: vec![],
        enstrophy: vec![],
        max_div: vec![],
        pi_l2: vec![],
        grad_pi_l2: vec![],
        dt_pi_l2: vec![],
    };
    for (k, s) in traj.iter().enumerate() {
        d.t.push(s.t);
        d.energy.push(s.v.l2().powi(2));
        d.enstrophy.push(s.omega.l2().powi(2));
        d.max_div.push(fields::div(&s.v).max_abs());
        d.pi_l2.push(s.pi.l2());
        d.grad_pi_l2.push(fields::grad(&s.pi).l2());
        let (a, b) = match (k.checked_sub(1), traj.get(k + 1)) {
            (_, Some(next)) => (s, next),
            (Some(prev), None) => (&traj[prev], s),
            (None, None) => (s, s),
        };
        let dt = b.t - a.t;
        d.dt_pi_l2.push(if dt > 0.0 { b.pi.axpy(-1.0, &a.pi).l2() / dt } else { 0.0 });
    }
    d
}

/// Initial vorticity library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EulerData {
    /// `ω = 2A sin(kx) sin(ky)` with `k = π/L`.
    TaylorGreen { amplitude: f64 },
    /// Random stream function on modes `1 ≤ |m|∞ ≤ modes`, scaled to `‖v‖ = amplitude`.
    RandomBandLimited { modes: usize, amplitude: f64, seed: u64 },
    /// Stream function `A·bump(|x|, radius)`, so `v` is supported in the disc of that radius.
    Bump { radius: f64, amplitude: f64 },
    /// Taylor–Green cells of wavenumber `k = π/radius` under a bump window,
    /// stream function `(A/k) sin(kx) sin(ky) bump(|x|, radius)`.
    TaylorGreenPatch { radius: f64, amplitude: f64 },
}

impl EulerData {
    pub fn vorticity(&self, grid: GridSpec) -> Result<ScalarField> {
        let modes = Modes::new(grid)?;
        match *self {
            EulerData::TaylorGreen { amplitude } => {
                let k = std::f64::consts::PI / grid.half_width;
                Ok(ScalarField::from_fn(grid, |x| 2.0 * amplitude * (k * x[0]).sin() * (k * x[1]).sin()))
            }
            EulerData::RandomBandLimited { modes: m, amplitude, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = grid.cells;
                let mut psi = vec![ZERO; n * n];
                let m = m as i64;
                for my in -m..=m {
                    for mx in -m..=m {
                        if mx == 0 && my == 0 {
                            continue;
                        }
                        let a: f64 = rng.gen_range(-1.0..1.0);
                        let b: f64 = rng.gen_range(-1.0..1.0);
                        let idx = (mx.rem_euclid(n as i64) + n as i64 * my.rem_euclid(n as i64)) as usize;
                        let r2 = (mx * mx + my * my) as f64;
                        psi[idx] += Complex64::new(a, b) / r2;
                    }
                }
                let psi_real = modes.inverse(psi);
                let psi_hat = modes.forward(&psi_real);
                let w = modes.map(&psi_hat, |i, c| -modes.k2[i] * c);
                let omega = modes.inverse(w.clone());
                let norm = modes.mac_velocity(&w).l2();
                let scale = if norm > 0.0 { amplitude / norm } else { 0.0 };
                ScalarField::from_vec(grid, omega.iter().map(|x| x * scale).collect())
            }
            EulerData::Bump { .. } | EulerData::TaylorGreenPatch { .. } => {
                let psi = ScalarField::from_fn(grid, |x| self.stream_function(x));
                let w = modes.map(&modes.forward(&psi.data), |i, c| -modes.k2[i] * c);
                ScalarField::from_vec(grid, modes.inverse(w))
            }
        }
    }

    fn stream_function(&self, x: [f64; 3]) -> f64 {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        match *self {
            EulerData::Bump { radius, amplitude } => amplitude * bump(r, radius),
            EulerData::TaylorGreenPatch { radius, amplitude } => {
                let k = std::f64::consts::PI / radius;
                amplitude / k * (k * x[0]).sin() * (k * x[1]).sin() * bump(r, radius)
            }
            _ => 0.0,
        }
    }

    pub fn velocity(&self, grid: GridSpec) -> Result<VectorField> {
        fields::biot_savart(&self.vorticity(grid)?)
    }
}

/// Samples a periodic velocity onto the faces of a box grid with the same spacing.
/// The box is the centred window of the periodic cell; with equal extents the
/// last face of each axis wraps to the first.
pub fn periodic_to_box(v: &VectorField, target: GridSpec) -> Result<VectorField> {
    let src = v.grid;
    let (ns, nt) = (src.cells, target.cells);
    if src.boundary != Boundary::Periodic
        || target.boundary != Boundary::NoSlipBox
        || src.dim != target.dim
        || nt > ns
        || (ns - nt) % 2 != 0
        || (src.h() - target.h()).abs() > 1e-12 * src.h()
    {
        return Err(Error::Grid("periodic_to_box needs a periodic grid that contains the box with equal spacing".into()));
    }
    let offset = (ns - nt) / 2;
    let mut out = VectorField::zeros(target);
    for a in 0..target.dim {
        let shape = target.face_shape(a);
        for (idx, slot) in out.comps[a].iter_mut().enumerate() {
            let mut ijk = fields::unflatten(idx, shape);
            for (b, i) in ijk.iter_mut().enumerate().take(target.dim) {
                *i += offset;
                if b == a {
                    *i %= ns;
                }
            }
            *slot = v.comps[a][fields::flatten(ijk, src.center_shape())];
        }
    }
    Ok(out)
}
