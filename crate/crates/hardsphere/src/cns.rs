//! Scaled compressible Navier–Stokes flow on a no-slip box in one or two
//! dimensions: staggered finite volumes, upwind mass flux, centered momentum
//! transport and Heun time stepping.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acoustics::{self, bump, AcousticParams, Integrator};
use crate::eos::{PressureLaw, RenormFunction};
use crate::error::{Error, Result};
use crate::fields::{Boundary, GridSpec, ScalarField, VectorField};

/// Density safety margin as a fraction of `rho_bar`.
pub const DENSITY_MARGIN: f64 = 1e-6;

/// Mach number, viscosity scale, domain radius, data radius, background density, horizon and shear modulus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub eps: f64,
    pub nu: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "D")]
    pub data_radius: f64,
    pub varrho: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mu: f64,
}

impl ScalingParams {
    pub fn new(eps: f64, nu: f64, radius: f64, data_radius: f64, varrho: f64, horizon: f64, mu: f64) -> Result<Self> {
        let p = ScalingParams { eps, nu, radius, data_radius, varrho, horizon, mu };
        p.check_positive()?;
        Ok(p)
    }

    fn check_positive(&self) -> Result<()> {
        let named = [
            ("eps", self.eps),
            ("nu", self.nu),
            ("R", self.radius),
            ("D", self.data_radius),
            ("varrho", self.varrho),
            ("T", self.horizon),
            ("mu", self.mu),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive and finite (got {v})")));
            }
        }
        Ok(())
    }

    /// Background window: `1/D < varrho − eps0·D` and `varrho + eps0·D < rho_bar`.
    pub fn check_background(&self, law: &PressureLaw, eps0: f64) -> Result<()> {
        let d = self.data_radius;
        if 1.0 / d >= self.varrho - eps0 * d {
            return Err(Error::Parameter(format!(
                "background window: need 1/D < varrho - eps0*D ({} >= {})",
                1.0 / d,
                self.varrho - eps0 * d
            )));
        }
        if self.varrho + eps0 * d >= law.rho_bar() {
            return Err(Error::Parameter(format!(
                "background window: need varrho + eps0*D < rho_bar ({} >= {})",
                self.varrho + eps0 * d,
                law.rho_bar()
            )));
        }
        if self.eps >= eps0 {
            return Err(Error::Parameter(format!("eps = {} must lie below eps0 = {eps0}", self.eps)));
        }
        Ok(())
    }

    /// Acoustic isolation: `R > D + √p′(varrho)·T/eps`.
    pub fn check_isolation(&self, law: &PressureLaw) -> Result<()> {
        let reach = self.data_radius + self.sound_speed(law)? * self.horizon;
        if self.radius <= reach {
            return Err(Error::Parameter(format!(
                "radius condition: need R > D + sqrt(p'(varrho))*T/eps ({} <= {reach})",
                self.radius
            )));
        }
        Ok(())
    }

    /// `√p′(varrho)/eps`.
    pub fn sound_speed(&self, law: &PressureLaw) -> Result<f64> {
        Ok(law.dpressure(self.varrho)?.sqrt() / self.eps)
    }
}

/// Energy bookkeeping at one time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub kinetic: f64,
    /// `eps⁻²∫P(ρ) − P(varrho) − P′(varrho)(ρ − varrho)`.
    pub potential: f64,
    /// Cumulative `ν∫∫S(∇u):∇u`.
    pub dissipation: f64,
    pub mass: f64,
}

impl Ledger {
    pub fn energy(&self) -> f64 {
        self.kinetic + self.potential
    }
}

#[derive(Clone, Debug)]
pub struct FluidState {
    pub rho: ScalarField,
    pub u: VectorField,
    pub t: f64,
    pub ledger: Ledger,
}

/// Time-step controls and optional steady forcing.
#[derive(Clone, Debug)]
pub struct CnsOptions {
    pub c_cfl: f64,
    pub c_visc: f64,
    pub dt: Option<f64>,
    pub forcing: Option<VectorField>,
}

impl Default for CnsOptions {
    fn default() -> Self {
        CnsOptions { c_cfl: 0.25, c_visc: 0.1, dt: None, forcing: None }
    }
}

/// Deviatoric factor in `S = μ(∇u + ∇uᵀ − f·div u·I)`: `2/d` in the plane, the
/// planar reduction of the three-dimensional law (`2/3`) on a line.
pub fn deviatoric_factor(dim: usize) -> f64 {
    if dim == 1 {
        2.0 / 3.0
    } else {
        2.0 / dim as f64
    }
}

/// Stress components on the staggered grid.
#[derive(Clone, Debug)]
pub struct StressField {
    pub grid: GridSpec,
    /// Diagonal entries at cell centers, one per axis.
    pub diagonal: Vec<Vec<f64>>,
    /// Off-diagonal entry at cell corners, `(N+1)²` nodes (2D only).
    pub shear: Vec<f64>,
    /// Pointwise `S:∇u` at centers (diagonal part) and corners (shear part).
    pub work_centers: Vec<f64>,
    pub work_corners: Vec<f64>,
}

impl StressField {
    /// Quadrature of `S:∇u` with half weights on wall corners.
    pub fn work(&self) -> f64 {
        let g = self.grid;
        let dv = g.cell_volume();
        let mut total: f64 = self.work_centers.iter().sum::<f64>() * dv;
        if g.dim == 2 {
            let n = g.cells;
            for j in 0..=n {
                for i in 0..=n {
                    let mut w = 1.0;
                    if i == 0 || i == n {
                        w *= 0.5;
                    }
                    if j == 0 || j == n {
                        w *= 0.5;
                    }
                    total += w * self.work_corners[i + (n + 1) * j] * dv;
                }
            }
        }
        total
    }

    pub fn min_pointwise_work(&self) -> f64 {
        self.work_centers.iter().chain(&self.work_corners).fold(f64::INFINITY, |m, &x| m.min(x))
    }
}

fn check_box(g: &GridSpec) -> Result<()> {
    if g.boundary != Boundary::NoSlipBox || !(1..=2).contains(&g.dim) {
        return Err(Error::Grid("compressible solver needs a 1D or 2D no-slip box".into()));
    }
    Ok(())
}

/// `S(∇u)` with boundary ghosts `u = −u_interior` for tangential components.
pub fn stress_tensor(u: &VectorField, mu: f64) -> Result<StressField> {
    let g = u.grid;
    check_box(&g)?;
    let n = g.cells;
    let h = g.h();
    let f = deviatoric_factor(g.dim);
    if g.dim == 1 {
        let mut diag = vec![0.0; n];
        let mut work = vec![0.0; n];
        for i in 0..n {
            let du = (u.comps[0][i + 1] - u.comps[0][i]) / h;
            diag[i] = mu * (2.0 - f) * du;
            work[i] = diag[i] * du;
        }
        return Ok(StressField { grid: g, diagonal: vec![diag], shear: vec![], work_centers: work, work_corners: vec![] });
    }
    let (u0, u1) = (&u.comps[0], &u.comps[1]);
    let f0 = |i: usize, j: usize| u0[i + (n + 1) * j];
    let f1 = |i: usize, j: usize| u1[i + n * j];
    let mut s00 = vec![0.0; n * n];
    let mut s11 = vec![0.0; n * n];
    let mut work_c = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let a = (f0(i + 1, j) - f0(i, j)) / h;
            let b = (f1(i, j + 1) - f1(i, j)) / h;
            let dv = a + b;
            let c = i + n * j;
            s00[c] = mu * (2.0 * a - f * dv);
            s11[c] = mu * (2.0 * b - f * dv);
            work_c[c] = s00[c] * a + s11[c] * b;
        }
    }
    let mut s01 = vec![0.0; (n + 1) * (n + 1)];
    let mut work_k = vec![0.0; (n + 1) * (n + 1)];
    for j in 0..=n {
        for i in 0..=n {
            // ∂y u_x across the corner row j, ∂x u_y across the corner column i.
            let dyu0 = if i == 0 || i == n {
                0.0
            } else if j == 0 {
                2.0 * f0(i, 0) / h
            } else if j == n {
                -2.0 * f0(i, n - 1) / h
            } else {
                (f0(i, j) - f0(i, j - 1)) / h
            };
            let dxu1 = if j == 0 || j == n {
                0.0
            } else if i == 0 {
                2.0 * f1(0, j) / h
            } else if i == n {
                -2.0 * f1(n - 1, j) / h
            } else {
                (f1(i, j) - f1(i - 1, j)) / h
            };
            let k = i + (n + 1) * j;
            let shear = dyu0 + dxu1;
            s01[k] = mu * shear;
            work_k[k] = s01[k] * shear;
        }
    }
    Ok(StressField { grid: g, diagonal: vec![s00, s11], shear: s01, work_centers: work_c, work_corners: work_k })
}

/// `div S` on the faces of each component (boundary faces zero).
fn stress_divergence(s: &StressField) -> Vec<Vec<f64>> {
    let g = s.grid;
    let n = g.cells;
    let h = g.h();
    if g.dim == 1 {
        let mut out = vec![0.0; n + 1];
        for i in 1..n {
            out[i] = (s.diagonal[0][i] - s.diagonal[0][i - 1]) / h;
        }
        return vec![out];
    }
    let k = |i: usize, j: usize| s.shear[i + (n + 1) * j];
    let mut d0 = vec![0.0; (n + 1) * n];
    for j in 0..n {
        for i in 1..n {
            d0[i + (n + 1) * j] =
                (s.diagonal[0][i + n * j] - s.diagonal[0][i - 1 + n * j]) / h + (k(i, j + 1) - k(i, j)) / h;
        }
    }
    let mut d1 = vec![0.0; n * (n + 1)];
    for j in 1..n {
        for i in 0..n {
            d1[i + n * j] = (s.diagonal[1][i + n * j] - s.diagonal[1][i + n * (j - 1)]) / h + (k(i + 1, j) - k(i, j)) / h;
        }
    }
    vec![d0, d1]
}

/// `−∫u·div S(∇u)`, the viscous power as a face sum.
pub fn viscous_power(u: &VectorField, mu: f64) -> Result<f64> {
    let s = stress_tensor(u, mu)?;
    let d = stress_divergence(&s);
    let dv = u.grid.cell_volume();
    Ok(-u.comps.iter().zip(&d).map(|(ua, da)| ua.iter().zip(da).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>() * dv)
}

/// Face-density averages and velocities from momenta.
struct Layout {
    grid: GridSpec,
    n: usize,
    ny: usize,
}

impl Layout {
    fn new(grid: GridSpec) -> Self {
        Layout { grid, n: grid.cells, ny: if grid.dim == 2 { grid.cells } else { 1 } }
    }

    fn face_count(&self, a: usize) -> usize {
        self.grid.face_len(a)
    }

    /// Flat face index for axis `a` at face coordinates `(i, j)`.
    fn face(&self, a: usize, i: usize, j: usize) -> usize {
        if a == 0 {
            i + (self.n + 1) * j
        } else {
            i + self.n * j
        }
    }

    /// Adjacent cells `(left, right)` of an interior face.
    fn neighbours(&self, a: usize, i: usize, j: usize) -> (usize, usize) {
        let c = |i: usize, j: usize| i + self.n * j;
        if a == 0 {
            (c(i - 1, j), c(i, j))
        } else {
            (c(i, j - 1), c(i, j))
        }
    }

    /// Iterates interior faces of axis `a` as `(flat, i, j)`.
    fn interior(&self, a: usize) -> Vec<(usize, usize, usize)> {
        let mut out = vec![];
        if a == 0 {
            for j in 0..self.ny {
                for i in 1..self.n {
                    out.push((self.face(0, i, j), i, j));
                }
            }
        } else {
            for j in 1..self.n {
                for i in 0..self.n {
                    out.push((self.face(1, i, j), i, j));
                }
            }
        }
        out
    }

    fn face_density(&self, rho: &[f64]) -> Vec<Vec<f64>> {
        (0..self.grid.dim)
            .map(|a| {
                let mut out = vec![0.0; self.face_count(a)];
                for (f, i, j) in self.interior(a) {
                    let (l, r) = self.neighbours(a, i, j);
                    out[f] = 0.5 * (rho[l] + rho[r]);
                }
                out
            })
            .collect()
    }
}

struct Rhs {
    drho: Vec<f64>,
    dm: Vec<Vec<f64>>,
    dissipation_rate: f64,
}

struct Model<'a> {
    law: &'a PressureLaw,
    params: ScalingParams,
    layout: Layout,
    forcing: Option<&'a VectorField>,
    floor: f64,
    ceiling: f64,
}

impl Model<'_> {
    fn check_density(&self, rho: &[f64], t: f64) -> Result<()> {
        for (idx, &r) in rho.iter().enumerate() {
            if !(r >= self.floor && r <= self.ceiling) {
                return Err(Error::Density(format!(
                    "density {r} left [{}, {}] at cell {idx}, t = {t}",
                    self.floor, self.ceiling
                )));
            }
        }
        Ok(())
    }

    fn velocity(&self, rho: &[f64], m: &[Vec<f64>]) -> VectorField {
        let rf = self.layout.face_density(rho);
        let comps = (0..m.len())
            .map(|a| m[a].iter().zip(&rf[a]).map(|(&mm, &r)| if r > 0.0 { mm / r } else { 0.0 }).collect())
            .collect();
        VectorField { grid: self.layout.grid, comps }
    }

    fn rhs(&self, rho: &[f64], m: &[Vec<f64>]) -> Result<(Rhs, VectorField)> {
        let lay = &self.layout;
        let g = lay.grid;
        let (n, ny) = (lay.n, lay.ny);
        let h = g.h();
        let u = self.velocity(rho, m);
        // Upwind mass fluxes.
        let mut flux: Vec<Vec<f64>> = (0..g.dim).map(|a| vec![0.0; lay.face_count(a)]).collect();
        for (a, fa) in flux.iter_mut().enumerate() {
            for (f, i, j) in lay.interior(a) {
                let (l, r) = lay.neighbours(a, i, j);
                let v = u.comps[a][f];
                fa[f] = v * if v >= 0.0 { rho[l] } else { rho[r] };
            }
        }
        let mut drho = vec![0.0; rho.len()];
        for j in 0..ny {
            for i in 0..n {
                let mut d = (flux[0][lay.face(0, i + 1, j)] - flux[0][lay.face(0, i, j)]) / h;
                if g.dim == 2 {
                    d += (flux[1][lay.face(1, i, j + 1)] - flux[1][lay.face(1, i, j)]) / h;
                }
                drho[i + n * j] = -d;
            }
        }
        let mut p = Vec::with_capacity(rho.len());
        for &r in rho {
            p.push(self.law.pressure(r)?);
        }
        let stress = stress_tensor(&u, self.params.mu)?;
        let div_s = stress_divergence(&stress);
        let inv_eps2 = 1.0 / (self.params.eps * self.params.eps);
        let nu = self.params.nu;
        let rf = lay.face_density(rho);
        let mut dm: Vec<Vec<f64>> = (0..g.dim).map(|a| vec![0.0; lay.face_count(a)]).collect();
        for a in 0..g.dim {
            // Momentum flux along the own axis, evaluated at cell centers.
            let mut own = vec![0.0; n * ny];
            for j in 0..ny {
                for i in 0..n {
                    let (lo, hi) = if a == 0 { (lay.face(0, i, j), lay.face(0, i + 1, j)) } else { (lay.face(1, i, j), lay.face(1, i, j + 1)) };
                    own[i + n * j] = 0.25 * (flux[a][lo] + flux[a][hi]) * (u.comps[a][lo] + u.comps[a][hi]);
                }
            }
            // Cross flux at corners (2D): mass flux of the other axis times u_a.
            let b = 1 - a.min(1);
            let cross = if g.dim == 2 {
                let mut c = vec![0.0; (n + 1) * (n + 1)];
                for jj in 0..=n {
                    for ii in 0..=n {
                        // Corner (ii, jj): face ii along x, face jj along y.
                        let (along_a, along_b) = if a == 0 { (ii, jj) } else { (jj, ii) };
                        if along_a == 0 || along_a == n || along_b == 0 || along_b == n {
                            continue;
                        }
                        let (fb_lo, fb_hi, ua_lo, ua_hi) = if a == 0 {
                            (lay.face(1, ii - 1, jj), lay.face(1, ii, jj), lay.face(0, ii, jj - 1), lay.face(0, ii, jj))
                        } else {
                            (lay.face(0, ii, jj - 1), lay.face(0, ii, jj), lay.face(1, ii - 1, jj), lay.face(1, ii, jj))
                        };
                        c[ii + (n + 1) * jj] =
                            0.25 * (flux[b][fb_lo] + flux[b][fb_hi]) * (u.comps[a][ua_lo] + u.comps[a][ua_hi]);
                    }
                }
                c
            } else {
                vec![]
            };
            for (f, i, j) in lay.interior(a) {
                let (l, r) = lay.neighbours(a, i, j);
                let mut conv = (own[r] - own[l]) / h;
                if g.dim == 2 {
                    let k = |ii: usize, jj: usize| cross[ii + (n + 1) * jj];
                    conv += if a == 0 { (k(i, j + 1) - k(i, j)) / h } else { (k(i + 1, j) - k(i, j)) / h };
                }
                let mut rate = -conv + nu * div_s[a][f] - inv_eps2 * (p[r] - p[l]) / h;
                if let Some(fc) = self.forcing {
                    rate += rf[a][f] * fc.comps[a][f];
                }
                dm[a][f] = rate;
            }
        }
        let dissipation_rate = nu * stress.work();
        Ok((Rhs { drho, dm, dissipation_rate }, u))
    }

    fn stable_dt(&self, rho: &[f64], u: &VectorField, opts: &CnsOptions) -> Result<f64> {
        let h = self.layout.grid.h();
        let mut dp_max: f64 = 0.0;
        let mut rho_min = f64::INFINITY;
        for &r in rho {
            dp_max = dp_max.max(self.law.dpressure(r)?);
            rho_min = rho_min.min(r);
        }
        let mut dt = opts.c_cfl * h * self.params.eps / dp_max.sqrt().max(f64::MIN_POSITIVE);
        let umax = u.max_abs();
        if umax > 0.0 {
            dt = dt.min(opts.c_cfl * h / umax);
        }
        dt = dt.min(opts.c_visc * h * h * rho_min / (self.params.nu * self.params.mu));
        Ok(dt)
    }

    fn ledger(&self, rho: &[f64], m: &[Vec<f64>], dissipation: f64) -> Result<Ledger> {
        let g = self.layout.grid;
        let dv = g.cell_volume();
        let rf = self.layout.face_density(rho);
        let mut kinetic = 0.0;
        for a in 0..m.len() {
            for (mm, r) in m[a].iter().zip(&rf[a]) {
                if *r > 0.0 {
                    kinetic += 0.5 * mm * mm / r;
                }
            }
        }
        let mut potential = 0.0;
        for &r in rho {
            potential += self.law.relative_potential(r, self.params.varrho)?;
        }
        let inv_eps2 = 1.0 / (self.params.eps * self.params.eps);
        Ok(Ledger {
            kinetic: kinetic * dv,
            potential: potential * inv_eps2 * dv,
            dissipation,
            mass: rho.iter().sum::<f64>() * dv,
        })
    }
}

/// Heun integration from `(rho0, u0)` with snapshots at multiples of `emit_dt` up to `params.horizon`.
pub fn solve_cns(
    rho0: &ScalarField,
    u0: &VectorField,
    law: &PressureLaw,
    params: ScalingParams,
    emit_dt: f64,
) -> Result<Vec<FluidState>> {
    solve_cns_with(rho0, u0, law, params, emit_dt, &CnsOptions::default())
}

pub fn solve_cns_with(
    rho0: &ScalarField,
    u0: &VectorField,
    law: &PressureLaw,
    params: ScalingParams,
    emit_dt: f64,
    opts: &CnsOptions,
) -> Result<Vec<FluidState>> {
    let g = rho0.grid;
    check_box(&g)?;
    g.ensure_same(&u0.grid)?;
    params.check_positive()?;
    if !(emit_dt > 0.0) {
        return Err(Error::Parameter(format!("emit_dt must be positive (got {emit_dt})")));
    }
    if let Some(f) = &opts.forcing {
        g.ensure_same(&f.grid)?;
    }
    let rb = law.rho_bar();
    let model = Model {
        law,
        params,
        layout: Layout::new(g),
        forcing: opts.forcing.as_ref(),
        floor: DENSITY_MARGIN * rb,
        ceiling: rb - DENSITY_MARGIN * rb,
    };
    let mut rho = rho0.data.clone();
    model.check_density(&rho, 0.0)?;
    let rf = model.layout.face_density(&rho);
    let mut m: Vec<Vec<f64>> = (0..g.dim)
        .map(|a| {
            let mut v: Vec<f64> = u0.comps[a].iter().zip(&rf[a]).map(|(u, r)| u * r).collect();
            for (idx, slot) in v.iter_mut().enumerate() {
                if rf[a][idx] == 0.0 {
                    *slot = 0.0;
                }
            }
            v
        })
        .collect();
    let mut dissipation = 0.0;
    let mut t = 0.0;
    let snapshot = |rho: &[f64], m: &[Vec<f64>], t: f64, diss: f64| -> Result<FluidState> {
        Ok(FluidState {
            rho: ScalarField::from_vec(g, rho.to_vec())?,
            u: model.velocity(rho, m),
            t,
            ledger: model.ledger(rho, m, diss)?,
        })
    };
    let mut out = vec![snapshot(&rho, &m, 0.0, 0.0)?];
    let emits = (params.horizon / emit_dt + 1e-9).floor() as usize;
    for e in 1..=emits {
        let target = e as f64 * emit_dt;
        while t < target - 1e-14 * target.max(1.0) {
            let (k1, u) = model.rhs(&rho, &m)?;
            let limit = model.stable_dt(&rho, &u, opts)?;
            let dt = match opts.dt {
                Some(dt) if dt > limit => {
                    return Err(Error::Cfl(format!("dt = {dt:e} exceeds the stability limit {limit:e}")));
                }
                Some(dt) => dt,
                None => limit,
            }
            .min(target - t);
            let rho1: Vec<f64> = rho.iter().zip(&k1.drho).map(|(r, d)| r + dt * d).collect();
            model.check_density(&rho1, t + dt)?;
            let m1: Vec<Vec<f64>> =
                m.iter().zip(&k1.dm).map(|(ma, da)| ma.iter().zip(da).map(|(x, d)| x + dt * d).collect()).collect();
            let (k2, _) = model.rhs(&rho1, &m1)?;
            for i in 0..rho.len() {
                rho[i] += 0.5 * dt * (k1.drho[i] + k2.drho[i]);
            }
            for a in 0..m.len() {
                for i in 0..m[a].len() {
                    m[a][i] += 0.5 * dt * (k1.dm[a][i] + k2.dm[a][i]);
                }
            }
            dissipation += 0.5 * dt * (k1.dissipation_rate + k2.dissipation_rate);
            t += dt;
            model.check_density(&rho, t)?;
        }
        t = target;
        out.push(snapshot(&rho, &m, t, dissipation)?);
    }
    Ok(out)
}

/// Worst signed `[E(τ) + dissipation(τ) − E(0)] / E(0)` over the trajectory.
pub fn energy_inequality_residual(traj: &[FluidState]) -> f64 {
    let Some(first) = traj.first() else { return 0.0 };
    let e0 = first.ledger.energy();
    let mut worst = f64::NEG_INFINITY;
    for s in traj {
        let excess = s.ledger.energy() + s.ledger.dissipation - e0;
        worst = worst.max(if e0 > 0.0 { excess / e0 } else { excess });
    }
    if e0 == 0.0 && worst.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        worst
    }
}

/// Worst `|E(τ) + dissipation(τ) − E(0)| / E(0)`, the two-sided balance defect.
pub fn energy_balance_defect(traj: &[FluidState]) -> f64 {
    let Some(first) = traj.first() else { return 0.0 };
    let e0 = first.ledger.energy();
    let worst = traj.iter().fold(0.0f64, |w, s| w.max((s.ledger.energy() + s.ledger.dissipation - e0).abs()));
    if e0 > 0.0 {
        worst / e0
    } else {
        worst
    }
}

/// Largest relative change of total mass.
pub fn mass_drift(traj: &[FluidState]) -> f64 {
    let Some(first) = traj.first() else { return 0.0 };
    let m0 = first.ledger.mass;
    traj.iter().fold(0.0f64, |w, s| w.max((s.ledger.mass - m0).abs() / m0))
}

/// Smooth space-time test function `θ(t)·φ(x)` with polynomial bumps `(1 − r²)⁴`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub center: [f64; 3],
    pub radius: f64,
    pub t_center: f64,
    pub t_radius: f64,
}

fn poly_bump(x: f64) -> (f64, f64) {
    if x.abs() >= 1.0 {
        (0.0, 0.0)
    } else {
        let q = 1.0 - x * x;
        (q.powi(4), -8.0 * x * q.powi(3))
    }
}

impl TestFunction {
    /// `(ψ, ∂tψ, ∇ψ)` at `(t, x)`.
    pub fn eval(&self, t: f64, x: [f64; 3], dim: usize) -> (f64, f64, [f64; 3]) {
        let (th, dth) = poly_bump((t - self.t_center) / self.t_radius);
        let mut r2 = 0.0;
        for a in 0..dim {
            let d = (x[a] - self.center[a]) / self.radius;
            r2 += d * d;
        }
        if r2 >= 1.0 || th == 0.0 && dth == 0.0 {
            return (0.0, 0.0, [0.0; 3]);
        }
        let q = 1.0 - r2;
        let phi = q.powi(4);
        let dphi = -8.0 * q.powi(3) / (self.radius * self.radius);
        let mut grad = [0.0; 3];
        for a in 0..dim {
            grad[a] = th * dphi * (x[a] - self.center[a]);
        }
        (th * phi, dth / self.t_radius * phi, grad)
    }
}

/// Test functions centered on a coarse lattice covering `[-extent, extent]^dim`, supported inside `(0, horizon)`.
pub fn test_family(dim: usize, extent: f64, radius: f64, horizon: f64) -> Vec<TestFunction> {
    let offsets = [-0.5, 0.0, 0.5];
    let mut out = vec![];
    let tc = 0.5 * horizon;
    let tr = 0.45 * horizon;
    if dim == 1 {
        for &o in &offsets {
            out.push(TestFunction { center: [o * extent, 0.0, 0.0], radius, t_center: tc, t_radius: tr });
        }
    } else {
        for &oy in &offsets {
            for &ox in &offsets {
                out.push(TestFunction { center: [ox * extent, oy * extent, 0.0], radius, t_center: tc, t_radius: tr });
            }
        }
    }
    out
}

/// Cell-centered velocity components (averages of adjacent faces).
pub fn centered_velocity(u: &VectorField) -> Vec<Vec<f64>> {
    (0..u.grid.dim).map(|a| u.component_at_centers(a).data).collect()
}

/// Trapezoidal weights for the snapshot times.
fn time_weights(traj: &[FluidState]) -> Vec<f64> {
    let n = traj.len();
    let mut w = vec![0.0; n];
    for k in 1..n {
        let dt = traj[k].t - traj[k - 1].t;
        w[k - 1] += 0.5 * dt;
        w[k] += 0.5 * dt;
    }
    w
}

/// Renormalizing function for [`renormalized_residual`].
#[derive(Clone, Copy, Debug)]
pub enum Renormalization<'a> {
    /// `b(s) = s`.
    Identity,
    /// `b(s) = −log(rho_bar − s)`.
    Log { rho_bar: f64 },
    /// An assembled (possibly truncated) function.
    Branch(&'a RenormFunction),
}

impl Renormalization<'_> {
    pub fn eval(&self, s: f64) -> (f64, f64) {
        match *self {
            Renormalization::Identity => (s, 1.0),
            Renormalization::Log { rho_bar } => (-(rho_bar - s).ln(), 1.0 / (rho_bar - s)),
            Renormalization::Branch(b) => b.eval(s),
        }
    }
}

/// `max_ψ |∫∫ b(ρ)∂tψ + b(ρ)u·∇ψ − (b′(ρ)ρ − b(ρ)) div u ψ|`.
pub fn renormalized_residual(traj: &[FluidState], renorm: Renormalization<'_>, family: &[TestFunction]) -> f64 {
    let Some(first) = traj.first() else { return 0.0 };
    let g = first.rho.grid;
    let dv = g.cell_volume();
    let h = g.h();
    let wt = time_weights(traj);
    let bfun = |s: f64| renorm.eval(s);
    let per_snapshot: Vec<Vec<f64>> = traj
        .iter()
        .map(|s| {
            let uc = centered_velocity(&s.u);
            let n = g.cells;
            let dvg: Vec<f64> = (0..g.len())
                .map(|c| {
                    let (i, j) = (c % n, c / n);
                    let mut d = (s.u.comps[0][i + 1 + (n + 1) * j] - s.u.comps[0][i + (n + 1) * j]) / h;
                    if g.dim == 2 {
                        d += (s.u.comps[1][i + n * (j + 1)] - s.u.comps[1][i + n * j]) / h;
                    }
                    d
                })
                .collect();
            family
                .iter()
                .map(|tf| {
                    let mut acc = 0.0;
                    for c in 0..g.len() {
                        let x = g.center_point(c);
                        let (psi, dpsi, grad) = tf.eval(s.t, x, g.dim);
                        if psi == 0.0 && dpsi == 0.0 {
                            continue;
                        }
                        let (b, db) = bfun(s.rho.data[c]);
                        let mut adv = 0.0;
                        for a in 0..g.dim {
                            adv += uc[a][c] * grad[a];
                        }
                        acc += b * dpsi + b * adv - (db * s.rho.data[c] - b) * dvg[c] * psi;
                    }
                    acc * dv
                })
                .collect()
        })
        .collect();
    (0..family.len())
        .map(|k| per_snapshot.iter().zip(&wt).map(|(v, w)| v[k] * w).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// `max_{ψ,a} |∫∫ ρu_a∂tψ + (ρu_a u − νS_a·)·∇ψ + eps⁻² p ∂_aψ|` with cell-centered samples.
pub fn momentum_weak_residual(traj: &[FluidState], law: &PressureLaw, params: &ScalingParams, family: &[TestFunction]) -> Result<f64> {
    let Some(first) = traj.first() else { return Ok(0.0) };
    let g = first.rho.grid;
    let n = g.cells;
    let dv = g.cell_volume();
    let wt = time_weights(traj);
    let inv_eps2 = 1.0 / (params.eps * params.eps);
    let mut totals = vec![0.0; family.len() * g.dim];
    for (s, w) in traj.iter().zip(&wt) {
        let uc = centered_velocity(&s.u);
        let stress = stress_tensor(&s.u, params.mu)?;
        let shear_c: Vec<f64> = if g.dim == 2 {
            (0..g.len())
                .map(|c| {
                    let (i, j) = (c % n, c / n);
                    let k = |ii: usize, jj: usize| stress.shear[ii + (n + 1) * jj];
                    0.25 * (k(i, j) + k(i + 1, j) + k(i, j + 1) + k(i + 1, j + 1))
                })
                .collect()
        } else {
            vec![]
        };
        // The background pressure integrates to zero against compactly supported tests.
        let p_ref = law.pressure(params.varrho)?;
        let mut p = Vec::with_capacity(g.len());
        for &r in &s.rho.data {
            p.push(law.pressure(r)? - p_ref);
        }
        for (k, tf) in family.iter().enumerate() {
            for c in 0..g.len() {
                let (psi, dpsi, grad) = tf.eval(s.t, g.center_point(c), g.dim);
                if psi == 0.0 && dpsi == 0.0 && grad.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let rho = s.rho.data[c];
                for a in 0..g.dim {
                    let mut val = rho * uc[a][c] * dpsi + inv_eps2 * p[c] * grad[a];
                    for b in 0..g.dim {
                        let sab = if a == b { stress.diagonal[a][c] } else { shear_c[c] };
                        val += (rho * uc[a][c] * uc[b][c] - params.nu * sab) * grad[b];
                    }
                    totals[k * g.dim + a] += w * val * dv;
                }
            }
        }
    }
    Ok(totals.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// Uniform-in-ε quantities of a trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct UniformEstimates {
    pub sup_momentum_l2: f64,
    pub sup_density_perturbation_l2: f64,
    pub sqrt_nu_grad_u_l2l2: f64,
    pub sup_low_density_measure: f64,
    pub sup_dense_potential: f64,
    pub alpha1: f64,
    pub ceiling: f64,
    pub exceeded: bool,
}

/// `sup‖√ρu‖`, `sup‖(ρ−ϱ)/ε‖`, `√ν‖∇u‖_{L²L²}`, `sup|{ρ < α₁}|` and `sup∫P(ρ)1_{ρ > ρ̄−α₁}`, flagged against `ceiling`.
pub fn uniform_estimates(
    traj: &[FluidState],
    law: &PressureLaw,
    params: &ScalingParams,
    alpha1: f64,
    ceiling: f64,
) -> Result<UniformEstimates> {
    let mut est = UniformEstimates {
        sup_momentum_l2: 0.0,
        sup_density_perturbation_l2: 0.0,
        sqrt_nu_grad_u_l2l2: 0.0,
        sup_low_density_measure: 0.0,
        sup_dense_potential: 0.0,
        alpha1,
        ceiling,
        exceeded: false,
    };
    let Some(first) = traj.first() else { return Ok(est) };
    let g = first.rho.grid;
    let dv = g.cell_volume();
    let h = g.h();
    let wt = time_weights(traj);
    let rb = law.rho_bar();
    let mut grad_sq = 0.0;
    for (s, w) in traj.iter().zip(&wt) {
        let rf = Layout::new(g).face_density(&s.rho.data);
        let mut mom = 0.0;
        for a in 0..g.dim {
            for (u, r) in s.u.comps[a].iter().zip(&rf[a]) {
                mom += r * u * u;
            }
        }
        est.sup_momentum_l2 = est.sup_momentum_l2.max((mom * dv).sqrt());
        let pert: f64 = s.rho.data.iter().map(|r| ((r - params.varrho) / params.eps).powi(2)).sum::<f64>() * dv;
        est.sup_density_perturbation_l2 = est.sup_density_perturbation_l2.max(pert.sqrt());
        let low = s.rho.data.iter().filter(|&&r| r < alpha1).count() as f64 * dv;
        est.sup_low_density_measure = est.sup_low_density_measure.max(low);
        let mut dense = 0.0;
        for &r in &s.rho.data {
            if r > rb - alpha1 {
                dense += law.potential_fast(r)?;
            }
        }
        est.sup_dense_potential = est.sup_dense_potential.max(dense * dv);
        grad_sq += w * velocity_gradient_sq(&s.u, h) * dv;
    }
    est.sqrt_nu_grad_u_l2l2 = (params.nu * grad_sq).sqrt();
    est.exceeded = [est.sup_momentum_l2, est.sup_density_perturbation_l2, est.sqrt_nu_grad_u_l2l2]
        .iter()
        .any(|&x| !(x <= ceiling));
    Ok(est)
}

/// `Σ|∇u|²` cell sum (diagonal at centers, cross derivatives at corners with wall ghosts).
fn velocity_gradient_sq(u: &VectorField, h: f64) -> f64 {
    let g = u.grid;
    let n = g.cells;
    let mut total = 0.0;
    if g.dim == 1 {
        for i in 0..n {
            total += ((u.comps[0][i + 1] - u.comps[0][i]) / h).powi(2);
        }
        return total;
    }
    let s = stress_tensor(u, 1.0).expect("box grid");
    for j in 0..n {
        for i in 0..n {
            let a = (u.comps[0][i + 1 + (n + 1) * j] - u.comps[0][i + (n + 1) * j]) / h;
            let b = (u.comps[1][i + n * (j + 1)] - u.comps[1][i + n * j]) / h;
            total += a * a + b * b;
        }
    }
    // Cross derivatives share the corner stencil of the shear stress; split by components.
    for j in 0..=n {
        for i in 0..=n {
            let mut w = 1.0;
            if i == 0 || i == n {
                w *= 0.5;
            }
            if j == 0 || j == n {
                w *= 0.5;
            }
            let dyu0 = if i == 0 || i == n {
                0.0
            } else if j == 0 {
                2.0 * u.comps[0][i] / h
            } else if j == n {
                -2.0 * u.comps[0][i + (n + 1) * (n - 1)] / h
            } else {
                (u.comps[0][i + (n + 1) * j] - u.comps[0][i + (n + 1) * (j - 1)]) / h
            };
            let dxu1 = s.shear[i + (n + 1) * j] - dyu0;
            total += w * (dyu0 * dyu0 + dxu1 * dxu1);
        }
    }
    total
}

/// Writes `config.json`, `snapshots/` and `ledger.csv` under `dir`.
pub fn write_run(dir: &Path, config: &serde_json::Value, traj: &[FluidState]) -> Result<()> {
    fs::create_dir_all(dir.join("snapshots"))?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config)?)?;
    let snaps = dir.join("snapshots");
    for (k, s) in traj.iter().enumerate() {
        s.rho.write_snapshot(&snaps, &format!("rho_{k:05}"), s.t, "density", "mass/length^d")?;
        s.u.write_snapshot(&snaps, &format!("u_{k:05}"), s.t, "velocity", "length/time")?;
    }
    let mut f = fs::File::create(dir.join("ledger.csv"))?;
    writeln!(f, "t,kinetic,potential,dissipation,mass")?;
    for s in traj {
        let l = s.ledger;
        writeln!(f, "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", s.t, l.kinetic, l.potential, l.dissipation, l.mass)?;
    }
    Ok(())
}

/// Deviation of `(ρ − ϱ)/ε` from the acoustic `s` for data `ρ₀ = ϱ + ε·a·bump(|x|, D)`, `u₀ = 0`.
#[derive(Clone, Debug, Serialize)]
pub struct LinearizationReport {
    pub amplitudes: Vec<f64>,
    /// `sup_τ ‖(ρ − ϱ)/ε − a·s₁‖ / ‖s₁(0)‖`, with `s₁` the unit-amplitude acoustic solution.
    pub deviations: Vec<f64>,
    pub exponent: f64,
    pub stderr: f64,
}

/// Runs both solvers with the Courant number `c_cfl` and fits `log deviation` against `log a`.
pub fn linearization_study(
    law: &PressureLaw,
    params: ScalingParams,
    grid: GridSpec,
    amplitudes: &[f64],
    c_cfl: f64,
    emit_dt: f64,
) -> Result<LinearizationReport> {
    check_box(&grid)?;
    let ap = AcousticParams::from_law(law, params.eps, params.varrho)?;
    let unit = ScalarField::from_fn(grid, |x| {
        let r = (0..grid.dim).map(|a| x[a] * x[a]).sum::<f64>().sqrt();
        bump(r, params.data_radius)
    });
    let dt_ac = c_cfl * grid.h() * params.eps / (ap.dp * grid.dim as f64).sqrt();
    let ac = acoustics::solve_acoustic(&unit, &VectorField::zeros(grid), ap, params.horizon, emit_dt, Integrator::Leapfrog { dt: dt_ac })?;
    let norm = unit.l2();
    let opts = CnsOptions { c_cfl, ..CnsOptions::default() };
    let runs: Vec<Result<f64>> = crate::par::map_slice(amplitudes, |&a| {
        let rho0 = unit.map(|v| params.varrho + params.eps * a * v);
        let traj = solve_cns_with(&rho0, &VectorField::zeros(grid), law, params, emit_dt, &opts)?;
        let mut dev: f64 = 0.0;
        for (s, c) in traj.iter().zip(&ac) {
            if (s.t - c.t).abs() > 1e-9 * params.horizon {
                return Err(Error::Sync(format!("snapshot times {} and {} differ", s.t, c.t)));
            }
            let pert = s.rho.map(|r| (r - params.varrho) / params.eps);
            dev = dev.max(pert.axpy(-a, &c.s).l2() / norm);
        }
        Ok(dev)
    });
    let deviations = runs.into_iter().collect::<Result<Vec<f64>>>()?;
    let x: Vec<f64> = amplitudes.iter().map(|a| a.ln()).collect();
    let y: Vec<f64> = deviations.iter().map(|d| d.max(f64::MIN_POSITIVE).ln()).collect();
    let (exponent, stderr) = acoustics::ols(&x, &y);
    Ok(LinearizationReport { amplitudes: amplitudes.to_vec(), deviations, exponent, stderr })
}
