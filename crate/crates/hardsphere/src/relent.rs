//! Comparison pair `(r, U) = (ϱ + εs, v + ∇Ψ + w_R)` on the no-slip box, the
//! relative entropy, its remainder integrals, the mean-pressure chain and the
//! final rate bound.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acoustics::{AcousticParams, AcousticState};
use crate::cns::{stress_tensor, FluidState, ScalingParams};
use crate::eos::{PressureLaw, RenormFunction};
use crate::error::{Error, Result};
use crate::euler::{periodic_to_box, velocity_tendency, EulerState};
use crate::fields::{bogovskii, div, flatten, grad, unflatten, Boundary, GridSpec, ScalarField, VectorField};
use crate::par;

fn check_box(g: &GridSpec) -> Result<()> {
    if g.boundary != Boundary::NoSlipBox {
        return Err(Error::Grid("comparison fields live on a no-slip box".into()));
    }
    Ok(())
}

fn check_time(a: f64, b: f64) -> Result<()> {
    if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
        return Err(Error::Sync(format!("snapshot times {a} and {b} differ")));
    }
    Ok(())
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    (t * t * t * (10.0 + t * (6.0 * t - 15.0))).min(1.0)
}

/// Cutoff value at `x`: one when some coordinate is within `shell/2` of its wall,
/// zero when every coordinate is at least `shell` away.
fn cutoff_at(x: [f64; 3], grid: &GridSpec, shell: f64) -> f64 {
    let mut keep = 1.0;
    for &xa in x.iter().take(grid.dim) {
        let d = grid.half_width - xa.abs();
        keep *= smoothstep((d - 0.5 * shell) / (0.5 * shell));
    }
    1.0 - keep
}

fn check_shell(grid: &GridSpec, shell: f64) -> Result<()> {
    check_box(grid)?;
    if !(shell >= 4.0 * grid.h()) {
        return Err(Error::Grid(format!("corrector shell {shell} thinner than 4h = {}", 4.0 * grid.h())));
    }
    if shell >= grid.half_width {
        return Err(Error::Grid(format!("corrector shell {shell} does not fit in half width {}", grid.half_width)));
    }
    Ok(())
}

/// Cutoff sampled on every face of every component.
pub fn face_cutoff(grid: GridSpec, shell: f64) -> Result<VectorField> {
    check_shell(&grid, shell)?;
    let mut out = VectorField::zeros(grid);
    for a in 0..grid.dim {
        for (idx, slot) in out.comps[a].iter_mut().enumerate() {
            *slot = cutoff_at(grid.face_point(a, idx), &grid, shell);
        }
    }
    Ok(out)
}

/// `(χ_R at centers, w_R = −χ_R(v + ∇Ψ₀))`.
pub fn build_corrector(v: &VectorField, grad_psi0: &VectorField, shell: f64) -> Result<(ScalarField, VectorField)> {
    let g = v.grid;
    g.ensure_same(&grad_psi0.grid)?;
    let chi_f = face_cutoff(g, shell)?;
    let chi = ScalarField::from_fn(g, |x| cutoff_at(x, &g, shell));
    let w = v.axpy(1.0, grad_psi0).zip_map(&chi_f, |a, c| -c * a);
    Ok((chi, w))
}

/// Target velocity and its tendency on the box grid at one time.
#[derive(Clone, Debug)]
pub struct TargetFlow {
    pub t: f64,
    pub v: VectorField,
    pub dv_dt: VectorField,
}

/// Zero target flow, used in one dimension where the solenoidal part vanishes.
pub fn still_target(grid: GridSpec, times: &[f64]) -> Vec<TargetFlow> {
    times.iter().map(|&t| TargetFlow { t, v: VectorField::zeros(grid), dv_dt: VectorField::zeros(grid) }).collect()
}

/// Euler velocities and tendencies on the periodic grid of the solve.
pub fn periodic_target(traj: &[EulerState]) -> Result<Vec<TargetFlow>> {
    let out: Vec<Result<TargetFlow>> =
        par::map_slice(traj, |st| Ok(TargetFlow { t: st.t, v: st.v.clone(), dv_dt: velocity_tendency(st)? }));
    out.into_iter().collect()
}

/// Restricts a periodic target to a centred box window with the same spacing.
pub fn restrict_target(target: &[TargetFlow], box_grid: GridSpec) -> Result<Vec<TargetFlow>> {
    target
        .iter()
        .map(|tf| {
            Ok(TargetFlow {
                t: tf.t,
                v: periodic_to_box(&tf.v, box_grid)?,
                dv_dt: periodic_to_box(&tf.dv_dt, box_grid)?,
            })
        })
        .collect()
}

/// Transfers an Euler trajectory to a box grid with the same spacing.
pub fn euler_target(traj: &[EulerState], box_grid: GridSpec) -> Result<Vec<TargetFlow>> {
    restrict_target(&periodic_target(traj)?, box_grid)
}

#[derive(Clone, Debug)]
pub struct ComparisonFields {
    pub t: f64,
    /// `ϱ + εs`.
    pub r: ScalarField,
    /// `v + ∇Ψ + w_R`.
    pub velocity: VectorField,
    pub s: ScalarField,
    pub grad_psi: VectorField,
    pub v: VectorField,
    pub w: VectorField,
    pub chi: ScalarField,
    /// Exact acoustic tendency `−(ϱ/ε) ΔΨ`.
    pub ds_dt: ScalarField,
    pub dvelocity_dt: VectorField,
    pub dw_dt: VectorField,
    pub params: AcousticParams,
}

impl ComparisonFields {
    pub fn eps(&self) -> f64 {
        self.params.eps
    }

    pub fn varrho(&self) -> f64 {
        self.params.varrho
    }
}

/// Assembles `(r, U)` along synchronized acoustic and target trajectories.
pub fn comparison_trajectory(
    acoustic: &[AcousticState],
    target: &[TargetFlow],
    law: &PressureLaw,
    shell: f64,
) -> Result<Vec<ComparisonFields>> {
    if acoustic.len() != target.len() || acoustic.is_empty() {
        return Err(Error::Sync(format!("{} acoustic and {} target snapshots", acoustic.len(), target.len())));
    }
    let g = acoustic[0].s.grid;
    check_box(&g)?;
    let chi_f = face_cutoff(g, shell)?;
    let chi = ScalarField::from_fn(g, |x| cutoff_at(x, &g, shell));
    let gp0 = acoustic[0].grad_psi.clone();
    let rb = law.rho_bar();
    let out: Vec<Result<ComparisonFields>> = par::map_range(acoustic.len(), |k| {
        let ac = &acoustic[k];
        let tf = &target[k];
        check_time(ac.t, tf.t)?;
        tf.v.grid.ensure_same(&g)?;
        let AcousticParams { eps, varrho, dp } = ac.params;
        let w = tf.v.axpy(1.0, &gp0).zip_map(&chi_f, |a, c| -c * a);
        let velocity = tf.v.axpy(1.0, &ac.grad_psi).axpy(1.0, &w);
        let r = ac.s.map(|s| varrho + eps * s);
        if let Some(bad) = r.data.iter().find(|&&x| !(x > 0.0 && x < rb)) {
            return Err(Error::Parameter(format!(
                "density bound 0 < varrho + eps*s < rho_bar violated ({bad}) at t = {}",
                ac.t
            )));
        }
        let ds_dt = div(&ac.grad_psi).scale(-varrho / eps);
        let dw_dt = tf.dv_dt.zip_map(&chi_f, |a, c| -c * a);
        let dgrad = grad(&ac.s).scale(-dp / (varrho * eps));
        let dvelocity_dt = tf.dv_dt.axpy(1.0, &dgrad).axpy(1.0, &dw_dt);
        Ok(ComparisonFields {
            t: ac.t,
            r,
            velocity,
            s: ac.s.clone(),
            grad_psi: ac.grad_psi.clone(),
            v: tf.v.clone(),
            w,
            chi: chi.clone(),
            ds_dt,
            dvelocity_dt,
            dw_dt,
            params: ac.params,
        })
    });
    out.into_iter().collect()
}

/// Corrector size at one snapshot.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CorrectorNorms {
    pub t: f64,
    pub l2: f64,
    pub w2p: f64,
    pub dt_lp: f64,
}

/// Discrete `W^{2,p}` norm of a face field from first and second differences.
fn w2p_norm(v: &VectorField, p: f64) -> f64 {
    let g = v.grid;
    let h = g.h();
    let dv = g.cell_volume();
    let mut acc = 0.0;
    for (a, comp) in v.comps.iter().enumerate() {
        let fs = g.face_shape(a);
        for (idx, &val) in comp.iter().enumerate() {
            acc += val.abs().powf(p);
            let ijk = unflatten(idx, fs);
            for b in 0..g.dim {
                let last = fs[b] - 1;
                if ijk[b] < last {
                    let mut up = ijk;
                    up[b] += 1;
                    acc += ((comp[flatten(up, fs)] - val) / h).abs().powf(p);
                }
                if ijk[b] > 0 && ijk[b] < last {
                    let (mut lo, mut up) = (ijk, ijk);
                    lo[b] -= 1;
                    up[b] += 1;
                    let d2 = (comp[flatten(up, fs)] - 2.0 * val + comp[flatten(lo, fs)]) / (h * h);
                    acc += d2.abs().powf(p);
                }
            }
        }
    }
    (acc * dv).powf(1.0 / p)
}

pub fn corrector_norms(cmp: &[ComparisonFields], p: f64) -> Vec<CorrectorNorms> {
    cmp.iter().map(|c| CorrectorNorms { t: c.t, l2: c.w.l2(), w2p: w2p_norm(&c.w, p), dt_lp: c.dw_dt.lq(p) }).collect()
}

/// Largest `|div(w_R + ∇Ψ)|` over the trajectory.
pub fn divergence_bound(cmp: &[ComparisonFields]) -> f64 {
    cmp.iter().map(|c| div(&c.w.axpy(1.0, &c.grad_psi)).max_abs()).fold(0.0, f64::max)
}

/// Center values averaged to faces; boundary faces copy the adjacent cell.
pub fn face_average(s: &ScalarField) -> VectorField {
    let g = s.grid;
    let cs = g.center_shape();
    let mut out = VectorField::zeros(g);
    for a in 0..g.dim {
        let fs = g.face_shape(a);
        for (idx, slot) in out.comps[a].iter_mut().enumerate() {
            let ijk = unflatten(idx, fs);
            let mut lo = ijk;
            if ijk[a] == 0 {
                *slot = s.data[flatten(ijk, cs)];
                continue;
            }
            lo[a] -= 1;
            *slot = if ijk[a] == g.cells {
                s.data[flatten(lo, cs)]
            } else {
                0.5 * (s.data[flatten(ijk, cs)] + s.data[flatten(lo, cs)])
            };
        }
    }
    out
}

/// `(w·∇)V` on the interior faces of `V`, zero on boundary faces. Transverse
/// neighbours beyond a wall use the no-slip ghost `−V`.
pub fn advective(w: &VectorField, big_v: &VectorField) -> VectorField {
    let g = big_v.grid;
    let n = g.cells;
    let h = g.h();
    let mut out = VectorField::zeros(g);
    for a in 0..g.dim {
        let fs = g.face_shape(a);
        let va = &big_v.comps[a];
        for (idx, slot) in out.comps[a].iter_mut().enumerate() {
            let ijk = unflatten(idx, fs);
            if ijk[a] == 0 || ijk[a] == n {
                continue;
            }
            let mut acc = 0.0;
            for b in 0..g.dim {
                if b == a {
                    let (mut lo, mut up) = (ijk, ijk);
                    lo[a] -= 1;
                    up[a] += 1;
                    acc += w.comps[a][idx] * (va[flatten(up, fs)] - va[flatten(lo, fs)]) / (2.0 * h);
                } else {
                    let bs = g.face_shape(b);
                    let mut wb = 0.0;
                    for da in 0..2 {
                        for db in 0..2 {
                            let mut q = ijk;
                            q[a] -= da;
                            q[b] += db;
                            wb += w.comps[b][flatten(q, bs)];
                        }
                    }
                    wb *= 0.25;
                    let here = va[idx];
                    let up = if ijk[b] + 1 < n {
                        let mut q = ijk;
                        q[b] += 1;
                        va[flatten(q, fs)]
                    } else {
                        -here
                    };
                    let lo = if ijk[b] > 0 {
                        let mut q = ijk;
                        q[b] -= 1;
                        va[flatten(q, fs)]
                    } else {
                        -here
                    };
                    acc += wb * (up - lo) / (2.0 * h);
                }
            }
            *slot = acc;
        }
    }
    out
}

/// `Σ weight·a·b` over faces times the cell volume.
fn weighted_dot(weight: &VectorField, a: &VectorField, b: &VectorField) -> f64 {
    let mut acc = 0.0;
    for c in 0..a.comps.len() {
        for i in 0..a.comps[c].len() {
            acc += weight.comps[c][i] * a.comps[c][i] * b.comps[c][i];
        }
    }
    acc * a.grid.cell_volume()
}

/// `∫S(∇a):∇b` by polarization of the discrete stress work.
pub fn stress_pairing(a: &VectorField, b: &VectorField, mu: f64) -> Result<f64> {
    let plus = stress_tensor(&a.axpy(1.0, b), mu)?.work();
    let minus = stress_tensor(&a.axpy(-1.0, b), mu)?.work();
    Ok(0.25 * (plus - minus))
}

fn center_sum(a: &[f64], dv: f64) -> f64 {
    a.iter().sum::<f64>() * dv
}

/// Kinetic and potential parts of the relative entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EntropyParts {
    pub kinetic: f64,
    pub potential: f64,
}

impl EntropyParts {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential
    }
}

/// `½∫ρ|u − U|² + ε⁻²∫P(ρ) − P(r) − P′(r)(ρ − r)`.
pub fn relative_entropy(state: &FluidState, cmp: &ComparisonFields, law: &PressureLaw) -> Result<EntropyParts> {
    let g = state.rho.grid;
    g.ensure_same(&cmp.r.grid)?;
    let rho_f = face_average(&state.rho);
    let diff = state.u.axpy(-1.0, &cmp.velocity);
    let kinetic = 0.5 * weighted_dot(&rho_f, &diff, &diff);
    let mut gap = 0.0;
    for (&rho, &r) in state.rho.data.iter().zip(&cmp.r.data) {
        gap += law.relative_potential(rho, r)?;
    }
    let eps = cmp.eps();
    Ok(EntropyParts { kinetic, potential: gap * g.cell_volume() / (eps * eps) })
}

/// `(∫ρ|u − ∇Ψ − v|², ‖(ρ − ϱ)/ε − s‖²)`.
pub fn limit_distance(state: &FluidState, cmp: &ComparisonFields) -> Result<(f64, f64)> {
    check_time(state.t, cmp.t)?;
    state.rho.grid.ensure_same(&cmp.r.grid)?;
    let rho_f = face_average(&state.rho);
    let diff = state.u.axpy(-1.0, &cmp.grad_psi).axpy(-1.0, &cmp.v);
    let vel = weighted_dot(&rho_f, &diff, &diff);
    let (eps, varrho) = (cmp.eps(), cmp.varrho());
    let dens = state.rho.zip_map(&cmp.s, |rho, s| (rho - varrho) / eps - s).l2().powi(2);
    Ok((vel, dens))
}

/// Trapezoid running integrals of `f` over the times `t`.
fn running_integral(t: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for k in 1..t.len() {
        out[k] = out[k - 1] + 0.5 * (t[k] - t[k - 1]) * (f[k] + f[k - 1]);
    }
    out
}

/// Second-order time derivative of sampled data.
fn time_derivative(t: &[f64], f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = t.len();
    (0..n)
        .map(|k| {
            let (a, b) = if n < 2 {
                return vec![0.0; f[k].len()];
            } else if k == 0 {
                (0, 1)
            } else if k == n - 1 {
                (n - 2, n - 1)
            } else {
                (k - 1, k + 1)
            };
            let dt = t[b] - t[a];
            if n >= 3 && (k == 0 || k == n - 1) {
                // One-sided second-order stencil.
                let (i0, i1, i2, s) = if k == 0 { (0, 1, 2, 1.0) } else { (n - 1, n - 2, n - 3, -1.0) };
                let h = (t[i1] - t[i0]).abs();
                return (0..f[k].len())
                    .map(|j| s * (-3.0 * f[i0][j] + 4.0 * f[i1][j] - f[i2][j]) / (2.0 * h))
                    .collect();
            }
            (0..f[k].len()).map(|j| (f[b][j] - f[a][j]) / dt).collect()
        })
        .collect()
}

/// Acceptance tolerances of the inequality check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReiTolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for ReiTolerance {
    fn default() -> Self {
        ReiTolerance { rel: 1e-2, abs: 1e-10 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RelEntropyRow {
    pub tau: f64,
    #[serde(rename = "E")]
    pub entropy: f64,
    /// `ν∫₀^τ∫(S(∇u) − S(∇U)):∇(u − U)`.
    pub dissipation: f64,
    /// `ε⁻²∫₀^τ∫p(ρ)b(ρ)`.
    pub pb_term: f64,
    /// Running integrals of the first two remainders and the boundary-in-time remainder.
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "R3")]
    pub r3: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_minus_rhs: f64,
    /// `(‖ρ − r‖², C∫gap)`.
    pub density_control: (f64, f64),
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RelEntropyReport {
    pub rows: Vec<RelEntropyRow>,
    pub tolerance: ReiTolerance,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Whether `b(ρ)` is nonzero at some snapshot.
    pub b_active: bool,
    /// Largest mean of a Bogovskii source before its solve.
    pub max_source_mean: f64,
    pub density_control_pass: bool,
    /// Right side of the rate bound, filled in by the study driver.
    pub rate_bound: Option<f64>,
    pub pass: bool,
}

impl RelEntropyReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("tau,E,dissipation,pb_term,R1,R2,R3,lhs_minus_rhs\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                r.tau, r.entropy, r.dissipation, r.pb_term, r.r1, r.r2, r.r3, r.lhs_minus_rhs
            ));
        }
        s
    }

    /// Writes `report.json` and `relent.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::File::create(dir.join("relent.csv"))?.write_all(self.csv().as_bytes())?;
        Ok(())
    }
}

struct Rates {
    entropy: f64,
    dissipation: f64,
    pb: f64,
    r1: f64,
    r2: f64,
    r3_point: f64,
    b_active: bool,
    source_mean: f64,
    control: (f64, f64),
}

/// Bogovskii solve of a mean-zero source; an identically zero source maps to zero.
fn bog(f: &ScalarField, means: &mut f64) -> Result<VectorField> {
    *means = means.max(f.mean().abs());
    if f.max_abs() == 0.0 {
        return Ok(VectorField::zeros(f.grid));
    }
    Ok(bogovskii(f, 2.0)?.0)
}

fn rates(
    state: &FluidState,
    cmp: &ComparisonFields,
    b: &RenormFunction,
    law: &PressureLaw,
    params: &ScalingParams,
    control_c: f64,
) -> Result<Rates> {
    let g = state.rho.grid;
    check_time(state.t, cmp.t)?;
    g.ensure_same(&cmp.r.grid)?;
    let dv = g.cell_volume();
    let eps = cmp.eps();
    let inv_eps2 = 1.0 / (eps * eps);
    let (nu, mu) = (params.nu, params.mu);
    let u = &state.u;
    let big_u = &cmp.velocity;
    let rho = &state.rho.data;
    let r = &cmp.r.data;
    let rho_f = face_average(&state.rho);
    let diff = u.axpy(-1.0, big_u);
    let entropy = relative_entropy(state, cmp, law)?.total();
    let dissipation = nu * stress_tensor(&diff, mu)?.work();

    let mut p_rho = Vec::with_capacity(rho.len());
    let mut p_r = Vec::with_capacity(rho.len());
    let mut dpot_r = Vec::with_capacity(rho.len());
    let mut p2_r = Vec::with_capacity(rho.len());
    let mut bvals = Vec::with_capacity(rho.len());
    let mut dbvals = Vec::with_capacity(rho.len());
    for (&x, &y) in rho.iter().zip(r) {
        p_rho.push(law.pressure(x)?);
        p_r.push(law.pressure(y)?);
        let (_, d1, d2) = law.potential_cached(y)?;
        dpot_r.push(d1);
        p2_r.push(d2);
        let (bv, dbv) = b.eval(x);
        bvals.push(bv);
        dbvals.push(dbv);
    }
    let pb = inv_eps2 * rho.iter().zip(&bvals).zip(&p_rho).map(|((_, bv), p)| p * bv).sum::<f64>() * dv;

    // First remainder, term by term.
    let back = big_u.axpy(-1.0, u);
    let material = cmp.dvelocity_dt.axpy(1.0, &advective(u, big_u));
    let t_transport = weighted_dot(&rho_f, &material, &back);
    let t_visc = nu * stress_pairing(big_u, &back, mu)?;
    let t_time: f64 =
        (0..rho.len()).map(|i| (r[i] - rho[i]) * p2_r[i] * eps * cmp.ds_dt.data[i]).sum::<f64>() * dv * inv_eps2;
    let grad_pot = grad(&ScalarField { grid: g, data: dpot_r });
    let r_f = face_average(&cmp.r);
    let flux_gap = big_u.zip_map(&r_f, |a, b| a * b).axpy(-1.0, &u.zip_map(&rho_f, |a, b| a * b));
    let t_flux = inv_eps2 * flux_gap.dot(&grad_pot);
    let div_u_cmp = div(big_u);
    let t_press: f64 =
        (0..rho.len()).map(|i| div_u_cmp.data[i] * (p_r[i] - p_rho[i])).sum::<f64>() * dv * inv_eps2;
    let r1 = t_transport + t_visc + t_time + t_flux + t_press;

    // Second and third remainders through Bogovskii solves.
    let b_active = bvals.iter().any(|&v| v != 0.0);
    let mut source_mean: f64 = 0.0;
    let (r2, r3_point) = if b_active {
        let bfield = ScalarField { grid: g, data: bvals.clone() };
        let mb = bfield.mean();
        let beta = bog(&bfield.map(|v| v - mb), &mut source_mean)?;
        let t1 = inv_eps2 * mb * center_sum(&p_rho, dv);
        let t2 = -weighted_dot(&rho_f, u, &advective(u, &beta));
        let t3 = nu * stress_pairing(u, &beta, mu)?;
        let bu = face_average(&bfield).zip_map(u, |a, b| a * b);
        let beta4 = bog(&div(&bu).centered(), &mut source_mean)?;
        let t4 = weighted_dot(&rho_f, u, &beta4);
        let div_u = div(u);
        let defect = ScalarField {
            grid: g,
            data: (0..rho.len()).map(|i| (dbvals[i] * rho[i] - bvals[i]) * div_u.data[i]).collect(),
        };
        let beta5 = bog(&defect.centered(), &mut source_mean)?;
        let t5 = weighted_dot(&rho_f, u, &beta5);
        (t1 + t2 + t3 + t4 + t5, weighted_dot(&rho_f, u, &beta))
    } else {
        (0.0, 0.0)
    };
    let (lhs_c, gap_c) = crate::eos::l2_control_sides(law, rho, r, dv)?;
    Ok(Rates {
        entropy,
        dissipation,
        pb,
        r1,
        r2,
        r3_point,
        b_active,
        source_mean,
        control: (lhs_c, control_c * gap_c),
    })
}

/// Evaluates both sides of the relative entropy inequality at every snapshot.
/// `control_c` is the constant of `‖ρ − r‖² ≤ C∫gap`.
pub fn rei_check(
    traj: &[FluidState],
    cmp: &[ComparisonFields],
    b: &RenormFunction,
    law: &PressureLaw,
    params: &ScalingParams,
    control_c: f64,
    tol: ReiTolerance,
) -> Result<RelEntropyReport> {
    if traj.len() != cmp.len() || traj.is_empty() {
        return Err(Error::Sync(format!("{} fluid and {} comparison snapshots", traj.len(), cmp.len())));
    }
    let per: Vec<Result<Rates>> = par::map_range(traj.len(), |k| rates(&traj[k], &cmp[k], b, law, params, control_c));
    let per = per.into_iter().collect::<Result<Vec<Rates>>>()?;
    let t: Vec<f64> = traj.iter().map(|s| s.t).collect();
    let col = |f: fn(&Rates) -> f64| -> Vec<f64> { per.iter().map(f).collect() };
    let diss = running_integral(&t, &col(|r| r.dissipation));
    let pb = running_integral(&t, &col(|r| r.pb));
    let r1 = running_integral(&t, &col(|r| r.r1));
    let r2 = running_integral(&t, &col(|r| r.r2));
    let e0 = per[0].entropy;
    let r3_0 = per[0].r3_point;
    let mut rows = Vec::with_capacity(t.len());
    for k in 0..t.len() {
        let r3 = per[k].r3_point - r3_0;
        let lhs = per[k].entropy + diss[k] + pb[k];
        let rhs = e0 + r1[k] + r2[k] + r3;
        let pass = lhs <= rhs + tol.rel * rhs.abs() + tol.abs;
        rows.push(RelEntropyRow {
            tau: t[k],
            entropy: per[k].entropy,
            dissipation: diss[k],
            pb_term: pb[k],
            r1: r1[k],
            r2: r2[k],
            r3,
            lhs,
            rhs,
            lhs_minus_rhs: lhs - rhs,
            density_control: per[k].control,
            pass,
        });
    }
    let density_control_pass = per.iter().all(|r| r.control.0 <= r.control.1 * (1.0 + 1e-9) + 1e-300);
    let pass = rows.iter().all(|r| r.pass);
    Ok(RelEntropyReport {
        rows,
        tolerance: tol,
        alpha1: b.alpha1,
        alpha2: b.alpha2,
        b_active: per.iter().any(|r| r.b_active),
        max_source_mean: per.iter().map(|r| r.source_mean).fold(0.0, f64::max),
        density_control_pass,
        rate_bound: None,
        pass,
    })
}

/// Two terms that cancel exactly in the continuum argument.
#[derive(Clone, Debug, Serialize)]
pub struct CancellationPair {
    pub name: String,
    pub first: f64,
    pub second: f64,
    /// `max_τ |first + second| / max_τ max(|first|, |second|)`.
    pub relative_mismatch: f64,
}

fn pair_from(name: &str, a: &[f64], b: &[f64]) -> CancellationPair {
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    let worst = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x + y).abs()));
    CancellationPair {
        name: name.into(),
        first: *a.last().unwrap_or(&0.0),
        second: *b.last().unwrap_or(&0.0),
        relative_mismatch: if scale > 0.0 { worst / scale } else { 0.0 },
    }
}

/// The three paired terms, each side evaluated from its own displayed form with
/// snapshot-differenced time derivatives.
pub fn cancellation_pairs(traj: &[FluidState], cmp: &[ComparisonFields]) -> Result<Vec<CancellationPair>> {
    if traj.len() != cmp.len() || cmp.len() < 3 {
        return Err(Error::Sync(format!("{} fluid and {} comparison snapshots", traj.len(), cmp.len())));
    }
    for (s, c) in traj.iter().zip(cmp) {
        check_time(s.t, c.t)?;
    }
    let AcousticParams { eps, varrho, dp } = cmp[0].params;
    let g = cmp[0].s.grid;
    let dv = g.cell_volume();
    let t: Vec<f64> = cmp.iter().map(|c| c.t).collect();

    // Acoustic energy pair.
    let s2: Vec<f64> = cmp.iter().map(|c| c.s.l2().powi(2)).collect();
    let g2: Vec<f64> = cmp.iter().map(|c| c.grad_psi.l2().powi(2)).collect();
    let i3b: Vec<f64> = s2.iter().map(|v| dp / (2.0 * varrho) * (v - s2[0])).collect();
    let j4d: Vec<f64> = g2.iter().map(|v| 0.5 * varrho * (v - g2[0])).collect();

    // Momentum against the acoustic potential tendency.
    let flat_grad: Vec<Vec<f64>> = cmp.iter().map(|c| c.grad_psi.comps.concat()).collect();
    let dgrad = time_derivative(&t, &flat_grad);
    let mut rate_i4 = vec![];
    let mut rate_j4 = vec![];
    for (k, (st, c)) in traj.iter().zip(cmp).enumerate() {
        let m = st.u.zip_map(&face_average(&st.rho), |a, b| a * b);
        rate_i4.push(-(dp / varrho) / eps * m.dot(&grad(&c.s)));
        let flat_m = m.comps.concat();
        rate_j4.push(-flat_m.iter().zip(&dgrad[k]).map(|(a, b)| a * b).sum::<f64>() * dv);
    }

    // Density perturbation against the acoustic divergence.
    let flat_s: Vec<Vec<f64>> = cmp.iter().map(|c| c.s.data.clone()).collect();
    let ds = time_derivative(&t, &flat_s);
    let mut rate_i3d = vec![];
    let mut rate_j5b = vec![];
    for (k, (st, c)) in traj.iter().zip(cmp).enumerate() {
        let lap = div(&c.grad_psi);
        let mut a = 0.0;
        let mut bsum = 0.0;
        for i in 0..st.rho.data.len() {
            let dr = st.rho.data[i] - varrho;
            a += -dr * (dp / varrho) * ds[k][i];
            bsum += dr * lap.data[i];
        }
        rate_i3d.push(a * dv / eps);
        rate_j5b.push(-dp * bsum * dv / (eps * eps));
    }
    Ok(vec![
        pair_from("acoustic energy", &i3b, &j4d),
        pair_from("momentum against potential tendency", &running_integral(&t, &rate_i4), &running_integral(&t, &rate_j4)),
        pair_from("density against potential divergence", &running_integral(&t, &rate_j5b), &running_integral(&t, &rate_i3d)),
    ])
}

/// Mean pressure, evaluated directly and through the Bogovskii chain.
#[derive(Clone, Debug, Serialize)]
pub struct MeanPressureReport {
    pub tau: f64,
    /// `|Ω|⁻¹∫₀^τ∫p(ρ)`.
    pub direct: f64,
    /// `|Ω|⁻¹∫₀^τ∫p(ρ)(ρ − ⟨ρ⟩)` by direct quadrature (`J₁ + J₂`).
    pub centered_direct: f64,
    /// The same quantity from the four Bogovskii terms, `ε²|Ω|⁻¹ΣI`.
    pub centered_bogovskii: f64,
    pub j1: f64,
    pub j2: f64,
    /// `|Ω|⁻¹∫ρ₀`.
    pub mean_density: f64,
    /// `rho_bar − varrho − eps0·D`.
    pub window_gap: f64,
    /// `max p` on `[0, (rho_bar + varrho + eps0·D)/2]`.
    pub p_max: f64,
    pub bound: f64,
    pub mean_below_ceiling: bool,
    pub pass: bool,
}

pub fn mean_pressure_estimate(
    traj: &[FluidState],
    law: &PressureLaw,
    params: &ScalingParams,
    eps0: f64,
) -> Result<MeanPressureReport> {
    let Some(first) = traj.first() else {
        return Err(Error::Sync("empty trajectory".into()));
    };
    let g = first.rho.grid;
    let dv = g.cell_volume();
    let vol = g.volume();
    let rb = law.rho_bar();
    let m = first.rho.mean();
    let split = 0.5 * (rb + m);
    let window_gap = rb - params.varrho - eps0 * params.data_radius;
    let t: Vec<f64> = traj.iter().map(|s| s.t).collect();
    struct Row {
        p_int: f64,
        j1: f64,
        j2: f64,
        bog: f64,
        endpoint: f64,
    }
    let rows: Vec<Result<Row>> = par::map_slice(traj, |st| {
        let mean = st.rho.mean();
        let mut p_int = 0.0;
        let (mut j1, mut j2) = (0.0, 0.0);
        for &x in &st.rho.data {
            let p = law.pressure(x)?;
            p_int += p;
            let c = p * (x - mean);
            if x <= split {
                j1 += c;
            } else {
                j2 += c;
            }
        }
        let mut means = 0.0;
        let beta = bog(&st.rho.centered(), &mut means)?;
        let rho_f = face_average(&st.rho);
        let mom = st.u.zip_map(&rho_f, |a, b| a * b);
        let i1 = -weighted_dot(&rho_f, &st.u, &advective(&st.u, &beta));
        let i2 = params.nu * stress_pairing(&st.u, &beta, params.mu)?;
        let beta3 = bog(&div(&mom).centered(), &mut means)?;
        let i3 = mom.dot(&beta3);
        Ok(Row { p_int: p_int * dv / vol, j1: j1 * dv / vol, j2: j2 * dv / vol, bog: i1 + i2 + i3, endpoint: mom.dot(&beta) })
    });
    let rows = rows.into_iter().collect::<Result<Vec<Row>>>()?;
    let integ = |f: &dyn Fn(&Row) -> f64| -> f64 {
        *running_integral(&t, &rows.iter().map(f).collect::<Vec<_>>()).last().unwrap_or(&0.0)
    };
    let direct = integ(&|r| r.p_int);
    let j1 = integ(&|r| r.j1);
    let j2 = integ(&|r| r.j2);
    let i4 = rows.last().map(|r| r.endpoint).unwrap_or(0.0) - rows[0].endpoint;
    let eps2 = params.eps * params.eps;
    let centered_bogovskii = eps2 / vol * (integ(&|r| r.bog) + i4);
    let tau = *t.last().unwrap_or(&0.0);
    let top = 0.5 * (rb + params.varrho + eps0 * params.data_radius);
    let mut p_max: f64 = 0.0;
    for k in 0..=512 {
        p_max = p_max.max(law.pressure(top * k as f64 / 512.0)?);
    }
    let bound = if window_gap > 0.0 {
        tau * p_max + 2.0 / window_gap * (centered_bogovskii.abs() + j1.abs())
    } else {
        f64::INFINITY
    };
    Ok(MeanPressureReport {
        tau,
        direct,
        centered_direct: j1 + j2,
        centered_bogovskii,
        j1,
        j2,
        mean_density: m,
        window_gap,
        p_max,
        bound,
        mean_below_ceiling: m < rb,
        pass: direct <= bound && m < rb,
    })
}

/// `ε₁ = min{rho_bar − varrho, varrho} / sup|s|`.
pub fn eps1_ceiling(law: &PressureLaw, varrho: f64, s_sup: f64) -> f64 {
    let room = (law.rho_bar() - varrho).min(varrho);
    if s_sup > 0.0 {
        room / s_sup
    } else {
        f64::INFINITY
    }
}

/// Largest `|s|` along an acoustic trajectory.
pub fn acoustic_sup(acoustic: &[AcousticState]) -> f64 {
    acoustic.iter().map(|a| a.s.max_abs()).fold(0.0, f64::max)
}

/// Constants `c(D,T)`, `c₂` and the inner `c` of the rate bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub c_dt: f64,
    pub c2: f64,
    pub c: f64,
}

/// Arguments of the rate bound at one sweep point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub eps: f64,
    pub nu: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    pub alpha: f64,
    pub eps0: f64,
    pub eps1: f64,
    /// `rho_bar − varrho − eps0·D`.
    pub window_gap: f64,
    /// `‖u₀,ε − u₀‖²`.
    pub dist_u: f64,
    /// `‖ρ⁽¹⁾₀,ε − ρ⁽¹⁾₀‖²`.
    pub dist_rho: f64,
}

/// `(prefactor, exponent)` with the bound equal to `prefactor·exp(exponent)`.
pub fn rate_bound_parts(inp: &RateInputs, k: &RateConstants) -> Result<(f64, f64)> {
    let RateInputs { eps, nu, radius, alpha, eps0, eps1, window_gap, dist_u, dist_rho } = *inp;
    if !(eps > 0.0 && eps < eps0.min(eps1)) {
        return Err(Error::Parameter(format!("eps = {eps} must lie in (0, min(eps0, eps1)) = (0, {})", eps0.min(eps1))));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if !(nu > 0.0 && radius > 0.0 && window_gap > 0.0) {
        return Err(Error::Parameter(format!("need nu, R and the window gap positive (got {nu}, {radius}, {window_gap})")));
    }
    let ri = 1.0 / radius;
    let e2 = eps * eps;
    let pre = k.c_dt * (eps.powf(alpha) + ri + nu + e2 * (1.0 + ri * ri) + eps / nu) + k.c2 * (dist_u + dist_rho);
    let expo = k.c_dt * (1.0 + e2 * nu + eps.powf(4.0 / 3.0) / nu * (1.0 + ri.powi(4)) + e2 + ri * ri + e2 * ri * ri)
        + k.c * e2 / window_gap * (ri / nu + k.c * nu.sqrt() * ri.powf(1.5) + 1.0);
    Ok((pre, expo))
}

pub fn rate_bound_rhs(inp: &RateInputs, k: &RateConstants) -> Result<f64> {
    let (pre, expo) = rate_bound_parts(inp, k)?;
    Ok(pre * expo.exp())
}

/// Smallest `c(D,T)` (with `c₂ = c(D,T)` and `c = 1`) for which the bound
/// reaches `gap` at the calibration point.
pub fn calibrate_rate_constants(inp: &RateInputs, gap: f64) -> Result<RateConstants> {
    if !(gap >= 0.0 && gap.is_finite()) {
        return Err(Error::Fit(format!("calibration gap {gap} must be finite and nonnegative")));
    }
    let at = |c: f64| rate_bound_rhs(inp, &RateConstants { c_dt: c, c2: c, c: 1.0 });
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while at(hi)? < gap {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Fit("rate constant calibration diverged".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid)? < gap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(RateConstants { c_dt: hi, c2: hi, c: 1.0 })
}
