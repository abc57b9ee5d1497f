//! Poisson solves, Helmholtz projection, Biot–Savart and the Bogovskii operator.

use num_complex::Complex64;
use serde::Serialize;

use super::fastdiag::{self, Basis, Kind};
use super::spectral::{self, half_shift};
use super::{div, flatten, grad, unflatten, Boundary, GridSpec, ScalarField, Shape, VectorField};
use crate::error::{Error, Result};

/// Relative residual target of the iterative box solves.
pub const POISSON_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 500;

/// Mean-zero `phi` with `Δphi = f − ⟨f⟩` on a periodic grid.
pub fn poisson_periodic(f: &ScalarField) -> Result<ScalarField> {
    let g = f.grid;
    if g.boundary != Boundary::Periodic {
        return Err(Error::Grid("periodic Poisson solve on a box grid".into()));
    }
    let hat = spectral::forward(&g, &f.data);
    let spec = hat
        .into_iter()
        .enumerate()
        .map(|(idx, c)| {
            let (k, _) = spectral::wavevector(&g, idx);
            let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            if k2 == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                -c / k2
            }
        })
        .collect();
    Ok(ScalarField { grid: g, data: spectral::inverse(&g, spec) })
}

fn neumann_bases(g: &GridSpec) -> Vec<Basis> {
    (0..g.dim).map(|_| Basis::new(Kind::NeumannCells, g.cells, g.h())).collect()
}

/// Mean-zero `phi` with `div grad phi = f − ⟨f⟩` under zero normal flux, by
/// preconditioned conjugate gradients.
pub fn poisson_neumann(f: &ScalarField) -> Result<ScalarField> {
    let g = f.grid;
    if g.boundary != Boundary::NoSlipBox {
        return Err(Error::Grid("Neumann Poisson solve on a periodic grid".into()));
    }
    let shape = g.center_shape();
    let bases = neumann_bases(&g);
    // A = −div grad is SPD on mean-zero fields; the preconditioner is its exact spectral inverse.
    let apply = |x: &[f64]| -> Vec<f64> {
        let d = div(&grad(&ScalarField { grid: g, data: x.to_vec() }));
        d.data.iter().map(|v| -v).collect()
    };
    let precond = |r: &[f64]| -> Vec<f64> {
        let mut z = r.to_vec();
        fastdiag::solve(&mut z, shape, &bases);
        let m = z.iter().sum::<f64>() / z.len() as f64;
        z.iter().map(|v| -(v - m)).collect()
    };
    let b: Vec<f64> = f.centered().data.iter().map(|v| -v).collect();
    let (x, _) = pcg(&apply, &precond, &b, POISSON_TOL)?;
    Ok(ScalarField { grid: g, data: x }.centered())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned CG from a zero initial guess; stops at `‖r‖ <= tol ‖b‖`.
fn pcg(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    precond: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, usize)> {
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; b.len()];
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.to_vec();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..MAX_ITERS {
        let ap = apply(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Ok((x, it + 1));
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = dot(&r, &r).sqrt() / bnorm;
    Err(Error::Solver(format!("CG stalled at relative residual {res:e} after {MAX_ITERS} iterations")))
}

/// Divergence-free part `H(u)`; `u − H(u)` is a discrete gradient.
pub fn helmholtz_project(u: &VectorField) -> Result<VectorField> {
    let d = div(u);
    let phi = match u.grid.boundary {
        Boundary::Periodic => poisson_periodic(&d)?,
        Boundary::NoSlipBox => poisson_neumann(&d)?,
    };
    Ok(u.axpy(-1.0, &grad(&phi)))
}

/// Velocity `v = −curl Δ⁻¹ ω` on a 2D periodic grid.
pub fn biot_savart(omega: &ScalarField) -> Result<VectorField> {
    let g = omega.grid;
    if g.dim != 2 || g.boundary != Boundary::Periodic {
        return Err(Error::Grid("Biot-Savart needs a 2D periodic grid".into()));
    }
    let scale = omega.max_abs().max(1.0);
    if omega.mean().abs() > 1e-10 * scale {
        return Err(Error::Mean(format!("vorticity mean {:e}", omega.mean())));
    }
    let h = g.h();
    let hat = spectral::forward(&g, &omega.data);
    let zero = Complex64::new(0.0, 0.0);
    let i = Complex64::new(0.0, 1.0);
    let mut vx = Vec::with_capacity(hat.len());
    let mut vy = Vec::with_capacity(hat.len());
    for (idx, &w) in hat.iter().enumerate() {
        let (k, nyq) = spectral::wavevector(&g, idx);
        let k2 = k[0] * k[0] + k[1] * k[1];
        if nyq || k2 == 0.0 {
            vx.push(zero);
            vy.push(zero);
            continue;
        }
        let psi = -w / k2;
        vx.push(-i * k[1] * half_shift(k[0], h, -1.0) * psi);
        vy.push(i * k[0] * half_shift(k[1], h, -1.0) * psi);
    }
    Ok(VectorField { grid: g, comps: vec![spectral::inverse(&g, vx), spectral::inverse(&g, vy)] })
}

/// Outcome of a Bogovskii solve.
#[derive(Clone, Debug, Serialize)]
pub struct BogovskiiReport {
    pub residual_l2: f64,
    pub boundary_trace: f64,
    pub norm_ratio: f64,
    pub p: f64,
    pub iterations: usize,
}

fn interior_shape(g: &GridSpec, a: usize) -> Shape {
    let mut s = g.face_shape(a);
    s[a] -= 2;
    s
}

fn velocity_bases(g: &GridSpec, a: usize) -> Vec<Basis> {
    (0..g.dim)
        .map(|b| Basis::new(if b == a { Kind::DirichletNodes } else { Kind::DirichletCells }, g.cells, g.h()))
        .collect()
}

/// `A⁻¹ v` for the negative vector Laplacian with zero wall values, componentwise.
fn inverse_stokes_laplacian(v: &VectorField, bases: &[Vec<Basis>]) -> VectorField {
    let g = v.grid;
    let mut out = VectorField::zeros(g);
    for a in 0..g.dim {
        let fs = g.face_shape(a);
        let is = interior_shape(&g, a);
        let mut buf: Vec<f64> = (0..is[0] * is[1] * is[2])
            .map(|idx| {
                let mut ijk = unflatten(idx, is);
                ijk[a] += 1;
                -v.comps[a][flatten(ijk, fs)]
            })
            .collect();
        debug_assert_eq!(bases[a][a].len(), is[a]);
        fastdiag::solve(&mut buf, is, &bases[a]);
        for (idx, val) in buf.into_iter().enumerate() {
            let mut ijk = unflatten(idx, is);
            ijk[a] += 1;
            out.comps[a][flatten(ijk, fs)] = val;
        }
    }
    out
}

/// Discrete `‖∇B‖_{L^p}^p` with zero wall values (ghost reflection across walls).
fn gradient_lp_pow(v: &VectorField, p: f64) -> f64 {
    let g = v.grid;
    let h = g.h();
    let dv = g.cell_volume();
    let mut acc = 0.0;
    for a in 0..g.dim {
        let fs = g.face_shape(a);
        let comp = &v.comps[a];
        for b in 0..g.dim {
            for (idx, &val) in comp.iter().enumerate() {
                let ijk = unflatten(idx, fs);
                if b == a {
                    if ijk[a] < g.cells {
                        let mut up = ijk;
                        up[a] += 1;
                        acc += ((comp[flatten(up, fs)] - val) / h).abs().powf(p);
                    }
                } else {
                    if ijk[b] + 1 < g.cells {
                        let mut up = ijk;
                        up[b] += 1;
                        acc += ((comp[flatten(up, fs)] - val) / h).abs().powf(p);
                    }
                    if ijk[b] == 0 || ijk[b] + 1 == g.cells {
                        // Half-cell distance to the wall.
                        acc += (2.0 * val / h).abs().powf(p);
                    }
                }
            }
        }
    }
    acc * dv
}

/// Minimal-gradient right inverse of the divergence with zero boundary values.
pub fn bogovskii(f: &ScalarField, p: f64) -> Result<(VectorField, BogovskiiReport)> {
    let g = f.grid;
    if g.boundary != Boundary::NoSlipBox {
        return Err(Error::Grid("Bogovskii operator needs a box grid".into()));
    }
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::Parameter(format!("norm exponent p={p} outside (1, inf)")));
    }
    let scale = f.max_abs().max(1e-300);
    if f.mean().abs() > 1e-10 * scale.max(1.0) {
        return Err(Error::Mean(format!("source mean {:e}", f.mean())));
    }
    let (b, iterations) = if g.dim == 1 {
        // In one dimension B′ = f with B(±L) = 0 has the unique solution ∫_{−L}^x f.
        let h = g.h();
        let mut b = VectorField::zeros(g);
        for i in 0..g.cells - 1 {
            b.comps[0][i + 1] = b.comps[0][i] + h * f.data[i];
        }
        (b, 0)
    } else {
        bogovskii_schur(f)?
    };
    let residual_l2 = div(&b).axpy(-1.0, f).l2();
    let w1p = (b.lq(p).powf(p) + gradient_lp_pow(&b, p)).powf(1.0 / p);
    let flp = f.lq(p);
    let report = BogovskiiReport {
        residual_l2,
        boundary_trace: b.boundary_trace(),
        norm_ratio: if flp > 0.0 { w1p / flp } else { 0.0 },
        p,
        iterations,
    };
    if residual_l2 > 1e-8_f64.max(1e-10 * f.l2()) {
        return Err(Error::Solver(format!("Bogovskii residual {residual_l2:e}")));
    }
    Ok((b, report))
}

fn bogovskii_schur(f: &ScalarField) -> Result<(VectorField, usize)> {
    let g = f.grid;
    let bases: Vec<Vec<Basis>> = (0..g.dim).map(|a| velocity_bases(&g, a)).collect();
    // Schur complement S = gradᵀ A⁻¹ grad = −div A⁻¹ grad, SPD on mean-zero fields.
    let schur = |lam: &[f64]| -> Vec<f64> {
        let gl = grad(&ScalarField { grid: g, data: lam.to_vec() });
        let x = inverse_stokes_laplacian(&gl, &bases);
        let d = div(&x);
        let m = d.mean();
        d.data.iter().map(|v| -(v - m)).collect()
    };
    let centered = |r: &[f64]| -> Vec<f64> {
        let m = r.iter().sum::<f64>() / r.len() as f64;
        r.iter().map(|v| v - m).collect()
    };
    let rhs = f.centered().data;
    let (lam, iterations) = pcg(&schur, &centered, &rhs, 1e-13).or_else(|e| match e {
        Error::Solver(_) => pcg(&schur, &centered, &rhs, 1e-11),
        other => Err(other),
    })?;
    let b = inverse_stokes_laplacian(&grad(&ScalarField { grid: g, data: lam }), &bases).scale(-1.0);
    Ok((b, iterations))
}
