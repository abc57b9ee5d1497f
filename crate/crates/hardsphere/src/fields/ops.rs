//! Gradient, divergence, Laplacian and curl. Periodic grids use staggered
//! spectral symbols, box grids second-order MAC stencils.

use num_complex::Complex64;

use super::spectral::{self, half_shift};
use super::{flatten, unflatten, Boundary, ScalarField, VectorField};
use crate::error::{Error, Result};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Gradient from centers to faces.
pub fn grad(phi: &ScalarField) -> VectorField {
    let g = phi.grid;
    let h = g.h();
    match g.boundary {
        Boundary::Periodic => {
            let hat = spectral::forward(&g, &phi.data);
            let comps = (0..g.dim)
                .map(|a| {
                    let spec: Vec<Complex64> = hat
                        .iter()
                        .enumerate()
                        .map(|(idx, &c)| {
                            let (k, _) = spectral::wavevector(&g, idx);
                            c * I * k[a] * half_shift(k[a], h, -1.0)
                        })
                        .collect();
                    spectral::inverse(&g, spec)
                })
                .collect();
            VectorField { grid: g, comps }
        }
        Boundary::NoSlipBox => {
            let cs = g.center_shape();
            let mut out = VectorField::zeros(g);
            for a in 0..g.dim {
                let fs = g.face_shape(a);
                for (idx, slot) in out.comps[a].iter_mut().enumerate() {
                    let ijk = unflatten(idx, fs);
                    if ijk[a] == 0 || ijk[a] == g.cells {
                        continue;
                    }
                    let mut lo = ijk;
                    lo[a] -= 1;
                    *slot = (phi.data[flatten(ijk, cs)] - phi.data[flatten(lo, cs)]) / h;
                }
            }
            out
        }
    }
}

/// Divergence from faces to centers.
pub fn div(u: &VectorField) -> ScalarField {
    let g = u.grid;
    let h = g.h();
    match g.boundary {
        Boundary::Periodic => {
            let mut acc = vec![Complex64::new(0.0, 0.0); g.len()];
            for a in 0..g.dim {
                let hat = spectral::forward(&g, &u.comps[a]);
                for (idx, (slot, c)) in acc.iter_mut().zip(hat).enumerate() {
                    let (k, _) = spectral::wavevector(&g, idx);
                    *slot += c * I * k[a] * half_shift(k[a], h, 1.0);
                }
            }
            ScalarField { grid: g, data: spectral::inverse(&g, acc) }
        }
        Boundary::NoSlipBox => {
            let cs = g.center_shape();
            let mut data = vec![0.0; g.len()];
            for a in 0..g.dim {
                let fs = g.face_shape(a);
                for (idx, slot) in data.iter_mut().enumerate() {
                    let ijk = unflatten(idx, cs);
                    let mut up = ijk;
                    up[a] += 1;
                    *slot += (u.comps[a][flatten(up, fs)] - u.comps[a][flatten(ijk, fs)]) / h;
                }
            }
            ScalarField { grid: g, data }
        }
    }
}

/// `div(grad(phi))`; spectral `−|k|²` on periodic grids.
pub fn laplacian(phi: &ScalarField) -> ScalarField {
    let g = phi.grid;
    match g.boundary {
        Boundary::Periodic => {
            let hat = spectral::forward(&g, &phi.data);
            let spec = hat
                .into_iter()
                .enumerate()
                .map(|(idx, c)| {
                    let (k, _) = spectral::wavevector(&g, idx);
                    -c * (k[0] * k[0] + k[1] * k[1] + k[2] * k[2])
                })
                .collect();
            ScalarField { grid: g, data: spectral::inverse(&g, spec) }
        }
        Boundary::NoSlipBox => div(&grad(phi)),
    }
}

/// Curl sampled at cell centers.
#[derive(Clone, Debug)]
pub enum CurlField {
    Planar(ScalarField),
    Spatial([ScalarField; 3]),
}

impl CurlField {
    pub fn planar(self) -> Option<ScalarField> {
        match self {
            CurlField::Planar(s) => Some(s),
            CurlField::Spatial(_) => None,
        }
    }
}

/// `∂_a u_b` at cell centers.
fn partial_at_centers(u: &VectorField, a: usize, b: usize) -> Vec<f64> {
    let g = u.grid;
    let h = g.h();
    match g.boundary {
        Boundary::Periodic => {
            let hat = spectral::forward(&g, &u.comps[b]);
            let spec = hat
                .into_iter()
                .enumerate()
                .map(|(idx, c)| {
                    let (k, nyq) = spectral::wavevector(&g, idx);
                    if nyq {
                        Complex64::new(0.0, 0.0)
                    } else {
                        c * I * k[a] * half_shift(k[b], h, 1.0)
                    }
                })
                .collect();
            spectral::inverse(&g, spec)
        }
        Boundary::NoSlipBox => {
            let w = u.component_at_centers(b);
            let cs = g.center_shape();
            (0..g.len())
                .map(|idx| {
                    let ijk = unflatten(idx, cs);
                    let here = w.data[idx];
                    let side = |step: isize| {
                        let n = ijk[a] as isize + step;
                        if n < 0 || n >= g.cells as isize {
                            -here
                        } else {
                            let mut q = ijk;
                            q[a] = n as usize;
                            w.data[flatten(q, cs)]
                        }
                    };
                    (side(1) - side(-1)) / (2.0 * h)
                })
                .collect()
        }
    }
}

pub fn curl(u: &VectorField) -> Result<CurlField> {
    let g = u.grid;
    match g.dim {
        2 => {
            let dxuy = partial_at_centers(u, 0, 1);
            let dyux = partial_at_centers(u, 1, 0);
            let data = dxuy.iter().zip(&dyux).map(|(a, b)| a - b).collect();
            Ok(CurlField::Planar(ScalarField { grid: g, data }))
        }
        3 => {
            let comp = |a: usize, b: usize| {
                let p = partial_at_centers(u, a, b);
                let q = partial_at_centers(u, b, a);
                ScalarField { grid: g, data: p.iter().zip(&q).map(|(x, y)| x - y).collect() }
            };
            Ok(CurlField::Spatial([comp(1, 2), comp(2, 0), comp(0, 1)]))
        }
        d => Err(Error::Grid(format!("curl needs dimension 2 or 3, got {d}"))),
    }
}
