//! Fast diagonalization of separable second-difference operators on a box:
//! each axis is expanded in the closed-form eigenbasis of its 1D stencil.

use std::f64::consts::PI;

use super::{unflatten, Shape};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Kind {
    /// Cell values with a zero-flux wall (ghost mirrors the value).
    NeumannCells,
    /// Interior face values with zero at both end faces.
    DirichletNodes,
    /// Cell values with a zero wall value halfway to the ghost.
    DirichletCells,
}

pub(crate) struct Basis {
    n: usize,
    /// Row `k` is the `k`-th orthonormal eigenvector.
    vecs: Vec<f64>,
    pub(crate) eig: Vec<f64>,
}

impl Basis {
    pub(crate) fn new(kind: Kind, cells: usize, h: f64) -> Self {
        let nc = cells as f64;
        let (n, k0) = match kind {
            Kind::NeumannCells => (cells, 0),
            Kind::DirichletNodes => (cells - 1, 1),
            Kind::DirichletCells => (cells, 1),
        };
        let mut vecs = vec![0.0; n * n];
        let mut eig = vec![0.0; n];
        for r in 0..n {
            let k = (r + k0) as f64;
            let row = &mut vecs[r * n..(r + 1) * n];
            for (j, slot) in row.iter_mut().enumerate() {
                let jf = j as f64;
                *slot = match kind {
                    Kind::NeumannCells => (PI * k * (jf + 0.5) / nc).cos(),
                    Kind::DirichletNodes => (PI * k * (jf + 1.0) / nc).sin(),
                    Kind::DirichletCells => (PI * k * (jf + 0.5) / nc).sin(),
                };
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            let s = (0.5 * PI * k / nc).sin();
            eig[r] = -4.0 * s * s / (h * h);
        }
        Basis { n, vecs, eig }
    }

    pub(crate) fn len(&self) -> usize {
        self.n
    }
}

/// Applies the basis along `axis` (forward: project onto eigenvectors).
pub(crate) fn apply_axis(data: &mut [f64], shape: Shape, axis: usize, basis: &Basis, forward: bool) {
    let n = basis.n;
    debug_assert_eq!(shape[axis], n);
    let stride: usize = shape[..axis].iter().product();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    for base in 0..data.len() {
        if unflatten(base, shape)[axis] != 0 {
            continue;
        }
        for (j, slot) in line.iter_mut().enumerate() {
            *slot = data[base + j * stride];
        }
        if forward {
            for (k, o) in out.iter_mut().enumerate() {
                let row = &basis.vecs[k * n..(k + 1) * n];
                *o = row.iter().zip(&line).map(|(a, b)| a * b).sum();
            }
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
            for (k, &c) in line.iter().enumerate() {
                let row = &basis.vecs[k * n..(k + 1) * n];
                for (o, r) in out.iter_mut().zip(row) {
                    *o += c * r;
                }
            }
        }
        for (j, v) in out.iter().enumerate() {
            data[base + j * stride] = *v;
        }
    }
}

/// Solves `Σ_a L_a x = f` in place for the separable operator with the given per-axis bases.
/// Modes with a zero eigenvalue are set to zero.
pub(crate) fn solve(data: &mut [f64], shape: Shape, bases: &[Basis]) {
    for (a, b) in bases.iter().enumerate() {
        apply_axis(data, shape, a, b, true);
    }
    for (idx, v) in data.iter_mut().enumerate() {
        let ijk = unflatten(idx, shape);
        let lam: f64 = bases.iter().enumerate().map(|(a, b)| b.eig[ijk[a]]).sum();
        *v = if lam.abs() < 1e-300 { 0.0 } else { *v / lam };
    }
    for (a, b) in bases.iter().enumerate() {
        apply_axis(data, shape, a, b, false);
    }
}
