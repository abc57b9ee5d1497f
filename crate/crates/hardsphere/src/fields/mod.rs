//! Uniform box grids with MAC staggering, discrete operators, projections and
//! the Bogovskii right inverse of the divergence.

mod fastdiag;
mod ops;
mod solvers;
pub mod spectral;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ops::{curl, div, grad, laplacian, CurlField};
pub use solvers::{
    biot_savart, bogovskii, helmholtz_project, poisson_neumann, poisson_periodic, BogovskiiReport,
    POISSON_TOL,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    NoSlipBox,
}

/// The box `[-half_width, half_width]^dim` split into `cells` cells per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub cells: usize,
    pub boundary: Boundary,
}

pub(crate) type Shape = [usize; 3];

impl GridSpec {
    pub fn new(dim: usize, half_width: f64, cells: usize, boundary: Boundary) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Grid(format!("dimension {dim} not in 1..=3")));
        }
        if cells < 8 {
            return Err(Error::Grid(format!("{cells} cells per axis, need at least 8")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::Grid(format!("half width {half_width} must be positive")));
        }
        Ok(GridSpec { dim, half_width, cells, boundary })
    }

    pub fn h(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.dim as i32)
    }

    /// Number of cell centers.
    pub fn len(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub(crate) fn center_shape(&self) -> Shape {
        let mut s = [1; 3];
        for a in 0..self.dim {
            s[a] = self.cells;
        }
        s
    }

    /// Storage shape of the velocity component normal to `axis`.
    pub(crate) fn face_shape(&self, axis: usize) -> Shape {
        let mut s = self.center_shape();
        if self.boundary == Boundary::NoSlipBox {
            s[axis] += 1;
        }
        s
    }

    pub fn face_len(&self, axis: usize) -> usize {
        let s = self.face_shape(axis);
        s[0] * s[1] * s[2]
    }

    /// Cell-center coordinate along one axis.
    pub fn center(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.h()
    }

    /// Face coordinate along one axis (face `i` is the left face of cell `i`).
    pub fn face(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h()
    }

    /// Coordinates of the center with flat index `idx`.
    pub fn center_point(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = unflatten(idx, self.center_shape());
        let mut x = [0.0; 3];
        for (a, n) in [i, j, k].into_iter().enumerate().take(self.dim) {
            x[a] = self.center(n);
        }
        x
    }

    /// Coordinates of the face of component `axis` with flat index `idx`.
    pub fn face_point(&self, axis: usize, idx: usize) -> [f64; 3] {
        let ijk = unflatten(idx, self.face_shape(axis));
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = if a == axis { self.face(ijk[a]) } else { self.center(ijk[a]) };
        }
        x
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Grid("grid mismatch".into()))
        }
    }
}

#[inline]
pub(crate) fn flatten(i: [usize; 3], s: Shape) -> usize {
    i[0] + s[0] * (i[1] + s[1] * i[2])
}

#[inline]
pub(crate) fn unflatten(idx: usize, s: Shape) -> [usize; 3] {
    [idx % s[0], (idx / s[0]) % s[1], idx / (s[0] * s[1])]
}

/// Cell-centered scalar samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

/// Face-centered vector samples; component `a` lives on faces normal to axis `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: GridSpec,
    pub comps: Vec<Vec<f64>>,
}

fn lp(values: impl Iterator<Item = f64>, q: f64, dv: f64) -> f64 {
    if q.is_infinite() {
        values.fold(0.0, |m, v| m.max(v.abs()))
    } else {
        (values.map(|v| v.abs().powf(q)).sum::<f64>() * dv).powf(1.0 / q)
    }
}

impl ScalarField {
    pub fn zeros(grid: GridSpec) -> Self {
        ScalarField { data: vec![0.0; grid.len()], grid }
    }

    pub fn constant(grid: GridSpec, v: f64) -> Self {
        ScalarField { data: vec![v; grid.len()], grid }
    }

    /// Samples `f` at cell centers.
    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> f64) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.center_point(i))).collect();
        ScalarField { grid, data }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Grid(format!("{} values for {} cells", data.len(), grid.len())));
        }
        Ok(ScalarField { grid, data })
    }

    pub fn integral(&self) -> f64 {
        self.data.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn l2(&self) -> f64 {
        self.lq(2.0)
    }

    pub fn lq(&self, q: f64) -> f64 {
        lp(self.data.iter().copied(), q, self.grid.cell_volume())
    }

    pub fn max_abs(&self) -> f64 {
        self.lq(f64::INFINITY)
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum::<f64>() * self.grid.cell_volume()
    }

    /// Discrete `W^{1,2}` norm using the MAC gradient.
    pub fn w12(&self) -> f64 {
        let g = grad(self);
        (self.l2().powi(2) + g.l2().powi(2)).sqrt()
    }

    /// Discrete `W^{k,2}` norm: spectral weights `(1 + |k|²)^k` on periodic grids,
    /// repeated MAC gradients/Laplacians on box grids.
    pub fn sobolev(&self, k: u32) -> f64 {
        sobolev_norm(&self.grid, &[&self.data], k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField { grid: self.grid, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &ScalarField) -> ScalarField {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn scale(&self, alpha: f64) -> ScalarField {
        self.map(|v| alpha * v)
    }

    /// Removes the mean.
    pub fn centered(&self) -> ScalarField {
        let m = self.mean();
        self.map(|v| v - m)
    }

    pub fn write_snapshot(&self, dir: &Path, name: &str, time: f64, quantity: &str, units: &str) -> Result<()> {
        write_snapshot(dir, name, &self.grid, time, quantity, units, "cell_center", &[&self.data])
    }
}

impl VectorField {
    pub fn zeros(grid: GridSpec) -> Self {
        VectorField { comps: (0..grid.dim).map(|a| vec![0.0; grid.face_len(a)]).collect(), grid }
    }

    /// Samples component `a` of `f` on its faces; NoSlipBox boundary faces are set to zero.
    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let mut v = VectorField::zeros(grid);
        for a in 0..grid.dim {
            let shape = grid.face_shape(a);
            for (idx, slot) in v.comps[a].iter_mut().enumerate() {
                let ijk = unflatten(idx, shape);
                if grid.boundary == Boundary::NoSlipBox && (ijk[a] == 0 || ijk[a] == grid.cells) {
                    continue;
                }
                *slot = f(grid.face_point(a, idx))[a];
            }
        }
        v
    }

    pub fn l2(&self) -> f64 {
        self.lq(2.0)
    }

    pub fn lq(&self, q: f64) -> f64 {
        lp(self.comps.iter().flat_map(|c| c.iter().copied()), q, self.grid.cell_volume())
    }

    /// Max over faces of the largest component magnitude.
    pub fn max_abs(&self) -> f64 {
        self.lq(f64::INFINITY)
    }

    pub fn dot(&self, other: &VectorField) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    pub fn zip_map(&self, other: &VectorField, f: impl Fn(f64, f64) -> f64) -> VectorField {
        VectorField {
            grid: self.grid,
            comps: self
                .comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        }
    }

    pub fn axpy(&self, alpha: f64, other: &VectorField) -> VectorField {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn scale(&self, alpha: f64) -> VectorField {
        VectorField { grid: self.grid, comps: self.comps.iter().map(|c| c.iter().map(|v| alpha * v).collect()).collect() }
    }

    /// Discrete `W^{k,2}` norm of all components (periodic grids use spectral weights,
    /// box grids treat each component through its cell-center average).
    pub fn sobolev(&self, k: u32) -> f64 {
        match self.grid.boundary {
            Boundary::Periodic => {
                let parts: Vec<&[f64]> = self.comps.iter().map(|c| c.as_slice()).collect();
                sobolev_norm(&self.grid, &parts, k)
            }
            Boundary::NoSlipBox => (0..self.grid.dim)
                .map(|a| self.component_at_centers(a).sobolev(k).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Largest magnitude on NoSlipBox boundary faces (zero for Periodic).
    pub fn boundary_trace(&self) -> f64 {
        if self.grid.boundary == Boundary::Periodic {
            return 0.0;
        }
        let mut m: f64 = 0.0;
        for a in 0..self.grid.dim {
            let shape = self.grid.face_shape(a);
            for (idx, v) in self.comps[a].iter().enumerate() {
                let ijk = unflatten(idx, shape);
                if ijk[a] == 0 || ijk[a] == self.grid.cells {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }

    /// Component `a` averaged to cell centers.
    pub fn component_at_centers(&self, a: usize) -> ScalarField {
        let g = self.grid;
        let cs = g.center_shape();
        let fs = g.face_shape(a);
        let data = (0..g.len())
            .map(|idx| {
                let ijk = unflatten(idx, cs);
                let mut up = ijk;
                up[a] += 1;
                if g.boundary == Boundary::Periodic {
                    up[a] %= g.cells;
                }
                0.5 * (self.comps[a][flatten(ijk, fs)] + self.comps[a][flatten(up, fs)])
            })
            .collect();
        ScalarField { grid: g, data }
    }

    pub fn write_snapshot(&self, dir: &Path, name: &str, time: f64, quantity: &str, units: &str) -> Result<()> {
        let parts: Vec<&[f64]> = self.comps.iter().map(|c| c.as_slice()).collect();
        write_snapshot(dir, name, &self.grid, time, quantity, units, "mac_faces", &parts)
    }
}

fn sobolev_norm(grid: &GridSpec, parts: &[&[f64]], k: u32) -> f64 {
    match grid.boundary {
        Boundary::Periodic => {
            let mut acc = 0.0;
            for p in parts {
                let hat = spectral::forward(grid, p);
                for (idx, c) in hat.iter().enumerate() {
                    let (kv, _) = spectral::wavevector(grid, idx);
                    let w = 1.0 + kv[0] * kv[0] + kv[1] * kv[1] + kv[2] * kv[2];
                    acc += w.powi(k as i32) * c.norm_sqr();
                }
            }
            (acc * grid.cell_volume() / grid.len() as f64).sqrt()
        }
        Boundary::NoSlipBox => {
            let mut acc = 0.0;
            for p in parts {
                let f = ScalarField { grid: *grid, data: p.to_vec() };
                acc += f.l2().powi(2);
                if k >= 1 {
                    acc += grad(&f).l2().powi(2);
                }
                if k >= 2 {
                    acc += laplacian(&f).l2().powi(2);
                }
            }
            acc.sqrt()
        }
    }
}

/// Sidecar describing a raw snapshot file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SnapshotMeta {
    pub grid: GridSpec,
    pub time: f64,
    pub quantity: String,
    pub units: String,
    pub layout: String,
    pub component_lengths: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn write_snapshot(
    dir: &Path,
    name: &str,
    grid: &GridSpec,
    time: f64,
    quantity: &str,
    units: &str,
    layout: &str,
    parts: &[&[f64]],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(parts.iter().map(|p| p.len() * 8).sum());
    for p in parts {
        for v in p.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(format!("{name}.bin")), bytes)?;
    let meta = SnapshotMeta {
        grid: *grid,
        time,
        quantity: quantity.into(),
        units: units.into(),
        layout: layout.into(),
        component_lengths: parts.iter().map(|p| p.len()).collect(),
    };
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a snapshot back as its sidecar plus one vector per component.
pub fn read_snapshot(dir: &Path, name: &str) -> Result<(SnapshotMeta, Vec<Vec<f64>>)> {
    let meta: SnapshotMeta = serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{name}.bin")))?;
    let total: usize = meta.component_lengths.iter().sum();
    if bytes.len() != 8 * total {
        return Err(Error::Grid(format!("snapshot {name}: {} bytes for {total} values", bytes.len())));
    }
    let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let comps = meta.component_lengths.iter().map(|&n| vals.by_ref().take(n).collect()).collect();
    Ok((meta, comps))
}
