//! FFT helpers on periodic grids.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{flatten, unflatten, GridSpec, Shape};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_axis(buf: &mut [Complex64], shape: Shape, axis: usize, inverse: bool) {
    let n = shape[axis];
    if n == 1 {
        return;
    }
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    if axis == 0 {
        plan.process(buf);
        return;
    }
    let stride: usize = shape[..axis].iter().product();
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let total = buf.len();
    for base in 0..total {
        let ijk = unflatten(base, shape);
        if ijk[axis] != 0 {
            continue;
        }
        for (k, slot) in line.iter_mut().enumerate() {
            *slot = buf[base + k * stride];
        }
        plan.process(&mut line);
        for (k, v) in line.iter().enumerate() {
            buf[base + k * stride] = *v;
        }
    }
}

/// Forward transform of cell data on a periodic grid.
pub fn forward(grid: &GridSpec, real: &[f64]) -> Vec<Complex64> {
    let shape = grid.center_shape();
    let mut buf: Vec<Complex64> = real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for a in 0..grid.dim {
        fft_axis(&mut buf, shape, a, false);
    }
    buf
}

/// Inverse transform, normalized, keeping the real part.
pub fn inverse(grid: &GridSpec, mut buf: Vec<Complex64>) -> Vec<f64> {
    let shape = grid.center_shape();
    for a in 0..grid.dim {
        fft_axis(&mut buf, shape, a, true);
    }
    let scale = 1.0 / buf.len() as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Signed mode number of DFT index `i` on `n` points.
pub fn mode(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Angular wavenumber per axis and whether any axis sits on the Nyquist mode.
pub fn wavevector(grid: &GridSpec, idx: usize) -> ([f64; 3], bool) {
    let n = grid.cells;
    let ijk = unflatten(idx, grid.center_shape());
    let mut k = [0.0; 3];
    let mut nyq = false;
    for a in 0..grid.dim {
        let m = mode(ijk[a], n);
        if n % 2 == 0 && m == (n / 2) as i64 {
            nyq = true;
        }
        k[a] = std::f64::consts::PI * m as f64 / grid.half_width;
    }
    (k, nyq)
}

/// Flat index of the mode with the negated wavevector.
pub fn conjugate_index(grid: &GridSpec, idx: usize) -> usize {
    let shape = grid.center_shape();
    let mut ijk = unflatten(idx, shape);
    for a in 0..grid.dim {
        ijk[a] = (grid.cells - ijk[a]) % grid.cells;
    }
    flatten(ijk, shape)
}

/// Half-cell shift factor `exp(sign * i k h / 2)`.
pub fn half_shift(k: f64, h: f64, sign: f64) -> Complex64 {
    Complex64::from_polar(1.0, sign * 0.5 * k * h)
}
