//! Translation-invariant kernels `K = exp(-C/ε)` on a pixel grid.
//!
//! Because the cost only depends on the displacement between two pixels, `K` and
//! `K ⊙ C` are Toeplitz-block-Toeplitz and are fully described by their values on
//! the `(2w-1) x (2h-1)` displacement window. Products with them are 2-D linear
//! convolutions, evaluated either spectrally (zero-padded FFT, `O(n log n)`) or by
//! direct summation over the displacements whose kernel value did not underflow.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::cost::TransportCost;
use crate::error::{Error, Result};
use crate::grid::PixelGrid;

/// How products with the kernel are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMethod {
    /// Zero-padded FFT convolution.
    Spectral,
    /// Summation over the nonzero displacements. Every term is a product of
    /// nonnegative numbers when the input is nonnegative, so the relative accuracy of
    /// each output entry is independent of the dynamic range of the input.
    Direct,
    /// Pick whichever of the two needs fewer floating-point operations.
    #[default]
    Auto,
}

struct Spectral {
    padded_width: usize,
    padded_height: usize,
    kernel_hat: Vec<Complex64>,
    kernel_cost_hat: Vec<Complex64>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// A nonzero kernel entry at displacement `(dx, dy)`.
#[derive(Debug, Clone, Copy)]
struct Tap {
    dx: isize,
    dy: isize,
    kernel: f64,
    kernel_cost: f64,
}

pub struct KernelStencil {
    grid: PixelGrid,
    cost: TransportCost,
    epsilon: f64,
    /// `(2w-1) x (2h-1)` row-major; displacement `(dx, dy)` is at `(dy + h - 1, dx + w - 1)`.
    kernel: Vec<f64>,
    costs: Vec<f64>,
    taps: Vec<Tap>,
    spectral: Spectral,
    underflow_warning: bool,
}

impl fmt::Debug for KernelStencil {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelStencil")
            .field("grid", &self.grid)
            .field("cost", &self.cost)
            .field("epsilon", &self.epsilon)
            .field("nonzero_taps", &self.taps.len())
            .field("underflow_warning", &self.underflow_warning)
            .finish()
    }
}

impl KernelStencil {
    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn cost(&self) -> &TransportCost {
        &self.cost
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Set when every off-center entry underflowed to zero: the plan is then forced
    /// to the identity, the loss is still defined but its gradient carries no
    /// transport information.
    pub fn underflow_warning(&self) -> bool {
        self.underflow_warning
    }

    /// Number of displacements with a nonzero kernel value.
    pub fn support_size(&self) -> usize {
        self.taps.len()
    }

    fn window_index(&self, dx: isize, dy: isize) -> usize {
        let w = self.grid.width() as isize;
        let h = self.grid.height() as isize;
        assert!(dx.abs() < w && dy.abs() < h, "displacement outside the grid");
        ((dy + h - 1) * (2 * w - 1) + dx + w - 1) as usize
    }

    /// `K(Δ)` for a displacement in pixels.
    pub fn kernel_at(&self, dx: isize, dy: isize) -> f64 {
        self.kernel[self.window_index(dx, dy)]
    }

    /// `c(0, Δ·spacing)` for a displacement in pixels.
    pub fn cost_at(&self, dx: isize, dy: isize) -> f64 {
        self.costs[self.window_index(dx, dy)]
    }

    /// Largest cost realizable between two pixels of the grid.
    pub fn max_cost(&self) -> f64 {
        self.costs.iter().cloned().fold(0.0, f64::max)
    }

    /// Resolve [`KernelMethod::Auto`] by comparing operation counts.
    pub fn resolve(&self, method: KernelMethod) -> KernelMethod {
        match method {
            KernelMethod::Auto => {
                let n = self.grid.len() as f64;
                let p = (self.spectral.padded_width * self.spectral.padded_height) as f64;
                let direct = self.taps.len() as f64 * n;
                // two complex 2-D transforms, ~5 p log2 p flops each
                let spectral = 10.0 * p * p.log2();
                if direct <= spectral {
                    KernelMethod::Direct
                } else {
                    KernelMethod::Spectral
                }
            }
            m => m,
        }
    }

    /// `Kx` (or `Kᵀx`, identical because the kernel is symmetric) by spectral convolution.
    pub fn apply_kernel(&self, x: &[f64], _transpose: bool) -> Vec<f64> {
        self.convolve_spectral(x, &self.spectral.kernel_hat)
    }

    /// `(K ⊙ C)x` by spectral convolution.
    pub fn apply_kernel_cost(&self, x: &[f64]) -> Vec<f64> {
        self.convolve_spectral(x, &self.spectral.kernel_cost_hat)
    }

    /// `Kx` by the requested method.
    pub fn apply_kernel_with(&self, x: &[f64], method: KernelMethod) -> Vec<f64> {
        match self.resolve(method) {
            KernelMethod::Direct => self.convolve_direct(x, |t| t.kernel),
            _ => self.apply_kernel(x, false),
        }
    }

    /// `(K ⊙ C)x` by the requested method.
    pub fn apply_kernel_cost_with(&self, x: &[f64], method: KernelMethod) -> Vec<f64> {
        match self.resolve(method) {
            KernelMethod::Direct => self.convolve_direct(x, |t| t.kernel_cost),
            _ => self.apply_kernel_cost(x),
        }
    }

    fn convolve_direct(&self, x: &[f64], weight: impl Fn(&Tap) -> f64) -> Vec<f64> {
        let w = self.grid.width() as isize;
        let h = self.grid.height() as isize;
        assert_eq!(x.len(), self.grid.len(), "vector length does not match grid");
        let mut y = vec![0.0; x.len()];
        for tap in &self.taps {
            let k = weight(tap);
            if k == 0.0 {
                continue;
            }
            // y[j][i] += k * x[j - dy][i - dx]
            let i_lo = tap.dx.max(0);
            let i_hi = (w + tap.dx).min(w);
            let j_lo = tap.dy.max(0);
            let j_hi = (h + tap.dy).min(h);
            let span = (i_hi - i_lo) as usize;
            for j in j_lo..j_hi {
                let out = (j * w + i_lo) as usize;
                let src = ((j - tap.dy) * w + i_lo - tap.dx) as usize;
                let (yr, xr) = (&mut y[out..out + span], &x[src..src + span]);
                for (yv, xv) in yr.iter_mut().zip(xr) {
                    *yv += k * xv;
                }
            }
        }
        y
    }

    fn convolve_spectral(&self, x: &[f64], hat: &[Complex64]) -> Vec<f64> {
        let (w, h) = (self.grid.width(), self.grid.height());
        assert_eq!(x.len(), w * h, "vector length does not match grid");
        let sp = &self.spectral;
        let pw = sp.padded_width;
        let mut buf = vec![Complex64::new(0.0, 0.0); pw * sp.padded_height];
        for j in 0..h {
            for i in 0..w {
                buf[j * pw + i].re = x[j * w + i];
            }
        }
        sp.fft2(&mut buf, false);
        for (b, k) in buf.iter_mut().zip(hat) {
            *b *= k;
        }
        sp.fft2(&mut buf, true);
        let scale = 1.0 / (pw * sp.padded_height) as f64;
        let mut y = vec![0.0; w * h];
        for j in 0..h {
            for i in 0..w {
                y[j * w + i] = buf[j * pw + i].re * scale;
            }
        }
        y
    }
}

impl Spectral {
    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let (pw, ph) = (self.padded_width, self.padded_height);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut t = vec![Complex64::new(0.0, 0.0); pw * ph];
        for j in 0..ph {
            for i in 0..pw {
                t[i * ph + j] = buf[j * pw + i];
            }
        }
        col.process(&mut t);
        for i in 0..pw {
            for j in 0..ph {
                buf[j * pw + i] = t[i * ph + j];
            }
        }
    }
}

/// Tabulate `K = exp(-C/ε)` and `K ⊙ C` over all displacements realizable on `grid`
/// and cache their spectra.
pub fn build_stencil(grid: PixelGrid, cost: TransportCost, epsilon: f64) -> Result<KernelStencil> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Precondition(format!(
            "entropy weight must be positive, got {epsilon}"
        )));
    }
    let (w, h) = (grid.width() as isize, grid.height() as isize);
    let ww = (2 * w - 1) as usize;
    let wh = (2 * h - 1) as usize;
    let s = grid.spacing();
    let mut kernel = vec![0.0; ww * wh];
    let mut costs = vec![0.0; ww * wh];
    let mut taps = Vec::new();
    let mut off_center_nonzero = false;
    for dy in -(h - 1)..h {
        for dx in -(w - 1)..w {
            let d2 = ((dx * dx + dy * dy) as f64) * s * s;
            let c = cost.from_dist_sq(d2);
            let k = (-c / epsilon).exp();
            let idx = ((dy + h - 1) as usize) * ww + (dx + w - 1) as usize;
            kernel[idx] = k;
            costs[idx] = c;
            if k > 0.0 {
                if dx != 0 || dy != 0 {
                    off_center_nonzero = true;
                }
                taps.push(Tap {
                    dx,
                    dy,
                    kernel: k,
                    kernel_cost: k * c,
                });
            }
        }
    }

    let pw = (2 * grid.width() - 1).next_power_of_two();
    let ph = (2 * grid.height() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let mut spectral = Spectral {
        padded_width: pw,
        padded_height: ph,
        kernel_hat: Vec::new(),
        kernel_cost_hat: Vec::new(),
        row_fwd: planner.plan_fft_forward(pw),
        row_inv: planner.plan_fft_inverse(pw),
        col_fwd: planner.plan_fft_forward(ph),
        col_inv: planner.plan_fft_inverse(ph),
    };
    // circulant embedding: displacement (dx, dy) lands at (dx mod pw, dy mod ph)
    let mut k_buf = vec![Complex64::new(0.0, 0.0); pw * ph];
    let mut kc_buf = k_buf.clone();
    for dy in -(h - 1)..h {
        for dx in -(w - 1)..w {
            let src = ((dy + h - 1) as usize) * ww + (dx + w - 1) as usize;
            let tx = dx.rem_euclid(pw as isize) as usize;
            let ty = dy.rem_euclid(ph as isize) as usize;
            k_buf[ty * pw + tx].re = kernel[src];
            kc_buf[ty * pw + tx].re = kernel[src] * costs[src];
        }
    }
    spectral.fft2(&mut k_buf, false);
    spectral.fft2(&mut kc_buf, false);
    spectral.kernel_hat = k_buf;
    spectral.kernel_cost_hat = kc_buf;

    Ok(KernelStencil {
        grid,
        cost,
        epsilon,
        kernel,
        costs,
        taps,
        spectral,
        underflow_warning: grid.len() > 1 && !off_center_nonzero,
    })
}
