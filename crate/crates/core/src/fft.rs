//! Multidimensional FFTs over C-order buffers.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward and inverse plans for every axis of a fixed shape.
pub struct FftNd {
    shape: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("shape", &self.shape).finish()
    }
}

impl FftNd {
    pub fn new(shape: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = shape.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = shape.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            shape: shape.to_vec(),
            forward,
            inverse,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.process(data, &self.forward);
    }

    /// Inverse transform in place, normalized by `1/N`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.process(data, &self.inverse);
        let scale = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|z| *z *= scale);
    }

    fn process(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        debug_assert_eq!(data.len(), self.len());
        // Per-thread buffers: fresh multi-megabyte allocations per transform
        // cost more than the transform itself on large grids.
        thread_local! {
            static BUFFERS: RefCell<(Vec<Complex64>, Vec<Complex64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
        }
        BUFFERS.with(|cell| {
            let (line, scratch) = &mut *cell.borrow_mut();
            self.process_with(data, plans, line, scratch);
        });
    }

    fn process_with(
        &self,
        data: &mut [Complex64],
        plans: &[Arc<dyn Fft<f64>>],
        line: &mut Vec<Complex64>,
        scratch: &mut Vec<Complex64>,
    ) {
        let ndim = self.shape.len();
        for axis in 0..ndim {
            let n = self.shape[axis];
            if n == 1 {
                continue;
            }
            let plan = &plans[axis];
            let stride: usize = self.shape[axis + 1..].iter().product();
            scratch.resize(plan.get_inplace_scratch_len(), Complex64::default());
            if stride == 1 {
                plan.process_with_scratch(data, scratch);
                continue;
            }
            // Gather `stride` lines at a time so the strided reads stay cache friendly.
            let outer = data.len() / (n * stride);
            line.resize(n * stride, Complex64::default());
            for o in 0..outer {
                let base = o * n * stride;
                for k in 0..n {
                    for s in 0..stride {
                        line[s * n + k] = data[base + k * stride + s];
                    }
                }
                plan.process_with_scratch(line, scratch);
                for k in 0..n {
                    for s in 0..stride {
                        data[base + k * stride + s] = line[s * n + k];
                    }
                }
            }
        }
    }
}
