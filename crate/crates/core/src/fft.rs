//! Axis-wise FFTs on row-major N-dimensional arrays.
//!
//! All transforms are unnormalized forward / `1/n`-normalized inverse, so that
//! `ifft(fft(u)) == u` up to round-off.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

type PlanCache = Mutex<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)>;

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<PlanCache> = OnceLock::new();
    let cache = PLANS.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    let (planner, map) = &mut *guard;
    map.entry((n, inverse))
        .or_insert_with(|| {
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// Signed integer frequency of FFT bin `j` on an `n`-point axis.
/// The Nyquist bin maps to `-n/2`.
#[inline]
pub fn signed_freq(j: usize, n: usize) -> i64 {
    if j < n.div_ceil(2) {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

#[inline]
pub fn is_nyquist(j: usize, n: usize) -> bool {
    n % 2 == 0 && j == n / 2
}

/// Transform along one axis of a row-major array.
pub fn fft_axis(data: &mut [Complex64], shape: &[usize], axis: usize, inverse: bool) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    debug_assert_eq!(data.len(), n * inner * outer);
    let fft = plan(n, inverse);
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };

    if inner == 1 {
        data.par_chunks_mut(n).for_each(|line| {
            fft.process(line);
            if inverse {
                line.iter_mut().for_each(|z| *z *= scale);
            }
        });
        return;
    }

    // Strided lines: gather / transform / scatter, one outer block per task.
    data.par_chunks_mut(n * inner).for_each(|block| {
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..inner {
            for (j, z) in line.iter_mut().enumerate() {
                *z = block[j * inner + i];
            }
            fft.process(&mut line);
            for (j, z) in line.iter().enumerate() {
                block[j * inner + i] = *z * scale;
            }
        }
    });
}

pub fn fftn(data: &mut [Complex64], shape: &[usize]) {
    for axis in 0..shape.len() {
        fft_axis(data, shape, axis, false);
    }
}

pub fn ifftn(data: &mut [Complex64], shape: &[usize]) {
    for axis in 0..shape.len() {
        fft_axis(data, shape, axis, true);
    }
}

pub fn to_complex(values: &[f64]) -> Vec<Complex64> {
    values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

pub fn real_part(values: &[Complex64]) -> Vec<f64> {
    values.iter().map(|z| z.re).collect()
}

/// Multi-index of a flat row-major offset.
pub fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for (axis, &n) in shape.iter().enumerate().rev() {
        out[axis] = flat % n;
        flat /= n;
    }
}
