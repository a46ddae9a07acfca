use num_complex::Complex64;

use super::cutoff::CutoffSpec;
use super::field::DistributionField;
use super::mollifier::bump_transform;
use crate::error::{Error, Result};
use crate::fft;

/// Output of [`regularize_initial`].
#[derive(Debug, Clone)]
pub struct Regularized {
    pub field: DistributionField,
    /// `2n > V_max`: the velocity cutoff never touches the box.
    pub cutoff_inactive: bool,
}

/// `R^n f = theta_n(|v|) * (eta_{1/n} *_{x,v} f)`.
///
/// `eta` is the product of one-dimensional unit-mass bumps over all `2d`
/// phase-space coordinates; the `v`-convolution is periodic on the velocity box.
pub fn regularize_initial(f: &DistributionField, n: usize) -> Result<Regularized> {
    if n == 0 {
        return Err(Error::Domain("regularization index n must be >= 1".into()));
    }
    let g = f.grid;
    let shape = g.shape();
    let scale = 1.0 / n as f64;
    let x_mult: Vec<f64> = (0..g.nx)
        .map(|j| bump_transform(1, scale * fft::signed_freq(j, g.nx) as f64))
        .collect();
    let v_mult: Vec<f64> = (0..g.nv)
        .map(|j| bump_transform(1, scale * g.v_wavenumber(j)))
        .collect();

    let mut c = fft::to_complex(&f.values);
    fft::fftn(&mut c, &shape);
    let mut idx = vec![0usize; shape.len()];
    c.iter_mut().enumerate().for_each(|(flat, z)| {
        fft::unravel(flat, &shape, &mut idx);
        let m = idx.iter().enumerate().fold(1.0, |acc, (a, &j)| {
            acc * if a < g.d { x_mult[j] } else { v_mult[j] }
        });
        *z *= m;
    });
    fft::ifftn(&mut c, &shape);

    let cut = CutoffSpec::new(n as f64);
    let speed: Vec<f64> = g.speed_sq().into_iter().map(f64::sqrt).collect();
    let theta: Vec<f64> = speed.iter().map(|&s| cut.theta(s)).collect();
    let nvd = g.n_velocity();
    let values = c
        .iter()
        .enumerate()
        .map(|(i, z): (usize, &Complex64)| z.re * theta[i % nvd])
        .collect();
    Ok(Regularized {
        field: DistributionField {
            grid: g,
            values,
            time: f.time,
        },
        cutoff_inactive: 2.0 * n as f64 > g.v_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_space::GridSpec;

    #[test]
    fn zero_maps_to_zero() {
        let g = GridSpec::new(1, 16, 32, 8.0).unwrap();
        let r = regularize_initial(&DistributionField::zeros(g), 3).unwrap();
        assert!(r.field.values.iter().all(|&v| v == 0.0));
        assert!(!r.cutoff_inactive);
    }

    #[test]
    fn support_is_cut_at_two_n() {
        let g = GridSpec::new(1, 8, 64, 8.0).unwrap();
        let f = DistributionField::from_fn(g, |_, _| 1.0);
        let r = regularize_initial(&f, 2).unwrap();
        for (i, v) in r.field.values.iter().enumerate() {
            let vel = g.v_node(i % g.nv);
            if vel.abs() >= 4.0 {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(regularize_initial(&f, 5).unwrap().cutoff_inactive);
    }

    #[test]
    fn n_zero_rejected() {
        let g = GridSpec::new(1, 8, 8, 4.0).unwrap();
        assert!(regularize_initial(&DistributionField::zeros(g), 0).is_err());
    }
}
