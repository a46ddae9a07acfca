use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Phase-space grid on `T^d x [-V_max, V_max)^d`, both factors periodic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub d: usize,
    pub nx: usize,
    pub nv: usize,
    pub v_max: f64,
    #[serde(default = "default_dealias")]
    pub dealias_fraction: f64,
}

fn default_dealias() -> f64 {
    2.0 / 3.0
}

impl GridSpec {
    pub fn new(d: usize, nx: usize, nv: usize, v_max: f64) -> Result<Self> {
        let g = Self {
            d,
            nx,
            nv,
            v_max,
            dealias_fraction: default_dealias(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.d) {
            return Err(Error::UnsupportedDimension(self.d));
        }
        for (name, n) in [("nx", self.nx), ("nv", self.nv)] {
            if n < 8 || !n.is_power_of_two() {
                return Err(Error::Domain(format!(
                    "{name} = {n} must be a power of two >= 8"
                )));
            }
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(Error::Domain(format!("v_max = {} must be positive", self.v_max)));
        }
        if !(self.dealias_fraction > 0.0 && self.dealias_fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "dealias_fraction = {} outside (0, 1]",
                self.dealias_fraction
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        std::f64::consts::TAU / self.nx as f64
    }

    pub fn dv(&self) -> f64 {
        2.0 * self.v_max / self.nv as f64
    }

    /// Full array shape: `d` spatial axes followed by `d` velocity axes.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.nx; self.d];
        s.extend(std::iter::repeat_n(self.nv, self.d));
        s
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        vec![self.nx; self.d]
    }

    pub fn velocity_shape(&self) -> Vec<usize> {
        vec![self.nv; self.d]
    }

    pub fn n_spatial(&self) -> usize {
        self.nx.pow(self.d as u32)
    }

    pub fn n_velocity(&self) -> usize {
        self.nv.pow(self.d as u32)
    }

    pub fn len(&self) -> usize {
        self.n_spatial() * self.n_velocity()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        (self.dx() * self.dv()).powi(self.d as i32)
    }

    pub fn x_cell_volume(&self) -> f64 {
        self.dx().powi(self.d as i32)
    }

    pub fn v_cell_volume(&self) -> f64 {
        self.dv().powi(self.d as i32)
    }

    pub fn x_node(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    pub fn v_node(&self, j: usize) -> f64 {
        -self.v_max + j as f64 * self.dv()
    }

    /// Angular wavenumber of FFT bin `j` along a velocity axis.
    pub fn v_wavenumber(&self, j: usize) -> f64 {
        std::f64::consts::PI / self.v_max * crate::fft::signed_freq(j, self.nv) as f64
    }

    /// Spatial coordinates of flat spatial index `ix`.
    pub fn x_coords(&self, ix: usize, out: &mut [f64]) {
        let mut rem = ix;
        for a in (0..self.d).rev() {
            out[a] = self.x_node(rem % self.nx);
            rem /= self.nx;
        }
    }

    /// Velocity coordinates of flat velocity index `iv`.
    pub fn v_coords(&self, iv: usize, out: &mut [f64]) {
        let mut rem = iv;
        for a in (0..self.d).rev() {
            out[a] = self.v_node(rem % self.nv);
            rem /= self.nv;
        }
    }

    /// `|v|^2` at every velocity node.
    pub fn speed_sq(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        (0..self.n_velocity())
            .map(|iv| {
                self.v_coords(iv, &mut v);
                v.iter().map(|c| c * c).sum()
            })
            .collect()
    }

    /// `<v>^m = (1 + |v|^2)^{m/2}` at every velocity node.
    pub fn velocity_weight(&self, m: f64) -> Vec<f64> {
        self.speed_sq()
            .into_iter()
            .map(|s| (1.0 + s).powf(0.5 * m))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_and_shape() {
        let g = GridSpec::new(2, 16, 32, 8.0).unwrap();
        assert_eq!(g.shape(), vec![16, 16, 32, 32]);
        assert!((g.dv() - 0.5).abs() < 1e-15);
        assert_eq!(g.len(), 16 * 16 * 32 * 32);
        assert_eq!(g.v_node(0), -8.0);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(GridSpec::new(1, 12, 32, 8.0).is_err());
        assert!(GridSpec::new(1, 4, 32, 8.0).is_err());
        assert!(matches!(
            GridSpec::new(4, 16, 32, 8.0),
            Err(Error::UnsupportedDimension(4))
        ));
    }
}
