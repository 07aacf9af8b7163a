//! FOD volumes and the operations acting on them.
//!
//! Voxel `(i, j, k)` has its centre at `(i, j, k) ⊙ voxel_size` millimetres,
//! so the volume covers `[-0.5, n - 0.5) ⊙ voxel_size` along each axis.

mod convolve;
mod peaks;

pub use convolve::{
    convolve_samples, enhance, fit_from_axes, sample_on_axes, sharpen, shift_twist_convolve, AxisSamples, EnhanceOptions,
};
pub use peaks::{find_peaks, refine_peak, Peak, PeakFinder, PeakSet, PeakThreshold};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::sh::{basis_row, dot, n_coeffs, ShCoefficients};
use crate::geometry::{UnitVector, Vec3};

/// Spatial layout shared by all volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dimensions must be positive: {dims:?}")));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("voxel size must be positive: {voxel_size:?}")));
        }
        Ok(Self { dims, voxel_size })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear index with x varying fastest.
    pub fn index(&self, v: [usize; 3]) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    pub fn voxel(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn contains_voxel(&self, v: [i64; 3]) -> bool {
        (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < self.dims[a])
    }

    pub fn center(&self, v: [usize; 3]) -> Vec3 {
        Vec3::new(
            v[0] as f64 * self.voxel_size[0],
            v[1] as f64 * self.voxel_size[1],
            v[2] as f64 * self.voxel_size[2],
        )
    }

    /// Continuous voxel coordinates of a point in millimetres.
    pub fn to_voxel(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x / self.voxel_size[0],
            p.y / self.voxel_size[1],
            p.z / self.voxel_size[2],
        )
    }

    /// Voxel containing a point, if inside the volume.
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let c = self.to_voxel(p);
        let v = [
            (c.x + 0.5).floor() as i64,
            (c.y + 0.5).floor() as i64,
            (c.z + 0.5).floor() as i64,
        ];
        self.contains_voxel(v)
            .then(|| [v[0] as usize, v[1] as usize, v[2] as usize])
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        self.voxel_of(p).is_some()
    }
}

/// A volume of even-order SH coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FodField {
    grid: Grid,
    sh_order: u32,
    data: Vec<f64>,
}

impl FodField {
    pub fn zeros(grid: Grid, sh_order: u32) -> Result<Self> {
        ShCoefficients::zeros(sh_order)?;
        Ok(Self {
            grid,
            sh_order,
            data: vec![0.0; grid.n_voxels() * n_coeffs(sh_order)],
        })
    }

    pub fn from_data(grid: Grid, sh_order: u32, data: Vec<f64>) -> Result<Self> {
        ShCoefficients::zeros(sh_order)?;
        let want = grid.n_voxels() * n_coeffs(sh_order);
        if data.len() != want {
            return Err(Error::invalid(format!(
                "field data has {} values, expected {want}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("field contains non-finite coefficients"));
        }
        Ok(Self {
            grid,
            sh_order,
            data,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.grid.voxel_size
    }

    pub fn sh_order(&self) -> u32 {
        self.sh_order
    }

    pub fn n_coeffs(&self) -> usize {
        n_coeffs(self.sh_order)
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.n_voxels()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn coeffs(&self, index: usize) -> &[f64] {
        let k = self.n_coeffs();
        &self.data[index * k..(index + 1) * k]
    }

    pub fn coeffs_mut(&mut self, index: usize) -> &mut [f64] {
        let k = self.n_coeffs();
        &mut self.data[index * k..(index + 1) * k]
    }

    pub fn voxel_coeffs(&self, v: [usize; 3]) -> &[f64] {
        self.coeffs(self.grid.index(v))
    }

    pub fn set_voxel(&mut self, v: [usize; 3], c: &[f64]) {
        let i = self.grid.index(v);
        self.coeffs_mut(i).copy_from_slice(c);
    }

    /// Amplitude of the FOD in voxel `v` along `n`.
    pub fn amplitude(&self, v: [usize; 3], n: &UnitVector) -> f64 {
        let mut row = vec![0.0; self.n_coeffs()];
        basis_row(self.sh_order, n, &mut row);
        dot(&row, self.voxel_coeffs(v))
    }

    /// Trilinear interpolation of the coefficients at a point in millimetres.
    ///
    /// Neighbours outside the volume contribute zero. Returns `None` when the
    /// point lies outside the volume.
    pub fn interpolate(&self, p: &Vec3, out: &mut [f64]) -> Option<()> {
        if !self.grid.contains_point(p) {
            return None;
        }
        let c = self.grid.to_voxel(p);
        let base = [c.x.floor(), c.y.floor(), c.z.floor()];
        let frac = [c.x - base[0], c.y - base[1], c.z - base[2]];
        out.iter_mut().for_each(|o| *o = 0.0);
        for corner in 0..8 {
            let mut w = 1.0;
            let mut v = [0i64; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                v[a] = base[a] as i64 + bit as i64;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 || !self.grid.contains_voxel(v) {
                continue;
            }
            let src = self.voxel_coeffs([v[0] as usize, v[1] as usize, v[2] as usize]);
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        Some(())
    }

    /// Total integral `Σ_voxels ∫ f` (the degree-zero coefficient times √(4π)).
    pub fn mass(&self) -> f64 {
        let s = (4.0 * std::f64::consts::PI).sqrt();
        (0..self.n_voxels()).map(|i| self.coeffs(i)[0] * s).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}
