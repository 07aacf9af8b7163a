//! Independent checks of the closed-form kernel: agreement with a Monte
//! Carlo endpoint histogram and the residual of the evolution equation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::tessellation::OrientationSet;
use crate::geometry::{UnitVector, Vec3};
use crate::kernel::{sample_paths, ContourKernel, KernelParams, SamplePathCloud};

/// Cell-centred lattice of `(2 half_width + 1)³` cells of edge `spacing`
/// around the origin, crossed with an orientation set.
#[derive(Debug, Clone)]
pub struct OracleGrid {
    pub half_width: i32,
    pub spacing: f64,
    pub orientations: OrientationSet,
}

impl OracleGrid {
    fn side(&self) -> usize {
        (2 * self.half_width + 1) as usize
    }

    pub fn n_cells(&self) -> usize {
        self.side().pow(3) * self.orientations.len()
    }

    fn centre(&self, c: usize) -> Vec3 {
        let s = self.side();
        let h = self.half_width as f64;
        Vec3::new(
            (c % s) as f64 - h,
            ((c / s) % s) as f64 - h,
            (c / (s * s)) as f64 - h,
        ) * self.spacing
    }

    /// Endpoint density per unit volume and solid angle; endpoints outside
    /// the lattice are counted in the normalization only.
    pub fn histogram(&self, cloud: &SamplePathCloud) -> Vec<f64> {
        let s = self.side() as i64;
        let n_dirs = self.orientations.len();
        let mut counts = vec![0.0; self.n_cells()];
        for (y, n) in &cloud.endpoints {
            let idx: Vec<i64> = (0..3)
                .map(|a| (y[a] / self.spacing).round() as i64 + self.half_width as i64)
                .collect();
            if idx.iter().any(|&i| i < 0 || i >= s) {
                continue;
            }
            let cell = (idx[0] + s * (idx[1] + s * idx[2])) as usize;
            counts[cell * n_dirs + self.orientations.nearest(n)] += 1.0;
        }
        let vol = self.spacing.powi(3);
        let total = cloud.len() as f64;
        counts
            .iter()
            .enumerate()
            .map(|(i, c)| c / (total * vol * self.orientations.weights()[i % n_dirs]))
            .collect()
    }

    /// Kernel values in histogram order, averaged over `sub³` points per
    /// cell (`sub = 1` samples the centres).
    pub fn kernel_values(&self, params: &KernelParams, sub: usize) -> Result<Vec<f64>> {
        if sub == 0 {
            return Err(Error::invalid("subsampling must be at least 1"));
        }
        let k = ContourKernel::new(*params)?;
        let n_dirs = self.orientations.len();
        let offsets: Vec<Vec3> = (0..sub * sub * sub)
            .map(|j| {
                let f = |i: usize| ((i as f64 + 0.5) / sub as f64 - 0.5) * self.spacing;
                Vec3::new(f(j % sub), f((j / sub) % sub), f(j / (sub * sub)))
            })
            .collect();
        Ok((0..self.n_cells())
            .into_par_iter()
            .map(|i| {
                let c = self.centre(i / n_dirs);
                let n = self.orientations.direction(i % n_dirs);
                offsets.iter().map(|o| k.eval(&(c + o), n)).sum::<f64>() / offsets.len() as f64
            })
            .collect())
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("correlation needs two equally long samples of length ≥ 2"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::Degenerate("constant sample has no correlation".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Pearson correlation between a Monte Carlo histogram and the kernel
/// averaged over each cell with `sub³` points.
pub fn monte_carlo_agreement(
    params: &KernelParams,
    grid: &OracleGrid,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    sub: usize,
) -> Result<f64> {
    let cloud = sample_paths(params, n_paths, n_steps, seed)?;
    pearson(&grid.histogram(&cloud), &grid.kernel_values(params, sub)?)
}

/// Relative L² distance between `∂p/∂t` and `D33 (n·∇)² p + D44 Δ_S² p`,
/// both by central differences of the closed form, over the grid.
pub fn pde_residual(params: &KernelParams, grid: &OracleGrid) -> Result<f64> {
    params.validate()?;
    let KernelParams { d33, d44, t } = *params;
    let dt = 1e-3 * t;
    let (hs, ha) = (1e-3f64, 1e-3f64);
    let at = |tt: f64| ContourKernel::new(KernelParams { d33, d44, t: tt });
    let (k, kp, km) = (at(t)?, at(t + dt)?, at(t - dt)?);
    let n_dirs = grid.orientations.len();
    let (num, den) = (0..grid.n_cells())
        .into_par_iter()
        .map(|i| {
            let y = grid.centre(i / n_dirs);
            let n = *grid.orientations.direction(i % n_dirs);
            let p = |y: &Vec3, n: &UnitVector| k.raw(y, n);
            let dpdt = (kp.raw(&y, &n) - km.raw(&y, &n)) / (2.0 * dt);
            let c = p(&y, &n);
            let nv = n.as_vec();
            let spatial = (p(&(y + nv * hs), &n) - 2.0 * c + p(&(y - nv * hs), &n)) / (hs * hs);
            // Sum of second derivatives along two orthogonal great circles.
            let helper = if nv.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let e1 = nv.cross(&helper).normalize();
            let e2 = nv.cross(&e1);
            let mut angular = 0.0;
            for e in [e1, e2] {
                let plus = UnitVector::new_unchecked(nv * ha.cos() + e * ha.sin());
                let minus = UnitVector::new_unchecked(nv * ha.cos() - e * ha.sin());
                angular += (p(&y, &plus) - 2.0 * c + p(&y, &minus)) / (ha * ha);
            }
            let r = dpdt - (d33 * spatial + d44 * angular);
            (r * r, dpdt * dpdt)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if !(den > 0.0) {
        return Err(Error::Degenerate("time derivative vanishes on the grid".into()));
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tessellation::tessellate_sphere;

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn histogram_integrates_to_captured_fraction() {
        let grid = OracleGrid {
            half_width: 3,
            spacing: 1.0,
            orientations: tessellate_sphere(1).unwrap(),
        };
        let p = KernelParams::new(1.0, 0.02, 0.5).unwrap();
        let cloud = sample_paths(&p, 2000, 50, 3).unwrap();
        let h = grid.histogram(&cloud);
        let n = grid.orientations.len();
        let mass: f64 = h.iter().enumerate().map(|(i, v)| v * grid.orientations.weights()[i % n]).sum();
        assert!(mass > 0.95 && mass <= 1.0 + 1e-12, "{mass}");
    }
}
