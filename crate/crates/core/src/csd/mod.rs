//! Constrained spherical deconvolution, response estimation and the
//! tensor-derived FOD.

mod dti;
mod response;

pub use dti::{dti_fit, dti_fod, Tensor, TensorField};
pub use response::{estimate_response, single_fiber_mask, ResponseFunction};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fodfield::{FodField, Grid};
use crate::geometry::sh::{basis_matrix, funk_hecke_factors, n_coeffs, solve_spd};
use crate::geometry::tessellation::tessellate_sphere;
use crate::geometry::UnitVector;

/// Tessellation level on which the nonnegativity constraint is imposed.
pub const CONSTRAINT_LEVEL: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub direction: UnitVector,
    /// s/mm².
    pub b: f64,
}

/// Diffusion-weighted volumes plus the unweighted reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiSignal {
    grid: Grid,
    gradients: Vec<Gradient>,
    /// Gradient-major: volume `g` occupies `g·n_voxels..(g+1)·n_voxels`.
    volumes: Vec<f64>,
    b0: Vec<f64>,
}

impl DwiSignal {
    pub fn new(grid: Grid, gradients: Vec<Gradient>, volumes: Vec<f64>, b0: Vec<f64>) -> Result<Self> {
        let nv = grid.n_voxels();
        if gradients.is_empty() {
            return Err(Error::invalid("no diffusion-weighted gradients"));
        }
        if let Some(g) = gradients.iter().find(|g| !(g.b > 0.0 && g.b.is_finite())) {
            return Err(Error::invalid(format!("gradient b-value must be positive, got {}", g.b)));
        }
        if volumes.len() != nv * gradients.len() {
            return Err(Error::invalid(format!(
                "{} signal values for {} gradients of {nv} voxels",
                volumes.len(),
                gradients.len()
            )));
        }
        if b0.len() != nv {
            return Err(Error::invalid(format!("b0 has {} values, expected {nv}", b0.len())));
        }
        if volumes.iter().chain(&b0).any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid("signals must be finite and nonnegative"));
        }
        Ok(Self {
            grid,
            gradients,
            volumes,
            b0,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn gradients(&self) -> &[Gradient] {
        &self.gradients
    }

    pub fn n_gradients(&self) -> usize {
        self.gradients.len()
    }

    pub fn volume(&self, g: usize) -> &[f64] {
        let nv = self.grid.n_voxels();
        &self.volumes[g * nv..(g + 1) * nv]
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn b0(&self) -> &[f64] {
        &self.b0
    }

    /// Diffusion-weighted signal of one voxel, in gradient order.
    pub fn voxel_signal(&self, index: usize) -> Vec<f64> {
        let nv = self.grid.n_voxels();
        (0..self.gradients.len()).map(|g| self.volumes[g * nv + index]).collect()
    }

    /// The common b-value; errors if the gradients span several shells.
    pub fn shell_b(&self) -> Result<f64> {
        let lo = self.gradients.iter().map(|g| g.b).fold(f64::INFINITY, f64::min);
        let hi = self.gradients.iter().map(|g| g.b).fold(0.0, f64::max);
        if hi > lo * 1.01 {
            return Err(Error::invalid(format!(
                "multi-shell data (b from {lo} to {hi}) is not supported"
            )));
        }
        Ok(0.5 * (lo + hi))
    }

    fn directions(&self) -> Vec<UnitVector> {
        self.gradients.iter().map(|g| g.direction).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsdSettings {
    pub order: u32,
    pub lambda: f64,
    pub tau: f64,
    pub max_iter: usize,
}

impl Default for CsdSettings {
    fn default() -> Self {
        Self {
            order: 8,
            lambda: 1.0,
            tau: 0.1,
            max_iter: 50,
        }
    }
}

impl CsdSettings {
    pub fn validate(&self) -> Result<()> {
        if !self.order.is_multiple_of(2) {
            return Err(Error::invalid(format!("SH order must be even, got {}", self.order)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be nonnegative, got {}", self.tau)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// One voxel's deconvolution with its iteration history.
#[derive(Debug, Clone, PartialEq)]
pub struct CsdVoxelFit {
    pub coeffs: Vec<f64>,
    /// Number of constrained iterations performed after the initial fit.
    pub iterations: usize,
    /// Objective value of each iterate, starting with the initial fit.
    pub objective: Vec<f64>,
}

/// Precomputed matrices shared by all voxels.
#[derive(Debug, Clone)]
pub struct CsdSolver {
    settings: CsdSettings,
    /// Forward model rows, `n_grad × n_coeffs`, already scaled by the data weight.
    forward: DMatrix<f64>,
    data_normal: DMatrix<f64>,
    /// Constraint basis on one member of each antipodal pair.
    constraint: DMatrix<f64>,
    constraint_weights: Vec<f64>,
    data_weight: f64,
}

impl CsdSolver {
    pub fn new(gradients: &[UnitVector], response: &ResponseFunction, settings: CsdSettings) -> Result<Self> {
        settings.validate()?;
        let k = n_coeffs(settings.order);
        if gradients.len() < k {
            return Err(Error::invalid(format!(
                "{} gradient directions cannot determine {k} coefficients at order {}",
                gradients.len(),
                settings.order
            )));
        }
        if response.order() < settings.order {
            return Err(Error::invalid(format!(
                "response order {} is below the CSD order {}",
                response.order(),
                settings.order
            )));
        }
        let factors = funk_hecke_factors(response.sh());
        let data_weight = (4.0 * std::f64::consts::PI / gradients.len() as f64).sqrt();
        let mut forward = basis_matrix(settings.order, gradients)?;
        for l in (0..=settings.order).step_by(2) {
            for m in -(l as i32)..=l as i32 {
                let c = crate::geometry::sh::index(l, m);
                forward.column_mut(c).scale_mut(factors[l as usize / 2] * data_weight);
            }
        }
        let data_normal = forward.transpose() * &forward;
        let tess = tessellate_sphere(CONSTRAINT_LEVEL)?;
        let half = tess.half_indices()?;
        let dirs: Vec<UnitVector> = half.iter().map(|&i| *tess.direction(i)).collect();
        let constraint = basis_matrix(settings.order, &dirs)?;
        let constraint_weights = half.iter().map(|&i| 2.0 * tess.weights()[i]).collect();
        // Surface the conditioning failure once instead of per voxel.
        solve_spd(data_normal.clone(), DMatrix::identity(k, 1))?;
        Ok(Self {
            settings,
            forward,
            data_normal,
            constraint,
            constraint_weights,
            data_weight,
        })
    }

    pub fn settings(&self) -> &CsdSettings {
        &self.settings
    }

    /// Constraint mask of `f`: directions whose amplitude falls below τ times
    /// the mean amplitude.
    fn selection(&self, f: &DVector<f64>) -> (Vec<bool>, DVector<f64>) {
        let h = &self.constraint * f;
        let wsum: f64 = self.constraint_weights.iter().sum();
        let mean = h.iter().zip(&self.constraint_weights).map(|(a, w)| a * w).sum::<f64>() / wsum;
        let cut = self.settings.tau * mean;
        (h.iter().map(|&a| a < cut).collect(), h)
    }

    /// Data misfit plus the λ²-weighted penalty on `f`'s own constraint set.
    pub fn objective(&self, signal: &[f64], f: &[f64]) -> f64 {
        let f = DVector::from_column_slice(f);
        let s = DVector::from_column_slice(signal) * self.data_weight;
        let misfit = (&self.forward * &f - s).norm_squared();
        let (sel, h) = self.selection(&f);
        let penalty: f64 = sel
            .iter()
            .zip(h.iter().zip(&self.constraint_weights))
            .filter(|(s, _)| **s)
            .map(|(_, (a, w))| w * a * a)
            .sum();
        misfit + self.settings.lambda.powi(2) * penalty
    }

    pub fn fit_voxel(&self, signal: &[f64]) -> Result<CsdVoxelFit> {
        if signal.len() != self.forward.nrows() {
            return Err(Error::invalid(format!(
                "signal has {} samples, expected {}",
                signal.len(),
                self.forward.nrows()
            )));
        }
        let k = self.forward.ncols();
        let rhs = self.forward.transpose() * (DVector::from_column_slice(signal) * self.data_weight);
        let mut f = solve(self.data_normal.clone(), &rhs)?;
        let mut objective = vec![self.objective(signal, f.as_slice())];
        let lam2 = self.settings.lambda.powi(2);
        let mut iterations = 0;
        if lam2 > 0.0 {
            for _ in 0..self.settings.max_iter {
                let (sel, _) = self.selection(&f);
                let mut normal = self.data_normal.clone();
                for (r, _) in sel.iter().enumerate().filter(|(_, s)| **s) {
                    let row = self.constraint.row(r);
                    let w = lam2 * self.constraint_weights[r];
                    for a in 0..k {
                        let ra = row[a] * w;
                        for b in 0..k {
                            normal[(a, b)] += ra * row[b];
                        }
                    }
                }
                let next = solve(normal, &rhs)?;
                iterations += 1;
                let scale = next.amax().max(f64::MIN_POSITIVE);
                let change = (&next - &f).amax();
                f = next;
                objective.push(self.objective(signal, f.as_slice()));
                if change <= 1e-6 * scale {
                    break;
                }
            }
        }
        Ok(CsdVoxelFit {
            coeffs: f.as_slice().to_vec(),
            iterations,
            objective,
        })
    }
}

fn solve(normal: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Conditioning("CSD normal equations are singular".into()))?;
    Ok(chol.solve(rhs))
}

/// Constrained spherical deconvolution of every voxel.
pub fn csd_fit(dwi: &DwiSignal, response: &ResponseFunction, settings: CsdSettings) -> Result<FodField> {
    dwi.shell_b()?;
    let solver = CsdSolver::new(&dwi.directions(), response, settings)?;
    let k = n_coeffs(settings.order);
    let mut data = vec![0.0; dwi.grid().n_voxels() * k];
    data.par_chunks_mut(k)
        .enumerate()
        .try_for_each(|(i, out)| -> Result<()> {
            let s = dwi.voxel_signal(i);
            if s.iter().all(|v| *v == 0.0) {
                return Ok(());
            }
            out.copy_from_slice(&solver.fit_voxel(&s)?.coeffs);
            Ok(())
        })?;
    FodField::from_data(*dwi.grid(), settings.order, data)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::fodfield::{PeakFinder, PeakThreshold};
    use crate::geometry::sh::{index, sh_eval, ShCoefficients};
    use crate::geometry::Vec3;

    /// Signal of a cylindrically symmetric tensor with axis `axis`.
    pub(crate) fn stick_signal(axis: &UnitVector, g: &UnitVector, b: f64, l1: f64, l2: f64) -> f64 {
        let c = axis.dot(g);
        (-b * (l2 + (l1 - l2) * c * c)).exp()
    }

    /// Fibonacci directions on the upper hemisphere.
    pub(crate) fn hemisphere(n: usize) -> Vec<UnitVector> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                UnitVector::new(Vec3::new(r * phi.cos(), r * phi.sin(), z)).unwrap()
            })
            .collect()
    }

    const B: f64 = 3000.0;
    const L1: f64 = 1.7e-3;
    const L2: f64 = 0.2e-3;

    fn response() -> ResponseFunction {
        ResponseFunction::from_profile(8, |c| (-B * (L2 + (L1 - L2) * c * c)).exp()).unwrap()
    }

    fn voxel(dirs: &[UnitVector], fibers: &[(UnitVector, f64)]) -> Vec<f64> {
        dirs.iter()
            .map(|g| fibers.iter().map(|(a, w)| w * stick_signal(a, g, B, L1, L2)).sum())
            .collect()
    }

    fn solver(lambda: f64) -> (Vec<UnitVector>, CsdSolver) {
        let dirs = hemisphere(64);
        let s = CsdSolver::new(
            &dirs,
            &response(),
            CsdSettings {
                lambda,
                ..CsdSettings::default()
            },
        )
        .unwrap();
        (dirs, s)
    }

    fn peaks(c: &[f64]) -> Vec<crate::fodfield::Peak> {
        let t = tessellate_sphere(4).unwrap();
        let f = PeakFinder::new(8, &t).unwrap();
        f.find(c, PeakThreshold::Relative(0.2))
            .into_iter()
            .map(|p| crate::fodfield::refine_peak(c, 8, &p.direction, 0.02, 1e-7))
            .collect()
    }

    #[test]
    fn single_fiber_peak_on_axis() {
        let (dirs, s) = solver(1.0);
        let fit = s.fit_voxel(&voxel(&dirs, &[(UnitVector::EZ, 1.0)])).unwrap();
        let p = peaks(&fit.coeffs);
        assert_eq!(p.len(), 1);
        assert!(p[0].direction.axis_angle_to(&UnitVector::EZ).to_degrees() < 2.0);
    }

    #[test]
    fn crossing_resolved() {
        let (dirs, s) = solver(1.0);
        let a = UnitVector::from_xyz(1.0, 0.2, 0.1).unwrap();
        let b = UnitVector::from_xyz(-0.2, 1.0, 0.3).unwrap();
        let b = UnitVector::new(b.as_vec() - a.as_vec() * a.dot(&b)).unwrap();
        let fit = s.fit_voxel(&voxel(&dirs, &[(a, 0.5), (b, 0.5)])).unwrap();
        let p = peaks(&fit.coeffs);
        assert_eq!(p.len(), 2, "{p:?}");
        for truth in [a, b] {
            let best = p.iter().map(|q| q.direction.axis_angle_to(&truth)).fold(f64::MAX, f64::min);
            assert!(best.to_degrees() < 5.0, "{}", best.to_degrees());
        }
    }

    #[test]
    fn unconstrained_is_degreewise_division() {
        let (dirs, s) = solver(0.0);
        let sig = voxel(&dirs, &[(UnitVector::from_xyz(0.3, 0.5, 0.8).unwrap(), 1.0)]);
        let fit = s.fit_voxel(&sig).unwrap();
        assert_eq!(fit.iterations, 0);
        // Direct route: least-squares SH fit of the signal, divided per degree.
        let basis = basis_matrix(8, &dirs).unwrap();
        let sh = (basis.transpose() * &basis)
            .cholesky()
            .unwrap()
            .solve(&(basis.transpose() * DVector::from_column_slice(&sig)));
        let factors = funk_hecke_factors(response().sh());
        for l in (0..=8u32).step_by(2) {
            for m in -(l as i32)..=l as i32 {
                let i = index(l, m);
                let want = sh[i] / factors[l as usize / 2];
                assert!((fit.coeffs[i] - want).abs() < 1e-8 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn constraint_suppresses_negative_lobes() {
        let (dirs, s) = solver(1.0);
        let a = UnitVector::from_xyz(1.0, 0.0, 0.2).unwrap();
        let b = UnitVector::from_xyz(0.0, 1.0, -0.1).unwrap();
        let sig = voxel(&dirs, &[(a, 0.6), (b, 0.4)]);
        let (_, free) = solver(0.0);
        let t = tessellate_sphere(CONSTRAINT_LEVEL).unwrap();
        let min_ratio = |c: &[f64]| {
            let v = sh_eval(&ShCoefficients::new(8, c.to_vec()).unwrap(), &t);
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            v.iter().cloned().fold(f64::MAX, f64::min) / max
        };
        let constrained = min_ratio(&s.fit_voxel(&sig).unwrap().coeffs);
        let unconstrained = min_ratio(&free.fit_voxel(&sig).unwrap().coeffs);
        assert!(unconstrained < -0.05, "{unconstrained}");
        assert!(constrained > unconstrained / 4.0, "{constrained} vs {unconstrained}");
    }

    #[test]
    fn scaling_the_signal_scales_the_fod() {
        let (dirs, s) = solver(1.0);
        let sig = voxel(&dirs, &[(UnitVector::from_xyz(1.0, 1.0, 0.0).unwrap(), 0.7), (UnitVector::EZ, 0.3)]);
        let f1 = s.fit_voxel(&sig).unwrap().coeffs;
        let scaled: Vec<f64> = sig.iter().map(|v| v * 3.5).collect();
        let f2 = s.fit_voxel(&scaled).unwrap().coeffs;
        for (a, b) in f1.iter().zip(&f2) {
            assert!((a * 3.5 - b).abs() < 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn rejects_too_few_directions() {
        let dirs = hemisphere(32);
        let err = CsdSolver::new(&dirs, &response(), CsdSettings::default()).unwrap_err();
        assert!(err.to_string().contains("45"), "{err}");
    }

    #[test]
    fn objective_history_starts_with_the_unconstrained_fit() {
        let (dirs, s) = solver(1.0);
        let sig = voxel(&dirs, &[(UnitVector::EX, 0.5), (UnitVector::EY, 0.5)]);
        let fit = s.fit_voxel(&sig).unwrap();
        assert_eq!(fit.objective.len(), fit.iterations + 1);
        assert!(fit.iterations >= 1);
    }

    #[test]
    fn whole_volume_fit() {
        let dirs = hemisphere(64);
        let grid = Grid::new([2, 1, 1], [2.0; 3]).unwrap();
        let gradients: Vec<Gradient> = dirs.iter().map(|d| Gradient { direction: *d, b: B }).collect();
        let mut volumes = Vec::new();
        for g in &dirs {
            volumes.push(stick_signal(&UnitVector::EX, g, B, L1, L2));
            volumes.push(0.0);
        }
        let dwi = DwiSignal::new(grid, gradients, volumes, vec![1.0, 0.0]).unwrap();
        let f = csd_fit(&dwi, &response(), CsdSettings::default()).unwrap();
        assert!(f.coeffs(1).iter().all(|c| *c == 0.0));
        let p = peaks(f.coeffs(0));
        assert!(p[0].direction.axis_angle_to(&UnitVector::EX).to_degrees() < 2.0);
    }

    #[test]
    fn multi_shell_rejected() {
        let grid = Grid::new([1, 1, 1], [1.0; 3]).unwrap();
        let g = vec![
            Gradient { direction: UnitVector::EX, b: 1000.0 },
            Gradient { direction: UnitVector::EY, b: 3000.0 },
        ];
        let dwi = DwiSignal::new(grid, g, vec![0.5, 0.5], vec![1.0]).unwrap();
        assert!(dwi.shell_b().is_err());
    }
}
