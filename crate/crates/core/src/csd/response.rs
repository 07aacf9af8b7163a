use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::csd::dti::{dti_fit, dti_fit_voxel};
use crate::csd::DwiSignal;
use crate::error::{Error, Result};
use crate::geometry::sh::{basis_row, funk_hecke_factors, index, n_coeffs, solve_spd, ShCoefficients};
use crate::geometry::UnitVector;

/// Axially symmetric single-fiber signal profile, aligned with e_z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFunction {
    sh: ShCoefficients,
}

impl ResponseFunction {
    pub fn new(sh: ShCoefficients) -> Result<Self> {
        if !sh.is_zonal(1e-9) {
            return Err(Error::invalid("response function must be zonal"));
        }
        Ok(Self { sh })
    }

    /// Zonal least-squares fit of `profile(cos θ)`.
    pub fn from_profile(order: u32, profile: impl Fn(f64) -> f64) -> Result<Self> {
        let n = 2000;
        let cos: Vec<f64> = (0..n).map(|i| -1.0 + (2 * i + 1) as f64 / n as f64).collect();
        let samples: Vec<f64> = cos.iter().map(|&c| profile(c)).collect();
        Self::new(zonal_fit(order, &cos, &samples)?)
    }

    pub fn order(&self) -> u32 {
        self.sh.order()
    }

    pub fn sh(&self) -> &ShCoefficients {
        &self.sh
    }

    /// The `m = 0` coefficients, one per even degree.
    pub fn zonal_coeffs(&self) -> Vec<f64> {
        (0..=self.order()).step_by(2).map(|l| self.sh.get(l, 0)).collect()
    }

    pub fn factors(&self) -> Vec<f64> {
        funk_hecke_factors(&self.sh)
    }

    /// Value at polar angle `acos(c)` from the symmetry axis.
    pub fn eval_cos(&self, c: f64) -> f64 {
        let c = c.clamp(-1.0, 1.0);
        let n = UnitVector::new_unchecked(nalgebra::Vector3::new((1.0 - c * c).sqrt(), 0.0, c));
        self.sh.eval_at(&n)
    }
}

/// Least-squares zonal SH fit of samples given by their cosine to the axis.
pub(crate) fn zonal_fit(order: u32, cos: &[f64], samples: &[f64]) -> Result<ShCoefficients> {
    let degrees = order as usize / 2 + 1;
    if cos.len() < degrees {
        return Err(Error::invalid(format!(
            "{} samples cannot determine {degrees} zonal coefficients",
            cos.len()
        )));
    }
    let mut design = DMatrix::zeros(cos.len(), degrees);
    let mut row = vec![0.0; n_coeffs(order)];
    for (i, &c) in cos.iter().enumerate() {
        let c = c.clamp(-1.0, 1.0);
        let n = UnitVector::new_unchecked(nalgebra::Vector3::new((1.0 - c * c).sqrt(), 0.0, c));
        basis_row(order, &n, &mut row);
        for k in 0..degrees {
            design[(i, k)] = row[index(2 * k as u32, 0)];
        }
    }
    let rhs = design.transpose() * DVector::from_column_slice(samples);
    let sol = solve_spd(design.transpose() * &design, DMatrix::from_column_slice(degrees, 1, rhs.as_slice()))?;
    ShCoefficients::zonal(order, sol.as_slice())
}

/// Voxels whose tensor fit has fractional anisotropy of at least `fa_threshold`.
pub fn single_fiber_mask(dwi: &DwiSignal, fa_threshold: f64) -> Result<Vec<[usize; 3]>> {
    if !(0.0..1.0).contains(&fa_threshold) {
        return Err(Error::invalid(format!("FA threshold must lie in [0, 1), got {fa_threshold}")));
    }
    let tensors = dti_fit(dwi)?;
    let mask: Vec<[usize; 3]> = tensors
        .tensors
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_some_and(|t| t.fractional_anisotropy() >= fa_threshold))
        .map(|(i, _)| dwi.grid().voxel(i))
        .collect();
    if mask.is_empty() {
        return Err(Error::Degenerate(format!("no voxel reaches FA {fa_threshold}")));
    }
    Ok(mask)
}

/// Averages, over the masked voxels, the zonal fit of each voxel's signal
/// after rotating its principal diffusion axis onto e_z.
pub fn estimate_response(dwi: &DwiSignal, mask: &[[usize; 3]], order: u32) -> Result<ResponseFunction> {
    if mask.is_empty() {
        return Err(Error::invalid("single-fiber mask is empty"));
    }
    let grid = dwi.grid();
    let mut acc = vec![0.0; order as usize / 2 + 1];
    for v in mask {
        if !grid.contains_voxel(v.map(|c| c as i64)) {
            return Err(Error::invalid(format!("mask voxel {v:?} lies outside the volume")));
        }
        let i = grid.index(*v);
        let tensor = dti_fit_voxel(dwi, i)
            .ok_or_else(|| Error::Degenerate(format!("tensor fit failed in voxel {v:?}")))?;
        let axis = tensor.principal_axis();
        let signal = dwi.voxel_signal(i);
        let cos: Vec<f64> = dwi.gradients().iter().map(|g| g.direction.dot(&axis)).collect();
        let fit = zonal_fit(order, &cos, &signal)?;
        for (k, a) in acc.iter_mut().enumerate() {
            *a += fit.get(2 * k as u32, 0);
        }
    }
    acc.iter_mut().for_each(|a| *a /= mask.len() as f64);
    ResponseFunction::new(ShCoefficients::zonal(order, &acc)?)
}
