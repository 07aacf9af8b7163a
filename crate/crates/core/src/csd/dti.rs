use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::csd::DwiSignal;
use crate::error::{Error, Result};
use crate::fodfield::{FodField, Grid};
use crate::geometry::sh::{n_coeffs, solve_spd, ShFitter};
use crate::geometry::tessellation::tessellate_sphere;
use crate::geometry::UnitVector;

/// Symmetric positive-definite diffusion tensor in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tensor(pub Matrix3<f64>);

impl Tensor {
    /// Eigenvalues in descending order with matching eigenvectors as columns.
    pub fn eigen(&self) -> ([f64; 3], Matrix3<f64>) {
        let e = SymmetricEigen::new(self.0);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
        let vals = order.map(|i| e.eigenvalues[i]);
        let vecs = Matrix3::from_columns(&order.map(|i| e.eigenvectors.column(i).into_owned()));
        (vals, vecs)
    }

    pub fn principal_axis(&self) -> UnitVector {
        let (_, v) = self.eigen();
        UnitVector::new_unchecked(v.column(0).normalize())
    }

    pub fn fractional_anisotropy(&self) -> f64 {
        let (l, _) = self.eigen();
        let mean = (l[0] + l[1] + l[2]) / 3.0;
        let num: f64 = l.iter().map(|x| (x - mean).powi(2)).sum();
        let den: f64 = l.iter().map(|x| x * x).sum();
        if den > 0.0 {
            (1.5 * num / den).sqrt()
        } else {
            0.0
        }
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Rebuilds the tensor with eigenvalues raised to at least `rel` times the largest.
    fn clamped(&self, rel: f64) -> Option<Tensor> {
        let (vals, vecs) = self.eigen();
        if !(vals[0] > 0.0) {
            return None;
        }
        let floor = rel * vals[0];
        let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(
            vals[0],
            vals[1].max(floor),
            vals[2].max(floor),
        ));
        Some(Tensor(vecs * d * vecs.transpose()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub grid: Grid,
    /// `None` where the voxel had too few usable measurements.
    pub tensors: Vec<Option<Tensor>>,
}

fn design_row(g: &UnitVector, b: f64) -> [f64; 7] {
    let (x, y, z) = (g.x(), g.y(), g.z());
    [
        1.0,
        -b * x * x,
        -b * y * y,
        -b * z * z,
        -2.0 * b * x * y,
        -2.0 * b * x * z,
        -2.0 * b * y * z,
    ]
}

/// Log-linear least-squares fit in one voxel. Zero or negative signals are
/// left out.
pub(crate) fn dti_fit_voxel(dwi: &DwiSignal, index: usize) -> Option<Tensor> {
    let mut rows: Vec<[f64; 7]> = Vec::new();
    let mut rhs = Vec::new();
    let b0 = dwi.b0()[index];
    if b0 > 0.0 {
        rows.push([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        rhs.push(b0.ln());
    }
    let nv = dwi.grid().n_voxels();
    for (g, grad) in dwi.gradients().iter().enumerate() {
        let s = dwi.volumes()[g * nv + index];
        if s > 0.0 {
            rows.push(design_row(&grad.direction, grad.b));
            rhs.push(s.ln());
        }
    }
    if rows.len() < 7 {
        return None;
    }
    let a = DMatrix::from_fn(rows.len(), 7, |i, j| rows[i][j]);
    // Columns have very different scales (1 versus b·g²); equilibrate first.
    let scale: Vec<f64> = (0..7).map(|j| a.column(j).norm().max(f64::MIN_POSITIVE)).collect();
    let a = DMatrix::from_fn(rows.len(), 7, |i, j| a[(i, j)] / scale[j]);
    let atb = a.transpose() * DVector::from_vec(rhs);
    let x = solve_spd(a.transpose() * &a, DMatrix::from_column_slice(7, 1, atb.as_slice())).ok()?;
    let p: Vec<f64> = (0..7).map(|j| x[j] / scale[j]).collect();
    let m = Matrix3::new(p[1], p[4], p[5], p[4], p[2], p[6], p[5], p[6], p[3]);
    Tensor(m).clamped(1e-6)
}

pub fn dti_fit(dwi: &DwiSignal) -> Result<TensorField> {
    // The quadratic-form part of the design must have full rank.
    let mut g = DMatrix::zeros(dwi.n_gradients(), 6);
    for (i, grad) in dwi.gradients().iter().enumerate() {
        let r = design_row(&grad.direction, 1.0);
        for j in 0..6 {
            g[(i, j)] = r[j + 1];
        }
    }
    let eig = (g.transpose() * &g).symmetric_eigenvalues();
    if dwi.n_gradients() < 6 || !(eig.min() > 1e-10 * eig.max()) {
        return Err(Error::invalid(
            "tensor fitting needs at least 6 non-collinear gradient directions",
        ));
    }
    let tensors = (0..dwi.grid().n_voxels())
        .into_par_iter()
        .map(|i| dti_fit_voxel(dwi, i))
        .collect();
    Ok(TensorField {
        grid: *dwi.grid(),
        tensors,
    })
}

/// FOD `(nᵀ D⁻¹ n)^(-3/2)` normalized by `4π ∫ √det D` over the volume,
/// fitted to SH of the given order.
pub fn dti_fod(tensors: &TensorField, order: u32) -> Result<FodField> {
    let voxel_volume: f64 = tensors.grid.voxel_size.iter().product();
    let integral: f64 = tensors
        .tensors
        .iter()
        .flatten()
        .map(|t| t.determinant().max(0.0).sqrt() * voxel_volume)
        .sum();
    if !(integral > 0.0) {
        return Err(Error::Degenerate("no voxel has a usable tensor".into()));
    }
    let norm = 1.0 / (4.0 * std::f64::consts::PI * integral);
    let tess = tessellate_sphere(4)?;
    let fitter = ShFitter::new(order, &tess)?;
    let k = n_coeffs(order);
    let mut data = vec![0.0; tensors.grid.n_voxels() * k];
    data.par_chunks_mut(k).enumerate().for_each(|(i, out)| {
        let Some(t) = tensors.tensors[i] else { return };
        let Some(inv) = t.0.try_inverse() else { return };
        let samples: Vec<f64> = tess
            .directions()
            .iter()
            .map(|n| {
                let q = (n.as_vec().transpose() * inv * n.as_vec())[0];
                norm * q.powf(-1.5)
            })
            .collect();
        fitter.fit_into(&samples, out);
    });
    FodField::from_data(tensors.grid, order, data)
}
