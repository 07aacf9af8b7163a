//! Shift-twist convolution of FOD fields with a kernel table.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fodfield::{FodField, Grid};
use crate::geometry::sh::{basis_matrix, funk_hecke_factors, n_coeffs, ShCoefficients, ShFitter};
use crate::geometry::tessellation::{tessellate_sphere, OrientationSet};
use crate::kernel::{discretize_kernel, EnhancementKernel, KernelParams, TableOptions};

/// Values of a field on the axes of a kernel table, one row per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisSamples {
    pub grid: Grid,
    pub n_axes: usize,
    pub values: Vec<f64>,
}

impl AxisSamples {
    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.values[index * self.n_axes..(index + 1) * self.n_axes]
    }

    /// `Σ_voxels Σ_axes value · ω`.
    pub fn mass(&self, axis_weights: &[f64]) -> f64 {
        self.values
            .chunks(self.n_axes)
            .map(|row| row.iter().zip(axis_weights).map(|(v, w)| v * w).sum::<f64>())
            .sum()
    }
}

/// Evaluation and refit matrices between SH coefficients and table axes.
struct AxisBasis {
    /// `n_axes × n_coeffs`.
    eval: DMatrix<f64>,
    /// `n_coeffs × n_axes`, the full-set least-squares fit folded onto axes.
    fit: DMatrix<f64>,
}

impl AxisBasis {
    fn new(order: u32, kernel: &EnhancementKernel) -> Result<Self> {
        let set = kernel.orientations();
        let k = n_coeffs(order);
        if set.len() < k {
            return Err(Error::invalid(format!(
                "kernel orientation set has {} directions, too few for SH order {order}",
                set.len()
            )));
        }
        let axes: Vec<_> = kernel.axes().iter().map(|&i| *set.direction(i)).collect();
        let eval = basis_matrix(order, &axes)?;
        let fitter = ShFitter::new(order, set)?;
        let full = fitter_matrix(&fitter, set.len());
        let mut fit = DMatrix::zeros(k, axes.len());
        for (a, &i) in kernel.axes().iter().enumerate() {
            let j = set.antipode(i).expect("kernel orientations are antipodally symmetric");
            for r in 0..k {
                fit[(r, a)] = full[(r, i)] + full[(r, j)];
            }
        }
        Ok(Self { eval, fit })
    }
}

fn fitter_matrix(fitter: &ShFitter, n: usize) -> DMatrix<f64> {
    let k = n_coeffs(fitter.order());
    let mut m = DMatrix::zeros(k, n);
    let mut e = vec![0.0; n];
    let mut c = vec![0.0; k];
    for j in 0..n {
        e[j] = 1.0;
        fitter.fit_into(&e, &mut c);
        m.set_column(j, &nalgebra::DVector::from_column_slice(&c));
        e[j] = 0.0;
    }
    m
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(m.column(j).iter()) {
            *o += a * xv;
        }
    }
}

/// Evaluates every voxel's FOD on the table axes.
pub fn sample_on_axes(field: &FodField, kernel: &EnhancementKernel) -> Result<AxisSamples> {
    let basis = AxisBasis::new(field.sh_order(), kernel)?;
    Ok(sample_with(&basis, field, kernel.n_axes()))
}

fn sample_with(basis: &AxisBasis, field: &FodField, n_axes: usize) -> AxisSamples {
    let mut values = vec![0.0; field.n_voxels() * n_axes];
    values
        .par_chunks_mut(n_axes)
        .enumerate()
        .for_each(|(i, row)| mat_vec(&basis.eval, field.coeffs(i), row));
    AxisSamples {
        grid: *field.grid(),
        n_axes,
        values,
    }
}

/// Refits axis samples to SH coefficients of the given order.
pub fn fit_from_axes(samples: &AxisSamples, kernel: &EnhancementKernel, order: u32) -> Result<FodField> {
    let basis = AxisBasis::new(order, kernel)?;
    Ok(fit_with(&basis, samples, order))
}

fn fit_with(basis: &AxisBasis, samples: &AxisSamples, order: u32) -> FodField {
    let k = n_coeffs(order);
    let mut data = vec![0.0; samples.grid.n_voxels() * k];
    data.par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, c)| mat_vec(&basis.fit, samples.voxel(i), c));
    FodField::from_data(samples.grid, order, data).expect("refit produces finite data")
}

/// Discrete shift-twist convolution on the axis samples.
///
/// `out(y, j) = Σ_{offset, i} K(offset, i, j) · U(y - offset, i) · ω_i` with
/// zero padding outside the volume. Each output voxel is accumulated in a
/// fixed order, so the result does not depend on the thread count.
pub fn convolve_samples(kernel: &EnhancementKernel, input: &AxisSamples) -> Result<AxisSamples> {
    if input.n_axes != kernel.n_axes() {
        return Err(Error::invalid(format!(
            "samples have {} axes but the kernel has {}",
            input.n_axes,
            kernel.n_axes()
        )));
    }
    let n = kernel.n_axes();
    let w = kernel.axis_weights();
    let weighted: Vec<f64> = input
        .values
        .chunks(n)
        .flat_map(|row| row.iter().zip(w).map(|(v, w)| v * w))
        .collect();
    let nonzero: Vec<bool> = weighted.chunks(n).map(|r| r.iter().any(|v| *v != 0.0)).collect();
    let grid = input.grid;
    let dims = grid.dims.map(|d| d as i64);
    let mut values = vec![0.0; input.values.len()];
    values.par_chunks_mut(n).enumerate().for_each(|(idx, acc)| {
        let v = grid.voxel(idx);
        for (k, off) in kernel.offsets().iter().enumerate() {
            let src = [
                v[0] as i64 - off[0] as i64,
                v[1] as i64 - off[1] as i64,
                v[2] as i64 - off[2] as i64,
            ];
            if (0..3).any(|a| src[a] < 0 || src[a] >= dims[a]) {
                continue;
            }
            let sidx = grid.index([src[0] as usize, src[1] as usize, src[2] as usize]);
            if !nonzero[sidx] {
                continue;
            }
            let u = &weighted[sidx * n..(sidx + 1) * n];
            let (s, t, val) = kernel.group(k);
            for e in 0..s.len() {
                acc[t[e] as usize] += val[e] * u[s[e] as usize];
            }
        }
    });
    Ok(AxisSamples {
        grid,
        n_axes: n,
        values,
    })
}

/// Shift-twist convolution of an SH field: sample on the table axes,
/// convolve, refit to SH of the input order.
pub fn shift_twist_convolve(kernel: &EnhancementKernel, field: &FodField) -> Result<FodField> {
    let basis = AxisBasis::new(field.sh_order(), kernel)?;
    let samples = sample_with(&basis, field, kernel.n_axes());
    let out = convolve_samples(kernel, &samples)?;
    Ok(fit_with(&basis, &out, field.sh_order()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceOptions {
    pub tess_level: u32,
    pub half_width: Option<u32>,
    pub threshold: f64,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self {
            tess_level: 3,
            half_width: None,
            threshold: 1e-4,
        }
    }
}

/// Contour enhancement: builds the kernel table and convolves.
pub fn enhance(field: &FodField, params: KernelParams, options: EnhanceOptions) -> Result<FodField> {
    let tess = tessellate_sphere(options.tess_level)?;
    let table = discretize_kernel(
        params,
        &tess,
        TableOptions {
            half_width: options.half_width,
            threshold: options.threshold,
        },
    )?;
    log::info!(
        "kernel table: {} entries, half width {}, dropped mass {:.2e}",
        table.len(),
        table.half_width(),
        table.diagnostics().dropped_mass_fraction
    );
    shift_twist_convolve(&table, field)
}

/// Deconvolves every voxel by a zonal response, clips negative lobes on
/// `tess` and refits.
pub fn sharpen(field: &FodField, response: &ShCoefficients, tess: &OrientationSet) -> Result<FodField> {
    let order = field.sh_order();
    if !response.is_zonal(1e-9) {
        return Err(Error::invalid("sharpening response is not zonal"));
    }
    if response.order() < order {
        return Err(Error::invalid(format!(
            "response order {} is below the field order {order}",
            response.order()
        )));
    }
    let factors = funk_hecke_factors(response);
    let scale = factors.iter().fold(0.0f64, |a, f| a.max(f.abs()));
    for (k, f) in factors.iter().enumerate().take(order as usize / 2 + 1) {
        if !(f.abs() > 1e-12 * scale) {
            return Err(Error::invalid(format!(
                "response factor vanishes at degree {}",
                2 * k
            )));
        }
    }
    let fitter = ShFitter::new(order, tess)?;
    let k = n_coeffs(order);
    let mut data = field.data().to_vec();
    data.par_chunks_mut(k).for_each(|c| {
        for l in (0..=order).step_by(2) {
            let inv = 1.0 / factors[l as usize / 2];
            for m in -(l as i32)..=l as i32 {
                c[crate::geometry::sh::index(l, m)] *= inv;
            }
        }
        let mut amp = vec![0.0; fitter.n_dirs()];
        fitter.eval_into(c, &mut amp);
        if amp.iter().any(|a| *a < 0.0) {
            amp.iter_mut().for_each(|a| *a = a.max(0.0));
            fitter.fit_into(&amp, c);
        }
    });
    FodField::from_data(*field.grid(), order, data)
}
