//! Real, antipodally symmetric spherical harmonics.
//!
//! Only even degrees are stored. Coefficients are ordered degree-major with
//! `m` running from `-l` to `l`, so index `l(l-1)/2 + l + m`. The basis is
//! orthonormal on the sphere and carries no Condon-Shortley phase:
//!
//! * `m = 0`: `P̄_l0(cos θ)`
//! * `m > 0`: `√2 P̄_lm(cos θ) cos(mφ)`
//! * `m < 0`: `√2 P̄_l|m|(cos θ) sin(|m|φ)`
//!
//! where `P̄_lm` is the associated Legendre function scaled so that
//! `P̄_l0 = Y_l0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::tessellation::OrientationSet;
use crate::geometry::UnitVector;

/// Number of stored coefficients for an even maximal degree.
pub const fn n_coeffs(order: u32) -> usize {
    let l = order as usize;
    (l + 1) * (l + 2) / 2
}

/// Position of `(l, m)` in a coefficient vector. `l` must be even.
pub const fn index(l: u32, m: i32) -> usize {
    let l_ = l as i64;
    (l_ * (l_ - 1) / 2 + l_ + m as i64) as usize
}

fn check_order(order: u32) -> Result<()> {
    if !order.is_multiple_of(2) {
        return Err(Error::invalid(format!("SH order must be even, got {order}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoefficients {
    order: u32,
    coeffs: Vec<f64>,
}

impl ShCoefficients {
    pub fn new(order: u32, coeffs: Vec<f64>) -> Result<Self> {
        check_order(order)?;
        if coeffs.len() != n_coeffs(order) {
            return Err(Error::invalid(format!(
                "order {order} needs {} coefficients, got {}",
                n_coeffs(order),
                coeffs.len()
            )));
        }
        Ok(Self { order, coeffs })
    }

    pub fn zeros(order: u32) -> Result<Self> {
        Self::new(order, vec![0.0; n_coeffs(order)])
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn get(&self, l: u32, m: i32) -> f64 {
        self.coeffs[index(l, m)]
    }

    /// Value at a single direction.
    pub fn eval_at(&self, n: &UnitVector) -> f64 {
        let mut row = vec![0.0; self.coeffs.len()];
        basis_row(self.order, n, &mut row);
        dot(&row, &self.coeffs)
    }

    pub fn scale(&mut self, s: f64) {
        self.coeffs.iter_mut().for_each(|c| *c *= s);
    }

    /// True if all coefficients with `m != 0` vanish up to `tol` times the
    /// largest coefficient magnitude.
    pub fn is_zonal(&self, tol: f64) -> bool {
        let scale = self.coeffs.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        (0..=self.order).step_by(2).all(|l| {
            (-(l as i32)..=l as i32)
                .filter(|&m| m != 0)
                .all(|m| self.get(l, m).abs() <= tol * scale)
        })
    }

    /// Builds a zonal function from its `m = 0` coefficients, one per even degree.
    pub fn zonal(order: u32, m0: &[f64]) -> Result<Self> {
        check_order(order)?;
        if m0.len() != order as usize / 2 + 1 {
            return Err(Error::invalid("one zonal coefficient per even degree expected"));
        }
        let mut c = vec![0.0; n_coeffs(order)];
        for (k, v) in m0.iter().enumerate() {
            c[index(2 * k as u32, 0)] = *v;
        }
        Self::new(order, c)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fills `out` (length `n_coeffs(order)`) with the basis evaluated at `n`.
pub fn basis_row(order: u32, n: &UnitVector, out: &mut [f64]) {
    let lmax = order as usize;
    debug_assert_eq!(out.len(), n_coeffs(order));
    let (x, y, z) = (n.x(), n.y(), n.z());
    let s = (x * x + y * y).sqrt();
    let (cphi, sphi) = if s > 0.0 { (x / s, y / s) } else { (1.0, 0.0) };

    // Normalized associated Legendre values for all l <= lmax, m <= l,
    // stored row by row for the current m.
    let mut pmm = 1.0 / (4.0 * std::f64::consts::PI).sqrt();
    let (mut cm, mut sm) = (1.0, 0.0);
    let mut col = vec![0.0; lmax + 1];
    for m in 0..=lmax {
        if m > 0 {
            pmm *= ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * s;
            let c = cm * cphi - sm * sphi;
            sm = sm * cphi + cm * sphi;
            cm = c;
        }
        col[m] = pmm;
        if m < lmax {
            col[m + 1] = ((2 * m + 3) as f64).sqrt() * z * pmm;
        }
        for l in m + 2..=lmax {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            col[l] = a * (z * col[l - 1] - b * col[l - 2]);
        }
        let first_even = m + (m % 2);
        for l in (first_even..=lmax).step_by(2) {
            let p = col[l];
            if m == 0 {
                out[index(l as u32, 0)] = p;
            } else {
                let r = std::f64::consts::SQRT_2 * p;
                out[index(l as u32, m as i32)] = r * cm;
                out[index(l as u32, -(m as i32))] = r * sm;
            }
        }
    }
}

/// Basis matrix for a list of directions, one row per direction.
pub fn basis_matrix(order: u32, dirs: &[UnitVector]) -> Result<DMatrix<f64>> {
    check_order(order)?;
    let k = n_coeffs(order);
    let mut m = DMatrix::zeros(dirs.len(), k);
    let mut row = vec![0.0; k];
    for (i, d) in dirs.iter().enumerate() {
        basis_row(order, d, &mut row);
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

pub fn sh_basis(order: u32, dirs: &OrientationSet) -> Result<DMatrix<f64>> {
    basis_matrix(order, dirs.directions())
}

/// Weighted least-squares projection onto the SH basis, precomputed for one
/// orientation set so that it can be applied to many sample vectors.
#[derive(Debug, Clone)]
pub struct ShFitter {
    order: u32,
    /// `n_coeffs × n_dirs` matrix mapping samples to coefficients.
    pinv: DMatrix<f64>,
    /// `n_dirs × n_coeffs` basis.
    basis: DMatrix<f64>,
}

impl ShFitter {
    pub fn new(order: u32, dirs: &OrientationSet) -> Result<Self> {
        let basis = sh_basis(order, dirs)?;
        let k = basis.ncols();
        if dirs.len() < k {
            return Err(Error::invalid(format!(
                "{} directions cannot determine {k} coefficients",
                dirs.len()
            )));
        }
        let w = DVector::from_column_slice(dirs.weights());
        let mut bw = basis.transpose();
        for (j, mut c) in bw.column_iter_mut().enumerate() {
            c *= w[j];
        }
        let gram = &bw * &basis;
        let pinv = solve_spd(gram, bw)?;
        Ok(Self { order, pinv, basis })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn n_dirs(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn fit_into(&self, samples: &[f64], out: &mut [f64]) {
        let (k, n) = self.pinv.shape();
        debug_assert_eq!(samples.len(), n);
        debug_assert_eq!(out.len(), k);
        out.iter_mut().for_each(|o| *o = 0.0);
        // Column-major storage: accumulate column by column.
        for (j, &s) in samples.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let col = self.pinv.column(j);
            for (o, p) in out.iter_mut().zip(col.iter()) {
                *o += p * s;
            }
        }
    }

    pub fn fit(&self, samples: &[f64]) -> Result<ShCoefficients> {
        if samples.len() != self.n_dirs() {
            return Err(Error::invalid(format!(
                "expected {} samples, got {}",
                self.n_dirs(),
                samples.len()
            )));
        }
        let mut out = vec![0.0; n_coeffs(self.order)];
        self.fit_into(samples, &mut out);
        ShCoefficients::new(self.order, out)
    }

    pub fn eval_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let (n, k) = self.basis.shape();
        debug_assert_eq!(coeffs.len(), k);
        debug_assert_eq!(out.len(), n);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.basis.column(j).iter()) {
                *o += b * c;
            }
        }
    }
}

/// Solves `A X = B` for symmetric positive definite `A`, rejecting
/// ill-conditioned systems.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max) {
        return Err(Error::Conditioning(format!(
            "normal matrix eigenvalue range [{min:e}, {max:e}]"
        )));
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Conditioning("Cholesky factorization failed".into()))?;
    Ok(chol.solve(&b))
}

pub fn sh_fit(samples: &[f64], dirs: &OrientationSet, order: u32) -> Result<ShCoefficients> {
    ShFitter::new(order, dirs)?.fit(samples)
}

pub fn sh_eval(c: &ShCoefficients, dirs: &OrientationSet) -> Vec<f64> {
    let mut row = vec![0.0; c.coeffs.len()];
    dirs.directions()
        .iter()
        .map(|d| {
            basis_row(c.order, d, &mut row);
            dot(&row, &c.coeffs)
        })
        .collect()
}

/// Funk-Hecke factors `√(4π/(2l+1)) k_l0` of a zonal kernel, one per even degree.
pub fn funk_hecke_factors(zonal: &ShCoefficients) -> Vec<f64> {
    (0..=zonal.order)
        .step_by(2)
        .map(|l| (4.0 * std::f64::consts::PI / (2 * l + 1) as f64).sqrt() * zonal.get(l, 0))
        .collect()
}

/// Inverse of [`funk_hecke_factors`].
pub fn zonal_from_factors(order: u32, factors: &[f64]) -> Result<ShCoefficients> {
    let m0: Vec<f64> = factors
        .iter()
        .enumerate()
        .map(|(k, f)| f / (4.0 * std::f64::consts::PI / (4 * k + 1) as f64).sqrt())
        .collect();
    ShCoefficients::zonal(order, &m0)
}

/// Applies per-degree factors to every coefficient of `f`.
pub fn scale_degrees(f: &mut [f64], order: u32, factors: &[f64]) {
    for l in (0..=order).step_by(2) {
        let lam = factors[l as usize / 2];
        for m in -(l as i32)..=l as i32 {
            f[index(l, m)] *= lam;
        }
    }
}

/// Spherical convolution of `f` with the rotations of an axially symmetric kernel.
pub fn s2_convolve(zonal: &ShCoefficients, f: &ShCoefficients) -> Result<ShCoefficients> {
    if !zonal.is_zonal(1e-12) {
        return Err(Error::invalid("convolution kernel is not zonal"));
    }
    if zonal.order < f.order {
        return Err(Error::invalid(format!(
            "kernel order {} below function order {}",
            zonal.order, f.order
        )));
    }
    let factors = funk_hecke_factors(zonal);
    let mut out = f.clone();
    scale_degrees(&mut out.coeffs, f.order, &factors);
    Ok(out)
}
