//! Local maxima of FODs on a tessellation.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fodfield::FodField;
use crate::geometry::sh::{basis_matrix, basis_row, dot, n_coeffs};
use crate::geometry::tessellation::OrientationSet;
use crate::geometry::{UnitVector, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub direction: UnitVector,
    pub amplitude: f64,
}

/// Which amplitudes count as peaks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PeakThreshold {
    /// Fraction of the voxel's largest amplitude.
    Relative(f64),
    /// Fixed amplitude.
    Absolute(f64),
}

/// Per-voxel peaks sorted by descending amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSet {
    pub dims: [usize; 3],
    pub peaks: Vec<Vec<Peak>>,
}

/// Peak search on one antipodally symmetric tessellation, reusable across voxels.
#[derive(Debug, Clone)]
pub struct PeakFinder {
    order: u32,
    tess: OrientationSet,
    /// Basis evaluated on one member of each antipodal pair.
    half_basis: DMatrix<f64>,
    /// Row of `half_basis` holding each direction's value.
    rep: Vec<usize>,
}

impl PeakFinder {
    pub fn new(order: u32, tess: &OrientationSet) -> Result<Self> {
        let half = tess.half_indices()?;
        let dirs: Vec<UnitVector> = half.iter().map(|&i| *tess.direction(i)).collect();
        let half_basis = basis_matrix(order, &dirs)?;
        let mut rep = vec![0; tess.len()];
        for (r, &i) in half.iter().enumerate() {
            rep[i] = r;
            rep[tess.antipode(i).ok_or_else(|| Error::invalid("tessellation lacks antipodes"))?] = r;
        }
        Ok(Self {
            order,
            tess: tess.clone(),
            half_basis,
            rep,
        })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn tessellation(&self) -> &OrientationSet {
        &self.tess
    }

    /// Amplitudes on one member of each antipodal pair.
    pub fn half_amplitudes(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.half_basis.nrows()];
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.half_basis.column(j).iter()) {
                *o += b * c;
            }
        }
        out
    }

    /// Amplitude at every tessellation direction.
    pub fn amplitudes(&self, coeffs: &[f64]) -> Vec<f64> {
        let half = self.half_amplitudes(coeffs);
        self.rep.iter().map(|&r| half[r]).collect()
    }

    /// Local maxima over the neighbour graph with amplitude above the
    /// threshold, one per antipodal pair, strongest first.
    pub fn find(&self, coeffs: &[f64], threshold: PeakThreshold) -> Vec<Peak> {
        let half = self.half_amplitudes(coeffs);
        let amp = |i: usize| half[self.rep[i]];
        let vmax = half.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(vmax > 0.0) {
            return Vec::new();
        }
        let cut = match threshold {
            PeakThreshold::Relative(f) => f * vmax,
            PeakThreshold::Absolute(a) => a,
        };
        let mut peaks: Vec<(usize, f64)> = Vec::new();
        for i in 0..self.tess.len() {
            // Keep the lower-index member of each antipodal pair.
            if self.tess.antipode(i).is_some_and(|j| j < i) {
                continue;
            }
            let a = amp(i);
            if a < cut || a <= 0.0 {
                continue;
            }
            let is_max = self.tess.neighbors(i).iter().all(|&n| {
                let b = amp(n);
                a > b || (a == b && i < n)
            });
            if is_max {
                peaks.push((i, a));
            }
        }
        peaks.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        peaks
            .into_iter()
            .map(|(i, a)| Peak {
                direction: *self.tess.direction(i),
                amplitude: a,
            })
            .collect()
    }
}

/// Peaks of every voxel of a field.
pub fn find_peaks(field: &FodField, tess: &OrientationSet, threshold: PeakThreshold) -> Result<PeakSet> {
    if let PeakThreshold::Relative(f) = threshold {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::invalid(format!("relative peak threshold must lie in [0, 1), got {f}")));
        }
    }
    let finder = PeakFinder::new(field.sh_order(), tess)?;
    let peaks = (0..field.n_voxels())
        .into_par_iter()
        .map(|i| finder.find(field.coeffs(i), threshold))
        .collect();
    Ok(PeakSet {
        dims: field.dims(),
        peaks,
    })
}

/// Moves `start` uphill on the sphere until the step size falls below
/// `tol` radians; returns the refined direction and its amplitude.
pub fn refine_peak(coeffs: &[f64], order: u32, start: &UnitVector, step: f64, tol: f64) -> Peak {
    debug_assert_eq!(coeffs.len(), n_coeffs(order));
    let mut row = vec![0.0; coeffs.len()];
    let mut eval = |n: &UnitVector| {
        basis_row(order, n, &mut row);
        dot(&row, coeffs)
    };
    let mut best = *start;
    let mut best_val = eval(&best);
    let mut h = step;
    while h > tol {
        let r = crate::geometry::rotation_to_north(&best);
        let mut moved = false;
        for k in 0..6 {
            let phi = k as f64 * std::f64::consts::PI / 3.0;
            let local = Vec3::new(h.sin() * phi.cos(), h.sin() * phi.sin(), h.cos());
            let cand = UnitVector::new_unchecked(r.apply(&local));
            let v = eval(&cand);
            if v > best_val {
                best_val = v;
                best = cand;
                moved = true;
            }
        }
        if !moved {
            h *= 0.5;
        }
    }
    Peak {
        direction: best,
        amplitude: best_val,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fodfield::Grid;
    use crate::geometry::tessellation::tessellate_sphere;

    /// Apodized delta: a smooth lobe without the ringing of a truncated one.
    fn lobe(n: &UnitVector) -> Vec<f64> {
        let mut c = vec![0.0; n_coeffs(8)];
        basis_row(8, n, &mut c);
        for l in (0..=8u32).step_by(2) {
            let g = (-0.03 * (l * (l + 1)) as f64).exp();
            for m in -(l as i32)..=l as i32 {
                c[crate::geometry::sh::index(l, m)] *= g;
            }
        }
        c
    }

    #[test]
    fn single_lobe_along_z() {
        let t = tessellate_sphere(3).unwrap();
        let f = PeakFinder::new(8, &t).unwrap();
        let p = f.find(&lobe(&UnitVector::EZ), PeakThreshold::Relative(0.1));
        assert_eq!(p.len(), 1);
        assert!(p[0].direction.axis_angle_to(&UnitVector::EZ) < 1e-9);
    }

    #[test]
    fn two_orthogonal_lobes_give_two_peaks() {
        let t = tessellate_sphere(3).unwrap();
        let f = PeakFinder::new(8, &t).unwrap();
        let c: Vec<f64> = lobe(&UnitVector::EX)
            .iter()
            .zip(lobe(&UnitVector::EY))
            .map(|(a, b)| a + b)
            .collect();
        let p = f.find(&c, PeakThreshold::Relative(0.1));
        assert_eq!(p.len(), 2);
        // Brute-force scan: the two largest amplitudes are at ±e_x and ±e_y.
        let amps = f.amplitudes(&c);
        let best = (0..t.len()).max_by(|&i, &j| amps[i].total_cmp(&amps[j])).unwrap();
        let d = t.direction(best);
        assert!(d.axis_angle_to(&UnitVector::EX) < 1e-9 || d.axis_angle_to(&UnitVector::EY) < 1e-9);
    }

    #[test]
    fn zero_voxel_has_no_peaks() {
        let t = tessellate_sphere(2).unwrap();
        let field = FodField::zeros(Grid::new([2, 2, 1], [1.0; 3]).unwrap(), 8).unwrap();
        let ps = find_peaks(&field, &t, PeakThreshold::Absolute(0.1)).unwrap();
        assert!(ps.peaks.iter().all(|p| p.is_empty()));
    }

    #[test]
    fn absolute_threshold_filters() {
        let t = tessellate_sphere(2).unwrap();
        let f = PeakFinder::new(8, &t).unwrap();
        let mut c = lobe(&UnitVector::EZ);
        c.iter_mut().for_each(|v| *v *= 1e-3);
        assert!(f.find(&c, PeakThreshold::Absolute(0.1)).is_empty());
        assert_eq!(f.find(&c, PeakThreshold::Relative(0.5)).len(), 1);
    }

    #[test]
    fn refinement_finds_off_grid_peak() {
        let n = UnitVector::from_xyz(0.31, 0.17, 0.93).unwrap();
        let c = lobe(&n);
        let t = tessellate_sphere(2).unwrap();
        let f = PeakFinder::new(8, &t).unwrap();
        let coarse = f.find(&c, PeakThreshold::Relative(0.5))[0];
        let fine = refine_peak(&c, 8, &coarse.direction, 0.1, 1e-6);
        assert!(fine.direction.axis_angle_to(&n) < 1e-4);
        assert!(fine.amplitude >= coarse.amplitude);
    }
}
