//! Quality metrics against ground truth: peak angular error and
//! connection-level tractography scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fodfield::{Grid, PeakSet};
use crate::geometry::{UnitVector, Vec3};
use crate::tracking::Tractogram;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthVoxel {
    pub voxel: [usize; 3],
    pub peaks: Vec<UnitVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleTruth {
    pub name: String,
    pub voxels: Vec<[usize; 3]>,
    pub roi_start: Vec<[usize; 3]>,
    pub roi_end: Vec<[usize; 3]>,
    /// Voxels the bundle passes through without producing signal.
    #[serde(default)]
    pub gap_voxels: Vec<[usize; 3]>,
}

/// White-matter voxels with their true fiber directions, plus per-bundle
/// masks and endpoint regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub voxels: Vec<TruthVoxel>,
    pub bundles: Vec<BundleTruth>,
}

impl GroundTruth {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.voxel_size)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let inside = |v: &[usize; 3]| grid.contains_voxel(v.map(|c| c as i64));
        for t in &self.voxels {
            if !inside(&t.voxel) {
                return Err(Error::invalid(format!("ground-truth voxel {:?} outside the volume", t.voxel)));
            }
        }
        for b in &self.bundles {
            if let Some(v) = b.voxels.iter().chain(&b.roi_start).chain(&b.roi_end).find(|v| !inside(v)) {
                return Err(Error::invalid(format!("bundle {} voxel {v:?} outside the volume", b.name)));
            }
            if b.roi_start.iter().any(|v| b.roi_end.contains(v)) {
                return Err(Error::invalid(format!("bundle {} has overlapping end regions", b.name)));
            }
        }
        Ok(())
    }

    /// Linear voxel index → bundle label of the end region it belongs to.
    fn roi_labels(&self, grid: &Grid) -> Vec<Option<(usize, bool)>> {
        let mut labels = vec![None; grid.n_voxels()];
        for (b, bundle) in self.bundles.iter().enumerate() {
            for v in &bundle.roi_start {
                labels[grid.index(*v)] = Some((b, false));
            }
            for v in &bundle.roi_end {
                labels[grid.index(*v)] = Some((b, true));
            }
        }
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularError {
    pub mean_deg: f64,
    pub true_peaks: usize,
    /// True peaks in voxels without any estimated peak, each counted as 90°.
    pub penalized: usize,
}

/// Mean over all true peaks of the folded angle to the closest estimated
/// peak in the same voxel. Restricted to `subset` when given.
pub fn angular_error(peaks: &PeakSet, gt: &GroundTruth, subset: Option<&[[usize; 3]]>) -> Result<AngularError> {
    if peaks.dims != gt.dims {
        return Err(Error::invalid(format!(
            "peak volume {:?} does not match ground truth {:?}",
            peaks.dims, gt.dims
        )));
    }
    let grid = gt.grid()?;
    let mut sum = 0.0;
    let mut count = 0;
    let mut penalized = 0;
    for t in &gt.voxels {
        if subset.is_some_and(|s| !s.contains(&t.voxel)) {
            continue;
        }
        let est = &peaks.peaks[grid.index(t.voxel)];
        for truth in &t.peaks {
            count += 1;
            if est.is_empty() {
                penalized += 1;
                sum += 90.0;
            } else {
                sum += est
                    .iter()
                    .map(|p| p.direction.axis_angle_to(truth).to_degrees())
                    .fold(f64::INFINITY, f64::min);
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("ground truth has no peaks in the evaluated voxels"));
    }
    Ok(AngularError {
        mean_deg: sum / count as f64,
        true_peaks: count,
        penalized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connection {
    /// Both ends in the two end regions of this bundle.
    Valid(usize),
    Invalid,
    None,
}

/// Classifies each streamline by the end regions containing its first and last points.
pub fn classify(t: &Tractogram, gt: &GroundTruth) -> Result<Vec<Connection>> {
    let grid = gt.grid()?;
    let labels = gt.roi_labels(&grid);
    let label = |p: &Vec3| grid.voxel_of(p).and_then(|v| labels[grid.index(v)]);
    Ok(t.streamlines
        .iter()
        .map(|s| {
            let (Some(a), Some(b)) = (s.points.first(), s.points.last()) else {
                return Connection::None;
            };
            match (label(a), label(b)) {
                (Some((ba, ea)), Some((bb, eb))) if ba == bb && ea != eb => Connection::Valid(ba),
                (Some((ba, _)), Some((bb, _))) if ba != bb => Connection::Invalid,
                _ => Connection::None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectionCounts {
    pub valid: usize,
    pub invalid: usize,
    pub none: usize,
}

impl ConnectionCounts {
    pub fn total(&self) -> usize {
        self.valid + self.invalid + self.none
    }

    /// Percentages (VC, IC, NC).
    pub fn percentages(&self) -> (f64, f64, f64) {
        let n = self.total();
        if n == 0 {
            return (0.0, 0.0, 100.0);
        }
        let pct = |k: usize| 100.0 * k as f64 / n as f64;
        let vc = pct(self.valid);
        let ic = pct(self.invalid);
        // Derived from the other two so the three sum to 100 exactly.
        (vc, ic, 100.0 - vc - ic)
    }
}

pub fn classify_connections(t: &Tractogram, gt: &GroundTruth) -> Result<ConnectionCounts> {
    let mut c = ConnectionCounts {
        valid: 0,
        invalid: 0,
        none: 0,
    };
    for k in classify(t, gt)? {
        match k {
            Connection::Valid(_) => c.valid += 1,
            Connection::Invalid => c.invalid += 1,
            Connection::None => c.none += 1,
        }
    }
    Ok(c)
}

pub fn csr(nc: f64) -> f64 {
    100.0 - nc
}

/// `None` when there are no connections at all.
pub fn vccr(vc: f64, ic: f64) -> Option<f64> {
    (vc + ic > 0.0).then(|| 100.0 * vc / (vc + ic))
}

/// Voxels crossed by the segment from `a` to `b` (both in mm), by a 3-D
/// grid walk. Voxels outside the volume are skipped.
pub fn traverse_segment(grid: &Grid, a: &Vec3, b: &Vec3, out: &mut Vec<[usize; 3]>) {
    // Work in voxel units shifted so voxel k spans [k, k+1).
    let pa = grid.to_voxel(a).add_scalar(0.5);
    let pb = grid.to_voxel(b).add_scalar(0.5);
    let d = pb - pa;
    let mut cell = [pa.x.floor() as i64, pa.y.floor() as i64, pa.z.floor() as i64];
    let end = [pb.x.floor() as i64, pb.y.floor() as i64, pb.z.floor() as i64];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if d[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (cell[a] as f64 + 1.0 - pa[a]) / d[a];
            t_delta[a] = 1.0 / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (pa[a] - cell[a] as f64) / -d[a];
            t_delta[a] = -1.0 / d[a];
        }
    }
    let push = |c: &[i64; 3], out: &mut Vec<[usize; 3]>| {
        if grid.contains_voxel(*c) {
            out.push([c[0] as usize, c[1] as usize, c[2] as usize]);
        }
    };
    push(&cell, out);
    let limit = (0..3).map(|a| (end[a] - cell[a]).unsigned_abs()).sum::<u64>();
    for _ in 0..limit {
        let a = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).unwrap();
        if t_max[a] > 1.0 {
            break;
        }
        cell[a] += step[a];
        t_max[a] += t_delta[a];
        push(&cell, out);
    }
}

/// Mean over bundles of the percentage of bundle voxels crossed by a valid
/// streamline of that bundle. Bundles with empty masks are left out.
pub fn bundle_coverage(t: &Tractogram, gt: &GroundTruth) -> Result<f64> {
    let grid = gt.grid()?;
    let classes = classify(t, gt)?;
    let mut hit = vec![vec![false; grid.n_voxels()]; gt.bundles.len()];
    let mut cells = Vec::new();
    for (s, c) in t.streamlines.iter().zip(&classes) {
        let Connection::Valid(b) = c else { continue };
        cells.clear();
        if s.points.len() == 1 {
            if let Some(v) = grid.voxel_of(&s.points[0]) {
                cells.push(v);
            }
        }
        for w in s.points.windows(2) {
            traverse_segment(&grid, &w[0], &w[1], &mut cells);
        }
        for v in &cells {
            hit[*b][grid.index(*v)] = true;
        }
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (b, bundle) in gt.bundles.iter().enumerate() {
        if bundle.voxels.is_empty() {
            log::warn!("bundle {} has an empty mask and is left out of the coverage", bundle.name);
            continue;
        }
        let covered = bundle.voxels.iter().filter(|v| hit[b][grid.index(**v)]).count();
        sum += 100.0 * covered as f64 / bundle.voxels.len() as f64;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub angular_error_deg: Option<f64>,
    pub penalized_peaks: Option<usize>,
    pub vc: f64,
    pub ic: f64,
    pub nc: f64,
    pub abc: f64,
    pub csr: f64,
    /// Absent when no streamline connects any end regions.
    pub vccr: Option<f64>,
    pub streamlines: usize,
}

pub fn evaluate(t: &Tractogram, peaks: Option<&PeakSet>, gt: &GroundTruth) -> Result<MetricsReport> {
    gt.validate()?;
    let counts = classify_connections(t, gt)?;
    let (vc, ic, nc) = counts.percentages();
    let ang = peaks.map(|p| angular_error(p, gt, None)).transpose()?;
    Ok(MetricsReport {
        angular_error_deg: ang.map(|a| a.mean_deg),
        penalized_peaks: ang.map(|a| a.penalized),
        vc,
        ic,
        nc,
        abc: bundle_coverage(t, gt)?,
        csr: csr(nc),
        vccr: vccr(vc, ic),
        streamlines: t.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fodfield::Peak;
    use crate::tracking::Streamline;

    fn line_gt() -> GroundTruth {
        // One bundle along x through a 10×3×1 volume, plus a second one
        // whose end regions sit in the top row.
        GroundTruth {
            dims: [10, 3, 1],
            voxel_size: [1.0; 3],
            voxels: (0..10)
                .map(|x| TruthVoxel {
                    voxel: [x, 1, 0],
                    peaks: vec![UnitVector::EX],
                })
                .collect(),
            bundles: vec![
                BundleTruth {
                    name: "a".into(),
                    voxels: (0..10).map(|x| [x, 1, 0]).collect(),
                    roi_start: vec![[0, 1, 0]],
                    roi_end: vec![[9, 1, 0]],
                    gap_voxels: vec![],
                },
                BundleTruth {
                    name: "b".into(),
                    voxels: (0..10).map(|x| [x, 2, 0]).collect(),
                    roi_start: vec![[0, 2, 0]],
                    roi_end: vec![[9, 2, 0]],
                    gap_voxels: vec![],
                },
            ],
        }
    }

    fn peakset(dirs: &[Vec<UnitVector>], dims: [usize; 3], at: &[[usize; 3]]) -> PeakSet {
        let grid = Grid::new(dims, [1.0; 3]).unwrap();
        let mut peaks = vec![Vec::new(); grid.n_voxels()];
        for (v, d) in at.iter().zip(dirs) {
            peaks[grid.index(*v)] = d.iter().map(|&direction| Peak { direction, amplitude: 1.0 }).collect();
        }
        PeakSet { dims, peaks }
    }

    fn seg(a: [f64; 3], b: [f64; 3]) -> Streamline {
        Streamline::new(vec![Vec3::from(a), Vec3::from(b)], 0)
    }

    #[test]
    fn angular_error_cases() {
        let gt = line_gt();
        let voxels: Vec<[usize; 3]> = (0..10).map(|x| [x, 1, 0]).collect();
        let exact = peakset(&vec![vec![UnitVector::EX]; 10], gt.dims, &voxels);
        assert_eq!(angular_error(&exact, &gt, None).unwrap().mean_deg, 0.0);
        let flipped = peakset(&vec![vec![-UnitVector::EX]; 10], gt.dims, &voxels);
        assert!(angular_error(&flipped, &gt, None).unwrap().mean_deg < 1e-6);
        let wrong = peakset(&vec![vec![UnitVector::EZ]; 10], gt.dims, &voxels);
        assert!((angular_error(&wrong, &gt, None).unwrap().mean_deg - 90.0).abs() < 1e-9);
        let missing = peakset(&vec![vec![UnitVector::EX]; 5], gt.dims, &voxels[..5]);
        let e = angular_error(&missing, &gt, None).unwrap();
        assert_eq!(e.penalized, 5);
        assert!((e.mean_deg - 45.0).abs() < 1e-9);
        let sub = angular_error(&missing, &gt, Some(&voxels[..5])).unwrap();
        assert_eq!(sub.true_peaks, 5);
        assert_eq!(sub.mean_deg, 0.0);
    }

    #[test]
    fn angular_error_ignores_peak_order_and_sign() {
        let gt = GroundTruth {
            voxels: vec![TruthVoxel {
                voxel: [0, 0, 0],
                peaks: vec![UnitVector::EX, UnitVector::EY],
            }],
            ..line_gt()
        };
        let a = UnitVector::from_xyz(1.0, 0.1, 0.0).unwrap();
        let b = UnitVector::from_xyz(0.05, 1.0, 0.2).unwrap();
        let e1 = angular_error(&peakset(&[vec![a, b]], gt.dims, &[[0, 0, 0]]), &gt, None).unwrap();
        let e2 = angular_error(&peakset(&[vec![-b, a]], gt.dims, &[[0, 0, 0]]), &gt, None).unwrap();
        assert!((e1.mean_deg - e2.mean_deg).abs() < 1e-9);
    }

    #[test]
    fn connection_classes() {
        let gt = line_gt();
        let t = Tractogram::new(vec![
            seg([0.0, 1.0, 0.0], [9.0, 1.0, 0.0]),
            seg([9.2, 1.0, 0.0], [0.1, 1.0, 0.0]),
            seg([0.0, 1.0, 0.0], [9.0, 2.0, 0.0]),
            seg([4.0, 1.0, 0.0], [9.0, 1.0, 0.0]),
        ]);
        let c = classify_connections(&t, &gt).unwrap();
        assert_eq!((c.valid, c.invalid, c.none), (2, 1, 1));
        let (vc, ic, nc) = c.percentages();
        assert_eq!((vc, ic, nc), (50.0, 25.0, 25.0));
        assert_eq!(vc + ic + nc, 100.0);
        let none = Tractogram::new(vec![seg([4.0, 0.0, 0.0], [5.0, 0.0, 0.0])]);
        assert_eq!(classify_connections(&none, &gt).unwrap().percentages().2, 100.0);
    }

    #[test]
    fn percentages_sum_exactly() {
        for (v, i, n) in [(1, 1, 1), (3, 5, 11), (7, 0, 2), (1, 2, 4)] {
            let c = ConnectionCounts { valid: v, invalid: i, none: n };
            let (a, b, d) = c.percentages();
            assert_eq!(a + b + d, 100.0);
        }
    }

    #[test]
    fn ratio_formulas() {
        assert_eq!(csr(20.0), 80.0);
        assert_eq!(vccr(30.0, 30.0), Some(50.0));
        assert_eq!(vccr(0.0, 0.0), None);
        // Non-integer percentages.
        assert!((csr(42.4) - 57.6).abs() < 1e-12);
        assert!((vccr(32.9, 67.1).unwrap() - 32.9).abs() < 1e-12);
    }

    #[test]
    fn coverage() {
        let gt = line_gt();
        let full = Tractogram::new(vec![seg([0.0, 1.0, 0.0], [9.0, 1.0, 0.0])]);
        let abc = bundle_coverage(&full, &gt).unwrap();
        // Bundle a fully covered, bundle b untouched.
        assert!((abc - 50.0).abs() < 1e-12);
        let none = Tractogram::new(vec![seg([4.0, 1.0, 0.0], [9.0, 1.0, 0.0])]);
        assert_eq!(bundle_coverage(&none, &gt).unwrap(), 0.0);
    }

    #[test]
    fn half_coverage_of_a_straight_bundle() {
        let mut gt = line_gt();
        gt.bundles.truncate(1);
        gt.bundles[0].roi_end = vec![[4, 1, 0]];
        let t = Tractogram::new(vec![seg([0.0, 1.0, 0.0], [4.0, 1.0, 0.0])]);
        assert!((bundle_coverage(&t, &gt).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn grid_walk_matches_dense_sampling() {
        let grid = Grid::new([8, 8, 8], [1.5, 1.0, 2.0]).unwrap();
        let a = Vec3::new(0.3, 1.2, 0.4);
        let b = Vec3::new(9.1, 5.3, 12.7);
        let mut walk = Vec::new();
        traverse_segment(&grid, &a, &b, &mut walk);
        let mut dense = Vec::new();
        for k in 0..=100_000 {
            let p = a + (b - a) * (k as f64 / 100_000.0);
            if let Some(v) = grid.voxel_of(&p) {
                if dense.last() != Some(&v) {
                    dense.push(v);
                }
            }
        }
        assert_eq!(walk, dense);
    }
}
