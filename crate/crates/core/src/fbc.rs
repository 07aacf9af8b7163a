//! Fiber-to-bundle coherence.
//!
//! Every resampled fiber point, together with its tangent and the reversed
//! tangent, is a source of the contour-enhancement kernel. The local
//! coherence of a point is the superposition of all kernels observed there.
//! Fibers whose least coherent stretch falls far below the bundle average
//! are taken to be spurious.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::tessellation::tessellate_sphere;
use crate::geometry::{UnitVector, Vec3};
use crate::kernel::{ContourKernel, KernelParams};
use crate::tracking::Tractogram;

pub const DEFAULT_ALPHA: usize = 7;
pub const DEFAULT_RESAMPLE_STEP: f64 = 1.0;
/// Fraction of kernel mass inside the default cutoff radius.
pub const CUTOFF_MASS: f64 = 0.9999;

/// Resampled fibers with unit tangents.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointSet {
    points: Vec<Vec3>,
    tangents: Vec<UnitVector>,
    /// Start of each fiber in `points`, plus the total at the end.
    offsets: Vec<usize>,
    /// Tractogram index of each fiber.
    sources: Vec<usize>,
    /// Tractogram indices left out for having zero length.
    skipped: Vec<usize>,
}

impl OrientedPointSet {
    pub fn n_fibers(&self) -> usize {
        self.sources.len()
    }

    pub fn fiber(&self, i: usize) -> (&[Vec3], &[UnitVector]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.points[r.clone()], &self.tangents[r])
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    /// Number of oriented elements, counting both tangent signs.
    pub fn n_total(&self) -> usize {
        2 * self.points.len()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn tangents(&self) -> &[UnitVector] {
        &self.tangents
    }
}

fn resample(points: &[Vec3], step: f64) -> Option<Vec<Vec3>> {
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last()?;
    if !(total > 0.0) {
        return None;
    }
    let n = ((total / step) - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(n + 1);
    let mut seg = 0;
    for k in 0..=n {
        let s = total * k as f64 / n as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(points[seg] + (points[seg + 1] - points[seg]) * u);
    }
    Some(out)
}

/// Resamples every streamline at (about) `step` mm and attaches tangents
/// from central differences, one-sided at the ends.
pub fn build_oriented_set(t: &Tractogram, step: f64) -> Result<OrientedPointSet> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("resample step must be positive, got {step}")));
    }
    let mut set = OrientedPointSet {
        points: Vec::new(),
        tangents: Vec::new(),
        offsets: vec![0],
        sources: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, s) in t.streamlines.iter().enumerate() {
        let Some(pts) = resample(&s.points, step) else {
            log::warn!("streamline {i} has zero length and is left out");
            set.skipped.push(i);
            continue;
        };
        let n = pts.len();
        for k in 0..n {
            let d = pts[(k + 1).min(n - 1)] - pts[k.saturating_sub(1)];
            set.tangents.push(UnitVector::new_unchecked(d.normalize()));
        }
        set.points.extend(pts);
        set.offsets.push(set.points.len());
        set.sources.push(i);
    }
    Ok(set)
}

/// Local coherence per fiber point.
#[derive(Debug, Clone, PartialEq)]
pub struct LfbcProfile {
    values: Vec<f64>,
    offsets: Vec<usize>,
}

impl LfbcProfile {
    pub fn from_fibers(fibers: &[Vec<f64>]) -> Self {
        let mut offsets = vec![0];
        let mut values = Vec::new();
        for f in fibers {
            values.extend_from_slice(f);
            offsets.push(values.len());
        }
        Self { values, offsets }
    }

    pub fn n_fibers(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn fiber(&self, i: usize) -> &[f64] {
        &self.values[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            offsets: self.offsets.clone(),
        }
    }
}

/// Radius of the ball around the source that holds `fraction` of the
/// kernel's mass, from a cylindrical quadrature of the axially symmetric
/// kernel.
pub fn mass_radius(params: &KernelParams, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("mass fraction must lie in (0, 1), got {fraction}")));
    }
    let k = ContourKernel::new(*params)?;
    let tiny = 1e-12 * k.peak();
    let mut extent = 1.0;
    while k.spatial_bound(extent, 0.0) > tiny || k.spatial_bound(0.0, extent) > tiny {
        extent *= 1.25;
    }
    let dirs = tessellate_sphere(3)?;
    let (nz, nr) = (160usize, 80usize);
    let (hz, hr) = (2.0 * extent / nz as f64, extent / nr as f64);
    let mut cells: Vec<(f64, f64)> = (0..nz * nr)
        .into_par_iter()
        .map(|c| {
            let z = -extent + (c / nr) as f64 * hz + hz / 2.0;
            let rho = (c % nr) as f64 * hr + hr / 2.0;
            let u = Vec3::new(rho, 0.0, z);
            let ang: f64 = dirs
                .directions()
                .iter()
                .zip(dirs.weights())
                .map(|(n, w)| w * k.eval(&u, n))
                .sum();
            (z.hypot(rho), ang * 2.0 * std::f64::consts::PI * rho * hz * hr)
        })
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = cells.iter().map(|c| c.1).sum();
    let mut acc = 0.0;
    for (r, m) in &cells {
        acc += m;
        if acc >= fraction * total {
            return Ok(r + hz.hypot(hr) / 2.0);
        }
    }
    Ok(extent)
}

/// Spatial cutoff for the coherence sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    /// Every pair of points contributes.
    None,
    /// Radius holding [`CUTOFF_MASS`] of the kernel.
    Auto,
    Radius(f64),
}

impl Cutoff {
    pub fn resolve(&self, params: &KernelParams) -> Result<Option<f64>> {
        match *self {
            Cutoff::None => Ok(None),
            Cutoff::Auto => mass_radius(params, CUTOFF_MASS).map(Some),
            Cutoff::Radius(r) if r > 0.0 => Ok(Some(r)),
            Cutoff::Radius(r) => Err(Error::invalid(format!("cutoff radius must be positive, got {r}"))),
        }
    }
}

#[inline]
fn add_pair(acc: &mut f64, k: &ContourKernel, y: &Vec3, n: &UnitVector, ys: &Vec3, ns: &UnitVector) {
    *acc += k.eval_pose(y, n, ys, ns);
    *acc += k.eval_pose(y, n, ys, &UnitVector::new_unchecked(-ns.as_vec()));
}

/// Local coherence at every point of the set. Contributions from sources
/// farther than the cutoff radius are dropped; the summation order over
/// sources is the same with or without a cutoff.
pub fn compute_lfbc(set: &OrientedPointSet, params: &KernelParams, cutoff: Option<f64>) -> Result<LfbcProfile> {
    if set.points.is_empty() {
        return Err(Error::invalid("no fiber points to compute coherence on"));
    }
    let k = ContourKernel::new(*params)?;
    let n_tot = set.n_total() as f64;
    let (pts, tans) = (&set.points, &set.tangents);
    let values: Vec<f64> = match cutoff {
        None => (0..pts.len())
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..pts.len() {
                    add_pair(&mut acc, &k, &pts[i], &tans[i], &pts[j], &tans[j]);
                }
                acc / n_tot
            })
            .collect(),
        Some(r) => {
            let cell = |p: &Vec3| [(p.x / r).floor() as i64, (p.y / r).floor() as i64, (p.z / r).floor() as i64];
            let mut hash: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
            for (j, p) in pts.iter().enumerate() {
                hash.entry(cell(p)).or_default().push(j);
            }
            (0..pts.len())
                .into_par_iter()
                .map_init(Vec::new, |near, i| {
                    near.clear();
                    let c = cell(&pts[i]);
                    for d in 0..27 {
                        let key = [c[0] + d % 3 - 1, c[1] + (d / 3) % 3 - 1, c[2] + d / 9 - 1];
                        if let Some(v) = hash.get(&key) {
                            near.extend(v.iter().copied().filter(|&j| (pts[j] - pts[i]).norm() <= r));
                        }
                    }
                    near.sort_unstable();
                    let mut acc = 0.0;
                    for &j in near.iter() {
                        add_pair(&mut acc, &k, &pts[i], &tans[i], &pts[j], &tans[j]);
                    }
                    acc / n_tot
                })
                .collect()
        }
    };
    Ok(LfbcProfile {
        values,
        offsets: set.offsets.clone(),
    })
}

/// Smallest mean of `alpha` consecutive values, or the mean of all values
/// when there are fewer than `alpha`.
pub fn fbc_alpha(values: &[f64], alpha: usize) -> Result<f64> {
    if alpha == 0 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    if values.is_empty() {
        return Err(Error::invalid("fiber has no points"));
    }
    if values.len() <= alpha {
        return Ok(values.iter().sum::<f64>() / values.len() as f64);
    }
    let mut best = f64::INFINITY;
    for w in values.windows(alpha) {
        best = best.min(w.iter().sum::<f64>() / alpha as f64);
    }
    Ok(best)
}

/// Mean over fibers of each fiber's mean coherence.
pub fn afbc(profile: &LfbcProfile) -> f64 {
    let n = profile.n_fibers();
    (0..n)
        .map(|i| {
            let f = profile.fiber(i);
            f.iter().sum::<f64>() / f.len() as f64
        })
        .sum::<f64>()
        / n as f64
}

pub fn rfbc(fbc_alpha: &[f64], afbc: f64) -> Result<Vec<f64>> {
    if !(afbc > 0.0) {
        return Err(Error::Degenerate(format!("bundle has average coherence {afbc}")));
    }
    Ok(fbc_alpha.iter().map(|f| f / afbc).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberCoherence {
    /// Index into the input tractogram.
    pub index: usize,
    pub fbc_alpha: f64,
    pub rfbc: f64,
    /// True when the fiber had fewer points than the window.
    pub short_window: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfbcReport {
    pub fibers: Vec<FiberCoherence>,
    pub afbc: f64,
    pub eps_max: f64,
    pub alpha: usize,
    pub resample_step: f64,
    /// Cutoff radius actually used, in mm.
    pub cutoff_radius: Option<f64>,
    pub params: KernelParams,
    /// Streamlines left out for having zero length.
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbcSettings {
    pub params: KernelParams,
    pub alpha: usize,
    pub resample_step: f64,
    pub cutoff: Cutoff,
}

impl Default for FbcSettings {
    fn default() -> Self {
        Self {
            params: KernelParams {
                d33: 1.0,
                d44: 0.04,
                t: 1.4,
            },
            alpha: DEFAULT_ALPHA,
            resample_step: DEFAULT_RESAMPLE_STEP,
            cutoff: Cutoff::Auto,
        }
    }
}

pub fn report_from_profile(set: &OrientedPointSet, profile: &LfbcProfile, settings: &FbcSettings, cutoff_radius: Option<f64>) -> Result<RfbcReport> {
    let fa = (0..profile.n_fibers())
        .map(|i| fbc_alpha(profile.fiber(i), settings.alpha))
        .collect::<Result<Vec<_>>>()?;
    let a = afbc(profile);
    let r = rfbc(&fa, a)?;
    let fibers: Vec<FiberCoherence> = (0..fa.len())
        .map(|i| FiberCoherence {
            index: set.sources[i],
            fbc_alpha: fa[i],
            rfbc: r[i],
            short_window: profile.fiber(i).len() < settings.alpha,
        })
        .collect();
    let eps_max = r.iter().cloned().fold(0.0, f64::max);
    Ok(RfbcReport {
        fibers,
        afbc: a,
        eps_max,
        alpha: settings.alpha,
        resample_step: settings.resample_step,
        cutoff_radius,
        params: settings.params,
        skipped: set.skipped.clone(),
    })
}

/// Resampling, local coherence and the per-fiber scores in one call.
pub fn coherence(t: &Tractogram, settings: &FbcSettings) -> Result<RfbcReport> {
    settings.params.validate()?;
    let set = build_oriented_set(t, settings.resample_step)?;
    let radius = settings.cutoff.resolve(&settings.params)?;
    let profile = compute_lfbc(&set, &settings.params, radius)?;
    report_from_profile(&set, &profile, settings, radius)
}

/// Keeps the streamlines with RFBC at least `epsilon`, in their original
/// order. Streamlines without a score are dropped.
pub fn filter_tractogram(t: &Tractogram, report: &RfbcReport, epsilon: f64) -> Result<Tractogram> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("threshold must be nonnegative, got {epsilon}")));
    }
    if epsilon > report.eps_max {
        log::warn!("threshold {epsilon} exceeds the largest RFBC {}; nothing is kept", report.eps_max);
    }
    let mut streamlines = Vec::new();
    for f in &report.fibers {
        let s = t
            .streamlines
            .get(f.index)
            .ok_or_else(|| Error::invalid(format!("report refers to streamline {} of {}", f.index, t.len())))?;
        if f.rfbc >= epsilon {
            streamlines.push(s.clone());
        }
    }
    Ok(Tractogram {
        streamlines,
        provenance: t.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation, RigidMotion};
    use crate::phantom::{planted_outliers, OutlierShape};
    use crate::tracking::Streamline;
    use proptest::prelude::*;

    fn params() -> KernelParams {
        FbcSettings::default().params
    }

    fn line(a: Vec3, b: Vec3, n: usize) -> Streamline {
        Streamline::new((0..=n).map(|k| a + (b - a) * (k as f64 / n as f64)).collect(), 0)
    }

    fn brute_force(set: &OrientedPointSet, p: &KernelParams) -> Vec<f64> {
        let k = ContourKernel::new(*p).unwrap();
        let (pts, tans) = (set.points(), set.tangents());
        pts.iter()
            .zip(tans)
            .map(|(y, n)| {
                let mut acc = 0.0;
                for (ys, ns) in pts.iter().zip(tans) {
                    acc += k.eval_pose(y, n, ys, ns);
                    acc += k.eval_pose(y, n, ys, &UnitVector::new_unchecked(-ns.as_vec()));
                }
                acc / set.n_total() as f64
            })
            .collect()
    }

    #[test]
    fn straight_resampling() {
        let t = Tractogram::new(vec![line(Vec3::zeros(), Vec3::new(0.0, 10.0, 0.0), 3)]);
        let s = build_oriented_set(&t, 1.0).unwrap();
        let (p, n) = s.fiber(0);
        assert_eq!(p.len(), 11);
        assert!(n.iter().all(|n| n.angle_to(&UnitVector::EY) < 1e-12));
        assert!((p[10] - Vec3::new(0.0, 10.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn arc_tangents_are_second_order() {
        let r = 10.0;
        let arc = |m: usize| Streamline::new(
            (0..=m).map(|k| {
                let a = 1.5 * k as f64 / m as f64;
                Vec3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect(),
            0,
        );
        let err = |step: f64| {
            let s = build_oriented_set(&Tractogram::new(vec![arc(3000)]), step).unwrap();
            let (p, n) = s.fiber(0);
            (1..p.len() - 1)
                .map(|k| (n[k].as_vec().dot(&p[k]) / p[k].norm()).abs())
                .fold(0.0, f64::max)
        };
        // Symmetric chords of a circle are parallel to the tangent at their
        // midpoint, so only the polyline's own error remains.
        for step in [1.0, 0.5] {
            let e = err(step);
            assert!(e < 1e-4, "{e}");
        }
    }

    #[test]
    fn degenerate_streamlines_are_skipped() {
        let t = Tractogram::new(vec![
            Streamline::new(vec![Vec3::zeros()], 0),
            line(Vec3::zeros(), Vec3::x() * 3.0, 3),
            Streamline::new(vec![Vec3::x(), Vec3::x()], 2),
        ]);
        let s = build_oriented_set(&t, 1.0).unwrap();
        assert_eq!(s.sources(), &[1]);
        assert_eq!(s.skipped(), &[0, 2]);
    }

    #[test]
    fn single_point_self_contribution() {
        let t = Tractogram::new(vec![line(Vec3::zeros(), Vec3::z() * 1e-3, 1)]);
        let mut s = build_oriented_set(&t, 1.0).unwrap();
        s.points.truncate(1);
        s.tangents.truncate(1);
        s.offsets = vec![0, 1];
        let l = compute_lfbc(&s, &params(), None).unwrap();
        let k = ContourKernel::new(params()).unwrap();
        let n = UnitVector::EZ;
        let want = 0.5 * (k.eval(&Vec3::zeros(), &n) + k.eval(&Vec3::zeros(), &UnitVector::new_unchecked(-Vec3::z())));
        assert!((l.values()[0] - want).abs() < 1e-15 * want);
        assert!(want > 0.0);
    }

    #[test]
    fn duplication_leaves_lfbc_unchanged() {
        let b = planted_outliers(OutlierShape::Straight, 9, 1, 2).unwrap().tractogram;
        let mut twice = b.clone();
        twice.streamlines.extend(b.streamlines.clone());
        let one = compute_lfbc(&build_oriented_set(&b, 1.0).unwrap(), &params(), None).unwrap();
        let two = compute_lfbc(&build_oriented_set(&twice, 1.0).unwrap(), &params(), None).unwrap();
        for (i, v) in one.values().iter().enumerate() {
            assert!((two.values()[i] - v).abs() < 1e-12 * v);
        }
    }

    #[test]
    fn cutoff_matches_brute_force() {
        let b = planted_outliers(OutlierShape::Curved, 16, 3, 4).unwrap().tractogram;
        let set = build_oriented_set(&b, 1.0).unwrap();
        let exact = brute_force(&set, &params());
        let full = compute_lfbc(&set, &params(), None).unwrap();
        assert_eq!(full.values(), exact.as_slice());
        let huge = compute_lfbc(&set, &params(), Some(1e6)).unwrap();
        assert_eq!(huge.values(), exact.as_slice());
        let r = mass_radius(&params(), CUTOFF_MASS).unwrap();
        let cut = compute_lfbc(&set, &params(), Some(r)).unwrap();
        let scale = exact.iter().cloned().fold(0.0, f64::max);
        let err = cut.values().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4 * scale, "{err} vs {scale}");
    }

    #[test]
    fn mass_radius_grows_with_fraction() {
        let a = mass_radius(&params(), 0.9).unwrap();
        let b = mass_radius(&params(), 0.999).unwrap();
        assert!(a > 0.0 && b > a);
        let wide = KernelParams::new(1.0, 0.04, 3.0).unwrap();
        assert!(mass_radius(&wide, 0.999).unwrap() > b);
    }

    #[test]
    fn window_minimum() {
        assert_eq!(fbc_alpha(&[2.0; 10], 3).unwrap(), 2.0);
        let v = [5.0, 4.0, 1.0, 0.5, 3.0, 6.0, 6.0];
        assert_eq!(fbc_alpha(&v, v.len()).unwrap(), v.iter().sum::<f64>() / 7.0);
        // Exhaustive scan over all windows of length 2.
        let brute = (0..6).map(|a| (v[a] + v[a + 1]) / 2.0).fold(f64::INFINITY, f64::min);
        assert_eq!(fbc_alpha(&v, 2).unwrap(), brute);
        assert_eq!(fbc_alpha(&[1.0, 3.0], 7).unwrap(), 2.0);
        assert!(fbc_alpha(&v, 0).is_err());
    }

    #[test]
    fn average_coherence() {
        let p = LfbcProfile::from_fibers(&[vec![1.0, 3.0], vec![4.0, 4.0, 7.0]]);
        assert_eq!(afbc(&p), (2.0 + 5.0) / 2.0);
        let single = LfbcProfile::from_fibers(&[vec![1.0, 2.0, 6.0]]);
        assert_eq!(afbc(&single), 3.0);
        assert!(rfbc(&[1.0], 0.0).is_err());
    }

    fn report(values: &[Vec<f64>]) -> RfbcReport {
        let profile = LfbcProfile::from_fibers(values);
        let t = Tractogram::new(
            (0..values.len()).map(|i| line(Vec3::zeros(), Vec3::x() * (i + 1) as f64, 2)).collect(),
        );
        let set = build_oriented_set(&t, 1.0).unwrap();
        let settings = FbcSettings {
            alpha: 2,
            ..FbcSettings::default()
        };
        report_from_profile(&set, &profile, &settings, None).unwrap()
    }

    #[test]
    fn uniform_bundle_has_unit_rfbc() {
        let r = report(&[vec![2.0; 5], vec![2.0; 5], vec![2.0; 5]]);
        assert!(r.fibers.iter().all(|f| (f.rfbc - 1.0).abs() < 1e-15));
    }

    #[test]
    fn filter_thresholds() {
        let values = vec![vec![2.0; 4], vec![2.0, 0.5, 0.5, 2.0], vec![3.0; 4], vec![1.5; 4]];
        let r = report(&values);
        let t = Tractogram::new((0..4).map(|i| line(Vec3::zeros(), Vec3::y() * (i + 1) as f64, 2)).collect());
        assert_eq!(filter_tractogram(&t, &r, 0.0).unwrap(), t);
        let min = r.fibers.iter().map(|f| f.rfbc).fold(f64::INFINITY, f64::min);
        let kept = filter_tractogram(&t, &r, min * (1.0 + 1e-9)).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(!kept.streamlines.contains(&t.streamlines[1]));
        assert!(filter_tractogram(&t, &r, r.eps_max * 2.0).unwrap().is_empty());
        assert!(filter_tractogram(&t, &r, -1.0).is_err());
        // Scaling the coherence leaves the relative scores alone.
        let scaled = report(&values.iter().map(|v| v.iter().map(|x| x * 7.5).collect()).collect::<Vec<_>>());
        for (a, b) in r.fibers.iter().zip(&scaled.fibers) {
            assert!((a.rfbc - b.rfbc).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn filter_is_monotone(vals in prop::collection::vec(prop::collection::vec(0.01f64..10.0, 3..8), 2..8), e1 in 0.0f64..1.5, e2 in 0.0f64..1.5) {
            let r = report(&vals);
            let t = Tractogram::new((0..vals.len()).map(|i| line(Vec3::zeros(), Vec3::z() * (i + 1) as f64, 2)).collect());
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let wide = filter_tractogram(&t, &r, lo).unwrap();
            let narrow = filter_tractogram(&t, &r, hi).unwrap();
            prop_assert!(narrow.streamlines.iter().all(|s| wide.streamlines.contains(s)));
        }
    }

    #[test]
    fn outliers_are_least_coherent() {
        let b = planted_outliers(OutlierShape::Straight, 25, 3, 8).unwrap();
        let settings = FbcSettings::default();
        let r = coherence(&b.tractogram, &settings).unwrap();
        let mut order: Vec<usize> = (0..r.fibers.len()).collect();
        order.sort_by(|&a, &c| r.fibers[a].rfbc.total_cmp(&r.fibers[c].rfbc));
        let mut lowest: Vec<usize> = order[..3].iter().map(|&i| r.fibers[i].index).collect();
        lowest.sort_unstable();
        assert_eq!(lowest, b.outliers);
    }

    #[test]
    fn rigid_motion_and_reversal_invariance() {
        let b = planted_outliers(OutlierShape::Curved, 9, 2, 1).unwrap().tractogram;
        let settings = FbcSettings::default();
        let base = coherence(&b, &settings).unwrap();
        let g = RigidMotion::new(
            Vec3::new(3.0, -7.0, 11.0),
            Rotation::about_axis(&UnitVector::from_xyz(0.3, 1.0, -0.4).unwrap(), 1.1),
        );
        let mut moved = b.clone();
        let mut reversed = b.clone();
        for s in moved.streamlines.iter_mut() {
            s.points.iter_mut().for_each(|p| *p = g.apply_point(p));
        }
        for s in reversed.streamlines.iter_mut() {
            s.points.reverse();
        }
        let set = build_oriented_set(&b, 1.0).unwrap();
        let l0 = compute_lfbc(&set, &settings.params, None).unwrap();
        let l1 = compute_lfbc(&build_oriented_set(&moved, 1.0).unwrap(), &settings.params, None).unwrap();
        for (a, c) in l0.values().iter().zip(l1.values()) {
            assert!((a - c).abs() < 1e-6 * a.abs().max(1e-300), "{a} {c}");
        }
        let rev = coherence(&reversed, &settings).unwrap();
        for (a, c) in base.fibers.iter().zip(&rev.fibers) {
            assert!((a.fbc_alpha - c.fbc_alpha).abs() < 1e-9 * a.fbc_alpha);
            assert!((a.rfbc - c.rfbc).abs() < 1e-9);
        }
    }
}
