//! Deterministic and probabilistic streamline tracking on FOD fields.

mod seeds;

pub use seeds::{seed_points, Seeds};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fodfield::{refine_peak, FodField, PeakFinder, PeakThreshold};
use crate::geometry::sh::{basis_row, dot, n_coeffs};
use crate::geometry::tessellation::{tessellate_sphere, OrientationSet};
use crate::geometry::{UnitVector, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingParams {
    /// mm; `None` means a tenth of the smallest voxel dimension.
    pub step_size: Option<f64>,
    /// Termination threshold as a fraction of the largest amplitude in the field.
    pub cutoff_fraction: f64,
    /// Initial directions must reach this fraction of the seed point's largest amplitude.
    pub init_cutoff: f64,
    /// mm, probabilistic tracking only.
    pub min_radius_of_curvature: f64,
    /// mm.
    pub min_length: f64,
    /// Steps per direction before a streamline is cut.
    pub max_steps: usize,
    pub rng_seed: u64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            step_size: None,
            cutoff_fraction: 0.1,
            init_cutoff: 0.9,
            min_radius_of_curvature: 1.0,
            min_length: 2.0,
            max_steps: 10_000,
            rng_seed: 0,
        }
    }
}

impl TrackingParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("step size must be positive, got {s}")));
            }
        }
        for (name, v) in [("cutoff_fraction", self.cutoff_fraction), ("init_cutoff", self.init_cutoff)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.min_radius_of_curvature > 0.0) {
            return Err(Error::invalid("minimal radius of curvature must be positive"));
        }
        if !(self.min_length >= 0.0) {
            return Err(Error::invalid("minimal length must be nonnegative"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be positive"));
        }
        Ok(())
    }

    pub fn step(&self, field: &FodField) -> f64 {
        self.step_size
            .unwrap_or_else(|| field.voxel_size().iter().cloned().fold(f64::INFINITY, f64::min) / 10.0)
    }

    /// Largest turning angle per step allowed by the curvature bound.
    pub fn max_turn(&self, step: f64) -> f64 {
        2.0 * (step / (2.0 * self.min_radius_of_curvature)).min(1.0).asin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    pub points: Vec<Vec3>,
    pub seed_index: usize,
}

impl Streamline {
    pub fn new(points: Vec<Vec3>, seed_index: usize) -> Self {
        Self { points, seed_index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn segment_lengths(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).collect()
    }

    pub fn length(&self) -> f64 {
        self.segment_lengths().iter().sum()
    }

    pub fn reversed(&self) -> Streamline {
        let mut points = self.points.clone();
        points.reverse();
        Streamline {
            points,
            seed_index: self.seed_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: String,
    pub params: TrackingParams,
    pub field: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tractogram {
    pub streamlines: Vec<Streamline>,
    pub provenance: Option<Provenance>,
}

impl Tractogram {
    pub fn new(streamlines: Vec<Streamline>) -> Self {
        Self {
            streamlines,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }
}

/// Counts of what happened to the seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub seeds: usize,
    pub emitted: usize,
    /// Seeds where no initial direction passed the initial cutoff.
    pub no_direction: usize,
    pub too_short: usize,
    pub missed_target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackingMode {
    Deterministic,
    Probabilistic,
}

/// Read-only state shared by all streamlines.
struct Tracker<'a> {
    field: &'a FodField,
    params: TrackingParams,
    step: f64,
    cutoff: f64,
    finder: PeakFinder,
    /// Candidate directions for probabilistic steps.
    fine: OrientationSet,
    mask: Option<&'a [bool]>,
}

impl<'a> Tracker<'a> {
    fn new(field: &'a FodField, params: TrackingParams, mask: Option<&'a [bool]>) -> Result<Self> {
        params.validate()?;
        if let Some(m) = mask {
            if m.len() != field.n_voxels() {
                return Err(Error::invalid("tracking mask does not match the field"));
            }
        }
        let finder = PeakFinder::new(field.sh_order(), &tessellate_sphere(3)?)?;
        let global_max = (0..field.n_voxels())
            .into_par_iter()
            .map(|i| finder.half_amplitudes(field.coeffs(i)).into_iter().fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max);
        Ok(Self {
            field,
            params,
            step: params.step(field),
            cutoff: params.cutoff_fraction * global_max,
            finder,
            fine: tessellate_sphere(4)?,
            mask,
        })
    }

    fn inside(&self, p: &Vec3) -> bool {
        match self.field.grid().voxel_of(p) {
            None => false,
            Some(v) => self.mask.is_none_or(|m| m[self.field.grid().index(v)]),
        }
    }

    fn coeffs_at(&self, p: &Vec3) -> Vec<f64> {
        let mut c = vec![0.0; n_coeffs(self.field.sh_order())];
        self.field.interpolate(p, &mut c);
        c
    }

    fn amplitude(&self, c: &[f64], n: &UnitVector) -> f64 {
        let mut row = vec![0.0; c.len()];
        basis_row(self.field.sh_order(), n, &mut row);
        dot(&row, c)
    }

    /// Random direction whose amplitude reaches `init_cutoff` of the
    /// point's largest amplitude.
    fn initial_direction(&self, p: &Vec3, rng: &mut ChaCha8Rng) -> Option<UnitVector> {
        let c = self.coeffs_at(p);
        let max = self.finder.half_amplitudes(&c).into_iter().fold(0.0, f64::max);
        if !(max > 0.0) || max < self.cutoff {
            return None;
        }
        for _ in 0..10_000 {
            let v = Vec3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            );
            let Ok(n) = UnitVector::new(v) else { continue };
            if self.amplitude(&c, &n) >= self.params.init_cutoff * max {
                return Some(n);
            }
        }
        None
    }

    /// The local maximum most aligned with `incoming`, signed to agree with it.
    fn deterministic_step(&self, c: &[f64], incoming: &UnitVector) -> Option<(UnitVector, f64)> {
        let peaks = self.finder.find(c, PeakThreshold::Absolute(0.0));
        let best = peaks
            .iter()
            .max_by(|a, b| a.direction.dot(incoming).abs().total_cmp(&b.direction.dot(incoming).abs()))?;
        let start = if best.direction.dot(incoming) < 0.0 { -best.direction } else { best.direction };
        let refined = refine_peak(c, self.field.sh_order(), &start, 0.05, 1e-4);
        let mut d = refined.direction;
        if d.dot(incoming) < 0.0 {
            d = -d;
        }
        Some((d, refined.amplitude))
    }

    /// Direction drawn from the FOD within the curvature cone around `incoming`.
    fn probabilistic_step(&self, c: &[f64], incoming: &UnitVector, rng: &mut ChaCha8Rng) -> Option<(UnitVector, f64)> {
        let cos_max = self.params.max_turn(self.step).cos();
        let candidates: Vec<(UnitVector, f64)> = self
            .fine
            .directions()
            .iter()
            .filter(|d| d.dot(incoming) >= cos_max)
            .map(|d| (*d, self.amplitude(c, d).max(0.0)))
            .collect();
        let top = candidates.iter().map(|(_, a)| *a).fold(0.0, f64::max);
        if candidates.is_empty() || !(top > 0.0) {
            return None;
        }
        for _ in 0..500 {
            let (d, a) = candidates[rng.random_range(0..candidates.len())];
            if rng.random::<f64>() * top < a {
                return Some((d, a));
            }
        }
        None
    }

    /// Points visited from `start` along `dir`, excluding `start`.
    fn propagate(&self, start: Vec3, dir: UnitVector, mode: TrackingMode, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let mut out = Vec::new();
        let mut p = start;
        let mut incoming = dir;
        for k in 0..self.params.max_steps {
            let c = self.coeffs_at(&p);
            let next = if k == 0 && mode == TrackingMode::Probabilistic {
                // The initial direction was already drawn from the FOD.
                Some((incoming, self.amplitude(&c, &incoming)))
            } else {
                match mode {
                    TrackingMode::Deterministic => self.deterministic_step(&c, &incoming),
                    TrackingMode::Probabilistic => self.probabilistic_step(&c, &incoming, rng),
                }
            };
            let Some((d, amp)) = next else { break };
            if amp < self.cutoff || !(amp > 0.0) {
                break;
            }
            let q = p + d.as_vec() * self.step;
            if !self.inside(&q) {
                break;
            }
            out.push(q);
            p = q;
            incoming = d;
        }
        out
    }

    fn track_seed(&self, index: usize, seed: &Vec3, mode: TrackingMode) -> std::result::Result<Streamline, Outcome> {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(self.params.rng_seed);
            r.set_stream(3 * index as u64 + k);
            r
        };
        if !self.inside(seed) {
            return Err(Outcome::NoDirection);
        }
        let dir = self.initial_direction(seed, &mut stream(0)).ok_or(Outcome::NoDirection)?;
        let forward = self.propagate(*seed, dir, mode, &mut stream(1));
        let backward = self.propagate(*seed, -dir, mode, &mut stream(2));
        let mut points: Vec<Vec3> = backward.into_iter().rev().collect();
        points.push(*seed);
        points.extend(forward);
        let s = Streamline::new(points, index);
        if s.len() < 2 || s.length() < self.params.min_length {
            return Err(Outcome::TooShort);
        }
        Ok(s)
    }
}

enum Outcome {
    NoDirection,
    TooShort,
}

/// Tracks from every seed point; streamlines are ordered by seed.
pub fn track(
    field: &FodField,
    seeds: &[Vec3],
    mode: TrackingMode,
    params: TrackingParams,
    mask: Option<&[bool]>,
    target: Option<&[[usize; 3]]>,
) -> Result<(Tractogram, TrackingReport)> {
    if seeds.is_empty() || !seeds.iter().any(|s| field.grid().contains_point(s)) {
        return Err(Error::invalid("no seed point lies inside the volume"));
    }
    let target_mask = match target {
        None => None,
        Some(t) => {
            let grid = field.grid();
            let mut m = vec![false; grid.n_voxels()];
            let mut any = false;
            for v in t {
                if grid.contains_voxel(v.map(|c| c as i64)) {
                    m[grid.index(*v)] = true;
                    any = true;
                }
            }
            if !any {
                return Err(Error::invalid("target region lies outside the volume"));
            }
            Some(m)
        }
    };
    let tracker = Tracker::new(field, params, mask)?;
    let results: Vec<_> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, s)| tracker.track_seed(i, s, mode))
        .collect();
    let mut report = TrackingReport {
        seeds: seeds.len(),
        ..TrackingReport::default()
    };
    let mut streamlines = Vec::new();
    for r in results {
        match r {
            Err(Outcome::NoDirection) => report.no_direction += 1,
            Err(Outcome::TooShort) => report.too_short += 1,
            Ok(s) => {
                let hits = target_mask.as_ref().is_none_or(|m| {
                    s.points
                        .iter()
                        .any(|p| field.grid().voxel_of(p).is_some_and(|v| m[field.grid().index(v)]))
                });
                if hits {
                    streamlines.push(s);
                } else {
                    report.missed_target += 1;
                }
            }
        }
    }
    report.emitted = streamlines.len();
    if streamlines.is_empty() {
        log::warn!("tracking produced no streamlines from {} seeds", seeds.len());
    }
    let tractogram = Tractogram {
        streamlines,
        provenance: Some(Provenance {
            mode: match mode {
                TrackingMode::Deterministic => "det".into(),
                TrackingMode::Probabilistic => "prob".into(),
            },
            params,
            field: String::new(),
        }),
    };
    Ok((tractogram, report))
}

pub fn track_deterministic(field: &FodField, seeds: &[Vec3], params: TrackingParams) -> Result<(Tractogram, TrackingReport)> {
    track(field, seeds, TrackingMode::Deterministic, params, None, None)
}

pub fn track_probabilistic(
    field: &FodField,
    seeds: &[Vec3],
    target: Option<&[[usize; 3]]>,
    params: TrackingParams,
) -> Result<(Tractogram, TrackingReport)> {
    track(field, seeds, TrackingMode::Probabilistic, params, None, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fodfield::Grid;
    use crate::geometry::sh::index;

    /// Field whose every voxel holds the same smooth lobe along each axis.
    fn uniform_field(dims: [usize; 3], axes: &[UnitVector]) -> FodField {
        let grid = Grid::new(dims, [1.0; 3]).unwrap();
        let mut c = vec![0.0; n_coeffs(8)];
        let mut row = vec![0.0; n_coeffs(8)];
        for a in axes {
            basis_row(8, a, &mut row);
            for l in (0..=8u32).step_by(2) {
                let g = (-0.03 * (l * (l + 1)) as f64).exp();
                for m in -(l as i32)..=l as i32 {
                    c[index(l, m)] += g * row[index(l, m)];
                }
            }
        }
        let mut f = FodField::zeros(grid, 8).unwrap();
        for i in 0..f.n_voxels() {
            f.coeffs_mut(i).copy_from_slice(&c);
        }
        f
    }

    #[test]
    fn straight_field_gives_straight_track() {
        let f = uniform_field([20, 5, 5], &[UnitVector::EX]);
        let (t, rep) = track_deterministic(&f, &[Vec3::new(10.0, 2.0, 2.0)], TrackingParams::default()).unwrap();
        assert_eq!(rep.emitted, 1);
        let s = &t.streamlines[0];
        let xs: Vec<f64> = s.points.iter().map(|p| p.x).collect();
        let lo = xs.iter().cloned().fold(f64::MAX, f64::min);
        let hi = xs.iter().cloned().fold(f64::MIN, f64::max);
        assert!(lo < 0.0 && hi > 18.9, "{lo} {hi}");
        for p in &s.points {
            assert!((p.y - 2.0).abs() < 1.0 && (p.z - 2.0).abs() < 1.0);
        }
        for d in s.segment_lengths() {
            assert!((d - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_field_emits_nothing() {
        let mut f = uniform_field([5, 5, 5], &[UnitVector::EX]);
        f.coeffs_mut(62).iter_mut().for_each(|c| *c = 0.0);
        let (t, rep) = track_deterministic(&f, &[Vec3::new(2.0, 2.0, 2.0)], TrackingParams::default()).unwrap();
        assert!(t.is_empty());
        assert_eq!(rep.no_direction, 1);
    }

    #[test]
    fn seeds_outside_rejected() {
        let f = uniform_field([5, 5, 5], &[UnitVector::EX]);
        assert!(track_deterministic(&f, &[Vec3::new(50.0, 2.0, 2.0)], TrackingParams::default()).is_err());
    }

    #[test]
    fn crossing_keeps_direction() {
        let f = uniform_field([15, 15, 3], &[UnitVector::EX, UnitVector::EY]);
        let seeds = [Vec3::new(7.0, 7.0, 1.0), Vec3::new(3.0, 7.0, 1.0)];
        let (t, _) = track_deterministic(&f, &seeds, TrackingParams::default()).unwrap();
        for s in &t.streamlines {
            let first = s.points[1] - s.points[0];
            let last = s.points[s.len() - 1] - s.points[s.len() - 2];
            assert!(first.angle(&last).to_degrees() < 15.0);
        }
    }

    #[test]
    fn turning_angle_formula() {
        let p = TrackingParams::default();
        assert!((p.max_turn(0.2).to_degrees() - 11.478).abs() < 1e-3);
    }

    #[test]
    fn probabilistic_respects_curvature_and_is_reproducible() {
        let f = uniform_field([12, 12, 4], &[UnitVector::EX, UnitVector::from_xyz(1.0, 1.0, 0.0).unwrap()]);
        let seeds: Vec<Vec3> = (0..6).map(|i| Vec3::new(3.0 + i as f64, 5.0, 1.5)).collect();
        let params = TrackingParams {
            step_size: Some(0.2),
            rng_seed: 42,
            ..TrackingParams::default()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| track_probabilistic(&f, &seeds, None, params).unwrap().0)
        };
        let a = run(1);
        assert_eq!(a, run(3));
        assert!(!a.is_empty());
        let limit = params.max_turn(0.2) + 1e-9;
        for s in &a.streamlines {
            assert!(s.length() >= params.min_length);
            for w in s.points.windows(3) {
                assert!((w[1] - w[0]).angle(&(w[2] - w[1])) <= limit);
            }
        }
    }

    #[test]
    fn sharp_field_probabilistic_matches_deterministic() {
        let f = uniform_field([20, 5, 5], &[UnitVector::EX]);
        let seeds = [Vec3::new(10.0, 2.0, 2.0)];
        let params = TrackingParams {
            rng_seed: 7,
            ..TrackingParams::default()
        };
        let (d, _) = track_deterministic(&f, &seeds, params).unwrap();
        let (p, _) = track_probabilistic(&f, &seeds, None, params).unwrap();
        let line = |s: &Streamline| s.points.iter().map(|q| (q.y - 2.0).powi(2) + (q.z - 2.0).powi(2)).sum::<f64>() / s.len() as f64;
        assert!(line(&d.streamlines[0]).sqrt() < 2.0);
        assert!(line(&p.streamlines[0]).sqrt() < 2.0);
    }

    #[test]
    fn target_filters_streamlines() {
        let f = uniform_field([20, 5, 5], &[UnitVector::EX]);
        let seeds = [Vec3::new(10.0, 2.0, 2.0)];
        let end_slab: Vec<[usize; 3]> = (0..25).map(|k| [0, k % 5, k / 5]).collect();
        let hit = track_probabilistic(&f, &seeds, Some(&end_slab), TrackingParams::default()).unwrap();
        assert_eq!(hit.0.len(), 1);
        let miss = track_probabilistic(&f, &seeds, Some(&[[10, 0, 0]]), TrackingParams::default()).unwrap();
        assert_eq!(miss.1.missed_target, 1);
        assert!(track_probabilistic(&f, &seeds, Some(&[[40, 0, 0]]), TrackingParams::default()).is_err());
    }

    #[test]
    fn scaling_the_field_does_not_change_deterministic_tracks() {
        let f = uniform_field([12, 12, 4], &[UnitVector::EX, UnitVector::from_xyz(1.0, 1.0, 0.0).unwrap()]);
        let seeds: Vec<Vec3> = (0..4).map(|i| Vec3::new(3.0 + i as f64, 5.0, 1.5)).collect();
        let a = track_deterministic(&f, &seeds, TrackingParams::default()).unwrap().0;
        for scale in [8.0, 37.0, 1e-3] {
            let mut g = f.clone();
            g.scale(scale);
            let b = track_deterministic(&g, &seeds, TrackingParams::default()).unwrap().0;
            assert_eq!(a.len(), b.len());
            for (x, y) in a.streamlines.iter().zip(&b.streamlines) {
                assert_eq!(x.len(), y.len());
                for (p, q) in x.points.iter().zip(&y.points) {
                    assert!((p - q).norm() < 1e-9);
                }
            }
        }
    }
}
