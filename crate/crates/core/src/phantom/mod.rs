//! Synthetic phantoms: multi-tensor DWI with ground truth, and streamline
//! bundles with planted outliers.

mod bundles;

pub use bundles::{planted_outliers, OutlierBundle, OutlierShape};

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csd::{DwiSignal, Gradient};
use crate::error::{Error, Result};
use crate::evaluate::{BundleTruth, GroundTruth, TruthVoxel};
use crate::fodfield::Grid;
use crate::geometry::{UnitVector, Vec3};

/// Default single-fiber eigenvalues, mm²/s.
pub const WHITE_MATTER_EIGENVALUES: [f64; 3] = [1.7e-3, 0.2e-3, 0.2e-3];
/// Diffusivity of the isotropic compartment filling the rest of each voxel.
pub const FREE_WATER: f64 = 3.0e-3;
/// Smallest volume fraction for which a bundle counts as present in a voxel.
pub const MIN_FRACTION: f64 = 0.25;
/// Subsamples per axis used to estimate volume fractions.
const SUBSAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Curve {
    Line {
        start: [f64; 3],
        end: [f64; 3],
    },
    /// `center + radius (cos φ u + sin φ v)` for φ in `[0, sweep]`.
    Arc {
        center: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        radius: f64,
        sweep: f64,
    },
}

/// Closest point of a curve to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Closest {
    /// Arc length of the closest point.
    pub s: f64,
    pub tangent: UnitVector,
    pub distance: f64,
    /// False when the closest point is an end point reached from beyond it.
    pub interior: bool,
}

impl Curve {
    fn validate(&self) -> Result<()> {
        match self {
            Curve::Line { start, end } => {
                if Vec3::from(*start) == Vec3::from(*end) {
                    return Err(Error::invalid("line has zero length"));
                }
            }
            Curve::Arc { u, v, radius, sweep, .. } => {
                let (u, v) = (Vec3::from(*u), Vec3::from(*v));
                if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(&v).abs() > 1e-9 {
                    return Err(Error::invalid("arc frame must be orthonormal"));
                }
                if !(*radius > 0.0 && *sweep > 0.0 && *sweep < 2.0 * std::f64::consts::PI) {
                    return Err(Error::invalid("arc radius and sweep must be positive, sweep below 2π"));
                }
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        match self {
            Curve::Line { start, end } => (Vec3::from(*end) - Vec3::from(*start)).norm(),
            Curve::Arc { radius, sweep, .. } => radius * sweep,
        }
    }

    pub fn point(&self, s: f64) -> Vec3 {
        match self {
            Curve::Line { start, end } => {
                let (a, b) = (Vec3::from(*start), Vec3::from(*end));
                a + (b - a) * (s / (b - a).norm())
            }
            Curve::Arc { center, u, v, radius, .. } => {
                let phi = s / radius;
                Vec3::from(*center) + (Vec3::from(*u) * phi.cos() + Vec3::from(*v) * phi.sin()) * *radius
            }
        }
    }

    pub fn tangent(&self, s: f64) -> UnitVector {
        let t = match self {
            Curve::Line { start, end } => Vec3::from(*end) - Vec3::from(*start),
            Curve::Arc { u, v, radius, .. } => {
                let phi = s / radius;
                Vec3::from(*v) * phi.cos() - Vec3::from(*u) * phi.sin()
            }
        };
        UnitVector::new_unchecked(t.normalize())
    }

    pub fn closest(&self, p: &Vec3) -> Closest {
        let at = |s: f64, interior: bool| Closest {
            s,
            tangent: self.tangent(s),
            distance: (self.point(s) - p).norm(),
            interior,
        };
        match self {
            Curve::Line { start, end } => {
                let (a, b) = (Vec3::from(*start), Vec3::from(*end));
                let len = (b - a).norm();
                let s = (p - a).dot(&(b - a)) / len;
                at(s.clamp(0.0, len), (0.0..=len).contains(&s))
            }
            Curve::Arc { center, u, v, radius, sweep } => {
                let q = p - Vec3::from(*center);
                let mut phi = q.dot(&Vec3::from(*v)).atan2(q.dot(&Vec3::from(*u)));
                if phi < 0.0 {
                    phi += 2.0 * std::f64::consts::PI;
                }
                if phi <= *sweep {
                    at(phi * radius, true)
                } else {
                    let (a, b) = (at(0.0, false), at(sweep * radius, false));
                    if a.distance <= b.distance {
                        a
                    } else {
                        b
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bundle {
    pub name: String,
    pub centerline: Curve,
    /// mm.
    pub radius: f64,
    /// mm²/s, along the fiber first.
    pub eigenvalues: [f64; 3],
    /// Arc-length interval (mm) that produces no signal but stays in the ground truth.
    #[serde(default)]
    pub gap: Option<[f64; 2]>,
}

impl Bundle {
    pub fn new(name: &str, centerline: Curve, radius: f64) -> Self {
        Self {
            name: name.into(),
            centerline,
            radius,
            eigenvalues: WHITE_MATTER_EIGENVALUES,
            gap: None,
        }
    }

    fn tensor(&self, t: &UnitVector) -> Matrix3<f64> {
        let t = t.as_vec();
        let helper = if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e2 = t.cross(&helper).normalize();
        let e3 = t.cross(&e2);
        let [l1, l2, l3] = self.eigenvalues;
        t * t.transpose() * l1 + e2 * e2.transpose() * l2 + e3 * e3.transpose() * l3
    }

    fn in_gap(&self, s: f64) -> bool {
        self.gap.is_some_and(|[a, b]| s >= a && s <= b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub bundles: Vec<Bundle>,
    pub gradients: Vec<Gradient>,
    /// `None` for noise-free data.
    pub snr: Option<f64>,
    pub seed: u64,
}

impl PhantomSpec {
    fn validate(&self) -> Result<Grid> {
        let grid = Grid::new(self.dims, self.voxel_size)?;
        for b in &self.bundles {
            b.centerline.validate()?;
            if !(b.radius > 0.0) {
                return Err(Error::invalid(format!("bundle {} radius must be positive", b.name)));
            }
            if b.eigenvalues.iter().any(|e| !(*e > 0.0)) {
                return Err(Error::invalid(format!("bundle {} eigenvalues must be positive", b.name)));
            }
        }
        if let Some(s) = self.snr {
            if !(s > 0.0) {
                return Err(Error::invalid(format!("SNR must be positive, got {s}")));
            }
        }
        if self.gradients.is_empty() {
            return Err(Error::invalid("phantom needs at least one gradient"));
        }
        Ok(grid)
    }
}

/// Uniformly spread directions on the upper hemisphere (Fibonacci lattice).
pub fn fibonacci_hemisphere(n: usize) -> Vec<UnitVector> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            UnitVector::new_unchecked(Vec3::new(r * phi.cos(), r * phi.sin(), z))
        })
        .collect()
}

pub fn single_shell(b: f64, n_dirs: usize) -> Vec<Gradient> {
    fibonacci_hemisphere(n_dirs)
        .into_iter()
        .map(|direction| Gradient { direction, b })
        .collect()
}

/// Per-bundle occupancy of one voxel.
#[derive(Debug, Clone, Copy)]
struct Occupancy {
    /// Fraction of the voxel inside the bundle.
    fraction: f64,
    /// Same, excluding the gap.
    signal_fraction: f64,
    tangent: UnitVector,
    s: f64,
}

fn occupancy(grid: &Grid, v: [usize; 3], bundle: &Bundle) -> Occupancy {
    let c = grid.center(v);
    let mut inside = 0;
    let mut signal = 0;
    let n = SUBSAMPLES;
    for i in 0..n * n * n {
        let o = [i % n, (i / n) % n, i / (n * n)];
        let p = Vec3::new(
            c.x + ((o[0] as f64 + 0.5) / n as f64 - 0.5) * grid.voxel_size[0],
            c.y + ((o[1] as f64 + 0.5) / n as f64 - 0.5) * grid.voxel_size[1],
            c.z + ((o[2] as f64 + 0.5) / n as f64 - 0.5) * grid.voxel_size[2],
        );
        let q = bundle.centerline.closest(&p);
        if q.interior && q.distance <= bundle.radius {
            inside += 1;
            if !bundle.in_gap(q.s) {
                signal += 1;
            }
        }
    }
    let total = (n * n * n) as f64;
    let centre = bundle.centerline.closest(&c);
    Occupancy {
        fraction: inside as f64 / total,
        signal_fraction: signal as f64 / total,
        tangent: centre.tangent,
        s: centre.s,
    }
}

fn rician(s: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    let a = s + n.sample(rng);
    let b = n.sample(rng);
    (a * a + b * b).sqrt()
}

/// Simulates the DWI of a phantom and its ground truth.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(DwiSignal, GroundTruth)> {
    let grid = spec.validate()?;
    let lo = Vec3::from(grid.voxel_size) * -0.5;
    let hi = grid.center(grid.dims.map(|d| d - 1)) + Vec3::from(grid.voxel_size) * 0.5;
    for b in &spec.bundles {
        let len = b.centerline.length();
        let outside = (0..=20).map(|k| b.centerline.point(len * k as f64 / 20.0)).any(|p| {
            (0..3).any(|a| p[a] < lo[a] || p[a] > hi[a])
        });
        if outside {
            log::warn!("bundle {} leaves the volume and is truncated", b.name);
        }
    }
    let nv = grid.n_voxels();
    let occ: Vec<Vec<Occupancy>> = (0..nv)
        .into_par_iter()
        .map(|i| spec.bundles.iter().map(|b| occupancy(&grid, grid.voxel(i), b)).collect())
        .collect();

    let ng = spec.gradients.len();
    let per_voxel: Vec<(f64, Vec<f64>)> = (0..nv)
        .into_par_iter()
        .map(|i| {
            let total: f64 = occ[i].iter().map(|o| o.signal_fraction).sum();
            let norm = total.max(1.0);
            let tensors: Vec<(f64, Matrix3<f64>)> = occ[i]
                .iter()
                .zip(&spec.bundles)
                .filter(|(o, _)| o.signal_fraction > 0.0)
                .map(|(o, b)| (o.signal_fraction / norm, b.tensor(&o.tangent)))
                .collect();
            let water = 1.0 - tensors.iter().map(|(w, _)| w).sum::<f64>();
            let mut signal: Vec<f64> = spec
                .gradients
                .iter()
                .map(|g| {
                    let n = g.direction.as_vec();
                    let fibers: f64 = tensors
                        .iter()
                        .map(|(w, d)| w * (-g.b * (n.transpose() * d * n)[0]).exp())
                        .sum();
                    fibers + water * (-g.b * FREE_WATER).exp()
                })
                .collect();
            let mut b0 = 1.0;
            if let Some(snr) = spec.snr {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i as u64);
                let sigma = 1.0 / snr;
                b0 = rician(b0, sigma, &mut rng);
                for s in signal.iter_mut() {
                    *s = rician(*s, sigma, &mut rng);
                }
            }
            (b0, signal)
        })
        .collect();
    let mut volumes = vec![0.0; ng * nv];
    let mut b0 = vec![0.0; nv];
    for (i, (v0, s)) in per_voxel.into_iter().enumerate() {
        b0[i] = v0;
        for (g, x) in s.into_iter().enumerate() {
            volumes[g * nv + i] = x;
        }
    }
    let dwi = DwiSignal::new(grid, spec.gradients.clone(), volumes, b0)?;

    let mut truth = Vec::new();
    for (i, o) in occ.iter().enumerate() {
        let peaks: Vec<UnitVector> = o
            .iter()
            .filter(|o| o.fraction >= MIN_FRACTION)
            .map(|o| o.tangent)
            .collect();
        if !peaks.is_empty() {
            truth.push(TruthVoxel {
                voxel: grid.voxel(i),
                peaks,
            });
        }
    }
    let cap = grid.voxel_size.iter().cloned().fold(0.0, f64::max) * 2.0;
    let bundles = spec
        .bundles
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let members: Vec<(usize, f64)> = (0..nv)
                .filter(|&i| occ[i][k].fraction >= MIN_FRACTION)
                .map(|i| (i, occ[i][k].s))
                .collect();
            let s_min = members.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
            let s_max = members.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
            let pick = |f: &dyn Fn(f64) -> bool| -> Vec<[usize; 3]> {
                members.iter().filter(|m| f(m.1)).map(|m| grid.voxel(m.0)).collect()
            };
            BundleTruth {
                name: b.name.clone(),
                voxels: pick(&|_| true),
                roi_start: pick(&|s| s < s_min + cap),
                roi_end: pick(&|s| s > s_max - cap),
                gap_voxels: pick(&|s| b.in_gap(s)),
            }
        })
        .collect();
    let gt = GroundTruth {
        dims: grid.dims,
        voxel_size: grid.voxel_size,
        voxels: truth,
        bundles,
    };
    Ok((dwi, gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Straight,
    Crossing90,
    Crossing45,
    Curved,
    OrLike,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "straight" => Preset::Straight,
            "crossing90" => Preset::Crossing90,
            "crossing45" => Preset::Crossing45,
            "curved" => Preset::Curved,
            "or-like" => Preset::OrLike,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown preset {s:?}; expected straight, crossing90, crossing45, curved or or-like"
                )))
            }
        })
    }
}

/// Voxel size of every preset, mm.
pub const PRESET_VOXEL: f64 = 2.0;

/// The bundle layout of a preset together with the acquisition.
pub fn preset(p: Preset, snr: Option<f64>, b: f64, n_dirs: usize, seed: u64) -> PhantomSpec {
    let h = PRESET_VOXEL;
    let line = |name: &str, a: [f64; 3], e: [f64; 3], r: f64| Bundle::new(name, Curve::Line { start: a, end: e }, r);
    let (dims, bundles) = match p {
        Preset::Straight => ([20, 9, 5], vec![line("x", [-1.0, 8.0, 4.0], [39.0, 8.0, 4.0], 3.0)]),
        Preset::Crossing90 => (
            [16, 16, 4],
            vec![
                line("x", [-1.0, 15.0, 3.0], [31.0, 15.0, 3.0], 4.0),
                line("y", [15.0, -1.0, 3.0], [15.0, 31.0, 3.0], 4.0),
            ],
        ),
        Preset::Crossing45 => {
            let d = std::f64::consts::FRAC_1_SQRT_2;
            let half = 15.0;
            (
                [16, 16, 4],
                vec![
                    line("x", [-1.0, 15.0, 3.0], [31.0, 15.0, 3.0], 4.0),
                    line(
                        "diagonal",
                        [15.0 - half * d, 15.0 - half * d, 3.0],
                        [15.0 + half * d, 15.0 + half * d, 3.0],
                        4.0,
                    ),
                ],
            )
        }
        Preset::Curved => {
            // Quarter circle with a signal-free stretch in the middle.
            let radius = 22.0;
            let mut b = Bundle::new(
                "arc",
                Curve::Arc {
                    center: [-1.0, -1.0, 3.0],
                    u: [1.0, 0.0, 0.0],
                    v: [0.0, 1.0, 0.0],
                    radius,
                    sweep: std::f64::consts::FRAC_PI_2,
                },
                3.5,
            );
            let mid = radius * std::f64::consts::FRAC_PI_4;
            b.gap = Some([mid - 3.0, mid + 3.0]);
            ([16, 16, 4], vec![b])
        }
        Preset::OrLike => {
            let arc = Bundle::new(
                "loop",
                Curve::Arc {
                    center: [17.0, 13.0, 3.0],
                    u: [0.0, -1.0, 0.0],
                    v: [-1.0, 0.0, 0.0],
                    radius: 10.0,
                    sweep: 2.6,
                },
                3.0,
            );
            ([20, 16, 4], vec![arc, line("cross", [-1.0, 24.0, 3.0], [39.0, 24.0, 3.0], 3.0)])
        }
    };
    PhantomSpec {
        dims,
        voxel_size: [h; 3],
        bundles,
        gradients: single_shell(b, n_dirs),
        snr,
        seed,
    }
}
