use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tracking::{Streamline, Tractogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierShape {
    /// Fibers parallel to e_x.
    Straight,
    /// Concentric arcs in the xy-plane, loosely resembling the optic radiation.
    Curved,
}

/// Streamlines with known outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierBundle {
    pub tractogram: Tractogram,
    /// Indices of the planted outliers.
    pub outliers: Vec<usize>,
}

const LENGTH: f64 = 40.0;
const STEP: f64 = 0.5;
/// Lateral spacing of the inlier lattice, mm.
const SPACING: f64 = 0.25;

fn polyline(n: usize, f: impl Fn(f64) -> Vec3) -> Vec<Vec3> {
    (0..=n).map(|k| f(k as f64 / n as f64)).collect()
}

/// `n_fibers` coherent fibers followed by up to three outliers: one crossing
/// the bundle at a right angle, one at 45°, and one parallel to the bundle
/// but far from it. Coordinates are in mm with the bundle starting near the
/// origin.
pub fn planted_outliers(shape: OutlierShape, n_fibers: usize, n_outliers: usize, seed: u64) -> Result<OutlierBundle> {
    if n_fibers == 0 {
        return Err(Error::invalid("outlier phantom needs at least one inlier"));
    }
    if n_outliers > 3 {
        return Err(Error::invalid(format!("at most 3 outliers can be planted, got {n_outliers}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (n_fibers as f64).sqrt().ceil() as usize;
    let n_pts = (LENGTH / STEP) as usize;
    let radius = 25.0;
    let sweep = LENGTH / radius;
    let mut streamlines = Vec::with_capacity(n_fibers + n_outliers);
    for i in 0..n_fibers {
        let a = (i % cols) as f64 - (cols - 1) as f64 / 2.0;
        let b = (i / cols) as f64 - ((n_fibers - 1) / cols) as f64 / 2.0;
        let (da, db) = (a * SPACING, b * SPACING);
        // A gentle sinusoidal wobble keeps the fibers from being identical.
        let amp = rng.random_range(0.0..0.05);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let wobble = move |u: f64| amp * (phase + u * std::f64::consts::TAU).sin();
        let pts = match shape {
            OutlierShape::Straight => polyline(n_pts, |u| Vec3::new(u * LENGTH, da + wobble(u), db)),
            OutlierShape::Curved => polyline(n_pts, |u| {
                let r = radius + da + wobble(u);
                let phi = u * sweep;
                Vec3::new(r * phi.sin(), radius - r * phi.cos(), db)
            }),
        };
        streamlines.push(Streamline::new(pts, i));
    }

    let mid = match shape {
        OutlierShape::Straight => Vec3::new(LENGTH / 2.0, 0.0, 0.0),
        OutlierShape::Curved => {
            let phi = sweep / 2.0;
            Vec3::new(radius * phi.sin(), radius - radius * phi.cos(), 0.0)
        }
    };
    let tangent = match shape {
        OutlierShape::Straight => Vec3::x(),
        OutlierShape::Curved => Vec3::new((sweep / 2.0).cos(), (sweep / 2.0).sin(), 0.0),
    };
    let normal = Vec3::new(-tangent.y, tangent.x, 0.0);
    let half = 10.0;
    let n_short = (2.0 * half / STEP) as usize;
    let quarter = match shape {
        OutlierShape::Straight => Vec3::new(LENGTH / 4.0, 0.0, 0.0),
        OutlierShape::Curved => {
            let phi = sweep / 4.0;
            Vec3::new(radius * phi.sin(), radius - radius * phi.cos(), 0.0)
        }
    };
    let diag = (tangent + normal).normalize();
    let offset = normal * 6.0 + Vec3::z() * 3.0;
    let outliers: [Box<dyn Fn(f64) -> Vec3>; 3] = [
        Box::new(move |u| mid + normal * (2.0 * u - 1.0) * half),
        Box::new(move |u| quarter + diag * (2.0 * u - 1.0) * half),
        Box::new(move |u| mid + offset + tangent * (2.0 * u - 1.0) * half),
    ];
    let mut idx = Vec::new();
    for f in outliers.iter().take(n_outliers) {
        idx.push(streamlines.len());
        streamlines.push(Streamline::new(polyline(n_short, f), streamlines.len()));
    }
    Ok(OutlierBundle {
        tractogram: Tractogram::new(streamlines),
        outliers: idx,
    })
}
