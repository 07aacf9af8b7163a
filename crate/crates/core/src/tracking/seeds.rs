use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fodfield::Grid;
use crate::geometry::Vec3;

/// Seed specification as stored in seed files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Seeds {
    /// Explicit points in millimetres.
    Points(Vec<[f64; 3]>),
    /// `per_voxel` uniformly random points inside each listed voxel.
    Region { voxels: Vec<[usize; 3]>, per_voxel: usize },
}

/// Expands a seed specification into points. Region seeds are drawn from a
/// stream that depends only on `rng_seed`.
pub fn seed_points(seeds: &Seeds, grid: &Grid, rng_seed: u64) -> Result<Vec<Vec3>> {
    match seeds {
        Seeds::Points(p) => Ok(p.iter().map(|q| Vec3::new(q[0], q[1], q[2])).collect()),
        Seeds::Region { voxels, per_voxel } => {
            if voxels.is_empty() || *per_voxel == 0 {
                return Err(Error::invalid("seed region is empty"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream(u64::MAX);
            let mut out = Vec::with_capacity(voxels.len() * per_voxel);
            for v in voxels {
                if !grid.contains_voxel(v.map(|c| c as i64)) {
                    return Err(Error::invalid(format!("seed voxel {v:?} lies outside the volume")));
                }
                let c = grid.center(*v);
                for _ in 0..*per_voxel {
                    let j = Vec3::new(
                        (rng.random::<f64>() - 0.5) * grid.voxel_size[0],
                        (rng.random::<f64>() - 0.5) * grid.voxel_size[1],
                        (rng.random::<f64>() - 0.5) * grid.voxel_size[2],
                    );
                    out.push(c + j);
                }
            }
            Ok(out)
        }
    }
}
