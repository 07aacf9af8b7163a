use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32_bytes, f32_values, read_bytes, read_json, sidecar, write_bytes, write_json};
use crate::csd::{DwiSignal, Gradient};
use crate::error::{Error, Result};
use crate::fodfield::Grid;
use crate::geometry::{UnitVector, Vec3};

/// Rows with `b = 0` hold unweighted volumes; their direction is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwiHeader {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    /// `[gx, gy, gz, b]` per volume, in file order.
    pub gradients: Vec<[f64; 4]>,
}

/// Writes the b0 volume first, then the weighted volumes.
pub fn write_dwi(path: &Path, dwi: &DwiSignal) -> Result<()> {
    let grid = dwi.grid();
    let mut gradients = vec![[0.0, 0.0, 0.0, 0.0]];
    gradients.extend(dwi.gradients().iter().map(|g| [g.direction.x(), g.direction.y(), g.direction.z(), g.b]));
    let header = DwiHeader {
        dims: grid.dims,
        voxel_size_mm: grid.voxel_size,
        gradients,
    };
    let mut bytes = Vec::with_capacity(4 * (dwi.b0().len() + dwi.volumes().len()));
    f32_bytes(dwi.b0().iter().chain(dwi.volumes()).copied(), &mut bytes);
    write_bytes(path, &bytes)?;
    write_json(&sidecar(path), &header)
}

/// Reads a DWI file; several b = 0 volumes are averaged.
pub fn read_dwi(path: &Path) -> Result<DwiSignal> {
    let side = sidecar(path);
    let h: DwiHeader = read_json(&side)?;
    let bad = |m: String| Error::format(&side, m);
    let grid = Grid::new(h.dims, h.voxel_size_mm).map_err(|e| bad(e.to_string()))?;
    let nv = grid.n_voxels();
    let data = f32_values(path, &read_bytes(path)?, nv * h.gradients.len())?;
    let mut b0 = vec![0.0; nv];
    let mut n_b0 = 0;
    let mut gradients = Vec::new();
    let mut volumes = Vec::new();
    for (row, g) in h.gradients.iter().enumerate() {
        let vol = &data[row * nv..(row + 1) * nv];
        if g[3] == 0.0 {
            b0.iter_mut().zip(vol).for_each(|(a, v)| *a += v);
            n_b0 += 1;
            continue;
        }
        if !(g[3] > 0.0 && g[3].is_finite()) {
            return Err(bad(format!("gradient row {row} has invalid b-value {}", g[3])));
        }
        let v = Vec3::new(g[0], g[1], g[2]);
        // Already-unit directions are kept as stored so that files round-trip.
        let direction = if (v.norm() - 1.0).abs() < 1e-12 {
            UnitVector::new_unchecked(v)
        } else {
            UnitVector::new(v).map_err(|_| bad(format!("gradient row {row} has a zero direction")))?
        };
        gradients.push(Gradient { direction, b: g[3] });
        volumes.extend_from_slice(vol);
    }
    if n_b0 == 0 {
        return Err(bad("no b = 0 volume".into()));
    }
    if n_b0 > 1 {
        b0.iter_mut().for_each(|a| *a /= n_b0 as f64);
    }
    DwiSignal::new(grid, gradients, volumes, b0).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, preset, Preset};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (dwi, _) = generate_phantom(&preset(Preset::Straight, Some(8.0), 3000.0, 32, 1)).unwrap();
        let p = dir.path().join("a.dwi");
        write_dwi(&p, &dwi).unwrap();
        let back = read_dwi(&p).unwrap();
        assert_eq!(back.gradients(), dwi.gradients());
        for (a, b) in dwi.volumes().iter().zip(back.volumes()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        let q = dir.path().join("b.dwi");
        write_dwi(&q, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert_eq!(std::fs::read(sidecar(&p)).unwrap(), std::fs::read(sidecar(&q)).unwrap());
    }

    #[test]
    fn b0_volumes_are_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dwi");
        let h = DwiHeader {
            dims: [1, 1, 2],
            voxel_size_mm: [2.0; 3],
            gradients: vec![[0.0; 4], [1.0, 0.0, 0.0, 1000.0], [0.0; 4]],
        };
        write_json(&sidecar(&p), &h).unwrap();
        let vals: [f32; 6] = [1.0, 3.0, 0.5, 0.25, 2.0, 5.0];
        std::fs::write(&p, vals.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
        let d = read_dwi(&p).unwrap();
        assert_eq!(d.b0(), &[1.5, 4.0]);
        assert_eq!(d.volumes(), &[0.5, 0.25]);

        let none = DwiHeader {
            gradients: vec![[1.0, 0.0, 0.0, 1000.0]; 3],
            ..h
        };
        write_json(&sidecar(&p), &none).unwrap();
        assert!(read_dwi(&p).unwrap_err().to_string().contains("b = 0"));
    }
}
