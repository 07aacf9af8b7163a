use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32_bytes, f32_values, read_bytes, read_json, sidecar, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::fodfield::{FodField, Grid};

pub const FOD_LAYOUT: &str = "voxel-major, coefficient-minor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FodHeader {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub sh_order: u32,
    pub layout: String,
    pub endianness: String,
}

pub fn write_fod(path: &Path, field: &FodField) -> Result<()> {
    let header = FodHeader {
        dims: field.dims(),
        voxel_size_mm: field.voxel_size(),
        sh_order: field.sh_order(),
        layout: FOD_LAYOUT.into(),
        endianness: "little".into(),
    };
    let mut bytes = Vec::with_capacity(4 * field.data().len());
    f32_bytes(field.data().iter().copied(), &mut bytes);
    write_bytes(path, &bytes)?;
    write_json(&sidecar(path), &header)
}

pub fn read_fod(path: &Path) -> Result<FodField> {
    let side = sidecar(path);
    let h: FodHeader = read_json(&side)?;
    if h.layout != FOD_LAYOUT || h.endianness != "little" {
        return Err(Error::format(&side, format!("unsupported layout {:?} / {:?}", h.layout, h.endianness)));
    }
    let grid = Grid::new(h.dims, h.voxel_size_mm).map_err(|e| Error::format(&side, e.to_string()))?;
    let k = crate::geometry::sh::n_coeffs(h.sh_order);
    let data = f32_values(path, &read_bytes(path)?, grid.n_voxels() * k)?;
    FodField::from_data(grid, h.sh_order, data).map_err(|e| Error::format(&side, e.to_string()))
}
