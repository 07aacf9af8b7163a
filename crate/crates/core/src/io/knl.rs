use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes, Cursor};
use crate::error::{Error, Result};
use crate::geometry::tessellation::{tessellate_sphere, OrientationSet};
use crate::kernel::{EnhancementKernel, KernelEntry, KernelParams};

pub const KERNEL_MAGIC: &[u8; 5] = b"FPK1\n";

/// JSON header stored after the magic and its own `u32` byte length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelHeader {
    pub params: Option<KernelParams>,
    pub tess_level: u32,
    pub half_width: u32,
    pub threshold: f64,
    pub n_entries: u64,
}

fn tessellation_level(o: &OrientationSet) -> Option<u32> {
    let level = (0..=8).find(|&l| 10 * 4usize.pow(l) + 2 == o.len())?;
    let t = tessellate_sphere(level).ok()?;
    (t.directions() == o.directions()).then_some(level)
}

/// Header, then per entry `i32` offset triple, `u32` source and target
/// axis, and the `f32` value.
pub fn write_kernel(path: &Path, k: &EnhancementKernel) -> Result<()> {
    let tess_level = tessellation_level(k.orientations())
        .ok_or_else(|| Error::invalid("kernel files support icosahedral tessellations only"))?;
    let header = KernelHeader {
        params: k.params().copied(),
        tess_level,
        half_width: k.half_width(),
        threshold: k.threshold(),
        n_entries: k.len() as u64,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = KERNEL_MAGIC.to_vec();
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.reserve(24 * k.len());
    for e in k.entries() {
        for o in e.offset {
            bytes.extend_from_slice(&o.to_le_bytes());
        }
        bytes.extend_from_slice(&e.src.to_le_bytes());
        bytes.extend_from_slice(&e.tgt.to_le_bytes());
        bytes.extend_from_slice(&(e.value as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_kernel(path: &Path) -> Result<EnhancementKernel> {
    let bytes = read_bytes(path)?;
    let mut c = Cursor::new(path, &bytes);
    if c.take(5).ok() != Some(&KERNEL_MAGIC[..]) {
        return Err(Error::format(path, "missing FPK1 header"));
    }
    let len = c.u32()? as usize;
    let header: KernelHeader =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let orientations = tessellate_sphere(header.tess_level).map_err(|e| Error::format(path, e.to_string()))?;
    let n = usize::try_from(header.n_entries).map_err(|_| Error::format(path, "entry count overflows"))?;
    let mut entries = Vec::with_capacity(n.min(bytes.len() / 24));
    for _ in 0..n {
        let offset = [c.i32()?, c.i32()?, c.i32()?];
        let (src, tgt) = (c.u32()?, c.u32()?);
        let value = c.f32()?;
        entries.push(KernelEntry { offset, src, tgt, value });
    }
    c.finish()?;
    EnhancementKernel::from_entries(header.params, orientations, header.half_width, header.threshold, entries)
        .map_err(|e| Error::format(path, e.to_string()))
}
