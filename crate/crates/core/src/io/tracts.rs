use std::path::Path;

use super::{read_bytes, read_json, sidecar, write_bytes, write_json, Cursor};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tracking::{Provenance, Streamline, Tractogram};

pub const TRACTOGRAM_MAGIC: &[u8; 5] = b"FPT1\n";

/// Writes the streamlines; provenance, when present, goes to the sidecar.
/// Seed indices are not stored and read back as the streamline index.
pub fn write_tractogram(path: &Path, t: &Tractogram) -> Result<()> {
    let n = u32::try_from(t.len()).map_err(|_| Error::Capacity("more than 2³² streamlines".into()))?;
    let mut bytes = TRACTOGRAM_MAGIC.to_vec();
    bytes.extend_from_slice(&n.to_le_bytes());
    for s in &t.streamlines {
        let m = u32::try_from(s.len()).map_err(|_| Error::Capacity("streamline with more than 2³² points".into()))?;
        bytes.extend_from_slice(&m.to_le_bytes());
        for p in &s.points {
            for c in [p.x, p.y, p.z] {
                bytes.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    write_bytes(path, &bytes)?;
    let side = sidecar(path);
    match &t.provenance {
        Some(p) => write_json(&side, p),
        None => match std::fs::remove_file(&side) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(&side, e)),
            _ => Ok(()),
        },
    }
}

pub fn read_tractogram(path: &Path) -> Result<Tractogram> {
    let bytes = read_bytes(path)?;
    let mut c = Cursor::new(path, &bytes);
    if c.take(5).ok() != Some(&TRACTOGRAM_MAGIC[..]) {
        return Err(Error::format(path, "missing FPT1 header"));
    }
    let n = c.u32()? as usize;
    let mut streamlines = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let m = c.u32()? as usize;
        let mut points = Vec::with_capacity(m.min(1 << 20));
        for _ in 0..m {
            points.push(Vec3::new(c.f32()?, c.f32()?, c.f32()?));
        }
        streamlines.push(Streamline::new(points, i));
    }
    c.finish()?;
    let side = sidecar(path);
    let provenance: Option<Provenance> = if side.exists() { Some(read_json(&side)?) } else { None };
    Ok(Tractogram {
        streamlines,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tractogram {
        Tractogram::new(vec![
            Streamline::new(vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0 / 3.0, -2.0, 7.5)], 0),
            Streamline::new(vec![], 1),
            Streamline::new(vec![Vec3::new(1e-7, 4.0, 4.0)], 2),
        ])
    }

    #[test]
    fn byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fpt");
        write_tractogram(&p, &sample()).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert_eq!(&b[..5], b"FPT1\n");
        assert_eq!(u32::from_le_bytes(b[5..9].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[13..17].try_into().unwrap()), 0.1f32);
        assert_eq!(b.len(), 5 + 4 + (4 + 24) + 4 + (4 + 12));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (p, q) = (dir.path().join("a.fpt"), dir.path().join("b.fpt"));
        write_tractogram(&p, &sample()).unwrap();
        let back = read_tractogram(&p).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.streamlines[0].points[1].y, -2.0);
        write_tractogram(&q, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fpt");
        write_tractogram(&p, &sample()).unwrap();
        let mut b = std::fs::read(&p).unwrap();
        b.pop();
        std::fs::write(&p, &b).unwrap();
        assert!(read_tractogram(&p).unwrap_err().to_string().contains("truncated"));
        std::fs::write(&p, b"FPT2\n\0\0\0\0").unwrap();
        assert!(read_tractogram(&p).is_err());
    }
}
