//! Sparse lookup table of the kernel on the voxel lattice.
//!
//! FODs are antipodally symmetric, so the table is indexed by the unique
//! axes of an antipodally symmetric orientation set (one member of each
//! `±n` pair, see [`OrientationSet::half_indices`]). Axis `i` carries the
//! weight `ω_i = 2 w_i` of both of its directions. An entry
//! `(offset, i, j, v)` is the contribution of unit density at the origin
//! along axis `i` to position `offset` along axis `j`, averaged over the
//! two signs of the target direction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::tessellation::OrientationSet;
use crate::geometry::{rotation_to_north, UnitVector, Vec3};
use crate::kernel::{ContourKernel, KernelParams};

/// Upper limit on the number of stored entries.
pub const MAX_ENTRIES: usize = 400_000_000;

/// Largest half width chosen automatically.
pub const MAX_AUTO_HALF_WIDTH: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    pub offset: [i32; 3],
    pub src: u32,
    pub tgt: u32,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableOptions {
    /// Spatial half width in voxels; `None` picks the smallest width outside
    /// of which every value is provably below the threshold.
    pub half_width: Option<u32>,
    /// Entries below this fraction of the largest entry are dropped.
    pub threshold: f64,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self {
            half_width: None,
            threshold: 1e-4,
        }
    }
}

/// A sparse, normalized kernel table grouped by spatial offset.
#[derive(Debug, Clone)]
pub struct EnhancementKernel {
    params: Option<KernelParams>,
    orientations: OrientationSet,
    half: Vec<usize>,
    axis_weights: Vec<f64>,
    half_width: u32,
    threshold: f64,
    offsets: Vec<[i32; 3]>,
    /// `groups[k]..groups[k + 1]` indexes the entries of `offsets[k]`.
    groups: Vec<usize>,
    src: Vec<u32>,
    tgt: Vec<u32>,
    values: Vec<f64>,
    normalization: Vec<f64>,
    diagnostics: TableDiagnostics,
}

/// Quantities recorded while building a table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableDiagnostics {
    /// Fraction of the evaluated mass removed by thresholding.
    pub dropped_mass_fraction: f64,
    /// Largest difference between the closed form and its axially
    /// symmetrized version, relative to the kernel peak, over sampled entries.
    pub max_asymmetry: f64,
    /// Evaluations that needed the equatorial angle clamp.
    pub clamped_evaluations: u64,
    pub evaluated: u64,
}

impl EnhancementKernel {
    /// Assembles a table from raw entries; used by readers.
    pub fn from_entries(
        params: Option<KernelParams>,
        orientations: OrientationSet,
        half_width: u32,
        threshold: f64,
        mut entries: Vec<KernelEntry>,
    ) -> Result<Self> {
        let half = orientations.half_indices()?;
        let n = half.len() as u32;
        if entries.iter().any(|e| e.src >= n || e.tgt >= n) {
            return Err(Error::invalid("kernel entry refers to an unknown orientation"));
        }
        if entries.iter().any(|e| !(e.value >= 0.0 && e.value.is_finite())) {
            return Err(Error::invalid("kernel entries must be finite and nonnegative"));
        }
        entries.sort_by(|a, b| {
            (a.offset, a.src, a.tgt).cmp(&(b.offset, b.src, b.tgt))
        });
        let axis_weights: Vec<f64> = half.iter().map(|&i| 2.0 * orientations.weights()[i]).collect();
        let mut normalization = vec![0.0; half.len()];
        for e in &entries {
            normalization[e.src as usize] += e.value * axis_weights[e.tgt as usize];
        }
        let mut table = Self {
            params,
            orientations,
            half,
            axis_weights,
            half_width,
            threshold,
            offsets: Vec::new(),
            groups: vec![0],
            src: Vec::with_capacity(entries.len()),
            tgt: Vec::with_capacity(entries.len()),
            values: Vec::with_capacity(entries.len()),
            normalization,
            diagnostics: TableDiagnostics::default(),
        };
        for e in entries {
            if table.offsets.last() != Some(&e.offset) {
                if !table.offsets.is_empty() {
                    table.groups.push(table.src.len());
                }
                table.offsets.push(e.offset);
            }
            table.src.push(e.src);
            table.tgt.push(e.tgt);
            table.values.push(e.value);
        }
        table.groups.push(table.src.len());
        if table.offsets.is_empty() {
            table.groups = vec![0];
        }
        Ok(table)
    }

    pub fn params(&self) -> Option<&KernelParams> {
        self.params.as_ref()
    }

    pub fn orientations(&self) -> &OrientationSet {
        &self.orientations
    }

    /// Indices into [`Self::orientations`] of the table's axes.
    pub fn axes(&self) -> &[usize] {
        &self.half
    }

    pub fn axis(&self, i: usize) -> &UnitVector {
        self.orientations.direction(self.half[i])
    }

    /// Quadrature weight of each axis (both signs combined).
    pub fn axis_weights(&self) -> &[f64] {
        &self.axis_weights
    }

    pub fn n_axes(&self) -> usize {
        self.half.len()
    }

    pub fn half_width(&self) -> u32 {
        self.half_width
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    /// Entries of the `k`-th offset as `(src, tgt, value)` slices.
    pub fn group(&self, k: usize) -> (&[u32], &[u32], &[f64]) {
        let r = self.groups[k]..self.groups[k + 1];
        (&self.src[r.clone()], &self.tgt[r.clone()], &self.values[r])
    }

    pub fn entries(&self) -> impl Iterator<Item = KernelEntry> + '_ {
        self.offsets.iter().enumerate().flat_map(move |(k, off)| {
            let (s, t, v) = self.group(k);
            (0..s.len()).map(move |e| KernelEntry {
                offset: *off,
                src: s[e],
                tgt: t[e],
                value: v[e],
            })
        })
    }

    /// Value of one entry, zero if absent.
    pub fn value(&self, offset: [i32; 3], src: usize, tgt: usize) -> f64 {
        let Ok(k) = self.offsets.binary_search(&offset) else {
            return 0.0;
        };
        let (s, t, v) = self.group(k);
        let lo = s.partition_point(|&x| (x as usize) < src);
        let hi = s.partition_point(|&x| (x as usize) <= src);
        match t[lo..hi].binary_search(&(tgt as u32)) {
            Ok(p) => v[lo + p],
            Err(_) => 0.0,
        }
    }

    /// Per-source discrete mass `Σ_{offset, j} K ω_j`.
    pub fn source_masses(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_axes()];
        for k in 0..self.offsets.len() {
            let (s, t, v) = self.group(k);
            for e in 0..s.len() {
                m[s[e] as usize] += v[e] * self.axis_weights[t[e] as usize];
            }
        }
        m
    }

    /// Per-source mass before rescaling to one.
    pub fn normalization(&self) -> &[f64] {
        &self.normalization
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(*v))
    }

    pub fn diagnostics(&self) -> &TableDiagnostics {
        &self.diagnostics
    }
}

/// The table of the identity operator: one entry per axis at offset zero.
pub fn identity_kernel(orientations: &OrientationSet) -> Result<EnhancementKernel> {
    let half = orientations.half_indices()?;
    let entries = half
        .iter()
        .enumerate()
        .map(|(i, &d)| KernelEntry {
            offset: [0, 0, 0],
            src: i as u32,
            tgt: i as u32,
            value: 1.0 / (2.0 * orientations.weights()[d]),
        })
        .collect();
    EnhancementKernel::from_entries(None, orientations.clone(), 0, 0.0, entries)
}

/// Smallest half width beyond which the spatial bound falls below `floor`.
fn auto_half_width(k: &ContourKernel, floor: f64) -> u32 {
    (1..=MAX_AUTO_HALF_WIDTH)
        .find(|&h| k.spatial_bound(f64::from(h + 1), 0.0) < floor)
        .unwrap_or_else(|| {
            log::warn!("kernel half width capped at {MAX_AUTO_HALF_WIDTH} voxels");
            MAX_AUTO_HALF_WIDTH
        })
}

struct SourceRows {
    entries: Vec<KernelEntry>,
    kept_mass: f64,
    dropped_mass: f64,
    asymmetry: f64,
    clamped: u64,
    evaluated: u64,
}

/// Evaluates the kernel on the lattice for every pair of axes, drops small
/// values and rescales each source to unit discrete mass.
pub fn discretize_kernel(
    params: KernelParams,
    orientations: &OrientationSet,
    options: TableOptions,
) -> Result<EnhancementKernel> {
    let kernel = ContourKernel::new(params)?;
    if !(0.0..1.0).contains(&options.threshold) {
        return Err(Error::invalid(format!(
            "sparsity threshold must lie in [0, 1), got {}",
            options.threshold
        )));
    }
    let half = orientations.half_indices()?;
    let axes: Vec<UnitVector> = half.iter().map(|&i| *orientations.direction(i)).collect();
    let weights: Vec<f64> = half.iter().map(|&i| 2.0 * orientations.weights()[i]).collect();

    // The folded value at the origin is at least half the peak, so values
    // below `floor` are certainly below the threshold.
    let floor = options.threshold * kernel.peak() * 0.5;
    let half_width = match options.half_width {
        Some(0) => return Err(Error::invalid("half width must be at least 1")),
        Some(h) => h,
        None => auto_half_width(&kernel, floor),
    };
    let hw = half_width as i32;
    let offsets: Vec<[i32; 3]> = (-hw..=hw)
        .flat_map(|x| (-hw..=hw).flat_map(move |y| (-hw..=hw).map(move |z| [x, y, z])))
        .collect();
    let pruning = floor * 0.5;

    let rows: Vec<SourceRows> = axes
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let r = rotation_to_north(d);
            let local: Vec<UnitVector> = axes.iter().map(|e| r.rotate_inverse(e)).collect();
            let mut out = SourceRows {
                entries: Vec::new(),
                kept_mass: 0.0,
                dropped_mass: 0.0,
                asymmetry: 0.0,
                clamped: 0,
                evaluated: 0,
            };
            let mut sample = 0u64;
            for off in &offsets {
                let o = Vec3::new(off[0] as f64, off[1] as f64, off[2] as f64);
                let u = r.apply_inverse(&o);
                let lateral = u.x.hypot(u.y);
                if kernel.spatial_bound(u.z, lateral) < pruning {
                    continue;
                }
                for (j, m) in local.iter().enumerate() {
                    let a = m.z().clamp(-1.0, 1.0).acos();
                    if kernel.bound(u.z, lateral, a).max(kernel.bound(u.z, lateral, std::f64::consts::PI - a))
                        < pruning
                    {
                        continue;
                    }
                    let v = 0.5 * (kernel.eval(&u, m) + kernel.eval(&u, &-*m));
                    out.evaluated += 1;
                    if m.z().abs() < 1e-6 {
                        out.clamped += 1;
                    }
                    sample += 1;
                    if sample.is_multiple_of(97) {
                        let raw = 0.5 * (kernel.raw(&u, m) + kernel.raw(&u, &-*m));
                        out.asymmetry = out.asymmetry.max((raw - v).abs() / kernel.peak());
                    }
                    out.entries.push(KernelEntry {
                        offset: *off,
                        src: i as u32,
                        tgt: j as u32,
                        value: v,
                    });
                }
            }
            out
        })
        .collect();

    let max = rows
        .iter()
        .flat_map(|r| r.entries.iter())
        .fold(0.0f64, |a, e| a.max(e.value));
    let cut = options.threshold * max;
    let mut rows = rows;
    let mut total = 0usize;
    for row in &mut rows {
        let mut kept = 0.0;
        let mut dropped = 0.0;
        row.entries.retain(|e| {
            let m = e.value * weights[e.tgt as usize];
            if e.value >= cut && e.value > 0.0 {
                kept += m;
                true
            } else {
                dropped += m;
                false
            }
        });
        row.kept_mass = kept;
        row.dropped_mass = dropped;
        total += row.entries.len();
        if total > MAX_ENTRIES {
            return Err(Error::Capacity(format!(
                "kernel table exceeds {MAX_ENTRIES} entries; raise the threshold or lower the tessellation level"
            )));
        }
    }
    if total == 0 {
        return Err(Error::invalid("kernel table is empty after thresholding"));
    }
    if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.kept_mass <= 0.0) {
        return Err(Error::invalid(format!("kernel table has no entries for axis {i}")));
    }

    let normalization: Vec<f64> = rows.iter().map(|r| r.kept_mass).collect();
    let kept: f64 = rows.iter().map(|r| r.kept_mass).sum();
    let dropped: f64 = rows.iter().map(|r| r.dropped_mass).sum();
    let diagnostics = TableDiagnostics {
        dropped_mass_fraction: dropped / (kept + dropped),
        max_asymmetry: rows.iter().fold(0.0, |a, r| a.max(r.asymmetry)),
        clamped_evaluations: rows.iter().map(|r| r.clamped).sum(),
        evaluated: rows.iter().map(|r| r.evaluated).sum(),
    };
    let entries: Vec<KernelEntry> = rows
        .into_iter()
        .flat_map(|r| {
            let scale = 1.0 / r.kept_mass;
            r.entries.into_iter().map(move |mut e| {
                e.value *= scale;
                e
            })
        })
        .collect();
    let mut table = EnhancementKernel::from_entries(
        Some(params),
        orientations.clone(),
        half_width,
        options.threshold,
        entries,
    )?;
    table.normalization = normalization;
    table.diagnostics = diagnostics;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tessellation::tessellate_sphere;

    fn small_table(params: KernelParams, threshold: f64) -> EnhancementKernel {
        let t = tessellate_sphere(2).unwrap();
        discretize_kernel(
            params,
            &t,
            TableOptions {
                half_width: Some(3),
                threshold,
            },
        )
        .unwrap()
    }

    #[test]
    fn dense_table_has_unit_mass() {
        let k = small_table(KernelParams::new(1.0, 0.04, 1.0).unwrap(), 0.0);
        for m in k.source_masses() {
            assert!((m - 1.0).abs() < 1e-9);
        }
        assert!(k.entries().all(|e| e.value >= 0.0));
    }

    #[test]
    fn thresholded_table_has_unit_mass() {
        let k = small_table(KernelParams::new(1.0, 0.04, 1.0).unwrap(), 1e-3);
        // Undo the per-source rescaling to compare against the threshold.
        let pre = |e: &KernelEntry| e.value * k.normalization()[e.src as usize];
        let max = k.entries().map(|e| pre(&e)).fold(0.0, f64::max);
        assert!(k.entries().all(|e| pre(&e) >= 1e-3 * max * (1.0 - 1e-12)));
        for m in k.source_masses() {
            assert!((m - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn short_time_mass_is_local() {
        let k = small_table(KernelParams::new(1.0, 0.04, 0.1).unwrap(), 0.0);
        let w = k.axis_weights();
        let mut near = 0.0;
        let mut all = 0.0;
        for e in k.entries() {
            let m = e.value * w[e.tgt as usize];
            all += m;
            if e.offset.iter().all(|c| c.abs() <= 1) {
                near += m;
            }
        }
        assert!(near / all >= 0.99, "{}", near / all);
    }

    /// Radius containing `frac` of the mass, averaged over sources.
    fn mass_radius(k: &EnhancementKernel, frac: f64) -> f64 {
        let w = k.axis_weights();
        let mut per_src: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k.n_axes()];
        for e in k.entries() {
            let r = (e.offset.iter().map(|c| (c * c) as f64).sum::<f64>()).sqrt();
            per_src[e.src as usize].push((r, e.value * w[e.tgt as usize]));
        }
        let mut total = 0.0;
        for mut v in per_src {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut acc = 0.0;
            for (r, m) in v {
                acc += m;
                if acc >= frac {
                    total += r;
                    break;
                }
            }
        }
        total / k.n_axes() as f64
    }

    #[test]
    fn larger_diffusivity_ratio_elongates() {
        let t = tessellate_sphere(2).unwrap();
        let opts = TableOptions {
            half_width: Some(5),
            threshold: 1e-4,
        };
        let narrow = discretize_kernel(KernelParams::new(0.5, 0.04, 1.0).unwrap(), &t, opts).unwrap();
        let wide = discretize_kernel(KernelParams::new(2.0, 0.04, 1.0).unwrap(), &t, opts).unwrap();
        assert!(mass_radius(&wide, 0.9) > mass_radius(&narrow, 0.9));
    }

    #[test]
    fn spatial_inversion_symmetry() {
        let k = small_table(KernelParams::new(1.0, 0.04, 1.4).unwrap(), 1e-4);
        let max = k.max_value();
        for e in k.entries() {
            let inv = [-e.offset[0], -e.offset[1], -e.offset[2]];
            let v = k.value(inv, e.src as usize, e.tgt as usize);
            // Entries near the threshold may be present on one side only.
            if v == 0.0 {
                assert!(e.value < 1e-3 * max);
                continue;
            }
            assert!((v - e.value).abs() <= 1e-6 * max);
        }
    }

    #[test]
    fn auto_half_width_contains_table() {
        let t = tessellate_sphere(1).unwrap();
        let p = KernelParams::new(1.0, 0.02, 1.0).unwrap();
        let auto = discretize_kernel(p, &t, TableOptions::default()).unwrap();
        let wider = discretize_kernel(
            p,
            &t,
            TableOptions {
                half_width: Some(auto.half_width() + 3),
                threshold: 1e-4,
            },
        )
        .unwrap();
        assert_eq!(auto.len(), wider.len());
        assert!(auto.diagnostics().dropped_mass_fraction < 0.01);
    }

    #[test]
    fn bad_options_rejected() {
        let t = tessellate_sphere(1).unwrap();
        let p = KernelParams::new(1.0, 0.02, 1.0).unwrap();
        let bad = |half_width, threshold| {
            discretize_kernel(p, &t, TableOptions { half_width, threshold }).is_err()
        };
        assert!(bad(Some(0), 1e-4));
        assert!(bad(Some(2), 1.0));
        assert!(bad(Some(2), -0.1));
    }

    #[test]
    fn identity_table() {
        let t = tessellate_sphere(2).unwrap();
        let k = identity_kernel(&t).unwrap();
        assert_eq!(k.len(), 81);
        for m in k.source_masses() {
            assert!((m - 1.0).abs() < 1e-12);
        }
    }
}
