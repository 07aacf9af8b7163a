//! End-to-end driver: phantom, CSD, enhancement, tracking, coherence
//! filtering and evaluation, configured by one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::csd::{csd_fit, estimate_response, single_fiber_mask, CsdSettings};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, GroundTruth, MetricsReport};
use crate::fbc::{coherence, filter_tractogram, FbcSettings};
use crate::fodfield::{enhance, find_peaks, EnhanceOptions, PeakThreshold};
use crate::geometry::tessellation::tessellate_sphere;
use crate::io;
use crate::kernel::KernelParams;
use crate::phantom::{generate_phantom, preset, Preset};
use crate::tracking::{seed_points, track, Seeds, TrackingMode, TrackingParams};

pub const CONFIG_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub preset: Preset,
    /// `None` for noise-free data.
    pub snr: Option<f64>,
    pub b: f64,
    pub n_dirs: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Crossing90,
            snr: Some(10.0),
            b: 3000.0,
            n_dirs: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsdConfig {
    pub order: u32,
    pub lambda: f64,
    pub tau: f64,
    pub max_iter: usize,
    /// Voxels at or above this FA define the response.
    pub fa_threshold: f64,
}

impl Default for CsdConfig {
    fn default() -> Self {
        let s = CsdSettings::default();
        Self {
            order: s.order,
            lambda: s.lambda,
            tau: s.tau,
            max_iter: s.max_iter,
            fa_threshold: 0.7,
        }
    }
}

impl CsdConfig {
    pub fn settings(&self) -> CsdSettings {
        CsdSettings {
            order: self.order,
            lambda: self.lambda,
            tau: self.tau,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    pub enabled: bool,
    pub d33: f64,
    pub d44: f64,
    pub t: f64,
    pub tess_level: u32,
    pub half_width: Option<u32>,
    pub threshold: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        let o = EnhanceOptions::default();
        Self {
            enabled: true,
            d33: 1.0,
            d44: 0.01,
            t: 2.0,
            tess_level: o.tess_level,
            half_width: o.half_width,
            threshold: o.threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    Det,
    Prob,
}

impl From<ModeConfig> for TrackingMode {
    fn from(m: ModeConfig) -> Self {
        match m {
            ModeConfig::Det => TrackingMode::Deterministic,
            ModeConfig::Prob => TrackingMode::Probabilistic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub mode: ModeConfig,
    /// `None` seeds in the start ROIs of every ground-truth bundle.
    pub seeds: Option<Seeds>,
    pub seeds_per_voxel: usize,
    pub params: TrackingParams,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            mode: ModeConfig::Det,
            seeds: None,
            seeds_per_voxel: 4,
            params: TrackingParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbcConfig {
    pub enabled: bool,
    pub settings: FbcSettings,
    /// Threshold as a fraction of the largest RFBC.
    pub epsilon_rel: f64,
}

impl Default for FbcConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            settings: FbcSettings::default(),
            epsilon_rel: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Absolute amplitude below which maxima are not counted as peaks.
    pub peak_threshold: f64,
    pub tess_level: u32,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            peak_threshold: 0.1,
            tess_level: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: String,
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub csd: CsdConfig,
    pub enhance: EnhanceConfig,
    pub track: TrackConfig,
    pub fbc: FbcConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION.into(),
            seed: 0,
            phantom: PhantomConfig::default(),
            csd: CsdConfig::default(),
            enhance: EnhanceConfig::default(),
            track: TrackConfig::default(),
            fbc: FbcConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = io::read_json(path)?;
        if c.version != CONFIG_VERSION {
            return Err(Error::format(
                path,
                format!("config version {:?} is not supported (expected {CONFIG_VERSION:?})", c.version),
            ));
        }
        Ok(c)
    }
}

/// Everything a run produced, also written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub metrics: MetricsReport,
    pub metrics_filtered: Option<MetricsReport>,
    pub streamlines: usize,
    pub removed_by_fbc: Option<usize>,
    pub outputs: Vec<PathBuf>,
}

/// Runs every stage and writes its artifacts into `out_dir`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outputs = Vec::new();
    let mut out = |name: &str| {
        let p = out_dir.join(name);
        outputs.push(p.clone());
        p
    };
    io::write_json(&out("config.json"), config)?;

    let p = &config.phantom;
    let spec = preset(p.preset, p.snr, p.b, p.n_dirs, config.seed);
    let (dwi, gt) = generate_phantom(&spec)?;
    io::write_dwi(&out("dwi.dwi"), &dwi)?;
    io::write_json(&out("gt.json"), &gt)?;

    let mask = single_fiber_mask(&dwi, config.csd.fa_threshold)?;
    log::info!("response from {} voxels", mask.len());
    let response = estimate_response(&dwi, &mask, config.csd.order)?;
    io::write_json(&out("response.json"), &response)?;
    let mut field = csd_fit(&dwi, &response, config.csd.settings())?;
    io::write_fod(&out("u.fod"), &field)?;

    let e = &config.enhance;
    if e.enabled {
        let params = KernelParams::new(e.d33, e.d44, e.t)?;
        let options = EnhanceOptions {
            tess_level: e.tess_level,
            half_width: e.half_width,
            threshold: e.threshold,
        };
        field = enhance(&field, params, options)?;
        io::write_fod(&out("w.fod"), &field)?;
    }

    let t = &config.track;
    let seeds = match &t.seeds {
        Some(s) => s.clone(),
        None => Seeds::Region {
            voxels: gt.bundles.iter().flat_map(|b| b.roi_start.iter().copied()).collect(),
            per_voxel: t.seeds_per_voxel,
        },
    };
    let points = seed_points(&seeds, field.grid(), config.seed)?;
    let params = TrackingParams {
        rng_seed: config.seed,
        ..t.params
    };
    let (tracks, report) = track(&field, &points, t.mode.into(), params, None, None)?;
    log::info!("tracking: {report:?}");
    io::write_tractogram(&out("tracks.fpt"), &tracks)?;

    let tess = tessellate_sphere(config.evaluate.tess_level)?;
    let peaks = find_peaks(&field, &tess, PeakThreshold::Absolute(config.evaluate.peak_threshold))?;
    let metrics = evaluate(&tracks, Some(&peaks), &gt)?;
    io::write_json(&out("metrics.json"), &metrics)?;

    let (mut metrics_filtered, mut removed) = (None, None);
    if config.fbc.enabled && !tracks.is_empty() {
        let rep = coherence(&tracks, &config.fbc.settings)?;
        io::write_json(&out("rfbc.json"), &rep)?;
        let kept = filter_tractogram(&tracks, &rep, config.fbc.epsilon_rel * rep.eps_max)?;
        removed = Some(tracks.len() - kept.len());
        io::write_tractogram(&out("filtered.fpt"), &kept)?;
        let m = evaluate(&kept, Some(&peaks), &gt)?;
        io::write_json(&out("metrics_filtered.json"), &m)?;
        metrics_filtered = Some(m);
    }

    let summary_path = out("summary.json");
    let summary = PipelineSummary {
        metrics,
        metrics_filtered,
        streamlines: tracks.len(),
        removed_by_fbc: removed,
        outputs: outputs.iter().map(|p| PathBuf::from(p.file_name().unwrap())).collect(),
    };
    io::write_json(&summary_path, &summary)?;
    Ok(summary)
}

/// Reads back a ground truth written by [`run_pipeline`] or the phantom command.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let gt: GroundTruth = io::read_json(path)?;
    gt.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        PipelineConfig {
            phantom: PhantomConfig {
                preset: Preset::Straight,
                snr: Some(20.0),
                ..PhantomConfig::default()
            },
            enhance: EnhanceConfig {
                tess_level: 2,
                ..EnhanceConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"version": "1", "csd": {"lamda": 2}}"#).unwrap();
        assert!(PipelineConfig::load(&p).unwrap_err().to_string().contains("lamda"));
        std::fs::write(&p, r#"{"version": "0"}"#).unwrap();
        assert!(PipelineConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"version": "1", "seed": 9}"#).unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.csd, CsdConfig::default());
    }

    #[test]
    fn straight_pipeline_runs_and_repeats() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let s = run_pipeline(&small(), &a).unwrap();
        run_pipeline(&small(), &b).unwrap();
        assert!(s.streamlines > 0);
        assert!(s.metrics.vc > 50.0, "{:?}", s.metrics);
        for f in &s.outputs {
            let f = f.file_name().unwrap();
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f:?}");
        }
    }
}
