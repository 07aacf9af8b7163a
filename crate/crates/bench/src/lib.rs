//! Shared fixtures for the benchmarks.

use fodpipe::csd::{csd_fit, estimate_response, single_fiber_mask, CsdSettings};
use fodpipe::phantom::{generate_phantom, planted_outliers, preset, OutlierShape, Preset};
use fodpipe::{FodField, Tractogram};

/// CSD field of the 90° crossing phantom at SNR 10.
pub fn crossing_field() -> FodField {
    let (dwi, _) = generate_phantom(&preset(Preset::Crossing90, Some(10.0), 3000.0, 64, 0)).unwrap();
    let mask = single_fiber_mask(&dwi, 0.7).unwrap();
    let response = estimate_response(&dwi, &mask, 8).unwrap();
    csd_fit(&dwi, &response, CsdSettings::default()).unwrap()
}

pub fn outlier_bundle(n_fibers: usize) -> Tractogram {
    planted_outliers(OutlierShape::Curved, n_fibers, 3, 0).unwrap().tractogram
}
