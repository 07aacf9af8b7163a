//! Sample paths of the stochastic process whose transition density the
//! kernel approximates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{UnitVector, Vec3};
use crate::kernel::KernelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePathCloud {
    pub endpoints: Vec<(Vec3, UnitVector)>,
    pub n_steps: usize,
    pub seed: u64,
}

impl SamplePathCloud {
    pub fn len(&self) -> usize {
        self.endpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.endpoints.is_empty()
    }
}

/// Euler-Maruyama simulation of `n_paths` particles started at `(0, e_z)`.
///
/// Each step moves the particle along its own orientation by a centred
/// Gaussian of variance `2 D33 Δt`, and perturbs the orientation by an
/// isotropic Gaussian of variance `2 D44 Δt` per tangent component followed
/// by renormalization. Path `k` draws from its own stream, so the result does
/// not depend on the number of threads.
pub fn sample_paths(
    params: &KernelParams,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<SamplePathCloud> {
    params.validate()?;
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::invalid("path and step counts must be positive"));
    }
    let dt = params.t / n_steps as f64;
    let sd_space = (2.0 * params.d33 * dt).sqrt();
    let sd_angle = (2.0 * params.d44 * dt).sqrt();
    let endpoints = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut y = Vec3::zeros();
            let mut n = Vec3::z();
            for _ in 0..n_steps {
                let e: f64 = StandardNormal.sample(&mut rng);
                y += n * (sd_space * e);
                // Orthonormal tangent basis at n.
                let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                let t1 = n.cross(&helper).normalize();
                let t2 = n.cross(&t1);
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                n = (n + (t1 * a + t2 * b) * sd_angle).normalize();
            }
            (y, UnitVector::new_unchecked(n))
        })
        .collect();
    Ok(SamplePathCloud {
        endpoints,
        n_steps,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_angular_diffusion_stays_on_axis() {
        let p = KernelParams::new(1.0, 1e-9, 1.0).unwrap();
        let c = sample_paths(&p, 200, 50, 3).unwrap();
        assert_eq!(c.len(), 200);
        for (y, n) in &c.endpoints {
            assert!(y.x.hypot(y.y) < 1e-3);
            assert!((n.as_vec().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_paths_rejected() {
        let p = KernelParams::new(1.0, 0.02, 1.0).unwrap();
        assert!(sample_paths(&p, 0, 10, 1).is_err());
        assert!(sample_paths(&p, 10, 0, 1).is_err());
    }

    #[test]
    fn axial_variance_matches_diffusivity() {
        // With little angular motion the axial coordinate is Brownian with
        // variance 2 D33 t.
        let p = KernelParams::new(1.5, 1e-6, 2.0).unwrap();
        let c = sample_paths(&p, 20_000, 20, 11).unwrap();
        let var = c.endpoints.iter().map(|(y, _)| y.z * y.z).sum::<f64>() / c.len() as f64;
        assert!((var / (2.0 * 1.5 * 2.0) - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let p = KernelParams::new(1.0, 0.02, 2.0).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_paths(&p, 500, 30, 9).unwrap())
        };
        assert_eq!(run(1), run(3));
    }
}
