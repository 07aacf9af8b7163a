//! The contour-enhancement kernel on positions and orientations.
//!
//! [`kernel_r3s2`] is the closed-form approximation of the Green's function
//! with source `(0, e_z)`, written as a product of two planar kernels.
//! [`ContourKernel`] wraps it with precomputed constants and an axially
//! symmetric variant suitable for shift-twist convolution, where the result
//! must not depend on the choice of frame about the source orientation.

mod oracle;
mod paths;
mod table;

pub use oracle::{monte_carlo_agreement, pde_residual, pearson, OracleGrid};
pub use paths::{sample_paths, SamplePathCloud};
pub use table::{discretize_kernel, identity_kernel, EnhancementKernel, KernelEntry, TableOptions};

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_to_north, UnitVector, Vec3};

/// Diffusion constants and evolution time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub d33: f64,
    pub d44: f64,
    pub t: f64,
}

impl KernelParams {
    pub fn new(d33: f64, d44: f64, t: f64) -> Result<Self> {
        let p = Self { d33, d44, t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("D33", self.d33), ("D44", self.d44), ("t", self.t)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(θ/2) / tan(θ/2)`, with the series-based substitute near zero.
fn half_angle_cot(theta: f64) -> f64 {
    if theta.abs() < PI / 10.0 {
        (theta / 2.0).cos() / (1.0 - theta * theta / 24.0)
    } else {
        (theta / 2.0) / (theta / 2.0).tan()
    }
}

/// The energy functional of the planar kernel. Requires `|θ| < π`.
pub fn en_energy(x: f64, y: f64, theta: f64, d33: f64, d44: f64) -> f64 {
    let c = half_angle_cot(theta);
    let a = theta * theta / d44 + (theta * y / 2.0 + c * x).powi(2) / d33;
    let b = (-x * theta / 2.0 + c * y).powi(2) / (d44 * d33);
    a * a + b
}

/// Planar (two spatial dimensions, one angle) kernel.
pub fn kernel_r2s1(x: f64, y: f64, theta: f64, p: &KernelParams) -> f64 {
    let pref = 1.0 / (32.0 * PI * p.t * p.t * p.d44 * p.d33);
    pref * (-(en_energy(x, y, theta, p.d33, p.d44) / (4.0 * p.t)).sqrt()).exp()
}

/// Angles `(β, γ)` with `n = (sin β, -cos β sin γ, cos β cos γ)`.
///
/// `γ` is clamped to `±(π/2 - 1e-6)`; the flag reports whether that happened.
pub fn orientation_angles(n: &UnitVector) -> (f64, f64, bool) {
    const LIMIT: f64 = FRAC_PI_2 - 1e-6;
    let (x, y, z) = (n.x(), n.y(), n.z());
    let (gamma, clamped) = if z == 0.0 && y == 0.0 {
        (0.0, false)
    } else {
        let g = (-y / z).atan();
        if g.abs() > LIMIT || z == 0.0 {
            (LIMIT.copysign(if z == 0.0 { -y } else { g }), true)
        } else {
            (g, false)
        }
    };
    // cos β carries the sign of n_z since cos γ > 0.
    let cb = (y * y + z * z).sqrt();
    let cb = if z < 0.0 { -cb } else { cb };
    let mut beta = x.atan2(cb);
    if beta >= PI {
        beta -= 2.0 * PI;
    }
    (beta, gamma, clamped)
}

/// The closed-form kernel for source `(0, e_z)` evaluated at `(y, n)`.
pub fn kernel_r3s2(y: &Vec3, n: &UnitVector, p: &KernelParams) -> f64 {
    kernel_r3s2_diag(y, n, p).0
}

/// As [`kernel_r3s2`], also reporting whether the equatorial clamp was used.
pub fn kernel_r3s2_diag(y: &Vec3, n: &UnitVector, p: &KernelParams) -> (f64, bool) {
    let (beta, gamma, clamped) = orientation_angles(n);
    let pref = 8.0 / 2f64.sqrt() * p.d33 * p.t * (PI * p.t * p.d44).sqrt();
    let v = pref * kernel_r2s1(y.z / 2.0, y.x, beta, p) * kernel_r2s1(y.z / 2.0, -y.y, gamma, p);
    (v, clamped)
}

/// Lateral displacement below which the frame about the source axis is
/// taken from the target orientation instead.
const CANONICAL_EPS: f64 = 1e-9;

/// Evaluator for the kernel with precomputed constants.
#[derive(Debug, Clone, Copy)]
pub struct ContourKernel {
    params: KernelParams,
    pref3: f64,
    pref2: f64,
    inv_4t: f64,
}

impl ContourKernel {
    pub fn new(params: KernelParams) -> Result<Self> {
        params.validate()?;
        let KernelParams { d33, d44, t } = params;
        Ok(Self {
            params,
            pref3: 8.0 / 2f64.sqrt() * d33 * t * (PI * t * d44).sqrt(),
            pref2: 1.0 / (32.0 * PI * t * t * d44 * d33),
            inv_4t: 1.0 / (4.0 * t),
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Kernel value at the origin, an upper bound for all values.
    pub fn peak(&self) -> f64 {
        self.pref3 * self.pref2 * self.pref2
    }

    fn planar(&self, x: f64, y: f64, theta: f64) -> f64 {
        let en = en_energy(x, y, theta, self.params.d33, self.params.d44);
        self.pref2 * (-(en * self.inv_4t).sqrt()).exp()
    }

    /// The closed form without symmetrization.
    pub fn raw(&self, u: &Vec3, m: &UnitVector) -> f64 {
        let (beta, gamma, _) = orientation_angles(m);
        self.pref3 * self.planar(u.z / 2.0, u.x, beta) * self.planar(u.z / 2.0, -u.y, gamma)
    }

    /// The kernel made exactly invariant under rotations about `e_z`.
    ///
    /// Both arguments are rotated about `e_z` so that the lateral part of
    /// `u` lies on the positive x axis (or, for `u` on the axis, so that the
    /// lateral part of `m` does), then the closed form is evaluated.
    pub fn eval(&self, u: &Vec3, m: &UnitVector) -> f64 {
        let (cu, cm) = canonical_pose(u, m);
        self.raw(&cu, &cm)
    }

    /// Value of the kernel centred at `(y_src, n_src)` observed at `(y, n)`.
    pub fn eval_pose(&self, y: &Vec3, n: &UnitVector, y_src: &Vec3, n_src: &UnitVector) -> f64 {
        let r = rotation_to_north(n_src);
        self.eval(&r.apply_inverse(&(y - y_src)), &r.rotate_inverse(n))
    }

    /// Upper bound of [`Self::eval`] from the spatial arguments alone.
    ///
    /// `axial` is the displacement along the source axis and `lateral` the
    /// distance from it.
    pub fn spatial_bound(&self, axial: f64, lateral: f64) -> f64 {
        let z2 = axial * axial / 4.0;
        let (r1, r2) = if lateral > CANONICAL_EPS {
            (z2 + lateral * lateral, z2)
        } else {
            (z2, z2)
        };
        let e = (self.energy_lower_bound(r1).sqrt() + self.energy_lower_bound(r2).sqrt())
            * self.inv_4t.sqrt();
        self.peak() * (-e).exp()
    }

    /// Upper bound of [`Self::eval`] given the spatial arguments and the
    /// angle between target orientation and source axis.
    pub fn bound(&self, axial: f64, lateral: f64, angle: f64) -> f64 {
        let spatial = self.spatial_bound(axial, lateral);
        // Each planar energy is at least θ⁴/D44², and the two planar angles
        // satisfy β² + γ² ≥ angle².
        let angular = self.peak() * (-(angle * angle / self.params.d44) * self.inv_4t.sqrt()).exp();
        spatial.min(angular)
    }

    /// Lower bound of the planar energy at squared planar radius `r2`.
    ///
    /// With `B + C ≥ r2` for the two quadratic terms of the energy, the
    /// minimum over splits gives `r2²/D33²` for small radii and
    /// `r2/(D33 D44) - 1/(4 D44²)` beyond `r2 = D33/(2 D44)`.
    fn energy_lower_bound(&self, r2: f64) -> f64 {
        let KernelParams { d33, d44, .. } = self.params;
        if r2 <= d33 / (2.0 * d44) {
            r2 * r2 / (d33 * d33)
        } else {
            r2 / (d33 * d44) - 1.0 / (4.0 * d44 * d44)
        }
    }
}

fn canonical_pose(u: &Vec3, m: &UnitVector) -> (Vec3, UnitVector) {
    let rho = u.x.hypot(u.y);
    let (c, s) = if rho > CANONICAL_EPS {
        (u.x / rho, u.y / rho)
    } else {
        let mr = m.x().hypot(m.y());
        if mr > CANONICAL_EPS {
            (m.x() / mr, m.y() / mr)
        } else {
            return (*u, *m);
        }
    };
    // Rotation about e_z by minus the azimuth (c, s).
    let rot = |v: &Vec3| Vec3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z);
    let cu = if rho > CANONICAL_EPS {
        Vec3::new(rho, 0.0, u.z)
    } else {
        rot(u)
    };
    (cu, UnitVector::new_unchecked(rot(m.as_vec())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation, UnitVector};
    use proptest::prelude::*;

    const D33: f64 = 1.0;
    const D44: f64 = 0.02;

    fn params() -> KernelParams {
        KernelParams::new(D33, D44, 1.4).unwrap()
    }

    fn unit(x: f64, y: f64, z: f64) -> UnitVector {
        UnitVector::from_xyz(x, y, z).unwrap()
    }

    #[test]
    fn energy_limits() {
        assert_eq!(en_energy(0.0, 0.0, 0.0, D33, D44), 0.0);
        let x: f64 = 1.7;
        assert!((en_energy(x, 0.0, 0.0, D33, D44) - x.powi(4) / (D33 * D33)).abs() < 1e-12);
        let y: f64 = 0.6;
        assert!((en_energy(0.0, y, 0.0, D33, D44) - y * y / (D44 * D33)).abs() < 1e-12);
    }

    #[test]
    fn guard_jump_matches_series_remainder() {
        // The substitute differs from the exact factor by x⁴/120 + O(x⁶) with
        // x = θ/2, which bounds the jump at |θ| = π/10.
        let t = PI / 10.0;
        let below = (t / 2.0).cos() / (1.0 - t * t / 24.0);
        let above = (t / 2.0) / (t / 2.0).tan();
        let jump = (below - above).abs() / above;
        let x = t / 2.0;
        assert!(jump < 1.1 * x.powi(4) / 120.0, "jump {jump:e}");
        assert!(jump > 0.9 * x.powi(4) / 120.0);
        let e_below = en_energy(0.3, -0.2, t * (1.0 - 1e-15), D33, D44);
        let e_above = en_energy(0.3, -0.2, t, D33, D44);
        assert!((e_below - e_above).abs() / e_above < 5e-5);
    }

    #[test]
    fn full_sign_flip_is_not_a_symmetry() {
        // (θy/2 + c x) becomes (θy/2 - c x) when all three arguments flip.
        let a = en_energy(1.0, 0.5, 0.8, D33, D44);
        let b = en_energy(-1.0, -0.5, -0.8, D33, D44);
        assert!((a - b).abs() > 1e-3 * a);
    }

    #[test]
    fn planar_value_at_origin() {
        let p = params();
        let want = 1.0 / (32.0 * PI * p.t * p.t * p.d44 * p.d33);
        assert!((kernel_r2s1(0.0, 0.0, 0.0, &p) - want).abs() < 1e-15 * want);
    }

    #[test]
    fn spatial_value_at_origin() {
        let p = params();
        let planar = 1.0 / (32.0 * PI * p.t * p.t * p.d44 * p.d33);
        let want = 8.0 / 2f64.sqrt() * p.d33 * p.t * (PI * p.t * p.d44).sqrt() * planar * planar;
        let got = kernel_r3s2(&Vec3::zeros(), &UnitVector::EZ, &p);
        assert!((got - want).abs() < 1e-14 * want);
        assert!((ContourKernel::new(p).unwrap().peak() - want).abs() < 1e-14 * want);
    }

    #[test]
    fn decays_along_lateral_axis() {
        let p = params();
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let v = kernel_r3s2(&Vec3::new(i as f64 * 0.1, 0.0, 0.0), &UnitVector::EZ, &p);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn direct_mass_is_finite_and_positive() {
        use crate::geometry::tessellation::tessellate_sphere;
        let p = params();
        let t = tessellate_sphere(3).unwrap();
        let mut mass = 0.0;
        for x in -5..=5 {
            for y in -5..=5 {
                for z in -5..=5 {
                    let u = Vec3::new(x as f64, y as f64, z as f64);
                    for (d, w) in t.directions().iter().zip(t.weights()) {
                        mass += kernel_r3s2(&u, d, &p) * w;
                    }
                }
            }
        }
        assert!(mass.is_finite() && mass > 0.0, "{mass}");
    }

    #[test]
    fn equatorial_orientation_is_clamped() {
        let (_, g, clamped) = orientation_angles(&unit(0.0, 1.0, 0.0));
        assert!(clamped);
        assert!((g + (FRAC_PI_2 - 1e-6)).abs() < 1e-15);
        let (b, g, clamped) = orientation_angles(&unit(1.0, 0.0, 0.0));
        assert!(!clamped);
        assert_eq!(g, 0.0);
        assert!((b - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(0.0, 0.1, 1.0).is_err());
        assert!(KernelParams::new(1.0, -0.1, 1.0).is_err());
        assert!(KernelParams::new(1.0, 0.1, f64::NAN).is_err());
    }

    fn unit_vector() -> impl Strategy<Value = UnitVector> {
        (-1.0f64..1.0, 0.0f64..std::f64::consts::TAU).prop_map(|(z, phi)| {
            let r = (1.0 - z * z).sqrt();
            unit(r * phi.cos(), r * phi.sin(), z)
        })
    }

    proptest! {
        #[test]
        fn angle_parameterization_round_trip(n in unit_vector()) {
            let (b, g, clamped) = orientation_angles(&n);
            prop_assume!(!clamped);
            let back = Vec3::new(b.sin(), -b.cos() * g.sin(), b.cos() * g.cos());
            prop_assert!((back - n.as_vec()).norm() < 1e-9);
            prop_assert!((-PI..PI).contains(&b));
        }

        #[test]
        fn energy_pair_flip_symmetry(x in -5.0f64..5.0, y in -5.0f64..5.0, th in -3.0f64..3.0) {
            // Flipping any two of the three arguments leaves the energy unchanged.
            let a = en_energy(x, y, th, D33, D44);
            prop_assert!(a >= 0.0);
            for b in [
                en_energy(-x, -y, th, D33, D44),
                en_energy(-x, y, -th, D33, D44),
                en_energy(x, -y, -th, D33, D44),
            ] {
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
            let p = params();
            let k1 = kernel_r2s1(x, y, th, &p);
            let k2 = kernel_r2s1(-x, -y, th, &p);
            prop_assert!((k1 - k2).abs() <= 1e-12 * k1.max(1e-300));
        }

        #[test]
        fn planar_kernel_decreases_with_energy(x in -3.0f64..3.0, y in -3.0f64..3.0, th in -3.0f64..3.0, s in 1.01f64..3.0) {
            // Scaling all arguments of a nonzero point up increases the energy.
            let p = params();
            let e1 = en_energy(x, y, th, D33, D44);
            let e2 = en_energy(s * x, s * y, th, D33, D44);
            prop_assume!(e2 > e1 * (1.0 + 1e-9));
            prop_assert!(kernel_r2s1(s * x, s * y, th, &p) < kernel_r2s1(x, y, th, &p));
        }

        #[test]
        fn kernel_is_nonnegative(u in prop::array::uniform3(-6.0f64..6.0), m in unit_vector()) {
            prop_assert!(kernel_r3s2(&Vec3::from(u), &m, &params()) >= 0.0);
        }

        #[test]
        fn bounds_dominate(u in prop::array::uniform3(-6.0f64..6.0), m in unit_vector(), t in 0.2f64..5.0) {
            let k = ContourKernel::new(KernelParams::new(1.0, 0.03, t).unwrap()).unwrap();
            let u = Vec3::from(u);
            let v = k.eval(&u, &m);
            let lateral = u.x.hypot(u.y);
            let angle = m.angle_to(&UnitVector::EZ);
            prop_assert!(v <= k.bound(u.z, lateral, angle) * (1.0 + 1e-9));
            prop_assert!(k.raw(&u, &m) <= k.peak() * (1.0 + 1e-12));
        }

        #[test]
        fn symmetrized_kernel_is_axially_invariant(
            u in prop::array::uniform3(-4.0f64..4.0), m in unit_vector(), a in -PI..PI
        ) {
            let k = ContourKernel::new(params()).unwrap();
            let r = Rotation::about_z(a);
            let u = Vec3::from(u);
            let v1 = k.eval(&u, &m);
            let v2 = k.eval(&r.apply(&u), &r.rotate(&m));
            prop_assert!((v1 - v2).abs() <= 1e-9 * k.peak());
        }
    }
}
