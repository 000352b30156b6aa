//! Coordinate systems for the balanced spherical grid.
//!
//! The sphere is covered by two congruent partial latitude-longitude grids
//! ("Yin" and "Yang"), each spanning colatitude [π/4, 3π/4] and longitude
//! [−3π/4, 3π/4], with the Yang frame rotated so that its poles lie on the
//! Yin equator. Radially the grid is a hybrid: shell spacing is uniform
//! (`r0`) near the center and grows geometrically outward until the last
//! shell lands exactly on `r_max`.
//!
//! All functions here are pure; none mutate shared state.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Colatitude bounds of a component grid.
pub const THETA_MIN: f64 = std::f64::consts::FRAC_PI_4;
pub const THETA_MAX: f64 = 3.0 * std::f64::consts::FRAC_PI_4;
/// Longitude bound of a component grid (|φ| ≤ 3π/4).
pub const PHI_BOUND: f64 = 3.0 * std::f64::consts::FRAC_PI_4;

/// Which of the two congruent component grids a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GridId {
    Yin,
    Yang,
}

impl GridId {
    pub const BOTH: [GridId; 2] = [GridId::Yin, GridId::Yang];
}

/// Geometry of one component grid: resolutions plus the radial shell layout.
///
/// `growth` and `shells` are derived from (`n_r`, `r0`, `r_max`) at
/// construction and kept cached; they are never serialized independently.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    pub n_r: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    pub r0: f64,
    pub r_max: f64,
    #[serde(skip)]
    growth: f64,
    #[serde(skip)]
    shells: Vec<f64>,
}

impl GridConfig {
    pub fn new(n_r: usize, n_theta: usize, n_phi: usize, r0: f64, r_max: f64) -> Result<Self> {
        if n_r < 2 || n_theta < 2 || n_phi < 2 {
            return Err(Error::Config(format!(
                "grid resolutions must be >= 2 (got {n_r}x{n_theta}x{n_phi})"
            )));
        }
        if r0 <= 0.0 || !r0.is_finite() {
            return Err(Error::Config(format!("r0 must be positive (got {r0})")));
        }
        if r_max <= r0 || !r_max.is_finite() {
            return Err(Error::Config(format!(
                "r_max must exceed r0 (got r0={r0}, r_max={r_max})"
            )));
        }
        // Every shell interval is at least r0, so n_r shells starting at r0
        // cannot reach an r_max below n_r * r0.
        if r_max < n_r as f64 * r0 {
            return Err(Error::Config(format!(
                "r_max={r_max} unreachable: {n_r} shells with minimum interval r0={r0} \
                 require r_max >= {}",
                n_r as f64 * r0
            )));
        }
        let growth = (r_max / r0).powf(1.0 / (n_r as f64 - 1.0));
        let shells = build_shells(n_r, r0, growth);
        let last = *shells.last().unwrap();
        debug_assert!(
            ((last - r_max) / r_max).abs() <= 1e-12,
            "shell solve missed r_max: {last} vs {r_max}"
        );
        Ok(Self {
            n_r,
            n_theta,
            n_phi,
            r0,
            r_max,
            growth,
            shells,
        })
    }

    /// Derive angular resolutions from the radial one using the default
    /// ratio n_r : n_theta : n_phi = 1 : 2√3/3 : 2√3.
    pub fn from_radial(n_r: usize, r0: f64, r_max: f64) -> Result<Self> {
        let s = 2.0 * 3.0f64.sqrt();
        let n_theta = ((n_r as f64 * s / 3.0).round() as usize).max(2);
        let n_phi = ((n_r as f64 * s).round() as usize).max(2);
        Self::new(n_r, n_theta, n_phi, r0, r_max)
    }

    /// Geometric growth factor k with r0 * k^(n_r-1) = r_max.
    pub fn growth(&self) -> f64 {
        self.growth
    }

    /// Shell radii, r0 = shells[0] .. r_max = shells[n_r-1].
    pub fn shells(&self) -> &[f64] {
        &self.shells
    }

    pub fn angular_step_theta(&self) -> f64 {
        (THETA_MAX - THETA_MIN) / self.n_theta as f64
    }

    pub fn angular_step_phi(&self) -> f64 {
        2.0 * PHI_BOUND / self.n_phi as f64
    }

    /// Rebuild the derived shell table (used after deserialization, where
    /// `growth`/`shells` arrive empty).
    pub fn revalidate(self) -> Result<Self> {
        Self::new(self.n_r, self.n_theta, self.n_phi, self.r0, self.r_max)
    }
}

/// Shells follow r_i = max(r_{i-1} + r0, r0 * k^i): uniform spacing until the
/// geometric interval overtakes r0, geometric afterwards. With
/// k = (r_max/r0)^(1/(n_r-1)) and r_max >= n_r * r0 the geometric branch is
/// active at the last shell, so the outer radius is hit exactly.
fn build_shells(n_r: usize, r0: f64, growth: f64) -> Vec<f64> {
    let mut shells = Vec::with_capacity(n_r);
    shells.push(r0);
    for i in 1..n_r {
        let uniform = shells[i - 1] + r0;
        let geometric = r0 * growth.powi(i as i32);
        shells.push(uniform.max(geometric));
    }
    shells
}

/// Spherical coordinates local to a component grid frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSpherical {
    pub r: f64,
    /// Colatitude in [0, π].
    pub theta: f64,
    /// Longitude in (−π, π].
    pub phi: f64,
}

/// Result of assigning a point to its owning component grid.
#[derive(Debug, Clone, Copy)]
pub struct GridAssignment {
    pub grid: GridId,
    pub local: LocalSpherical,
    /// Continuous grid coordinates (u_r, u_theta, u_phi), each clamped to
    /// [0, n-1] along its axis.
    pub index: [f64; 3],
}

/// A ray with a parametric validity interval.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Self {
        debug_assert!((direction.norm() - 1.0).abs() < 1e-9, "direction not unit");
        debug_assert!(t_near < t_far);
        Self {
            origin,
            direction,
            t_near,
            t_far,
        }
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Rigid camera-to-world transform for an equirectangular camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > 1e-9 {
            return Err(Error::Input(format!(
                "rotation not orthonormal (deviation {dev:.3e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "rotation determinant {} != +1",
                rotation.determinant()
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }
}

/// The frame-exchange matrix between the two component grids. It is its own
/// inverse, so it maps Yang coordinates to Yin and vice versa.
pub fn frame_swap_matrix() -> Matrix3<f64> {
    Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0)
}

/// Map a point expressed in Yang coordinates to Yin coordinates. Involutory:
/// applying it twice is the identity, so it also maps Yin to Yang.
pub fn yang_to_yin(p: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-p.x, p.z, p.y)
}

/// Cartesian to spherical with the colatitude convention theta = arccos(z/r).
///
/// At the origin (r below 1e-300) theta = π/2 and phi = 0 by convention.
pub fn cartesian_to_spherical(p: Vector3<f64>) -> LocalSpherical {
    let r = p.norm();
    if r < 1e-300 {
        return LocalSpherical {
            r: 0.0,
            theta: std::f64::consts::FRAC_PI_2,
            phi: 0.0,
        };
    }
    let theta = (p.z / r).clamp(-1.0, 1.0).acos();
    let phi = if p.x == 0.0 && p.y == 0.0 {
        0.0
    } else {
        p.y.atan2(p.x)
    };
    LocalSpherical { r, theta, phi }
}

pub fn spherical_to_cartesian(s: &LocalSpherical) -> Vector3<f64> {
    let (st, ct) = s.theta.sin_cos();
    let (sp, cp) = s.phi.sin_cos();
    Vector3::new(s.r * st * cp, s.r * st * sp, s.r * ct)
}

/// Distance (in radians) from the angular bounds of a component grid;
/// non-negative iff the angles are inside the grid.
pub fn angular_margin(s: &LocalSpherical) -> f64 {
    (PHI_BOUND - s.phi.abs())
        .min(s.theta - THETA_MIN)
        .min(THETA_MAX - s.theta)
}

/// Assign a point to the component grid with the larger margin to its angular
/// boundary; ties go to Yin. A boundary-hugging owner would leave the
/// interpolation stencil without neighbors, so the deeper grid wins.
pub fn locate(p: Vector3<f64>, cfg: &GridConfig) -> GridAssignment {
    let yin = cartesian_to_spherical(p);
    let yang = cartesian_to_spherical(yang_to_yin(p));
    let (grid, local) = if angular_margin(&yin) >= angular_margin(&yang) {
        (GridId::Yin, yin)
    } else {
        (GridId::Yang, yang)
    };
    let (u_theta, u_phi) = angles_to_index(&local, cfg);
    GridAssignment {
        grid,
        local,
        index: [radius_to_index(local.r, cfg), u_theta, u_phi],
    }
}

/// Continuous radial index. Shell i sits at index i; between shells the index
/// interpolates linearly. Radii at or below r0 clamp to 0 (the innermost ball
/// is constant), radii at or beyond r_max clamp to n_r - 1.
pub fn radius_to_index(r: f64, cfg: &GridConfig) -> f64 {
    let shells = cfg.shells();
    if r <= shells[0] {
        return 0.0;
    }
    let last = cfg.n_r - 1;
    if r >= shells[last] {
        return last as f64;
    }
    // partition_point returns the first shell > r; r is inside [i, i+1).
    let hi = shells.partition_point(|&s| s <= r);
    let lo = hi - 1;
    lo as f64 + (r - shells[lo]) / (shells[hi] - shells[lo])
}

/// Inverse of [`radius_to_index`] on [0, n_r - 1].
pub fn index_to_radius(u: f64, cfg: &GridConfig) -> f64 {
    let shells = cfg.shells();
    let u = u.clamp(0.0, (cfg.n_r - 1) as f64);
    let lo = (u.floor() as usize).min(cfg.n_r - 2);
    let frac = u - lo as f64;
    shells[lo] + frac * (shells[lo + 1] - shells[lo])
}

/// Continuous angular indices with node centers at cell centers:
/// u = (angle - lower_bound)/step - 1/2.
pub fn angles_to_index(local: &LocalSpherical, cfg: &GridConfig) -> (f64, f64) {
    let u_theta = (local.theta - THETA_MIN) / cfg.angular_step_theta() - 0.5;
    let u_phi = (local.phi + PHI_BOUND) / cfg.angular_step_phi() - 0.5;
    (u_theta, u_phi)
}

/// Inverse of [`angles_to_index`].
pub fn index_to_angles(u_theta: f64, u_phi: f64, cfg: &GridConfig) -> (f64, f64) {
    (
        THETA_MIN + (u_theta + 0.5) * cfg.angular_step_theta(),
        -PHI_BOUND + (u_phi + 0.5) * cfg.angular_step_phi(),
    )
}

/// Camera-frame direction for continuous pixel coordinates of an
/// equirectangular image: longitude runs left to right across columns with
/// φ_img = 0 at the image center mapping to +x, and colatitude runs top to
/// bottom so the top row looks toward +z.
pub fn pixel_to_direction(u: f64, v: f64, width: usize, height: usize) -> Vector3<f64> {
    let phi = 2.0 * std::f64::consts::PI * (u + 0.5) / width as f64 - std::f64::consts::PI;
    let theta = std::f64::consts::PI * (v + 0.5) / height as f64;
    spherical_to_cartesian(&LocalSpherical {
        r: 1.0,
        theta,
        phi,
    })
}

/// Inverse of [`pixel_to_direction`]: continuous pixel coordinates a unit
/// direction falls on.
pub fn direction_to_pixel(d: Vector3<f64>, width: usize, height: usize) -> (f64, f64) {
    let s = cartesian_to_spherical(d);
    let u = (s.phi + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * width as f64 - 0.5;
    let v = s.theta / std::f64::consts::PI * height as f64 - 0.5;
    (u, v)
}

/// World-space ray for pixel (u, v). `t_far` is left unbounded; the sampler
/// clips against the scene bounding sphere.
pub fn pixel_to_ray(
    u: f64,
    v: f64,
    width: usize,
    height: usize,
    pose: &CameraPose,
) -> Result<Ray> {
    if !(0.0..width as f64).contains(&u) || !(0.0..height as f64).contains(&v) {
        return Err(Error::Input(format!(
            "pixel ({u}, {v}) outside {width}x{height} image"
        )));
    }
    let dir_cam = pixel_to_direction(u, v, width, height);
    Ok(Ray {
        origin: pose.translation,
        direction: pose.rotation * dir_cam,
        t_near: 0.0,
        t_far: f64::INFINITY,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn test_cfg() -> GridConfig {
        GridConfig::new(8, 6, 10, 0.5, 20.0).unwrap()
    }

    #[test]
    fn spherical_conventions() {
        let s = cartesian_to_spherical(Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(s.r, 1.0);
        assert_relative_eq!(s.theta, 0.0);
        assert_relative_eq!(s.phi, 0.0);

        let s = cartesian_to_spherical(Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(s.theta, FRAC_PI_2);
        assert_relative_eq!(s.phi, 0.0);

        let s = cartesian_to_spherical(Vector3::new(0.0, 1.0, 0.0));
        assert_relative_eq!(s.theta, FRAC_PI_2);
        assert_relative_eq!(s.phi, FRAC_PI_2);

        // Origin convention.
        let s = cartesian_to_spherical(Vector3::zeros());
        assert_eq!((s.r, s.theta, s.phi), (0.0, FRAC_PI_2, 0.0));
    }

    #[test]
    fn spherical_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let s = cartesian_to_spherical(p);
            let q = spherical_to_cartesian(&s);
            assert!((p - q).norm() <= 1e-9 * s.r.max(1.0), "{p:?} vs {q:?}");
        }
    }

    #[test]
    fn yang_matrix_matches_and_is_involutory() {
        assert_eq!(
            yang_to_yin(Vector3::new(0.0, 0.0, 1.0)),
            Vector3::new(0.0, 1.0, 0.0)
        );
        assert_eq!(
            yang_to_yin(Vector3::new(1.0, 0.0, 0.0)),
            Vector3::new(-1.0, 0.0, 0.0)
        );
        let m = frame_swap_matrix();
        assert_eq!(m * m, Matrix3::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            assert_eq!(yang_to_yin(yang_to_yin(p)), p);
            assert_relative_eq!(m * p, yang_to_yin(p));
        }
    }

    #[test]
    fn locate_picks_forced_grids() {
        let cfg = test_cfg();
        let a = locate(Vector3::new(1.0, 0.0, 0.0), &cfg);
        assert_eq!(a.grid, GridId::Yin);
        assert_relative_eq!(a.local.theta, FRAC_PI_2);
        assert_relative_eq!(a.local.phi, 0.0);

        // +z is the Yin pole; in the Yang frame it lies on the equator.
        let a = locate(Vector3::new(0.0, 0.0, 1.0), &cfg);
        assert_eq!(a.grid, GridId::Yang);
        assert_relative_eq!(a.local.theta, FRAC_PI_2);
        assert_relative_eq!(a.local.phi, FRAC_PI_2);

        // -x has Yin longitude π, outside ±3π/4.
        let a = locate(Vector3::new(-1.0, 0.0, 0.0), &cfg);
        assert_eq!(a.grid, GridId::Yang);
        assert_relative_eq!(a.local.theta, FRAC_PI_2);
        assert_relative_eq!(a.local.phi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn locate_covers_all_directions() {
        let cfg = test_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let p = random_unit(&mut rng);
            let a = locate(p, &cfg);
            assert!(
                angular_margin(&a.local) >= 0.0,
                "direction {p:?} assigned outside grid bounds"
            );
            assert!(a.local.theta >= FRAC_PI_4 && a.local.theta <= 3.0 * FRAC_PI_4);
            assert!(a.local.phi.abs() <= PHI_BOUND);
            assert!(a.index.iter().all(|u| u.is_finite()));
        }
    }

    #[test]
    fn locate_is_deterministic() {
        let cfg = test_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = random_unit(&mut rng) * rng.gen_range(0.1..10.0);
            let a = locate(p, &cfg);
            let b = locate(p, &cfg);
            assert_eq!(a.grid, b.grid);
            assert_eq!(a.index, b.index);
        }
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn radial_shells_hand_example() {
        // r0=1, k=2, n_r=4 -> shells {1,2,4,8}.
        let cfg = GridConfig::new(4, 2, 2, 1.0, 8.0).unwrap();
        assert_relative_eq!(cfg.growth(), 2.0, epsilon = 1e-12);
        let shells: Vec<f64> = cfg.shells().to_vec();
        assert_eq!(shells, vec![1.0, 2.0, 4.0, 8.0]);
        assert_relative_eq!(radius_to_index(4.0, &cfg), 2.0);
        assert_relative_eq!(radius_to_index(3.0, &cfg), 1.5);
        assert_relative_eq!(radius_to_index(1.0, &cfg), 0.0);
        assert_relative_eq!(radius_to_index(8.0, &cfg), 3.0);
        // Clamping.
        assert_relative_eq!(radius_to_index(0.2, &cfg), 0.0);
        assert_relative_eq!(radius_to_index(50.0, &cfg), 3.0);
    }

    #[test]
    fn radial_growth_solves_r_max() {
        for (n_r, r0, r_max) in [(2, 1.0, 3.0), (16, 0.03, 15.0), (48, 0.1, 15.0), (5, 1.0, 5.0)] {
            let cfg = GridConfig::new(n_r, 4, 4, r0, r_max).unwrap();
            let last = *cfg.shells().last().unwrap();
            assert!(
                ((last - r_max) / r_max).abs() <= 1e-12,
                "n_r={n_r}: last shell {last} vs r_max {r_max}"
            );
            assert!(((cfg.r0 * cfg.growth().powi(n_r as i32 - 1) - r_max) / r_max).abs() <= 1e-12);
        }
    }

    #[test]
    fn radial_intervals_monotone_and_at_least_r0() {
        let cfg = GridConfig::new(48, 4, 4, 0.03, 15.0).unwrap();
        let shells = cfg.shells();
        let mut prev = 0.0;
        for w in shells.windows(2) {
            let d = w[1] - w[0];
            assert!(d >= cfg.r0 * (1.0 - 1e-12), "interval {d} below r0");
            assert!(d >= prev * (1.0 - 1e-12), "intervals not monotone");
            prev = d;
        }
    }

    #[test]
    fn radial_index_round_trip_and_monotone() {
        let cfg = test_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut prev_u = -1.0;
        let mut rs: Vec<f64> = (0..200)
            .map(|_| rng.gen_range(cfg.r0..cfg.r_max))
            .collect();
        rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for r in rs {
            let u = radius_to_index(r, &cfg);
            assert!(u > prev_u, "not strictly increasing at r={r}");
            prev_u = u;
            let back = index_to_radius(u, &cfg);
            assert!((back - r).abs() <= 1e-9 * cfg.r_max);
        }
    }

    #[test]
    fn unreachable_r_max_rejected() {
        assert!(GridConfig::new(8, 4, 4, 1.0, 5.0).is_err());
        assert!(GridConfig::new(2, 4, 4, 1.0, 0.5).is_err());
        assert!(GridConfig::new(1, 4, 4, 1.0, 5.0).is_err());
    }

    #[test]
    fn angular_index_conventions() {
        let cfg = test_cfg();
        let dt = cfg.angular_step_theta();
        let mk = |theta: f64, phi: f64| LocalSpherical { r: 1.0, theta, phi };

        let (u, _) = angles_to_index(&mk(THETA_MIN + dt / 2.0, 0.0), &cfg);
        assert_relative_eq!(u, 0.0, epsilon = 1e-12);
        let (u, _) = angles_to_index(&mk(THETA_MAX - dt / 2.0, 0.0), &cfg);
        assert_relative_eq!(u, (cfg.n_theta - 1) as f64, epsilon = 1e-9);

        // n_theta = 2: Δθ = π/4, θ = π/2 lands halfway between the two nodes.
        let cfg2 = GridConfig::new(4, 2, 2, 1.0, 8.0).unwrap();
        let (u, _) = angles_to_index(&mk(FRAC_PI_2, 0.0), &cfg2);
        assert_relative_eq!(u, 0.5, epsilon = 1e-12);

        // Round trip.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let theta = rng.gen_range(THETA_MIN..THETA_MAX);
            let phi = rng.gen_range(-PHI_BOUND..PHI_BOUND);
            let (ut, up) = angles_to_index(&mk(theta, phi), &cfg);
            let (theta2, phi2) = index_to_angles(ut, up, &cfg);
            assert_relative_eq!(theta, theta2, epsilon = 1e-9);
            assert_relative_eq!(phi, phi2, epsilon = 1e-9);
        }
    }

    #[test]
    fn pixel_ray_conventions() {
        let pose = CameraPose::identity();
        let (w, h) = (16, 8);
        // Row center with φ_img = 0 looks along +x.
        let ray = pixel_to_ray(w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h, &pose).unwrap();
        assert!((ray.direction - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);

        // Top row points near +z.
        let ray = pixel_to_ray(3.0, 0.0, w, h, &pose).unwrap();
        let theta = PI * 0.5 / h as f64;
        assert_relative_eq!(ray.direction.z, theta.cos(), epsilon = 1e-12);

        // Origin comes from the pose translation.
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let ray = pixel_to_ray(0.0, 0.0, w, h, &pose).unwrap();
        assert_eq!(ray.origin, Vector3::new(1.0, 2.0, 3.0));

        assert!(pixel_to_ray(-1.0, 0.0, w, h, &pose).is_err());
        assert!(pixel_to_ray(0.0, 8.0, w, h, &pose).is_err());
        assert!((pixel_to_ray(2.0, 2.0, w, h, &pose).unwrap().direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_validation() {
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(bad, Vector3::zeros()).is_err());
        // Reflections (det = -1) are rejected.
        let refl = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(refl, Vector3::zeros()).is_err());
    }
}
