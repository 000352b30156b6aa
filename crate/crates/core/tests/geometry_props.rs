//! Property tests for the coordinate machinery.

use nalgebra::Vector3;
use proptest::prelude::*;
use spherad::geom::{
    angular_margin, cartesian_to_spherical, index_to_radius, locate, radius_to_index,
    spherical_to_cartesian, GridConfig,
};

fn grid() -> GridConfig {
    GridConfig::new(12, 8, 20, 0.25, 30.0).unwrap()
}

proptest! {
    #[test]
    fn spherical_round_trip(x in -20.0f64..20.0, y in -20.0f64..20.0, z in -20.0f64..20.0) {
        let p = Vector3::new(x, y, z);
        let s = cartesian_to_spherical(p);
        let q = spherical_to_cartesian(&s);
        prop_assert!((p - q).norm() <= 1e-9 * s.r.max(1.0));
    }

    #[test]
    fn every_direction_is_owned(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
        prop_assume!(Vector3::new(x, y, z).norm() > 1e-6);
        let cfg = grid();
        let a = locate(Vector3::new(x, y, z), &cfg);
        prop_assert!(angular_margin(&a.local) >= 0.0);
        prop_assert!(a.index.iter().all(|u| u.is_finite()));
    }

    #[test]
    fn radius_index_round_trip(r in 0.25f64..30.0) {
        let cfg = grid();
        let u = radius_to_index(r, &cfg);
        let back = index_to_radius(u, &cfg);
        prop_assert!((back - r).abs() <= 1e-9 * cfg.r_max);
    }

    #[test]
    fn radius_index_monotone(a in 0.25f64..30.0, b in 0.25f64..30.0) {
        prop_assume!((a - b).abs() > 1e-9);
        let cfg = grid();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(radius_to_index(lo, &cfg) < radius_to_index(hi, &cfg));
    }

    #[test]
    fn srgb_lattice_identity(b in 0u8..=255) {
        prop_assert_eq!(
            spherad::img::srgb_encode_u8(spherad::img::srgb_decode_u8(b)),
            b
        );
    }
}
