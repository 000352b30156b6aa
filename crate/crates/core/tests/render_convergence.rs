//! Quadrature behavior of the volume renderer on frozen fields.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spherad::field::RadianceField;
use spherad::geom::{GridConfig, Ray};
use spherad::render::{merge_samples, render_ray};

fn radial_profile_field() -> RadianceField {
    // Density varying along r only (rank-1 radial profile), constant color.
    let cfg = GridConfig::new(10, 4, 6, 0.2, 6.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut field = RadianceField::new(cfg, 1, 1, 2, Some((2, 4)), &mut rng);
    for id in spherad::geom::GridId::BOTH {
        let comp = &mut field.grid.factors_mut(id).density[0];
        for (i, v) in comp.v_r.iter_mut().enumerate() {
            // Smooth bump peaking mid-range.
            let x = i as f64 / 9.0;
            *v = 3.0 * (-((x - 0.45) * 4.0).powi(2)).exp();
        }
        comp.m_theta_phi.fill(1.0);
        comp.v_theta.iter_mut().for_each(|x| *x = 0.0);
        comp.v_phi.iter_mut().for_each(|x| *x = 0.0);
    }
    field
}

/// Refinement never hurts: the render difference between N and 2N uniform
/// samples shrinks as N doubles.
#[test]
fn refinement_differences_shrink() {
    let field = radial_profile_field();
    let ray = Ray::new(
        Vector3::zeros(),
        Vector3::new(0.6, 0.48, 0.64).normalize(),
        0.0,
        f64::INFINITY,
    );
    let render_at = |n: usize| -> [f64; 3] {
        let t0 = 0.2;
        let t_far = 6.0;
        let t: Vec<f64> = (0..n)
            .map(|i| t0 + (t_far - t0) * i as f64 / n as f64)
            .collect();
        let samples = merge_samples(&t, &[], t_far, ray);
        render_ray(&field, &ray, &samples).rgb
    };
    let diff = |a: [f64; 3], b: [f64; 3]| -> f64 {
        (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0
    };
    let mut diffs = Vec::new();
    for n in [32usize, 64, 128, 256] {
        diffs.push(diff(render_at(n), render_at(2 * n)));
    }
    for w in diffs.windows(2) {
        assert!(
            w[1] < w[0],
            "refinement differences are not shrinking: {diffs:?}"
        );
    }
}

/// Bit-identical output for identical seeds, and across repeated calls.
#[test]
fn render_is_deterministic() {
    let field = radial_profile_field();
    let pose = spherad::geom::CameraPose::identity();
    let rc = spherad::render::RenderConfig {
        n_coarse: 12,
        n_fine: 8,
        ..Default::default()
    };
    let a = spherad::render::render_image(&field, &pose, 24, 12, &rc).unwrap();
    let b = spherad::render::render_image(&field, &pose, 24, 12, &rc).unwrap();
    assert_eq!(a.data, b.data);
}
