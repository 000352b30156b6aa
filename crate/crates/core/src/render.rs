//! Ray sampling and the volume rendering integral.
//!
//! Coarse samples are placed where the ray crosses log-uniformly spaced
//! radii between the first shell and the bounding-sphere exit, matching the
//! geometric growth of the radial grid. A pooled-density pass turns those
//! into importance weights, fine samples come from inverse-transform
//! sampling of the resulting piecewise-constant distribution, and the merged
//! set feeds the emission-absorption sum with an environment-map background
//! term weighted by the leftover transmittance.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{encode_direction, RadianceField};
use crate::geom::{GridConfig, Ray};
use crate::grid::{density_activation, PooledDensity};

/// Collapse sample positions closer than this during the coarse/fine merge.
pub const MERGE_EPS: f64 = 1e-9;
/// Per-bin probability floor for fine sampling.
pub const FINE_WEIGHT_FLOOR: f64 = 1e-5;

/// Sorted sample positions along one ray. `deltas[i] = t[i+1] - t[i]`, with
/// the last delta reaching the bounding-sphere exit.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
    pub ray: Ray,
}

/// Result of rendering one ray.
#[derive(Debug, Clone)]
pub struct RenderOut {
    pub rgb: [f64; 3],
    /// Transmittance left for the background after the last sample.
    pub transmittance_bg: f64,
    pub weights: Option<Vec<f64>>,
}

/// How samples are drawn and the integral is evaluated.
#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Pooling kernel for the coarse density pass.
    pub kernel: usize,
    /// Jitter coarse posts and draw fine samples stochastically (training);
    /// when false everything is deterministic (evaluation).
    pub stochastic: bool,
    /// Stop compositing once transmittance falls below this. Zero disables
    /// truncation (required by the gradient tests).
    pub transmittance_cutoff: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 48,
            n_fine: 32,
            kernel: 2,
            stochastic: false,
            transmittance_cutoff: 0.0,
        }
    }
}

/// Parameter t > max(t_near, 0) at which the ray leaves the sphere |x| = r,
/// or None when the ray never reaches that radius ahead of t_near.
fn exit_crossing(ray: &Ray, r: f64) -> Option<f64> {
    let od = ray.origin.dot(&ray.direction);
    let disc = od * od + r * r - ray.origin.norm_squared();
    if disc < 0.0 {
        return None;
    }
    let t = -od + disc.sqrt();
    (t >= ray.t_near.max(0.0) - 1e-12).then_some(t)
}

/// Coarse sample positions: n_c crossings of log-spaced radii from
/// max(r0, |x(t_near)|) out to r_max. Deterministic mode places the posts
/// exactly; stochastic mode jitters each within its half-spacing window.
/// Returns an empty vector when the ray misses the bounding sphere.
pub fn coarse_samples(
    ray: &Ray,
    n_coarse: usize,
    cfg: &GridConfig,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Vec<f64> {
    assert!(n_coarse >= 2, "need at least two coarse samples");
    let start_radius = ray.point_at(ray.t_near.max(0.0)).norm();
    if start_radius >= cfg.r_max {
        // Outward-looking capture: rays are expected to start inside the
        // bounding sphere; anything else renders as pure background.
        return Vec::new();
    }
    let rho_lo = cfg.r0.max(start_radius);
    let rho_hi = cfg.r_max;
    if rho_lo >= rho_hi {
        return Vec::new();
    }
    let log_lo = rho_lo.ln();
    let span = rho_hi.ln() - log_lo;
    let denom = (n_coarse - 1) as f64;
    let mut out = Vec::with_capacity(n_coarse);
    let mut prev = f64::NEG_INFINITY;
    for j in 0..n_coarse {
        let u = match rng.as_deref_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        let s = ((j as f64 - 0.5 + u) / denom).clamp(0.0, 1.0);
        let rho = (log_lo + s * span).exp();
        if let Some(t) = exit_crossing(ray, rho) {
            if t > prev + MERGE_EPS {
                out.push(t);
                prev = t;
            }
        }
    }
    out
}

/// Contribution weights w_i = tau_i (1 - exp(-sigma_i delta_i)) with
/// tau_i = exp(-sum_{j<i} sigma_j delta_j).
pub fn importance_weights(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.len() != deltas.len() {
        return Err(Error::Input(format!(
            "importance_weights: {} sigmas vs {} deltas",
            sigmas.len(),
            deltas.len()
        )));
    }
    let mut tau = 1.0;
    let mut out = Vec::with_capacity(sigmas.len());
    for (&s, &d) in sigmas.iter().zip(deltas.iter()) {
        debug_assert!(s >= 0.0 && d >= 0.0);
        let alpha = 1.0 - (-s * d).exp();
        out.push(tau * alpha);
        tau *= 1.0 - alpha;
    }
    Ok(out)
}

/// Background transmittance after all samples.
pub fn background_transmittance(sigmas: &[f64], deltas: &[f64]) -> f64 {
    (-sigmas
        .iter()
        .zip(deltas.iter())
        .map(|(s, d)| s * d)
        .sum::<f64>())
    .exp()
}

/// Inverse-transform samples of the piecewise-constant distribution over
/// `bin_edges` proportional to `weights` plus a small floor. A zero total
/// weight falls back to uniform sampling over the full span. Output sorted.
pub fn fine_samples(
    weights: &[f64],
    bin_edges: &[f64],
    n_fine: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<f64>> {
    let us: Vec<f64> = (0..n_fine).map(|_| rng.gen::<f64>()).collect();
    fine_samples_from_uniforms(weights, bin_edges, &us)
}

/// Deterministic variant using stratified midpoints, for evaluation renders.
pub fn fine_samples_midpoint(weights: &[f64], bin_edges: &[f64], n_fine: usize) -> Result<Vec<f64>> {
    let us: Vec<f64> = (0..n_fine)
        .map(|j| (j as f64 + 0.5) / n_fine as f64)
        .collect();
    fine_samples_from_uniforms(weights, bin_edges, &us)
}

fn fine_samples_from_uniforms(weights: &[f64], bin_edges: &[f64], us: &[f64]) -> Result<Vec<f64>> {
    if bin_edges.len() != weights.len() + 1 {
        return Err(Error::Input(format!(
            "fine_samples: {} weights need {} edges, got {}",
            weights.len(),
            weights.len() + 1,
            bin_edges.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    let first = bin_edges[0];
    let last = *bin_edges.last().unwrap();
    let mut out = Vec::with_capacity(us.len());
    if total <= 0.0 {
        for &u in us {
            out.push(first + u * (last - first));
        }
    } else {
        let mut cdf = Vec::with_capacity(weights.len() + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for &w in weights {
            acc += w.max(0.0) + FINE_WEIGHT_FLOOR;
            cdf.push(acc);
        }
        for &u in us {
            let target = u * acc;
            // First bin whose cumulative mass exceeds the target.
            let hi = cdf.partition_point(|&c| c <= target).min(weights.len());
            let lo = hi - 1;
            let frac = (target - cdf[lo]) / (cdf[hi] - cdf[lo]);
            out.push(bin_edges[lo] + frac * (bin_edges[hi] - bin_edges[lo]));
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Union of coarse and fine positions, sorted, near-duplicates collapsed,
/// with deltas closed by the distance to `t_far`.
pub fn merge_samples(coarse: &[f64], fine: &[f64], t_far: f64, ray: Ray) -> SampleSet {
    let mut t: Vec<f64> = coarse.iter().chain(fine.iter()).copied().collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup_by(|a, b| (*a - *b).abs() <= MERGE_EPS);
    let deltas = deltas_for(&t, t_far);
    SampleSet {
        t_values: t,
        deltas,
        ray,
    }
}

fn deltas_for(t: &[f64], t_far: f64) -> Vec<f64> {
    (0..t.len())
        .map(|i| {
            if i + 1 < t.len() {
                t[i + 1] - t[i]
            } else {
                (t_far - t[i]).max(0.0)
            }
        })
        .collect()
}

/// Hierarchical sampling for one ray: jittered (or deterministic) coarse
/// posts, pooled-density importance weights, fine inverse-transform samples,
/// and the merged set. None when the ray misses the bounding sphere.
pub fn sample_ray(
    field_cfg: &GridConfig,
    pooled: &PooledDensity,
    ray: &Ray,
    rc: &RenderConfig,
    rng: &mut dyn rand::RngCore,
) -> Option<SampleSet> {
    let coarse = if rc.stochastic {
        coarse_samples(ray, rc.n_coarse, field_cfg, Some(rng))
    } else {
        coarse_samples(ray, rc.n_coarse, field_cfg, None)
    };
    if coarse.is_empty() {
        return None;
    }
    let t_exit = exit_crossing(ray, field_cfg.r_max)?;
    if rc.n_fine == 0 {
        return Some(merge_samples(&coarse, &[], t_exit, *ray));
    }
    let deltas = deltas_for(&coarse, t_exit);
    let sigmas: Vec<f64> = coarse
        .iter()
        .map(|&t| density_activation(pooled.query(ray.point_at(t))))
        .collect();
    let weights = importance_weights(&sigmas, &deltas).expect("lengths match by construction");
    let mut edges = coarse.clone();
    edges.push(t_exit);
    let fine = if rc.stochastic {
        fine_samples(&weights, &edges, rc.n_fine, rng).expect("edge count matches")
    } else {
        fine_samples_midpoint(&weights, &edges, rc.n_fine).expect("edge count matches")
    };
    Some(merge_samples(&coarse, &fine, t_exit, *ray))
}

/// Emission-absorption sum over the sample set with the environment term:
/// C = sum_i tau_i (1 - e^{-sigma_i delta_i}) c_i + tau_bg c_env(d).
///
/// Density comes from the fine factor grid at every sample; colors from the
/// decoder MLP. This is the scalar reference path; training and image
/// rendering use the batched route in [`crate::train`], which is tested
/// against this one.
pub fn render_ray(field: &RadianceField, ray: &Ray, samples: &SampleSet) -> RenderOut {
    let env_color = |d: Vector3<f64>| -> [f64; 3] {
        field.env.as_ref().map_or([0.0; 3], |e| e.fetch(d))
    };
    if samples.t_values.is_empty() {
        return RenderOut {
            rgb: env_color(ray.direction),
            transmittance_bg: 1.0,
            weights: Some(Vec::new()),
        };
    }
    let enc = encode_direction(ray.direction);
    let c_dim = field.grid.channels;
    let mut input = vec![0.0; c_dim + enc.len()];
    input[c_dim..].copy_from_slice(&enc);

    let mut rgb = [0.0; 3];
    let mut tau = 1.0;
    let mut weights = Vec::with_capacity(samples.t_values.len());
    for (&t, &delta) in samples.t_values.iter().zip(samples.deltas.iter()) {
        let p = ray.point_at(t);
        let sigma = density_activation(field.grid.query_density(p));
        let alpha = 1.0 - (-sigma * delta).exp();
        let w = tau * alpha;
        if w != 0.0 {
            let feat = field.grid.query_appearance(p);
            input[..c_dim].copy_from_slice(&feat);
            let c = field.mlp.forward(&input);
            for ch in 0..3 {
                rgb[ch] += w * c[ch];
            }
        }
        weights.push(w);
        tau *= 1.0 - alpha;
    }
    let bg = env_color(ray.direction);
    for ch in 0..3 {
        rgb[ch] += tau * bg[ch];
    }
    RenderOut {
        rgb,
        transmittance_bg: tau,
        weights: Some(weights),
    }
}

/// Render a full equirectangular view through the batched engine.
/// Deterministic (midpoint sampling) regardless of thread count.
pub fn render_image(
    field: &RadianceField,
    pose: &crate::geom::CameraPose,
    width: usize,
    height: usize,
    rc: &RenderConfig,
) -> Result<crate::img::Image> {
    use rayon::prelude::*;
    let rc = RenderConfig {
        stochastic: false,
        ..rc.clone()
    };
    let pooled = PooledDensity::build(&field.grid, rc.kernel);
    let rays: Vec<Ray> = (0..width * height)
        .map(|i| {
            let (x, y) = (i % width, i / width);
            crate::geom::pixel_to_ray(x as f64, y as f64, width, height, pose)
                .expect("pixel in range")
        })
        .collect();
    let params = crate::batch::BatchParams {
        rc: &rc,
        seed: 0,
        stream_base: 0,
        inv_batch: 1.0,
    };
    let chunks: Vec<crate::batch::ChunkOutput> = rays
        .par_chunks(crate::batch::CHUNK_RAYS)
        .enumerate()
        .map(|(ci, chunk)| {
            crate::batch::process_chunk(
                field,
                &pooled,
                chunk,
                None,
                ci * crate::batch::CHUNK_RAYS,
                &params,
                false,
            )
        })
        .collect::<Result<_>>()?;
    let mut pixels = Vec::with_capacity(width * height);
    for c in chunks {
        pixels.extend(c.colors);
    }
    Ok(crate::img::Image::from_pixels(width, height, pixels))
}
