//! Image-quality metrics and the ray-grid hit-uniformity analyzer.
//!
//! Equirectangular rows are weighted by the cosine of their latitude for the
//! spherically uniform variants: pole rows cover far less solid angle per
//! pixel than equator rows.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{locate, pixel_to_ray, CameraPose, GridConfig, GridId};
use crate::img::Image;

/// dB value reported when the MSE underflows.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Per-row weights w(v) = cos((v + 0.5 - H/2) * pi / H) for an H-row
/// equirectangular image.
#[derive(Debug, Clone)]
pub struct SphericalWeightMap {
    pub weights: Vec<f64>,
}

impl SphericalWeightMap {
    pub fn new(height: usize) -> Self {
        let h = height as f64;
        Self {
            weights: (0..height)
                .map(|v| ((v as f64 + 0.5 - h / 2.0) * PI / h).cos())
                .collect(),
        }
    }
}

fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

fn mse_to_db(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio over [0,1] images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(mse_to_db(mse(a, b)?))
}

/// PSNR with the squared error of each row weighted by its latitude cosine.
pub fn ws_psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let wm = SphericalWeightMap::new(a.height);
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..a.height {
        let w = wm.weights[y];
        for x in 0..a.width {
            let pa = a.pixel(x, y);
            let pb = b.pixel(x, y);
            for ch in 0..3 {
                num += w * (pa[ch] - pb[ch]).powi(2);
                den += w;
            }
        }
    }
    Ok(mse_to_db(num / den))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (K1 L)^2, K1 = 0.01, L = 1
const SSIM_C2: f64 = 9e-4; // (K2 L)^2, K2 = 0.03

fn luma(img: &Image) -> Vec<f64> {
    (0..img.width * img.height)
        .map(|i| {
            let p = &img.data[i * 3..i * 3 + 3];
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })
        .collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let g = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = g;
            total += g;
        }
    }
    w.iter_mut().for_each(|g| *g /= total);
    w
}

/// Local SSIM over an 11x11 Gaussian window on luma, evaluated at every
/// fully interior window position; returns the mean and, for the weighted
/// variant, applies the spherical weight of the window-center row.
fn ssim_impl(a: &Image, b: &Image, spherical: bool) -> Result<f64> {
    a.same_dims(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let la = luma(a);
    let lb = luma(b);
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let wm = SphericalWeightMap::new(a.height);
    let mut num = 0.0;
    let mut den = 0.0;
    for cy in half..a.height - half {
        let row_w = if spherical { wm.weights[cy] } else { 1.0 };
        for cx in half..a.width - half {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                let y = cy + wy - half;
                for wx in 0..SSIM_WINDOW {
                    let x = cx + wx - half;
                    let w = win[wy * SSIM_WINDOW + wx];
                    let va = la[y * a.width + x];
                    let vb = lb[y * b.width + x];
                    mu_a += w * va;
                    mu_b += w * vb;
                    aa += w * va * va;
                    bb += w * vb * vb;
                    ab += w * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            num += row_w * s;
            den += row_w;
        }
    }
    Ok(num / den)
}

/// Mean structural similarity on luma (11x11 Gaussian window, standard
/// constants, valid interior positions).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, false)
}

/// SSIM with each window weighted by the spherical weight of its center row.
pub fn ws_ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, true)
}

/// Per-cell ray-crossing counts plus summary statistics.
#[derive(Debug, Clone)]
pub struct HitHistogram {
    pub counts: Vec<u64>,
    /// Total cell count of the grid (including never-hit cells).
    pub n_cells: usize,
    /// Sum over rays of the number of distinct cells each crossed.
    pub total: u64,
    pub non_empty: usize,
    pub mean_non_empty: f64,
    /// Coefficient of variation (std / mean) over non-empty cells.
    pub cv: f64,
}

impl HitHistogram {
    fn from_counts(counts: Vec<u64>) -> Self {
        let non_zero: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
        let total: u64 = counts.iter().sum();
        let n = non_zero.len();
        let mean = if n == 0 { 0.0 } else { total as f64 / n as f64 };
        let var = if n == 0 {
            0.0
        } else {
            non_zero
                .iter()
                .map(|&c| (c as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64
        };
        let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
        Self {
            n_cells: counts.len(),
            counts,
            total,
            non_empty: n,
            mean_non_empty: mean,
            cv,
        }
    }
}

/// Cells of the balanced spherical grid are node-centered: a point belongs
/// to (grid, round(u_r), round(u_theta), round(u_phi)) of its owning grid.
pub fn spherical_cell_index(p: Vector3<f64>, cfg: &GridConfig) -> usize {
    let a = locate(p, cfg);
    let grid_off = match a.grid {
        GridId::Yin => 0,
        GridId::Yang => cfg.n_r * cfg.n_theta * cfg.n_phi,
    };
    let ir = (a.index[0].round() as usize).min(cfg.n_r - 1);
    let it = (a.index[1].round().max(0.0) as usize).min(cfg.n_theta - 1);
    let ip = (a.index[2].round().max(0.0) as usize).min(cfg.n_phi - 1);
    grid_off + (ir * cfg.n_theta + it) * cfg.n_phi + ip
}

/// Cartesian reference grid: a cube of side 2*r_max with `cells_per_side`^3
/// cells, matched in count to the spherical grid within 1%.
pub fn matched_cartesian_side(cfg: &GridConfig) -> usize {
    let target = 2 * cfg.n_r * cfg.n_theta * cfg.n_phi;
    ((target as f64).cbrt().round() as usize).max(2)
}

/// March every ray of an equirectangular image from each pose through the
/// balanced spherical grid, counting each traversed cell once per ray.
pub fn hit_histogram_spherical(
    poses: &[CameraPose],
    cfg: &GridConfig,
    width: usize,
    height: usize,
) -> HitHistogram {
    let n_cells = 2 * cfg.n_r * cfg.n_theta * cfg.n_phi;
    let counts = accumulate_hits(poses, width, height, n_cells, |origin, dir, visit| {
        march_spherical(origin, dir, cfg, visit)
    });
    HitHistogram::from_counts(counts)
}

/// Same ray set marched through the matched Cartesian cube with a DDA.
pub fn hit_histogram_cartesian(
    poses: &[CameraPose],
    cfg: &GridConfig,
    width: usize,
    height: usize,
) -> HitHistogram {
    let side = matched_cartesian_side(cfg);
    let n_cells = side * side * side;
    let r_max = cfg.r_max;
    let counts = accumulate_hits(poses, width, height, n_cells, |origin, dir, visit| {
        march_cartesian(origin, dir, r_max, side, visit)
    });
    HitHistogram::from_counts(counts)
}

fn accumulate_hits<F>(
    poses: &[CameraPose],
    width: usize,
    height: usize,
    n_cells: usize,
    march: F,
) -> Vec<u64>
where
    F: Fn(Vector3<f64>, Vector3<f64>, &mut dyn FnMut(usize)) + Sync,
{
    // Integer counts merge associatively, so any accumulation order works.
    let rows: Vec<Vec<u64>> = poses
        .par_iter()
        .flat_map(|pose| (0..height).into_par_iter().map(move |v| (pose, v)))
        .map(|(pose, v)| {
            let mut counts = vec![0u64; n_cells];
            let mut visited: Vec<usize> = Vec::with_capacity(256);
            for u in 0..width {
                let ray = pixel_to_ray(u as f64, v as f64, width, height, pose)
                    .expect("pixel in range");
                visited.clear();
                march(ray.origin, ray.direction, &mut |cell| {
                    // Count each cell once per ray.
                    if let Err(pos) = visited.binary_search(&cell) {
                        visited.insert(pos, cell);
                        counts[cell] += 1;
                    }
                });
            }
            counts
        })
        .collect();
    let mut total = vec![0u64; n_cells];
    for row in rows {
        for (t, c) in total.iter_mut().zip(row.iter()) {
            *t += c;
        }
    }
    total
}

/// Adaptive marching through the spherical grid: the step is a fraction of
/// the smallest local cell extent (radial interval, or the polar arc length
/// at the current radius).
fn march_spherical(
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    cfg: &GridConfig,
    visit: &mut dyn FnMut(usize),
) {
    let od = origin.dot(&dir);
    let disc = od * od + cfg.r_max * cfg.r_max - origin.norm_squared();
    if disc < 0.0 {
        return;
    }
    let t_exit = -od + disc.sqrt();
    if t_exit <= 0.0 {
        return;
    }
    let d_theta = cfg.angular_step_theta();
    let shells = cfg.shells();
    let min_step = cfg.r0 * 1e-2;
    let mut t = 0.0;
    while t < t_exit {
        let p = origin + dir * t;
        let rho = p.norm();
        // Angles are undefined at the exact center; the first positive step
        // lands in the correct angular column of the innermost shell.
        if rho > cfg.r0 * 1e-9 {
            visit(spherical_cell_index(p, cfg));
        }
        let shell_idx = shells.partition_point(|&s| s <= rho).min(shells.len() - 1);
        let dr = if shell_idx == 0 {
            shells[0]
        } else {
            shells[shell_idx] - shells[shell_idx - 1]
        };
        let arc = rho * d_theta;
        t += 0.25 * dr.min(arc).max(min_step);
    }
}

/// Amanatides-Woo voxel traversal of the Cartesian cube; visits each
/// crossed cell exactly once.
fn march_cartesian(
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    r_max: f64,
    side: usize,
    visit: &mut dyn FnMut(usize),
) {
    let cell = 2.0 * r_max / side as f64;
    // Clip the ray to the cube [-r_max, r_max]^3.
    let mut t0: f64 = 0.0;
    let mut t1 = f64::INFINITY;
    for ax in 0..3 {
        let (o, d) = (origin[ax], dir[ax]);
        if d.abs() < 1e-15 {
            if o.abs() > r_max {
                return;
            }
            continue;
        }
        let a = (-r_max - o) / d;
        let b = (r_max - o) / d;
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 >= t1 {
        return;
    }
    let eps = 1e-12 * r_max.max(1.0);
    let p0 = origin + dir * (t0 + eps);
    let mut idx = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    for ax in 0..3 {
        let x = ((p0[ax] + r_max) / cell).floor() as i64;
        idx[ax] = x.clamp(0, side as i64 - 1);
        if dir[ax] > 1e-15 {
            step[ax] = 1;
            t_delta[ax] = cell / dir[ax];
            t_next[ax] = ((idx[ax] + 1) as f64 * cell - r_max - origin[ax]) / dir[ax];
        } else if dir[ax] < -1e-15 {
            step[ax] = -1;
            t_delta[ax] = -cell / dir[ax];
            t_next[ax] = (idx[ax] as f64 * cell - r_max - origin[ax]) / dir[ax];
        }
    }
    loop {
        let lin = (idx[0] as usize * side + idx[1] as usize) * side + idx[2] as usize;
        visit(lin);
        let ax = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        if t_next[ax] >= t1 {
            break;
        }
        idx[ax] += step[ax];
        if idx[ax] < 0 || idx[ax] >= side as i64 {
            break;
        }
        t_next[ax] += t_delta[ax];
    }
}
