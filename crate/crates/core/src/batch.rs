//! Batched forward/backward pass over a set of rays.
//!
//! Rays are processed in fixed-size chunks so results are identical for any
//! worker count: each chunk is a pure function of its rays, and chunk
//! results merge in chunk order. Within a chunk the per-sample MLP and
//! channel-basis products run as dense GEMMs over all samples at once; the
//! density/appearance factor work stays scalar per sample.
//!
//! The scalar path in [`crate::render`] computes the same quantities one
//! sample at a time and serves as the reference implementation in tests.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{encode_direction, RadianceField, DIR_ENCODING_LEN};
use crate::geom::{locate, GridId, Ray};
use crate::grid::{
    density_activation, density_activation_grad, EnvSample, FactorComponent, PooledDensity,
    Stencil,
};
use crate::render::{sample_ray, RenderConfig, SampleSet};

/// Rays per chunk. Fixed (never derived from the worker count) so that
/// floating-point reduction order is reproducible.
pub(crate) const CHUNK_RAYS: usize = 256;

pub(crate) struct BatchParams<'a> {
    pub rc: &'a RenderConfig,
    pub seed: u64,
    /// Per-ray RNG streams are `stream_base + global ray index`.
    pub stream_base: u64,
    /// Loss/gradient normalization, 1 / (total rays in the batch).
    pub inv_batch: f64,
}

pub(crate) struct ChunkOutput {
    pub colors: Vec<[f64; 3]>,
    /// Sum over rays of the squared L2 color error (unnormalized).
    pub loss_sum: f64,
    pub grads: Option<Box<RadianceField>>,
}

struct SampleRecord {
    grid: GridId,
    stencil: Stencil,
    raw_sigma: f64,
    delta: f64,
    weight: f64,
    tau_next: f64,
}

struct RayRecord {
    first_sample: usize,
    n_samples: usize,
    tau_bg: f64,
    env: Option<EnvSample>,
    env_rgb: [f64; 3],
}

/// Forward (and optionally backward) pass over one chunk of rays.
///
/// `targets` must be present when gradients are requested. `global_offset`
/// is the index of `rays[0]` within the whole batch; it fixes both the RNG
/// stream and the ray index reported on numeric failures.
pub(crate) fn process_chunk(
    field: &RadianceField,
    pooled: &PooledDensity,
    rays: &[Ray],
    targets: Option<&[[f64; 3]]>,
    global_offset: usize,
    params: &BatchParams,
    want_grads: bool,
) -> Result<ChunkOutput> {
    let cfg = &field.grid.cfg;
    let c_dim = field.grid.channels;
    let n_app = field.grid.n_appearance;
    let q_width = 6 * n_app;

    let mut samples: Vec<SampleRecord> = Vec::with_capacity(rays.len() * params.rc.n_coarse);
    let mut q_rows: Vec<f64> = Vec::new();
    let mut ray_records: Vec<RayRecord> = Vec::with_capacity(rays.len());

    for (slot, ray) in rays.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(params.stream_base + (global_offset + slot) as u64);
        let set: Option<SampleSet> = sample_ray(cfg, pooled, ray, params.rc, &mut rng);

        let first_sample = samples.len();
        let mut tau = 1.0;
        if let Some(set) = &set {
            for (&t, &delta) in set.t_values.iter().zip(set.deltas.iter()) {
                let p = ray.point_at(t);
                let a = locate(p, cfg);
                let st = Stencil::from_assignment(&a, [cfg.n_r, cfg.n_theta, cfg.n_phi]);
                let factors = field.grid.factors(a.grid);
                let raw: f64 = factors.density.iter().map(|c| st.component_value(c)).sum();
                let sigma = density_activation(raw);
                let alpha = 1.0 - (-sigma * delta).exp();
                let weight = tau * alpha;
                tau *= 1.0 - alpha;

                let row_start = q_rows.len();
                q_rows.resize(row_start + q_width, 0.0);
                let col0 = field.grid.basis_column(a.grid, 0, 0);
                for (n, comp) in factors.appearance.iter().enumerate() {
                    let (qa, qb, qc) = st.mode_values(comp);
                    q_rows[row_start + col0 + 3 * n] = qa;
                    q_rows[row_start + col0 + 3 * n + 1] = qb;
                    q_rows[row_start + col0 + 3 * n + 2] = qc;
                }
                samples.push(SampleRecord {
                    grid: a.grid,
                    stencil: st,
                    raw_sigma: raw,
                    delta,
                    weight,
                    tau_next: tau,
                });
                if params.rc.transmittance_cutoff > 0.0 && tau < params.rc.transmittance_cutoff {
                    break;
                }
            }
        }
        let (env, env_rgb) = match &field.env {
            Some(e) => {
                let s = e.sample(ray.direction);
                let rgb = s.raw.map(crate::grid::sigmoid);
                (Some(s), rgb)
            }
            None => (None, [0.0; 3]),
        };
        ray_records.push(RayRecord {
            first_sample,
            n_samples: samples.len() - first_sample,
            tau_bg: tau,
            env,
            env_rgb,
        });
    }

    let n_samples = samples.len();
    let in_dim = c_dim + DIR_ENCODING_LEN;

    // Assemble MLP inputs: feature channels from the basis applied to the
    // sparse q rows (only the owning grid's 3*N_a columns are nonzero),
    // then the encoded direction. The basis is tiny, so the scalar product
    // here beats a narrow GEMM.
    let q = Array2::from_shape_vec((n_samples, q_width), q_rows).expect("q row layout");
    let basis = field.grid.basis.as_slice().expect("basis contiguous");
    let mut x0 = Array2::<f64>::zeros((n_samples, in_dim));
    {
        let x0_flat = x0.as_slice_mut().expect("x0 contiguous");
        let q_flat = q.as_slice().expect("q contiguous");
        for (i, s) in samples.iter().enumerate() {
            let col0 = field.grid.basis_column(s.grid, 0, 0);
            let qrow = &q_flat[i * q_width + col0..i * q_width + col0 + 3 * n_app];
            let out = &mut x0_flat[i * in_dim..i * in_dim + c_dim];
            for c in 0..c_dim {
                let brow = &basis[c * q_width + col0..c * q_width + col0 + 3 * n_app];
                let mut acc = 0.0;
                for (b, qv) in brow.iter().zip(qrow.iter()) {
                    acc += b * qv;
                }
                out[c] = acc;
            }
        }
        for (slot, rec) in ray_records.iter().enumerate() {
            if rec.n_samples == 0 {
                continue;
            }
            let enc = encode_direction(rays[slot].direction);
            for i in rec.first_sample..rec.first_sample + rec.n_samples {
                x0_flat[i * in_dim + c_dim..(i + 1) * in_dim].copy_from_slice(&enc);
            }
        }
    }

    // MLP forward over all samples.
    let mlp = &field.mlp;
    let mut h1 = x0.dot(&mlp.w1);
    add_bias(&mut h1, &mlp.b1);
    relu_inplace(&mut h1);
    let mut h2 = h1.dot(&mlp.w2);
    add_bias(&mut h2, &mlp.b2);
    relu_inplace(&mut h2);
    let mut colors = h2.dot(&mlp.w3);
    add_bias(&mut colors, &mlp.b3);
    colors.mapv_inplace(crate::grid::sigmoid);

    // Composite per ray.
    let mut out_colors = vec![[0.0f64; 3]; rays.len()];
    let mut loss_sum = 0.0;
    for (slot, rec) in ray_records.iter().enumerate() {
        let mut rgb = [0.0f64; 3];
        for i in rec.first_sample..rec.first_sample + rec.n_samples {
            let w = samples[i].weight;
            for ch in 0..3 {
                rgb[ch] += w * colors[[i, ch]];
            }
        }
        for ch in 0..3 {
            rgb[ch] += rec.tau_bg * rec.env_rgb[ch];
        }
        if !rgb.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "rendered color",
                ray: global_offset + slot,
            });
        }
        if let Some(t) = targets {
            let tgt = t[slot];
            loss_sum += (0..3).map(|ch| (rgb[ch] - tgt[ch]).powi(2)).sum::<f64>();
        }
        out_colors[slot] = rgb;
    }

    if !want_grads {
        return Ok(ChunkOutput {
            colors: out_colors,
            loss_sum,
            grads: None,
        });
    }
    let targets = targets.ok_or_else(|| Error::Input("gradients need targets".into()))?;

    let mut grads = Box::new(field.zeros_like());

    // d(loss)/d(color) per ray.
    let mut g_rgb = vec![[0.0f64; 3]; rays.len()];
    for slot in 0..rays.len() {
        for ch in 0..3 {
            g_rgb[slot][ch] = 2.0 * (out_colors[slot][ch] - targets[slot][ch]) * params.inv_batch;
        }
    }

    // Environment map: d(color)/d(texel) via the sigmoid and the bilinear
    // footprint.
    if let Some(genv) = grads.env.as_mut() {
        for (slot, rec) in ray_records.iter().enumerate() {
            let Some(env_sample) = &rec.env else { continue };
            for ch in 0..3 {
                let upstream = rec.tau_bg * g_rgb[slot][ch];
                if upstream == 0.0 {
                    continue;
                }
                let act = rec.env_rgb[ch];
                let d_raw = upstream * act * (1.0 - act);
                for (texel, w) in env_sample.texels {
                    genv.pixels[texel * 3 + ch] += d_raw * w;
                }
            }
        }
    }

    // Per-sample color gradient (for the MLP) and the density chain. The
    // density derivative of the composite is
    //   dC/dsigma_k = delta_k * (tau_{k+1} c_k - sum_{j>k} w_j c_j - tau_bg c_env),
    // accumulated against g_rgb via suffix sums.
    let mut g_colors = Array2::<f64>::zeros((n_samples, 3));
    let mut g_raw = vec![0.0f64; n_samples];
    for (slot, rec) in ray_records.iter().enumerate() {
        let g = g_rgb[slot];
        let dot_env: f64 = (0..3).map(|ch| g[ch] * rec.env_rgb[ch]).sum();
        let mut suffix = rec.tau_bg * dot_env;
        for i in (rec.first_sample..rec.first_sample + rec.n_samples).rev() {
            let s = &samples[i];
            for ch in 0..3 {
                g_colors[[i, ch]] = s.weight * g[ch];
            }
            let dot_c: f64 = (0..3).map(|ch| g[ch] * colors[[i, ch]]).sum();
            let dsigma = s.delta * (s.tau_next * dot_c - suffix);
            g_raw[i] = dsigma * density_activation_grad(s.raw_sigma);
            suffix += s.weight * dot_c;
        }
    }

    // MLP backward.
    let mut gz3 = g_colors;
    for (mut row, c_row) in gz3.rows_mut().into_iter().zip(colors.rows()) {
        for (g, &c) in row.iter_mut().zip(c_row.iter()) {
            *g *= c * (1.0 - c);
        }
    }
    grads.mlp.w3 += &h2.t().dot(&gz3);
    add_column_sums(&gz3, &mut grads.mlp.b3);
    let mut gz2 = gz3.dot(&mlp.w3.t());
    relu_backward(&mut gz2, &h2);
    grads.mlp.w2 += &h1.t().dot(&gz2);
    add_column_sums(&gz2, &mut grads.mlp.b2);
    let mut gz1 = gz2.dot(&mlp.w2.t());
    relu_backward(&mut gz1, &h1);
    grads.mlp.w1 += &x0.t().dot(&gz1);
    add_column_sums(&gz1, &mut grads.mlp.b1);
    let gx0 = gz1.dot(&mlp.w1.t());

    // Channel basis gradients, appearance-coefficient gradients, and the
    // scatter into the factor tensors, fused per sample. Only the owning
    // grid's 3*N_a basis columns participate.
    let gx0_flat = gx0.as_slice().expect("gx0 contiguous");
    let q_flat = q.as_slice().expect("q contiguous");
    let ggrid = &mut grads.grid;
    let gbasis = ggrid.basis.as_slice_mut().expect("basis contiguous");
    let (gyin, gyang) = (&mut ggrid.yin, &mut ggrid.yang);
    let mut g_q_row = vec![0.0f64; 3 * n_app];
    for (i, s) in samples.iter().enumerate() {
        let col0 = field.grid.basis_column(s.grid, 0, 0);
        let g_feat = &gx0_flat[i * in_dim..i * in_dim + c_dim];
        let qrow = &q_flat[i * q_width + col0..i * q_width + col0 + 3 * n_app];
        g_q_row.iter_mut().for_each(|x| *x = 0.0);
        for c in 0..c_dim {
            let gf = g_feat[c];
            if gf == 0.0 {
                continue;
            }
            let brow = &basis[c * q_width + col0..c * q_width + col0 + 3 * n_app];
            let gbrow = &mut gbasis[c * q_width + col0..c * q_width + col0 + 3 * n_app];
            for j in 0..3 * n_app {
                gbrow[j] += gf * qrow[j];
                g_q_row[j] += gf * brow[j];
            }
        }
        let factors = field.grid.factors(s.grid);
        let gfactors = match s.grid {
            GridId::Yin => &mut *gyin,
            GridId::Yang => &mut *gyang,
        };
        if g_raw[i] != 0.0 {
            for (comp, gcomp) in factors.density.iter().zip(gfactors.density.iter_mut()) {
                scatter_component_grad(comp, gcomp, &s.stencil, [g_raw[i]; 3]);
            }
        }
        for (n, (comp, gcomp)) in factors
            .appearance
            .iter()
            .zip(gfactors.appearance.iter_mut())
            .enumerate()
        {
            let g_modes = [g_q_row[3 * n], g_q_row[3 * n + 1], g_q_row[3 * n + 2]];
            if g_modes.iter().any(|g| *g != 0.0) {
                scatter_component_grad(comp, gcomp, &s.stencil, g_modes);
            }
        }
    }

    Ok(ChunkOutput {
        colors: out_colors,
        loss_sum,
        grads: Some(grads),
    })
}

/// Distribute mode gradients of one component onto its factor entries.
/// Each mode value is lin(v) * bilin(M); the vector side receives
/// g * bilin * linear weights, the matrix side g * lin * bilinear weights.
fn scatter_component_grad(
    comp: &FactorComponent,
    gcomp: &mut FactorComponent,
    st: &Stencil,
    g_modes: [f64; 3],
) {
    scatter_mode(
        g_modes[0],
        &comp.v_r,
        &mut gcomp.v_r,
        &comp.m_theta_phi,
        &mut gcomp.m_theta_phi,
        &st.r,
        &st.theta,
        &st.phi,
    );
    scatter_mode(
        g_modes[1],
        &comp.v_theta,
        &mut gcomp.v_theta,
        &comp.m_phi_r,
        &mut gcomp.m_phi_r,
        &st.theta,
        &st.phi,
        &st.r,
    );
    scatter_mode(
        g_modes[2],
        &comp.v_phi,
        &mut gcomp.v_phi,
        &comp.m_r_theta,
        &mut gcomp.m_r_theta,
        &st.phi,
        &st.r,
        &st.theta,
    );
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_mode(
    g: f64,
    v: &[f64],
    gv: &mut [f64],
    m: &Array2<f64>,
    gm: &mut Array2<f64>,
    sv: &crate::grid::AxisStencil,
    sa: &crate::grid::AxisStencil,
    sb: &crate::grid::AxisStencil,
) {
    if g == 0.0 {
        return;
    }
    let (v0, v1) = (sv.i0 as usize, sv.i1 as usize);
    let (a0, a1) = (sa.i0 as usize, sa.i1 as usize);
    let (b0, b1) = (sb.i0 as usize, sb.i1 as usize);
    let (wv, wa, wb) = (sv.w1, sa.w1, sb.w1);
    let bil = m[[a0, b0]] * (1.0 - wa) * (1.0 - wb)
        + m[[a0, b1]] * (1.0 - wa) * wb
        + m[[a1, b0]] * wa * (1.0 - wb)
        + m[[a1, b1]] * wa * wb;
    let lin = v[v0] * (1.0 - wv) + v[v1] * wv;
    gv[v0] += g * bil * (1.0 - wv);
    gv[v1] += g * bil * wv;
    let gl = g * lin;
    gm[[a0, b0]] += gl * (1.0 - wa) * (1.0 - wb);
    gm[[a0, b1]] += gl * (1.0 - wa) * wb;
    gm[[a1, b0]] += gl * wa * (1.0 - wb);
    gm[[a1, b1]] += gl * wa * wb;
}

fn add_bias(h: &mut Array2<f64>, b: &[f64]) {
    for mut row in h.rows_mut() {
        for (x, &bi) in row.iter_mut().zip(b.iter()) {
            *x += bi;
        }
    }
}

fn relu_inplace(h: &mut Array2<f64>) {
    h.mapv_inplace(|x| x.max(0.0));
}

/// Zero the gradient wherever the stored post-activation is zero.
fn relu_backward(g: &mut Array2<f64>, post: &Array2<f64>) {
    for (gx, &hx) in g.iter_mut().zip(post.iter()) {
        if hx <= 0.0 {
            *gx = 0.0;
        }
    }
}

fn add_column_sums(g: &Array2<f64>, out: &mut [f64]) {
    for row in g.rows() {
        for (o, &x) in out.iter_mut().zip(row.iter()) {
            *o += x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridConfig;
    use crate::render::render_ray;
    use nalgebra::Vector3;
    use rand::Rng;

    /// The batched forward must agree with the scalar reference renderer.
    #[test]
    fn batch_forward_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = GridConfig::new(6, 6, 10, 0.2, 6.0).unwrap();
        let field = RadianceField::new(cfg.clone(), 2, 2, 4, Some((4, 8)), &mut rng);
        let pooled = PooledDensity::build(&field.grid, 2);
        let rc = RenderConfig {
            n_coarse: 12,
            n_fine: 8,
            kernel: 2,
            stochastic: true,
            transmittance_cutoff: 0.0,
        };
        let rays: Vec<Ray> = (0..20)
            .map(|_| {
                let o = Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                );
                let d = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize();
                Ray::new(o, d, 0.0, f64::INFINITY)
            })
            .collect();
        let params = BatchParams {
            rc: &rc,
            seed: 7,
            stream_base: 1000,
            inv_batch: 1.0 / rays.len() as f64,
        };
        let out = process_chunk(&field, &pooled, &rays, None, 0, &params, false).unwrap();

        for (i, ray) in rays.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            rng.set_stream(1000 + i as u64);
            let samples = sample_ray(&cfg, &pooled, ray, &rc, &mut rng)
                .unwrap_or(SampleSet {
                    t_values: vec![],
                    deltas: vec![],
                    ray: *ray,
                });
            let reference = render_ray(&field, ray, &samples);
            for ch in 0..3 {
                let diff = (out.colors[i][ch] - reference.rgb[ch]).abs();
                assert!(
                    diff <= 1e-12 * (1.0 + reference.rgb[ch].abs()),
                    "ray {i} ch {ch}: batch {} vs scalar {}",
                    out.colors[i][ch],
                    reference.rgb[ch]
                );
            }
        }
    }
}
