//! The trainable radiance field: factorized grids, the color decoder MLP,
//! and the optional environment map.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::GridConfig;
use crate::grid::{EnvironmentMap, FactorizedGrid};

pub const MLP_HIDDEN: usize = 128;
/// Frequency bands of the direction encoding.
pub const DIR_FREQUENCIES: usize = 2;
/// Encoded direction length: the raw 3-vector plus sin/cos at each band.
pub const DIR_ENCODING_LEN: usize = 3 + 3 * 2 * DIR_FREQUENCIES;

/// Raw direction concatenated with sin(2^j d), cos(2^j d) for j = 0, 1.
pub fn encode_direction(d: nalgebra::Vector3<f64>) -> [f64; DIR_ENCODING_LEN] {
    let mut out = [0.0; DIR_ENCODING_LEN];
    out[0] = d.x;
    out[1] = d.y;
    out[2] = d.z;
    let mut idx = 3;
    for j in 0..DIR_FREQUENCIES {
        let s = (1u32 << j) as f64;
        for c in [d.x, d.y, d.z] {
            out[idx] = (s * c).sin();
            out[idx + 1] = (s * c).cos();
            idx += 2;
        }
    }
    out
}

/// Two-hidden-layer ReLU decoder, 128 units each, sigmoid RGB output.
/// Weights use the (input, output) layout, so a forward pass over a sample
/// batch X is X·W1 → relu → ·W2 → relu → ·W3 → sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Array2<f64>,
    pub b2: Vec<f64>,
    pub w3: Array2<f64>,
    pub b3: Vec<f64>,
}

impl Mlp {
    pub fn zeros(in_dim: usize) -> Self {
        Self {
            w1: Array2::zeros((in_dim, MLP_HIDDEN)),
            b1: vec![0.0; MLP_HIDDEN],
            w2: Array2::zeros((MLP_HIDDEN, MLP_HIDDEN)),
            b2: vec![0.0; MLP_HIDDEN],
            w3: Array2::zeros((MLP_HIDDEN, 3)),
            b3: vec![0.0; 3],
        }
    }

    /// He-style init: N(0, sqrt(2/fan_in)) weights, zero biases.
    pub fn random(in_dim: usize, rng: &mut impl Rng) -> Self {
        let mut layer = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, (2.0 / rows as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        Self {
            w1: layer(in_dim, MLP_HIDDEN),
            b1: vec![0.0; MLP_HIDDEN],
            w2: layer(MLP_HIDDEN, MLP_HIDDEN),
            b2: vec![0.0; MLP_HIDDEN],
            w3: layer(MLP_HIDDEN, 3),
            b3: vec![0.0; 3],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.dim().0
    }

    /// Single-sample forward pass (reference path; batch rendering uses the
    /// GEMM route in `train`).
    pub fn forward(&self, input: &[f64]) -> [f64; 3] {
        debug_assert_eq!(input.len(), self.in_dim());
        let mut h1 = self.b1.clone();
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = self.w1.row(i);
            for (h, w) in h1.iter_mut().zip(row.iter()) {
                *h += x * w;
            }
        }
        h1.iter_mut().for_each(|h| *h = h.max(0.0));

        let mut h2 = self.b2.clone();
        for (i, &x) in h1.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = self.w2.row(i);
            for (h, w) in h2.iter_mut().zip(row.iter()) {
                *h += x * w;
            }
        }
        h2.iter_mut().for_each(|h| *h = h.max(0.0));

        let mut z = [self.b3[0], self.b3[1], self.b3[2]];
        for (i, &x) in h2.iter().enumerate() {
            let row = self.w3.row(i);
            z[0] += x * row[0];
            z[1] += x * row[1];
            z[2] += x * row[2];
        }
        z.map(crate::grid::sigmoid)
    }
}

/// Full trainable state: factor grids, decoder MLP, optional environment map.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub grid: FactorizedGrid,
    pub mlp: Mlp,
    pub env: Option<EnvironmentMap>,
}

impl RadianceField {
    /// Fresh field: factor entries and basis i.i.d. N(0, 0.1), He-init MLP,
    /// zero (mid-gray after sigmoid) environment map.
    pub fn new(
        cfg: GridConfig,
        n_density: usize,
        n_appearance: usize,
        channels: usize,
        env_dims: Option<(usize, usize)>,
        rng: &mut impl Rng,
    ) -> Self {
        let grid = FactorizedGrid::random(cfg, n_density, n_appearance, channels, 0.1, rng);
        let mlp = Mlp::random(channels + DIR_ENCODING_LEN, rng);
        let env = env_dims.map(|(h, w)| EnvironmentMap::zeros(h, w));
        Self { grid, mlp, env }
    }

    /// Same shapes, all parameters zero. Gradient and optimizer-moment
    /// holders are built this way.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for s in out.param_slices_mut() {
            s.fill(0.0);
        }
        out
    }

    /// Every parameter tensor as a flat slice, in a fixed deterministic
    /// order. `param_slices_mut` yields the identical order, so shape-matched
    /// fields can be zipped tensor by tensor.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for factors in [&self.grid.yin, &self.grid.yang] {
            for comp in factors.density.iter().chain(factors.appearance.iter()) {
                out.push(comp.v_r.as_slice());
                out.push(comp.v_theta.as_slice());
                out.push(comp.v_phi.as_slice());
                out.push(comp.m_theta_phi.as_slice().unwrap());
                out.push(comp.m_phi_r.as_slice().unwrap());
                out.push(comp.m_r_theta.as_slice().unwrap());
            }
        }
        out.push(self.grid.basis.as_slice().unwrap());
        out.push(self.mlp.w1.as_slice().unwrap());
        out.push(self.mlp.b1.as_slice());
        out.push(self.mlp.w2.as_slice().unwrap());
        out.push(self.mlp.b2.as_slice());
        out.push(self.mlp.w3.as_slice().unwrap());
        out.push(self.mlp.b3.as_slice());
        if let Some(env) = &self.env {
            out.push(env.pixels.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for factors in [&mut self.grid.yin, &mut self.grid.yang] {
            for comp in factors
                .density
                .iter_mut()
                .chain(factors.appearance.iter_mut())
            {
                out.push(comp.v_r.as_mut_slice());
                out.push(comp.v_theta.as_mut_slice());
                out.push(comp.v_phi.as_mut_slice());
                out.push(comp.m_theta_phi.as_slice_mut().unwrap());
                out.push(comp.m_phi_r.as_slice_mut().unwrap());
                out.push(comp.m_r_theta.as_slice_mut().unwrap());
            }
        }
        out.push(self.grid.basis.as_slice_mut().unwrap());
        out.push(self.mlp.w1.as_slice_mut().unwrap());
        out.push(self.mlp.b1.as_mut_slice());
        out.push(self.mlp.w2.as_slice_mut().unwrap());
        out.push(self.mlp.b2.as_mut_slice());
        out.push(self.mlp.w3.as_slice_mut().unwrap());
        out.push(self.mlp.b3.as_mut_slice());
        if let Some(env) = &mut self.env {
            out.push(env.pixels.as_mut_slice());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Add `scale * other` into self, tensor by tensor. Shapes must match.
    pub fn axpy(&mut self, scale: f64, other: &RadianceField) -> Result<()> {
        let theirs = other.param_slices();
        let mut mine = self.param_slices_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Input("parameter layout mismatch".into()));
        }
        for (dst, src) in mine.iter_mut().zip(theirs.iter()) {
            if dst.len() != src.len() {
                return Err(Error::Input("parameter shape mismatch".into()));
            }
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }
}
