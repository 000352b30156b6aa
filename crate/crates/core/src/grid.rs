//! Vector-matrix factorized feature grids.
//!
//! Each component grid stores a density tensor and an appearance tensor in
//! factorized form: a rank-N sum where every component contributes three
//! modes, each an axis vector outer-multiplied with a matrix over the
//! complementary axis pair. The appearance tensor additionally carries a
//! per-mode channel basis vector; stacking all basis vectors columnwise
//! yields the C x 6N basis matrix, letting a feature query reduce to one
//! small matrix-vector product.
//!
//! Queries never materialize the dense tensor: trilinear interpolation of a
//! separable product factors into a linear interpolation of the vector times
//! a bilinear interpolation of the matrix. The same separability makes the
//! on-the-fly average-pooled coarse grid exact: pooling each factor along its
//! own axes and querying the pooled factors equals pooling the dense tensor.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{self, GridAssignment, GridConfig, GridId};

/// Hard cap for dense materialization; it exists only as a test oracle.
const MATERIALIZE_CELL_LIMIT: usize = 1_000_000;

/// One rank-1 component: three (vector, matrix) mode pairs.
///
/// Matrix layouts: `m_theta_phi` is (n_theta, n_phi), `m_phi_r` is
/// (n_phi, n_r), `m_r_theta` is (n_r, n_theta).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorComponent {
    pub v_r: Vec<f64>,
    pub v_theta: Vec<f64>,
    pub v_phi: Vec<f64>,
    pub m_theta_phi: Array2<f64>,
    pub m_phi_r: Array2<f64>,
    pub m_r_theta: Array2<f64>,
}

impl FactorComponent {
    pub fn zeros(n_r: usize, n_theta: usize, n_phi: usize) -> Self {
        Self {
            v_r: vec![0.0; n_r],
            v_theta: vec![0.0; n_theta],
            v_phi: vec![0.0; n_phi],
            m_theta_phi: Array2::zeros((n_theta, n_phi)),
            m_phi_r: Array2::zeros((n_phi, n_r)),
            m_r_theta: Array2::zeros((n_r, n_theta)),
        }
    }

    fn random<R: Rng + ?Sized>(n_r: usize, n_theta: usize, n_phi: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).unwrap();
        let mut draw = |n: usize| (0..n).map(|_| dist.sample(rng)).collect::<Vec<f64>>();
        Self {
            v_r: draw(n_r),
            v_theta: draw(n_theta),
            v_phi: draw(n_phi),
            m_theta_phi: Array2::from_shape_vec((n_theta, n_phi), draw(n_theta * n_phi)).unwrap(),
            m_phi_r: Array2::from_shape_vec((n_phi, n_r), draw(n_phi * n_r)).unwrap(),
            m_r_theta: Array2::from_shape_vec((n_r, n_theta), draw(n_r * n_theta)).unwrap(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.v_r.len()
            + self.v_theta.len()
            + self.v_phi.len()
            + self.m_theta_phi.len()
            + self.m_phi_r.len()
            + self.m_r_theta.len()
    }
}

/// Factors of one component grid (Yin or Yang).
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentFactors {
    pub density: Vec<FactorComponent>,
    pub appearance: Vec<FactorComponent>,
}

/// Which tensor of a grid an operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Density,
    Appearance,
}

/// The full factorized radiance grid: both component grids plus the
/// appearance channel basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedGrid {
    pub cfg: GridConfig,
    pub yin: ComponentFactors,
    pub yang: ComponentFactors,
    /// Channel basis, shape (C, 6 * n_appearance): Yin columns first
    /// (modes R, Θ, Φ per component), then Yang.
    pub basis: Array2<f64>,
    pub n_density: usize,
    pub n_appearance: usize,
    pub channels: usize,
}

impl FactorizedGrid {
    pub fn zeros(cfg: GridConfig, n_density: usize, n_appearance: usize, channels: usize) -> Self {
        let comp = |n: usize| {
            (0..n)
                .map(|_| FactorComponent::zeros(cfg.n_r, cfg.n_theta, cfg.n_phi))
                .collect::<Vec<_>>()
        };
        Self {
            yin: ComponentFactors {
                density: comp(n_density),
                appearance: comp(n_appearance),
            },
            yang: ComponentFactors {
                density: comp(n_density),
                appearance: comp(n_appearance),
            },
            basis: Array2::zeros((channels, 6 * n_appearance)),
            cfg,
            n_density,
            n_appearance,
            channels,
        }
    }

    /// All factor entries i.i.d. normal with the given standard deviation.
    pub fn random(
        cfg: GridConfig,
        n_density: usize,
        n_appearance: usize,
        channels: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let comp = |n: usize, rng: &mut dyn rand::RngCore| {
            (0..n)
                .map(|_| FactorComponent::random(cfg.n_r, cfg.n_theta, cfg.n_phi, std, rng))
                .collect::<Vec<_>>()
        };
        let yin = ComponentFactors {
            density: comp(n_density, rng),
            appearance: comp(n_appearance, rng),
        };
        let yang = ComponentFactors {
            density: comp(n_density, rng),
            appearance: comp(n_appearance, rng),
        };
        let dist = Normal::new(0.0, std).unwrap();
        let basis = Array2::from_shape_fn((channels, 6 * n_appearance), |_| dist.sample(rng));
        Self {
            cfg,
            yin,
            yang,
            basis,
            n_density,
            n_appearance,
            channels,
        }
    }

    pub fn factors(&self, id: GridId) -> &ComponentFactors {
        match id {
            GridId::Yin => &self.yin,
            GridId::Yang => &self.yang,
        }
    }

    pub fn factors_mut(&mut self, id: GridId) -> &mut ComponentFactors {
        match id {
            GridId::Yin => &mut self.yin,
            GridId::Yang => &mut self.yang,
        }
    }

    /// Column of `basis` holding the channel vector for (grid, component,
    /// mode), mode order R, Θ, Φ.
    pub fn basis_column(&self, id: GridId, component: usize, mode: usize) -> usize {
        let offset = match id {
            GridId::Yin => 0,
            GridId::Yang => 3 * self.n_appearance,
        };
        offset + 3 * component + mode
    }

    /// Stored parameter entries (factors plus basis). Stays O(N(n^2+n));
    /// never the O(n^3) dense count.
    pub fn param_count(&self) -> usize {
        let per = |f: &ComponentFactors| -> usize {
            f.density
                .iter()
                .chain(f.appearance.iter())
                .map(|c| c.param_count())
                .sum()
        };
        per(&self.yin) + per(&self.yang) + self.basis.len()
    }

    /// Dense density tensor of one component grid, shape (n_r, n_theta,
    /// n_phi). Test oracle only; refuses grids above 10^6 cells.
    pub fn materialize_density(&self, id: GridId) -> Result<Array3<f64>> {
        let (n_r, n_theta, n_phi) = (self.cfg.n_r, self.cfg.n_theta, self.cfg.n_phi);
        check_materialize_size(n_r * n_theta * n_phi)?;
        let mut out = Array3::zeros((n_r, n_theta, n_phi));
        for comp in &self.factors(id).density {
            accumulate_component(&mut out, comp, 1.0, 1.0, 1.0);
        }
        Ok(out)
    }

    /// Dense appearance tensor of one component grid, shape (n_r, n_theta,
    /// n_phi, C). Test oracle only.
    pub fn materialize_appearance(&self, id: GridId) -> Result<Array4<f64>> {
        let (n_r, n_theta, n_phi) = (self.cfg.n_r, self.cfg.n_theta, self.cfg.n_phi);
        check_materialize_size(n_r * n_theta * n_phi * self.channels)?;
        let mut out = Array4::zeros((n_r, n_theta, n_phi, self.channels));
        for (n, comp) in self.factors(id).appearance.iter().enumerate() {
            for c in 0..self.channels {
                let b = [
                    self.basis[[c, self.basis_column(id, n, 0)]],
                    self.basis[[c, self.basis_column(id, n, 1)]],
                    self.basis[[c, self.basis_column(id, n, 2)]],
                ];
                let mut slice = out.index_axis_mut(ndarray::Axis(3), c);
                let mut view = slice.view_mut();
                accumulate_component_view(&mut view, comp, b[0], b[1], b[2]);
            }
        }
        Ok(out)
    }

    /// Raw (pre-activation) density at a world point, via the owning grid's
    /// factor interpolation.
    pub fn query_density(&self, p: nalgebra::Vector3<f64>) -> f64 {
        let a = geom::locate(p, &self.cfg);
        self.query_density_at(&a)
    }

    pub fn query_density_at(&self, a: &GridAssignment) -> f64 {
        let st = Stencil::from_assignment(a, [self.cfg.n_r, self.cfg.n_theta, self.cfg.n_phi]);
        self.factors(a.grid)
            .density
            .iter()
            .map(|c| st.component_value(c))
            .sum()
    }

    /// C-dimensional appearance feature at a world point.
    pub fn query_appearance(&self, p: nalgebra::Vector3<f64>) -> Vec<f64> {
        let a = geom::locate(p, &self.cfg);
        let st = Stencil::from_assignment(&a, [self.cfg.n_r, self.cfg.n_theta, self.cfg.n_phi]);
        let coeffs = self.appearance_coefficients(a.grid, &st);
        let mut out = vec![0.0; self.channels];
        for (j, &q) in coeffs.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            let col = self.basis_column(a.grid, j / 3, j % 3);
            for c in 0..self.channels {
                out[c] += self.basis[[c, col]] * q;
            }
        }
        out
    }

    /// Per-(component, mode) interpolated scalars for the appearance factors
    /// of one grid, ordered [comp0:R,Θ,Φ, comp1:R,Θ,Φ, ...].
    pub fn appearance_coefficients(&self, id: GridId, st: &Stencil) -> Vec<f64> {
        let mut q = Vec::with_capacity(3 * self.n_appearance);
        for comp in &self.factors(id).appearance {
            let (a, b, c) = st.mode_values(comp);
            q.push(a);
            q.push(b);
            q.push(c);
        }
        q
    }

    /// Raw density from the average-pooled coarse grid. `kernel` is the pool
    /// size and stride per axis; values above an axis length clamp to it.
    /// Builds the pooled factors on the fly; hot paths should build a
    /// [`PooledDensity`] once per optimization step instead.
    pub fn query_density_coarse(&self, p: nalgebra::Vector3<f64>, kernel: usize) -> Result<f64> {
        if kernel == 0 {
            return Err(Error::Input("pooling kernel must be >= 1".into()));
        }
        Ok(PooledDensity::build(self, kernel).query(p))
    }

    /// Squared-difference total variation over every spatial factor (vectors
    /// along their axis, matrices along both axes). The channel basis has no
    /// spatial extent and is not penalized.
    pub fn tv_penalty(&self) -> f64 {
        let mut acc = 0.0;
        for id in GridId::BOTH {
            let f = self.factors(id);
            for comp in f.density.iter().chain(f.appearance.iter()) {
                acc += tv_vec(&comp.v_r)
                    + tv_vec(&comp.v_theta)
                    + tv_vec(&comp.v_phi)
                    + tv_mat(&comp.m_theta_phi)
                    + tv_mat(&comp.m_phi_r)
                    + tv_mat(&comp.m_r_theta);
            }
        }
        acc
    }
}

fn check_materialize_size(cells: usize) -> Result<()> {
    if cells > MATERIALIZE_CELL_LIMIT {
        return Err(Error::Input(format!(
            "refusing to materialize {cells} cells (limit {MATERIALIZE_CELL_LIMIT}); \
             materialization is a test oracle"
        )));
    }
    Ok(())
}

fn accumulate_component(out: &mut Array3<f64>, comp: &FactorComponent, sr: f64, st: f64, sp: f64) {
    let mut view = out.view_mut();
    accumulate_component_view(&mut view, comp, sr, st, sp);
}

fn accumulate_component_view(
    out: &mut ndarray::ArrayViewMut3<f64>,
    comp: &FactorComponent,
    scale_r: f64,
    scale_t: f64,
    scale_p: f64,
) {
    let (n_r, n_theta, n_phi) = out.dim();
    for i in 0..n_r {
        for j in 0..n_theta {
            for k in 0..n_phi {
                out[[i, j, k]] += scale_r * comp.v_r[i] * comp.m_theta_phi[[j, k]]
                    + scale_t * comp.v_theta[j] * comp.m_phi_r[[k, i]]
                    + scale_p * comp.v_phi[k] * comp.m_r_theta[[i, j]];
            }
        }
    }
}

fn tv_vec(v: &[f64]) -> f64 {
    v.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum()
}

fn tv_mat(m: &Array2<f64>) -> f64 {
    let (rows, cols) = m.dim();
    let mut acc = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            if i + 1 < rows {
                acc += (m[[i + 1, j]] - m[[i, j]]).powi(2);
            }
            if j + 1 < cols {
                acc += (m[[i, j + 1]] - m[[i, j]]).powi(2);
            }
        }
    }
    acc
}

/// Linear interpolation stencil along one axis, coordinates clamped to
/// [0, n-1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisStencil {
    pub i0: u32,
    pub i1: u32,
    pub w1: f64,
}

impl AxisStencil {
    pub fn new(u: f64, n: usize) -> Self {
        debug_assert!(n >= 2, "axis needs two nodes to interpolate");
        let u = u.clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 2);
        Self {
            i0: i0 as u32,
            i1: (i0 + 1) as u32,
            w1: u - i0 as f64,
        }
    }

    #[inline]
    pub fn interp(&self, v: &[f64]) -> f64 {
        v[self.i0 as usize] * (1.0 - self.w1) + v[self.i1 as usize] * self.w1
    }
}

#[inline]
fn bilinear(m: &Array2<f64>, a: &AxisStencil, b: &AxisStencil) -> f64 {
    let (a0, a1) = (a.i0 as usize, a.i1 as usize);
    let (b0, b1) = (b.i0 as usize, b.i1 as usize);
    let (wa, wb) = (a.w1, b.w1);
    m[[a0, b0]] * (1.0 - wa) * (1.0 - wb)
        + m[[a0, b1]] * (1.0 - wa) * wb
        + m[[a1, b0]] * wa * (1.0 - wb)
        + m[[a1, b1]] * wa * wb
}

/// Full trilinear stencil for one grid point: one axis stencil per axis.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub r: AxisStencil,
    pub theta: AxisStencil,
    pub phi: AxisStencil,
}

impl Stencil {
    pub fn new(index: [f64; 3], dims: [usize; 3]) -> Self {
        Self {
            r: AxisStencil::new(index[0], dims[0]),
            theta: AxisStencil::new(index[1], dims[1]),
            phi: AxisStencil::new(index[2], dims[2]),
        }
    }

    pub fn from_assignment(a: &GridAssignment, dims: [usize; 3]) -> Self {
        Self::new(a.index, dims)
    }

    /// Interpolated values of the three modes of a component.
    #[inline]
    pub fn mode_values(&self, c: &FactorComponent) -> (f64, f64, f64) {
        (
            self.r.interp(&c.v_r) * bilinear(&c.m_theta_phi, &self.theta, &self.phi),
            self.theta.interp(&c.v_theta) * bilinear(&c.m_phi_r, &self.phi, &self.r),
            self.phi.interp(&c.v_phi) * bilinear(&c.m_r_theta, &self.r, &self.theta),
        )
    }

    #[inline]
    pub fn component_value(&self, c: &FactorComponent) -> f64 {
        let (a, b, c) = self.mode_values(c);
        a + b + c
    }
}

/// Average-pooled density factors, built once and queried many times during
/// the coarse sampling pass.
#[derive(Debug, Clone)]
pub struct PooledDensity {
    cfg: GridConfig,
    kernel: [usize; 3],
    dims: [usize; 3],
    yin: Vec<FactorComponent>,
    yang: Vec<FactorComponent>,
}

impl PooledDensity {
    pub fn build(grid: &FactorizedGrid, kernel: usize) -> Self {
        let cfg = grid.cfg.clone();
        let k = [
            kernel.clamp(1, cfg.n_r),
            kernel.clamp(1, cfg.n_theta),
            kernel.clamp(1, cfg.n_phi),
        ];
        let dims = [
            cfg.n_r.div_ceil(k[0]),
            cfg.n_theta.div_ceil(k[1]),
            cfg.n_phi.div_ceil(k[2]),
        ];
        let pool_comp = |c: &FactorComponent| FactorComponent {
            v_r: pool_vec(&c.v_r, k[0]),
            v_theta: pool_vec(&c.v_theta, k[1]),
            v_phi: pool_vec(&c.v_phi, k[2]),
            m_theta_phi: pool_mat(&c.m_theta_phi, k[1], k[2]),
            m_phi_r: pool_mat(&c.m_phi_r, k[2], k[0]),
            m_r_theta: pool_mat(&c.m_r_theta, k[0], k[1]),
        };
        Self {
            yin: grid.yin.density.iter().map(pool_comp).collect(),
            yang: grid.yang.density.iter().map(pool_comp).collect(),
            cfg,
            kernel: k,
            dims,
        }
    }

    /// Raw pooled density at a world point. Fine index u maps onto the
    /// pooled axis as (u - (k-1)/2) / k: pooled node j averages fine nodes
    /// [jk, jk+k), whose center sits at jk + (k-1)/2.
    pub fn query(&self, p: nalgebra::Vector3<f64>) -> f64 {
        let a = geom::locate(p, &self.cfg);
        let coarse = [
            (a.index[0] - (self.kernel[0] as f64 - 1.0) / 2.0) / self.kernel[0] as f64,
            (a.index[1] - (self.kernel[1] as f64 - 1.0) / 2.0) / self.kernel[1] as f64,
            (a.index[2] - (self.kernel[2] as f64 - 1.0) / 2.0) / self.kernel[2] as f64,
        ];
        // A fully pooled axis (single node) is constant along that axis.
        let st = Stencil {
            r: axis_stencil_safe(coarse[0], self.dims[0]),
            theta: axis_stencil_safe(coarse[1], self.dims[1]),
            phi: axis_stencil_safe(coarse[2], self.dims[2]),
        };
        let comps = match a.grid {
            GridId::Yin => &self.yin,
            GridId::Yang => &self.yang,
        };
        comps.iter().map(|c| st.component_value(c)).sum()
    }
}

fn axis_stencil_safe(u: f64, n: usize) -> AxisStencil {
    if n == 1 {
        AxisStencil {
            i0: 0,
            i1: 0,
            w1: 0.0,
        }
    } else {
        AxisStencil::new(u, n)
    }
}

fn pool_vec(v: &[f64], k: usize) -> Vec<f64> {
    v.chunks(k)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn pool_mat(m: &Array2<f64>, k_rows: usize, k_cols: usize) -> Array2<f64> {
    let (rows, cols) = m.dim();
    let out_rows = rows.div_ceil(k_rows);
    let out_cols = cols.div_ceil(k_cols);
    Array2::from_shape_fn((out_rows, out_cols), |(i, j)| {
        let r0 = i * k_rows;
        let r1 = (r0 + k_rows).min(rows);
        let c0 = j * k_cols;
        let c1 = (c0 + k_cols).min(cols);
        let mut acc = 0.0;
        for r in r0..r1 {
            for c in c0..c1 {
                acc += m[[r, c]];
            }
        }
        acc / ((r1 - r0) * (c1 - c0)) as f64
    })
}

/// Direction-indexed background radiance stored as an equirectangular image
/// of unconstrained values; a sigmoid at fetch time yields RGB in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMap {
    pub height: usize,
    pub width: usize,
    /// Raw texel values, length height * width * 3, row-major.
    pub pixels: Vec<f64>,
}

/// Bilinear footprint of an environment fetch: up to four texels with
/// weights, plus the interpolated raw value per channel.
#[derive(Debug, Clone, Copy)]
pub struct EnvSample {
    pub texels: [(usize, f64); 4],
    pub raw: [f64; 3],
}

impl EnvironmentMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1);
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn constant_rgb(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut env = Self::zeros(height, width);
        let raw = rgb.map(logit);
        for t in 0..height * width {
            env.pixels[t * 3..t * 3 + 3].copy_from_slice(&raw);
        }
        env
    }

    /// RGB radiance toward unit direction `d`: bilinear over raw texels with
    /// longitude wrap-around and latitude clamp, then sigmoid.
    pub fn fetch(&self, d: nalgebra::Vector3<f64>) -> [f64; 3] {
        self.sample(d).raw.map(sigmoid)
    }

    /// Fetch together with the texel footprint (for backpropagation).
    pub fn sample(&self, d: nalgebra::Vector3<f64>) -> EnvSample {
        let (u, v) = geom::direction_to_pixel(d, self.width, self.height);
        let w = self.width as i64;
        let uf = u.floor();
        let fu = u - uf;
        let c0 = (uf as i64).rem_euclid(w) as usize;
        let c1 = (uf as i64 + 1).rem_euclid(w) as usize;
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let r0 = v.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let fv = v - r0 as f64;
        let texels = [
            (r0 * self.width + c0, (1.0 - fu) * (1.0 - fv)),
            (r0 * self.width + c1, fu * (1.0 - fv)),
            (r1 * self.width + c0, (1.0 - fu) * fv),
            (r1 * self.width + c1, fu * fv),
        ];
        let mut raw = [0.0; 3];
        for (t, wgt) in texels {
            for ch in 0..3 {
                raw[ch] += self.pixels[t * 3 + ch] * wgt;
            }
        }
        EnvSample { texels, raw }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(y: f64) -> f64 {
    let y = y.clamp(1e-12, 1.0 - 1e-12);
    (y / (1.0 - y)).ln()
}

/// Shifted-softplus density activation: sigma = ln(1 + exp(raw + b0)) with
/// b0 = -1, keeping initial densities small while staying smooth.
pub const DENSITY_SHIFT: f64 = -1.0;

#[inline]
pub fn density_activation(raw: f64) -> f64 {
    softplus(raw + DENSITY_SHIFT)
}

/// d(sigma)/d(raw).
#[inline]
pub fn density_activation_grad(raw: f64) -> f64 {
    sigmoid(raw + DENSITY_SHIFT)
}

#[inline]
fn softplus(x: f64) -> f64 {
    // Stable for large |x|.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
