//! Control vector fields `u: ℝ^d → ℝ^d` and their parameter VJPs.
//!
//! Parametric families expose `J_θ u(x)ᵀ c` for a cotangent `c` through
//! [`Control::param_vjp`]. The training loop only ever needs these
//! vector-Jacobian products, so no general automatic differentiation is used.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::potential::{mat_vec, spd_inverse, BiasPotential, BiasScratch};

/// `σ = √(2/β)`, the constant diffusion coefficient of the dynamics.
pub fn sigma(beta: f64) -> f64 {
    (2.0 / beta).sqrt()
}

/// A control vector field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Control {
    Zero { dim: usize },
    Bias(BiasControl),
    Gaussian(GaussianAnsatz),
    Network(FeedForwardNet),
    CvLifted(CvLiftedControl),
    Tabulated(TabulatedField),
}

/// `u(x) = −σ⁻¹ ∇V_bias(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasControl {
    pub bias: BiasPotential,
    pub beta: f64,
}

/// Builds the control induced by a full-space bias potential.
pub fn control_from_bias(bias: BiasPotential, beta: f64) -> Result<Control> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Input(format!("inverse temperature must be positive, got {beta}")));
    }
    Ok(Control::Bias(BiasControl { bias, beta }))
}

/// Lifts the control of a bias potential living on the coordinates
/// `projection` of a `dim`-dimensional state to the full state space.
pub fn lift_cv_control(bias: BiasPotential, projection: Vec<usize>, beta: f64, dim: usize) -> Result<Control> {
    let inner = control_from_bias(bias, beta)?;
    CvLiftedControl::new(inner, projection, dim).map(Control::CvLifted)
}

impl Control {
    pub fn zero(dim: usize) -> Self {
        Control::Zero { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            Control::Zero { dim } => *dim,
            Control::Bias(b) => b.bias.space_dim(),
            Control::Gaussian(g) => g.dim,
            Control::Network(n) => n.widths[0],
            Control::CvLifted(c) => c.dim,
            Control::Tabulated(t) => t.dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Control::Zero { .. } | Control::Bias(_) | Control::Tabulated(_) => 0,
            Control::Gaussian(g) => g.weights.len(),
            Control::Network(n) => n.params.len(),
            Control::CvLifted(c) => c.inner.param_count(),
        }
    }

    pub fn is_parametric(&self) -> bool {
        self.param_count() > 0
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Control::Zero { .. } | Control::Bias(_) | Control::Tabulated(_) => Vec::new(),
            Control::Gaussian(g) => g.weights.clone(),
            Control::Network(n) => n.params.clone(),
            Control::CvLifted(c) => c.inner.params(),
        }
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        check_dim(self.param_count(), theta.len())?;
        match self {
            Control::Zero { .. } | Control::Bias(_) | Control::Tabulated(_) => {}
            Control::Gaussian(g) => g.weights.copy_from_slice(theta),
            Control::Network(n) => n.params.copy_from_slice(theta),
            Control::CvLifted(c) => c.inner.set_params(theta)?,
        }
        Ok(())
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::for_control(self)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.eval_with(x, &mut out, &mut self.workspace());
        Ok(out)
    }

    /// Returns `J_θ u(x)ᵀ · cotangent`.
    pub fn param_vjp(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        if !self.is_parametric() {
            return Err(Error::Unsupported("parameter VJP of a non-parametric control"));
        }
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), cotangent.len())?;
        let mut ws = self.workspace();
        let mut out = vec![0.0; self.dim()];
        self.eval_with(x, &mut out, &mut ws);
        let mut acc = vec![0.0; self.param_count()];
        self.vjp_add_with(cotangent, 1.0, &mut acc, &mut ws);
        Ok(acc)
    }

    /// Hot-path evaluation. Lengths are not checked. Leaves whatever the VJP
    /// needs in `ws`.
    pub fn eval_with(&self, x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        match self {
            Control::Zero { .. } => out.iter_mut().for_each(|o| *o = 0.0),
            Control::Bias(b) => {
                b.bias.gradient_with(x, out, &mut ws.bias, false);
                let s = -1.0 / sigma(b.beta);
                out.iter_mut().for_each(|o| *o *= s);
            }
            Control::Gaussian(g) => g.eval_with(x, out, ws),
            Control::Network(n) => n.forward(x, out, ws),
            Control::Tabulated(t) => t.interpolate_into(x, out),
            Control::CvLifted(c) => {
                let inner_ws = ws.inner.as_deref_mut().expect("lifted workspace");
                for (y, &i) in ws.y.iter_mut().zip(&c.projection) {
                    *y = x[i];
                }
                c.inner.eval_with(&ws.y, &mut ws.v, inner_ws);
                out.iter_mut().for_each(|o| *o = 0.0);
                for (v, &i) in ws.v.iter().zip(&c.projection) {
                    out[i] = *v;
                }
            }
        }
    }

    /// `acc += scale · J_θ u(x)ᵀ cotangent` where `x` is the point of the last
    /// [`Control::eval_with`] call on `ws`. No-op for non-parametric controls.
    pub fn vjp_add_with(&self, cotangent: &[f64], scale: f64, acc: &mut [f64], ws: &mut Workspace) {
        match self {
            Control::Zero { .. } | Control::Bias(_) | Control::Tabulated(_) => {}
            Control::Gaussian(g) => g.vjp_add(cotangent, scale, acc, ws),
            Control::Network(n) => n.backward_add(cotangent, scale, acc, ws),
            Control::CvLifted(c) => {
                let inner_ws = ws.inner.as_deref_mut().expect("lifted workspace");
                for (ct, &i) in ws.cot.iter_mut().zip(&c.projection) {
                    *ct = cotangent[i];
                }
                c.inner.vjp_add_with(&ws.cot, scale, acc, inner_ws);
            }
        }
    }

    /// Two [`Control::vjp_add_with`] calls at the same point fused into one
    /// pass. Results are identical to the two separate calls.
    #[allow(clippy::too_many_arguments)]
    pub fn vjp_pair_add_with(
        &self,
        cot1: &[f64],
        scale1: f64,
        acc1: &mut [f64],
        cot2: &[f64],
        scale2: f64,
        acc2: &mut [f64],
        ws: &mut Workspace,
    ) {
        match self {
            Control::Network(n) => n.backward_pair_add([cot1, cot2], [scale1, scale2], [acc1, acc2], ws),
            Control::CvLifted(c) => {
                let inner_ws = ws.inner.as_deref_mut().expect("lifted workspace");
                for ((c1, c2), &i) in ws.cot.iter_mut().zip(ws.cot2.iter_mut()).zip(&c.projection) {
                    *c1 = cot1[i];
                    *c2 = cot2[i];
                }
                c.inner.vjp_pair_add_with(&ws.cot, scale1, acc1, &ws.cot2, scale2, acc2, inner_ws);
            }
            _ => {
                self.vjp_add_with(cot1, scale1, acc1, ws);
                self.vjp_add_with(cot2, scale2, acc2, ws);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Control = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Control::Zero { dim } if *dim == 0 => Err(Error::Input("zero control needs dim ≥ 1".into())),
            Control::Bias(b) if !(b.beta > 0.0) => Err(Error::Input("beta must be positive".into())),
            Control::Tabulated(t) => TabulatedField::new(t.lo.clone(), t.h.clone(), t.n.clone(), t.values.clone()).map(|_| ()),
            Control::CvLifted(c) => {
                CvLiftedControl::new((*c.inner).clone(), c.projection.clone(), c.dim)?;
                c.inner.validate()
            }
            _ => Ok(()),
        }
    }
}

/// Scratch buffers for evaluating a control without allocating.
#[derive(Debug, Clone)]
pub struct Workspace {
    bias: BiasScratch,
    /// Gaussian ansatz: cached `∇𝒩_i(x)`, row-major `p × d`.
    basis: Vec<f64>,
    z: Vec<f64>,
    /// Network: post-activation values per layer, `acts[0] = x`.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    deltas2: Vec<Vec<f64>>,
    y: Vec<f64>,
    v: Vec<f64>,
    cot: Vec<f64>,
    cot2: Vec<f64>,
    inner: Option<Box<Workspace>>,
}

impl Workspace {
    fn for_control(c: &Control) -> Self {
        let d = c.dim();
        let mut ws = Workspace {
            bias: BiasScratch::new(d),
            basis: Vec::new(),
            z: vec![0.0; d],
            acts: Vec::new(),
            deltas: Vec::new(),
            deltas2: Vec::new(),
            y: Vec::new(),
            v: Vec::new(),
            cot: Vec::new(),
            cot2: Vec::new(),
            inner: None,
        };
        match c {
            Control::Gaussian(g) => ws.basis = vec![0.0; g.weights.len() * d],
            Control::Network(n) => {
                ws.acts = n.widths.iter().map(|&w| vec![0.0; w]).collect();
                ws.deltas = n.widths.iter().map(|&w| vec![0.0; w]).collect();
                ws.deltas2 = ws.deltas.clone();
            }
            Control::CvLifted(cv) => {
                let s = cv.projection.len();
                ws.y = vec![0.0; s];
                ws.v = vec![0.0; s];
                ws.cot = vec![0.0; s];
                ws.cot2 = vec![0.0; s];
                ws.inner = Some(Box::new(Workspace::for_control(&cv.inner)));
            }
            _ => {}
        }
        ws
    }
}

/// `u_θ(x) = Σ_i θ_i ∇𝒩(x; μ_i, Σ_i)` with normalized Gaussian densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianAnsatzDoc", into = "GaussianAnsatzDoc")]
pub struct GaussianAnsatz {
    dim: usize,
    centers: Vec<Vec<f64>>,
    covariances: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
    precisions: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianAnsatzDoc {
    centers: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    weights: Vec<f64>,
}

impl TryFrom<GaussianAnsatzDoc> for GaussianAnsatz {
    type Error = Error;
    fn try_from(doc: GaussianAnsatzDoc) -> Result<Self> {
        let covs = doc
            .covariances
            .into_iter()
            .map(|rows| {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Input("covariance must be square".into()));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = GaussianAnsatz::new(doc.centers, covs)?;
        check_dim(g.weights.len(), doc.weights.len())?;
        g.weights = doc.weights;
        Ok(g)
    }
}

impl From<GaussianAnsatz> for GaussianAnsatzDoc {
    fn from(g: GaussianAnsatz) -> Self {
        GaussianAnsatzDoc {
            centers: g.centers,
            covariances: g
                .covariances
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            weights: g.weights,
        }
    }
}

impl GaussianAnsatz {
    /// Ansatz with zero weights.
    pub fn new(centers: Vec<Vec<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        check_dim(centers.len(), covariances.len())?;
        let dim = centers.first().map(Vec::len).ok_or_else(|| Error::Input("ansatz needs at least one center".into()))?;
        if dim == 0 {
            return Err(Error::Input("ansatz centers must be non-empty vectors".into()));
        }
        let mut precisions = Vec::with_capacity(centers.len());
        let mut norms = Vec::with_capacity(centers.len());
        for (c, cov) in centers.iter().zip(&covariances) {
            check_dim(dim, c.len())?;
            check_dim(dim, cov.nrows())?;
            let inv = spd_inverse(cov)?;
            let det = cov.clone().cholesky().map(|ch| ch.determinant()).unwrap_or_else(|| cov.determinant());
            norms.push((2.0 * PI).powf(-(dim as f64) / 2.0) / det.sqrt());
            precisions.push((0..dim * dim).map(|k| inv[(k / dim, k % dim)]).collect());
        }
        let p = centers.len();
        Ok(Self { dim, centers, covariances, weights: vec![0.0; p], precisions, norms })
    }

    /// `per_axis^dim` centers on the tensor grid of equispaced points over
    /// `[lo, hi]^dim` (endpoints included), each with covariance `variance·Id`.
    pub fn on_grid(dim: usize, lo: f64, hi: f64, per_axis: usize, variance: f64) -> Result<Self> {
        if per_axis == 0 || dim == 0 || !(hi > lo) {
            return Err(Error::Input("invalid ansatz grid".into()));
        }
        let axis: Vec<f64> = if per_axis == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..per_axis).map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64).collect()
        };
        let total = per_axis.checked_pow(dim as u32).ok_or_else(|| Error::Input("ansatz grid too large".into()))?;
        let centers = (0..total)
            .map(|mut k| {
                (0..dim)
                    .map(|_| {
                        let v = axis[k % per_axis];
                        k /= per_axis;
                        v
                    })
                    .collect()
            })
            .collect();
        let cov = DMatrix::from_diagonal_element(dim, dim, variance);
        Self::new(centers, vec![cov; total])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        check_dim(self.weights.len(), w.len())?;
        self.weights.copy_from_slice(w);
        Ok(())
    }

    /// Normalization constant of basis function `i`.
    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// `∇𝒩(x; μ_i, Σ_i)` for every `i`, row-major `p × d`.
    fn basis_into(&self, x: &[f64], basis: &mut [f64], z: &mut [f64]) {
        let d = self.dim;
        for (i, row) in basis.chunks_exact_mut(d).enumerate() {
            for ((zk, xk), mk) in z.iter_mut().zip(x).zip(&self.centers[i]) {
                *zk = xk - mk;
            }
            mat_vec(&self.precisions[i], z, row);
            let q: f64 = z.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            let dens = self.norms[i] * (-0.5 * q).exp();
            row.iter_mut().for_each(|r| *r *= -dens);
        }
    }

    /// Matrix `B` with `u_θ(x) = B θ`, shape `d × p`.
    pub fn basis_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        let p = self.weights.len();
        let mut basis = vec![0.0; p * self.dim];
        let mut z = vec![0.0; self.dim];
        self.basis_into(x, &mut basis, &mut z);
        Ok(DMatrix::from_fn(self.dim, p, |k, i| basis[i * self.dim + k]))
    }

    fn eval_with(&self, x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        self.basis_into(x, &mut ws.basis, &mut ws.z);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (row, th) in ws.basis.chunks_exact(self.dim).zip(&self.weights) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += th * r;
            }
        }
    }

    fn vjp_add(&self, cot: &[f64], scale: f64, acc: &mut [f64], ws: &Workspace) {
        for (a, row) in acc.iter_mut().zip(ws.basis.chunks_exact(self.dim)) {
            let dot: f64 = row.iter().zip(cot).map(|(r, c)| r * c).sum();
            *a += scale * dot;
        }
    }
}

/// Fully connected network `u_θ(x) = A_L ρ(⋯ρ(A_1 x + b_1)⋯) + b_L` with
/// `ρ = tanh` on every hidden layer and a linear output layer.
///
/// Parameters are stored flat, layer by layer: `A_l` row-major followed by
/// `b_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetDoc", into = "NetDoc")]
pub struct FeedForwardNet {
    widths: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetDoc {
    widths: Vec<usize>,
    params: Vec<f64>,
}

impl TryFrom<NetDoc> for FeedForwardNet {
    type Error = Error;
    fn try_from(doc: NetDoc) -> Result<Self> {
        Self::from_params(doc.widths, doc.params)
    }
}

impl From<FeedForwardNet> for NetDoc {
    fn from(n: FeedForwardNet) -> Self {
        NetDoc { widths: n.widths, params: n.params }
    }
}

/// Dot product with four independent partial sums so the compiler can keep
/// several multiply-adds in flight.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// Default hidden layer widths.
pub const DEFAULT_HIDDEN: [usize; 2] = [30, 30];

impl FeedForwardNet {
    pub fn param_count_for(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Input("network needs at least input and output widths, all positive".into()));
        }
        if widths[0] != widths[widths.len() - 1] {
            return Err(Error::Input("network output width must equal input width".into()));
        }
        Ok(())
    }

    pub fn from_params(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        Self::check_widths(&widths)?;
        check_dim(Self::param_count_for(&widths), params.len())?;
        Ok(Self { widths, params })
    }

    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialization.
    pub fn init(widths: Vec<usize>, seed: u64) -> Result<Self> {
        Self::check_widths(&widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count_for(&widths));
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        Ok(Self { widths, params })
    }

    /// `d → hidden… → d`.
    pub fn with_hidden(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Self::init(widths, seed)
    }

    /// Zeroes the output layer so the network represents `u ≡ 0` while the
    /// hidden layers keep their initialization.
    pub fn zero_output(&mut self) {
        let l = self.widths.len() - 1;
        let n = self.widths[l] * self.widths[l - 1] + self.widths[l];
        let len = self.params.len();
        self.params[len - n..].iter_mut().for_each(|p| *p = 0.0);
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn forward(&self, x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let layers = self.widths.len() - 1;
        ws.acts[0].copy_from_slice(x);
        let mut off = 0;
        for l in 1..=layers {
            let (nin, nout) = (self.widths[l - 1], self.widths[l]);
            let a = &self.params[off..off + nout * nin];
            let b = &self.params[off + nout * nin..off + nout * nin + nout];
            off += nout * nin + nout;
            let (prev, rest) = ws.acts.split_at_mut(l);
            let input = &prev[l - 1];
            let dst: &mut [f64] = if l == layers { out } else { &mut rest[0] };
            for (j, o) in dst.iter_mut().enumerate() {
                let s = b[j] + dot(&a[j * nin..(j + 1) * nin], input);
                *o = if l == layers { s } else { s.tanh() };
            }
        }
    }

    fn backward_add(&self, cot: &[f64], scale: f64, acc: &mut [f64], ws: &mut Workspace) {
        let layers = self.widths.len() - 1;
        let last = &mut ws.deltas[layers];
        for (d, c) in last.iter_mut().zip(cot) {
            *d = scale * c;
        }
        let mut off = self.params.len();
        for l in (1..=layers).rev() {
            let (nin, nout) = (self.widths[l - 1], self.widths[l]);
            off -= nout * nin + nout;
            let (lower, upper) = ws.deltas.split_at_mut(l);
            let delta = &upper[0];
            let input = &ws.acts[l - 1];
            let (ga, gb) = acc[off..off + nout * nin + nout].split_at_mut(nout * nin);
            for (j, dj) in delta.iter().enumerate() {
                gb[j] += dj;
                for (g, v) in ga[j * nin..(j + 1) * nin].iter_mut().zip(input) {
                    *g += dj * v;
                }
            }
            if l > 1 {
                let a = &self.params[off..off + nout * nin];
                let dprev = &mut lower[l - 1];
                dprev.iter_mut().for_each(|v| *v = 0.0);
                for (j, dj) in delta.iter().enumerate() {
                    for (dp, w) in dprev.iter_mut().zip(&a[j * nin..(j + 1) * nin]) {
                        *dp += w * dj;
                    }
                }
                for (dp, act) in dprev.iter_mut().zip(input) {
                    *dp *= 1.0 - act * act;
                }
            }
        }
    }
}

impl FeedForwardNet {
    fn backward_pair_add(&self, cot: [&[f64]; 2], scale: [f64; 2], acc: [&mut [f64]; 2], ws: &mut Workspace) {
        let layers = self.widths.len() - 1;
        let [acc1, acc2] = acc;
        for (d, c) in ws.deltas[layers].iter_mut().zip(cot[0]) {
            *d = scale[0] * c;
        }
        for (d, c) in ws.deltas2[layers].iter_mut().zip(cot[1]) {
            *d = scale[1] * c;
        }
        let mut off = self.params.len();
        for l in (1..=layers).rev() {
            let (nin, nout) = (self.widths[l - 1], self.widths[l]);
            off -= nout * nin + nout;
            let (lower1, upper1) = ws.deltas.split_at_mut(l);
            let (lower2, upper2) = ws.deltas2.split_at_mut(l);
            let (delta1, delta2) = (&upper1[0], &upper2[0]);
            let input = &ws.acts[l - 1];
            let (ga1, gb1) = acc1[off..off + nout * nin + nout].split_at_mut(nout * nin);
            let (ga2, gb2) = acc2[off..off + nout * nin + nout].split_at_mut(nout * nin);
            for j in 0..nout {
                let (d1, d2) = (delta1[j], delta2[j]);
                gb1[j] += d1;
                gb2[j] += d2;
                let r1 = &mut ga1[j * nin..(j + 1) * nin];
                let r2 = &mut ga2[j * nin..(j + 1) * nin];
                for ((g1, g2), v) in r1.iter_mut().zip(r2.iter_mut()).zip(input) {
                    *g1 += d1 * v;
                    *g2 += d2 * v;
                }
            }
            if l > 1 {
                let a = &self.params[off..off + nout * nin];
                let (p1, p2) = (&mut lower1[l - 1], &mut lower2[l - 1]);
                p1.iter_mut().for_each(|v| *v = 0.0);
                p2.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..nout {
                    let (d1, d2) = (delta1[j], delta2[j]);
                    for ((q1, q2), w) in p1.iter_mut().zip(p2.iter_mut()).zip(&a[j * nin..(j + 1) * nin]) {
                        *q1 += w * d1;
                        *q2 += w * d2;
                    }
                }
                for ((q1, q2), act) in p1.iter_mut().zip(p2.iter_mut()).zip(input) {
                    let s = 1.0 - act * act;
                    *q1 *= s;
                    *q2 *= s;
                }
            }
        }
    }
}

/// Vector field tabulated on a regular grid and evaluated by multilinear
/// interpolation. Points outside the grid are clamped to its boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedField {
    lo: Vec<f64>,
    h: Vec<f64>,
    n: Vec<usize>,
    /// Node-major: component `k` of node `j` is `values[j·d + k]`, with the
    /// first axis varying fastest in the node index.
    values: Vec<f64>,
}

impl TabulatedField {
    pub fn new(lo: Vec<f64>, h: Vec<f64>, n: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let d = lo.len();
        if d == 0 || d > 16 {
            return Err(Error::Input("tabulated field needs between 1 and 16 axes".into()));
        }
        check_dim(d, h.len())?;
        check_dim(d, n.len())?;
        if n.iter().any(|&m| m < 2) || h.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Input("tabulated field needs ≥ 2 nodes and positive spacing per axis".into()));
        }
        check_dim(n.iter().product::<usize>() * d, values.len())?;
        Ok(Self { lo, h, n, values })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interpolate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.interpolate_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn interpolate_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        // at most 2^d corners; d ≤ 16 is plenty for grid-based fields
        let mut base = [0usize; 16];
        let mut frac = [0.0f64; 16];
        for k in 0..d {
            let cells = self.n[k] - 1;
            let t = ((x[k] - self.lo[k]) / self.h[k]).clamp(0.0, cells as f64);
            let i = (t.floor() as usize).min(cells - 1);
            base[k] = i;
            frac[k] = t - i as f64;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            let mut stride = 1;
            for k in 0..d {
                let up = corner >> k & 1 == 1;
                if up {
                    w *= frac[k];
                } else {
                    w *= 1.0 - frac[k];
                }
                idx += (base[k] + usize::from(up)) * stride;
                stride *= self.n[k];
            }
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&self.values[idx * d..(idx + 1) * d]) {
                *o += w * v;
            }
        }
    }
}

/// Control on a collective-variable space `y = (x_{i_1}, …, x_{i_s})`
/// lifted to the full space through the selection Jacobian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvLiftedControl {
    pub inner: Box<Control>,
    pub projection: Vec<usize>,
    pub dim: usize,
}

impl CvLiftedControl {
    pub fn new(inner: Control, projection: Vec<usize>, dim: usize) -> Result<Self> {
        check_dim(inner.dim(), projection.len())?;
        let mut seen = vec![false; dim];
        for &i in &projection {
            if i >= dim {
                return Err(Error::Input(format!("projection index {i} out of range for dimension {dim}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Input(format!("duplicate projection index {i}")));
            }
        }
        Ok(Self { inner: Box::new(inner), projection, dim })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::GaussianBump;
    use proptest::prelude::*;
    use rand::Rng;

    fn fd_vjp(c: &Control, x: &[f64], cot: &[f64], h: f64) -> Vec<f64> {
        let theta = c.params();
        (0..theta.len())
            .map(|i| {
                let mut cp = c.clone();
                let mut t = theta.clone();
                t[i] += h;
                cp.set_params(&t).unwrap();
                let up: f64 = cp.eval(x).unwrap().iter().zip(cot).map(|(a, b)| a * b).sum();
                t[i] -= 2.0 * h;
                cp.set_params(&t).unwrap();
                let dn: f64 = cp.eval(x).unwrap().iter().zip(cot).map(|(a, b)| a * b).sum();
                (up - dn) / (2.0 * h)
            })
            .collect()
    }

    fn normal_density(x: &[f64], mu: &[f64], var: f64) -> f64 {
        let d = x.len() as f64;
        let q: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b) / var).sum();
        (2.0 * PI * var).powf(-d / 2.0) * (-0.5 * q).exp()
    }

    #[test]
    fn zero_control_is_zero() {
        let c = Control::zero(3);
        assert_eq!(c.eval(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0; 3]);
        assert_eq!(c.param_count(), 0);
        assert!(matches!(c.param_vjp(&[0.0; 3], &[1.0; 3]), Err(Error::Unsupported(_))));
        assert!(c.eval(&[0.0]).is_err());
    }

    #[test]
    fn bias_control_closed_form() {
        let bias = BiasPotential::new(1, vec![GaussianBump::isotropic(1.0, vec![0.0], 0.5).unwrap()]).unwrap();
        let c = control_from_bias(bias.clone(), 1.0).unwrap();
        let u = c.eval(&[1.0]).unwrap()[0];
        assert!((u - 2.0 * (-1.0f64).exp() / 2.0f64.sqrt()).abs() < 1e-15);
        assert!((u - 0.520312).abs() < 1e-4);
        // σ u == −∇V_bias
        for x in [-1.3, 0.2, 0.9] {
            let su = sigma(1.0) * c.eval(&[x]).unwrap()[0];
            let g = bias.gradient(&[x]).unwrap()[0];
            assert!((su + g).abs() <= 4.0 * f64::EPSILON * g.abs());
        }
        let empty = control_from_bias(BiasPotential::empty(2), 2.0).unwrap();
        assert_eq!(empty.eval(&[0.3, 0.1]).unwrap(), vec![0.0, 0.0]);
        assert!(control_from_bias(BiasPotential::empty(1), 0.0).is_err());
    }

    #[test]
    fn cv_lift_selects_coordinates() {
        let bias = BiasPotential::new(
            1,
            vec![
                GaussianBump::isotropic(1.0, vec![-0.9], 0.5).unwrap(),
                GaussianBump::isotropic(0.7, vec![-0.4], 0.5).unwrap(),
            ],
        )
        .unwrap();
        let lifted = lift_cv_control(bias.clone(), vec![0], 1.0, 5).unwrap();
        let x = [-0.7, 0.3, 1.2, -2.0, 0.1];
        let u = lifted.eval(&x).unwrap();
        assert!(u[1..].iter().all(|v| *v == 0.0));
        let direct = control_from_bias(bias.clone(), 1.0).unwrap().eval(&[x[0]]).unwrap()[0];
        assert_eq!(u[0], direct);
        let h = 1e-5;
        let fd = (bias.value(&[x[0] + h]).unwrap() - bias.value(&[x[0] - h]).unwrap()) / (2.0 * h);
        assert!((u[0] + fd / sigma(1.0)).abs() < 1e-8);
    }

    #[test]
    fn identity_lift_matches_full_control() {
        let bias = BiasPotential::new(
            2,
            vec![GaussianBump::isotropic(1.0, vec![-0.9, 0.2], 0.5).unwrap()],
        )
        .unwrap();
        let full = control_from_bias(bias.clone(), 1.0).unwrap();
        let lifted = lift_cv_control(bias, vec![0, 1], 1.0, 2).unwrap();
        let x = [0.1, -0.3];
        assert_eq!(full.eval(&x).unwrap(), lifted.eval(&x).unwrap());
    }

    #[test]
    fn cv_lift_validation() {
        let b = BiasPotential::empty(2);
        assert!(lift_cv_control(b.clone(), vec![1, 1], 1.0, 3).is_err());
        assert!(lift_cv_control(b.clone(), vec![0, 3], 1.0, 3).is_err());
        assert!(lift_cv_control(b, vec![0], 1.0, 3).is_err());
    }

    #[test]
    fn gaussian_ansatz_grid_layout() {
        let g = GaussianAnsatz::on_grid(2, -3.0, 3.0, 10, 0.5).unwrap();
        assert_eq!(g.centers().len(), 100);
        assert_eq!(g.centers()[0], vec![-3.0, -3.0]);
        assert_eq!(g.centers()[99], vec![3.0, 3.0]);
        let g1 = GaussianAnsatz::on_grid(1, -3.0, 3.0, 50, 0.5).unwrap();
        assert_eq!(g1.centers().len(), 50);
    }

    #[test]
    fn gaussian_basis_matches_density_gradient() {
        let mut g = GaussianAnsatz::new(vec![vec![0.3, -0.2]], vec![DMatrix::from_diagonal_element(2, 2, 0.5)]).unwrap();
        g.set_weights(&[1.0]).unwrap();
        let c = Control::Gaussian(g);
        let x = [0.9, 0.4];
        let u = c.eval(&x).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (normal_density(&xp, &[0.3, -0.2], 0.5) - normal_density(&xm, &[0.3, -0.2], 0.5)) / (2.0 * h);
            assert!((u[k] - fd).abs() < 1e-8, "{} vs {fd}", u[k]);
        }
        // stationary at its own mean
        assert_eq!(c.eval(&[0.3, -0.2]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn gaussian_vjp_is_independent_of_weights() {
        let mut g = GaussianAnsatz::on_grid(1, -3.0, 3.0, 7, 0.5).unwrap();
        let c0 = Control::Gaussian(g.clone());
        g.set_weights(&[1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 2.0]).unwrap();
        let c1 = Control::Gaussian(g);
        let a = c0.param_vjp(&[0.4], &[1.7]).unwrap();
        let b = c1.param_vjp(&[0.4], &[1.7]).unwrap();
        assert_eq!(a, b);
        assert_eq!(c1.param_vjp(&[0.4], &[0.0]).unwrap(), vec![0.0; 7]);
    }

    #[test]
    fn degenerate_network_is_constant() {
        let widths = vec![2, 4, 4, 2];
        let mut params = vec![0.0; FeedForwardNet::param_count_for(&widths)];
        let n = params.len();
        params[n - 2] = 0.7;
        params[n - 1] = -1.1;
        let c = Control::Network(FeedForwardNet::from_params(widths, params).unwrap());
        assert_eq!(c.eval(&[3.0, -2.0]).unwrap(), vec![0.7, -1.1]);
    }

    #[test]
    fn single_identity_layer_is_identity() {
        let params = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let c = Control::Network(FeedForwardNet::from_params(vec![3, 3], params).unwrap());
        assert_eq!(c.eval(&[0.5, -2.0, 7.0]).unwrap(), vec![0.5, -2.0, 7.0]);
    }

    #[test]
    fn network_param_count_and_bounds() {
        let net = FeedForwardNet::with_hidden(20, &DEFAULT_HIDDEN, 1).unwrap();
        assert_eq!(net.params().len(), 20 * 30 + 30 + 30 * 30 + 30 + 30 * 20 + 20);
        let c = Control::Network(net);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(c.eval(&x).unwrap().iter().all(|v| v.is_finite()));
        }
        assert!(FeedForwardNet::init(vec![2, 5, 3], 0).is_err());
    }

    #[test]
    fn network_vjp_matches_finite_differences() {
        let net = FeedForwardNet::with_hidden(2, &[6, 5], 11).unwrap();
        let c = Control::Network(net);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let cot: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = c.param_vjp(&x, &cot).unwrap();
            let fd = fd_vjp(&c, &x, &cot, 1e-6);
            for (a, b) in v.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cv_lifted_parametric_vjp() {
        let net = FeedForwardNet::with_hidden(1, &[4], 2).unwrap();
        let c = Control::CvLifted(CvLiftedControl::new(Control::Network(net), vec![2], 3).unwrap());
        let x = [0.3, -0.1, 0.8];
        let cot = [0.5, 0.2, -1.3];
        let v = c.param_vjp(&x, &cot).unwrap();
        let fd = fd_vjp(&c, &x, &cot, 1e-6);
        for (a, b) in v.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn json_round_trip_all_variants() {
        let bias = BiasPotential::new(1, vec![GaussianBump::isotropic(0.3, vec![0.1], 0.5).unwrap()]).unwrap();
        let mut g = GaussianAnsatz::on_grid(1, -3.0, 3.0, 5, 0.5).unwrap();
        g.set_weights(&[0.1, 0.2, 1.0 / 3.0, -0.4, 0.5]).unwrap();
        let variants = vec![
            Control::zero(2),
            control_from_bias(bias.clone(), 1.0).unwrap(),
            Control::Gaussian(g),
            Control::Network(FeedForwardNet::with_hidden(2, &[3], 9).unwrap()),
            lift_cv_control(bias, vec![1], 1.0, 4).unwrap(),
        ];
        for c in variants {
            let back = Control::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c);
        }
        assert!(Control::from_json(r#"{"kind":"zero","dim":2,"junk":1}"#).is_err());
        assert!(Control::from_json(r#"{"kind":"network","widths":[1,2,1],"params":[0.0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn vjp_is_linear_in_cotangent(
            x in prop::collection::vec(-3.0f64..3.0, 2),
            c1 in prop::collection::vec(-1.0f64..1.0, 2),
            c2 in prop::collection::vec(-1.0f64..1.0, 2),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let c = Control::Network(FeedForwardNet::with_hidden(2, &[5, 5], 4).unwrap());
            let combo: Vec<f64> = c1.iter().zip(&c2).map(|(p, q)| a * p + b * q).collect();
            let lhs = c.param_vjp(&x, &combo).unwrap();
            let v1 = c.param_vjp(&x, &c1).unwrap();
            let v2 = c.param_vjp(&x, &c2).unwrap();
            for ((l, p), q) in lhs.iter().zip(&v1).zip(&v2) {
                let r = a * p + b * q;
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn gaussian_ansatz_is_linear_in_weights(
            w1 in prop::collection::vec(-2.0f64..2.0, 4),
            w2 in prop::collection::vec(-2.0f64..2.0, 4),
            x in -3.0f64..3.0,
            a in -2.0f64..2.0,
        ) {
            let base = GaussianAnsatz::on_grid(1, -3.0, 3.0, 4, 0.5).unwrap();
            let eval = |w: &[f64]| {
                let mut g = base.clone();
                g.set_weights(w).unwrap();
                Control::Gaussian(g).eval(&[x]).unwrap()[0]
            };
            let combo: Vec<f64> = w1.iter().zip(&w2).map(|(p, q)| a * p + q).collect();
            let lhs = eval(&combo);
            let rhs = a * eval(&w1) + eval(&w2);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn fused_pair_vjp_matches_separate_calls() {
        let net = Control::Network(FeedForwardNet::with_hidden(3, &[7, 5], 11).unwrap());
        let lifted = Control::CvLifted(CvLiftedControl::new(Control::Network(FeedForwardNet::with_hidden(2, &[4], 3).unwrap()), vec![2, 0], 3).unwrap());
        let gauss = Control::Gaussian(GaussianAnsatz::on_grid(3, -1.0, 1.0, 2, 0.5).unwrap());
        for c in [net, lifted, gauss] {
            let x = [0.3, -0.7, 1.1];
            let (c1, c2) = ([0.5, -1.0, 2.0], [1.5, 0.25, -0.5]);
            let mut ws = c.workspace();
            let mut out = [0.0; 3];
            c.eval_with(&x, &mut out, &mut ws);
            let p = c.param_count();
            let (mut a1, mut a2, mut b1, mut b2) = (vec![0.1; p], vec![0.2; p], vec![0.1; p], vec![0.2; p]);
            c.vjp_add_with(&c1, 0.01, &mut a1, &mut ws);
            c.vjp_add_with(&c2, 0.1, &mut a2, &mut ws);
            c.vjp_pair_add_with(&c1, 0.01, &mut b1, &c2, 0.1, &mut b2, &mut ws);
            assert_eq!(a1, b1);
            assert_eq!(a2, b2);
        }
    }
}
