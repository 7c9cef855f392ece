//! Small differentiable predictors with exact analytic derivatives.
//!
//! Parameter layout (fixed, layer-major): for every hidden layer the weight
//! matrix `W_l` (`h_l × h_{l−1}`, row-major) followed by its bias `b_l`, then the
//! bias-free output matrix `Θ₂` (`c × h_L`, row-major). A linear model is just
//! `Θ₂` acting on the input. The output layer carries no bias so that
//! `forward(x) = Θ₂ · penultimate(x)` holds exactly.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, norm_inf};
use crate::loss::{self, LossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given pre-activation `z` and post-activation `a`.
    /// The ReLU subgradient at 0 is 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: Option<usize>,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Linear,
            input_dim,
            output_dim,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, activation: Activation, output_dim: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp { hidden, activation },
            input_dim,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidSpec("input and output dims must be >= 1".into()));
        }
        if let Architecture::Mlp { hidden, .. } = &self.architecture {
            if hidden.is_empty() {
                return Err(Error::InvalidSpec("MLP needs at least one hidden layer".into()));
            }
            if hidden.iter().any(|&h| h == 0) {
                return Err(Error::InvalidSpec("hidden widths must be positive".into()));
            }
        }
        Ok(())
    }

    fn hidden(&self) -> &[usize] {
        match &self.architecture {
            Architecture::Linear => &[],
            Architecture::Mlp { hidden, .. } => hidden,
        }
    }

    fn activation(&self) -> Activation {
        match &self.architecture {
            Architecture::Linear => Activation::Tanh,
            Architecture::Mlp { activation, .. } => *activation,
        }
    }

    fn layers(&self) -> (Vec<Dense>, Dense) {
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        let mut hidden = Vec::new();
        for &h in self.hidden() {
            let weights = offset;
            offset += h * fan_in;
            let bias = offset;
            offset += h;
            hidden.push(Dense {
                fan_in,
                fan_out: h,
                weights,
                bias: Some(bias),
            });
            fan_in = h;
        }
        let out = Dense {
            fan_in,
            fan_out: self.output_dim,
            weights: offset,
            bias: None,
        };
        (hidden, out)
    }

    /// Width `ℓ` of the penultimate embedding.
    pub fn embedding_dim(&self) -> usize {
        self.hidden().last().copied().unwrap_or(self.input_dim)
    }

    pub fn param_count(&self) -> usize {
        let (_, out) = self.layers();
        out.weights + out.fan_in * out.fan_out
    }

    /// Index range of the output matrix `Θ₂` inside the parameter vector.
    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        let (_, out) = self.layers();
        out.weights..out.weights + out.fan_in * out.fan_out
    }

    pub fn has_relu(&self) -> bool {
        matches!(
            self.architecture,
            Architecture::Mlp {
                activation: Activation::Relu,
                ..
            }
        )
    }

    /// Gaussian initialisation with standard deviation `1/√fan_in`, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let (hidden, out) = self.layers();
        let mut values = vec![0.0; self.param_count()];
        for layer in hidden.iter().chain(std::iter::once(&out)) {
            let std = 1.0 / (layer.fan_in as f64).sqrt();
            for v in &mut values[layer.weights..layer.weights + layer.fan_in * layer.fan_out] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        }
        ParamVector(values)
    }
}

/// Flat parameter vector in the layout documented at module level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Intermediate values of one forward pass.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// A model specification together with concrete parameters. Immutable.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamVector,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: spec.param_count(),
                actual: params.len(),
            });
        }
        if !all_finite(params.as_slice()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Model> {
        Model::new(self.spec.clone(), params)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                context: "model input",
                expected: self.spec.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let theta = self.params.as_slice();
        let act = self.spec.activation();
        let (hidden, out) = self.spec.layers();
        let mut pre = Vec::with_capacity(hidden.len());
        let mut post = Vec::with_capacity(hidden.len() + 1);
        post.push(x.to_vec());
        for layer in &hidden {
            let input = post.last().unwrap();
            let bias = layer.bias.unwrap();
            let mut z = vec![0.0; layer.fan_out];
            for (j, zj) in z.iter_mut().enumerate() {
                let row = &theta[layer.weights + j * layer.fan_in..][..layer.fan_in];
                let mut acc = 0.0;
                for (w, a) in row.iter().zip(input) {
                    acc += w * a;
                }
                *zj = acc + theta[bias + j];
            }
            let a = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        let emb = post.last().unwrap();
        let output = (0..out.fan_out)
            .map(|j| {
                let row = &theta[out.weights + j * out.fan_in..][..out.fan_in];
                crate::linalg::dot(row, emb)
            })
            .collect();
        Trace { pre, post, output }
    }

    /// Vector–Jacobian product `J(x)ᵀ g` for an output cotangent `g`.
    fn backprop(&self, trace: &Trace, g: &[f64]) -> Vec<f64> {
        let theta = self.params.as_slice();
        let act = self.spec.activation();
        let (hidden, out) = self.spec.layers();
        let mut grad = vec![0.0; theta.len()];
        let emb = trace.post.last().unwrap();
        let mut back = vec![0.0; out.fan_in];
        for (j, gj) in g.iter().enumerate() {
            let base = out.weights + j * out.fan_in;
            for k in 0..out.fan_in {
                grad[base + k] = gj * emb[k];
                back[k] += theta[base + k] * gj;
            }
        }
        for (l, layer) in hidden.iter().enumerate().rev() {
            let z = &trace.pre[l];
            let a = &trace.post[l + 1];
            let input = &trace.post[l];
            let delta: Vec<f64> = (0..layer.fan_out)
                .map(|j| back[j] * act.derivative(z[j], a[j]))
                .collect();
            let mut next = vec![0.0; layer.fan_in];
            for (j, dj) in delta.iter().enumerate() {
                let base = layer.weights + j * layer.fan_in;
                for k in 0..layer.fan_in {
                    grad[base + k] = dj * input[k];
                    next[k] += theta[base + k] * dj;
                }
                grad[layer.bias.unwrap() + j] = *dj;
            }
            back = next;
        }
        grad
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).output)
    }

    /// Post-activation of the last hidden layer (the input itself for a linear model).
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).post.pop().unwrap())
    }

    /// `∂f(x)/∂θ` as a `c × p` matrix.
    pub fn output_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let c = self.spec.output_dim;
        let p = self.param_count();
        let mut jac = DMatrix::zeros(c, p);
        let mut e = vec![0.0; c];
        for k in 0..c {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[k] = 1.0;
            let row = self.backprop(&trace, &e);
            for (j, v) in row.into_iter().enumerate() {
                jac[(k, j)] = v;
            }
        }
        Ok(jac)
    }

    /// Jacobian rows as plain vectors, one per output.
    pub fn jacobian_rows(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let c = self.spec.output_dim;
        Ok((0..c)
            .map(|k| {
                let mut e = vec![0.0; c];
                e[k] = 1.0;
                self.backprop(&trace, &e)
            })
            .collect())
    }

    /// `J(x)ᵀ g`.
    pub fn vjp(&self, x: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if g.len() != self.spec.output_dim {
            return Err(Error::Dimension {
                context: "output cotangent",
                expected: self.spec.output_dim,
                actual: g.len(),
            });
        }
        Ok(self.backprop(&self.trace(x), g))
    }

    /// `∂L(f(x), y)/∂θ = J(x)ᵀ · ∂L/∂f`.
    pub fn loss_grad_params(&self, x: &[f64], y: f64, kind: LossKind) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let g = loss::loss_grad_output(&trace.output, y, kind)?;
        Ok(self.backprop(&trace, &g))
    }

    /// Mean loss over the dataset.
    pub fn dataset_loss(&self, data: &Dataset, kind: LossKind) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut acc = 0.0;
        for (x, &y) in data.features.iter().zip(&data.labels) {
            acc += loss::loss(&self.forward(x)?, y, kind)?;
        }
        Ok(acc / data.len() as f64)
    }

    /// Mean parameter gradient `(1/n) Σᵢ ∂L(f(xᵢ), yᵢ)/∂θ`.
    pub fn dataset_gradient(&self, data: &Dataset, kind: LossKind) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut acc = vec![0.0; self.param_count()];
        for (x, &y) in data.features.iter().zip(&data.labels) {
            let g = self.loss_grad_params(x, y, kind)?;
            axpy(1.0, &g, &mut acc);
        }
        let inv = 1.0 / data.len() as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    }

    /// `(H + damping·I) v` with `H` the mean loss Hessian over `data`.
    ///
    /// Exact for linear models (`H = (1/n) Σ xᵢ-blocks of Jᵀ ∇²L J`). For MLPs it
    /// is a central difference of [`Model::dataset_gradient`] along `v`, scaled
    /// so the largest parameter perturbation is `1e-4`; truncation error is
    /// `O(1e-8)` relative.
    pub fn hessian_vector_product(
        &self,
        data: &Dataset,
        v: &[f64],
        kind: LossKind,
        damping: f64,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p = self.param_count();
        if v.len() != p {
            return Err(Error::Dimension {
                context: "hessian-vector product",
                expected: p,
                actual: v.len(),
            });
        }
        if damping < 0.0 {
            return Err(Error::InvalidConfig("damping must be non-negative".into()));
        }
        let mut hv = match self.spec.architecture {
            Architecture::Linear => self.linear_hvp(data, v, kind)?,
            Architecture::Mlp { .. } => self.fd_hvp(data, v, kind)?,
        };
        axpy(damping, v, &mut hv);
        Ok(hv)
    }

    fn linear_hvp(&self, data: &Dataset, v: &[f64], kind: LossKind) -> Result<Vec<f64>> {
        self.output_layer_hvp(data, v, kind)
    }

    /// Exact `(H + damping·I) v` for the output-layer block `Θ₂` alone; the
    /// output is linear in `Θ₂`, so `H = (1/n) Σ (∇²L ⊗ e eᵀ)`.
    pub fn last_layer_hvp(&self, data: &Dataset, v: &[f64], kind: LossKind, damping: f64) -> Result<Vec<f64>> {
        let len = self.spec.last_layer_range().len();
        if v.len() != len {
            return Err(Error::Dimension {
                context: "last-layer hessian-vector product",
                expected: len,
                actual: v.len(),
            });
        }
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut hv = self.output_layer_hvp(data, v, kind)?;
        axpy(damping, v, &mut hv);
        Ok(hv)
    }

    fn output_layer_hvp(&self, data: &Dataset, v: &[f64], kind: LossKind) -> Result<Vec<f64>> {
        let c = self.spec.output_dim;
        let d = self.spec.embedding_dim();
        let mut acc = vec![0.0; v.len()];
        for x in &data.features {
            let out = self.forward(x)?;
            let e = self.penultimate(x)?;
            let u: Vec<f64> = (0..c).map(|j| crate::linalg::dot(&v[j * d..][..d], &e)).collect();
            let w = loss::loss_hessian_output_vec(&out, kind, &u);
            for j in 0..c {
                axpy(w[j], &e, &mut acc[j * d..][..d]);
            }
        }
        let inv = 1.0 / data.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(acc)
    }

    fn fd_hvp(&self, data: &Dataset, v: &[f64], kind: LossKind) -> Result<Vec<f64>> {
        let scale = norm_inf(v);
        if scale == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let h = 1e-4 / scale;
        let theta = self.params.as_slice();
        let plus: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t + h * vi).collect();
        let minus: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t - h * vi).collect();
        let gp = self.with_params(plus.into())?.dataset_gradient(data, kind)?;
        let gm = self.with_params(minus.into())?.dataset_gradient(data, kind)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    /// Dense `H + damping·I`, assembled column by column from HVPs.
    pub fn hessian_matrix(&self, data: &Dataset, kind: LossKind, damping: f64) -> Result<DMatrix<f64>> {
        let p = self.param_count();
        let mut h = DMatrix::zeros(p, p);
        let mut e = vec![0.0; p];
        for j in 0..p {
            e[j] = 1.0;
            let col = self.hessian_vector_product(data, &e, kind, damping)?;
            e[j] = 0.0;
            for (i, v) in col.into_iter().enumerate() {
                h[(i, j)] = v;
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}
