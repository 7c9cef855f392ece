//! Kernels, Gram assembly and inverse-Hessian solves for the influence kernel.
//!
//! Vector-output kernels are represented as `c × c` blocks; a Gram or cross
//! matrix over `n` and `m` points is stored flat as an `(n·c) × (m·c)` matrix
//! whose block `(i, j)` is `K(xᵢ, zⱼ)`.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, eig_range, mat_vec, norm, sq_dist, symmetric_inverse};
use crate::loss::LossKind;
use crate::model::Model;
use crate::training::shuffle;

/// Largest parameter count accepted by the explicit inverse.
pub const EXPLICIT_LIMIT: usize = 2000;

fn default_damping() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum InverseMethod {
    Explicit,
    Cg {
        tol: f64,
        max_iter: usize,
    },
    /// Recursion `h ← v + h − (H + dI)h / scale`, returning `h / scale`.
    /// `batch = None` uses the full dataset for every HVP.
    Lissa {
        depth: usize,
        scale: f64,
        #[serde(default = "one")]
        repeats: usize,
        #[serde(default)]
        batch: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> usize {
    1
}

impl Default for InverseMethod {
    fn default() -> Self {
        InverseMethod::Cg {
            tol: 1e-10,
            max_iter: 1000,
        }
    }
}

impl InverseMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InverseMethod::Explicit => Ok(()),
            InverseMethod::Cg { tol, max_iter } => {
                if !(tol > 0.0) || max_iter == 0 {
                    return Err(Error::InvalidConfig("cg needs tol > 0 and max_iter ≥ 1".into()));
                }
                Ok(())
            }
            InverseMethod::Lissa {
                depth,
                scale,
                repeats,
                batch,
                ..
            } => {
                if depth == 0 || repeats == 0 || !(scale > 0.0) || batch == Some(0) {
                    return Err(Error::InvalidConfig(
                        "lissa needs depth, repeats, batch ≥ 1 and scale > 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceConfig {
    #[serde(default)]
    pub inverse: InverseMethod,
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// Restrict gradients and Hessian to the output-layer parameters.
    #[serde(default)]
    pub last_layer_only: bool,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            inverse: InverseMethod::default(),
            damping: default_damping(),
            last_layer_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelKind {
    LastLayer,
    Ntk,
    Influence(InfluenceConfig),
    Rbf { gamma: f64 },
    LinearDot,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::LastLayer => "last_layer",
            KernelKind::Ntk => "ntk",
            KernelKind::Influence(_) => "influence",
            KernelKind::Rbf { .. } => "rbf",
            KernelKind::LinearDot => "linear_dot",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelKind::Rbf { gamma } if !(*gamma > 0.0) || !gamma.is_finite() => {
                Err(Error::InvalidConfig(format!("rbf gamma must be positive, got {gamma}")))
            }
            KernelKind::Influence(cfg) => {
                if !(cfg.damping >= 0.0) || !cfg.damping.is_finite() {
                    return Err(Error::InvalidConfig("influence damping must be ≥ 0".into()));
                }
                cfg.inverse.validate()
            }
            _ => Ok(()),
        }
    }

    /// Whether `f(x) = ⟨θ, Φ(x)⟩` for an explicit finite feature map `Φ`.
    pub fn has_feature_map(&self) -> bool {
        matches!(self, KernelKind::LastLayer | KernelKind::Ntk | KernelKind::LinearDot)
    }
}

/// `(H + damping·I)` over the training loss, optionally restricted to a
/// contiguous parameter block.
pub struct HessianOperator<'a> {
    model: &'a Model,
    data: &'a Dataset,
    loss: LossKind,
    damping: f64,
    block: Option<Range<usize>>,
}

impl<'a> HessianOperator<'a> {
    pub fn new(
        model: &'a Model,
        data: &'a Dataset,
        loss: LossKind,
        damping: f64,
        block: Option<Range<usize>>,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(damping >= 0.0) {
            return Err(Error::InvalidConfig("damping must be non-negative".into()));
        }
        if let Some(r) = &block {
            if r.end > model.param_count() || r.is_empty() {
                return Err(Error::InvalidConfig("parameter block out of range".into()));
            }
        }
        Ok(HessianOperator {
            model,
            data,
            loss,
            damping,
            block,
        })
    }

    pub fn dim(&self) -> usize {
        self.block.as_ref().map_or(self.model.param_count(), |r| r.len())
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.apply_on(self.data, v)
    }

    fn apply_on(&self, data: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
        match &self.block {
            None => self.model.hessian_vector_product(data, v, self.loss, self.damping),
            Some(r) if *r == self.model.spec().last_layer_range() => {
                self.model.last_layer_hvp(data, v, self.loss, self.damping)
            }
            Some(r) => {
                let mut full = vec![0.0; self.model.param_count()];
                full[r.clone()].copy_from_slice(v);
                let hv = self.model.hessian_vector_product(data, &full, self.loss, self.damping)?;
                Ok(hv[r.clone()].to_vec())
            }
        }
    }

    /// Dense matrix of the operator, symmetrized.
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        let p = self.dim();
        if p > EXPLICIT_LIMIT {
            return Err(Error::TooLarge {
                params: p,
                limit: EXPLICIT_LIMIT,
            });
        }
        let cols: Vec<Vec<f64>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                self.apply(&e)
            })
            .collect::<Result<_>>()?;
        let m = DMatrix::from_fn(p, p, |i, j| cols[j][i]);
        Ok((&m + m.transpose()) * 0.5)
    }

    /// Restrict a full-length parameter vector to the operator's block.
    pub fn restrict<'v>(&self, v: &'v [f64]) -> &'v [f64] {
        match &self.block {
            None => v,
            Some(r) => &v[r.clone()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseHvp {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `‖(H + dI)u − v‖ / ‖v‖` (0 for `v = 0`).
    pub residual: f64,
}

fn relative_residual(op: &HessianOperator, u: &[f64], v: &[f64]) -> Result<f64> {
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(norm(u));
    }
    let mut r = op.apply(u)?;
    axpy(-1.0, v, &mut r);
    Ok(norm(&r) / vn)
}

/// Solve `(H + dI) u = v` with the requested method.
pub fn inverse_hvp(op: &HessianOperator, v: &[f64], method: &InverseMethod) -> Result<InverseHvp> {
    method.validate()?;
    if v.len() != op.dim() {
        return Err(Error::Dimension {
            context: "inverse hvp right-hand side",
            expected: op.dim(),
            actual: v.len(),
        });
    }
    match *method {
        InverseMethod::Explicit => {
            let inv = symmetric_inverse(&op.matrix()?, 1e-13)?;
            let solution = mat_vec(&inv, v);
            let residual = relative_residual(op, &solution, v)?;
            Ok(InverseHvp {
                solution,
                iterations: 0,
                residual,
            })
        }
        InverseMethod::Cg { tol, max_iter } => conjugate_gradient(op, v, tol, max_iter),
        InverseMethod::Lissa {
            depth,
            scale,
            repeats,
            batch,
            seed,
        } => lissa(op, v, depth, scale, repeats, batch, seed),
    }
}

fn conjugate_gradient(op: &HessianOperator, v: &[f64], tol: f64, max_iter: usize) -> Result<InverseHvp> {
    let p = v.len();
    let vn = norm(v);
    let mut u = vec![0.0; p];
    if vn == 0.0 {
        return Ok(InverseHvp {
            solution: u,
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut r = v.to_vec();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    for it in 1..=max_iter {
        let ad = op.apply(&d)?;
        let dad = dot(&d, &ad);
        if dad == 0.0 || !dad.is_finite() {
            return Err(Error::CgNotConverged {
                iterations: it,
                residual: rr.sqrt() / vn,
            });
        }
        let step = rr / dad;
        axpy(step, &d, &mut u);
        axpy(-step, &ad, &mut r);
        let rr_next = dot(&r, &r);
        if rr_next.sqrt() <= tol * vn {
            // Report the true residual rather than the recursive one.
            let residual = relative_residual(op, &u, v)?;
            return Ok(InverseHvp {
                solution: u,
                iterations: it,
                residual,
            });
        }
        let beta = rr_next / rr;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
        rr = rr_next;
    }
    Err(Error::CgNotConverged {
        iterations: max_iter,
        residual: relative_residual(op, &u, v)?,
    })
}

fn lissa(
    op: &HessianOperator,
    v: &[f64],
    depth: usize,
    scale: f64,
    repeats: usize,
    batch: Option<usize>,
    seed: u64,
) -> Result<InverseHvp> {
    let p = v.len();
    let n = op.data.len();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut mean = vec![0.0; p];
    for _ in 0..repeats {
        let mut h = v.to_vec();
        for _ in 0..depth {
            let hv = match batch {
                Some(b) if b < n => {
                    shuffle(&mut order, &mut rng);
                    let sub = op.data.subset(&order[..b]);
                    op.apply_on(&sub, &h)?
                }
                _ => op.apply(&h)?,
            };
            for ((hi, vi), hvi) in h.iter_mut().zip(v).zip(&hv) {
                *hi = vi + *hi - hvi / scale;
            }
            if !h.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("lissa recursion (scale too small?)"));
            }
        }
        axpy(1.0 / (scale * repeats as f64), &h, &mut mean);
    }
    let residual = relative_residual(op, &mean, v)?;
    Ok(InverseHvp {
        solution: mean,
        iterations: depth * repeats,
        residual,
    })
}

/// Per-point representation from which kernel values are dot products.
enum Features {
    /// Scalar kernel `⟨e, e'⟩ · I_c`.
    Embedding(Vec<f64>),
    /// Raw input for the RBF kernel.
    Point(Vec<f64>),
    /// `c` gradient rows (NTK).
    Rows(Vec<Vec<f64>>),
    /// Gradient rows and their images under `(H + dI)⁻¹`.
    Metric { raw: Vec<Vec<f64>>, solved: Vec<Vec<f64>> },
}

/// A kernel bound to a model (and, for the influence kernel, to the training
/// data that defines the Hessian).
pub struct Kernel<'a> {
    kind: KernelKind,
    model: &'a Model,
    hessian: Option<HessianOperator<'a>>,
    explicit_inverse: Option<DMatrix<f64>>,
}

impl<'a> Kernel<'a> {
    /// `train` is required for the influence kernel and ignored otherwise.
    pub fn new(kind: KernelKind, model: &'a Model, train: Option<(&'a Dataset, LossKind)>) -> Result<Self> {
        kind.validate()?;
        let mut hessian = None;
        let mut explicit_inverse = None;
        if let KernelKind::Influence(cfg) = &kind {
            let (data, loss) = train.ok_or_else(|| {
                Error::MissingArtifact("influence kernel needs the training set and loss".into())
            })?;
            let block = cfg.last_layer_only.then(|| model.spec().last_layer_range());
            let op = HessianOperator::new(model, data, loss, cfg.damping, block)?;
            if cfg.inverse == InverseMethod::Explicit {
                explicit_inverse = Some(symmetric_inverse(&op.matrix()?, 1e-13)?);
            }
            hessian = Some(op);
        }
        Ok(Kernel {
            kind,
            model,
            hessian,
            explicit_inverse,
        })
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn output_dim(&self) -> usize {
        self.model.output_dim()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let d = self.model.spec().input_dim;
        if x.len() != d {
            return Err(Error::Dimension {
                context: "kernel input",
                expected: d,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn gradient_rows(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let rows = self.model.jacobian_rows(x)?;
        Ok(match &self.hessian {
            Some(op) => rows.into_iter().map(|r| op.restrict(&r).to_vec()).collect(),
            None => rows,
        })
    }

    fn features(&self, x: &[f64]) -> Result<Features> {
        self.check_input(x)?;
        Ok(match &self.kind {
            KernelKind::LastLayer => Features::Embedding(self.model.penultimate(x)?),
            KernelKind::LinearDot => Features::Embedding(x.to_vec()),
            KernelKind::Rbf { .. } => Features::Point(x.to_vec()),
            KernelKind::Ntk => Features::Rows(self.gradient_rows(x)?),
            KernelKind::Influence(cfg) => {
                let raw = self.gradient_rows(x)?;
                let op = self.hessian.as_ref().unwrap();
                let solved = raw
                    .iter()
                    .map(|g| match &self.explicit_inverse {
                        Some(inv) => Ok(mat_vec(inv, g)),
                        None => inverse_hvp(op, g, &cfg.inverse).map(|s| s.solution),
                    })
                    .collect::<Result<_>>()?;
                Features::Metric { raw, solved }
            }
        })
    }

    fn combine(&self, a: &Features, b: &Features, out: &mut [f64], stride: usize) {
        let c = self.output_dim();
        match (a, b) {
            (Features::Embedding(x), Features::Embedding(z)) => {
                let s = dot(x, z);
                for k in 0..c {
                    out[k * stride + k] = s;
                }
            }
            (Features::Point(x), Features::Point(z)) => {
                let KernelKind::Rbf { gamma } = self.kind else { unreachable!() };
                let s = (-gamma * sq_dist(x, z)).exp();
                for k in 0..c {
                    out[k * stride + k] = s;
                }
            }
            (Features::Rows(x), Features::Rows(z)) => {
                for k in 0..c {
                    for l in 0..c {
                        out[k * stride + l] = dot(&x[k], &z[l]);
                    }
                }
            }
            // Symmetric part of the bilinear form; exact when the solves are.
            (Features::Metric { raw: rx, solved: sx }, Features::Metric { raw: rz, solved: sz }) => {
                for k in 0..c {
                    for l in 0..c {
                        out[k * stride + l] = 0.5 * (dot(&rx[k], &sz[l]) + dot(&sx[k], &rz[l]));
                    }
                }
            }
            _ => unreachable!("feature kinds always match"),
        }
    }

    /// `K(x, z)` as a `c × c` matrix.
    pub fn eval(&self, x: &[f64], z: &[f64]) -> Result<DMatrix<f64>> {
        let c = self.output_dim();
        let (a, b) = (self.features(x)?, self.features(z)?);
        let mut buf = vec![0.0; c * c];
        self.combine(&a, &b, &mut buf, c);
        Ok(DMatrix::from_row_slice(c, c, &buf))
    }

    /// Scalar `K(x, z)`; requires a single-output model.
    pub fn eval_scalar(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        if self.output_dim() != 1 {
            return Err(Error::Dimension {
                context: "scalar kernel evaluation (output dimension)",
                expected: 1,
                actual: self.output_dim(),
            });
        }
        Ok(self.eval(x, z)?[(0, 0)])
    }

    /// Block matrix with block `(a, b) = K(xs[a], zs[b])`.
    pub fn cross(&self, xs: &[Vec<f64>], zs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let c = self.output_dim();
        let left: Vec<Features> = xs.par_iter().map(|x| self.features(x)).collect::<Result<_>>()?;
        let right: Vec<Features> = zs.par_iter().map(|z| self.features(z)).collect::<Result<_>>()?;
        Ok(self.assemble(&left, &right, c))
    }

    fn assemble(&self, left: &[Features], right: &[Features], c: usize) -> DMatrix<f64> {
        let cols = right.len() * c;
        let rows: Vec<Vec<f64>> = left
            .par_iter()
            .map(|a| {
                let mut strip = vec![0.0; c * cols];
                for (j, b) in right.iter().enumerate() {
                    self.combine(a, b, &mut strip[j * c..], cols);
                }
                strip
            })
            .collect();
        let flat: Vec<f64> = rows.concat();
        DMatrix::from_row_slice(left.len() * c, cols, &flat)
    }

    /// Gram matrix over a dataset, symmetrized as `(M + Mᵀ)/2`.
    pub fn gram(&self, data: &Dataset) -> Result<GramMatrix> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let c = self.output_dim();
        let feats: Vec<Features> = data.features.par_iter().map(|x| self.features(x)).collect::<Result<_>>()?;
        let m = self.assemble(&feats, &feats, c);
        let entries = (&m + m.transpose()) * 0.5;
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gram matrix"));
        }
        Ok(GramMatrix {
            entries,
            output_dim: c,
            kind: self.kind.clone(),
            sample_ids: data.ids.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    /// `(n·c) × (n·c)`, block `(i, j)` = `K(xᵢ, xⱼ)`.
    pub entries: DMatrix<f64>,
    pub output_dim: usize,
    pub kind: KernelKind,
    pub sample_ids: Vec<u64>,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let c = self.output_dim;
        self.entries.view((i * c, j * c), (c, c)).into_owned()
    }

    pub fn to_csv_string(&self) -> String {
        let c = self.output_dim;
        let label = |i: usize| {
            let id = self.sample_ids[i / c];
            if c == 1 {
                id.to_string()
            } else {
                format!("{id}:{}", i % c)
            }
        };
        let dim = self.entries.nrows();
        let mut out = String::from("id");
        for j in 0..dim {
            write!(out, ",{}", label(j)).unwrap();
        }
        out.push('\n');
        for i in 0..dim {
            out.push_str(&label(i));
            for j in 0..dim {
                write!(out, ",{:.16e}", self.entries[(i, j)]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub is_psd: bool,
}

/// Extreme eigenvalues of the block-flattened Gram; PSD at tolerance
/// `1e-8 · max |λ|`.
pub fn psd_report(entries: &DMatrix<f64>) -> PsdReport {
    let (min, max) = eig_range(entries);
    let scale = min.abs().max(max.abs());
    PsdReport {
        min_eigenvalue: min,
        max_eigenvalue: max,
        is_psd: min >= -1e-8 * scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelSpec};
    use proptest::prelude::*;

    fn linear(d: usize, theta: Vec<f64>) -> Model {
        Model::new(ModelSpec::linear(d, 1), theta.into()).unwrap()
    }

    fn toy(d: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        use rand::Rng;
        let features = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Dataset::new(features, labels).unwrap()
    }

    #[test]
    fn ntk_on_linear_is_dot_product() {
        let m = linear(2, vec![0.3, -0.4]);
        let k = Kernel::new(KernelKind::Ntk, &m, None).unwrap();
        assert_eq!(k.eval_scalar(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
    }

    #[test]
    fn rbf_diagonal_is_one() {
        let m = linear(3, vec![0.0; 3]);
        let k = Kernel::new(KernelKind::Rbf { gamma: 0.7 }, &m, None).unwrap();
        assert_eq!(k.eval_scalar(&[0.1, -5.0, 2.0], &[0.1, -5.0, 2.0]).unwrap(), 1.0);
        assert!(Kernel::new(KernelKind::Rbf { gamma: 0.0 }, &m, None).is_err());
    }

    #[test]
    fn influence_requires_training_data() {
        let m = linear(2, vec![0.0; 2]);
        let err = Kernel::new(KernelKind::Influence(InfluenceConfig::default()), &m, None);
        assert!(matches!(err, Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn influence_matches_explicit_sandwich() {
        let data = toy(2, 4, 3);
        let m = linear(2, vec![0.2, -0.1]);
        let h = m.hessian_matrix(&data, LossKind::Squared, 0.01).unwrap();
        let hinv = h.clone().try_inverse().unwrap();
        let cfg = InfluenceConfig::default();
        let k = Kernel::new(KernelKind::Influence(cfg), &m, Some((&data, LossKind::Squared))).unwrap();
        let (x, z) = ([0.5, -1.0], [2.0, 0.3]);
        let expect = (nalgebra::RowDVector::from_row_slice(&x) * &hinv * nalgebra::DVector::from_row_slice(&z))[0];
        assert!((k.eval_scalar(&x, &z).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn explicit_influence_rejects_singular_hessian() {
        // Two collinear points in d = 2: H has a zero eigenvalue.
        let data = Dataset::new(vec![vec![1.0, 1.0], vec![2.0, 2.0]], vec![0.0, 1.0]).unwrap();
        let m = linear(2, vec![0.0; 2]);
        let cfg = InfluenceConfig {
            inverse: InverseMethod::Explicit,
            damping: 0.0,
            last_layer_only: false,
        };
        let r = Kernel::new(KernelKind::Influence(cfg), &m, Some((&data, LossKind::Squared)));
        assert!(matches!(r, Err(Error::Singular { .. })));
    }

    #[test]
    fn identity_hessian_gives_identity_inverse() {
        let s = 2f64.sqrt();
        let data = Dataset::new(vec![vec![s, 0.0], vec![0.0, s]], vec![0.0, 0.0]).unwrap();
        let m = linear(2, vec![0.0; 2]);
        let op = HessianOperator::new(&m, &data, LossKind::Squared, 0.0, None).unwrap();
        let v = [0.7, -3.0];
        for method in [InverseMethod::Explicit, InverseMethod::default()] {
            let u = inverse_hvp(&op, &v, &method).unwrap().solution;
            assert!((u[0] - v[0]).abs() < 1e-10 && (u[1] - v[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_and_lissa_match_dense_solve() {
        let data = toy(3, 8, 11);
        let m = linear(3, vec![0.1, 0.2, -0.3]);
        let op = HessianOperator::new(&m, &data, LossKind::Squared, 0.01, None).unwrap();
        let h = op.matrix().unwrap();
        let v = [1.0, -0.5, 0.25];
        let dense = h.clone().lu().solve(&nalgebra::DVector::from_row_slice(&v)).unwrap();
        let cg = inverse_hvp(&op, &v, &InverseMethod::Cg { tol: 1e-12, max_iter: 100 }).unwrap();
        let (_, lmax) = eig_range(&h);
        let li = inverse_hvp(
            &op,
            &v,
            &InverseMethod::Lissa {
                depth: 5000,
                scale: 1.5 * lmax,
                repeats: 1,
                batch: None,
                seed: 0,
            },
        )
        .unwrap();
        for i in 0..3 {
            assert!((cg.solution[i] - dense[i]).abs() < 1e-7);
            assert!((li.solution[i] - dense[i]).abs() < 1e-2);
        }
        assert!(cg.residual < 1e-10);
    }

    #[test]
    fn cg_reports_non_convergence() {
        let data = toy(3, 8, 11);
        let m = linear(3, vec![0.0; 3]);
        let op = HessianOperator::new(&m, &data, LossKind::Squared, 0.0, None).unwrap();
        let r = inverse_hvp(&op, &[1.0, 2.0, 3.0], &InverseMethod::Cg { tol: 1e-14, max_iter: 1 });
        assert!(matches!(r, Err(Error::CgNotConverged { iterations: 1, .. })));
    }

    #[test]
    fn explicit_rejects_large_parameter_counts() {
        let spec = ModelSpec::mlp(60, vec![40], Activation::Tanh, 1);
        let m = Model::new(spec.clone(), spec.init_params(0)).unwrap();
        let data = Dataset::new(vec![vec![0.0; 60]], vec![1.0]).unwrap();
        let op = HessianOperator::new(&m, &data, LossKind::Squared, 0.01, None).unwrap();
        assert!(matches!(op.matrix(), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn linear_dot_on_basis_is_identity() {
        let m = linear(3, vec![0.0; 3]);
        let data = Dataset::new(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec![0.0; 3],
        )
        .unwrap();
        let g = Kernel::new(KernelKind::LinearDot, &m, None).unwrap().gram(&data).unwrap();
        assert_eq!(g.entries, DMatrix::identity(3, 3));
        let r = psd_report(&g.entries);
        assert_eq!((r.min_eigenvalue, r.max_eigenvalue, r.is_psd), (1.0, 1.0, true));
    }

    #[test]
    fn rank_one_is_psd() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let r = psd_report(&(&v * v.transpose()));
        assert!(r.is_psd && r.min_eigenvalue.abs() < 1e-12);
    }

    #[test]
    fn kernels_on_random_inputs_are_psd() {
        let spec = ModelSpec::mlp(3, vec![5], Activation::Tanh, 1);
        let m = Model::new(spec.clone(), spec.init_params(9)).unwrap();
        let data = toy(3, 6, 5);
        for kind in [
            KernelKind::LastLayer,
            KernelKind::Ntk,
            KernelKind::Rbf { gamma: 0.5 },
            KernelKind::LinearDot,
        ] {
            let g = Kernel::new(kind.clone(), &m, None).unwrap().gram(&data).unwrap();
            assert!(psd_report(&g.entries).is_psd, "{kind:?}");
        }
        let lin = linear(3, vec![0.1; 3]);
        let toy3 = toy(3, 8, 2);
        let k = Kernel::new(
            KernelKind::Influence(InfluenceConfig::default()),
            &lin,
            Some((&toy3, LossKind::Squared)),
        )
        .unwrap();
        assert!(psd_report(&k.gram(&data).unwrap().entries).is_psd);
    }

    #[test]
    fn duplicated_rows_give_identical_gram_rows() {
        let spec = ModelSpec::mlp(2, vec![4], Activation::Tanh, 1);
        let m = Model::new(spec.clone(), spec.init_params(1)).unwrap();
        let data = Dataset::new(vec![vec![0.3, 0.1], vec![-1.0, 2.0], vec![0.3, 0.1]], vec![0.0; 3]).unwrap();
        let g = Kernel::new(KernelKind::Ntk, &m, None).unwrap().gram(&data).unwrap();
        for j in 0..3 {
            assert_eq!(g.entries[(0, j)], g.entries[(2, j)]);
        }
    }

    #[test]
    fn ntk_gram_equals_explicit_jacobian_product() {
        let spec = ModelSpec::mlp(3, vec![6], Activation::Tanh, 2);
        let m = Model::new(spec.clone(), spec.init_params(4)).unwrap();
        let data = toy(3, 5, 8);
        let g = Kernel::new(KernelKind::Ntk, &m, None).unwrap().gram(&data).unwrap();
        let p = m.param_count();
        let mut j = DMatrix::zeros(10, p);
        for (i, x) in data.features.iter().enumerate() {
            j.view_mut((2 * i, 0), (2, p)).copy_from(&m.output_jacobian(x).unwrap());
        }
        let jj = &j * j.transpose();
        assert!((g.entries - jj).amax() < 1e-12);
    }

    #[test]
    fn vector_last_layer_is_scalar_identity() {
        let spec = ModelSpec::mlp(2, vec![3], Activation::Relu, 3);
        let m = Model::new(spec.clone(), spec.init_params(2)).unwrap();
        let k = Kernel::new(KernelKind::LastLayer, &m, None).unwrap();
        let (x, z) = ([0.4, 0.9], [1.0, 0.2]);
        let block = k.eval(&x, &z).unwrap();
        let s = dot(&m.penultimate(&x).unwrap(), &m.penultimate(&z).unwrap());
        assert_eq!(block, DMatrix::identity(3, 3) * s);
    }

    #[test]
    fn masked_influence_uses_last_layer_block() {
        let spec = ModelSpec::mlp(2, vec![3], Activation::Tanh, 1);
        let m = Model::new(spec.clone(), spec.init_params(6)).unwrap();
        let data = toy(2, 10, 7);
        let cfg = InfluenceConfig {
            last_layer_only: true,
            ..Default::default()
        };
        let k = Kernel::new(KernelKind::Influence(cfg), &m, Some((&data, LossKind::Squared))).unwrap();
        let (x, z) = ([0.2, -0.4], [0.9, 0.1]);
        let r = spec.last_layer_range();
        let h = m.hessian_matrix(&data, LossKind::Squared, 0.01).unwrap();
        let hb = h.view((r.start, r.start), (r.len(), r.len())).into_owned().try_inverse().unwrap();
        let gx = nalgebra::DVector::from_row_slice(&m.jacobian_rows(&x).unwrap()[0][r.clone()]);
        let gz = nalgebra::DVector::from_row_slice(&m.jacobian_rows(&z).unwrap()[0][r]);
        let expect = gx.dot(&(hb * gz));
        assert!((k.eval_scalar(&x, &z).unwrap() - expect).abs() < 1e-6 * expect.abs().max(1.0));
    }

    #[test]
    fn gram_csv_has_id_header() {
        let m = linear(1, vec![0.0]);
        let data = Dataset::with_ids(vec![vec![1.0], vec![2.0]], vec![0.0, 0.0], vec![7, 9]).unwrap();
        let csv = Kernel::new(KernelKind::LinearDot, &m, None).unwrap().gram(&data).unwrap().to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("id,7,9"));
        assert!(lines.next().unwrap().starts_with("7,1.0000000000000000e0,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn rbf_and_linear_grams_are_psd(
            pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..7),
            gamma in 0.01f64..5.0,
        ) {
            let m = linear(2, vec![0.0; 2]);
            let data = Dataset::new(pts.clone(), vec![0.0; pts.len()]).unwrap();
            for kind in [KernelKind::Rbf { gamma }, KernelKind::LinearDot] {
                let g = Kernel::new(kind, &m, None).unwrap().gram(&data).unwrap();
                prop_assert!(psd_report(&g.entries).is_psd);
            }
        }

        #[test]
        fn kernels_are_symmetric(
            x in prop::collection::vec(-2.0f64..2.0, 3),
            z in prop::collection::vec(-2.0f64..2.0, 3),
            seed in 0u64..50,
        ) {
            let spec = ModelSpec::mlp(3, vec![4], Activation::Tanh, 2);
            let m = Model::new(spec.clone(), spec.init_params(seed)).unwrap();
            let data = toy(3, 6, seed);
            for kind in [
                KernelKind::LastLayer,
                KernelKind::Ntk,
                KernelKind::Rbf { gamma: 0.3 },
                KernelKind::LinearDot,
                KernelKind::Influence(InfluenceConfig { damping: 1.0, ..Default::default() }),
            ] {
                let k = Kernel::new(kind, &m, Some((&data, LossKind::Squared))).unwrap();
                let a = k.eval(&x, &z).unwrap();
                let b = k.eval(&z, &x).unwrap().transpose();
                let scale = a.amax().max(1e-300);
                prop_assert!((a - b).amax() <= 1e-8 * scale);
            }
        }
    }
}
