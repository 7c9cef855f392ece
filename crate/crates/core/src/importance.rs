//! Global importance extractors: target derivative, surrogate derivative
//! (kernel projection of the model) and tracking along the SGD trajectory.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, Kernel, KernelKind};
use crate::linalg::{axpy, dot, eig_range, norm};
use crate::loss::{self, LossKind};
use crate::model::{Architecture, Model};
use crate::training::TrajectoryRecord;

pub const DEFAULT_LAMBDA: f64 = 2e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    #[serde(alias = "surrogate")]
    SurrogateDerivative,
    #[serde(alias = "target")]
    TargetDerivative,
    Tracking,
}

impl ImportanceMethod {
    pub fn name(self) -> &'static str {
        match self {
            ImportanceMethod::SurrogateDerivative => "surrogate",
            ImportanceMethod::TargetDerivative => "target",
            ImportanceMethod::Tracking => "tracking",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateInit {
    TargetParams,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub init: SurrogateInit,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            lambda: DEFAULT_LAMBDA,
            max_iters: 20_000,
            grad_tol: 1e-10,
            init: SurrogateInit::TargetParams,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be non-negative".into()));
        }
        Ok(())
    }
}

const ARMIJO: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub solver: String,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalImportance {
    /// `n × c`.
    pub alpha: Vec<Vec<f64>>,
    pub method: ImportanceMethod,
    pub lambda: Option<f64>,
    pub diagnostics: Option<SolveDiagnostics>,
}

impl GlobalImportance {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.alpha.first().map_or(0, |a| a.len())
    }

    /// Row-major flattening `(i, k) ↦ i·c + k`, matching the Gram block layout.
    pub fn flat(&self) -> Vec<f64> {
        self.alpha.concat()
    }

    pub fn to_csv_string(&self, ids: &[u64]) -> String {
        let c = self.output_dim();
        let mut out = String::from("sample_id");
        if c == 1 {
            out.push_str(",alpha");
        } else {
            for k in 0..c {
                write!(out, ",alpha_{k}").unwrap();
            }
        }
        out.push('\n');
        for (id, a) in ids.iter().zip(&self.alpha) {
            write!(out, "{id}").unwrap();
            for v in a {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// `αᵢ = −∂L(f(xᵢ), yᵢ)/∂f(xᵢ)`.
pub fn target_derivative(model: &Model, data: &Dataset, kind: LossKind) -> Result<GlobalImportance> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_labels(kind, model.output_dim())?;
    let alpha = data
        .features
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| {
            let g = loss::loss_grad_output(&model.forward(x)?, y, kind)?;
            Ok(g.into_iter().map(|v| -v).collect())
        })
        .collect::<Result<_>>()?;
    Ok(GlobalImportance {
        alpha,
        method: ImportanceMethod::TargetDerivative,
        lambda: None,
        diagnostics: None,
    })
}

/// `αᵢ = −Σ_{t: i ∈ B⁽ᵗ⁾} η⁽ᵗ⁾/|B⁽ᵗ⁾| · ∂L/∂f` over the logged trajectory.
pub fn tracking_importance(trajectory: &TrajectoryRecord, n: usize) -> Result<GlobalImportance> {
    trajectory.validate(n)?;
    let c = trajectory.output_dim;
    let mut alpha = vec![vec![0.0; c]; n];
    for step in &trajectory.steps {
        if step.batch.is_empty() {
            continue;
        }
        let w = step.lr / step.batch.len() as f64;
        for (&i, g) in step.batch.iter().zip(&step.loss_grads) {
            axpy(-w, g, &mut alpha[i]);
        }
    }
    Ok(GlobalImportance {
        alpha,
        method: ImportanceMethod::Tracking,
        lambda: None,
        diagnostics: None,
    })
}

/// Smooth objective minimized by backtracking gradient descent along a
/// caller-chosen descent direction.
trait Problem {
    fn value(&self, x: &[f64]) -> f64;
    /// Descent direction `g` (the iterate moves along `−g`), the slope
    /// `⟨∇value, g⟩ ≥ 0` and the norm of the true gradient.
    fn direction(&self, x: &[f64]) -> (Vec<f64>, f64, f64);
}

fn descend(problem: &impl Problem, mut x: Vec<f64>, cfg: &SurrogateConfig, solver: &str) -> (Vec<f64>, SolveDiagnostics) {
    let mut f = problem.value(&x);
    let (mut g, mut slope, mut grad_norm) = problem.direction(&x);
    let mut t = 1.0;
    let mut iterations = 0;
    let mut converged = grad_norm <= cfg.grad_tol;
    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let slack = 4.0 * f64::EPSILON * f.abs();
        let mut candidate;
        let mut f_new;
        loop {
            candidate = x.clone();
            axpy(-t, &g, &mut candidate);
            f_new = problem.value(&candidate);
            if f_new <= f - ARMIJO * t * slope + slack || t < 1e-30 {
                break;
            }
            t *= BACKTRACK;
        }
        if !f_new.is_finite() {
            break;
        }
        let (g_new, slope_new, norm_new) = problem.direction(&candidate);
        // Barzilai-Borwein initial step for the next iteration.
        let s: Vec<f64> = candidate.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let stalled = s.iter().all(|v| *v == 0.0);
        t = if sy > 0.0 { dot(&s, &s) / sy } else { 2.0 * t };
        x = candidate;
        f = f_new;
        g = g_new;
        slope = slope_new;
        grad_norm = norm_new;
        converged = grad_norm <= cfg.grad_tol;
        if stalled {
            break;
        }
    }
    let diag = SolveDiagnostics {
        solver: solver.to_string(),
        iterations,
        grad_norm,
        objective: f,
        converged,
    };
    (x, diag)
}

/// Primal problem over `w`: `(1/n) Σ L(Fᵢw + bᵢ, fᵢ) + λ/2 ‖w‖²`.
struct Primal<'a> {
    /// Per sample, `c` feature rows of length `m`.
    features: &'a [Vec<Vec<f64>>],
    offsets: &'a [Vec<f64>],
    targets: &'a [Vec<f64>],
    loss: LossKind,
    lambda: f64,
}

impl Primal<'_> {
    fn outputs(&self, w: &[f64]) -> Vec<Vec<f64>> {
        self.features
            .iter()
            .zip(self.offsets)
            .map(|(rows, b)| rows.iter().zip(b).map(|(r, bk)| dot(r, w) + bk).collect())
            .collect()
    }
}

impl Problem for Primal<'_> {
    fn value(&self, w: &[f64]) -> f64 {
        let n = self.targets.len() as f64;
        let data: f64 = self
            .outputs(w)
            .iter()
            .zip(self.targets)
            .map(|(a, b)| loss::surrogate_loss(a, b, self.loss))
            .sum();
        data / n + 0.5 * self.lambda * dot(w, w)
    }

    fn direction(&self, w: &[f64]) -> (Vec<f64>, f64, f64) {
        let n = self.targets.len() as f64;
        let mut g = crate::linalg::scaled(self.lambda, w);
        for ((rows, a), b) in self.features.iter().zip(self.outputs(w)).zip(self.targets) {
            let lg = loss::surrogate_loss_grad(&a, b, self.loss);
            for (r, l) in rows.iter().zip(lg) {
                axpy(l / n, r, &mut g);
            }
        }
        let slope = dot(&g, &g);
        let gn = slope.sqrt();
        (g, slope, gn)
    }
}

/// Dual problem over `α`: `(1/n) Σ L((Kα)ᵢ, fᵢ) + λ/2 αᵀKα`, descended along the
/// function-space gradient `L′/n + λα`.
struct Dual<'a> {
    gram: &'a DMatrix<f64>,
    targets: &'a [f64],
    c: usize,
    loss: LossKind,
    lambda: f64,
}

impl Dual<'_> {
    fn k_times(&self, a: &[f64]) -> Vec<f64> {
        crate::linalg::mat_vec(self.gram, a)
    }

    fn loss_grads(&self, ka: &[f64]) -> Vec<f64> {
        ka.chunks(self.c)
            .zip(self.targets.chunks(self.c))
            .flat_map(|(a, b)| loss::surrogate_loss_grad(a, b, self.loss))
            .collect()
    }
}

impl Problem for Dual<'_> {
    fn value(&self, a: &[f64]) -> f64 {
        let n = (self.targets.len() / self.c) as f64;
        let ka = self.k_times(a);
        let data: f64 = ka
            .chunks(self.c)
            .zip(self.targets.chunks(self.c))
            .map(|(x, y)| loss::surrogate_loss(x, y, self.loss))
            .sum();
        data / n + 0.5 * self.lambda * dot(a, &ka)
    }

    fn direction(&self, a: &[f64]) -> (Vec<f64>, f64, f64) {
        let n = (self.targets.len() / self.c) as f64;
        let lg = self.loss_grads(&self.k_times(a));
        let g: Vec<f64> = lg.iter().zip(a).map(|(l, ai)| l / n + self.lambda * ai).collect();
        let kg = self.k_times(&g);
        let slope = dot(&g, &kg).max(0.0);
        (g, slope, norm(&kg))
    }
}

fn alpha_from_outputs(outputs: &[Vec<f64>], targets: &[Vec<f64>], loss: LossKind, lambda: f64) -> Vec<Vec<f64>> {
    let scale = -1.0 / (targets.len() as f64 * lambda);
    outputs
        .iter()
        .zip(targets)
        .map(|(a, b)| loss::surrogate_loss_grad(a, b, loss).into_iter().map(|v| scale * v).collect())
        .collect()
}

fn check_targets(targets: &[Vec<f64>], c: usize, loss: Option<LossKind>) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(loss) = loss {
        loss.check_outputs(c)?;
    }
    for t in targets {
        if t.len() != c {
            return Err(Error::Dimension {
                context: "surrogate target values",
                expected: c,
                actual: t.len(),
            });
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("surrogate target values"));
        }
    }
    Ok(())
}

/// Surrogate derivative from explicit features: `f̂(xᵢ) = Fᵢw + bᵢ`.
pub fn surrogate_primal(
    features: &[Vec<Vec<f64>>],
    offsets: &[Vec<f64>],
    targets: &[Vec<f64>],
    loss: LossKind,
    init: Vec<f64>,
    cfg: &SurrogateConfig,
) -> Result<(GlobalImportance, Vec<f64>)> {
    cfg.validate()?;
    let c = targets.first().map_or(0, |t| t.len());
    check_targets(targets, c, Some(loss))?;
    let problem = Primal {
        features,
        offsets,
        targets,
        loss,
        lambda: cfg.lambda,
    };
    let (w, diag) = descend(&problem, init, cfg, "primal");
    let alpha = alpha_from_outputs(&problem.outputs(&w), targets, loss, cfg.lambda);
    Ok((
        GlobalImportance {
            alpha,
            method: ImportanceMethod::SurrogateDerivative,
            lambda: Some(cfg.lambda),
            diagnostics: Some(diag),
        },
        w,
    ))
}

/// Surrogate derivative by the dual descent on a precomputed Gram matrix.
/// `targets` holds `f(xᵢ)` (length `c` each).
pub fn surrogate_from_gram(
    gram: &GramMatrix,
    targets: &[Vec<f64>],
    loss: LossKind,
    cfg: &SurrogateConfig,
) -> Result<GlobalImportance> {
    cfg.validate()?;
    let c = gram.output_dim;
    check_targets(targets, c, Some(loss))?;
    if gram.len() != targets.len() {
        return Err(Error::Dimension {
            context: "surrogate gram size",
            expected: targets.len(),
            actual: gram.len(),
        });
    }
    let flat_targets = targets.concat();
    let problem = Dual {
        gram: &gram.entries,
        targets: &flat_targets,
        c,
        loss,
        lambda: cfg.lambda,
    };
    let (a, diag) = descend(&problem, vec![0.0; flat_targets.len()], cfg, "dual");
    let outputs: Vec<Vec<f64>> = problem.k_times(&a).chunks(c).map(|s| s.to_vec()).collect();
    Ok(GlobalImportance {
        alpha: alpha_from_outputs(&outputs, targets, loss, cfg.lambda),
        method: ImportanceMethod::SurrogateDerivative,
        lambda: Some(cfg.lambda),
        diagnostics: Some(diag),
    })
}

/// Block features `e(x)` placed in row `k` at offset `k·m` (c heads sharing one scalar kernel).
fn block_rows(e: &[f64], c: usize) -> Vec<Vec<f64>> {
    let m = e.len();
    (0..c)
        .map(|k| {
            let mut r = vec![0.0; c * m];
            r[k * m..(k + 1) * m].copy_from_slice(e);
            r
        })
        .collect()
}

/// Surrogate derivative of `model` projected onto the RKHS of `kernel`.
///
/// Kernels with an explicit feature map (last layer, NTK, linear) are solved in
/// the primal starting from the target parameters; the NTK surrogate carries
/// the fixed offset `f(x) − J(x)θ`. The remaining kernels are solved in the dual.
pub fn surrogate_derivative(
    model: &Model,
    data: &Dataset,
    kernel: &KernelKind,
    loss: LossKind,
    cfg: &SurrogateConfig,
) -> Result<GlobalImportance> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = model.output_dim();
    let targets: Vec<Vec<f64>> = data.features.iter().map(|x| model.forward(x)).collect::<Result<_>>()?;
    let zero = |m: usize| vec![vec![0.0; c]; m];
    let use_target = cfg.init == SurrogateInit::TargetParams;
    let theta = model.params().as_slice();
    match kernel {
        KernelKind::LastLayer => {
            let features: Vec<_> = data
                .features
                .iter()
                .map(|x| Ok(block_rows(&model.penultimate(x)?, c)))
                .collect::<Result<_>>()?;
            let init = if use_target {
                theta[model.spec().last_layer_range()].to_vec()
            } else {
                vec![0.0; c * model.spec().embedding_dim()]
            };
            Ok(surrogate_primal(&features, &zero(data.len()), &targets, loss, init, cfg)?.0)
        }
        KernelKind::LinearDot => {
            let features: Vec<_> = data.features.iter().map(|x| block_rows(x, c)).collect();
            let linear = model.spec().architecture == Architecture::Linear;
            let init = if use_target && linear {
                theta.to_vec()
            } else {
                vec![0.0; c * data.dim()]
            };
            Ok(surrogate_primal(&features, &zero(data.len()), &targets, loss, init, cfg)?.0)
        }
        KernelKind::Ntk => {
            let features: Vec<Vec<Vec<f64>>> =
                data.features.iter().map(|x| model.jacobian_rows(x)).collect::<Result<_>>()?;
            let offsets: Vec<Vec<f64>> = features
                .iter()
                .zip(&targets)
                .map(|(rows, f)| rows.iter().zip(f).map(|(r, fk)| fk - dot(r, theta)).collect())
                .collect();
            let init = if use_target { theta.to_vec() } else { vec![0.0; theta.len()] };
            Ok(surrogate_primal(&features, &offsets, &targets, loss, init, cfg)?.0)
        }
        KernelKind::Rbf { .. } | KernelKind::Influence(_) => {
            let k = Kernel::new(kernel.clone(), model, Some((data, loss)))?;
            surrogate_from_gram(&k.gram(data)?, &targets, loss, cfg)
        }
    }
}

/// Dense solve of `(K + nλI) α = f(X)`, the squared-loss optimality condition.
pub fn surrogate_closed_form_squared(gram: &GramMatrix, targets: &[Vec<f64>], lambda: f64) -> Result<Vec<Vec<f64>>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }
    let c = gram.output_dim;
    check_targets(targets, c, None)?;
    let n = targets.len();
    let dim = gram.entries.nrows();
    if dim != n * c {
        return Err(Error::Dimension {
            context: "closed-form surrogate gram size",
            expected: n * c,
            actual: dim,
        });
    }
    let a = &gram.entries + DMatrix::identity(dim, dim) * (n as f64 * lambda);
    let rhs = DVector::from_vec(targets.concat());
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let (lo, hi) = eig_range(&a);
            let condition = if lo <= 0.0 { f64::INFINITY } else { hi / lo };
            return Err(Error::Singular { condition });
        }
    };
    Ok(sol.as_slice().chunks(c).map(|s| s.to_vec()).collect())
}

/// `max_probe |Σᵢ (α¹ᵢ − α²ᵢ)ᵀ K(xᵢ, probe)|`.
pub fn null_space_check(
    kernel: &Kernel,
    train: &Dataset,
    alpha1: &[Vec<f64>],
    alpha2: &[Vec<f64>],
    probes: &[Vec<f64>],
) -> Result<f64> {
    if alpha1.len() != train.len() || alpha2.len() != train.len() {
        return Err(Error::Dimension {
            context: "null-space check importance length",
            expected: train.len(),
            actual: alpha1.len().min(alpha2.len()),
        });
    }
    let cross = kernel.cross(&train.features, probes)?;
    let diff: Vec<f64> = alpha1.concat().iter().zip(alpha2.concat()).map(|(a, b)| a - b).collect();
    let row = DVector::from_vec(diff).transpose() * cross;
    Ok(row.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Relative gap `‖α_target − nλ·α_surrogate‖ / ‖α_target‖`, for reporting.
pub fn proximity(target: &GlobalImportance, surrogate: &GlobalImportance) -> f64 {
    let n = surrogate.len() as f64;
    let lambda = surrogate.lambda.unwrap_or(DEFAULT_LAMBDA);
    let t = target.flat();
    let s = surrogate.flat();
    let diff: Vec<f64> = t.iter().zip(&s).map(|(a, b)| a - n * lambda * b).collect();
    norm(&diff) / norm(&t).max(f64::MIN_POSITIVE)
}
