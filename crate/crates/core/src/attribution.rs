//! Sample-based attributions `φ(f, xᵢ → x) = αᵢᵀ K(xᵢ, x)` for any pairing of
//! global importance and kernel, plus the named special cases.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::{self, GlobalImportance, ImportanceMethod, SurrogateConfig};
use crate::kernels::{InfluenceConfig, Kernel, KernelKind};
use crate::loss::LossKind;
use crate::model::{Model, ModelSpec, ParamVector};
use crate::training::{CheckpointSet, TrajectoryRecord};

/// Which stored parameters define the kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamsAt {
    #[default]
    Final,
    Initial,
    Middle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Composed {
        importance: ImportanceMethod,
        kernel: KernelKind,
        #[serde(default)]
        params_at: ParamsAt,
        #[serde(default)]
        surrogate: SurrogateConfig,
    },
    /// Surrogate derivative with the last-layer kernel.
    RepresenterPoint {
        #[serde(default)]
        surrogate: SurrogateConfig,
    },
    /// Target derivative with the influence kernel.
    InfluenceFunction {
        #[serde(default)]
        influence: InfluenceConfig,
    },
    /// Checkpoint sum of target derivative × NTK. `checkpoints = None` uses every
    /// stored checkpoint, otherwise an evenly spaced subset of that size.
    #[serde(rename = "tracincp")]
    TracInCp {
        #[serde(default)]
        checkpoints: Option<usize>,
    },
}

impl MethodSpec {
    pub fn composed(importance: ImportanceMethod, kernel: KernelKind) -> Self {
        MethodSpec::Composed {
            importance,
            kernel,
            params_at: ParamsAt::Final,
            surrogate: SurrogateConfig::default(),
        }
    }

    /// Resolve named aliases to their composed form.
    pub fn canonical(&self) -> MethodSpec {
        match self {
            MethodSpec::RepresenterPoint { surrogate } => MethodSpec::Composed {
                importance: ImportanceMethod::SurrogateDerivative,
                kernel: KernelKind::LastLayer,
                params_at: ParamsAt::Final,
                surrogate: surrogate.clone(),
            },
            MethodSpec::InfluenceFunction { influence } => MethodSpec::Composed {
                importance: ImportanceMethod::TargetDerivative,
                kernel: KernelKind::Influence(influence.clone()),
                params_at: ParamsAt::Final,
                surrogate: SurrogateConfig::default(),
            },
            other => other.clone(),
        }
    }

    /// Short identifier such as `tracking-ntk-final`.
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Composed {
                importance,
                kernel,
                params_at,
                ..
            } => {
                let at = match params_at {
                    ParamsAt::Final => "final",
                    ParamsAt::Initial => "initial",
                    ParamsAt::Middle => "middle",
                };
                format!("{}-{}-{at}", importance.name(), kernel.name())
            }
            MethodSpec::RepresenterPoint { .. } => "representer_point".into(),
            MethodSpec::InfluenceFunction { .. } => "influence_function".into(),
            MethodSpec::TracInCp { .. } => "tracincp".into(),
        }
    }

    pub fn needs_trajectory(&self) -> bool {
        matches!(
            self.canonical(),
            MethodSpec::Composed {
                importance: ImportanceMethod::Tracking,
                ..
            }
        )
    }

    pub fn needs_checkpoints(&self) -> bool {
        match self.canonical() {
            MethodSpec::TracInCp { .. } => true,
            MethodSpec::Composed { params_at, .. } => params_at != ParamsAt::Final,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.canonical() {
            MethodSpec::Composed {
                importance,
                kernel,
                params_at,
                surrogate,
            } => {
                kernel.validate()?;
                if importance == ImportanceMethod::SurrogateDerivative {
                    surrogate.validate()?;
                    if params_at != ParamsAt::Final {
                        return Err(Error::InvalidConfig(
                            "surrogate importance projects the final model; use params_at = final".into(),
                        ));
                    }
                }
                Ok(())
            }
            MethodSpec::TracInCp { checkpoints: Some(0) } => {
                Err(Error::InvalidConfig("tracincp needs at least one checkpoint".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Everything a method may need; optional parts are checked per method.
#[derive(Clone, Copy)]
pub struct Artifacts<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a ParamVector,
    pub loss: LossKind,
    pub train: &'a Dataset,
    pub trajectory: Option<&'a TrajectoryRecord>,
    pub checkpoints: Option<&'a CheckpointSet>,
}

impl<'a> Artifacts<'a> {
    fn model(&self) -> Result<Model> {
        Model::new(self.spec.clone(), self.params.clone())
    }

    fn checkpoints(&self) -> Result<&'a CheckpointSet> {
        match self.checkpoints {
            Some(c) if !c.checkpoints.is_empty() => Ok(c),
            _ => Err(Error::MissingArtifact(
                "this method needs the training checkpoints; run train first".into(),
            )),
        }
    }

    fn params_at(&self, at: ParamsAt) -> Result<Model> {
        let params = match at {
            ParamsAt::Final => return self.model(),
            ParamsAt::Initial => &self.checkpoints()?.first().unwrap().params,
            ParamsAt::Middle => &self.checkpoints()?.middle().unwrap().params,
        };
        Model::new(self.spec.clone(), params.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub method: MethodSpec,
    pub loss: LossKind,
    pub output_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub model_sha256: String,
    pub dataset_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionTable {
    pub test_ids: Vec<u64>,
    pub train_ids: Vec<u64>,
    pub output_dim: usize,
    /// `|test| × (n·c)`; entry `i·c + k` is output `k` of `φ(xᵢ → test)`.
    pub scores: Vec<Vec<f64>>,
    pub metadata: TableMetadata,
}

pub fn sha256_params(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in params.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn sha256_dataset(data: &Dataset) -> String {
    hex::encode(Sha256::digest(data.to_csv_string().as_bytes()))
}

impl AttributionTable {
    pub fn score(&self, test: usize, train: usize) -> &[f64] {
        let c = self.output_dim;
        &self.scores[test][train * c..(train + 1) * c]
    }

    /// Scores of one test point on output `class`, multiplied by `sign`.
    pub fn oriented(&self, test: usize, class: usize, sign: f64) -> Vec<f64> {
        let c = self.output_dim;
        self.scores[test].chunks(c).map(|s| sign * s[class]).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let c = self.output_dim;
        let mut out = String::from("test_id");
        for id in &self.train_ids {
            if c == 1 {
                write!(out, ",{id}").unwrap();
            } else {
                for k in 0..c {
                    write!(out, ",{id}:{k}").unwrap();
                }
            }
        }
        out.push('\n');
        for (id, row) in self.test_ids.iter().zip(&self.scores) {
            write!(out, "{id}").unwrap();
            for v in row {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn metadata_toml(&self) -> String {
        toml::to_string(&self.metadata).expect("metadata is always serializable")
    }

    /// Writes `path` (CSV) and a sidecar `path.meta.toml`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        let mut side = path.as_os_str().to_owned();
        side.push(".meta.toml");
        std::fs::write(side, self.metadata_toml())?;
        Ok(())
    }
}

/// `φ(i, z) = αᵢᵀ K(xᵢ, z)` from a train × test block matrix.
pub fn compose(alpha: &[Vec<f64>], cross: &DMatrix<f64>, c: usize) -> Vec<Vec<f64>> {
    let n = alpha.len();
    let m = cross.ncols() / c.max(1);
    (0..m)
        .map(|j| {
            let mut row = vec![0.0; n * c];
            for (i, a) in alpha.iter().enumerate() {
                for k in 0..c {
                    let mut acc = 0.0;
                    for (l, al) in a.iter().enumerate() {
                        acc += al * cross[(i * c + l, j * c + k)];
                    }
                    row[i * c + k] = acc;
                }
            }
            row
        })
        .collect()
}

fn check_tests(spec: &ModelSpec, tests: &[Vec<f64>]) -> Result<()> {
    for x in tests {
        if x.len() != spec.input_dim {
            return Err(Error::Dimension {
                context: "test point",
                expected: spec.input_dim,
                actual: x.len(),
            });
        }
    }
    Ok(())
}

/// Global importance of a composed method.
pub fn global_importance(method: &MethodSpec, art: &Artifacts) -> Result<GlobalImportance> {
    let MethodSpec::Composed {
        importance,
        kernel,
        surrogate,
        ..
    } = method.canonical()
    else {
        return Err(Error::InvalidConfig(format!("{} has no single global importance", method.label())));
    };
    let model = art.model()?;
    match importance {
        ImportanceMethod::TargetDerivative => importance::target_derivative(&model, art.train, art.loss),
        ImportanceMethod::SurrogateDerivative => {
            importance::surrogate_derivative(&model, art.train, &kernel, art.loss, &surrogate)
        }
        ImportanceMethod::Tracking => {
            let traj = art.trajectory.ok_or_else(|| {
                Error::MissingArtifact("tracking importance needs the SGD trajectory; run train first".into())
            })?;
            importance::tracking_importance(traj, art.train.len())
        }
    }
}

/// A method with its test-independent parts (global importance, kernel
/// parameters) computed once, for scoring many test points.
pub struct Prepared {
    method: MethodSpec,
    alpha: Option<GlobalImportance>,
    kernel_model: Option<Model>,
}

impl Prepared {
    pub fn new(method: &MethodSpec, art: &Artifacts) -> Result<Self> {
        method.validate()?;
        let canonical = method.canonical();
        let (alpha, kernel_model) = match &canonical {
            MethodSpec::Composed { params_at, .. } => (Some(global_importance(&canonical, art)?), Some(art.params_at(*params_at)?)),
            _ => {
                art.checkpoints()?;
                (None, None)
            }
        };
        Ok(Prepared {
            method: canonical,
            alpha,
            kernel_model,
        })
    }

    pub fn global_importance(&self) -> Option<&GlobalImportance> {
        self.alpha.as_ref()
    }

    /// Scores `|tests| × (n·c)` laid out like [`AttributionTable::scores`].
    pub fn scores(&self, art: &Artifacts, tests: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_tests(art.spec, tests)?;
        match (&self.method, &self.alpha, &self.kernel_model) {
            (MethodSpec::Composed { kernel, .. }, Some(alpha), Some(kmodel)) => {
                let k = Kernel::new(kernel.clone(), kmodel, Some((art.train, art.loss)))?;
                let cross = k.cross(&art.train.features, tests)?;
                Ok(compose(&alpha.alpha, &cross, art.spec.output_dim))
            }
            (MethodSpec::TracInCp { checkpoints }, ..) => tracincp_scores(art, *checkpoints, tests),
            _ => unreachable!("aliases are resolved by canonical()"),
        }
    }
}

/// Attribution table of `method` for `tests`.
pub fn attribute(method: &MethodSpec, art: &Artifacts, tests: &[Vec<f64>], test_ids: &[u64]) -> Result<AttributionTable> {
    method.validate()?;
    check_tests(art.spec, tests)?;
    if test_ids.len() != tests.len() {
        return Err(Error::Dimension {
            context: "test ids",
            expected: tests.len(),
            actual: test_ids.len(),
        });
    }
    let scores = Prepared::new(method, art)?.scores(art, tests)?;
    if !scores.iter().all(|r| r.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("attribution scores"));
    }
    Ok(AttributionTable {
        test_ids: test_ids.to_vec(),
        train_ids: art.train.ids.clone(),
        output_dim: art.spec.output_dim,
        scores,
        metadata: TableMetadata {
            method: method.clone(),
            loss: art.loss,
            output_dim: art.spec.output_dim,
            train_size: art.train.len(),
            test_size: tests.len(),
            model_sha256: sha256_params(art.params),
            dataset_sha256: sha256_dataset(art.train),
        },
    })
}

/// Evenly spaced subset of `count` checkpoints (all of them for `None`).
pub fn select_checkpoints(set: &CheckpointSet, count: Option<usize>) -> Vec<usize> {
    let total = set.checkpoints.len();
    match count {
        Some(k) if k < total => {
            if k == 1 {
                return vec![total - 1];
            }
            let mut idx: Vec<usize> = (0..k)
                .map(|j| ((j as f64) * (total - 1) as f64 / (k - 1) as f64).round() as usize)
                .collect();
            idx.dedup();
            idx
        }
        _ => (0..total).collect(),
    }
}

fn tracincp_scores(art: &Artifacts, count: Option<usize>, tests: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let set = art.checkpoints()?;
    let c = art.spec.output_dim;
    let n = art.train.len();
    let mut total = vec![vec![0.0; n * c]; tests.len()];
    for idx in select_checkpoints(set, count) {
        let cp = &set.checkpoints[idx];
        let model = Model::new(art.spec.clone(), cp.params.clone())?;
        let alpha = importance::target_derivative(&model, art.train, art.loss)?;
        let cross = Kernel::new(KernelKind::Ntk, &model, None)?.cross(&art.train.features, tests)?;
        for (acc, row) in total.iter_mut().zip(compose(&alpha.alpha, &cross, c)) {
            crate::linalg::axpy(cp.lr, &row, acc);
        }
    }
    Ok(total)
}

/// TracInCP through parameter gradients: `−Σ_t η_t ⟨∂L(xᵢ)/∂θ, ∂f_k(x)/∂θ⟩`.
pub fn tracincp_gradient_dot(
    spec: &ModelSpec,
    checkpoints: &CheckpointSet,
    train: &Dataset,
    tests: &[Vec<f64>],
    kind: LossKind,
) -> Result<Vec<Vec<f64>>> {
    let c = spec.output_dim;
    let n = train.len();
    let mut total = vec![vec![0.0; n * c]; tests.len()];
    for cp in &checkpoints.checkpoints {
        let model = Model::new(spec.clone(), cp.params.clone())?;
        let grads: Vec<Vec<f64>> = train
            .features
            .iter()
            .zip(&train.labels)
            .map(|(x, &y)| model.loss_grad_params(x, y, kind))
            .collect::<Result<_>>()?;
        for (t, z) in tests.iter().enumerate() {
            let rows = model.jacobian_rows(z)?;
            for (i, g) in grads.iter().enumerate() {
                for (k, r) in rows.iter().enumerate() {
                    total[t][i * c + k] -= cp.lr * crate::linalg::dot(g, r);
                }
            }
        }
    }
    Ok(total)
}

/// Per-test `max_k |Σᵢ φ_k(xᵢ → x) − f_k(x)|`.
pub fn efficiency_residual(table: &AttributionTable, model: &Model, tests: &[Vec<f64>]) -> Result<Vec<f64>> {
    let c = table.output_dim;
    tests
        .iter()
        .zip(&table.scores)
        .map(|(x, row)| {
            let f = model.forward(x)?;
            let mut sums = vec![0.0; c];
            for chunk in row.chunks(c) {
                crate::linalg::axpy(1.0, chunk, &mut sums);
            }
            Ok(sums.iter().zip(&f).fold(0.0_f64, |m, (s, fk)| m.max((s - fk).abs())))
        })
        .collect()
}

/// Score used to orient a test point's prediction: `(output index, sign)`.
/// Logistic uses the margin `y·f`; cross-entropy the true-class logit; squared `f`.
pub fn prediction_orientation(label: f64, kind: LossKind) -> (usize, f64) {
    match kind {
        LossKind::Logistic => (0, if label > 0.0 { 1.0 } else { -1.0 }),
        LossKind::CrossEntropy => (label as usize, 1.0),
        LossKind::Squared => (0, 1.0),
    }
}

/// The oriented prediction score of `model` at `(x, label)`.
pub fn prediction_score(model: &Model, x: &[f64], label: f64, kind: LossKind) -> Result<f64> {
    let (k, s) = prediction_orientation(label, kind);
    Ok(s * model.forward(x)?[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Generator, SyntheticSpec};
    use crate::model::Activation;
    use crate::training::{train, Checkpoint, LrSchedule, TrainConfig};

    fn planted(n: usize, seed: u64) -> Dataset {
        generate(&SyntheticSpec {
            generator: Generator::TwoGaussians {
                separation: 3.0,
                noise: 1.0,
            },
            n,
            d: 3,
            seed,
            flip_fraction: 0.1,
        })
        .unwrap()
    }

    fn trained(hidden: usize) -> (ModelSpec, Dataset, crate::training::TrainOutput) {
        let spec = ModelSpec::mlp(3, vec![hidden], Activation::Tanh, 1);
        let data = planted(24, 1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: LrSchedule::Constant(0.2),
            seed: 4,
            checkpoint_count: 4,
        };
        let out = train(&spec, &spec.init_params(3), &data, &cfg, LossKind::Logistic).unwrap();
        (spec, data, out)
    }

    fn art<'a>(spec: &'a ModelSpec, data: &'a Dataset, out: &'a crate::training::TrainOutput) -> Artifacts<'a> {
        Artifacts {
            spec,
            params: &out.params,
            loss: LossKind::Logistic,
            train: data,
            trajectory: Some(&out.trajectory),
            checkpoints: Some(&out.checkpoints),
        }
    }

    #[test]
    fn zero_alpha_gives_zero_scores() {
        let cross = DMatrix::from_element(3, 2, 0.7);
        let s = compose(&[vec![0.0], vec![0.0], vec![0.0]], &cross, 1);
        assert!(s.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn target_linear_dot_by_hand() {
        let spec = ModelSpec::linear(2, 1);
        let params = ParamVector(vec![0.5, -1.0]);
        let data = Dataset::new(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]], vec![1.0, -1.0, 0.25]).unwrap();
        let art = Artifacts {
            spec: &spec,
            params: &params,
            loss: LossKind::Squared,
            train: &data,
            trajectory: None,
            checkpoints: None,
        };
        let x = vec![2.0, -1.0];
        let m = MethodSpec::composed(ImportanceMethod::TargetDerivative, KernelKind::LinearDot);
        let t = attribute(&m, &art, &[x.clone()], &[0]).unwrap();
        for (i, (xi, yi)) in data.features.iter().zip(&data.labels).enumerate() {
            let resid = yi - (0.5 * xi[0] - xi[1]);
            let expect = resid * (xi[0] * x[0] + xi[1] * x[1]);
            assert!((t.score(0, i)[0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn aliases_match_composed_bit_for_bit() {
        let (spec, data, out) = trained(4);
        let a = art(&spec, &data, &out);
        let tests = vec![vec![0.1, 0.2, -0.3], vec![1.0, -1.0, 0.5]];
        let rp = attribute(&MethodSpec::RepresenterPoint { surrogate: Default::default() }, &a, &tests, &[0, 1]).unwrap();
        let c = attribute(
            &MethodSpec::composed(ImportanceMethod::SurrogateDerivative, KernelKind::LastLayer),
            &a,
            &tests,
            &[0, 1],
        )
        .unwrap();
        assert_eq!(rp.scores, c.scores);
        let inf = attribute(&MethodSpec::InfluenceFunction { influence: Default::default() }, &a, &tests, &[0, 1]).unwrap();
        let c = attribute(
            &MethodSpec::composed(
                ImportanceMethod::TargetDerivative,
                KernelKind::Influence(Default::default()),
            ),
            &a,
            &tests,
            &[0, 1],
        )
        .unwrap();
        assert_eq!(inf.scores, c.scores);
    }

    #[test]
    fn missing_artifacts_are_named() {
        let (spec, data, out) = trained(3);
        let mut a = art(&spec, &data, &out);
        a.trajectory = None;
        a.checkpoints = None;
        let tests = vec![vec![0.0; 3]];
        let m = MethodSpec::composed(ImportanceMethod::Tracking, KernelKind::Ntk);
        let err = attribute(&m, &a, &tests, &[0]).unwrap_err();
        assert!(err.to_string().contains("run train first"));
        let err = attribute(&MethodSpec::TracInCp { checkpoints: None }, &a, &tests, &[0]).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn tracincp_single_and_doubled_checkpoints() {
        let (spec, data, out) = trained(4);
        let last = out.checkpoints.last().unwrap().clone();
        let single = CheckpointSet {
            checkpoints: vec![last.clone()],
        };
        let doubled = CheckpointSet {
            checkpoints: vec![last.clone(), last.clone()],
        };
        let tests = vec![vec![0.3, -0.2, 0.9]];
        let mut a = art(&spec, &data, &out);
        a.checkpoints = Some(&single);
        let one = attribute(&MethodSpec::TracInCp { checkpoints: None }, &a, &tests, &[0]).unwrap();
        let composed = attribute(
            &MethodSpec::composed(ImportanceMethod::TargetDerivative, KernelKind::Ntk),
            &a,
            &tests,
            &[0],
        )
        .unwrap();
        for (x, y) in one.scores[0].iter().zip(&composed.scores[0]) {
            assert!((x - last.lr * y).abs() <= 1e-14 * y.abs().max(1.0));
        }
        a.checkpoints = Some(&doubled);
        let two = attribute(&MethodSpec::TracInCp { checkpoints: None }, &a, &tests, &[0]).unwrap();
        for (x, y) in two.scores[0].iter().zip(&one.scores[0]) {
            assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn tracincp_matches_gradient_dot() {
        let spec = ModelSpec::mlp(3, vec![5], Activation::Tanh, 2);
        let data = planted(20, 2).to_class_labels();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            lr: LrSchedule::Constant(0.1),
            seed: 1,
            checkpoint_count: 7,
        };
        let out = train(&spec, &spec.init_params(0), &data, &cfg, LossKind::CrossEntropy).unwrap();
        let a = Artifacts {
            spec: &spec,
            params: &out.params,
            loss: LossKind::CrossEntropy,
            train: &data,
            trajectory: None,
            checkpoints: Some(&out.checkpoints),
        };
        let tests = vec![vec![0.5, 0.5, -1.0], vec![-0.2, 1.2, 0.0]];
        let t = attribute(&MethodSpec::TracInCp { checkpoints: None }, &a, &tests, &[0, 1]).unwrap();
        let g = tracincp_gradient_dot(&spec, &out.checkpoints, &data, &tests, LossKind::CrossEntropy).unwrap();
        for (r1, r2) in t.scores.iter().zip(&g) {
            for (x, y) in r1.iter().zip(r2) {
                assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn positive_kernel_scaling_preserves_ranking() {
        let alpha = vec![vec![0.3], vec![-1.2], vec![0.05], vec![0.8]];
        let cross = DMatrix::from_row_slice(4, 2, &[0.2, 1.0, 0.9, 0.1, 0.4, 0.4, 0.3, 0.7]);
        let base = compose(&alpha, &cross, 1);
        let scaled = compose(&alpha, &(&cross * 3.5), 1);
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
            idx
        };
        for (b, s) in base.iter().zip(&scaled) {
            assert_eq!(order(b), order(s));
            for (x, y) in b.iter().zip(s) {
                assert!((3.5 * x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn vector_pathway_reduces_to_scalar() {
        let alpha = vec![vec![0.3], vec![-1.2]];
        let cross = DMatrix::from_row_slice(2, 1, &[0.5, 2.0]);
        assert_eq!(compose(&alpha, &cross, 1), vec![vec![0.15, -2.4]]);
    }

    #[test]
    fn zero_model_has_zero_efficiency_residual() {
        let spec = ModelSpec::linear(2, 1);
        let params = ParamVector(vec![0.0, 0.0]);
        let model = Model::new(spec.clone(), params.clone()).unwrap();
        let data = Dataset::new(vec![vec![1.0, 2.0]], vec![0.0]).unwrap();
        let art = Artifacts {
            spec: &spec,
            params: &params,
            loss: LossKind::Squared,
            train: &data,
            trajectory: None,
            checkpoints: None,
        };
        let tests = vec![vec![0.3, 0.4]];
        let t = attribute(&MethodSpec::composed(ImportanceMethod::TargetDerivative, KernelKind::Ntk), &art, &tests, &[0])
            .unwrap();
        assert!(t.scores[0].iter().all(|v| *v == 0.0));
        assert_eq!(efficiency_residual(&t, &model, &tests).unwrap(), vec![0.0]);
    }

    #[test]
    fn method_spec_toml_round_trip() {
        let methods = vec![
            MethodSpec::composed(ImportanceMethod::Tracking, KernelKind::Ntk),
            MethodSpec::RepresenterPoint { surrogate: Default::default() },
            MethodSpec::InfluenceFunction { influence: Default::default() },
            MethodSpec::TracInCp { checkpoints: Some(7) },
        ];
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            m: Vec<MethodSpec>,
        }
        let s = toml::to_string(&Wrap { m: methods.clone() }).unwrap();
        let back: Wrap = toml::from_str(&s).unwrap();
        assert_eq!(back.m, methods);
        let parsed: MethodSpec = toml::from_str("method = \"composed\"\nimportance = \"target\"\nkernel = { kind = \"ntk\" }\n").unwrap();
        assert_eq!(parsed, MethodSpec::composed(ImportanceMethod::TargetDerivative, KernelKind::Ntk));
    }

    #[test]
    fn table_csv_and_sidecar() {
        let (spec, data, out) = trained(3);
        let a = art(&spec, &data, &out);
        let m = MethodSpec::composed(ImportanceMethod::Tracking, KernelKind::Ntk);
        let t = attribute(&m, &a, &[vec![0.0; 3]], &[42]).unwrap();
        let csv = t.to_csv_string();
        assert!(csv.starts_with("test_id,0,1,2"));
        assert!(csv.lines().nth(1).unwrap().starts_with("42,"));
        let dir = tempfile::tempdir().unwrap();
        t.save(&dir.path().join("t.csv")).unwrap();
        let meta: TableMetadata =
            toml::from_str(&std::fs::read_to_string(dir.path().join("t.csv.meta.toml")).unwrap()).unwrap();
        assert_eq!(meta, t.metadata);
        assert_eq!(meta.model_sha256.len(), 64);
    }

    #[test]
    fn checkpoint_selection_is_even() {
        let set = CheckpointSet {
            checkpoints: (0..7)
                .map(|s| Checkpoint {
                    step: s,
                    params: ParamVector(vec![]),
                    lr: 0.1,
                })
                .collect(),
        };
        assert_eq!(select_checkpoints(&set, None), (0..7).collect::<Vec<_>>());
        assert_eq!(select_checkpoints(&set, Some(3)), vec![0, 3, 6]);
        assert_eq!(select_checkpoints(&set, Some(1)), vec![6]);
    }
}
