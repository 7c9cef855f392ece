//! Command-line driver: one TOML config per experiment, subcommands for each
//! pipeline stage, every output written under the configured directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{efficiency_residual, sha256_dataset, Artifacts, MethodSpec, Prepared};
use crate::axioms::{self, CheckTolerances, IrreducibilityMode, PhiMatrix};
use crate::data::{generate, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{run_comparison, Candidate, DeletionConfig};
use crate::importance::{surrogate_closed_form_squared, surrogate_from_gram, SurrogateConfig};
use crate::kernels::{inverse_hvp, HessianOperator, InverseMethod, Kernel, KernelKind};
use crate::loss::LossKind;
use crate::model::{Architecture, Model, ModelSpec, ParamVector};
use crate::persist;
use crate::training::{train, Checkpoint, CheckpointSet, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_AXIOMS: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "genrep", version, about = "Sample-based explanations as global importance times kernel similarity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training and initialization seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Only run the method with this label.
    #[arg(long, global = true)]
    pub method: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train the model; writes final parameters, checkpoints and the SGD trajectory.
    Train,
    /// Attribution tables for the configured methods on the test points.
    Explain,
    /// Axiom checks and factorization on training-point attribution matrices.
    Axioms,
    /// Deletion diagnostics comparing the configured methods.
    Evaluate,
    /// Independent numerical oracles on the configured model and data.
    Oracle,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Explain => "explain",
            Command::Axioms => "axioms",
            Command::Evaluate => "evaluate",
            Command::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub init_seed: u64,
}

impl ModelSection {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_fractions")]
    pub k_fractions: Vec<f64>,
    pub num_seeds: usize,
    pub num_test_points: usize,
}

fn default_fractions() -> Vec<f64> {
    (0..6).map(|i| 0.02 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxiomSection {
    /// Training points spanning the attribution matrix.
    pub points: usize,
    /// Test points used as extra self-explanation probes.
    pub probes: usize,
    pub tolerances: CheckTolerances,
    pub irreducibility: IrreducibilityMode,
    pub continuity_deltas: Vec<f64>,
    pub continuity_directions: usize,
}

impl Default for AxiomSection {
    fn default() -> Self {
        AxiomSection {
            points: 12,
            probes: 3,
            tolerances: CheckTolerances::default(),
            irreducibility: IrreducibilityMode::default(),
            continuity_deltas: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            continuity_directions: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub num_test_points: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection { num_test_points: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub loss: LossKind,
    pub dataset: DatasetSource,
    /// Held-out points; synthetic datasets default to a fresh unflipped draw.
    #[serde(default)]
    pub tests: Option<DatasetSource>,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub methods: Vec<Candidate>,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub axioms: AxiomSection,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.out_dir = base.join(&cfg.out_dir);
        for src in [Some(&mut cfg.dataset), cfg.tests.as_mut()].into_iter().flatten() {
            if let DatasetSource::Csv { path } = src {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.spec().validate()?;
        self.train.validate()?;
        self.loss.check_outputs(self.model.output_dim)?;
        for m in &self.methods {
            if let Candidate::Method(m) = m {
                m.validate()?;
            }
        }
        if let Some(e) = &self.eval {
            self.deletion(e).validate()?;
        }
        if self.axioms.points == 0 {
            return Err(Error::InvalidConfig("axioms.points must be >= 1".into()));
        }
        Ok(())
    }

    fn deletion(&self, e: &EvalSection) -> DeletionConfig {
        DeletionConfig {
            k_fractions: e.k_fractions.clone(),
            num_seeds: e.num_seeds,
            num_test_points: e.num_test_points,
            retrain: self.train.clone(),
        }
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.model.init_seed = seed;
    }

    fn load_source(&self, src: &DatasetSource) -> Result<Dataset> {
        let data = match src {
            DatasetSource::Synthetic(s) => generate(s)?,
            DatasetSource::Csv { path } => Dataset::load_csv(path)?,
        };
        Ok(match self.loss {
            LossKind::CrossEntropy if data.labels.iter().any(|&y| y < 0.0) => data.to_class_labels(),
            _ => data,
        })
    }

    pub fn training_data(&self) -> Result<Dataset> {
        let d = self.load_source(&self.dataset)?;
        d.check_labels(self.loss, self.model.output_dim)?;
        Ok(d)
    }

    pub fn test_data(&self) -> Result<Dataset> {
        let src = match (&self.tests, &self.dataset) {
            (Some(t), _) => t.clone(),
            (None, DatasetSource::Synthetic(s)) => DatasetSource::Synthetic(SyntheticSpec {
                n: 100,
                seed: s.seed.wrapping_add(0x5EED),
                flip_fraction: 0.0,
                ..s.clone()
            }),
            (None, DatasetSource::Csv { .. }) => {
                return Err(Error::InvalidConfig("a [tests] section is required with csv training data".into()))
            }
        };
        let d = self.load_source(&src)?;
        d.check_labels(self.loss, self.model.output_dim)?;
        Ok(d)
    }

    /// Configured methods, optionally filtered by label.
    pub fn selected(&self, filter: Option<&str>) -> Result<Vec<Candidate>> {
        let all: Vec<Candidate> = match filter {
            None => self.methods.clone(),
            Some(f) => self.methods.iter().filter(|m| m.label() == f).cloned().collect(),
        };
        if all.is_empty() {
            let labels: Vec<String> = self.methods.iter().map(|m| m.label()).collect();
            return Err(Error::InvalidConfig(format!("no method selected (configured: {})", labels.join(", "))));
        }
        Ok(all)
    }

    /// Digest of the effective configuration; the output location is excluded.
    pub fn sha256(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(toml::to_string(&c).expect("config serializes").as_bytes()))
    }
}

/// Everything `train` writes, reloaded by the dependent commands.
pub struct TrainedArtifacts {
    pub params: ParamVector,
    pub checkpoints: CheckpointSet,
    pub trajectory: crate::training::TrajectoryRecord,
}

fn train_dir(out: &Path) -> PathBuf {
    out.join("train")
}

fn load_trained(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainedArtifacts> {
    let dir = train_dir(&cfg.out_dir);
    let missing = |what: &str| Error::MissingArtifact(format!("{what} not found in {}; run train first", dir.display()));
    let params = persist::load_checkpoint_set(&dir.join("final.ckpt")).map_err(|_| missing("final parameters"))?;
    let checkpoints = persist::load_checkpoint_set(&dir.join("checkpoints.ckpt")).map_err(|_| missing("checkpoints"))?;
    let trajectory = persist::load_trajectory(&dir.join("trajectory.traj")).map_err(|_| missing("trajectory"))?;
    let manifest = Manifest::load(&cfg.out_dir);
    if manifest.get("train", "dataset_sha256").as_deref() != Some(sha256_dataset(data).as_str()) {
        return Err(Error::MissingArtifact(
            "training artifacts were produced from different data; run train first".into(),
        ));
    }
    let params = params.last().map(|c| c.params.clone()).ok_or_else(|| missing("final parameters"))?;
    if params.len() != cfg.model.spec().param_count() {
        return Err(Error::MissingArtifact("stored parameters do not match the model; run train first".into()));
    }
    trajectory.validate(data.len())?;
    Ok(TrainedArtifacts {
        params,
        checkpoints,
        trajectory,
    })
}

/// `manifest.toml`: one table per command with the config hash and output digests.
struct Manifest {
    path: PathBuf,
    table: toml::Table,
}

impl Manifest {
    fn load(out: &Path) -> Self {
        let path = out.join("manifest.toml");
        let table = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| t.parse::<toml::Table>().ok())
            .unwrap_or_default();
        Manifest { path, table }
    }

    fn get(&self, section: &str, key: &str) -> Option<String> {
        self.table.get(section)?.get(key)?.as_str().map(str::to_owned)
    }

    fn record(&mut self, cmd: Command, cfg: &ExperimentConfig, extra: &[(&str, String)], files: &[PathBuf]) -> Result<()> {
        let mut t = toml::Table::new();
        t.insert("config_sha256".into(), cfg.sha256().into());
        t.insert("format_version".into(), i64::from(persist::VERSION).into());
        t.insert("crate_version".into(), env!("CARGO_PKG_VERSION").into());
        for (k, v) in extra {
            t.insert((*k).into(), v.clone().into());
        }
        let mut digests = toml::Table::new();
        for f in files {
            let bytes = std::fs::read(f)?;
            let rel = f.strip_prefix(&cfg.out_dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
            digests.insert(rel, hex::encode(Sha256::digest(&bytes)).into());
        }
        t.insert("outputs".into(), digests.into());
        self.table.insert(cmd.name().into(), t.into());
        std::fs::write(&self.path, toml::to_string(&self.table).expect("manifest serializes"))?;
        Ok(())
    }
}

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let Some(path) = cli.config.clone() else {
        eprintln!("error: --config is required");
        return EXIT_USAGE;
    };
    let mut cfg = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if let Some(s) = cli.seed {
        cfg.apply_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    let result = match cli.jobs {
        Some(j) => match rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, &cfg)),
            Err(e) => Err(Error::InvalidConfig(format!("thread pool: {e}"))),
        },
        None => dispatch(&cli, &cfg),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_)
                | Error::InvalidSpec(_)
                | Error::InvalidLabel { .. }
                | Error::Parse { .. }
                | Error::MissingArtifact(_)
                | Error::EmptyDataset => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> Result<i32> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let filter = cli.method.as_deref();
    match cli.command {
        Command::Train => cmd_train(cfg),
        Command::Explain => cmd_explain(cfg, filter),
        Command::Axioms => cmd_axioms(cfg, filter),
        Command::Evaluate => cmd_evaluate(cfg, filter, cli.jobs),
        Command::Oracle => cmd_oracle(cfg),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<i32> {
    let data = cfg.training_data()?;
    let spec = cfg.model.spec();
    let init = spec.init_params(cfg.model.init_seed);
    let out = train(&spec, &init, &data, &cfg.train, cfg.loss)?;
    let dir = train_dir(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    let last_step = out.trajectory.steps.last().map_or(0, |s| s.step);
    let final_set = CheckpointSet {
        checkpoints: vec![Checkpoint {
            step: last_step,
            params: out.params.clone(),
            lr: cfg.train.lr.at(last_step.max(1)),
        }],
    };
    let files = [dir.join("final.ckpt"), dir.join("checkpoints.ckpt"), dir.join("trajectory.traj"), dir.join("dataset.csv")];
    persist::save_checkpoint_set(&final_set, &files[0])?;
    persist::save_checkpoint_set(&out.checkpoints, &files[1])?;
    persist::save_trajectory(&out.trajectory, &files[2])?;
    data.save_csv(&files[3])?;
    let model = Model::new(spec, out.params)?;
    let loss = model.dataset_loss(&data, cfg.loss)?;
    println!(
        "trained {} steps on {} samples; final loss {loss:.6}; {} checkpoints",
        out.trajectory.steps.len(),
        data.len(),
        out.checkpoints.checkpoints.len()
    );
    let flipped = data.flipped.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    Manifest::load(&cfg.out_dir).record(
        Command::Train,
        cfg,
        &[("dataset_sha256", sha256_dataset(&data)), ("flipped_ids", flipped)],
        &files,
    )?;
    Ok(EXIT_OK)
}

fn attribution_methods(cfg: &ExperimentConfig, filter: Option<&str>) -> Result<Vec<MethodSpec>> {
    let methods: Vec<MethodSpec> = cfg
        .selected(filter)?
        .into_iter()
        .filter_map(|c| match c {
            Candidate::Method(m) => Some(m),
            Candidate::Random(_) => None,
        })
        .collect();
    if methods.is_empty() {
        return Err(Error::InvalidConfig("the random baseline has no attribution table".into()));
    }
    Ok(methods)
}

pub fn cmd_explain(cfg: &ExperimentConfig, filter: Option<&str>) -> Result<i32> {
    let data = cfg.training_data()?;
    let methods = attribution_methods(cfg, filter)?;
    let trained = load_trained(cfg, &data)?;
    let tests = cfg.test_data()?;
    let m = cfg.explain.num_test_points.min(tests.len());
    let tests = tests.subset(&(0..m).collect::<Vec<_>>());
    let spec = cfg.model.spec();
    let art = Artifacts {
        spec: &spec,
        params: &trained.params,
        loss: cfg.loss,
        train: &data,
        trajectory: Some(&trained.trajectory),
        checkpoints: Some(&trained.checkpoints),
    };
    let dir = cfg.out_dir.join("explain");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for method in &methods {
        let label = method.label();
        let table = crate::attribution::attribute(method, &art, &tests.features, &tests.ids)?;
        let path = dir.join(format!("{}.csv", file_stem(&label)));
        table.save(&path)?;
        files.push(path.clone());
        files.push(PathBuf::from(format!("{}.meta.toml", path.display())));
        if let Ok(alpha) = crate::attribution::global_importance(method, &art) {
            let ap = dir.join(format!("{}.alpha.csv", file_stem(&label)));
            std::fs::write(&ap, alpha.to_csv_string(&data.ids))?;
            files.push(ap);
        }
        let model = Model::new(spec.clone(), trained.params.clone())?;
        let residual = efficiency_residual(&table, &model, &tests.features)?;
        println!(
            "{label}: {} test point(s), max efficiency residual {:.3e}",
            tests.len(),
            residual.iter().fold(0.0_f64, |a, v| a.max(*v))
        );
    }
    Manifest::load(&cfg.out_dir).record(Command::Explain, cfg, &[], &files)?;
    Ok(EXIT_OK)
}

/// Whether a method's kernel is built from gradients of a ReLU network, where
/// attributions jump across activation boundaries.
fn has_kinks(method: &MethodSpec, spec: &ModelSpec) -> bool {
    spec.has_relu()
        && match method.canonical() {
            MethodSpec::Composed { kernel, .. } => matches!(kernel, KernelKind::Ntk | KernelKind::Influence(_)),
            _ => true,
        }
}

pub fn cmd_axioms(cfg: &ExperimentConfig, filter: Option<&str>) -> Result<i32> {
    let data = cfg.training_data()?;
    let methods = attribution_methods(cfg, filter)?;
    let trained = load_trained(cfg, &data)?;
    let tests = cfg.test_data()?;
    let spec = cfg.model.spec();
    let art = Artifacts {
        spec: &spec,
        params: &trained.params,
        loss: cfg.loss,
        train: &data,
        trajectory: Some(&trained.trajectory),
        checkpoints: Some(&trained.checkpoints),
    };
    let a = &cfg.axioms;
    let m = a.points.min(data.len());
    let probes = a.probes.min(tests.len());
    let mut points: Vec<Vec<f64>> = data.features[..m].to_vec();
    points.extend(tests.features[..probes].iter().cloned());
    let c = spec.output_dim;
    let model = Model::new(spec.clone(), trained.params.clone())?;

    let dir = cfg.out_dir.join("axioms");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut failed = false;
    for method in &methods {
        let label = method.label();
        let prepared = Prepared::new(method, &art)?;
        let scores = prepared.scores(&art, &points)?;
        let mut text = String::new();
        let mut reports = Vec::new();
        for k in 0..c {
            // Φ(i, j) = φ(xᵢ → xⱼ); extra[i][p] = φ(xᵢ → probe p).
            let phi = PhiMatrix::new(DMatrix::from_fn(m, m, |i, j| scores[j][i * c + k]))?;
            let extra: Vec<Vec<f64>> = (0..m).map(|i| (0..probes).map(|p| scores[m + p][i * c + k]).collect()).collect();
            let mut report = axioms::check_all(&format!("{label} output {k}"), &phi, &extra, &a.tolerances, a.irreducibility);
            if k == 0 {
                let x0 = tests.features.first().cloned().unwrap_or_else(|| data.features[0].clone());
                let f = |x: &[f64]| -> Result<Vec<f64>> {
                    Ok(prepared.scores(&art, &[x.to_vec()])?.remove(0))
                };
                let cont = axioms::check_continuity(f, &x0, a.continuity_directions, &a.continuity_deltas, cfg.train.seed, !has_kinks(method, &spec))?;
                report.entries.push(cont.entry);
                let table = crate::attribution::AttributionTable {
                    test_ids: tests.ids[..probes].to_vec(),
                    train_ids: data.ids.clone(),
                    output_dim: c,
                    scores: scores[m..].to_vec(),
                    metadata: crate::attribution::TableMetadata {
                        method: method.clone(),
                        loss: cfg.loss,
                        output_dim: c,
                        train_size: data.len(),
                        test_size: probes,
                        model_sha256: String::new(),
                        dataset_sha256: String::new(),
                    },
                };
                let residuals = efficiency_residual(&table, &model, &tests.features[..probes])?;
                report.entries.push(axioms::efficiency_entry(&residuals));
            }
            failed |= report.any_failed();
            text.push_str(&report.to_text());
            reports.push(report);
        }
        print!("{text}");
        let stem = file_stem(&label);
        let tp = dir.join(format!("{stem}.txt"));
        std::fs::write(&tp, &text)?;
        let toml_out = axioms::reports_to_toml(&reports);
        let rp = dir.join(format!("{stem}.toml"));
        std::fs::write(&rp, toml_out)?;
        files.push(tp);
        files.push(rp);
    }
    Manifest::load(&cfg.out_dir).record(Command::Axioms, cfg, &[], &files)?;
    Ok(if failed { EXIT_AXIOMS } else { EXIT_OK })
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, filter: Option<&str>, jobs: Option<usize>) -> Result<i32> {
    let e = cfg
        .eval
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("evaluate needs an [eval] section".into()))?;
    let data = cfg.training_data()?;
    let tests = cfg.test_data()?;
    let candidates = cfg.selected(filter)?;
    let comparison = run_comparison(&candidates, &data, &tests, &cfg.model.spec(), cfg.loss, &cfg.deletion(e), jobs)?;
    let dir = cfg.out_dir.join("eval");
    comparison.write(&dir)?;
    println!("{:<36} {:>12} {:>12} {:>6}", "method", "AUC-DEL", "ci95", "n");
    for o in &comparison.outcomes {
        match &o.result {
            Ok((_, a)) => println!("{:<36} {:>12.5} {:>12.5} {:>6}", a.method, a.mean, a.ci95, a.n),
            Err(err) => println!("{:<36} failed: {err}", o.method),
        }
    }
    let mut files = vec![dir.join("curves.csv"), dir.join("auc.csv"), dir.join("runs.csv")];
    if !comparison.failures().is_empty() {
        files.push(dir.join("failures.csv"));
    }
    Manifest::load(&cfg.out_dir).record(Command::Evaluate, cfg, &[], &files)?;
    Ok(if comparison.failures().is_empty() { EXIT_OK } else { EXIT_RUNTIME })
}

/// One oracle comparison: `(name, error, tolerance)`.
type OracleRow = (String, f64, f64);

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    crate::linalg::norm(&diff) / crate::linalg::norm(b).max(f64::MIN_POSITIVE)
}

/// Central finite-difference oracle: max relative error of the Jacobian and of
/// the loss gradient at the first few training points.
fn fd_rows(model: &Model, data: &Dataset, loss: LossKind, points: usize) -> Result<Vec<OracleRow>> {
    let p = model.param_count();
    let h = 1e-5;
    let mut jac_err = 0.0_f64;
    let mut grad_err = 0.0_f64;
    for i in 0..points.min(data.len()) {
        let x = &data.features[i];
        let jac = model.output_jacobian(x)?;
        let grad = model.loss_grad_params(x, data.labels[i], loss)?;
        let mut fd_jac = DMatrix::zeros(jac.nrows(), p);
        let mut fd_grad = vec![0.0; p];
        for j in 0..p {
            let mut plus = model.params().0.clone();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            let (mp, mm) = (model.with_params(plus.into())?, model.with_params(minus.into())?);
            let (fp, fm) = (mp.forward(x)?, mm.forward(x)?);
            for k in 0..fp.len() {
                fd_jac[(k, j)] = (fp[k] - fm[k]) / (2.0 * h);
            }
            let lp = crate::loss::loss(&fp, data.labels[i], loss)?;
            let lm = crate::loss::loss(&fm, data.labels[i], loss)?;
            fd_grad[j] = (lp - lm) / (2.0 * h);
        }
        jac_err = jac_err.max((&jac - &fd_jac).norm() / fd_jac.norm().max(1e-12));
        grad_err = grad_err.max(rel_err(&grad, &fd_grad));
    }
    Ok(vec![
        ("jacobian vs finite differences".into(), jac_err, 1e-6),
        ("loss gradient vs finite differences".into(), grad_err, 1e-6),
    ])
}

pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<i32> {
    let full = cfg.training_data()?;
    let spec = cfg.model.spec();
    let params = match load_trained(cfg, &full) {
        Ok(t) => t.params,
        Err(_) => spec.init_params(cfg.model.init_seed),
    };
    let model = Model::new(spec.clone(), params)?;
    let data = full.subset(&(0..full.len().min(50)).collect::<Vec<_>>());
    let mut rows: Vec<OracleRow> = Vec::new();

    // Iterative surrogate solve against the closed form, squared loss.
    let kernel = Kernel::new(KernelKind::LastLayer, &model, None)?;
    let gram = kernel.gram(&data)?;
    let targets: Vec<Vec<f64>> = data.features.iter().map(|x| model.forward(x)).collect::<Result<_>>()?;
    let scfg = SurrogateConfig::default();
    let iterative = surrogate_from_gram(&gram, &targets, LossKind::Squared, &scfg)?;
    let closed = surrogate_closed_form_squared(&gram, &targets, scfg.lambda)?;
    rows.push((
        "surrogate solve vs closed form".into(),
        rel_err(&iterative.flat(), &closed.concat()),
        1e-5,
    ));

    // Conjugate gradient against the explicit damped inverse.
    // MLP Hessian-vector products are finite differences; the solvers are
    // compared on the exactly-known output-layer block instead.
    let block = match spec.architecture {
        Architecture::Linear => None,
        Architecture::Mlp { .. } => Some(spec.last_layer_range()),
    };
    let op = HessianOperator::new(&model, &data, cfg.loss, 0.01, block)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.train.seed);
    let v: Vec<f64> = (0..op.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let cg = inverse_hvp(&op, &v, &InverseMethod::Cg { tol: 1e-12, max_iter: 5000 })?;
    let explicit = inverse_hvp(&op, &v, &InverseMethod::Explicit)?;
    rows.push(("CG inverse-HVP vs explicit inverse".into(), rel_err(&cg.solution, &explicit.solution), 1e-6));

    rows.extend(fd_rows(&model, &data, cfg.loss, 3)?);

    let mut text = String::new();
    let mut ok = true;
    for (name, err, tol) in &rows {
        let pass = *err <= *tol;
        ok &= pass;
        writeln!(text, "{:<4} {name:<40} error {err:.3e} (tolerance {tol:.0e})", if pass { "PASS" } else { "FAIL" }).unwrap();
    }
    print!("{text}");
    let path = cfg.out_dir.join("oracle.txt");
    std::fs::write(&path, &text)?;
    Manifest::load(&cfg.out_dir).record(Command::Oracle, cfg, &[], &[path])?;
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}
