use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
loss = "logistic"

[dataset]
source = "synthetic"
n = 30
d = 3
seed = 5
flip_fraction = 0.1
generator = { kind = "two_gaussians", separation = 3.0, noise = 1.0 }

[model]
architecture = { mlp = { hidden = [4], activation = "tanh" } }
input_dim = 3
output_dim = 1
init_seed = 2

[train]
epochs = 5
batch_size = 10
lr = 0.2
seed = 3
checkpoint_count = 3

[[methods]]
method = "composed"
importance = "tracking"
kernel = { kind = "ntk" }

[[methods]]
method = "tracincp"
checkpoints = 3

[[methods]]
method = "random"

[axioms]
points = 6
probes = 2

[eval]
k_fractions = [0.0, 0.1, 0.2]
num_seeds = 2
num_test_points = 2
"#;

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), format!("{CONFIG}{extra}")).unwrap();
    dir
}

fn genrep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genrep"))
        .args(args)
        .arg("--config")
        .arg(dir.join("exp.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn explain_requires_train() {
    let dir = setup("");
    let o = genrep(dir.path(), &["explain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run train first"), "{}", stderr(&o));
}

#[test]
fn train_then_explain_tracincp() {
    let dir = setup("");
    let o = genrep(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = genrep(dir.path(), &["explain", "--method", "tracincp"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("explain/tracincp.csv").is_file());
    let manifest = std::fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("config_sha256"));
}

#[test]
fn axioms_pass_for_composed_method() {
    let dir = setup("");
    assert_eq!(genrep(dir.path(), &["train"]).status.code(), Some(0));
    let o = genrep(dir.path(), &["axioms", "--method", "tracking-ntk-final"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("out/axioms/tracking-ntk-final.txt")).unwrap();
    assert!(!report.is_empty());
}

#[test]
fn random_baseline_is_centred() {
    let dir = setup("");
    assert_eq!(genrep(dir.path(), &["train"]).status.code(), Some(0));
    let o = genrep(dir.path(), &["evaluate", "--method", "random"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let auc = std::fs::read_to_string(dir.path().join("out/eval/auc.csv")).unwrap();
    let row: Vec<&str> = auc.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "random");
    let (mean, ci): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
    assert!(mean.abs() <= ci + 1e-12, "mean {mean}, ci {ci}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = setup("\nbogus = 1\n");
    let o = genrep(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_suite_passes() {
    let dir = setup("");
    let o = genrep(dir.path(), &["oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
