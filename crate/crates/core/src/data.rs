//! Datasets, seeded synthetic generators and the numeric CSV format.
//!
//! CSV dialect: comma separated, `\n` line endings, header
//! `id,x0,…,x{d−1},label`, values written with 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub ids: Vec<u64>,
    /// Ids whose labels were flipped by a generator (ground truth for deletion runs).
    pub flipped: Vec<u64>,
    dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        let ids = (0..features.len() as u64).collect();
        Self::with_ids(features, labels, ids)
    }

    pub fn with_ids(features: Vec<Vec<f64>>, labels: Vec<f64>, ids: Vec<u64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::InvalidConfig("features must have at least one column".into()));
        }
        for row in &features {
            if row.len() != dim {
                return Err(Error::Dimension {
                    context: "dataset row",
                    expected: dim,
                    actual: row.len(),
                });
            }
            if !crate::linalg::all_finite(row) {
                return Err(Error::NonFinite("dataset features"));
            }
        }
        for (context, len) in [("dataset labels", labels.len()), ("dataset ids", ids.len())] {
            if len != features.len() {
                return Err(Error::Dimension {
                    context,
                    expected: features.len(),
                    actual: len,
                });
            }
        }
        Ok(Dataset {
            features,
            labels,
            ids,
            flipped: Vec::new(),
            dim,
        })
    }

    /// A dataset with no rows; only useful to exercise empty-input errors.
    pub fn empty(dim: usize) -> Self {
        Dataset {
            features: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            flipped: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn check_labels(&self, kind: LossKind, outputs: usize) -> Result<()> {
        kind.check_outputs(outputs)?;
        for (i, &y) in self.labels.iter().enumerate() {
            kind.check_label(y, outputs, i)?;
        }
        Ok(())
    }

    /// Rows at `indices`, keeping ids and flip metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let ids: Vec<u64> = indices.iter().map(|&i| self.ids[i]).collect();
        let flipped = self
            .flipped
            .iter()
            .copied()
            .filter(|id| ids.contains(id))
            .collect();
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids,
            flipped,
            dim: self.dim,
        }
    }

    /// Maps `±1` labels to class indices `{0, 1}` (`−1 → 0`).
    pub fn to_class_labels(&self) -> Dataset {
        let mut out = self.clone();
        out.labels = self.labels.iter().map(|&y| if y > 0.0 { 1.0 } else { 0.0 }).collect();
        out
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("id");
        for j in 0..self.dim {
            write!(s, ",x{j}").unwrap();
        }
        s.push_str(",label\n");
        for ((id, row), y) in self.ids.iter().zip(&self.features).zip(&self.labels) {
            write!(s, "{id}").unwrap();
            for v in row {
                write!(s, ",{v:.16e}").unwrap();
            }
            writeln!(s, ",{y:.16e}").unwrap();
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_csv_str(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let d = cols.len().saturating_sub(2);
        let valid = cols.len() >= 3
            && cols[0] == "id"
            && cols[cols.len() - 1] == "label"
            && cols[1..=d].iter().enumerate().all(|(j, c)| *c == format!("x{j}"));
        if !valid {
            return Err(Error::Parse {
                line: 1,
                message: "expected header `id,x0,...,x{d-1},label`".into(),
            });
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != d + 2 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} fields, found {}", d + 2, cells.len()),
                });
            }
            let id: u64 = cells[0].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid id `{}`", cells[0]),
            })?;
            let mut nums = Vec::with_capacity(d + 1);
            for cell in &cells[1..] {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("non-numeric cell `{cell}`"),
                })?;
                nums.push(v);
            }
            labels.push(nums.pop().unwrap());
            features.push(nums);
            ids.push(id);
        }
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Dataset::with_ids(features, labels, ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Class means at `±(separation/2)·u` with `u = 1/√d`, isotropic noise.
    TwoGaussians { separation: f64, noise: f64 },
    /// Interleaved half circles in the first two coordinates.
    TwoMoons { noise: f64 },
    /// Uniform on `[−1, 1]^d`, label `sign(x0·x1)`.
    XorGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    #[serde(default)]
    pub flip_fraction: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidConfig("n and d must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.flip_fraction) {
            return Err(Error::InvalidConfig("flip_fraction must lie in [0, 1)".into()));
        }
        match self.generator {
            Generator::TwoGaussians { separation, noise } => {
                if separation <= 0.0 || noise < 0.0 {
                    return Err(Error::InvalidConfig(
                        "two_gaussians needs separation > 0 and noise >= 0".into(),
                    ));
                }
            }
            Generator::TwoMoons { noise } if noise < 0.0 => {
                return Err(Error::InvalidConfig("noise must be >= 0".into()));
            }
            Generator::TwoMoons { .. } | Generator::XorGrid if self.d < 2 => {
                return Err(Error::InvalidConfig("this generator needs d >= 2".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Draws a labelled dataset (`±1` labels); deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed);
    let (n, d) = (spec.n, spec.d);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        let mut x = vec![0.0; d];
        match spec.generator {
            Generator::TwoGaussians { separation, noise } => {
                let shift = y * separation / 2.0 / (d as f64).sqrt();
                for v in &mut x {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = shift + noise * z;
                }
            }
            Generator::TwoMoons { noise } => {
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                if y > 0.0 {
                    x[0] = t.cos();
                    x[1] = t.sin();
                } else {
                    x[0] = 1.0 - t.cos();
                    x[1] = 0.5 - t.sin();
                }
                for v in &mut x {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += noise * z;
                }
            }
            Generator::XorGrid => {
                for v in &mut x {
                    *v = rng.random_range(-1.0..1.0);
                }
                // rejection-free relabel keeps the class balance of the quadrants
                if (x[0] * x[1] > 0.0) != (y > 0.0) {
                    x[0] = -x[0];
                }
            }
        }
        features.push(x);
        labels.push(y);
    }
    let mut data = Dataset::new(features, labels)?;
    let flips = (spec.flip_fraction * n as f64).round() as usize;
    if flips > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        crate::training::shuffle(&mut order, &mut rng);
        let mut flipped: Vec<u64> = order[..flips].iter().map(|&i| i as u64).collect();
        flipped.sort_unstable();
        for &i in &flipped {
            data.labels[i as usize] = -data.labels[i as usize];
        }
        data.flipped = flipped;
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(flip: f64) -> SyntheticSpec {
        SyntheticSpec {
            generator: Generator::TwoGaussians {
                separation: 4.0,
                noise: 0.5,
            },
            n: 40,
            d: 3,
            seed: 11,
            flip_fraction: flip,
        }
    }

    #[test]
    fn no_flips_without_flip_fraction() {
        assert!(generate(&spec(0.0)).unwrap().flipped.is_empty());
        let flipped = generate(&spec(0.1)).unwrap();
        assert_eq!(flipped.flipped.len(), 4);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(0.1)).unwrap();
        let b = generate(&spec(0.1)).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        assert_eq!(a.flipped, b.flipped);
    }

    #[test]
    fn flipped_labels_are_inverted() {
        let clean = generate(&spec(0.0)).unwrap();
        let noisy = generate(&spec(0.1)).unwrap();
        assert_eq!(clean.features, noisy.features);
        for i in 0..clean.len() {
            let flipped = noisy.flipped.contains(&(i as u64));
            assert_eq!(clean.labels[i] != noisy.labels[i], flipped);
        }
    }

    #[test]
    fn other_generators_produce_valid_data() {
        for generator in [Generator::TwoMoons { noise: 0.1 }, Generator::XorGrid] {
            let s = SyntheticSpec {
                generator,
                n: 30,
                d: 2,
                seed: 3,
                flip_fraction: 0.0,
            };
            let data = generate(&s).unwrap();
            assert_eq!(data.len(), 30);
            assert!(data.labels.iter().all(|&y| y == 1.0 || y == -1.0));
        }
        let xor = generate(&SyntheticSpec {
            generator: Generator::XorGrid,
            n: 50,
            d: 3,
            seed: 1,
            flip_fraction: 0.0,
        })
        .unwrap();
        for (x, y) in xor.features.iter().zip(&xor.labels) {
            assert_eq!(x[0] * x[1] > 0.0, *y > 0.0);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0.0);
        s.flip_fraction = 1.0;
        assert!(generate(&s).is_err());
        s.flip_fraction = 0.0;
        s.generator = Generator::TwoGaussians {
            separation: 0.0,
            noise: 1.0,
        };
        assert!(generate(&s).is_err());
        s.generator = Generator::XorGrid;
        s.d = 1;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn csv_single_row() {
        let d = Dataset::from_csv_str("id,x0,x1,label\n7,1.5,-2,1\n").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.ids, vec![7]);
        assert_eq!(d.features[0], vec![1.5, -2.0]);
        assert_eq!(d.labels, vec![1.0]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        assert!(matches!(
            Dataset::from_csv_str("1,2.0,3\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Dataset::from_csv_str("id,x0,label\n0,1.0,1\n1,2.0\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            Dataset::from_csv_str("id,x0,label\n0,abc,1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_file_round_trip() {
        let data = generate(&spec(0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.save_csv(&path).unwrap();
        let back = Dataset::load_csv(&path).unwrap();
        assert_eq!(back.features, data.features);
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.ids, data.ids);
    }

    #[test]
    fn linear_model_separates_two_gaussians() {
        use crate::model::{Model, ModelSpec};
        use crate::training::{train, LrSchedule, TrainConfig};
        let s = SyntheticSpec {
            generator: Generator::TwoGaussians {
                separation: 4.0,
                noise: 0.5,
            },
            n: 400,
            d: 10,
            seed: 2,
            flip_fraction: 0.0,
        };
        let data = generate(&s).unwrap();
        let spec = ModelSpec::linear(10, 1);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 32,
            lr: LrSchedule::Constant(0.5),
            seed: 1,
            checkpoint_count: 2,
        };
        let out = train(&spec, &spec.init_params(0), &data, &cfg, LossKind::Logistic).unwrap();
        let model = Model::new(spec, out.params).unwrap();
        let correct = data
            .features
            .iter()
            .zip(&data.labels)
            .filter(|(x, y)| model.forward(x).unwrap()[0] * **y > 0.0)
            .count();
        assert!(correct as f64 / 400.0 > 0.95, "accuracy {correct}/400");
    }
}
