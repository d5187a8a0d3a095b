//! Synthetic pretrain/finetune benchmark.
//!
//! The downstream task is a class-conditional Gaussian mixture with
//! `clusters_per_class` isotropic clusters per class. The pretext set draws
//! from the same mixture, applies one of `num_transforms` fixed orthogonal
//! maps and labels each sample with the index of the map it received.
//! Transform 0 is the identity; the others are random rotations/reflections.
//!
//! Every split draws from its own named RNG stream, so splits are disjoint
//! samples and changing one split's size leaves the others untouched.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{check_labels, LabeledBatch};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub pretrain_samples: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub probe_samples: usize,
    pub cluster_stddev: f64,
    /// Stddev of each cluster-center coordinate.
    pub center_spread: f64,
    pub num_transforms: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_classes: 5,
            clusters_per_class: 2,
            pretrain_samples: 2000,
            train_samples: 500,
            test_samples: 500,
            probe_samples: 200,
            cluster_stddev: 0.6,
            center_spread: 1.0,
            num_transforms: 4,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("clusters_per_class", self.clusters_per_class),
            ("pretrain_samples", self.pretrain_samples),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("probe_samples", self.probe_samples),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::param(format!("{name} must be at least 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::param(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.num_transforms < 2 {
            return Err(Error::param(format!(
                "num_transforms must be at least 2, got {}",
                self.num_transforms
            )));
        }
        for (name, v) in [
            ("cluster_stddev", self.cluster_stddev),
            ("center_spread", self.center_spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Flat key/value form, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("classes", self.num_classes.to_string()),
            ("clusters_per_class", self.clusters_per_class.to_string()),
            ("pretrain_samples", self.pretrain_samples.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("test_samples", self.test_samples.to_string()),
            ("probe_samples", self.probe_samples.to_string()),
            ("cluster_stddev", self.cluster_stddev.to_string()),
            ("center_spread", self.center_spread.to_string()),
            ("transforms", self.num_transforms.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Inverse of [`BenchmarkSpec::to_pairs`]; `get` looks a key up.
    pub fn from_lookup<'a>(get: impl Fn(&str) -> Option<&'a str>) -> Result<Self> {
        fn parse<T: std::str::FromStr>(key: &str, v: Option<&str>) -> Result<T> {
            let v = v.ok_or_else(|| Error::field(key, "missing"))?;
            v.trim()
                .parse()
                .map_err(|_| Error::field(key, format!("cannot parse {v:?}")))
        }
        let spec = Self {
            input_dim: parse("input_dim", get("input_dim"))?,
            num_classes: parse("classes", get("classes"))?,
            clusters_per_class: parse("clusters_per_class", get("clusters_per_class"))?,
            pretrain_samples: parse("pretrain_samples", get("pretrain_samples"))?,
            train_samples: parse("train_samples", get("train_samples"))?,
            test_samples: parse("test_samples", get("test_samples"))?,
            probe_samples: parse("probe_samples", get("probe_samples"))?,
            cluster_stddev: parse("cluster_stddev", get("cluster_stddev"))?,
            center_spread: parse("center_spread", get("center_spread"))?,
            num_transforms: parse("transforms", get("transforms"))?,
            seed: parse("seed", get("seed"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Inputs with class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Shape {
                op: "labeled set",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if num_classes < 2 {
            return Err(Error::param(format!(
                "labeled set needs at least 2 classes, got {num_classes}"
            )));
        }
        check_labels(&labels, inputs.rows(), num_classes)?;
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let inputs = self.inputs.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledBatch::new(inputs, labels)
    }

    pub fn as_batch(&self) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferBenchmark {
    pub spec: BenchmarkSpec,
    /// Labels are transform indices in `[0, num_transforms)`.
    pub pretext: LabeledSet,
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub probe: Tensor,
}

/// Random orthogonal matrix: Gram–Schmidt on the columns of a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for q in &cols {
            let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // a draw in the span of earlier columns is discarded and redrawn
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut data = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            data[i * n + j] = x;
        }
    }
    Tensor::new(vec![n, n], data).expect("square matrix")
}

struct Mixture {
    centers: Vec<Vec<f64>>,
    clusters_per_class: usize,
    stddev: f64,
}

impl Mixture {
    fn sample(&self, cluster: usize, rng: &mut Rng) -> impl Iterator<Item = f64> + '_ {
        let stddev = self.stddev;
        let noise: Vec<f64> = (0..self.centers[cluster].len())
            .map(|_| rng.normal())
            .collect();
        self.centers[cluster]
            .iter()
            .zip(noise)
            .map(move |(&c, z)| c + stddev * z)
    }

    /// Round-robin classes; within a class, round-robin clusters.
    fn labeled(&self, n: usize, num_classes: usize, rng: &mut Rng) -> Result<LabeledSet> {
        let mut data = Vec::with_capacity(n * self.centers[0].len());
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % num_classes;
            let cluster =
                class * self.clusters_per_class + (i / num_classes) % self.clusters_per_class;
            data.extend(self.sample(cluster, rng));
            labels.push(class);
        }
        LabeledSet::new(
            Tensor::new(vec![n, self.centers[0].len()], data)?,
            labels,
            num_classes,
        )
    }
}

pub fn make_transfer_benchmark(spec: &BenchmarkSpec) -> Result<TransferBenchmark> {
    spec.validate()?;
    let d = spec.input_dim;
    let num_clusters = spec.num_classes * spec.clusters_per_class;

    let mut center_rng = Rng::stream(spec.seed, "bench/centers", 0);
    let centers = (0..num_clusters)
        .map(|_| {
            (0..d)
                .map(|_| spec.center_spread * center_rng.normal())
                .collect()
        })
        .collect();
    let mixture = Mixture {
        centers,
        clusters_per_class: spec.clusters_per_class,
        stddev: spec.cluster_stddev,
    };

    let mut transform_rng = Rng::stream(spec.seed, "bench/transforms", 0);
    let transforms: Vec<Tensor> = std::iter::once(Tensor::identity(d))
        .chain((1..spec.num_transforms).map(|_| random_orthogonal(d, &mut transform_rng)))
        .collect();

    let mut pretext_rng = Rng::stream(spec.seed, "bench/pretext", 0);
    let mut pretext_data = Vec::with_capacity(spec.pretrain_samples * d);
    let mut pretext_labels = Vec::with_capacity(spec.pretrain_samples);
    for i in 0..spec.pretrain_samples {
        let r = i % spec.num_transforms;
        let cluster = pretext_rng.below(num_clusters);
        let x: Vec<f64> = mixture.sample(cluster, &mut pretext_rng).collect();
        let q = &transforms[r];
        pretext_data
            .extend((0..d).map(|row| q.row(row).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()));
        pretext_labels.push(r);
    }
    let pretext = LabeledSet::new(
        Tensor::new(vec![spec.pretrain_samples, d], pretext_data)?,
        pretext_labels,
        spec.num_transforms,
    )?;

    let train = mixture.labeled(
        spec.train_samples,
        spec.num_classes,
        &mut Rng::stream(spec.seed, "bench/train", 0),
    )?;
    let test = mixture.labeled(
        spec.test_samples,
        spec.num_classes,
        &mut Rng::stream(spec.seed, "bench/test", 0),
    )?;
    let probe = mixture
        .labeled(
            spec.probe_samples,
            spec.num_classes,
            &mut Rng::stream(spec.seed, "bench/probe", 0),
        )?
        .inputs;

    Ok(TransferBenchmark {
        spec: spec.clone(),
        pretext,
        train,
        test,
        probe,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            offset,
            field: None,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

fn header(dim: usize, labeled: bool) -> Vec<String> {
    let mut h: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    if labeled {
        h.push("label".to_string());
    }
    h
}

fn write_rows(path: &Path, inputs: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header(inputs.cols(), labels.is_some()))
        .map_err(|e| csv_error(path, e))?;
    for i in 0..inputs.rows() {
        // `{}` on f64 is the shortest representation that parses back exactly
        let mut record: Vec<String> = inputs.row(i).iter().map(|x| x.to_string()).collect();
        if let Some(labels) = labels {
            record.push(labels[i].to_string());
        }
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `x0..x{d-1},label` rows with full float precision.
pub fn write_labeled_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    write_rows(path, &set.inputs, Some(&set.labels))
}

/// Writes `x0..x{d-1}` rows with full float precision.
pub fn write_unlabeled_csv(path: &Path, inputs: &Tensor) -> Result<()> {
    write_rows(path, inputs, None)
}

fn read_rows(path: &Path, labeled: bool) -> Result<(Tensor, Vec<usize>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let width = headers.len();
    let dim = if labeled {
        width.saturating_sub(1)
    } else {
        width
    };
    if dim == 0
        || headers
            .iter()
            .ne(header(dim, labeled).iter().map(String::as_str))
    {
        return Err(Error::field(
            "header",
            format!("{}: unexpected header {:?}", path.display(), headers),
        ));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let offset = record.position().map(|p| p.byte() as usize);
        let bad = |col: &str, v: &str| Error::Format {
            offset,
            field: Some(col.to_string()),
            message: format!("{}: cannot parse {v:?}", path.display()),
        };
        for (j, v) in record.iter().take(dim).enumerate() {
            let x: f64 = v.parse().map_err(|_| bad(&format!("x{j}"), v))?;
            if !x.is_finite() {
                return Err(bad(&format!("x{j}"), v));
            }
            data.push(x);
        }
        if labeled {
            let v = &record[dim];
            labels.push(v.parse().map_err(|_| bad("label", v))?);
        }
    }
    if labels.is_empty() && data.is_empty() {
        return Err(Error::field(
            "rows",
            format!("{}: no data rows", path.display()),
        ));
    }
    let n = data.len() / dim;
    Ok((Tensor::new(vec![n, dim], data)?, labels))
}

pub fn read_labeled_csv(path: &Path, num_classes: usize) -> Result<LabeledSet> {
    let (inputs, labels) = read_rows(path, true)?;
    LabeledSet::new(inputs, labels, num_classes)
}

pub fn read_unlabeled_csv(path: &Path) -> Result<Tensor> {
    Ok(read_rows(path, false)?.0)
}

pub const PRETEXT_FILE: &str = "pretext.csv";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const PROBE_FILE: &str = "probe.csv";

impl TransferBenchmark {
    /// Writes the four splits into `dir` (which must exist).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        write_labeled_csv(&dir.join(PRETEXT_FILE), &self.pretext)?;
        write_labeled_csv(&dir.join(TRAIN_FILE), &self.train)?;
        write_labeled_csv(&dir.join(TEST_FILE), &self.test)?;
        write_unlabeled_csv(&dir.join(PROBE_FILE), &self.probe)
    }

    pub fn read_dir(dir: &Path, spec: BenchmarkSpec) -> Result<Self> {
        let bench = Self {
            pretext: read_labeled_csv(&dir.join(PRETEXT_FILE), spec.num_transforms)?,
            train: read_labeled_csv(&dir.join(TRAIN_FILE), spec.num_classes)?,
            test: read_labeled_csv(&dir.join(TEST_FILE), spec.num_classes)?,
            probe: read_unlabeled_csv(&dir.join(PROBE_FILE))?,
            spec,
        };
        for (name, dim) in [
            ("pretext", bench.pretext.input_dim()),
            ("train", bench.train.input_dim()),
            ("test", bench.test.input_dim()),
            ("probe", bench.probe.cols()),
        ] {
            if dim != bench.spec.input_dim {
                return Err(Error::field(
                    name,
                    format!("input width {dim}, manifest says {}", bench.spec.input_dim),
                ));
            }
        }
        Ok(bench)
    }
}
