use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};

use super::FlError;
use crate::scalar::Scalar;

/// Labelled rows for binary classification, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    features: Vec<S>,
    labels: Vec<u8>,
    dim: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(rows: Vec<Vec<S>>, labels: Vec<u8>) -> Result<Self, FlError> {
        if rows.is_empty() {
            return Err(FlError::InvalidInput("dataset has no rows".into()));
        }
        if rows.len() != labels.len() {
            return Err(FlError::InvalidInput(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        let dim = rows[0].len();
        let mut features = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != dim {
                return Err(FlError::InvalidInput(format!("row {i} has {} features, expected {dim}", r.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(FlError::InvalidInput(format!("row {i} has a non-finite feature")));
            }
            features.extend(r);
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(FlError::InvalidInput(format!("row {i} label is not 0 or 1")));
        }
        Ok(Self { features, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature count, excluding the bias.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Rows in the order given by `idx`.
    pub fn select(&self, idx: &[usize]) -> Result<Self, FlError> {
        Self::new(idx.iter().map(|&i| self.row(i).to_vec()).collect(), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Concatenation of `parts`, which must share a dimension.
    pub fn concat(parts: &[&Self]) -> Result<Self, FlError> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            for i in 0..p.len() {
                rows.push(p.row(i).to_vec());
                labels.push(p.label(i));
            }
        }
        Self::new(rows, labels)
    }

    /// Parses CSV text: a header row, `d` feature columns, then a 0/1 label.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, FlError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let width = rdr.headers().map_err(|e| FlError::Csv(e.to_string()))?.len();
        if width < 2 {
            return Err(FlError::Csv("need at least one feature column and a label column".into()));
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| FlError::Csv(e.to_string()))?;
            let parse = |j: usize| -> Result<f64, FlError> {
                rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| FlError::Csv(format!("row {}: column {} is not a number", i + 1, j + 1)))
            };
            let mut row = Vec::with_capacity(width - 1);
            for j in 0..width - 1 {
                row.push(S::of(parse(j)?));
            }
            let y = parse(width - 1)?;
            let label = if y == 0.0 {
                0
            } else if y == 1.0 {
                1
            } else {
                return Err(FlError::Csv(format!("row {}: label must be 0 or 1", i + 1)));
            };
            rows.push(row);
            labels.push(label);
        }
        Self::new(rows, labels)
    }

    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self, FlError> {
        Self::from_csv(bytes)
    }

    pub fn load(path: &Path) -> Result<Self, FlError> {
        let f = std::fs::File::open(path).map_err(|e| FlError::Csv(format!("{}: {e}", path.display())))?;
        Self::from_csv(f)
    }

    /// Serializes with shortest round-trip float formatting, so
    /// `from_csv(to_csv_bytes())` reproduces the dataset exactly.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).expect("writing to a Vec cannot fail");
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{}", v.as_f64())).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).expect("writing to a Vec cannot fail");
        }
        w.into_inner().expect("flushing a Vec cannot fail")
    }
}

/// Two Gaussian classes with unit variance and means at `±separation / 2`
/// along every axis. Labels are fair coin flips.
pub fn gaussian_classes<S: Scalar>(n: usize, dim: usize, separation: f64, seed: u64) -> Dataset<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coin = Bernoulli::new(0.5).unwrap();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let half = separation / 2.0;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = coin.sample(&mut rng);
        let mu = if y { half } else { -half };
        rows.push((0..dim).map(|_| S::of(mu + noise.sample(&mut rng))).collect());
        labels.push(y as u8);
    }
    Dataset::new(rows, labels).expect("generated rows are consistent")
}
