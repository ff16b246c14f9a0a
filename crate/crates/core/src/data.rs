//! CSV ingestion, min-max plus norm scaling, vertical partitioning, seeded
//! train/test splits and a synthetic generator for small oracle fixtures.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, streams, Matrix, RandomSource};

/// Fraction of rows held out for evaluation.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// A parsed CSV: numeric features plus a label column mapped to class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub source: PathBuf,
    pub feature_names: Vec<String>,
    pub features: Matrix,
    pub label_column: String,
    /// Distinct raw label values in ascending order; class `c` is `label_values[c]`.
    pub label_values: Vec<f64>,
    pub labels: Vec<usize>,
}

impl RawTable {
    pub fn row_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_count(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.label_values.len()
    }
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<RawTable> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Csv {
                path: shown.clone(),
                line: 1,
                message: format!("{other:?}"),
            },
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(&shown, &e))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn {
            column: label_column.to_string(),
            available: headers.clone(),
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&shown, &e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (i, cell) in record.iter().enumerate() {
            let parsed: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::NonNumeric {
                    path: shown.clone(),
                    line,
                    column: headers[i].clone(),
                    value: cell.to_string(),
                })?;
            if i == label_idx {
                raw_labels.push(parsed);
            } else {
                values.push(parsed);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::EmptyInput("CSV has a header but no data rows"));
    }

    let mut label_values = raw_labels.clone();
    label_values.sort_by(f64::total_cmp);
    label_values.dedup();
    let labels = raw_labels
        .iter()
        .map(|v| label_values.iter().position(|u| u == v).expect("present"))
        .collect();
    let features = Matrix::from_vec(raw_labels.len(), feature_names.len(), values)?;
    log::info!(
        "loaded {}: {} rows, {} features, {} classes",
        shown,
        features.rows(),
        features.cols(),
        label_values.len()
    );
    Ok(RawTable {
        source: path.to_path_buf(),
        feature_names,
        features,
        label_column: label_column.to_string(),
        label_values,
        labels,
    })
}

fn csv_error(path: &str, e: &csv::Error) -> Error {
    Error::Csv {
        path: path.to_string(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Per-feature min-max scaling followed by one global norm divisor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub shift: Vec<f64>,
    /// Range of each feature; constant features keep a range of 1.
    pub scale: Vec<f64>,
    pub norm_divisor: f64,
}

impl ScalingRecord {
    /// Fits min-max ranges and the divisor that bounds every row norm by one.
    pub fn fit(features: &Matrix) -> Self {
        let (n, d) = features.shape();
        let mut shift = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for r in 0..n {
            for (j, &v) in features.row(r).iter().enumerate() {
                shift[j] = shift[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let scale: Vec<f64> = shift
            .iter()
            .zip(&hi)
            .map(|(lo, hi)| if hi > lo { hi - lo } else { 1.0 })
            .collect();
        let mut record = Self {
            shift,
            scale,
            norm_divisor: 1.0,
        };
        let scaled = record.apply(features);
        let max_norm = (0..n).map(|r| norm(scaled.row(r))).fold(0.0, f64::max);
        if max_norm > 0.0 {
            record.norm_divisor = max_norm;
        }
        record
    }

    /// Scaling that only divides by the largest row norm.
    pub fn norm_only(features: &Matrix) -> Self {
        let d = features.cols();
        let max_norm = (0..features.rows())
            .map(|r| norm(features.row(r)))
            .fold(0.0, f64::max);
        Self {
            shift: vec![0.0; d],
            scale: vec![1.0; d],
            norm_divisor: if max_norm > 0.0 { max_norm } else { 1.0 },
        }
    }

    pub fn apply(&self, raw: &Matrix) -> Matrix {
        let mut out = raw.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.shift[j]) / self.scale[j] / self.norm_divisor;
            }
        }
        out
    }

    pub fn invert(&self, scaled: &Matrix) -> Matrix {
        let mut out = scaled.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.norm_divisor * self.scale[j] + self.shift[j];
            }
        }
        out
    }
}

/// Rows of one split, partitioned by client, with a per-row loss weight.
///
/// Removed samples stay in place with weight zero so row indices remain stable.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedData {
    pub blocks: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub targets: Matrix,
    pub weights: Vec<f64>,
    pub class_count: usize,
}

impl PartitionedData {
    pub fn new(blocks: Vec<Matrix>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = labels.len();
        if blocks.is_empty() {
            return Err(Error::EmptyInput("no client blocks"));
        }
        if let Some(b) = blocks.iter().find(|b| b.rows() != n) {
            return Err(Error::ShapeMismatch {
                op: "PartitionedData::new",
                left: b.shape(),
                right: (n, 1),
            });
        }
        if class_count < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= class_count) {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: bad,
                len: class_count,
            });
        }
        Ok(Self {
            targets: one_hot(&labels, class_count),
            weights: vec![1.0; n],
            blocks,
            labels,
            class_count,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn client_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(Matrix::cols).collect()
    }

    /// Effective sample count: the sum of loss weights.
    pub fn n_eff(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// All client blocks side by side.
    pub fn concatenated(&self) -> Matrix {
        let refs: Vec<&Matrix> = self.blocks.iter().collect();
        Matrix::hconcat(&refs).expect("blocks share row count")
    }

    /// Full feature vector of row `s` across clients.
    pub fn sample(&self, s: usize) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.row(s).to_vec()).collect()
    }
}

pub fn one_hot(labels: &[usize], class_count: usize) -> Matrix {
    let mut y = Matrix::zeros(labels.len(), class_count);
    for (r, &c) in labels.iter().enumerate() {
        y.set(r, c, 1.0);
    }
    y
}

/// A vertically partitioned dataset with its train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    pub feature_names: Vec<String>,
    /// Scaled feature blocks over all rows, one per client.
    pub blocks: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub scaling: ScalingRecord,
    pub seed: u64,
}

impl VerticalDataset {
    pub fn row_count(&self) -> usize {
        self.labels.len()
    }

    pub fn client_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn client_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(Matrix::cols).collect()
    }

    /// Owner client of every global feature index.
    pub fn feature_assignment(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(k, b)| std::iter::repeat_n(k, b.cols()))
            .collect()
    }

    fn subset(&self, rows: &[usize]) -> Result<PartitionedData> {
        PartitionedData::new(
            self.blocks.iter().map(|b| b.select_rows(rows)).collect(),
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.class_count,
        )
    }

    pub fn train(&self) -> Result<PartitionedData> {
        self.subset(&self.train_rows)
    }

    pub fn test(&self) -> Result<PartitionedData> {
        self.subset(&self.test_rows)
    }

    pub fn manifest(&self, source: &str, label_column: &str) -> DatasetManifest {
        DatasetManifest {
            source: source.to_string(),
            label_column: label_column.to_string(),
            rows: self.row_count(),
            feature_names: self.feature_names.clone(),
            client_widths: self.client_widths(),
            class_count: self.class_count,
            seed: self.seed,
            train_rows: self.train_rows.clone(),
            test_rows: self.test_rows.clone(),
            scaling: self.scaling.clone(),
        }
    }
}

/// Everything needed to rebuild a [`VerticalDataset`] from its source CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub label_column: String,
    pub rows: usize,
    pub feature_names: Vec<String>,
    pub client_widths: Vec<usize>,
    pub class_count: usize,
    pub seed: u64,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub scaling: ScalingRecord,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn split_rows(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RandomSource::new(seed, streams::SPLIT).shuffle(&mut order);
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

fn split_columns(features: &Matrix, widths: &[usize]) -> Vec<Matrix> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let cols: Vec<usize> = (start..start + w).collect();
            start += w;
            features.select_cols(&cols)
        })
        .collect()
}

fn check_widths(widths: &[usize], total: usize) -> Result<()> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::invalid("every client needs at least one feature"));
    }
    let sum: usize = widths.iter().sum();
    if sum != total {
        return Err(Error::invalid(format!(
            "client feature counts sum to {sum}, table has {total} features"
        )));
    }
    Ok(())
}

/// Scales every feature to [0, 1], bounds row norms by one, cuts contiguous
/// client blocks and draws an 80/20 split.
pub fn normalize_and_partition(
    table: &RawTable,
    client_feature_counts: &[usize],
    seed: u64,
) -> Result<VerticalDataset> {
    check_widths(client_feature_counts, table.feature_count())?;
    let scaling = ScalingRecord::fit(&table.features);
    let scaled = scaling.apply(&table.features);
    let (train_rows, test_rows) = split_rows(table.row_count(), DEFAULT_TEST_FRACTION, seed)?;
    Ok(VerticalDataset {
        feature_names: table.feature_names.clone(),
        blocks: split_columns(&scaled, client_feature_counts),
        labels: table.labels.clone(),
        class_count: table.class_count(),
        train_rows,
        test_rows,
        scaling,
        seed,
    })
}

/// Parameters of [`synthesize`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub client_widths: Vec<usize>,
    pub class_count: usize,
    /// Logit multiplier of the labeling model; infinity gives noiseless argmax labels.
    pub margin: f64,
    pub test_fraction: f64,
}

impl SyntheticSpec {
    pub fn new(n: usize, client_widths: Vec<usize>, class_count: usize) -> Self {
        Self {
            n,
            client_widths,
            class_count,
            margin: f64::INFINITY,
            test_fraction: DEFAULT_TEST_FRACTION,
        }
    }

    pub fn margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn test_fraction(mut self, fraction: f64) -> Self {
        self.test_fraction = fraction;
        self
    }
}

/// Gaussian features with labels drawn from a random linear teacher.
pub fn synthesize(spec: &SyntheticSpec, seed: u64) -> Result<VerticalDataset> {
    if spec.n < 2 || spec.client_widths.len() < 2 {
        return Err(Error::invalid(
            "synthesize needs n >= 2 and at least two clients",
        ));
    }
    if spec.class_count < 2 || !(spec.margin > 0.0) {
        return Err(Error::invalid(
            "synthesize needs class_count >= 2 and margin > 0",
        ));
    }
    let d: usize = spec.client_widths.iter().sum();
    check_widths(&spec.client_widths, d)?;
    let mut rng = RandomSource::new(seed, streams::SYNTHETIC);
    let x: Vec<f64> = (0..spec.n * d).map(|_| rng.standard_normal()).collect();
    let x = Matrix::from_vec(spec.n, d, x)?;
    let teacher: Vec<f64> = (0..d * spec.class_count)
        .map(|_| rng.standard_normal())
        .collect();
    let teacher = Matrix::from_vec(d, spec.class_count, teacher)?;
    let logits = x.matmul(&teacher)?;

    let labels = (0..spec.n)
        .map(|r| {
            if spec.margin.is_infinite() {
                return logits.row_argmax(r);
            }
            let scaled = Matrix::from_vec(
                1,
                spec.class_count,
                logits.row(r).iter().map(|v| v * spec.margin).collect(),
            )
            .expect("finite logits");
            let p = crate::numerics::softmax_rows(&scaled);
            let u = rng.uniform(0.0, 1.0);
            let mut acc = 0.0;
            for (c, &pc) in p.row(0).iter().enumerate() {
                acc += pc;
                if u < acc {
                    return c;
                }
            }
            spec.class_count - 1
        })
        .collect();

    let scaling = ScalingRecord::norm_only(&x);
    let scaled = scaling.apply(&x);
    let (train_rows, test_rows) = split_rows(spec.n, spec.test_fraction, seed)?;
    Ok(VerticalDataset {
        feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        blocks: split_columns(&scaled, &spec.client_widths),
        labels,
        class_count: spec.class_count,
        train_rows,
        test_rows,
        scaling,
        seed,
    })
}
