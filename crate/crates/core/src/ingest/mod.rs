//! Flow-record ingestion, splitting and synthetic data.

mod schema;
mod split;
mod synth;

use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use schema::{FeatureSchema, CIC_COLUMNS, CIC_DROPPED};
pub use split::{split, SplitSpec, Splits};
pub use synth::{
    synth_generate, AttackSpec, ClusterSpec, CovarianceSpec, ScalarOrVec, SynthClientSpec,
    SynthConfig,
};

/// Feature matrix with optional binary labels (0 benign, 1 attack).
///
/// Unlabeled datasets stand for benign-only captures; they can train the
/// autoencoder but never the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDataset {
    pub name: String,
    pub features: Matrix,
    pub labels: Option<Vec<u8>>,
    pub schema: Arc<FeatureSchema>,
}

/// Row accounting from a CSV load.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub rows_read: usize,
    pub dropped_non_finite: usize,
    pub dropped_unparseable: usize,
}

impl FlowDataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Option<Vec<u8>>,
        schema: Arc<FeatureSchema>,
    ) -> Result<Self> {
        if features.cols() != schema.feature_count() {
            return Err(Error::Schema(format!(
                "{} feature columns, schema has {}",
                features.cols(),
                schema.feature_count()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::Schema("labels must be 0 or 1".into()));
            }
        }
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite feature value".into()));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            schema,
        })
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Label of row `i`; unlabeled rows count as benign.
    pub fn label(&self, i: usize) -> u8 {
        self.labels.as_ref().map_or(0, |l| l[i])
    }

    pub fn class_indices(&self, class: u8) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.label(i) == class).collect()
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            features: self.features.select(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            schema: Arc::clone(&self.schema),
        }
    }

    /// Row-wise concatenation. The result is labeled only if every part is.
    pub fn concat(parts: &[&FlowDataset], name: impl Into<String>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("nothing to concatenate".into()))?;
        let mut features = Matrix::empty(first.width());
        let labeled = parts.iter().all(|p| p.is_labeled());
        let mut labels = Vec::new();
        for p in parts {
            if p.width() != first.width() {
                return Err(Error::Schema("concatenating datasets of different width".into()));
            }
            for (i, row) in p.features.iter_rows().enumerate() {
                features.push_row(row)?;
                labels.push(p.label(i));
            }
        }
        Ok(Self {
            name: name.into(),
            features,
            labels: labeled.then_some(labels),
            schema: Arc::clone(&first.schema),
        })
    }

    /// Same rows in a seeded random order.
    pub fn shuffled<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut idx: Vec<usize> = (0..self.rows()).collect();
        idx.shuffle(rng);
        self.subset(&idx, self.name.clone())
    }
}

/// Loads a CIC-FlowMeter CSV export.
///
/// Header cells are matched against the schema through the alias table;
/// columns outside the schema are ignored. The label column is optional: if
/// absent the dataset is unlabeled. Rows with a non-numeric or non-finite
/// feature cell are dropped and counted.
pub fn load_flow_csv(path: &Path, schema: &FeatureSchema) -> Result<(FlowDataset, IngestStats)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_flow_csv(file, schema, name)
}

pub fn read_flow_csv<R: std::io::Read>(
    reader: R,
    schema: &FeatureSchema,
    name: impl Into<String>,
) -> Result<(FlowDataset, IngestStats)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("reading header: {e}")))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::EmptyInput("flow file has no header".into()));
    }

    // first occurrence wins (CIC-IDS2017 repeats "Fwd Header Length")
    let mut position = std::collections::HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(c) = schema.canonical(h) {
            position.entry(c.to_string()).or_insert(i);
        }
    }
    let feature_names = schema.feature_names();
    let missing: Vec<&str> = feature_names
        .iter()
        .copied()
        .filter(|f| !position.contains_key(*f))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!("missing required columns: {}", missing.join(", "))));
    }
    let feature_cols: Vec<usize> = feature_names.iter().map(|f| position[*f]).collect();
    let label_col = position.get(&schema.label_column).copied();

    let mut stats = IngestStats::default();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut row = Vec::with_capacity(feature_cols.len());
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse(format!("csv: {e}")))?;
        stats.rows_read += 1;
        row.clear();
        let mut unparseable = false;
        for &c in &feature_cols {
            match record.get(c).map(str::trim).map(str::parse::<f64>) {
                Some(Ok(v)) => row.push(v),
                _ => {
                    unparseable = true;
                    break;
                }
            }
        }
        if unparseable {
            stats.dropped_unparseable += 1;
            continue;
        }
        if row.iter().any(|v| !v.is_finite()) {
            stats.dropped_non_finite += 1;
            continue;
        }
        if let Some(lc) = label_col {
            let raw = record.get(lc).unwrap_or("").trim();
            labels.push(u8::from(!raw.eq_ignore_ascii_case("benign")));
        }
        data.extend_from_slice(&row);
    }
    if stats.rows_read == 0 {
        return Err(Error::EmptyInput("flow file has no data rows".into()));
    }
    if stats.dropped_unparseable > 0 {
        warn!("dropped {} rows with unparseable cells", stats.dropped_unparseable);
    }
    if stats.dropped_non_finite > 0 {
        warn!("dropped {} rows with non-finite values", stats.dropped_non_finite);
    }
    let features = Matrix::new(data, feature_cols.len())?;
    let ds = FlowDataset::new(
        name,
        features,
        label_col.map(|_| labels),
        Arc::new(schema.clone()),
    )?;
    Ok((ds, stats))
}

/// Writes the feature columns (and labels, if present) as a CSV readable by
/// [`load_flow_csv`]. Labels are written as `Benign` / `Attack`.
pub fn write_flow_csv<W: std::io::Write>(ds: &FlowDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ds.schema.feature_names();
    if ds.is_labeled() {
        header.push(&ds.schema.label_column);
    }
    w.write_record(&header)
        .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for (i, row) in ds.features.iter_rows().enumerate() {
        rec.clear();
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        if ds.is_labeled() {
            rec.push(if ds.label(i) == 0 { "Benign" } else { "Attack" }.into());
        }
        w.write_record(&rec)
            .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    Ok(())
}
