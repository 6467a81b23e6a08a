//! Label manifests.
//!
//! A manifest is a UTF-8 CSV whose first column holds the sample id (whatever
//! its header says) and whose remaining columns hold literal `0`/`1` labels.
//! The class schema is taken from the header; nothing about the class set is
//! hard-coded.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::io::{csv_bytes, csv_reader, write_atomic};
use crate::{Error, Result};

pub const DEFAULT_DISEASE_RISK: &str = "Disease_Risk";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    class_names: Vec<String>,
    disease_risk_name: String,
}

impl LabelSchema {
    pub fn new(class_names: Vec<String>, disease_risk_name: impl Into<String>) -> Result<Self> {
        let disease_risk_name = disease_risk_name.into();
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate class {name:?}")));
            }
        }
        if !class_names.contains(&disease_risk_name) {
            return Err(Error::MissingColumn(disease_risk_name));
        }
        Ok(Self {
            class_names,
            disease_risk_name,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn disease_risk_name(&self) -> &str {
        &self.disease_risk_name
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == class)
    }

    pub fn disease_risk_index(&self) -> usize {
        self.index_of(&self.disease_risk_name)
            .expect("schema invariant: disease risk is a class")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_path: Option<PathBuf>,
    pub labels: Vec<u8>,
}

/// How the class schema of a manifest is determined.
#[derive(Debug, Clone)]
pub enum SchemaMode {
    /// Take the classes from the header, in header order.
    HeaderDriven { disease_risk_name: String },
    /// The header must contain exactly these classes; columns are reordered
    /// to schema order.
    Explicit(LabelSchema),
}

impl Default for SchemaMode {
    fn default() -> Self {
        SchemaMode::HeaderDriven {
            disease_risk_name: DEFAULT_DISEASE_RISK.to_string(),
        }
    }
}

/// Which columns a model is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The disease-risk column alone.
    Detector,
    /// Every column except disease risk, in schema order.
    Classifier,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::Detector => "detector",
            TargetMode::Classifier => "classifier",
        }
    }
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" => Ok(TargetMode::Detector),
            "classifier" => Ok(TargetMode::Classifier),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected detector or classifier)"
            ))),
        }
    }
}

/// Binary training targets with their column names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets {
    pub columns: Vec<String>,
    pub values: Array2<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    schema: LabelSchema,
    records: Vec<SampleRecord>,
    index: IndexMap<String, usize>,
}

impl LabelMatrix {
    pub fn new(schema: LabelSchema, records: Vec<SampleRecord>) -> Result<Self> {
        let mut index = IndexMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.labels.len() != schema.len() {
                return Err(Error::Shape {
                    context: "sample labels",
                    expected: schema.len(),
                    found: r.labels.len(),
                });
            }
            if let Some((c, v)) = r.labels.iter().enumerate().find(|(_, v)| **v > 1) {
                return Err(Error::NonBinaryLabel {
                    sample: r.sample_id.clone(),
                    column: schema.class_names[c].clone(),
                    value: v.to_string(),
                });
            }
            if index.insert(r.sample_id.clone(), i).is_some() {
                return Err(Error::DuplicateSample(r.sample_id.clone()));
            }
        }
        Ok(Self {
            schema,
            records,
            index,
        })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.sample_id.clone()).collect()
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.position(sample_id).map(|i| &self.records[i])
    }

    /// Full samples × classes label table.
    pub fn label_array(&self) -> Array2<u8> {
        let mut out = Array2::zeros((self.len(), self.schema.len()));
        for (i, r) in self.records.iter().enumerate() {
            for (j, &v) in r.labels.iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Number of positive records per class, in schema order.
    pub fn label_counts(&self) -> IndexMap<String, usize> {
        let mut counts: IndexMap<String, usize> = self
            .schema
            .class_names
            .iter()
            .map(|c| (c.clone(), 0))
            .collect();
        for r in &self.records {
            for (j, &v) in r.labels.iter().enumerate() {
                counts[j] += v as usize;
            }
        }
        counts
    }

    pub fn targets(&self, mode: TargetMode) -> Targets {
        let risk = self.schema.disease_risk_index();
        let cols: Vec<usize> = match mode {
            TargetMode::Detector => vec![risk],
            TargetMode::Classifier => (0..self.schema.len()).filter(|&c| c != risk).collect(),
        };
        let mut values = Array2::zeros((self.len(), cols.len()));
        for (i, r) in self.records.iter().enumerate() {
            for (k, &c) in cols.iter().enumerate() {
                values[[i, k]] = r.labels[c];
            }
        }
        Targets {
            columns: cols
                .iter()
                .map(|&c| self.schema.class_names[c].clone())
                .collect(),
            values,
        }
    }

    /// Restricts the matrix to the given samples, in the given order.
    pub fn select(&self, sample_ids: &[String]) -> Result<LabelMatrix> {
        let records = sample_ids
            .iter()
            .map(|id| {
                self.get(id).cloned().ok_or_else(|| Error::MissingSample {
                    model: "manifest".into(),
                    sample: id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMatrix::new(self.schema.clone(), records)
    }

    /// Attaches `<root>/<sample_id>.<ext>` as image path for every record,
    /// using the first extension that exists on disk.
    pub fn attach_images(&mut self, root: &Path, extensions: &[&str]) -> Result<()> {
        for r in &mut self.records {
            let found = extensions
                .iter()
                .map(|ext| root.join(format!("{}.{ext}", r.sample_id)))
                .find(|p| p.is_file());
            match found {
                Some(p) => r.image_path = Some(p),
                None => {
                    return Err(Error::io(
                        root.join(&r.sample_id),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Appends records (e.g. up-sampled replicas) to a copy of this matrix.
    pub fn extended(&self, extra: Vec<SampleRecord>) -> Result<LabelMatrix> {
        let mut records = self.records.clone();
        records.extend(extra);
        LabelMatrix::new(self.schema.clone(), records)
    }

    pub fn to_csv_bytes(&self, id_header: &str) -> Result<Vec<u8>> {
        csv_bytes(Path::new("<manifest>"), |w| {
            let mut header = vec![id_header.to_string()];
            header.extend(self.schema.class_names.iter().cloned());
            w.write_record(&header)?;
            for r in &self.records {
                let mut row = vec![r.sample_id.clone()];
                row.extend(r.labels.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            Ok(())
        })
    }

    pub fn write_manifest(&self, path: &Path, id_header: &str) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes(id_header)?)
    }
}

pub fn load_manifest(path: &Path, mode: &SchemaMode) -> Result<LabelMatrix> {
    let mut reader = csv_reader(path)?;
    let mut rows = reader.records();
    let header = match rows.next() {
        None => return Err(Error::EmptyManifest(path.to_path_buf())),
        Some(h) => h.map_err(|e| Error::csv(path, e))?,
    };
    if header.iter().all(|c| c.is_empty()) {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    let header_classes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();

    // column_of[k] = index into header_classes feeding schema class k
    let (schema, column_of) = match mode {
        SchemaMode::HeaderDriven { disease_risk_name } => {
            let schema = LabelSchema::new(header_classes.clone(), disease_risk_name.clone())?;
            let cols = (0..header_classes.len()).collect::<Vec<_>>();
            (schema, cols)
        }
        SchemaMode::Explicit(schema) => {
            if header_classes.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "header has {} label columns, schema has {}",
                    header_classes.len(),
                    schema.len()
                )));
            }
            let cols = schema
                .class_names()
                .iter()
                .map(|c| {
                    header_classes
                        .iter()
                        .position(|h| h == c)
                        .ok_or_else(|| Error::MissingColumn(c.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            (schema.clone(), cols)
        }
    };

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if row.iter().all(|c| c.is_empty()) {
            continue;
        }
        if row.len() != header.len() {
            return Err(Error::Schema(format!(
                "{}: row {:?} has {} cells, header has {}",
                path.display(),
                row.get(0).unwrap_or(""),
                row.len(),
                header.len()
            )));
        }
        let sample_id = row[0].to_string();
        let labels = column_of
            .iter()
            .enumerate()
            .map(|(k, &h)| match &row[h + 1] {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::NonBinaryLabel {
                    sample: sample_id.clone(),
                    column: schema.class_names()[k].clone(),
                    value: other.to_string(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(SampleRecord {
            sample_id,
            image_path: None,
            labels,
        });
    }
    LabelMatrix::new(schema, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn header_mode(risk: &str) -> SchemaMode {
        SchemaMode::HeaderDriven {
            disease_risk_name: risk.into(),
        }
    }

    const THREE_ROWS: &str = "ID,Risk,A,B\n1,1,1,0\n2,0,0,0\n3,1,0,1\n";

    #[test]
    fn parses_three_row_manifest() {
        let f = write_tmp(THREE_ROWS);
        let m = load_manifest(f.path(), &header_mode("Risk")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.schema().class_names(), ["Risk", "A", "B"]);
        assert_eq!(m.records()[2].labels, vec![1, 0, 1]);
        let counts = m.label_counts();
        assert_eq!(counts["Risk"], 2);
        assert_eq!(counts["A"], 1);
        assert_eq!(counts["B"], 1);
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_tmp("");
        let err = load_manifest(f.path(), &SchemaMode::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyManifest(_)));
        assert!(err.to_string().contains("empty manifest"));
    }

    #[test]
    fn non_binary_cell_is_rejected() {
        let f = write_tmp("ID,Risk,A\n1,1,2\n");
        let err = load_manifest(f.path(), &header_mode("Risk")).unwrap_err();
        assert!(err.to_string().contains("non-binary label"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let f = write_tmp("ID,Risk\n1,1\n1,0\n");
        let err = load_manifest(f.path(), &header_mode("Risk")).unwrap_err();
        assert!(matches!(err, Error::DuplicateSample(id) if id == "1"));
    }

    #[test]
    fn missing_risk_column_is_rejected() {
        let f = write_tmp("ID,A,B\n1,1,0\n");
        let err = load_manifest(f.path(), &SchemaMode::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == DEFAULT_DISEASE_RISK));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_manifest(Path::new("/nonexistent/x.csv"), &SchemaMode::default());
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn explicit_schema_reorders_columns() {
        let f = write_tmp(THREE_ROWS);
        let schema =
            LabelSchema::new(vec!["B".into(), "Risk".into(), "A".into()], "Risk").unwrap();
        let m = load_manifest(f.path(), &SchemaMode::Explicit(schema)).unwrap();
        assert_eq!(m.records()[0].labels, vec![0, 1, 1]);
    }

    #[test]
    fn targets_split_schema() {
        let f = write_tmp(THREE_ROWS);
        let m = load_manifest(f.path(), &header_mode("Risk")).unwrap();
        let det = m.targets(TargetMode::Detector);
        assert_eq!(det.columns, ["Risk"]);
        assert_eq!(det.values.column(0).to_vec(), vec![1, 0, 1]);
        let cls = m.targets(TargetMode::Classifier);
        assert_eq!(cls.columns, ["A", "B"]);
        assert_eq!(cls.values.shape(), &[3, 2]);
    }

    #[test]
    fn risk_only_schema_gives_empty_classifier_targets() {
        let f = write_tmp("ID,Risk\n1,1\n2,0\n");
        let m = load_manifest(f.path(), &header_mode("Risk")).unwrap();
        let cls = m.targets(TargetMode::Classifier);
        assert!(cls.columns.is_empty());
        assert_eq!(cls.values.shape(), &[2, 0]);
    }

    #[test]
    fn all_zero_counts() {
        let f = write_tmp("ID,Risk,A\n1,0,0\n2,0,0\n");
        let m = load_manifest(f.path(), &header_mode("Risk")).unwrap();
        assert!(m.label_counts().values().all(|&c| c == 0));
    }
}
