//! Dataset directory format: `meta.json` (name, shape, angle grid) plus
//! `inputs.csv` (N × v·h·w·p values in canonical order, header of flat
//! indices) and `outputs.csv` (N × l gains, header of angle degrees).
//! `meta.json` is the declared source of truth; the loader validates the
//! CSV headers against it.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use tensor_gp::tensor::{DesignTensor, GridShape};

use crate::error::{HarnessError, Result};

pub const META_FILE: &str = "meta.json";
pub const INPUTS_FILE: &str = "inputs.csv";
pub const OUTPUTS_FILE: &str = "outputs.csv";

/// Angle grid description in `meta.json`: a uniform grid or an explicit list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AngleSpec {
    Grid {
        start_deg: f64,
        step_deg: f64,
        count: usize,
    },
    List(Vec<f64>),
}

impl AngleSpec {
    pub fn angles(&self) -> Vec<f64> {
        match self {
            AngleSpec::Grid {
                start_deg,
                step_deg,
                count,
            } => (0..*count)
                .map(|i| start_deg + step_deg * i as f64)
                .collect(),
            AngleSpec::List(list) => list.clone(),
        }
    }
}

/// Ground-truth generation parameters recorded by the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kernel: String,
    pub signal_variance: f64,
    pub lengthscale: f64,
    pub gamma: Option<f64>,
    pub basis_order: usize,
    pub num_basis: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub shape: GridShape,
    pub angles: AngleSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ground_truth: Option<GroundTruth>,
}

/// A loaded dataset: inputs as design tensors, outputs as an `N × l` matrix
/// of linear-scale gains.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub shape: GridShape,
    pub angles: Vec<f64>,
    pub inputs: Vec<DesignTensor>,
    pub outputs: DMatrix<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Whether the angle grid covers a full circle (wraparound domain).
    pub fn full_circle(&self) -> bool {
        if self.angles.len() < 2 {
            return false;
        }
        let step = self.angles[1] - self.angles[0];
        let span = self.angles[self.angles.len() - 1] - self.angles[0];
        (span + step - 360.0).abs() < 1e-6
    }
}

fn read_csv_matrix(path: &Path, what: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = fs::File::open(path)
        .map_err(|e| HarnessError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| HarnessError::Data(format!("{what}: bad header: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| HarnessError::Data(format!("{what}: row {line}: {e}")))?;
        let mut row = Vec::with_capacity(record.len());
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                HarnessError::Data(format!(
                    "{what}: row {line}, column {col}: '{field}' is not a number"
                ))
            })?;
            if !value.is_finite() {
                return Err(HarnessError::Data(format!(
                    "{what}: row {line}, column {col}: non-finite value"
                )));
            }
            row.push(value);
        }
        if row.len() != header.len() {
            return Err(HarnessError::Data(format!(
                "{what}: row {line} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta_path = root.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| HarnessError::Data(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", meta_path.display())))?;
    let shape = meta.shape;
    GridShape::new(shape.v, shape.h, shape.w, shape.p)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", meta_path.display())))?;
    let angles = meta.angles.angles();
    if angles.is_empty() {
        return Err(HarnessError::Data(format!(
            "{}: empty angle grid",
            meta_path.display()
        )));
    }

    let (in_header, in_rows) = read_csv_matrix(&root.join(INPUTS_FILE), INPUTS_FILE)?;
    if in_header.len() != shape.value_count() {
        return Err(HarnessError::Data(format!(
            "{INPUTS_FILE}: {} columns, shape {} needs {}",
            in_header.len(),
            shape,
            shape.value_count()
        )));
    }
    let (out_header, out_rows) = read_csv_matrix(&root.join(OUTPUTS_FILE), OUTPUTS_FILE)?;
    if out_header.len() != angles.len() {
        return Err(HarnessError::Data(format!(
            "{OUTPUTS_FILE}: {} columns, meta declares {} angles",
            out_header.len(),
            angles.len()
        )));
    }
    for (col, (head, want)) in out_header.iter().zip(&angles).enumerate() {
        let got: f64 = head.parse().map_err(|_| {
            HarnessError::Data(format!(
                "{OUTPUTS_FILE}: header column {col}: '{head}' is not an angle"
            ))
        })?;
        if (got - want).abs() > 1e-6 {
            return Err(HarnessError::Data(format!(
                "{OUTPUTS_FILE}: header column {col} is {got}, meta declares {want}"
            )));
        }
    }
    if in_rows.len() != out_rows.len() {
        return Err(HarnessError::Data(format!(
            "{INPUTS_FILE} has {} rows but {OUTPUTS_FILE} has {}",
            in_rows.len(),
            out_rows.len()
        )));
    }
    if in_rows.is_empty() {
        return Err(HarnessError::Data("dataset has no samples".into()));
    }

    let inputs: Vec<DesignTensor> = in_rows
        .into_iter()
        .enumerate()
        .map(|(row, values)| {
            DesignTensor::new(shape, values).map_err(|e| {
                HarnessError::Data(format!("{INPUTS_FILE}: row {row}: {e}"))
            })
        })
        .collect::<Result<_>>()?;
    let outputs = DMatrix::from_fn(out_rows.len(), angles.len(), |r, c| out_rows[r][c]);

    Ok(Dataset {
        name: meta.name.clone(),
        shape,
        angles,
        inputs,
        outputs,
        meta,
    })
}

/// Writes a dataset directory in the canonical format. Floats are written
/// in shortest round-trip form, so fixed seeds give bit-identical files.
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(root)
        .map_err(|e| HarnessError::Data(format!("cannot create {}: {e}", root.display())))?;
    let meta_json = serde_json::to_string_pretty(&dataset.meta)
        .map_err(|e| HarnessError::Data(format!("meta serialization: {e}")))?;
    fs::write(root.join(META_FILE), meta_json + "\n")
        .map_err(|e| HarnessError::Data(format!("cannot write {META_FILE}: {e}")))?;

    let mut inputs = String::new();
    let cols = dataset.shape.value_count();
    inputs.push_str(
        &(0..cols)
            .map(|c| format!("x{c}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    inputs.push('\n');
    for tensor in &dataset.inputs {
        let row: Vec<String> = tensor.values().iter().map(|v| format!("{v}")).collect();
        inputs.push_str(&row.join(","));
        inputs.push('\n');
    }
    fs::write(root.join(INPUTS_FILE), inputs)
        .map_err(|e| HarnessError::Data(format!("cannot write {INPUTS_FILE}: {e}")))?;

    let mut outputs = String::new();
    outputs.push_str(
        &dataset
            .angles
            .iter()
            .map(|a| format!("{a}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    outputs.push('\n');
    for r in 0..dataset.outputs.nrows() {
        let row: Vec<String> = (0..dataset.outputs.ncols())
            .map(|c| format!("{}", dataset.outputs[(r, c)]))
            .collect();
        outputs.push_str(&row.join(","));
        outputs.push('\n');
    }
    fs::write(root.join(OUTPUTS_FILE), outputs)
        .map_err(|e| HarnessError::Data(format!("cannot write {OUTPUTS_FILE}: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_dataset() -> Dataset {
        let shape = GridShape::new(2, 1, 1, 1).unwrap();
        let meta = DatasetMeta {
            name: "tiny".into(),
            shape,
            angles: AngleSpec::Grid {
                start_deg: 0.0,
                step_deg: 1.0,
                count: 3,
            },
            ground_truth: None,
        };
        Dataset {
            name: "tiny".into(),
            shape,
            angles: vec![0.0, 1.0, 2.0],
            inputs: vec![
                DesignTensor::new(shape, vec![1.25, 2.0]).unwrap(),
                DesignTensor::new(shape, vec![1.5, 1.75]).unwrap(),
            ],
            outputs: DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            meta,
        }
    }

    #[test]
    fn roundtrip_preserves_values() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.name, "tiny");
        assert_eq!(loaded.angles, vec![0.0, 1.0, 2.0]);
        assert_eq!(loaded.inputs[0].values(), ds.inputs[0].values());
        assert_eq!(loaded.outputs, ds.outputs);
        assert!(!loaded.full_circle());
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let dir = tempdir().unwrap();
        match load_dataset(dir.path()) {
            Err(HarnessError::Data(msg)) => assert!(msg.contains("meta.json")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn column_mismatch_names_the_file() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        // Corrupt: drop one column of inputs.csv.
        std::fs::write(dir.path().join(INPUTS_FILE), "x0\n1.0\n2.0\n").unwrap();
        match load_dataset(dir.path()) {
            Err(HarnessError::Data(msg)) => assert!(msg.contains("inputs.csv"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_row_and_column() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::write(dir.path().join(OUTPUTS_FILE), "0,1,2\n0.1,oops,0.3\n0.4,0.5,0.6\n")
            .unwrap();
        match load_dataset(dir.path()) {
            Err(HarnessError::Data(msg)) => {
                assert!(msg.contains("row 0"), "{msg}");
                assert!(msg.contains("column 1"), "{msg}");
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn angle_header_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::write(dir.path().join(OUTPUTS_FILE), "0,5,2\n0.1,0.2,0.3\n0.4,0.5,0.6\n")
            .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(HarnessError::Data(_))));
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::write(dir.path().join(OUTPUTS_FILE), "0,1,2\n0.1,0.2,0.3\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(HarnessError::Data(_))));
    }

    #[test]
    fn full_circle_detected() {
        let mut ds = tiny_dataset();
        ds.angles = (0..360).map(|d| d as f64).collect();
        assert!(ds.full_circle());
        ds.angles = (0..=180).map(|d| d as f64).collect();
        assert!(!ds.full_circle());
    }
}
