use std::path::Path;

use super::DatasetSplit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a headed CSV file: `label_column` holds non-negative integer class
/// labels, every other column is a numeric feature.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("{}: no column `{label_column}`", path.display())))?;
    let features = headers.len() - 1;
    if features == 0 {
        return Err(Error::Config(format!("{}: no feature columns", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (col, field) in record.iter().enumerate() {
            let bad = || Error::Config(format!("{}: row {}, column {}: `{field}`", path.display(), row + 1, col + 1));
            if col == label_idx {
                labels.push(field.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                data.push(field.trim().parse::<f64>().map_err(|_| bad())?);
            }
        }
    }
    let n = labels.len();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    DatasetSplit::new(Tensor::new(vec![n, features], data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_label_column_anywhere() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x,y,class\n0.5,1.0,1\n-2,3,0\n").unwrap();
        let split = load_csv(&p, "class").unwrap();
        assert_eq!(split.inputs.shape(), &[2, 2]);
        assert_eq!(split.inputs.data(), &[0.5, 1.0, -2.0, 3.0]);
        assert_eq!(split.labels, vec![1, 0]);
        assert!(load_csv(&p, "missing").is_err());
    }
}
