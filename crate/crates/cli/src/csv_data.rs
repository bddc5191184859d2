//! Generic CSV datasets: one row per sample with a header. The `label`
//! column holds integer classes, an optional `context` column holds integer
//! context ids, every other column is a numeric feature.

use std::path::Path;

use ctxnorm::Tensor;
use ctxnorm_train::Dataset;

use crate::error::{CliError, Result};

pub fn load_csv(path: &Path) -> Result<(Dataset, Option<Vec<usize>>)> {
    let parse_err = |message: String| CliError::Parse { path: path.to_path_buf(), message };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let header: Vec<String> = reader.headers().map_err(|e| parse_err(e.to_string()))?.iter().map(String::from).collect();
    let label_col =
        header.iter().position(|h| h == "label").ok_or_else(|| parse_err("no \"label\" column".into()))?;
    let ctx_col = header.iter().position(|h| h == "context");
    let features: Vec<usize> = (0..header.len()).filter(|&i| i != label_col && Some(i) != ctx_col).collect();
    if features.is_empty() {
        return Err(parse_err("no feature columns".into()));
    }

    let (mut x, mut labels, mut contexts) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let line = row + 2;
        let int = |col: usize| -> Result<usize> {
            record[col].trim().parse().map_err(|_| parse_err(format!("line {line}: {:?} is not a class id", &record[col])))
        };
        labels.push(int(label_col)?);
        if let Some(c) = ctx_col {
            contexts.push(int(c)?);
        }
        for &f in &features {
            let v: f64 =
                record[f].trim().parse().map_err(|_| parse_err(format!("line {line}: {:?} is not a number", &record[f])))?;
            x.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err("no rows".into()));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let data = Dataset::from_features(Tensor::from_vec(&[labels.len(), features.len()], x)?, labels, classes)?;
    Ok((data, ctx_col.map(|_| contexts)))
}
