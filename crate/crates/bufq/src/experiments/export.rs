//! Table export: CSV for the row tables, JSON for full result documents.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::ExperimentError;

/// Serializes rows as CSV with a header row. Field order in the row structs
/// is the column order.
pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String, ExperimentError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| ExperimentError::Config { message: e.to_string() })
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), ExperimentError> {
    let text = to_csv_string(rows)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_csv_to<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<(), ExperimentError> {
    let mut out = out;
    out.write_all(to_csv_string(rows)?.as_bytes())?;
    Ok(())
}

pub fn to_json_string<T: Serialize>(document: &T) -> Result<String, ExperimentError> {
    let mut text = serde_json::to_string_pretty(document)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(document: &T, path: &Path) -> Result<(), ExperimentError> {
    std::fs::write(path, to_json_string(document)?)?;
    Ok(())
}

pub fn write_json_to<T: Serialize, W: Write>(document: &T, out: W) -> Result<(), ExperimentError> {
    let mut out = out;
    out.write_all(to_json_string(document)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        ratio: f64,
        replication: u64,
        value: f64,
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let rows = vec![
            Row { ratio: 0.5, replication: 0, value: 1.25 },
            Row { ratio: 0.5, replication: 1, value: 0.0 },
        ];
        let text = to_csv_string(&rows).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "ratio,replication,value");
        assert_eq!(lines[1], "0.5,0,1.25");
    }

    #[test]
    fn csv_floats_round_trip() {
        let rows = vec![Row { ratio: 1.0 / 3.0, replication: 7, value: f64::MIN_POSITIVE }];
        let text = to_csv_string(&rows).unwrap();
        let data = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = data.split(',').collect();
        assert_eq!(fields[0].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(fields[2].parse::<f64>().unwrap(), f64::MIN_POSITIVE);
    }
}
