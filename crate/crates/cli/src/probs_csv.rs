//! Probability matrices as CSV: one row per sample, one column per class.
//! A leading header line is accepted and ignored.

use std::path::Path;

use petalnet::Tensor;

use crate::CliError;

pub fn parse(text: &str, source: &str) -> Result<Tensor, CliError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(CliError::data(format!("{source}:{}: {e}", i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{source}: no probability rows")));
    }
    Tensor::from_rows(&rows).map_err(|e| CliError::data(format!("{source}: {e}")))
}

pub fn read(path: &Path) -> Result<Tensor, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

/// `p0,…,p{C-1},label` rows where `label` is the row argmax.
pub fn render(probs: &Tensor) -> String {
    let c = probs.row_len();
    let mut out: Vec<String> = (0..c).map(|j| format!("p{j}")).collect();
    out.push("label".into());
    let mut text = out.join(",") + "\n";
    for (row, label) in probs.rows().zip(probs.argmax_rows()) {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        cells.push(label.to_string());
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    text
}
