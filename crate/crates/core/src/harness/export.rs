//! Aggregate evaluation curves across seeds: per eval step, the mean, the
//! standard deviation, and the seed count, for plotting.

use std::path::Path;

use thiserror::Error;

use crate::harness::metrics::fmt_float;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("no input files given")]
    Empty,
    #[error("cannot read {path}: {err}")]
    Io { path: String, err: String },
    #[error("{path}: malformed row {line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("eval grids are misaligned at steps {0:?}")]
    Misaligned(Vec<u64>),
    #[error("write failed: {0}")]
    Write(#[from] std::io::Error),
}

/// (env_step, eval_mean_return) pairs from one metrics.csv.
pub fn read_eval_series(path: &Path) -> Result<Vec<(u64, f64)>, ExportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExportError::Io {
        path: path.display().to_string(),
        err: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 5 {
            continue;
        }
        if cols[1] != "eval" {
            continue;
        }
        let step: u64 = cols[0].parse().map_err(|_| ExportError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("bad env_step {:?}", cols[0]),
        })?;
        let mean: f64 = cols[4].parse().map_err(|_| ExportError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("bad eval_mean_return {:?}", cols[4]),
        })?;
        out.push((step, mean));
    }
    Ok(out)
}

/// Merge several runs' eval curves. All inputs must share one eval grid;
/// the output rows are `env_step,mean,std,count` with std over the seeds at
/// each step (population form, zero for a single seed).
pub fn export_plot_data(inputs: &[&Path], output: &Path) -> Result<(), ExportError> {
    if inputs.is_empty() {
        return Err(ExportError::Empty);
    }
    let series: Vec<Vec<(u64, f64)>> = inputs
        .iter()
        .map(|p| read_eval_series(p))
        .collect::<Result<_, _>>()?;

    let grid: Vec<u64> = series[0].iter().map(|&(s, _)| s).collect();
    let mut offending = Vec::new();
    for s in &series[1..] {
        let other: Vec<u64> = s.iter().map(|&(st, _)| st).collect();
        if other != grid {
            for st in other.iter().chain(grid.iter()) {
                if !(other.contains(st) && grid.contains(st)) {
                    offending.push(*st);
                }
            }
        }
    }
    if !offending.is_empty() {
        offending.sort_unstable();
        offending.dedup();
        return Err(ExportError::Misaligned(offending));
    }

    let mut out = String::from("env_step,mean,std,count\n");
    for (i, &step) in grid.iter().enumerate() {
        let values: Vec<f64> = series.iter().map(|s| s[i].1).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out.push_str(&format!(
            "{step},{},{},{}\n",
            fmt_float(mean),
            fmt_float(var.sqrt()),
            values.len()
        ));
    }
    std::fs::write(output, out)?;
    Ok(())
}
