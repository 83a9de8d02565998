use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column names, in file order.
pub const CSV_COLUMNS: [&str; 10] = [
    "experiment",
    "environment",
    "method",
    "arch",
    "split_fraction",
    "seed",
    "metric",
    "value",
    "epochs_run",
    "wall_time",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub environment: String,
    pub method: String,
    pub arch: String,
    pub split_fraction: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub epochs_run: usize,
    /// Seconds; zero unless timing was requested.
    pub wall_time: f64,
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let missing: Vec<&str> = CSV_COLUMNS
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("csv is missing columns: {}", missing.join(", "))));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub environment: String,
    pub method: String,
    pub arch: String,
    pub split_fraction: f64,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub n: usize,
}

type GroupKey = (String, String, String, String, u64, String);

/// Mean and standard deviation over seeds for every
/// (experiment, environment, method, arch, split, metric).
pub fn aggregate(rows: &[ResultRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.experiment.clone(),
            r.environment.clone(),
            r.method.clone(),
            r.arch.clone(),
            r.split_fraction.to_bits(),
            r.metric.clone(),
        );
        groups.entry(key).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((experiment, environment, method, arch, split, metric), v)| {
            let (mean, std) = mean_std(&v);
            Summary {
                experiment,
                environment,
                method,
                arch,
                split_fraction: f64::from_bits(split),
                metric,
                mean,
                std,
                n: v.len(),
            }
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_summary_csv<W: Write>(summary: &[Summary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in summary {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Mean of one metric over every row matching the filters.
pub fn mean_of(rows: &[ResultRow], environment: &str, method: &str, split: f64, metric: &str) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.environment == environment && r.method == method && r.split_fraction == split && r.metric == metric)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}
