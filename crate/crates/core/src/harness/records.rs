use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const CSV_HEADER: &str = "experiment,seed,setting,metric,value";

/// Metric names a record may carry.
pub const METRICS: [&str; 6] = [
    "meta_train_acc",
    "meta_test_acc",
    "meta_train_loss",
    "meta_val_acc",
    "ci_halfwidth",
    "pretrain_acc",
];

/// One row of experiment output. `setting` is a `;`-separated `key=value`
/// list.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub experiment: String,
    pub seed: u64,
    pub setting: String,
    pub metric: String,
    pub value: f64,
}

impl ResultRecord {
    pub fn new(experiment: &str, seed: u64, setting: &str, metric: &str, value: f64) -> Result<Self> {
        let r = Self {
            experiment: experiment.into(),
            seed,
            setting: setting.into(),
            metric: metric.into(),
            value,
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if !METRICS.contains(&self.metric.as_str()) {
            return Err(invalid(format!("unknown metric `{}`", self.metric)));
        }
        if [&self.experiment, &self.setting].iter().any(|s| s.contains([',', '\n', '"'])) {
            return Err(invalid("experiment and setting must not contain commas, quotes or newlines"));
        }
        if !self.value.is_finite() {
            return Err(Error::NonFinite(format!("{} {}", self.metric, self.setting)));
        }
        Ok(())
    }
}

/// Orders records by (experiment, setting, seed, metric).
pub fn sort_records(records: &mut [ResultRecord]) {
    records.sort_by(|a, b| {
        (&a.experiment, &a.setting, a.seed, &a.metric).cmp(&(&b.experiment, &b.setting, b.seed, &b.metric))
    });
}

pub fn records_to_csv(records: &[ResultRecord]) -> Result<String> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = format!("{CSV_HEADER}\n");
    for r in &sorted {
        r.validate()?;
        let _ = writeln!(out, "{},{},{},{},{}", r.experiment, r.seed, r.setting, r.metric, r.value);
    }
    Ok(out)
}

pub fn emit_csv(records: &[ResultRecord], path: impl AsRef<Path>) -> Result<()> {
    let text = records_to_csv(records)?;
    std::fs::write(path.as_ref(), text)
        .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.as_ref().display())))
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{CSV_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let perr = |msg: String| Error::Parse { line: i + 2, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(perr(format!("expected 5 fields, got {}", f.len())));
            }
            let seed = f[1].parse().map_err(|e| perr(format!("seed: {e}")))?;
            let value = f[4].parse().map_err(|e| perr(format!("value: {e}")))?;
            ResultRecord::new(f[0], seed, f[2], f[3], value).map_err(|e| perr(e.to_string()))
        })
        .collect()
}
