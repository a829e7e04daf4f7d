use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

pub const REPORT_HEADER: &str = "protocol,metric,value,seed,config_hash";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub protocol: String,
    pub metric: String,
    pub value: f64,
}

/// Metric values from one evaluation run plus the seed and config hash
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(seed: u64, config_hash: &str) -> Self {
        EvalReport { seed, config_hash: config_hash.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, protocol: &str, metric: &str, value: f64) {
        self.rows.push(EvalRow { protocol: protocol.into(), metric: metric.into(), value });
    }

    pub fn get(&self, protocol: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.protocol == protocol && r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{},{}", r.protocol, r.metric, r.value, self.seed, self.config_hash);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("evaluation (seed {}, config {})\n", self.seed, self.config_hash);
        let width = self.rows.iter().map(|r| r.protocol.len() + r.metric.len() + 1).max().unwrap_or(0);
        for r in &self.rows {
            let label = format!("{}/{}", r.protocol, r.metric);
            let _ = writeln!(s, "  {label:<width$}  {:.4}", r.value);
        }
        s
    }

    /// Writes `eval_report.csv` and `eval_summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval_report.csv"), self.to_csv())?;
        fs::write(dir.join("eval_summary.txt"), self.summary())?;
        Ok(())
    }
}
