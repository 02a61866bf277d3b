//! Persisted run artifacts: the structured report (config snapshot plus
//! evaluation records) and a flat delimited metrics table for plotting.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fedsim::EvalRecord;
use serde::{Deserialize, Serialize};

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BUNDLE_FILE: &str = "final_bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub records: Vec<EvalRecord>,
    /// Wall-clock seconds per round; informational, excluded from the
    /// reproducibility guarantees.
    pub round_wall_clock_secs: Vec<f64>,
    /// File name of the final parameter bundle, relative to the report.
    pub final_bundle: String,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Deterministic delimited table: one row per evaluation record.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("round,map,cf1,of1,mean_train_loss,participants\n");
        for r in &self.records {
            let loss = r.mean_train_loss.map(|l| l.to_string()).unwrap_or_default();
            let participants = r
                .participants
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round, r.map, r.cf1, r.of1, loss, participants
            ));
        }
        out
    }

    pub fn final_record(&self) -> Result<&EvalRecord> {
        self.records
            .last()
            .ok_or_else(|| Error::Contract("report has no evaluation records".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize, map: f64) -> EvalRecord {
        EvalRecord {
            round,
            map,
            cf1: 0.5,
            of1: 0.25,
            mean_train_loss: (round > 0).then_some(0.125),
            participants: if round > 0 { vec![0, 2] } else { vec![] },
        }
    }

    #[test]
    fn csv_shape_and_round_zero_blank_loss() {
        let report = RunReport {
            config: RunConfig::default(),
            records: vec![record(0, 0.5), record(1, 0.75)],
            round_wall_clock_secs: vec![0.1],
            final_bundle: "final_bundle.json".into(),
        };
        let csv = report.metrics_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,0.5,0.5,0.25,,");
        assert_eq!(lines[2], "1,0.75,0.5,0.25,0.125,0;2");
    }

    #[test]
    fn report_json_round_trips() {
        let report = RunReport {
            config: RunConfig::default(),
            records: vec![record(0, 0.123456789012345)],
            round_wall_clock_secs: vec![],
            final_bundle: "final_bundle.json".into(),
        };
        let text = report.to_json().unwrap();
        let back = RunReport::from_json(&text).unwrap();
        assert_eq!(back, report);
    }
}
