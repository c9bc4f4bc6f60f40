use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUNLOG_HEADER: &str = "round,client_id,status,samples,train_loss,precision,recall,bytes_up,bytes_down,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub round: usize,
    pub client_id: usize,
    /// active, warned, disconnected, faulted or skipped.
    pub status: String,
    pub samples: usize,
    pub train_loss: Option<f32>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RUNLOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.client_id,
                r.status,
                r.samples,
                opt(r.train_loss),
                opt(r.precision),
                opt(r.recall),
                r.bytes_up,
                r.bytes_down,
                r.wall_ms
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Rows of one round, in client order.
    pub fn round(&self, round: usize) -> impl Iterator<Item = &RunLogRow> {
        self.rows.iter().filter(move |r| r.round == round)
    }
}
