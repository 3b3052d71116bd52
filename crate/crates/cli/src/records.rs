//! JSON-lines metric records (schema 1).
//!
//! Every line is one self-contained object with `schema`, `ts` (unix
//! seconds) and `kind`. Readers tolerate a truncated final line, which is
//! what a crash mid-write leaves behind.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use swimlane_core::grpo::UpdateStats;
use swimlane_core::pool::PoolStats;
use swimlane_runtime::EpochReport;

use crate::summary::ThroughputSummary;
use crate::CliError;

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub schema: u32,
    pub ts: f64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    Epoch(EpochRecord),
    Update(UpdateRecord),
    Pool(PoolRecord),
    RunSummary(RunSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Label shared by all records of one run.
    pub run: String,
    pub chunk: usize,
    pub horizon: u32,
    /// Policy inferences per env, summed over every env of every node.
    pub inference_steps: u64,
    #[serde(flatten)]
    pub report: EpochReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub run: String,
    pub epoch: u64,
    #[serde(flatten)]
    pub stats: UpdateStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub run: String,
    /// Position in the run's pool list (sampler pools first, then trainers).
    pub index: usize,
    pub stats: PoolStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub mode: String,
    pub strategy: String,
    pub ratio: String,
    pub nodes: u32,
    pub seed: u64,
    pub epochs: u64,
    pub warmup: usize,
    pub virtual_time: bool,
    pub throughput: ThroughputSummary,
    /// Post-warmup means, seconds.
    pub rollout_time: f64,
    pub actor_time: f64,
    pub transfer_time: f64,
    pub broadcast_time: f64,
    pub sampler_bubble: f64,
    pub max_staleness: u64,
    pub quarantined: u64,
    pub final_version: u64,
    /// Hash of the final parameter bits.
    pub params_digest: String,
    pub final_success_rate: f64,
    pub data_plane_bytes: u64,
    pub data_plane_copies: u64,
    pub inter_node_data_bytes: u64,
    pub inter_node_control_bytes: u64,
    pub inter_node_gradient_bytes: u64,
}

impl Record {
    pub fn new(body: Body) -> Self {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            schema: SCHEMA,
            ts,
            body,
        }
    }

    pub fn run(&self) -> &str {
        match &self.body {
            Body::Epoch(r) => &r.run,
            Body::Update(r) => &r.run,
            Body::Pool(r) => &r.run,
            Body::RunSummary(r) => &r.run,
        }
    }
}

/// Parses a JSONL stream. Blank lines are skipped; a final line without a
/// trailing newline that fails to parse is dropped as truncated.
pub fn parse_jsonl(text: &str) -> Result<Vec<Record>, CliError> {
    let mut out = Vec::new();
    let lines: Vec<&str> = text.split('\n').collect();
    let last = lines.len() - 1;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(line) {
            Ok(r) if r.schema == SCHEMA => out.push(r),
            Ok(r) => {
                return Err(CliError::Invalid(format!(
                    "line {}: unsupported schema {}",
                    i + 1,
                    r.schema
                )))
            }
            Err(_) if i == last => {
                tracing::warn!(line = i + 1, "dropping truncated final record");
            }
            Err(e) => return Err(CliError::Invalid(format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_jsonl(&text)
}

/// Single consumer that appends records to a file in arrival order.
pub struct MetricWriter {
    tx: Option<mpsc::Sender<Record>>,
    handle: Option<thread::JoinHandle<std::io::Result<u64>>>,
}

impl MetricWriter {
    pub fn append(path: &Path) -> Result<Self, CliError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        let (tx, rx) = mpsc::channel::<Record>();
        let handle = thread::spawn(move || {
            let mut w = std::io::BufWriter::new(file);
            let mut n = 0;
            for r in rx {
                let line = serde_json::to_string(&r).map_err(std::io::Error::other)?;
                w.write_all(line.as_bytes())?;
                w.write_all(b"\n")?;
                n += 1;
            }
            w.flush()?;
            Ok(n)
        });
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn sender(&self) -> mpsc::Sender<Record> {
        self.tx.clone().expect("writer open")
    }

    pub fn send(&self, body: Body) {
        // the writer only stops after `finish`
        let _ = self
            .tx
            .as_ref()
            .expect("writer open")
            .send(Record::new(body));
    }

    /// Closes the stream and returns the number of records written.
    pub fn finish(mut self) -> Result<u64, CliError> {
        self.tx.take();
        let h = self.handle.take().expect("writer open");
        h.join()
            .map_err(|_| CliError::Invalid("metric writer panicked".into()))?
            .map_err(|e| CliError::Invalid(format!("writing metrics: {e}")))
    }
}

impl Drop for MetricWriter {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
