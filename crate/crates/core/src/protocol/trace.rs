//! Per-step audit log of a run and its CSV/JSON renderings.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    /// Common knowledge accumulation around the ring.
    Stage1,
    /// Ring over group representatives (MetaFed++).
    GroupStage1,
    /// Personalization pass.
    Stage2,
    /// Server-based baseline round.
    Server,
    Local,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::GroupStage1 => "group_stage1",
            Stage::Stage2 => "stage2",
            Stage::Server => "server",
            Stage::Local => "local",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Plain local training.
    Local,
    /// Valid accuracy above `l_t1`: distill from the received model.
    Distill,
    /// Valid accuracy at or below `l_t1`: start from the received model.
    Copy,
    /// Personalization with the adaptive weight.
    Adaptive,
    /// Personalization with the common model ignored (`λ = 0`).
    ZeroLambda,
    /// Local steps followed by server averaging.
    Aggregate,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Local => "local",
            Branch::Distill => "distill",
            Branch::Copy => "copy",
            Branch::Adaptive => "adaptive",
            Branch::ZeroLambda => "zero_lambda",
            Branch::Aggregate => "aggregate",
        })
    }
}

/// One training step of one federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: usize,
    pub federation: usize,
    pub stage: Stage,
    pub branch: Branch,
    pub lambda: f64,
    /// Mean over the step's local iterations.
    pub loss_cls: f64,
    pub loss_dist: f64,
    pub loss_total: f64,
    /// Accuracy that drove the branch decision: the federation's own model
    /// on its validation set before training.
    pub valid_acc: f64,
    /// Common model on this federation's validation set (personalization only).
    pub acc_common: Option<f64>,
    pub valid_acc_after: f64,
    pub test_acc: f64,
    /// Digest of the model distilled from or copied, if any.
    pub teacher_digest: Option<u64>,
    /// Digest of this federation's model after the step.
    pub model_digest: u64,
    /// Model payloads moved for this step.
    pub payloads: u64,
    /// Bytes moved for this step.
    pub bytes_sent: u64,
}

pub const CSV_HEADER: &str = "round,federation,stage,branch,lambda,loss_cls,loss_dist,valid_acc,test_acc,bytes_sent";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub method: Method,
    pub federations: usize,
    /// Bytes of one model payload for this method.
    pub payload_bytes: u64,
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn new(method: Method, federations: usize, payload_bytes: u64) -> Self {
        Self {
            method,
            federations,
            payload_bytes,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn stage_records(&self, stage: Stage) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// Running byte total after each record.
    pub fn cumulative_bytes(&self) -> Vec<u64> {
        self.records
            .iter()
            .scan(0u64, |acc, r| {
                *acc += r.bytes_sent;
                Some(*acc)
            })
            .collect()
    }

    /// Mean of `f` over the records of each round of `stage`, by round.
    pub fn per_round_mean(&self, stage: Stage, f: impl Fn(&TraceRecord) -> f64) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in self.stage_records(stage) {
            match out.last_mut() {
                Some((round, sum, n)) if *round == r.round => {
                    *sum += f(r);
                    *n += 1;
                }
                _ => out.push((r.round, f(r), 1)),
            }
        }
        out.into_iter().map(|(round, sum, n)| (round, sum / n as f64)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.federation,
                r.stage,
                r.branch,
                r.lambda,
                r.loss_cls,
                r.loss_dist,
                r.valid_acc,
                r.test_acc,
                r.bytes_sent
            );
        }
        out
    }
}

/// Communication totals of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCost {
    pub method: Method,
    pub payloads: u64,
    pub total_bytes: u64,
    /// Distinct communication rounds (ring passes or server rounds).
    pub rounds: usize,
}

pub fn comm_cost(trace: &RunTrace) -> CommCost {
    let mut rounds: Vec<(Stage, usize)> = trace
        .records
        .iter()
        .filter(|r| r.payloads > 0)
        .map(|r| (r.stage, r.round))
        .collect();
    rounds.dedup();
    rounds.sort_by_key(|&(s, r)| (s as u8, r));
    rounds.dedup();
    CommCost {
        method: trace.method,
        payloads: trace.records.iter().map(|r| r.payloads).sum(),
        total_bytes: trace.records.iter().map(|r| r.bytes_sent).sum(),
        rounds: rounds.len(),
    }
}
