//! Experiment runner: builds seeded splits, runs methods, and writes trace
//! CSVs plus JSON summaries.

mod config;

pub use config::{parse_grouping, DatasetSpec, ExperimentConfig, PartitionConfig, SweepGrids};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{gen_feature_shift, gen_gaussian_pool, gen_label_shift, load_csv, FederatedSplit, GaussianPoolSpec, PartitionSpec};
use crate::error::{Error, Result};
use crate::losses::Tap;
use crate::protocol::{comm_cost, run, HyperParams, Method, Order, RunOutcome, Stage};

/// Builds the split for one seed. The seed drives both data generation and
/// partitioning.
pub fn build_split(cfg: &ExperimentConfig, seed: u64) -> Result<FederatedSplit> {
    let partition = PartitionSpec {
        federation_count: cfg.partition.federations,
        alpha: cfg.partition.alpha,
        fractions: cfg.partition.fractions,
        seed,
    };
    match &cfg.dataset {
        DatasetSpec::LabelShift(pool) => {
            let pool = gen_gaussian_pool(&GaussianPoolSpec { seed, ..pool.clone() })?;
            gen_label_shift(&pool, &partition)
        }
        DatasetSpec::FeatureShift(spec) => {
            let mut spec = spec.clone();
            spec.seed = seed;
            gen_feature_shift(&spec)
        }
        DatasetSpec::Csv(path) => gen_label_shift(&load_csv(path)?, &partition),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage2Decision {
    pub federation: usize,
    pub acc_common: f64,
    pub acc_local: f64,
    pub lambda: f64,
}

/// Result of one method on one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub method: Method,
    pub split_checksum: String,
    pub per_federation_test_acc: Vec<f64>,
    pub average_test_acc: f64,
    pub total_bytes: u64,
    pub payloads: u64,
    pub rounds: usize,
    pub stage2: Vec<Stage2Decision>,
}

impl SeedSummary {
    fn new(seed: u64, checksum: &str, outcome: &RunOutcome) -> Self {
        let cost = comm_cost(&outcome.trace);
        Self {
            seed,
            method: outcome.trace.method,
            split_checksum: checksum.to_string(),
            per_federation_test_acc: outcome.final_test_acc.clone(),
            average_test_acc: outcome.mean_test_acc(),
            total_bytes: cost.total_bytes,
            payloads: cost.payloads,
            rounds: cost.rounds,
            stage2: outcome
                .trace
                .stage_records(Stage::Stage2)
                .map(|r| Stage2Decision {
                    federation: r.federation,
                    acc_common: r.acc_common.unwrap_or(f64::NAN),
                    acc_local: r.valid_acc,
                    lambda: r.lambda,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedError {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub runs: Vec<SeedSummary>,
    pub errors: Vec<SeedError>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("summaries are plain data");
    s.push('\n');
    s
}

/// Runs the configured method for every seed. Writes
/// `seed_<s>/trace.csv`, `seed_<s>/summary.json` and a top-level
/// `summary.json`. Failing seeds are recorded, not fatal; configuration
/// errors abort before anything runs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for &seed in &cfg.seeds {
        let attempt = build_split(cfg, seed).and_then(|split| {
            let outcome = run(&split, &cfg.hyper, seed)?;
            Ok((split.checksum(), outcome))
        });
        match attempt {
            Ok((checksum, outcome)) => {
                let dir = cfg.out_dir.join(format!("seed_{seed}"));
                let summary = SeedSummary::new(seed, &checksum, &outcome);
                write(&dir.join("trace.csv"), &outcome.trace.to_csv())?;
                write(&dir.join("summary.json"), &to_json(&summary))?;
                runs.push(summary);
            }
            Err(e) if e.is_config() => return Err(e),
            Err(e) => errors.push(SeedError {
                seed,
                error: e.to_string(),
            }),
        }
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.average_test_acc).collect();
    let (mean_test_acc, std_test_acc) = mean_std(&accs);
    let summary = ExperimentSummary {
        method: cfg.hyper.method,
        dataset: cfg.dataset.kind().to_string(),
        seeds: cfg.seeds.clone(),
        mean_test_acc,
        std_test_acc,
        runs,
        errors,
    };
    write(&cfg.out_dir.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda0,
    LT1,
    Tap,
    ShareNorm,
    Order,
    /// Communication rounds at a fixed step budget.
    Budget,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Lambda0,
        SweepAxis::LT1,
        SweepAxis::Tap,
        SweepAxis::ShareNorm,
        SweepAxis::Order,
        SweepAxis::Budget,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda0 => "lambda0",
            SweepAxis::LT1 => "l_t1",
            SweepAxis::Tap => "tap",
            SweepAxis::ShareNorm => "share_norm",
            SweepAxis::Order => "order",
            SweepAxis::Budget => "budget",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown sweep axis '{s}'")))
    }
}

/// One method at one grid point, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub value: String,
    pub method: Method,
    pub rounds: usize,
    pub local_iters: usize,
    /// `rounds × local_iters`.
    pub steps: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub per_seed_test_acc: Vec<f64>,
    /// Final test accuracy of each federation, averaged over seeds.
    pub per_federation_test_acc: Vec<f64>,
    pub mean_total_bytes: f64,
    pub split_checksums: Vec<String>,
    pub errors: Vec<SeedError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
}

pub const TABLE_HEADER: &str = "value,method,rounds,local_iters,steps,mean_test_acc,std_test_acc,mean_total_bytes";

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.value, r.method, r.rounds, r.local_iters, r.steps, r.mean_test_acc, r.std_test_acc, r.mean_total_bytes
            ));
        }
        out
    }

    pub fn row(&self, value: &str, method: Method) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.value == value && r.method == method)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write(&dir.join(format!("{}.csv", self.name)), &self.to_csv())?;
        write(&dir.join(format!("{}.json", self.name)), &to_json(self))
    }
}

/// A split with its checksum, or the reason it could not be built.
type SeedSplit = std::result::Result<(FederatedSplit, String), String>;

/// Splits built once per seed so every row of a table is paired.
struct PairedSplits {
    splits: Vec<(u64, SeedSplit)>,
}

impl PairedSplits {
    fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let mut splits = Vec::new();
        for &seed in &cfg.seeds {
            match build_split(cfg, seed) {
                Ok(split) => {
                    let checksum = split.checksum();
                    splits.push((seed, Ok((split, checksum))));
                }
                Err(e) if e.is_config() => return Err(e),
                Err(e) => splits.push((seed, Err(e.to_string()))),
            }
        }
        Ok(Self { splits })
    }

    fn row(&self, value: String, hp: &HyperParams) -> Result<TableRow> {
        hp.validate()?;
        let mut per_seed = Vec::new();
        let mut per_fed: Vec<f64> = Vec::new();
        let mut bytes = Vec::new();
        let mut checksums = Vec::new();
        let mut errors = Vec::new();
        for (seed, split) in &self.splits {
            let (split, checksum) = match split {
                Ok(s) => s,
                Err(e) => {
                    errors.push(SeedError {
                        seed: *seed,
                        error: e.clone(),
                    });
                    continue;
                }
            };
            match run(split, hp, *seed) {
                Ok(outcome) => {
                    per_seed.push(outcome.mean_test_acc());
                    if per_fed.is_empty() {
                        per_fed = vec![0.0; outcome.final_test_acc.len()];
                    }
                    for (sum, acc) in per_fed.iter_mut().zip(&outcome.final_test_acc) {
                        *sum += acc;
                    }
                    bytes.push(comm_cost(&outcome.trace).total_bytes as f64);
                    checksums.push(checksum.clone());
                }
                Err(e) if e.is_config() => return Err(e),
                Err(e) => errors.push(SeedError {
                    seed: *seed,
                    error: e.to_string(),
                }),
            }
        }
        let runs = per_seed.len().max(1) as f64;
        per_fed.iter_mut().for_each(|v| *v /= runs);
        let (mean, std) = mean_std(&per_seed);
        Ok(TableRow {
            value,
            method: hp.method,
            rounds: hp.rounds_stage1,
            local_iters: hp.local_iters,
            steps: hp.rounds_stage1 * hp.local_iters,
            mean_test_acc: mean,
            std_test_acc: std,
            per_seed_test_acc: per_seed,
            per_federation_test_acc: per_fed,
            mean_total_bytes: mean_std(&bytes).0,
            split_checksums: checksums,
            errors,
        })
    }
}

/// Grid points of `axis` as (label, hyperparameters) pairs.
pub fn sweep_points(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<(String, HyperParams)>> {
    let base = &cfg.hyper;
    let with = |f: &dyn Fn(&mut HyperParams)| {
        let mut hp = base.clone();
        f(&mut hp);
        hp
    };
    let points: Vec<(String, HyperParams)> = match axis {
        SweepAxis::Lambda0 => cfg
            .sweep
            .lambda0
            .iter()
            .map(|&v| (v.to_string(), with(&|hp| hp.lambda0 = v)))
            .collect(),
        SweepAxis::LT1 => cfg.sweep.l_t1.iter().map(|&v| (v.to_string(), with(&|hp| hp.l_t1 = v))).collect(),
        SweepAxis::Tap => Tap::ALL.iter().map(|&t| (t.to_string(), with(&|hp| hp.tap = t))).collect(),
        SweepAxis::ShareNorm => [true, false]
            .iter()
            .map(|&b| (b.to_string(), with(&|hp| hp.share_norm = b)))
            .collect(),
        SweepAxis::Order => [Order::Index, Order::Reverse, Order::SeededRandom(cfg.seeds[0])]
            .into_iter()
            .map(|o| (o.to_string(), with(&|hp| hp.order = o.clone())))
            .collect(),
        SweepAxis::Budget => {
            let steps = cfg.sweep.budget_steps;
            let mut points = Vec::new();
            for &r in &cfg.sweep.budget_rounds {
                if r == 0 || steps % r != 0 {
                    return Err(Error::Config(format!("budget_steps {steps} is not divisible by {r} rounds")));
                }
                let hp = with(&|hp| {
                    hp.rounds_stage1 = r;
                    hp.local_iters = steps / r;
                    hp.pretrain_iters = Some(base.pretrain_steps());
                    hp.personal_iters = Some(base.personal_steps());
                });
                if hp.method != Method::Fedavg {
                    points.push((r.to_string(), HyperParams {
                        method: Method::Fedavg,
                        ..hp.clone()
                    }));
                }
                points.push((r.to_string(), hp));
            }
            points
        }
    };
    if points.is_empty() {
        return Err(Error::Config(format!("sweep over {axis} has an empty grid")));
    }
    Ok(points)
}

/// One row per grid point of `axis` (two per point for the budget axis,
/// which adds a FedAvg reference). Writes `sweep_<axis>.{csv,json}`.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Table> {
    cfg.validate()?;
    let points = sweep_points(cfg, axis)?;
    let splits = PairedSplits::build(cfg)?;
    let rows = points
        .into_iter()
        .map(|(label, hp)| splits.row(label, &hp))
        .collect::<Result<Vec<_>>>()?;
    let table = Table {
        name: format!("sweep_{axis}"),
        seeds: cfg.seeds.clone(),
        rows,
    };
    table.write(&cfg.out_dir)?;
    Ok(table)
}

pub const ABLATION_METHODS: [Method; 8] = [
    Method::Metafed,
    Method::FinetuneAblation,
    Method::NoStage1,
    Method::NoStage2,
    Method::Fedavg,
    Method::Fedprox,
    Method::Fedbn,
    Method::Local,
];

/// Every ablation and baseline on the same splits. Writes
/// `ablation.{csv,json}`.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    let splits = PairedSplits::build(cfg)?;
    let rows = ABLATION_METHODS
        .iter()
        .map(|&method| {
            let hp = HyperParams {
                method,
                ..cfg.hyper.clone()
            };
            splits.row(method.to_string(), &hp)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = Table {
        name: "ablation".into(),
        seeds: cfg.seeds.clone(),
        rows,
    };
    table.write(&cfg.out_dir)?;
    Ok(table)
}

/// Exports the split of every configured seed to `out/data/seed_<s>/`.
/// Returns each seed's split checksum.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<(u64, String)>> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let split = build_split(cfg, seed)?;
            split.export(&cfg.out_dir.join("data").join(format!("seed_{seed}")))?;
            Ok((seed, split.checksum()))
        })
        .collect()
}
