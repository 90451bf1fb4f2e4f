//! Federated training engines.
//!
//! The cyclic engine ([`run_stage1`], [`run_stage2`], [`run_metafed_pp`])
//! never uses a server: models travel federation to federation. The
//! server-based baselines live in [`run_fedavg`] and [`run_local`].

mod baselines;
mod grouping;
mod metafed;
mod trace;


pub use baselines::{aggregate, run_fedavg, run_local, FedAvgVariant};
pub use grouping::{kmeans_groups, resolve_groups};
pub use metafed::{
    personalization_lambda, pretrain, run_metafed, run_metafed_pp, run_stage1, run_stage2, stage1_round, CommonModel,
    RingContext,
};
pub use trace::{comm_cost, Branch, CommCost, RunTrace, Stage, TraceRecord, CSV_HEADER};

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, FederatedSplit, FederationData};
use crate::error::{Error, Result};
use crate::losses::{objective_parts, LossParts, LossSpec, Tap};
use crate::nncore::{backward, derive_seed, seeded_rng, sgd_step, ModelParams, SimRng};

/// Which training procedure a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Metafed,
    MetafedPp,
    Fedavg,
    Fedprox,
    Fedbn,
    Local,
    /// Distillation replaced by plain fine-tuning (`λ = 0` throughout).
    FinetuneAblation,
    /// Personalization against the best pretrained model, no ring.
    NoStage1,
    /// Report the ring models without personalization.
    NoStage2,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Metafed,
        Method::MetafedPp,
        Method::Fedavg,
        Method::Fedprox,
        Method::Fedbn,
        Method::Local,
        Method::FinetuneAblation,
        Method::NoStage1,
        Method::NoStage2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Metafed => "metafed",
            Method::MetafedPp => "metafed_pp",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::Fedbn => "fedbn",
            Method::Local => "local",
            Method::FinetuneAblation => "finetune_ablation",
            Method::NoStage1 => "no_stage1",
            Method::NoStage2 => "no_stage2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// Transmission order around the ring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Index,
    Reverse,
    SeededRandom(u64),
    Explicit(Vec<usize>),
}

impl Order {
    /// The visiting order as a permutation of `0..n`.
    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        match self {
            Order::Index => Ok((0..n).collect()),
            Order::Reverse => Ok((0..n).rev().collect()),
            Order::SeededRandom(seed) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut seeded_rng(derive_seed(*seed, &[0x4f52])));
                Ok(order)
            }
            Order::Explicit(list) => {
                let mut seen = vec![false; n];
                if list.len() != n {
                    return Err(Error::Config(format!("order lists {} federations, expected {n}", list.len())));
                }
                for &i in list {
                    if i >= n || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::Config(format!("order {list:?} is not a permutation of 0..{n}")));
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Order::Index => f.write_str("index"),
            Order::Reverse => f.write_str("reverse"),
            Order::SeededRandom(s) => write!(f, "random:{s}"),
            Order::Explicit(list) => {
                let parts: Vec<String> = list.iter().map(usize::to_string).collect();
                write!(f, "{}", parts.join(" "))
            }
        }
    }
}

impl FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "index" => return Ok(Order::Index),
            "reverse" => return Ok(Order::Reverse),
            _ => {}
        }
        if let Some(seed) = s.strip_prefix("random:") {
            return seed
                .trim()
                .parse()
                .map(Order::SeededRandom)
                .map_err(|_| Error::Config(format!("bad random order seed '{seed}'")));
        }
        s.split([' ', ','])
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<usize>().map_err(|_| Error::Config(format!("bad order '{s}'"))))
            .collect::<Result<Vec<_>>>()
            .map(Order::Explicit)
    }
}

/// How MetaFed++ forms groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Explicit(Vec<Vec<usize>>),
    /// k-means over per-federation input mean and variance.
    KMeans(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub method: Method,
    pub lambda0: f64,
    /// Stage-I threshold: distill above it, copy at or below it.
    pub l_t1: f64,
    /// Stage-II threshold on the common model's validation accuracy.
    pub l_t2: f64,
    /// Ring rounds for MetaFed, server rounds for the baselines.
    pub rounds_stage1: usize,
    pub local_iters: usize,
    /// Local pretraining steps; defaults to `local_iters`.
    pub pretrain_iters: Option<usize>,
    /// Personalization steps; defaults to `local_iters`.
    pub personal_iters: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub tap: Tap,
    /// Whether normalization layers travel with a copied model.
    pub share_norm: bool,
    pub order: Order,
    pub prox_mu: f64,
    pub groups: Option<Grouping>,
    pub hidden: Vec<usize>,
    pub normalize: bool,
    /// Stop the ring once mean valid accuracy gains < 1e-3 twice in a row.
    pub early_stop: bool,
    /// Steps between validation checks when selecting the best checkpoint.
    pub eval_every: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            method: Method::Metafed,
            lambda0: 1.0,
            l_t1: 0.5,
            l_t2: 0.5,
            rounds_stage1: 5,
            local_iters: 50,
            pretrain_iters: None,
            personal_iters: None,
            lr: 0.05,
            batch_size: 32,
            tap: Tap::Penultimate,
            share_norm: false,
            order: Order::Index,
            prox_mu: 0.01,
            groups: None,
            hidden: vec![64, 64],
            normalize: true,
            early_stop: false,
            eval_every: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")))
            }
        };
        finite_nonneg("lambda0", self.lambda0)?;
        finite_nonneg("prox_mu", self.prox_mu)?;
        if !self.l_t1.is_finite() || !self.l_t2.is_finite() {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.rounds_stage1 == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.local_iters == 0 || self.pretrain_iters == Some(0) || self.personal_iters == Some(0) {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("bad hidden widths {:?}", self.hidden)));
        }
        self.tap.boundaries(self.hidden.len() + 1)?;
        Ok(())
    }

    pub fn pretrain_steps(&self) -> usize {
        self.pretrain_iters.unwrap_or(self.local_iters)
    }

    pub fn personal_steps(&self) -> usize {
        self.personal_iters.unwrap_or(self.local_iters)
    }
}

/// One participant: its data, its model and its latest validation accuracy.
#[derive(Debug, Clone)]
pub struct Federation {
    pub id: usize,
    pub split: FederationData,
    pub model: ModelParams,
    pub last_valid_acc: f64,
}

impl Federation {
    pub fn train(&self) -> &Dataset {
        &self.split.train
    }

    pub fn valid(&self) -> &Dataset {
        &self.split.valid
    }

    pub fn test(&self) -> &Dataset {
        &self.split.test
    }
}

/// Fraction of argmax-correct predictions in eval mode.
pub fn evaluate(model: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let predictions = model.predict(data.samples())?;
    let correct = predictions.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// First eight bytes of the SHA-256 of the serialized model.
pub fn model_digest(model: &ModelParams) -> u64 {
    let digest = Sha256::digest(model.to_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Builds one federation per split part with a model of the configured shape.
/// With `shared_init` every federation starts from the same parameters.
pub fn init_federations(split: &FederatedSplit, hp: &HyperParams, seed: u64, shared_init: bool) -> Result<Vec<Federation>> {
    let first = split
        .federations
        .first()
        .ok_or_else(|| Error::Config("split has no federations".into()))?;
    let dim = first.train.dim();
    let classes = split.federations.iter().map(|f| f.train.class_count()).max().unwrap_or(0);
    split
        .federations
        .iter()
        .enumerate()
        .map(|(id, part)| {
            if part.train.dim() != dim {
                return Err(Error::Shape(format!("federation {id} has a different input width")));
            }
            let init_seed = if shared_init {
                derive_seed(seed, &[TAG_INIT])
            } else {
                derive_seed(seed, &[TAG_INIT, id as u64])
            };
            let model = ModelParams::mlp(dim, &hp.hidden, classes, hp.normalize, &mut seeded_rng(init_seed))?;
            Ok(Federation {
                id,
                split: part.clone(),
                model,
                last_valid_acc: 0.0,
            })
        })
        .collect()
}

pub(crate) const TAG_INIT: u64 = 0x11;
pub(crate) const TAG_PRETRAIN: u64 = 0x12;
pub(crate) const TAG_STAGE1: u64 = 0x13;
pub(crate) const TAG_STAGE2: u64 = 0x14;
pub(crate) const TAG_SERVER: u64 = 0x15;
pub(crate) const TAG_LOCAL: u64 = 0x16;

/// Mean loss parts over a block of local iterations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainStats {
    pub parts: LossParts,
    pub total: f64,
}

/// Objective used by one block of local training.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub lambda: f64,
    pub teacher: Option<&'a ModelParams>,
    pub proximal: Option<(&'a ModelParams, f64)>,
}

impl Objective<'_> {
    pub fn classification() -> Self {
        Self {
            lambda: 0.0,
            teacher: None,
            proximal: None,
        }
    }
}

/// Best-validation checkpoint seen during a training block.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub valid_acc: f64,
}

/// Runs `iters` minibatch SGD steps of `objective` on `data`. When `track`
/// is given, the model is scored on it before training, every `eval_every`
/// steps and at the end; the best-scoring state is returned.
pub fn train_block(
    model: &mut ModelParams,
    data: &Dataset,
    objective: Objective,
    hp: &HyperParams,
    iters: usize,
    rng: &mut SimRng,
    track: Option<&Dataset>,
) -> Result<(TrainStats, Option<Checkpoint>)> {
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let mut best = match track {
        Some(valid) => Some(Checkpoint {
            valid_acc: evaluate(model, valid)?,
            model: model.clone(),
        }),
        None => None,
    };
    let batch_size = hp.batch_size.min(data.len());
    let mut sum = TrainStats::default();
    for step in 1..=iters {
        let ids = index::sample(rng, data.len(), batch_size).into_vec();
        let batch = data.batch(&ids);
        let mut spec = LossSpec {
            lambda: objective.lambda,
            tap: hp.tap,
            proximal_mu: 0.0,
            teacher_features: None,
            proximal_reference: None,
        };
        if let Some(teacher) = objective.teacher {
            spec.teacher_features = Some(crate::losses::teacher_features(teacher, &batch.inputs, hp.tap)?);
        }
        if let Some((reference, mu)) = objective.proximal {
            spec.proximal_mu = mu;
            spec.proximal_reference = Some(reference);
        }
        let pass = model.forward_train(&batch.inputs)?;
        let parts = objective_parts(model, &pass, &batch.labels, &spec)?;
        let grads = backward(model, &pass, &batch.labels, &spec)?;
        sgd_step(model, &grads, hp.lr)?;
        sum.parts.cls += parts.cls;
        sum.parts.dist += parts.dist;
        sum.parts.prox += parts.prox;
        sum.total += parts.weighted(spec.lambda);
        if let (Some(valid), Some(current)) = (track, best.as_mut()) {
            if step % hp.eval_every == 0 || step == iters {
                let acc = evaluate(model, valid)?;
                if acc > current.valid_acc {
                    *current = Checkpoint {
                        model: model.clone(),
                        valid_acc: acc,
                    };
                }
            }
        }
    }
    let n = iters.max(1) as f64;
    Ok((
        TrainStats {
            parts: LossParts {
                cls: sum.parts.cls / n,
                dist: sum.parts.dist / n,
                prox: sum.parts.prox / n,
            },
            total: sum.total / n,
        },
        best,
    ))
}

/// Result of running one method on one split.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: RunTrace,
    /// Reported model of every federation, by federation id.
    pub models: Vec<ModelParams>,
    pub final_test_acc: Vec<f64>,
    pub final_valid_acc: Vec<f64>,
    /// Common model(s) personalization trained against; one per group for
    /// the grouped variant, none for the baselines.
    pub commons: Vec<CommonModel>,
}

impl RunOutcome {
    pub fn mean_test_acc(&self) -> f64 {
        self.final_test_acc.iter().sum::<f64>() / self.final_test_acc.len().max(1) as f64
    }
}

/// Runs `hp.method` on `split`. All randomness derives from `seed`.
pub fn run(split: &FederatedSplit, hp: &HyperParams, seed: u64) -> Result<RunOutcome> {
    hp.validate()?;
    match hp.method {
        Method::Metafed | Method::FinetuneAblation | Method::NoStage1 | Method::NoStage2 => {
            run_metafed(split, hp, seed)
        }
        Method::MetafedPp => run_metafed_pp(split, hp, seed),
        Method::Fedavg => run_fedavg(split, hp, seed, FedAvgVariant::FedAvg),
        Method::Fedprox => run_fedavg(split, hp, seed, FedAvgVariant::FedProx),
        Method::Fedbn => run_fedavg(split, hp, seed, FedAvgVariant::FedBn),
        Method::Local => run_local(split, hp, seed),
    }
}

pub(crate) fn finish(trace: RunTrace, feds: &[Federation], commons: Vec<CommonModel>) -> Result<RunOutcome> {
    let final_test_acc = feds.iter().map(|f| evaluate(&f.model, f.test())).collect::<Result<Vec<_>>>()?;
    let final_valid_acc = feds.iter().map(|f| evaluate(&f.model, f.valid())).collect::<Result<Vec<_>>>()?;
    Ok(RunOutcome {
        trace,
        models: feds.iter().map(|f| f.model.clone()).collect(),
        final_test_acc,
        final_valid_acc,
        commons,
    })
}
