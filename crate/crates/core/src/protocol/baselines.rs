//! Server-based baselines and the local-only reference.

use super::trace::{Branch, RunTrace, Stage, TraceRecord};
use super::{
    evaluate, finish, init_federations, model_digest, train_block, Checkpoint, HyperParams, Objective, RunOutcome,
    TrainStats, TAG_LOCAL, TAG_SERVER,
};
use crate::data::FederatedSplit;
use crate::error::{Error, Result};
use crate::nncore::{copy_model, derive_seed, seeded_rng, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedAvgVariant {
    FedAvg,
    /// FedAvg plus a proximal pull toward the received global model.
    FedProx,
    /// FedAvg with normalization layers kept local.
    FedBn,
}

/// Weighted parameter average. Normalization layers are averaged only when
/// `include_norm` is set; otherwise the result carries the first model's.
/// Sums run in model order so the result does not depend on scheduling.
pub fn aggregate(models: &[&ModelParams], weights: &[f64], include_norm: bool) -> Result<ModelParams> {
    let first = *models.first().ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    if models.len() != weights.len() {
        return Err(Error::Shape(format!("{} models but {} weights", models.len(), weights.len())));
    }
    for m in models {
        first.ensure_same_architecture(m)?;
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || total <= 0.0 {
        return Err(Error::Config(format!("aggregation weights must be non-negative with a positive sum, got {weights:?}")));
    }
    let scale: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut out = first.clone();
    for (l, layer) in out.layers_mut().iter_mut().enumerate() {
        for (k, w) in layer.weights.data_mut().iter_mut().enumerate() {
            *w = models.iter().zip(&scale).map(|(m, s)| s * m.layers()[l].weights.data()[k]).sum();
        }
        for (k, b) in layer.bias.iter_mut().enumerate() {
            *b = models.iter().zip(&scale).map(|(m, s)| s * m.layers()[l].bias[k]).sum();
        }
    }
    if include_norm {
        for (l, norm) in out.norms_mut().iter_mut().enumerate() {
            let Some(norm) = norm else { continue };
            let avg = |pick: fn(&crate::nncore::Norm) -> &Vec<f64>, k: usize| -> f64 {
                models
                    .iter()
                    .zip(&scale)
                    .map(|(m, s)| s * pick(m.norms()[l].as_ref().expect("same architecture"))[k])
                    .sum()
            };
            for k in 0..norm.scale.len() {
                norm.running_mean[k] = avg(|n| &n.running_mean, k);
                norm.running_var[k] = avg(|n| &n.running_var, k);
                norm.scale[k] = avg(|n| &n.scale, k);
                norm.shift[k] = avg(|n| &n.shift, k);
            }
        }
    }
    Ok(out)
}

/// FedAvg, FedProx or FedBN for `hp.rounds_stage1` server rounds. Every
/// federation reports the received global model (with its own normalization
/// under FedBN) that scored best on its validation data.
pub fn run_fedavg(split: &FederatedSplit, hp: &HyperParams, seed: u64, variant: FedAvgVariant) -> Result<RunOutcome> {
    hp.validate()?;
    let mut feds = init_federations(split, hp, seed, true)?;
    let share_norm = variant != FedAvgVariant::FedBn;
    let payload = feds[0].model.payload_len(share_norm) as u64;
    let mut trace = RunTrace::new(hp.method, feds.len(), payload);
    let weights: Vec<f64> = feds.iter().map(|f| f.train().len() as f64).collect();
    let mut global = feds[0].model.clone();
    let mut best: Vec<Option<Checkpoint>> = vec![None; feds.len()];

    for round in 1..=hp.rounds_stage1 {
        let mut stats = Vec::with_capacity(feds.len());
        let mut received_acc = Vec::with_capacity(feds.len());
        for fed in feds.iter_mut() {
            fed.model = copy_model(&global, &fed.model, !share_norm)?;
            received_acc.push(evaluate(&fed.model, fed.valid())?);
            let objective = Objective {
                lambda: 0.0,
                teacher: None,
                proximal: (variant == FedAvgVariant::FedProx).then_some((&global, hp.prox_mu)),
            };
            let mut rng = seeded_rng(derive_seed(seed, &[TAG_SERVER, round as u64, fed.id as u64]));
            let (s, _) = train_block(&mut fed.model, &fed.split.train, objective, hp, hp.local_iters, &mut rng, None)?;
            stats.push(s);
        }
        let uploaded: Vec<&ModelParams> = feds.iter().map(|f| &f.model).collect();
        global = aggregate(&uploaded, &weights, share_norm)?;
        let digest = model_digest(&global);
        for (i, fed) in feds.iter_mut().enumerate() {
            let personal = copy_model(&global, &fed.model, !share_norm)?;
            let acc = evaluate(&personal, fed.valid())?;
            if best[i].as_ref().is_none_or(|b| acc > b.valid_acc) {
                best[i] = Some(Checkpoint {
                    model: personal.clone(),
                    valid_acc: acc,
                });
            }
            fed.last_valid_acc = acc;
            trace.push(TraceRecord {
                round,
                federation: fed.id,
                stage: Stage::Server,
                branch: Branch::Aggregate,
                lambda: 0.0,
                loss_cls: stats[i].parts.cls,
                loss_dist: stats[i].parts.dist,
                loss_total: stats[i].total,
                valid_acc: received_acc[i],
                acc_common: None,
                valid_acc_after: acc,
                test_acc: evaluate(&personal, fed.test())?,
                teacher_digest: Some(digest),
                model_digest: model_digest(&personal),
                payloads: 2,
                bytes_sent: 2 * payload,
            });
        }
    }
    for (fed, best) in feds.iter_mut().zip(best) {
        let best = best.expect("at least one round ran");
        fed.model = best.model;
        fed.last_valid_acc = best.valid_acc;
    }
    finish(trace, &feds, Vec::new())
}

/// Local-only training with the same step budget a MetaFed federation gets
/// (pretraining, every ring round and personalization), reporting the best
/// validation checkpoint.
pub fn run_local(split: &FederatedSplit, hp: &HyperParams, seed: u64) -> Result<RunOutcome> {
    hp.validate()?;
    let mut feds = init_federations(split, hp, seed, true)?;
    let payload = feds[0].model.serialized_len() as u64;
    let mut trace = RunTrace::new(hp.method, feds.len(), payload);
    let mut chunks = vec![hp.pretrain_steps()];
    chunks.extend(std::iter::repeat_n(hp.local_iters, hp.rounds_stage1));
    chunks.push(hp.personal_steps());

    for fed in feds.iter_mut() {
        let mut rng = seeded_rng(derive_seed(seed, &[TAG_LOCAL, fed.id as u64]));
        let mut best = Checkpoint {
            valid_acc: evaluate(&fed.model, fed.valid())?,
            model: fed.model.clone(),
        };
        for (round, &iters) in chunks.iter().enumerate() {
            let before = evaluate(&fed.model, fed.valid())?;
            let (stats, chunk_best): (TrainStats, _) = train_block(
                &mut fed.model,
                &fed.split.train,
                Objective::classification(),
                hp,
                iters,
                &mut rng,
                Some(&fed.split.valid),
            )?;
            if let Some(c) = chunk_best {
                if c.valid_acc > best.valid_acc {
                    best = c;
                }
            }
            trace.push(TraceRecord {
                round,
                federation: fed.id,
                stage: Stage::Local,
                branch: Branch::Local,
                lambda: 0.0,
                loss_cls: stats.parts.cls,
                loss_dist: 0.0,
                loss_total: stats.total,
                valid_acc: before,
                acc_common: None,
                valid_acc_after: evaluate(&fed.model, fed.valid())?,
                test_acc: evaluate(&fed.model, fed.test())?,
                teacher_digest: None,
                model_digest: model_digest(&fed.model),
                payloads: 0,
                bytes_sent: 0,
            });
        }
        fed.model = best.model;
        fed.last_valid_acc = best.valid_acc;
    }
    finish(trace, &feds, Vec::new())
}
