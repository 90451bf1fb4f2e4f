//! Cyclic knowledge distillation: local pretraining, the common knowledge
//! accumulation ring, the personalization pass and the grouped variant.

use super::grouping::resolve_groups;
use super::trace::{Branch, RunTrace, Stage, TraceRecord};
use super::{
    evaluate, finish, init_federations, model_digest, train_block, Federation, HyperParams, Method, Objective,
    RunOutcome, TAG_PRETRAIN, TAG_STAGE1, TAG_STAGE2,
};
use crate::data::FederatedSplit;
use crate::error::{Error, Result};
use crate::losses::lambda_schedule;
use crate::nncore::{copy_model, derive_seed, seeded_rng, ModelParams};

/// Output of the accumulation ring: the last-trained federation's model.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonModel {
    pub params: ModelParams,
    /// Federation whose model this is.
    pub source: usize,
}

/// Settings shared by every step of one run.
#[derive(Debug, Clone, Copy)]
pub struct RingContext<'a> {
    pub hp: &'a HyperParams,
    pub seed: u64,
}

impl RingContext<'_> {
    fn rng(&self, tag: u64, round: usize, federation: usize) -> crate::nncore::SimRng {
        seeded_rng(derive_seed(self.seed, &[tag, round as u64, federation as u64]))
    }

    fn stage1_lambda(&self) -> f64 {
        if self.hp.method == Method::FinetuneAblation {
            0.0
        } else {
            self.hp.lambda0
        }
    }
}

fn ensure_valid(fed: &Federation) -> Result<()> {
    if fed.valid().is_empty() {
        return Err(Error::Protocol(format!("federation {} has no validation data", fed.id)));
    }
    Ok(())
}

/// Trains every federation alone with cross-entropy (round 0).
pub fn pretrain(feds: &mut [Federation], ctx: RingContext, trace: &mut RunTrace) -> Result<()> {
    for fed in feds.iter_mut() {
        ensure_valid(fed)?;
        let before = evaluate(&fed.model, fed.valid())?;
        let mut rng = ctx.rng(TAG_PRETRAIN, 0, fed.id);
        let (stats, _) = train_block(
            &mut fed.model,
            &fed.split.train,
            Objective::classification(),
            ctx.hp,
            ctx.hp.pretrain_steps(),
            &mut rng,
            None,
        )?;
        fed.last_valid_acc = evaluate(&fed.model, fed.valid())?;
        trace.push(TraceRecord {
            round: 0,
            federation: fed.id,
            stage: Stage::Pretrain,
            branch: Branch::Local,
            lambda: 0.0,
            loss_cls: stats.parts.cls,
            loss_dist: stats.parts.dist,
            loss_total: stats.total,
            valid_acc: before,
            acc_common: None,
            valid_acc_after: fed.last_valid_acc,
            test_acc: evaluate(&fed.model, fed.test())?,
            teacher_digest: None,
            model_digest: model_digest(&fed.model),
            payloads: 0,
            bytes_sent: 0,
        });
    }
    Ok(())
}

/// One pass around the ring `members` (positions into `feds`). Each member
/// receives its predecessor's current model, then either distills from it
/// (own validation accuracy above `l_t1`) or starts from a copy of it and
/// trains with the same objective. The ring wraps: the first member's
/// predecessor is the last member.
pub fn stage1_round(
    feds: &mut [Federation],
    members: &[usize],
    ctx: RingContext,
    round: usize,
    stage: Stage,
    trace: &mut RunTrace,
) -> Result<()> {
    let hp = ctx.hp;
    let n = members.len();
    for pos in 0..n {
        let receiver = members[pos];
        let sender = members[(pos + n - 1) % n];
        let teacher = feds[sender].model.clone();
        let fed = &mut feds[receiver];
        ensure_valid(fed)?;
        let acc = evaluate(&fed.model, fed.valid())?;
        let branch = if acc > hp.l_t1 { Branch::Distill } else { Branch::Copy };
        if branch == Branch::Copy {
            fed.model = copy_model(&teacher, &fed.model, !hp.share_norm)?;
        }
        let lambda = ctx.stage1_lambda();
        let mut rng = ctx.rng(TAG_STAGE1, round, fed.id);
        let objective = Objective {
            lambda,
            teacher: Some(&teacher),
            proximal: None,
        };
        let (stats, _) = train_block(
            &mut fed.model,
            &fed.split.train,
            objective,
            hp,
            hp.local_iters,
            &mut rng,
            None,
        )?;
        fed.last_valid_acc = evaluate(&fed.model, fed.valid())?;
        trace.push(TraceRecord {
            round,
            federation: fed.id,
            stage,
            branch,
            lambda,
            loss_cls: stats.parts.cls,
            loss_dist: stats.parts.dist,
            loss_total: stats.total,
            valid_acc: acc,
            acc_common: None,
            valid_acc_after: fed.last_valid_acc,
            test_acc: evaluate(&fed.model, fed.test())?,
            teacher_digest: Some(model_digest(&teacher)),
            model_digest: model_digest(&fed.model),
            payloads: 1,
            bytes_sent: teacher.serialized_len() as u64,
        });
    }
    Ok(())
}

/// Runs `hp.rounds_stage1` ring rounds numbered from `first_round`, stopping
/// early when enabled. Returns the number of the last round run.
fn ring_rounds(
    feds: &mut [Federation],
    members: &[usize],
    ctx: RingContext,
    first_round: usize,
    stage: Stage,
    trace: &mut RunTrace,
) -> Result<usize> {
    let mut previous: Option<f64> = None;
    let mut stalled = 0;
    let mut round = first_round;
    for r in 0..ctx.hp.rounds_stage1 {
        round = first_round + r;
        stage1_round(feds, members, ctx, round, stage, trace)?;
        let mean = members.iter().map(|&i| feds[i].last_valid_acc).sum::<f64>() / members.len() as f64;
        if ctx.hp.early_stop {
            if let Some(prev) = previous {
                stalled = if mean - prev < 1e-3 { stalled + 1 } else { 0 };
                if stalled >= 2 {
                    break;
                }
            }
        }
        previous = Some(mean);
    }
    Ok(round)
}

/// Local pretraining followed by the accumulation ring. Returns the model
/// of the ring's last member.
pub fn run_stage1(feds: &mut [Federation], order: &[usize], ctx: RingContext, trace: &mut RunTrace) -> Result<CommonModel> {
    if ctx.hp.rounds_stage1 == 0 {
        return Err(Error::Config("rounds_stage1 must be at least 1".into()));
    }
    pretrain(feds, ctx, trace)?;
    ring_rounds(feds, order, ctx, 1, Stage::Stage1, trace)?;
    let last = *order.last().ok_or_else(|| Error::Config("empty ring".into()))?;
    Ok(CommonModel {
        params: feds[last].model.clone(),
        source: feds[last].id,
    })
}

/// Distillation weight for personalization: zero when the common model is
/// no better than the local one and below `l_t2`, otherwise the adaptive
/// schedule.
pub fn personalization_lambda(hp: &HyperParams, acc_common: f64, acc_local: f64) -> f64 {
    if acc_common <= acc_local && acc_common < hp.l_t2 {
        0.0
    } else {
        lambda_schedule(hp.lambda0, acc_common, acc_local)
    }
}

/// Single personalization pass over `members`. Every member trains against
/// the unchanged common model and keeps its best-validation checkpoint.
pub fn run_stage2(
    feds: &mut [Federation],
    members: &[usize],
    common: &CommonModel,
    ctx: RingContext,
    round: usize,
    trace: &mut RunTrace,
) -> Result<()> {
    let hp = ctx.hp;
    let teacher = &common.params;
    let teacher_digest = model_digest(teacher);
    for &i in members {
        let fed = &mut feds[i];
        ensure_valid(fed)?;
        let acc_common = evaluate(teacher, fed.valid())?;
        let acc_local = evaluate(&fed.model, fed.valid())?;
        let lambda = if hp.method == Method::FinetuneAblation {
            0.0
        } else {
            personalization_lambda(hp, acc_common, acc_local)
        };
        let branch = if lambda == 0.0 { Branch::ZeroLambda } else { Branch::Adaptive };
        let mut rng = ctx.rng(TAG_STAGE2, round, fed.id);
        let objective = Objective {
            lambda,
            teacher: Some(teacher),
            proximal: None,
        };
        let (stats, best) = train_block(
            &mut fed.model,
            &fed.split.train,
            objective,
            hp,
            hp.personal_steps(),
            &mut rng,
            Some(&fed.split.valid),
        )?;
        if let Some(best) = best {
            fed.model = best.model;
            fed.last_valid_acc = best.valid_acc;
        }
        trace.push(TraceRecord {
            round,
            federation: fed.id,
            stage: Stage::Stage2,
            branch,
            lambda,
            loss_cls: stats.parts.cls,
            loss_dist: stats.parts.dist,
            loss_total: stats.total,
            valid_acc: acc_local,
            acc_common: Some(acc_common),
            valid_acc_after: fed.last_valid_acc,
            test_acc: evaluate(&fed.model, fed.test())?,
            teacher_digest: Some(teacher_digest),
            model_digest: model_digest(&fed.model),
            payloads: 1,
            bytes_sent: teacher.serialized_len() as u64,
        });
    }
    Ok(())
}

fn best_pretrained(feds: &[Federation]) -> Result<CommonModel> {
    let mut best: Option<(f64, usize)> = None;
    for (i, candidate) in feds.iter().enumerate() {
        let mut sum = 0.0;
        for fed in feds {
            sum += evaluate(&candidate.model, fed.valid())?;
        }
        let mean = sum / feds.len() as f64;
        if best.is_none_or(|(b, _)| mean > b) {
            best = Some((mean, i));
        }
    }
    let (_, i) = best.ok_or_else(|| Error::Config("no federations".into()))?;
    Ok(CommonModel {
        params: feds[i].model.clone(),
        source: feds[i].id,
    })
}

/// MetaFed and its ablations (`finetune_ablation`, `no_stage1`, `no_stage2`).
pub fn run_metafed(split: &FederatedSplit, hp: &HyperParams, seed: u64) -> Result<RunOutcome> {
    hp.validate()?;
    let mut feds = init_federations(split, hp, seed, true)?;
    let order = hp.order.resolve(feds.len())?;
    let payload = feds[0].model.serialized_len() as u64;
    let mut trace = RunTrace::new(hp.method, feds.len(), payload);
    let ctx = RingContext { hp, seed };
    let common = if hp.method == Method::NoStage1 {
        pretrain(&mut feds, ctx, &mut trace)?;
        let common = best_pretrained(&feds)?;
        run_stage2(&mut feds, &order, &common, ctx, 1, &mut trace)?;
        common
    } else {
        pretrain(&mut feds, ctx, &mut trace)?;
        let last_round = ring_rounds(&mut feds, &order, ctx, 1, Stage::Stage1, &mut trace)?;
        let last = order[order.len() - 1];
        let common = CommonModel {
            params: feds[last].model.clone(),
            source: feds[last].id,
        };
        if hp.method != Method::NoStage2 {
            run_stage2(&mut feds, &order, &common, ctx, last_round + 1, &mut trace)?;
        }
        common
    };
    finish(trace, &feds, vec![common])
}

/// Grouped variant: rings within each group, a ring across group
/// representatives (each group's last member), then personalization within
/// each group against its own common model.
pub fn run_metafed_pp(split: &FederatedSplit, hp: &HyperParams, seed: u64) -> Result<RunOutcome> {
    hp.validate()?;
    let mut feds = init_federations(split, hp, seed, true)?;
    let order = hp.order.resolve(feds.len())?;
    let groups = resolve_groups(hp.groups.as_ref(), &feds, &order, seed)?;
    let payload = feds[0].model.serialized_len() as u64;
    let mut trace = RunTrace::new(hp.method, feds.len(), payload);
    let ctx = RingContext { hp, seed };

    pretrain(&mut feds, ctx, &mut trace)?;
    let mut round = 0;
    for group in groups.iter().filter(|g| g.len() >= 2) {
        round = round.max(ring_rounds(&mut feds, group, ctx, 1, Stage::Stage1, &mut trace)?);
    }
    let representatives: Vec<usize> = groups.iter().map(|g| g[g.len() - 1]).collect();
    if groups.len() >= 2 {
        round = ring_rounds(&mut feds, &representatives, ctx, round + 1, Stage::GroupStage1, &mut trace)?;
    }
    let commons: Vec<CommonModel> = representatives
        .iter()
        .map(|&i| CommonModel {
            params: feds[i].model.clone(),
            source: feds[i].id,
        })
        .collect();
    for (group, common) in groups.iter().zip(&commons) {
        run_stage2(&mut feds, group, common, ctx, round + 1, &mut trace)?;
    }
    finish(trace, &feds, commons)
}
