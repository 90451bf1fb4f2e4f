//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use metafed::data::{gen_feature_shift, gen_gaussian_pool, gen_label_shift, FeatureShiftSpec, FederatedSplit, GaussianPoolSpec, PartitionSpec};
use metafed::harness::{build_split, run_experiment, run_sweep, DatasetSpec, ExperimentConfig, SweepAxis};
use metafed::losses::{lambda_schedule, teacher_features, total_loss, LossSpec, Tap};
use metafed::nncore::{backward, seeded_rng, Batch, Matrix, Mode, ModelParams};
use metafed::protocol::{
    comm_cost, init_federations, run, run_stage1, run_stage2, Branch, CommonModel, Grouping, HyperParams, Method,
    RingContext, RunOutcome, RunTrace, Stage,
};

const SEEDS: [u64; 3] = [0, 1, 2];

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Default label-shift benchmark splits and MetaFed runs, shared by the
/// criteria that need them.
struct Benchmark {
    splits: Vec<FederatedSplit>,
    metafed: Vec<RunOutcome>,
}

impl Benchmark {
    fn build() -> Self {
        let cfg = ExperimentConfig::default();
        let splits: Vec<FederatedSplit> = SEEDS.iter().map(|&s| build_split(&cfg, s).unwrap()).collect();
        let metafed = splits
            .iter()
            .zip(SEEDS)
            .map(|(split, seed)| run(split, &HyperParams::default(), seed).unwrap())
            .collect();
        Self { splits, metafed }
    }

    fn mean_acc(&self, method: Method) -> f64 {
        let hp = HyperParams {
            method,
            ..Default::default()
        };
        mean(
            &self
                .splits
                .iter()
                .zip(SEEDS)
                .map(|(split, seed)| run(split, &hp, seed).unwrap().mean_test_acc())
                .collect::<Vec<_>>(),
        )
    }
}

fn finite_difference(model: &ModelParams, batch: &Batch, spec: &LossSpec) -> Vec<f64> {
    let h = 1e-5;
    let base = model.trainable_params();
    let mut probe = model.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_trainable_params(&p).unwrap();
            let up = total_loss(batch, &probe, None, spec).unwrap().0;
            p[i] = base[i] - h;
            probe.set_trainable_params(&p).unwrap();
            let down = total_loss(batch, &probe, None, spec).unwrap().0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn gradient_oracle() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut rng = seeded_rng(1000 + seed);
        let input = rng.random_range(2..=4);
        let hidden = [rng.random_range(3..=6), rng.random_range(3..=6)];
        let classes = rng.random_range(2..=4);
        let normalize = seed % 2 == 0;
        let model = ModelParams::mlp(input, &hidden, classes, normalize, &mut rng).unwrap();
        let teacher = ModelParams::mlp(input, &hidden, classes, normalize, &mut rng).unwrap();
        let reference = ModelParams::mlp(input, &hidden, classes, normalize, &mut rng).unwrap();
        if model.trainable_count() > 200 {
            return Err(format!("model {seed} has {} parameters", model.trainable_count()));
        }
        let n = rng.random_range(4..=6);
        let x: Vec<f64> = (0..n * input).map(|_| rng.sample(StandardNormal)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let batch = Batch::new(Matrix::from_vec(n, input, x).unwrap(), labels).unwrap();

        let mut specs = vec![LossSpec::classification()];
        for tap in Tap::ALL {
            let feats = teacher_features(&teacher, &batch.inputs, tap).unwrap();
            specs.push(LossSpec::distillation(1.0, tap, feats));
        }
        specs.push(LossSpec::proximal(0.1, &reference));
        for spec in &specs {
            let pass = model.forward(&batch.inputs, Mode::Train).unwrap();
            let analytic = backward(&model, &pass, &batch.labels, spec).unwrap().flatten();
            let numeric = finite_difference(&model, &batch, spec);
            for (a, f) in analytic.iter().zip(&numeric) {
                worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(1e-6));
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < 1e-4 && secs < 10.0,
        format!("{checked} model/loss pairs, max relative error {worst:.2e}, {secs:.2} s"),
    )
}

fn lambda_exactness() -> Check {
    let mut worst: f64 = 0.0;
    for lambda0 in [0.1, 1.0, 5.0, 10.0] {
        for i in 0..=100 {
            for j in 0..=100 {
                let (c, l) = (i as f64 / 100.0, j as f64 / 100.0);
                let exponent = f64::min(1.0, 5.0 * (c - l)) - 1.0;
                let direct = lambda0 * (exponent * std::f64::consts::LN_10).exp();
                worst = worst.max((lambda_schedule(lambda0, c, l) - direct).abs());
            }
        }
    }
    ensure(worst < 1e-12, format!("101x101 grid for 4 values of lambda0, max abs error {worst:.2e}"))
}

fn small_split(seed: u64) -> FederatedSplit {
    let pool = gen_gaussian_pool(&GaussianPoolSpec {
        classes: 4,
        dim: 8,
        samples: 800,
        seed,
        ..Default::default()
    })
    .unwrap();
    gen_label_shift(
        &pool,
        &PartitionSpec {
            federation_count: 4,
            alpha: 1.0,
            fractions: metafed::data::Fractions::LABEL_SHIFT,
            seed,
        },
    )
    .unwrap()
}

fn check_soundness(trace: &RunTrace, hp: &HyperParams) -> Result<(), String> {
    for r in &trace.records {
        match r.stage {
            Stage::Stage1 => {
                if (r.branch == Branch::Copy) != (r.valid_acc <= hp.l_t1) {
                    return Err(format!("stage I record {r:?}"));
                }
            }
            Stage::Stage2 => {
                let c = r.acc_common.ok_or("stage II record without common accuracy")?;
                let zero = c <= r.valid_acc && c < hp.l_t2;
                if (r.lambda == 0.0) != zero {
                    return Err(format!("stage II record {r:?}"));
                }
                if !zero && r.lambda != lambda_schedule(hp.lambda0, c, r.valid_acc) {
                    return Err(format!("stage II lambda off schedule {r:?}"));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Runs Stage I, then Stage II against either the real common model (with
/// `l_t2 = -1`, forcing the adaptive branch) or each federation's own model
/// (with `l_t2 = 1.1`, forcing `λ = 0` since the accuracies tie).
fn branch_scenario(l_t1: f64, zero_stage2: bool) -> Result<(Vec<Branch>, Vec<Branch>), String> {
    let split = small_split(5);
    let hp = HyperParams {
        l_t1,
        l_t2: if zero_stage2 { 1.1 } else { -1.0 },
        rounds_stage1: 2,
        local_iters: 10,
        hidden: vec![16, 16],
        ..Default::default()
    };
    let mut feds = init_federations(&split, &hp, 5, true).map_err(|e| e.to_string())?;
    let order: Vec<usize> = (0..feds.len()).collect();
    let mut trace = RunTrace::new(Method::Metafed, feds.len(), 0);
    let ctx = RingContext { hp: &hp, seed: 5 };
    let common = run_stage1(&mut feds, &order, ctx, &mut trace).map_err(|e| e.to_string())?;
    let round = hp.rounds_stage1 + 1;
    if zero_stage2 {
        for i in 0..feds.len() {
            let own = CommonModel {
                params: feds[i].model.clone(),
                source: i,
            };
            run_stage2(&mut feds, &[i], &own, ctx, round, &mut trace).map_err(|e| e.to_string())?;
        }
    } else {
        run_stage2(&mut feds, &order, &common, ctx, round, &mut trace).map_err(|e| e.to_string())?;
    }
    check_soundness(&trace, &hp)?;
    let s1 = trace.stage_records(Stage::Stage1).map(|r| r.branch).collect();
    let s2 = trace.stage_records(Stage::Stage2).map(|r| r.branch).collect();
    Ok((s1, s2))
}

fn branch_soundness() -> Check {
    let mut lines = Vec::new();
    for (l_t1, stage1) in [(0.0, Branch::Distill), (1.1, Branch::Copy)] {
        for (zero, stage2) in [(true, Branch::ZeroLambda), (false, Branch::Adaptive)] {
            let (s1, s2) = branch_scenario(l_t1, zero)?;
            if s1.is_empty() || s2.is_empty() || s1.iter().any(|b| *b != stage1) || s2.iter().any(|b| *b != stage2) {
                return Err(format!("l_t1={l_t1}: expected {stage1}/{stage2}, got {s1:?}/{s2:?}"));
            }
            lines.push(format!("{stage1}x{stage2}"));
        }
    }
    Ok(format!("combinations {} all sound", lines.join(", ")))
}

fn label_shift_ordering(bench: &Benchmark) -> Check {
    let start = Instant::now();
    let metafed = mean(&bench.metafed.iter().map(RunOutcome::mean_test_acc).collect::<Vec<_>>());
    let fedavg = bench.mean_acc(Method::Fedavg);
    let local = bench.mean_acc(Method::Local);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        metafed - fedavg >= 0.02 && metafed >= local && secs < 300.0,
        format!("metafed {metafed:.4}, fedavg {fedavg:.4}, local {local:.4}, baselines took {secs:.1} s"),
    )
}

fn feature_shift_ordering() -> Check {
    let acc = |method: Method| {
        let hp = HyperParams {
            method,
            ..Default::default()
        };
        mean(
            &SEEDS
                .iter()
                .map(|&seed| {
                    let split = gen_feature_shift(&FeatureShiftSpec { seed, ..Default::default() }).unwrap();
                    run(&split, &hp, seed).unwrap().mean_test_acc()
                })
                .collect::<Vec<_>>(),
        )
    };
    let (fedavg, fedbn, metafed) = (acc(Method::Fedavg), acc(Method::Fedbn), acc(Method::Metafed));
    let tie = 0.005;
    ensure(
        fedbn + tie >= fedavg && metafed + tie >= fedbn,
        format!("fedavg {fedavg:.4}, fedbn {fedbn:.4}, metafed {metafed:.4}"),
    )
}

fn communication_budget(out: &Path) -> Check {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    cfg.sweep.budget_rounds = vec![1, 2, 3, 10];
    let table = run_sweep(&cfg, SweepAxis::Budget).map_err(|e| e.to_string())?;
    let acc = |rounds: &str, method| table.row(rounds, method).unwrap().mean_test_acc;
    if table.rows.iter().any(|r| r.steps != cfg.sweep.budget_steps) {
        return Err("rounds x local_iters varies across rows".into());
    }
    let fedavg_drop = acc("10", Method::Fedavg) - acc("1", Method::Fedavg);
    let metafed_drops: Vec<f64> = ["1", "2", "3"]
        .iter()
        .map(|r| acc("10", Method::Metafed) - acc(r, Method::Metafed))
        .collect();
    let worst = metafed_drops.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ensure(
        worst < fedavg_drop,
        format!(
            "metafed drops at 1/2/3 rounds {:.4}/{:.4}/{:.4}, fedavg drop at 1 round {fedavg_drop:.4}",
            metafed_drops[0], metafed_drops[1], metafed_drops[2]
        ),
    )
}

fn communication_counts() -> Check {
    let split = small_split(7);
    let hp = HyperParams {
        rounds_stage1: 3,
        local_iters: 5,
        hidden: vec![8, 8],
        ..Default::default()
    };
    let metafed = run(&split, &hp, 7).map_err(|e| e.to_string())?;
    let fedavg = run(&split, &HyperParams { method: Method::Fedavg, ..hp }, 7).map_err(|e| e.to_string())?;
    let p = metafed.models[0].serialized_len() as u64;
    let (m, f) = (comm_cost(&metafed.trace), comm_cost(&fedavg.trace));
    let monotone = |t: &RunTrace| t.cumulative_bytes().windows(2).all(|w| w[0] <= w[1]);
    ensure(
        m.payloads == 16 && f.payloads == 24 && m.total_bytes == 16 * p && f.total_bytes == 24 * p
            && monotone(&metafed.trace) && monotone(&fedavg.trace),
        format!("metafed {} payloads / {} bytes, fedavg {} payloads / {} bytes, P = {p}", m.payloads, m.total_bytes, f.payloads, f.total_bytes),
    )
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn conservation_and_determinism(tmp: &Path) -> Check {
    for seed in 0..5 {
        let pool = gen_gaussian_pool(&GaussianPoolSpec {
            samples: 2000,
            seed,
            ..Default::default()
        })
        .unwrap();
        let split = gen_label_shift(
            &pool,
            &PartitionSpec {
                federation_count: 20,
                alpha: 0.5,
                fractions: metafed::data::Fractions::LABEL_SHIFT,
                seed,
            },
        )
        .unwrap();
        let key = |row: &[f64], y: usize| (row.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y);
        let mut expected: Vec<_> = (0..pool.len()).map(|i| key(pool.samples().row(i), pool.labels()[i])).collect();
        let mut got = Vec::new();
        for fed in &split.federations {
            for part in [&fed.train, &fed.valid, &fed.test] {
                got.extend((0..part.len()).map(|i| key(part.samples().row(i), part.labels()[i])));
            }
        }
        expected.sort();
        got.sort();
        if expected != got {
            return Err(format!("seed {seed}: partition does not conserve the pool"));
        }
    }

    let mut cfg = ExperimentConfig {
        dataset: DatasetSpec::LabelShift(GaussianPoolSpec {
            samples: 1500,
            ..Default::default()
        }),
        seeds: vec![3, 4],
        ..Default::default()
    };
    cfg.partition.federations = 6;
    cfg.hyper.rounds_stage1 = 2;
    cfg.hyper.local_iters = 10;
    for method in Method::ALL {
        cfg.hyper.method = method;
        let mut trees = Vec::new();
        for copy in ["a", "b"] {
            cfg.out_dir = tmp.join(format!("{method}_{copy}"));
            run_experiment(&cfg).map_err(|e| e.to_string())?;
            trees.push(read_tree(&cfg.out_dir));
        }
        if trees[0] != trees[1] || trees[0].is_empty() {
            return Err(format!("{method}: outputs differ between identical runs"));
        }
    }
    Ok(format!("pool multiset conserved for 5 seeds; {} modes byte-identical across reruns", Method::ALL.len()))
}

fn convergence(bench: &Benchmark) -> Check {
    let rounds = HyperParams::default().rounds_stage1;
    let mut first_acc = Vec::new();
    let mut last_acc = Vec::new();
    let mut first_loss = Vec::new();
    let mut last_loss = Vec::new();
    for outcome in &bench.metafed {
        let acc = outcome.trace.per_round_mean(Stage::Stage1, |r| r.valid_acc_after);
        let loss = outcome.trace.per_round_mean(Stage::Stage1, |r| r.loss_total);
        if acc.len() != rounds {
            return Err(format!("expected {rounds} stage I rounds, found {}", acc.len()));
        }
        first_acc.push(acc[0].1);
        last_acc.push(acc[rounds - 1].1);
        first_loss.push(loss[0].1);
        last_loss.push(loss[rounds - 1].1);
    }
    let (a0, a1, l0, l1) = (mean(&first_acc), mean(&last_acc), mean(&first_loss), mean(&last_loss));
    ensure(
        a1 >= a0 && l1 < l0,
        format!("valid acc round 1 {a0:.4} -> round {rounds} {a1:.4}; train loss {l0:.4} -> {l1:.4}"),
    )
}

fn grouped_degeneracy(bench: &Benchmark) -> Check {
    let split = &bench.splits[0];
    let n = split.federations.len();
    let hp = HyperParams {
        method: Method::MetafedPp,
        groups: Some(Grouping::Explicit(vec![(0..n).collect()])),
        ..Default::default()
    };
    let grouped = run(split, &hp, SEEDS[0]).map_err(|e| e.to_string())?;
    let plain = &bench.metafed[0];
    let (a, b) = (plain.trace.to_csv(), grouped.trace.to_csv());
    ensure(
        a == b && plain.trace.records == grouped.trace.records,
        format!("{} trace bytes, {} records compared", a.len(), plain.trace.records.len()),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut bench: Option<Benchmark> = None;
    let mut failures = 0;
    let mut report = |name: &str, check: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    };

    report("gradient oracle", &mut gradient_oracle);
    report("lambda schedule exactness", &mut lambda_exactness);
    report("branch soundness", &mut branch_soundness);
    report("label-shift ordering", &mut || {
        let b = bench.get_or_insert_with(Benchmark::build);
        label_shift_ordering(b)
    });
    report("feature-shift ordering", &mut feature_shift_ordering);
    report("communication budget", &mut || communication_budget(&tmp.path().join("budget")));
    report("communication counters", &mut communication_counts);
    report("conservation and determinism", &mut || conservation_and_determinism(tmp.path()));
    report("convergence", &mut || convergence(bench.get_or_insert_with(Benchmark::build)));
    report("grouped degeneracy", &mut || grouped_degeneracy(bench.get_or_insert_with(Benchmark::build)));

    println!("{} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
