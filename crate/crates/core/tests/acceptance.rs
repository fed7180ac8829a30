//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 6 to 8 train real desk-scale models and take minutes.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use autobid::auction::{
    compute_score, run_gsp_auction, simulate_episode, AuctionOutcome, CampaignConfig, EpisodeLog, ImpressionOpportunity,
    ScoreConfig, StepRecord,
};
use autobid::checkpoint::Container;
use autobid::dataset::{build_segments, read_dataset, trajectories, write_dataset, Dataset};
use autobid::harness::{self, RunConfig, Summary};
use autobid::loss::{penalty_bc, penalty_cpa, total_penalty_from_totals, LossConfig, LossKind, PenaltyConfig, PenaltyMode};
use autobid::model::{gradient_check, Batch, Model, ModelConfig, TrainedModel, Variant};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tiny_trajectory_segments(m: usize, len: usize, seed: u64) -> Vec<autobid::dataset::TrainingSegment> {
    let cfg = CampaignConfig { horizon: len, impressions_per_step: 40, budget: 60.0, seed, ..CampaignConfig::default() };
    let data = autobid::auction::SyntheticDataConfig { num_episodes: 2, ..Default::default() };
    let logs = autobid::auction::generate_synthetic_dataset(&cfg, &data).unwrap();
    let ds = Dataset::from_logs(&logs, &PenaltyConfig::default()).unwrap();
    let trajs = trajectories(&ds, &PenaltyConfig::default()).unwrap();
    let stats = autobid::dataset::NormStats::fit(&trajs).unwrap();
    build_segments(&stats.normalize(&trajs[0]), m).unwrap()
}

fn criterion_1() -> Check {
    let t0 = Instant::now();
    let cfg = ModelConfig { d_h: 4, num_blocks: 1, window: 3, horizon: 6, dropout_rate: 0.0, ..ModelConfig::default() };
    let model = Model::new(cfg, 17).map_err(err)?;
    let segs = tiny_trajectory_segments(3, 6, 5);
    let batch = Batch::new(&segs.iter().collect::<Vec<_>>()).map_err(err)?;
    let r = gradient_check(&model, &batch, LossKind::ConstraintAware, &LossConfig::default(), 1e-5, 1e-6).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(r.checked == model.num_parameters(), "not every parameter was checked")?;
    ensure(r.max_rel_err < 1e-4, format!("max rel err {:.3e} at {}", r.max_rel_err, r.worst))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} scalars, max rel err {:.2e}, {secs:.2}s", r.checked, r.max_rel_err))
}

fn criterion_2() -> Check {
    let t0 = Instant::now();
    let m = 8;
    let base = tiny_trajectory_segments(m, 12, 3).pop().unwrap();
    let mut pairs = 0;
    for variant in [Variant::ClbDt, Variant::VanillaDt] {
        let cfg = ModelConfig { d_h: 8, num_blocks: 2, window: m, horizon: 12, variant, ..ModelConfig::default() };
        let model = Model::new(cfg, 9).map_err(err)?;
        let (a0, r0) = model.predict(&Batch::new(&[&base]).map_err(err)?).map_err(err)?;
        for tp in 1..m {
            let mut seg = base.clone();
            seg.states[tp].iter_mut().for_each(|v| *v = -*v + 1.3);
            seg.rtg[tp] += 0.7;
            seg.actions[tp] += 2.0;
            seg.prev_actions[tp] -= 0.4;
            seg.timesteps[tp] = (seg.timesteps[tp] + 3) % 12;
            let (a, r) = model.predict(&Batch::new(&[&seg]).map_err(err)?).map_err(err)?;
            for t in 0..tp {
                pairs += 1;
                ensure(
                    a[t].to_bits() == a0[t].to_bits() && r[t].to_bits() == r0[t].to_bits(),
                    format!("{variant}: output {t} changed when input {tp} was perturbed"),
                )?;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!("{pairs} (t, t') pairs bit-identical over both variants, {secs:.2}s"))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

fn criterion_3() -> Check {
    let mut n = 0;
    let mut case = |ok: bool, what: &str| -> std::result::Result<(), String> {
        n += 1;
        ensure(ok, what.to_string())
    };
    for mode in [PenaltyMode::Literal, PenaltyMode::Clamped] {
        let cfg = PenaltyConfig { mode, ..PenaltyConfig::default() };
        case(penalty_cpa(1.0, 1.0, &cfg) == 1.0, "cpa_T = theta gives 1")?;
        case(penalty_cpa(2.0, 1.0, &cfg) == 4.0, "cpa_T = 2C gives 4")?;
        for (alpha, want) in [(1.5, 1.5f64 * 1.5f64.sqrt()), (2.0, 2.25), (3.0, 3.375)] {
            case(close(penalty_cpa(1.5, 1.0, &PenaltyConfig { alpha1: alpha, ..cfg }), want), "alpha1 sweep")?;
        }
        case(penalty_bc(1.0, 2.0) == 1.0, "full consumption")?;
        case(penalty_bc(0.5, 2.0) == 0.25, "half consumption")?;
        case(penalty_bc(0.0, 2.0) == 0.0, "zero consumption")?;
        let total = |cost: f64, value: f64, budget: f64| total_penalty_from_totals(cost, value, budget, 1.0, &cfg).unwrap();
        let compliant = total(10.0, 20.0, 10.0);
        case(compliant.p_total == 1.0 && compliant.p_cpa == 1.0, "compliant CPA, full budget")?;
        case(total(10.0, 5.0, 10.0).p_total == 4.0, "cpa 2C, full budget")?;
        case(total(5.0, 2.5, 10.0).p_total == 1.0, "cpa 2C, BC 0.5")?;
        let low = total(4.0, 2.0, 10.0).p_total;
        let want = if mode == PenaltyMode::Literal { 0.64 } else { 1.0 };
        case(close(low, want), "cpa 2C, BC 0.4")?;
        let boundary = total(5.0, 5.0, 10.0);
        case(boundary.cpa_t == 1.0 && boundary.p_cpa == 1.0, "boundary cpa_T = theta")?;
    }
    Ok(format!("{n} tabulated cases in literal and clamped modes"))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..10_000 {
        let competing: f64 = if i % 10 == 0 { 1.0 } else { rng.random_range(0.0..5.0) };
        let bid: f64 = if i % 10 == 0 { 1.0 } else { rng.random_range(0.0..5.0) };
        let opp = ImpressionOpportunity { value: rng.random_range(0.0..3.0), competing_bid: competing };
        let out = run_gsp_auction(bid, &opp).map_err(err)?;
        let won = bid > opp.competing_bid;
        let want = AuctionOutcome {
            won,
            cost: if won { opp.competing_bid } else { 0.0 },
            realized_value: if won { opp.value } else { 0.0 },
        };
        ensure(out == want, format!("auction {i}: {out:?} vs {want:?}"))?;
    }
    let mut worst = 0.0f64;
    for e in 0..1000u64 {
        let cfg = CampaignConfig {
            budget: rng.random_range(0.0..40.0),
            horizon: rng.random_range(1..12),
            impressions_per_step: rng.random_range(1..40),
            seed: e,
            ..CampaignConfig::default()
        };
        let lambda: f64 = rng.random_range(0.0..20.0);
        let mut policy = |_t: usize, _l: &EpisodeLog| lambda;
        let log = simulate_episode(&mut policy, &cfg).map_err(err)?;
        let mut spent = 0.0;
        for s in &log.steps {
            for o in &s.outcomes {
                if o.won {
                    spent += o.cost;
                }
            }
        }
        ensure(spent <= cfg.budget, format!("episode {e}: spent {spent} of {}", cfg.budget))?;
        if cfg.budget > 0.0 {
            worst = worst.max(spent / cfg.budget);
        }
    }
    Ok(format!("10000 auctions match the scalar loop; 1000 episodes within budget (max use {worst:.4})"))
}

fn hand_log(cost: f64, value: f64) -> EpisodeLog {
    let campaign = CampaignConfig { horizon: 1, impressions_per_step: 1, budget: 100.0, ..CampaignConfig::default() };
    let mut log = EpisodeLog::new(campaign);
    log.steps.push(StepRecord {
        action: 1.0,
        impressions: vec![ImpressionOpportunity { value, competing_bid: cost }],
        outcomes: vec![AuctionOutcome { won: true, cost, realized_value: value }],
        reward: value,
        cost,
        wins: 1,
    });
    log.cumulative_cost = cost;
    log.cumulative_value = value;
    log
}

fn criterion_5() -> Check {
    let sc = ScoreConfig::cpa(1.0, 2.0);
    let ok = compute_score(&hand_log(3.0, 6.0), &sc).map_err(err)?;
    ensure(ok.min_penalty == 1.0 && ok.score == 6.0, format!("compliant case: {ok:?}"))?;
    let over = compute_score(&hand_log(12.0, 6.0), &sc).map_err(err)?;
    ensure(over.min_penalty == 0.25 && over.score == 1.5, format!("cost-rate 2C case: {over:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for e in 0..100u64 {
        let cfg = CampaignConfig { horizon: 10, impressions_per_step: 30, budget: rng.random_range(5.0..60.0), seed: 100 + e, ..CampaignConfig::default() };
        let base: f64 = rng.random_range(0.0..3.0);
        let mut policy = |t: usize, _l: &EpisodeLog| base * (1.0 + 0.1 * (t % 3) as f64);
        let log = simulate_episode(&mut policy, &cfg).map_err(err)?;
        let (mut v, mut c) = (0.0, 0.0);
        for s in &log.steps {
            for (o, imp) in s.outcomes.iter().zip(&s.impressions) {
                if o.won {
                    v += imp.value;
                    c += imp.competing_bid;
                }
            }
        }
        let want = if v > 0.0 { v * (1.0 / (c / v)).powi(2).min(1.0) } else { 0.0 };
        let got = compute_score(&log, &sc).map_err(err)?.score;
        ensure((got - want).abs() <= 1e-10 * want.abs().max(1e-300), format!("episode {e}: {got} vs {want}"))?;
    }
    Ok("both fixed cases exact; 100 random episodes match the recomputation".into())
}

fn criterion_6(dir: &Path) -> Check {
    let cfg = RunConfig { output_dir: dir.to_path_buf(), ..RunConfig::default() };
    let gen = harness::cmd_gen_data(&cfg).map_err(err)?;
    let out = harness::cmd_train(&cfg).map_err(err)?;
    let r = &out.report;
    ensure(r.iterations == 2000 && gen.episodes == 100, "not a desk-scale run")?;
    let ratio = r.final_loss / r.baseline_loss;
    ensure(ratio <= 0.5, format!("smoothed loss {:.4} -> {:.4} (ratio {ratio:.3})", r.baseline_loss, r.final_loss))?;
    ensure(r.seconds < 600.0, format!("took {:.1}s", r.seconds))?;
    Ok(format!(
        "{} iterations on {} episodes: smoothed loss {:.4} -> {:.4} ({:.1}% reduction), {:.1}s",
        r.iterations,
        gen.episodes,
        r.baseline_loss,
        r.final_loss,
        100.0 * (1.0 - ratio),
        r.seconds
    ))
}

fn criterion_7(dir: &Path) -> std::result::Result<(String, harness::AblationReport), String> {
    let cfg = RunConfig {
        output_dir: dir.join("ablation"),
        dataset: Some(dir.join("dataset.txt")),
        ..RunConfig::default()
    };
    let report = harness::cmd_ablate(&cfg).map_err(err)?;
    ensure(report.rows.len() == 4, "grid must have four rows")?;
    for r in &report.rows {
        ensure(r.score.is_some(), format!("row ({}) failed: {:?}", r.label, r.error))?;
    }
    ensure(report.isolation_verified, format!("isolation: {:?}", report.isolation))?;
    ensure(report.seconds < 45.0 * 60.0, format!("took {:.1}s", report.seconds))?;
    let scores: Vec<String> = report.rows.iter().map(|r| format!("({}) {:.2}", r.label, r.score.unwrap())).collect();
    let detail = format!(
        "{}; isolation verified; (d) >= (a): {} [informational]; {:.0}s",
        scores.join(", "),
        report.d_at_least_a.unwrap_or(false),
        report.seconds
    );
    Ok((detail, report))
}

fn criterion_8(dir: &Path, ablation: Option<&harness::AblationReport>) -> Check {
    let ablation = ablation.ok_or("needs the ablation checkpoints from criterion 7")?;
    let ckpt = |label: &str| {
        ablation
            .rows
            .iter()
            .find(|r| r.label == label)
            .and_then(|r| r.checkpoint.clone())
            .ok_or(format!("row ({label}) has no checkpoint"))
    };
    let (c2, dt) = (ckpt("d")?, ckpt("a")?);
    let cfg = RunConfig {
        output_dir: dir.join("xcorr"),
        dataset: Some(dir.join("dataset.txt")),
        ..RunConfig::default()
    };
    let report = harness::cmd_xcorr(&cfg, &c2, &dt, 1000).map_err(err)?;
    for r in [&report.c2, &report.dt] {
        ensure(r.similarities.len() == 1000 && r.summary.count == 1000, "sample count")?;
        ensure(r.similarities.iter().all(|s| (-1.0..=1.0).contains(s)), format!("{} similarity outside [-1, 1]", r.label))?;
        let again = Summary::of(&r.similarities).map_err(err)?;
        ensure(again == r.summary, "summary does not match the per-sample list")?;
    }
    let ds = read_dataset(&cfg.dataset_path()).map_err(err)?;
    let identity = harness::xcorr(&cfg, &TrainedModel::load(&c2).map_err(err)?, &TrainedModel::load(&dt).map_err(err)?, &ds, 1000, true)
        .map_err(err)?;
    ensure(
        identity.c2.similarities.iter().chain(&identity.dt.similarities).all(|&s| s == 1.0),
        "identity permutation must give similarity 1",
    )?;
    Ok(format!(
        "c2 mean {:.4} median {:.4}; dt mean {:.4} median {:.4}; identity -> 1.0; c2 mean < dt mean: {} [informational]",
        report.c2.summary.mean,
        report.c2.summary.median,
        report.dt.summary.mean,
        report.dt.summary.median,
        report.c2_mean_below_dt
    ))
}

fn criterion_9(dir: &Path) -> Check {
    let small = RunConfig {
        campaign: CampaignConfig { horizon: 12, impressions_per_step: 50, budget: 200.0, ..CampaignConfig::default() },
        data: autobid::auction::SyntheticDataConfig { num_episodes: 30, ..Default::default() },
        model: ModelConfig { horizon: 12, ..ModelConfig::desk() },
        max_iterations: 40,
        batch_size: 32,
        num_eval_episodes: 3,
        ..RunConfig::default()
    };
    let (ds, _) = harness::generate_dataset(&small).map_err(err)?;
    let path = dir.join("roundtrip.txt");
    write_dataset(&path, &ds).map_err(err)?;
    ensure(read_dataset(&path).map_err(err)? == ds, "dataset changed across write/read")?;

    let mut runs = Vec::new();
    for k in 0..2 {
        let cfg = RunConfig { output_dir: dir.join(format!("repeat{k}")), ..small.clone() };
        harness::cmd_gen_data(&cfg).map_err(err)?;
        let out = harness::cmd_train(&cfg).map_err(err)?;
        let ckpt = cfg.output_dir.join("model.ckpt");
        let eval = harness::cmd_eval(&cfg, &ckpt).map_err(err)?;
        let bytes = fs::read(&ckpt).map_err(err)?;
        let loaded = Container::from_bytes(&bytes).map_err(err)?;
        ensure(loaded.to_bytes().map_err(err)? == bytes, "checkpoint save/load is not bit-exact")?;
        ensure(TrainedModel::load(&ckpt).map_err(err)? == out.trained, "checkpoint reload differs from the trained model")?;
        let files: Vec<Vec<u8>> = ["dataset.txt", "split.json", "model.ckpt", "train_log.jsonl", "eval_report.json"]
            .iter()
            .map(|f| fs::read(cfg.output_dir.join(f)).unwrap_or_default())
            .collect();
        runs.push((files, eval));
    }
    ensure(runs[0].0 == runs[1].0, "repeated runs wrote different artifacts")?;
    ensure(runs[0].1 == runs[1].1, "repeated runs produced different eval reports")?;
    Ok("dataset, checkpoint and repeated (config, seed) artifacts are bit-identical".into())
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]");
            true
        }
        Err(why) => {
            println!("FAIL criterion {n} ({name}): {why} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut ok = true;
    ok &= run(1, "gradient suite", criterion_1);
    ok &= run(2, "causality suite", criterion_2);
    ok &= run(3, "penalty suite", criterion_3);
    ok &= run(4, "auction oracle", criterion_4);
    ok &= run(5, "score oracle", criterion_5);
    ok &= run(6, "training smoke", || criterion_6(dir.path()));
    let mut ablation = None;
    ok &= run(7, "ablation protocol", || {
        let (detail, report) = criterion_7(dir.path())?;
        ablation = Some(report);
        Ok(detail)
    });
    ok &= run(8, "xcorr protocol", || criterion_8(dir.path(), ablation.as_ref()));
    ok &= run(9, "round-trip suite", || criterion_9(dir.path()));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
