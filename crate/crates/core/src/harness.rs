//! Experiment drivers behind the CLI: data generation, training, budget-grid
//! evaluation, the four-row ablation grid and the embedding cross-correlation
//! probe. Every driver is deterministic in `(RunConfig, seed)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auction::{compute_score, generate_synthetic_dataset, CampaignConfig, ScoreConfig, SyntheticDataConfig};
use crate::dataset::{
    build_segment, build_segments, encode_dataset, read_dataset, trajectories, Dataset, NormStats, SplitManifest,
    TrainingSegment, Trajectory,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{LossConfig, LossKind, PenaltyConfig, PenaltyMode};
use crate::model::{Batch, LossParts, Model, ModelConfig, TrainedModel, Variant};
use crate::params::AdamWConfig;
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub campaign: CampaignConfig,
    pub data: SyntheticDataConfig,
    pub model: ModelConfig,
    pub penalty: PenaltyConfig,
    pub loss: LossConfig,
    pub loss_kind: LossKind,
    pub score: ScoreConfig,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub log_every: u64,
    pub seed: u64,
    pub budget_ratios: Vec<f64>,
    pub num_eval_episodes: usize,
    pub validation_fraction: f64,
    pub xcorr_samples: usize,
    pub output_dir: PathBuf,
    /// Dataset file; defaults to `<output_dir>/dataset.txt`.
    pub dataset: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            campaign: CampaignConfig::default(),
            data: SyntheticDataConfig::default(),
            model: ModelConfig::desk(),
            penalty: PenaltyConfig::default(),
            loss: LossConfig::default(),
            loss_kind: LossKind::ConstraintAware,
            score: ScoreConfig::default(),
            batch_size: 128,
            max_iterations: 2000,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            log_every: 50,
            seed: 42,
            budget_ratios: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            num_eval_episodes: 20,
            validation_fraction: 0.1,
            xcorr_samples: 1000,
            output_dir: PathBuf::from("runs/default"),
            dataset: None,
        }
    }
}

impl RunConfig {
    /// Full-scale settings: the large model, a
    /// `1e-5` learning rate and 10k iterations.
    pub fn full_scale() -> Self {
        Self {
            model: ModelConfig::default(),
            max_iterations: 10_000,
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    /// Reads a TOML or JSON file, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => return Err(Error::Config(format!("{}: expected a .toml or .json config", path.display()))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.campaign.validate()?;
        self.model.validate()?;
        self.penalty.validate()?;
        self.loss.validate()?;
        self.score.validate()?;
        self.adamw().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if self.budget_ratios.is_empty() || self.budget_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("budget_ratios must be a nonempty list of positive numbers".into()));
        }
        if self.num_eval_episodes == 0 {
            return Err(Error::Config("num_eval_episodes must be >= 1".into()));
        }
        if self.model.horizon != self.campaign.horizon {
            return Err(Error::Config(format!(
                "model.horizon {} must equal campaign.horizon {}",
                self.model.horizon, self.campaign.horizon
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.output_dir.join("dataset.txt"))
    }

    /// SHA-256 of the canonical JSON encoding, with file locations left out.
    pub fn fingerprint(&self) -> String {
        let semantic = RunConfig { output_dir: PathBuf::new(), dataset: None, ..self.clone() };
        sha256_hex(serde_json::to_string(&semantic).expect("config serialises").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub episodes: usize,
    pub train_episodes: usize,
    pub validation_episodes: usize,
    /// Episodes whose terminal CPA is within the threshold (`P_cpa = 1`).
    pub cpa_compliant: usize,
    pub cpa_violating: usize,
    pub dataset_path: PathBuf,
    pub split_path: PathBuf,
    pub dataset_fingerprint: String,
}

/// Generates the synthetic dataset in memory.
pub fn generate_dataset(cfg: &RunConfig) -> Result<(Dataset, SplitManifest)> {
    cfg.validate()?;
    let campaign = CampaignConfig { seed: derive_seed(cfg.seed, &[0x6E4D]), ..cfg.campaign };
    let logs = generate_synthetic_dataset(&campaign, &cfg.data)?;
    let ds = Dataset::from_logs(&logs, &cfg.penalty)?;
    let split = SplitManifest::random(&ds, cfg.validation_fraction, cfg.seed)?;
    Ok((ds, split))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataReport> {
    let (ds, split) = generate_dataset(cfg)?;
    let dataset_path = cfg.dataset_path();
    if let Some(dir) = dataset_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let text = encode_dataset(&ds);
    fs::write(&dataset_path, &text).map_err(|e| Error::io(&dataset_path, e))?;
    let split_path = split_path_for(&dataset_path);
    split.save(&split_path)?;
    let cpa_violating = ds.episodes.iter().filter(|e| e.header.penalty.p_cpa > 1.0).count();
    Ok(GenDataReport {
        episodes: ds.len(),
        train_episodes: split.train.len(),
        validation_episodes: split.validation.len(),
        cpa_compliant: ds.len() - cpa_violating,
        cpa_violating,
        dataset_path,
        split_path,
        dataset_fingerprint: sha256_hex(text.as_bytes()),
    })
}

fn split_path_for(dataset: &Path) -> PathBuf {
    dataset.with_file_name("split.json")
}

/// Dataset, split manifest and dataset fingerprint read from disk.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, SplitManifest, String)> {
    let path = cfg.dataset_path();
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let ds = read_dataset(&path)?;
    let split = SplitManifest::load(&split_path_for(&path))?;
    Ok((ds, split, sha256_hex(&bytes)))
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub action_loss: f64,
    pub rtg_loss: f64,
    /// Mean total loss over the `log_every` iterations ending here.
    pub smoothed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub loss_kind: LossKind,
    pub penalty_mode: PenaltyMode,
    pub iterations: u64,
    pub final_step: u64,
    pub num_parameters: usize,
    pub train_segments: usize,
    /// Mean loss of the first `log_every` iterations of this run.
    pub baseline_loss: f64,
    /// Mean loss of the last `log_every` iterations.
    pub final_loss: f64,
    pub validation_loss: Option<f64>,
    pub seconds: f64,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub history: Vec<LossRecord>,
    pub report: TrainReport,
}

/// Model-ready segments of `ids`, normalised with `norm`.
pub fn segments_for(ds: &Dataset, ids: &[u64], norm: &NormStats, cfg: &RunConfig) -> Result<Vec<TrainingSegment>> {
    let trajs = trajectories(&ds.subset(ids)?, &cfg.penalty)?;
    let mut out = Vec::new();
    for t in &trajs {
        out.extend(build_segments(&norm.normalize(t), cfg.model.window)?);
    }
    Ok(out)
}

fn divergence(iteration: u64, err: Error) -> Error {
    match err {
        Error::NonFinite(_) => Error::Divergence { iteration, loss: f64::NAN },
        other => other,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs `cfg.max_iterations` AdamW steps. With `resume`, training continues
/// from the checkpoint's parameters, moments and step counter.
pub fn train(cfg: &RunConfig, ds: &Dataset, split: &SplitManifest, dataset_fingerprint: &str, resume: Option<TrainedModel>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let train_trajs: Vec<Trajectory> = trajectories(&ds.subset(&split.train)?, &cfg.penalty)?;
    let (norm, mut model) = match resume {
        Some(t) => {
            if t.model.config != cfg.model {
                return Err(Error::Compatibility("resume checkpoint was trained with a different model config".into()));
            }
            (t.norm, t.model)
        }
        None => (NormStats::fit(&train_trajs)?, Model::new(cfg.model.clone(), derive_seed(cfg.seed, &[0x3D31]))?),
    };
    let max_return = train_trajs.iter().map(Trajectory::total_return).fold(0.0, f64::max);
    let segments = segments_for(ds, &split.train, &norm, cfg)?;
    if segments.is_empty() {
        return Err(Error::Config("training split has no segments".into()));
    }
    let adamw = cfg.adamw();
    let start = model.params.iter().next().map_or(0, |(_, e)| e.step);
    let mut history = Vec::new();
    let mut recent: Vec<f64> = Vec::new();
    let mut all_losses = Vec::with_capacity(cfg.max_iterations as usize);
    for iteration in start..start + cfg.max_iterations {
        let mut rng = stream(cfg.seed, &[0xBA7C, iteration]);
        let picks: Vec<&TrainingSegment> = (0..cfg.batch_size)
            .map(|_| &segments[rng.random_range(0..segments.len())])
            .collect();
        let batch = Batch::new(&picks)?;
        let mut g = Graph::new();
        let bindings = model.params.bind(&mut g);
        let dropout_seed = derive_seed(cfg.seed, &[0xD20F, iteration]);
        let (loss, parts) = model
            .loss(&mut g, &bindings, &batch, cfg.loss_kind, &cfg.loss, true, dropout_seed)
            .map_err(|e| divergence(iteration, e))?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence { iteration, loss: parts.total });
        }
        g.backward(loss).map_err(|e| divergence(iteration, e))?;
        model.params.accumulate_grads(&g, &bindings)?;
        model.params.adamw_step(&adamw)?;
        all_losses.push(parts.total);
        recent.push(parts.total);
        if recent.len() as u64 == cfg.log_every || iteration + 1 == start + cfg.max_iterations {
            history.push(LossRecord {
                iteration: iteration + 1,
                loss: parts.total,
                action_loss: parts.action,
                rtg_loss: parts.rtg,
                smoothed: mean(&recent),
            });
            recent.clear();
        }
    }
    let window = (cfg.log_every as usize).min(all_losses.len()).max(1);
    let baseline_loss = if all_losses.is_empty() { f64::NAN } else { mean(&all_losses[..window]) };
    let final_loss = if all_losses.is_empty() { f64::NAN } else { mean(&all_losses[all_losses.len() - window..]) };

    let validation_loss = if split.validation.is_empty() {
        None
    } else {
        let val = segments_for(ds, &split.validation, &norm, cfg)?;
        Some(evaluate_loss(&model, &val, cfg)?.total)
    };
    let final_step = model.params.iter().next().map_or(0, |(_, e)| e.step);
    let report = TrainReport {
        variant: cfg.model.variant,
        loss_kind: cfg.loss_kind,
        penalty_mode: cfg.penalty.mode,
        iterations: cfg.max_iterations,
        final_step,
        num_parameters: model.num_parameters(),
        train_segments: segments.len(),
        baseline_loss,
        final_loss,
        validation_loss,
        seconds: started.elapsed().as_secs_f64(),
        config_fingerprint: cfg.fingerprint(),
        dataset_fingerprint: dataset_fingerprint.to_string(),
    };
    let info = serde_json::json!({
        "loss_kind": cfg.loss_kind,
        "penalty_mode": cfg.penalty.mode,
        "config_fingerprint": report.config_fingerprint,
        "dataset_fingerprint": dataset_fingerprint,
        "seed": cfg.seed,
    });
    Ok(TrainOutcome {
        trained: TrainedModel { model, norm, max_return, info },
        history,
        report,
    })
}

/// Evaluation-mode loss over `segments`.
pub fn evaluate_loss(model: &Model, segments: &[TrainingSegment], cfg: &RunConfig) -> Result<LossParts> {
    let refs: Vec<&TrainingSegment> = segments.iter().collect();
    let batch = Batch::new(&refs)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    Ok(model.loss(&mut g, &p, &batch, cfg.loss_kind, &cfg.loss, false, 0)?.1)
}

/// Trains on the configured dataset and writes `model.ckpt`,
/// `train_log.jsonl` and `train_report.json` to the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (ds, split, fp) = load_dataset(cfg)?;
    let outcome = train(cfg, &ds, &split, &fp, None)?;
    create_dir(&cfg.output_dir)?;
    outcome.trained.save(&cfg.output_dir.join("model.ckpt"))?;
    write_jsonl(&cfg.output_dir.join("train_log.jsonl"), &outcome.history)?;
    write_json(&cfg.output_dir.join("train_report.json"), &outcome.report)?;
    Ok(outcome)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub budget_ratio: f64,
    pub budget: f64,
    pub episodes: usize,
    /// Mean per-episode score.
    pub score: f64,
    /// Mean per-episode penalty of each KPI.
    pub penalties: Vec<(String, f64)>,
    pub total_value: f64,
    pub total_cost: f64,
    pub cpa: f64,
    pub bc: f64,
    pub episode_scores: Vec<f64>,
    pub variant: Variant,
    pub loss_kind: LossKind,
    pub penalty_mode: PenaltyMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub variant: Variant,
    pub loss_kind: LossKind,
    pub penalty_mode: PenaltyMode,
    pub config_fingerprint: String,
    pub seed: u64,
}

/// Campaign of evaluation episode `k` at `ratio` times the base budget.
pub fn eval_campaign(cfg: &RunConfig, ratio: f64, k: usize) -> CampaignConfig {
    CampaignConfig {
        budget: cfg.campaign.budget * ratio,
        seed: derive_seed(cfg.seed, &[0xE7A1, k as u64]),
        ..cfg.campaign
    }
}

fn info_enum<T: for<'de> Deserialize<'de>>(trained: &TrainedModel, key: &str, fallback: T) -> T {
    serde_json::from_value(trained.info[key].clone()).unwrap_or(fallback)
}

pub fn evaluate(cfg: &RunConfig, trained: &TrainedModel) -> Result<EvalReport> {
    cfg.validate()?;
    let mc = &trained.model.config;
    if mc.horizon != cfg.campaign.horizon {
        return Err(Error::Compatibility(format!(
            "checkpoint horizon {} differs from campaign horizon {}",
            mc.horizon, cfg.campaign.horizon
        )));
    }
    let loss_kind = info_enum(trained, "loss_kind", cfg.loss_kind);
    let penalty_mode = info_enum(trained, "penalty_mode", cfg.penalty.mode);
    let mut rows = Vec::new();
    for &ratio in &cfg.budget_ratios {
        let target = trained.max_return * ratio;
        let n = cfg.num_eval_episodes;
        let mut scores = Vec::with_capacity(n);
        let mut penalty_sums: Vec<(String, f64)> = cfg.score.kpis.iter().map(|k| (k.name.clone(), 0.0)).collect();
        let (mut value, mut cost, mut cpa, mut bc) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..n {
            let campaign = eval_campaign(cfg, ratio, k);
            let log = trained.rollout(&campaign, target)?;
            let report = compute_score(&log, &cfg.score)?;
            scores.push(report.score);
            for (slot, (_, p)) in penalty_sums.iter_mut().zip(&report.penalties) {
                slot.1 += p;
            }
            value += report.total_value;
            cost += report.total_cost;
            cpa += if report.total_value > 0.0 { report.total_cost / report.total_value } else { 0.0 };
            bc += if campaign.budget > 0.0 { report.total_cost / campaign.budget } else { 0.0 };
        }
        let nf = n as f64;
        rows.push(EvalRow {
            budget_ratio: ratio,
            budget: cfg.campaign.budget * ratio,
            episodes: n,
            score: mean(&scores),
            penalties: penalty_sums.into_iter().map(|(k, s)| (k, s / nf)).collect(),
            total_value: value / nf,
            total_cost: cost / nf,
            cpa: cpa / nf,
            bc: bc / nf,
            episode_scores: scores,
            variant: mc.variant,
            loss_kind,
            penalty_mode,
        });
    }
    Ok(EvalReport {
        rows,
        variant: mc.variant,
        loss_kind,
        penalty_mode,
        config_fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
    })
}

/// Evaluates a checkpoint and writes `eval_report.json` and `eval_rows.jsonl`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let trained = TrainedModel::load(checkpoint)?;
    let report = evaluate(cfg, &trained)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("eval_report.json"), &report)?;
    write_jsonl(&cfg.output_dir.join("eval_rows.jsonl"), &report.rows)?;
    Ok(report)
}

pub fn render_eval(report: &EvalReport) -> String {
    let mut out = format!(
        "variant {}  loss {}  penalty mode {}  config {}\n",
        report.variant,
        report.loss_kind,
        report.penalty_mode,
        &report.config_fingerprint[..12]
    );
    let _ = writeln!(out, "{:>6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>6} {:>8}", "ratio", "budget", "score", "value", "cost", "cpa", "bc", "penalty");
    for r in &report.rows {
        let pen = r.penalties.iter().map(|(_, p)| *p).fold(f64::INFINITY, f64::min);
        let _ = writeln!(
            out,
            "{:>6.2} {:>10.2} {:>10.3} {:>10.3} {:>10.3} {:>8.3} {:>6.3} {:>8.3}",
            r.budget_ratio, r.budget, r.score, r.total_value, r.total_cost, r.cpa, r.bc, pen
        );
    }
    out
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub loss_kind: LossKind,
    pub penalty_mode: PenaltyMode,
    pub config_fingerprint: String,
    /// `None` when the row failed.
    pub score: Option<f64>,
    pub error: Option<String>,
    pub num_parameters: Option<usize>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationCheck {
    pub rows: (String, String),
    pub expected: Vec<String>,
    pub differing: Vec<String>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub isolation: Vec<IsolationCheck>,
    pub isolation_verified: bool,
    /// Whether row (d) scored at least as well as row (a); informational.
    pub d_at_least_a: Option<bool>,
    pub budget_ratio: f64,
    pub seed: u64,
    pub seconds: f64,
}

/// The four ablation configurations, labelled (a) to (d).
pub fn ablation_configs(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    let grid = [
        ("a", Variant::VanillaDt, LossKind::PlainMse),
        ("b", Variant::VanillaDt, LossKind::ConstraintAware),
        ("c", Variant::ClbDt, LossKind::PlainMse),
        ("d", Variant::ClbDt, LossKind::ConstraintAware),
    ];
    grid.iter()
        .map(|&(label, variant, loss_kind)| {
            let mut c = cfg.clone();
            c.model.variant = variant;
            c.loss_kind = loss_kind;
            c.budget_ratios = vec![1.0];
            c.output_dir = cfg.output_dir.join(format!("row_{label}"));
            (label.to_string(), c)
        })
        .collect()
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Leaf paths at which two configs differ, ignoring file locations.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a).expect("config serialises"), &mut fa);
    flatten("", &serde_json::to_value(b).expect("config serialises"), &mut fb);
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter(|k| k.as_str() != "output_dir" && k.as_str() != "dataset" && fa.get(*k) != fb.get(*k))
        .cloned()
        .collect()
}

/// Checks that each compared pair of rows differs in exactly the intended
/// flag and that their fingerprints differ accordingly.
pub fn isolation_checks(rows: &[(String, RunConfig)]) -> Vec<IsolationCheck> {
    let pairs = [(0, 1, "loss_kind"), (2, 3, "loss_kind"), (0, 2, "model.variant"), (1, 3, "model.variant")];
    pairs
        .iter()
        .map(|&(i, j, flag)| {
            let differing = config_diff(&rows[i].1, &rows[j].1);
            let fp_differs = rows[i].1.fingerprint() != rows[j].1.fingerprint();
            IsolationCheck {
                rows: (rows[i].0.clone(), rows[j].0.clone()),
                expected: vec![flag.to_string()],
                ok: differing == [flag] && fp_differs,
                differing,
            }
        })
        .collect()
}

/// Trains and scores the four rows at 100% budget on one dataset. A failing
/// row is reported and does not stop the others.
pub fn ablate(cfg: &RunConfig, ds: &Dataset, split: &SplitManifest, dataset_fingerprint: &str, save: bool) -> Result<AblationReport> {
    cfg.validate()?;
    let started = Instant::now();
    let configs = ablation_configs(cfg);
    let isolation = isolation_checks(&configs);
    let mut rows = Vec::new();
    for (label, c) in &configs {
        let t0 = Instant::now();
        let result = train(c, ds, split, dataset_fingerprint, None).and_then(|outcome| {
            let eval = evaluate(c, &outcome.trained)?;
            let checkpoint = if save {
                create_dir(&c.output_dir)?;
                let path = c.output_dir.join("model.ckpt");
                outcome.trained.save(&path)?;
                write_jsonl(&c.output_dir.join("train_log.jsonl"), &outcome.history)?;
                write_json(&c.output_dir.join("eval_report.json"), &eval)?;
                Some(path)
            } else {
                None
            };
            Ok((outcome, eval, checkpoint))
        });
        let mut row = AblationRow {
            label: label.clone(),
            variant: c.model.variant,
            loss_kind: c.loss_kind,
            penalty_mode: c.penalty.mode,
            config_fingerprint: c.fingerprint(),
            score: None,
            error: None,
            num_parameters: None,
            final_loss: None,
            seconds: 0.0,
            checkpoint: None,
        };
        match result {
            Ok((outcome, eval, checkpoint)) => {
                row.score = Some(eval.rows[0].score);
                row.num_parameters = Some(outcome.report.num_parameters);
                row.final_loss = Some(outcome.report.final_loss);
                row.checkpoint = checkpoint;
            }
            Err(e) => row.error = Some(format!("{}: {e}", e.category())),
        }
        row.seconds = t0.elapsed().as_secs_f64();
        rows.push(row);
    }
    let d_at_least_a = match (rows[3].score, rows[0].score) {
        (Some(d), Some(a)) => Some(d >= a),
        _ => None,
    };
    Ok(AblationReport {
        isolation_verified: isolation.iter().all(|c| c.ok),
        isolation,
        rows,
        d_at_least_a,
        budget_ratio: 1.0,
        seed: cfg.seed,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    let (ds, split, fp) = load_dataset(cfg)?;
    let report = ablate(cfg, &ds, &split, &fp, true)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("ablation_report.json"), &report)?;
    write_jsonl(&cfg.output_dir.join("ablation_rows.jsonl"), &report.rows)?;
    Ok(report)
}

pub fn render_ablation(report: &AblationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<4} {:<11} {:<5} {:<8} {:>10} {:>9} {:>8}  fingerprint", "row", "variant", "loss", "mode", "score", "params", "secs");
    for r in &report.rows {
        let score = r.score.map_or_else(|| "failed".to_string(), |s| format!("{s:.3}"));
        let params = r.num_parameters.map_or_else(|| "-".to_string(), |p| p.to_string());
        let _ = writeln!(
            out,
            "({})  {:<11} {:<5} {:<8} {:>10} {:>9} {:>8.1}  {}",
            r.label,
            r.variant.to_string(),
            r.loss_kind.to_string(),
            r.penalty_mode.to_string(),
            score,
            params,
            r.seconds,
            &r.config_fingerprint[..12]
        );
        if let Some(e) = &r.error {
            let _ = writeln!(out, "     error: {e}");
        }
    }
    let _ = writeln!(out, "isolation verified: {}", report.isolation_verified);
    if let Some(ok) = report.d_at_least_a {
        let _ = writeln!(out, "(d) >= (a): {ok} (informational)");
    }
    out
}

// ---------------------------------------------------------------- xcorr

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("cannot summarise an empty sample".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        let m = mean(values);
        let std = (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        Ok(Self { count: n, mean: m, median, std, min: sorted[0], max: sorted[n - 1] })
    }
}

/// Cosine similarity clamped to `[-1, 1]`; two zero vectors count as
/// identical, one zero vector as orthogonal.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    Ok(match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb).sqrt()).clamp(-1.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XCorrModelReport {
    pub label: String,
    pub variant: Variant,
    pub similarities: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XCorrReport {
    pub c2: XCorrModelReport,
    pub dt: XCorrModelReport,
    pub num_samples: usize,
    pub with_replacement: bool,
    pub identity_permutation: bool,
    /// Whether the CLB model's mean similarity is below the baseline's;
    /// informational.
    pub c2_mean_below_dt: bool,
    pub seed: u64,
}

/// Sampled `(episode index, end step)` pairs and whether sampling had to
/// draw with replacement.
fn sample_sites(trajs: &[Trajectory], n: usize, seed: u64) -> (Vec<(usize, usize)>, bool) {
    let mut sites: Vec<(usize, usize)> = trajs
        .iter()
        .enumerate()
        .flat_map(|(e, t)| (0..t.len()).map(move |s| (e, s)))
        .collect();
    let mut rng = stream(seed, &[0xC022]);
    if sites.len() >= n {
        sites.shuffle(&mut rng);
        sites.truncate(n);
        (sites, false)
    } else {
        ((0..n).map(|_| sites[rng.random_range(0..sites.len())]).collect(), true)
    }
}

/// Copy of `seg` whose valid state rows are permuted along time; actions,
/// RTG and timesteps stay in place.
pub fn shuffle_states(seg: &TrainingSegment, seed: u64, identity: bool) -> TrainingSegment {
    let mut out = seg.clone();
    if identity {
        return out;
    }
    let first = seg.first_valid();
    let mut order: Vec<usize> = (first..seg.window()).collect();
    order.shuffle(&mut stream(seed, &[0x5407]));
    for (dst, src) in (first..seg.window()).zip(order) {
        out.states[dst] = seg.states[src];
    }
    out
}

pub fn xcorr(cfg: &RunConfig, c2: &TrainedModel, dt: &TrainedModel, ds: &Dataset, num_samples: usize, identity_permutation: bool) -> Result<XCorrReport> {
    if num_samples == 0 {
        return Err(Error::Config("num_samples must be >= 1".into()));
    }
    let trajs = trajectories(ds, &cfg.penalty)?;
    if trajs.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let (sites, with_replacement) = sample_sites(&trajs, num_samples, cfg.seed);
    let probe = |label: &str, trained: &TrainedModel| -> Result<XCorrModelReport> {
        let normed: Vec<Trajectory> = trajs.iter().map(|t| trained.norm.normalize(t)).collect();
        let m = trained.model.config.window;
        let mut similarities = Vec::with_capacity(sites.len());
        for (i, &(e, s)) in sites.iter().enumerate() {
            let seg = build_segment(&normed[e], s, m)?;
            let shuffled = shuffle_states(&seg, derive_seed(cfg.seed, &[0x5A3B, i as u64]), identity_permutation);
            let a = trained.model.extract_block1_embedding(&seg)?;
            let b = trained.model.extract_block1_embedding(&shuffled)?;
            similarities.push(cosine_similarity(&a, &b)?);
        }
        Ok(XCorrModelReport {
            label: label.to_string(),
            variant: trained.model.config.variant,
            summary: Summary::of(&similarities)?,
            similarities,
        })
    };
    let c2 = probe("c2", c2)?;
    let dt = probe("dt", dt)?;
    Ok(XCorrReport {
        c2_mean_below_dt: c2.summary.mean < dt.summary.mean,
        c2,
        dt,
        num_samples,
        with_replacement,
        identity_permutation,
        seed: cfg.seed,
    })
}

pub fn cmd_xcorr(cfg: &RunConfig, c2: &Path, dt: &Path, num_samples: usize) -> Result<XCorrReport> {
    let (ds, _, _) = load_dataset(cfg)?;
    let report = xcorr(cfg, &TrainedModel::load(c2)?, &TrainedModel::load(dt)?, &ds, num_samples, false)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("xcorr_report.json"), &report)?;
    let rows: Vec<serde_json::Value> = [&report.c2, &report.dt]
        .iter()
        .flat_map(|r| {
            r.similarities
                .iter()
                .enumerate()
                .map(move |(i, s)| serde_json::json!({"model": r.label, "sample": i, "similarity": s}))
        })
        .collect();
    write_jsonl(&cfg.output_dir.join("xcorr_samples.jsonl"), &rows)?;
    Ok(report)
}

pub fn render_xcorr(report: &XCorrReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<4} {:<11} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}", "", "variant", "n", "mean", "median", "std", "min", "max");
    for r in [&report.c2, &report.dt] {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:<4} {:<11} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.label,
            r.variant.to_string(),
            s.count,
            s.mean,
            s.median,
            s.std,
            s.min,
            s.max
        );
    }
    if report.with_replacement {
        let _ = writeln!(out, "note: fewer segments than samples, drawn with replacement");
    }
    let _ = writeln!(out, "c2 mean < dt mean: {} (informational)", report.c2_mean_below_dt);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn quick_config() -> RunConfig {
        RunConfig {
            campaign: CampaignConfig { horizon: 8, impressions_per_step: 30, budget: 60.0, ..CampaignConfig::default() },
            data: SyntheticDataConfig { num_episodes: 12, ..SyntheticDataConfig::default() },
            model: ModelConfig { d_h: 8, num_blocks: 1, window: 4, horizon: 8, ..ModelConfig::desk() },
            batch_size: 16,
            max_iterations: 20,
            log_every: 5,
            num_eval_episodes: 2,
            budget_ratios: vec![0.5, 1.0],
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let cfg = quick_config();
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(&t, toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&t).unwrap(), cfg);
        let j = dir.path().join("c.json");
        fs::write(&j, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&j).unwrap(), cfg);
        let partial = dir.path().join("p.toml");
        fs::write(&partial, "seed = 7\n[model]\nd_h = 32\nhorizon = 48\n").unwrap();
        let p = RunConfig::load(&partial).unwrap();
        assert_eq!((p.seed, p.model.d_h, p.model.d_k()), (7, 32, 32));
        fs::write(&partial, "sed = 7\n").unwrap();
        assert!(matches!(RunConfig::load(&partial), Err(Error::Config(_))));
    }

    #[test]
    fn isolation_detects_flags() {
        let rows = ablation_configs(&quick_config());
        let checks = isolation_checks(&rows);
        assert!(checks.iter().all(|c| c.ok), "{checks:?}");
        let mut broken = rows.clone();
        broken[1].1.learning_rate *= 2.0;
        let checks = isolation_checks(&broken);
        assert!(!checks[0].ok);
        assert!(checks[0].differing.contains(&"learning_rate".to_string()));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 0.0], &[-3.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = stream(3, &[1]);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..48).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_eq!(cosine_similarity(&v, &v).unwrap(), 1.0);
        }
    }

    #[test]
    fn summary_matches_recomputation() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!((s.count, s.min, s.max, s.median, s.mean), (4, 1.0, 10.0, 2.5, 4.0));
        assert!((s.std - (((1.0f64) + 9.0 + 4.0 + 36.0) / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shuffling_moves_only_states() {
        let cfg = quick_config();
        let (ds, _) = generate_dataset(&cfg).unwrap();
        let trajs = trajectories(&ds, &cfg.penalty).unwrap();
        let seg = build_segment(&trajs[0], 2, 4).unwrap();
        let sh = shuffle_states(&seg, 5, false);
        assert_eq!((sh.actions.clone(), sh.rtg.clone(), sh.timesteps.clone()), (seg.actions.clone(), seg.rtg.clone(), seg.timesteps.clone()));
        let mut a: Vec<_> = seg.states.iter().map(|s| s.map(f64::to_bits)).collect();
        let mut b: Vec<_> = sh.states.iter().map(|s| s.map(f64::to_bits)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(sh.states[0], [0.0; 7]);
        assert_eq!(shuffle_states(&seg, 5, true), seg);
    }

    #[test]
    fn training_is_resumable() {
        let cfg = quick_config();
        let (ds, split) = generate_dataset(&cfg).unwrap();
        let full = train(&cfg, &ds, &split, "fp", None).unwrap();
        let half_cfg = RunConfig { max_iterations: 10, ..cfg.clone() };
        let half = train(&half_cfg, &ds, &split, "fp", None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        half.trained.save(&path).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        assert_eq!(loaded, half.trained);
        let resumed = train(&half_cfg, &ds, &split, "fp", Some(loaded)).unwrap();
        assert_eq!(resumed.report.final_step, 20);
        assert_eq!(resumed.trained.model.params, full.trained.model.params);
    }

    #[test]
    fn plain_and_weighted_losses_agree_on_unit_penalties() {
        let cfg = RunConfig {
            penalty: PenaltyConfig { mode: PenaltyMode::Clamped, ..PenaltyConfig::default() },
            ..quick_config()
        };
        let (mut ds, split) = generate_dataset(&cfg).unwrap();
        // Keep only episodes whose clamped penalty is exactly one.
        ds.episodes.retain(|e| e.penalty(&cfg.penalty).unwrap().p_total == 1.0);
        assert!(!ds.is_empty());
        let keep: Vec<u64> = ds.episodes.iter().map(|e| e.header.episode_id).collect();
        let split = SplitManifest {
            train: split.train.iter().copied().filter(|i| keep.contains(i)).collect(),
            validation: vec![],
        };
        let cl = train(&cfg, &ds, &split, "fp", None).unwrap();
        let mse = train(&RunConfig { loss_kind: LossKind::PlainMse, ..cfg.clone() }, &ds, &split, "fp", None).unwrap();
        for (a, b) in cl.history.iter().zip(&mse.history) {
            assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.abs().max(1.0));
        }
    }

    #[test]
    fn eval_scores_are_mean_of_oracle_scores() {
        let cfg = quick_config();
        let (ds, split) = generate_dataset(&cfg).unwrap();
        let out = train(&cfg, &ds, &split, "fp", None).unwrap();
        let report = evaluate(&cfg, &out.trained).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            let mut total = 0.0;
            for k in 0..cfg.num_eval_episodes {
                let log = out.trained.rollout(&eval_campaign(&cfg, row.budget_ratio, k), out.trained.max_return * row.budget_ratio).unwrap();
                let (mut v, mut c) = (0.0, 0.0);
                for s in &log.steps {
                    for o in &s.outcomes {
                        if o.won {
                            v += o.realized_value;
                            c += o.cost;
                        }
                    }
                }
                let pen = if v > 0.0 { ((1.0 / (c / v)).powi(2)).min(1.0) } else { 1.0 };
                total += v * pen;
            }
            let want = total / cfg.num_eval_episodes as f64;
            assert!((row.score - want).abs() <= 1e-10 * want.abs().max(1.0), "{} vs {want}", row.score);
        }
        assert_eq!(evaluate(&cfg, &out.trained).unwrap(), report);
    }

    #[test]
    fn zero_action_checkpoint_scores_zero() {
        let cfg = quick_config();
        let (ds, split) = generate_dataset(&cfg).unwrap();
        let mut out = train(&RunConfig { max_iterations: 1, ..cfg.clone() }, &ds, &split, "fp", None).unwrap();
        let p = &mut out.trained.model.params;
        p.get_mut("head.action.weight").unwrap().values_mut().iter_mut().for_each(|v| *v = 0.0);
        p.get_mut("head.action.bias").unwrap().values_mut()[0] = -1.0;
        let report = evaluate(&cfg, &out.trained).unwrap();
        assert!(report.rows.iter().all(|r| r.score == 0.0 && r.total_cost == 0.0));
    }

    #[test]
    fn rollout_conditions_on_remaining_target() {
        let cfg = quick_config();
        let (ds, split) = generate_dataset(&cfg).unwrap();
        let out = train(&RunConfig { max_iterations: 2, ..cfg.clone() }, &ds, &split, "fp", None).unwrap();
        let campaign = eval_campaign(&cfg, 1.0, 0);
        let target = 5.0;
        let mut policy = crate::model::RolloutPolicy::new(&out.trained, target).unwrap();
        let log = crate::auction::simulate_episode(&mut policy, &campaign).unwrap();
        let mut realized = 0.0;
        for (t, s) in log.steps.iter().enumerate() {
            let want = (target - realized).max(0.0);
            assert!((policy.conditioning[t] - want).abs() <= 1e-9 * want.max(1.0));
            realized += s.reward;
        }
        assert_eq!(out.trained.rollout(&campaign, target).unwrap(), log);
    }
}
