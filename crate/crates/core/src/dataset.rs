//! Step-level trajectory datasets: the line-delimited file format, split
//! manifests, return-to-go, feature normalisation and window segmentation.
//!
//! File format, one record per line:
//!
//! ```text
//! episode id=<u64> budget=<f> cpa_threshold=<f> horizon=<n> seed=<u64> cpa_T=<f> bc_T=<f> p_cpa=<f> p_bc=<f> p_total=<f> mode=<literal|clamped>
//! step episode=<u64> t=<n> s=<f>,<f>,<f>,<f>,<f>,<f>,<f> a=<f> rw=<f> cum_cost=<f> cum_value=<f>
//! ```
//!
//! Each `episode` header is followed by exactly `horizon` `step` lines.
//! Floats are written with 17 significant digits, which round-trips `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::auction::{compute_state_features, EpisodeLog, StateVector, STATE_DIM};
use crate::error::{Error, Result};
use crate::loss::{total_penalty_from_totals, PenaltyBreakdown, PenaltyConfig, PenaltyMode};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub episode_id: u64,
    pub budget: f64,
    pub cpa_threshold: f64,
    pub horizon: usize,
    pub seed: u64,
    pub penalty: PenaltyBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t: usize,
    pub state: StateVector,
    pub action: f64,
    pub reward: f64,
    /// Totals after this step's auctions.
    pub cumulative_cost: f64,
    pub cumulative_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRow>,
}

impl EpisodeRecord {
    pub fn from_log(episode_id: u64, log: &EpisodeLog, penalty: &PenaltyConfig) -> Result<Self> {
        if !log.is_complete() {
            return Err(Error::Contract(format!(
                "episode {episode_id} has {} of {} steps",
                log.steps.len(),
                log.campaign.horizon
            )));
        }
        let mut steps = Vec::with_capacity(log.steps.len());
        let (mut cost, mut value) = (0.0, 0.0);
        for (t, s) in log.steps.iter().enumerate() {
            cost += s.cost;
            value += s.reward;
            steps.push(StepRow {
                t,
                state: compute_state_features(log, t)?,
                action: s.action,
                reward: s.reward,
                cumulative_cost: cost,
                cumulative_value: value,
            });
        }
        let c = &log.campaign;
        let penalty = total_penalty_from_totals(log.cumulative_cost, log.cumulative_value, c.budget, c.cpa_threshold, penalty)?;
        Ok(Self {
            header: EpisodeHeader {
                episode_id,
                budget: c.budget,
                cpa_threshold: c.cpa_threshold,
                horizon: c.horizon,
                seed: c.seed,
                penalty,
            },
            steps,
        })
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative_cost)
    }

    pub fn total_value(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative_value)
    }

    /// Recomputes the terminal penalty under `cfg`.
    pub fn penalty(&self, cfg: &PenaltyConfig) -> Result<PenaltyBreakdown> {
        total_penalty_from_totals(
            self.total_cost(),
            self.total_value(),
            self.header.budget,
            self.header.cpa_threshold,
            cfg,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn from_logs(logs: &[EpisodeLog], penalty: &PenaltyConfig) -> Result<Self> {
        let episodes = logs
            .iter()
            .enumerate()
            .map(|(i, log)| EpisodeRecord::from_log(i as u64, log, penalty))
            .collect::<Result<_>>()?;
        Ok(Self { episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn subset(&self, ids: &[u64]) -> Result<Dataset> {
        let episodes = ids
            .iter()
            .map(|id| {
                self.episodes
                    .iter()
                    .find(|e| e.header.episode_id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Compatibility(format!("split references unknown episode {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { episodes })
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn encode_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    for ep in &ds.episodes {
        let h = &ep.header;
        let _ = writeln!(
            out,
            "episode id={} budget={} cpa_threshold={} horizon={} seed={} cpa_T={} bc_T={} p_cpa={} p_bc={} p_total={} mode={}",
            h.episode_id,
            fmt_f64(h.budget),
            fmt_f64(h.cpa_threshold),
            h.horizon,
            h.seed,
            fmt_f64(h.penalty.cpa_t),
            fmt_f64(h.penalty.bc_t),
            fmt_f64(h.penalty.p_cpa),
            fmt_f64(h.penalty.p_bc),
            fmt_f64(h.penalty.p_total),
            h.penalty.mode,
        );
        for s in &ep.steps {
            let state: Vec<String> = s.state.iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(
                out,
                "step episode={} t={} s={} a={} rw={} cum_cost={} cum_value={}",
                h.episode_id,
                s.t,
                state.join(","),
                fmt_f64(s.action),
                fmt_f64(s.reward),
                fmt_f64(s.cumulative_cost),
                fmt_f64(s.cumulative_value),
            );
        }
    }
    out
}

struct Fields<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(line: usize, rest: &'a str) -> Result<Self> {
        let pairs = rest
            .split_whitespace()
            .map(|tok| {
                tok.split_once('=').ok_or_else(|| Error::Parse {
                    line,
                    detail: format!("expected key=value, got {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { line, pairs })
    }

    fn raw(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Parse {
                line: self.line,
                detail: format!("missing field {key}"),
            })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| Error::Parse {
            line: self.line,
            detail: format!("bad value {raw:?} for {key}"),
        })
    }

    fn float(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key)?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line: self.line,
                detail: format!("non-finite {key}"),
            });
        }
        Ok(v)
    }
}

pub fn decode_dataset(text: &str) -> Result<Dataset> {
    let mut episodes: Vec<EpisodeRecord> = Vec::new();
    let check_complete = |ep: &EpisodeRecord, line: usize| -> Result<()> {
        if ep.steps.len() != ep.header.horizon {
            return Err(Error::Parse {
                line,
                detail: format!(
                    "episode {} ends after {} of {} steps",
                    ep.header.episode_id,
                    ep.steps.len(),
                    ep.header.horizon
                ),
            });
        }
        Ok(())
    };
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let (kind, rest) = raw.split_once(' ').unwrap_or((raw, ""));
        let f = Fields::parse(line, rest)?;
        match kind {
            "episode" => {
                if let Some(prev) = episodes.last() {
                    check_complete(prev, line)?;
                }
                let mode: PenaltyMode = f.raw("mode")?.parse().map_err(|_| Error::Parse {
                    line,
                    detail: "bad penalty mode".into(),
                })?;
                let horizon: usize = f.get("horizon")?;
                if horizon == 0 {
                    return Err(Error::Parse { line, detail: "horizon must be >= 1".into() });
                }
                episodes.push(EpisodeRecord {
                    header: EpisodeHeader {
                        episode_id: f.get("id")?,
                        budget: f.float("budget")?,
                        cpa_threshold: f.float("cpa_threshold")?,
                        horizon,
                        seed: f.get("seed")?,
                        penalty: PenaltyBreakdown {
                            cpa_t: f.float("cpa_T")?,
                            bc_t: f.float("bc_T")?,
                            p_cpa: f.float("p_cpa")?,
                            p_bc: f.float("p_bc")?,
                            p_total: f.float("p_total")?,
                            mode,
                        },
                    },
                    steps: Vec::new(),
                });
            }
            "step" => {
                let ep = episodes
                    .last_mut()
                    .ok_or_else(|| Error::Format(format!("line {line}: step record before any episode header")))?;
                let id: u64 = f.get("episode")?;
                if id != ep.header.episode_id {
                    return Err(Error::Format(format!(
                        "line {line}: step for episode {id} under header of episode {}",
                        ep.header.episode_id
                    )));
                }
                let t: usize = f.get("t")?;
                if t != ep.steps.len() || t >= ep.header.horizon {
                    return Err(Error::Parse {
                        line,
                        detail: format!("unexpected step index {t}"),
                    });
                }
                let parts: Vec<&str> = f.raw("s")?.split(',').collect();
                if parts.len() != STATE_DIM {
                    return Err(Error::Parse {
                        line,
                        detail: format!("state has {} features, expected {STATE_DIM}", parts.len()),
                    });
                }
                let mut state = [0.0; STATE_DIM];
                for (slot, p) in state.iter_mut().zip(parts) {
                    *slot = p.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                        line,
                        detail: format!("bad state value {p:?}"),
                    })?;
                }
                ep.steps.push(StepRow {
                    t,
                    state,
                    action: f.float("a")?,
                    reward: f.float("rw")?,
                    cumulative_cost: f.float("cum_cost")?,
                    cumulative_value: f.float("cum_value")?,
                });
            }
            other => {
                return Err(Error::Parse {
                    line,
                    detail: format!("unknown record type {other:?}"),
                })
            }
        }
    }
    match episodes.last() {
        Some(ep) => check_complete(ep, last_line + 1)?,
        None => return Err(Error::Format("dataset has no episode header".into())),
    }
    Ok(Dataset { episodes })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&text)
}

/// Train/validation episode ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
}

impl SplitManifest {
    /// Seeded shuffle of the episode ids; the first `fraction` go to validation.
    /// At least one episode always stays in the training split.
    pub fn random(ds: &Dataset, validation_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!("validation_fraction must lie in [0, 1), got {validation_fraction}")));
        }
        let mut ids: Vec<u64> = ds.episodes.iter().map(|e| e.header.episode_id).collect();
        ids.shuffle(&mut stream(seed, &[0x5B11]));
        let n_val = ((ids.len() as f64 * validation_fraction).round() as usize).min(ids.len().saturating_sub(1));
        let mut validation = ids[..n_val].to_vec();
        let mut train = ids[n_val..].to_vec();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(Self { train, validation })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Suffix sums: `rtg[t] = sum_{k >= t} rewards[k]`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Contract("rewards must be nonempty".into()));
    }
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (slot, r) in rtg.iter_mut().zip(rewards).rev() {
        acc += r;
        *slot = acc;
    }
    Ok(rtg)
}

/// Model-ready view of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub states: Vec<StateVector>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    /// Remaining reward after each step: `rtg[t + 1]`, zero after the last step.
    pub rtg_next: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub budget: f64,
    pub cpa_threshold: f64,
    pub horizon: usize,
    pub cpa_t: f64,
    pub bc_t: f64,
    pub penalty: f64,
}

impl Trajectory {
    pub fn from_record(rec: &EpisodeRecord, penalty: &PenaltyConfig) -> Result<Self> {
        let rewards: Vec<f64> = rec.steps.iter().map(|s| s.reward).collect();
        let rtg = compute_rtg(&rewards)?;
        let mut rtg_next: Vec<f64> = rtg[1..].to_vec();
        rtg_next.push(0.0);
        let p = rec.penalty(penalty)?;
        Ok(Self {
            episode_id: rec.header.episode_id,
            states: rec.steps.iter().map(|s| s.state).collect(),
            actions: rec.steps.iter().map(|s| s.action).collect(),
            rewards,
            rtg,
            rtg_next,
            timesteps: rec.steps.iter().map(|s| s.t).collect(),
            budget: rec.header.budget,
            cpa_threshold: rec.header.cpa_threshold,
            horizon: rec.header.horizon,
            cpa_t: p.cpa_t,
            bc_t: p.bc_t,
            penalty: p.p_total,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rtg.first().copied().unwrap_or(0.0)
    }
}

pub fn trajectories(ds: &Dataset, penalty: &PenaltyConfig) -> Result<Vec<Trajectory>> {
    ds.episodes.iter().map(|e| Trajectory::from_record(e, penalty)).collect()
}

/// Affine per-dimension standardisation. A `scale` of 1 with `shift` 0
/// marks a pass-through (zero-variance) dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: f64,
    pub scale: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer { shift: 0.0, scale: 1.0 };

    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::IDENTITY;
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            Self::IDENTITY
        } else {
            Self { shift: mean, scale: std }
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.shift
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state: [Standardizer; STATE_DIM],
    pub rtg: Standardizer,
}

impl NormStats {
    pub fn fit(trajs: &[Trajectory]) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::Contract("cannot fit normalisation on an empty dataset".into()));
        }
        let mut state = [Standardizer::IDENTITY; STATE_DIM];
        for (d, slot) in state.iter_mut().enumerate() {
            *slot = Standardizer::fit(trajs.iter().flat_map(|t| t.states.iter().map(move |s| s[d])));
        }
        let rtg = Standardizer::fit(trajs.iter().flat_map(|t| t.rtg.iter().copied()));
        Ok(Self { state, rtg })
    }

    pub fn normalize_state(&self, s: &StateVector) -> StateVector {
        let mut out = *s;
        for (v, st) in out.iter_mut().zip(&self.state) {
            *v = st.apply(*v);
        }
        out
    }

    pub fn denormalize_state(&self, s: &StateVector) -> StateVector {
        let mut out = *s;
        for (v, st) in out.iter_mut().zip(&self.state) {
            *v = st.invert(*v);
        }
        out
    }

    pub fn normalize(&self, traj: &Trajectory) -> Trajectory {
        let mut t = traj.clone();
        t.states = traj.states.iter().map(|s| self.normalize_state(s)).collect();
        t.rtg = traj.rtg.iter().map(|&r| self.rtg.apply(r)).collect();
        t.rtg_next = traj.rtg_next.iter().map(|&r| self.rtg.apply(r)).collect();
        t
    }

    pub fn denormalize(&self, traj: &Trajectory) -> Trajectory {
        let mut t = traj.clone();
        t.states = traj.states.iter().map(|s| self.denormalize_state(s)).collect();
        t.rtg = traj.rtg.iter().map(|&r| self.rtg.invert(r)).collect();
        t.rtg_next = traj.rtg_next.iter().map(|&r| self.rtg.invert(r)).collect();
        t
    }

    /// Flat `[shift[0..8], scale[0..8]]` layout used in checkpoints.
    pub fn to_flat(&self) -> Vec<f64> {
        let all: Vec<&Standardizer> = self.state.iter().chain(std::iter::once(&self.rtg)).collect();
        all.iter().map(|s| s.shift).chain(all.iter().map(|s| s.scale)).collect()
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        let n = STATE_DIM + 1;
        if v.len() != 2 * n {
            return Err(Error::Format(format!("normalisation block has {} values, expected {}", v.len(), 2 * n)));
        }
        let mk = |i: usize| Standardizer { shift: v[i], scale: v[n + i] };
        let mut state = [Standardizer::IDENTITY; STATE_DIM];
        for (i, s) in state.iter_mut().enumerate() {
            *s = mk(i);
        }
        Ok(Self { state, rtg: mk(STATE_DIM) })
    }
}

/// Fits statistics on `trajs` and returns the normalised copies.
pub fn normalize_features(trajs: &[Trajectory]) -> Result<(Vec<Trajectory>, NormStats)> {
    let stats = NormStats::fit(trajs)?;
    Ok((trajs.iter().map(|t| stats.normalize(t)).collect(), stats))
}

/// Window of `M` consecutive steps ending at `end_step`, left-padded with
/// zeros (and masked) where the window reaches before the episode start.
///
/// `actions[k]` is the action taken at the window's step `k` and is also the
/// action target there; `prev_actions[k]` is the action taken one step
/// earlier (zero before the episode start).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSegment {
    pub episode_id: u64,
    pub end_step: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<StateVector>,
    pub actions: Vec<f64>,
    pub prev_actions: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
    pub target_actions: Vec<f64>,
    pub target_rtg: Vec<f64>,
    pub penalty: f64,
    pub valid_len: usize,
}

impl TrainingSegment {
    pub fn window(&self) -> usize {
        self.valid.len()
    }

    /// Index of the first valid (unpadded) position.
    pub fn first_valid(&self) -> usize {
        self.window() - self.valid_len
    }
}

pub fn build_segment(traj: &Trajectory, end_step: usize, window: usize) -> Result<TrainingSegment> {
    if window == 0 {
        return Err(Error::Config("window length must be >= 1".into()));
    }
    if end_step >= traj.len() {
        return Err(Error::Index { index: end_step, bound: traj.len() });
    }
    let mut seg = TrainingSegment {
        episode_id: traj.episode_id,
        end_step,
        rtg: vec![0.0; window],
        states: vec![[0.0; STATE_DIM]; window],
        actions: vec![0.0; window],
        prev_actions: vec![0.0; window],
        timesteps: vec![0; window],
        valid: vec![false; window],
        target_actions: vec![0.0; window],
        target_rtg: vec![0.0; window],
        penalty: traj.penalty,
        valid_len: 0,
    };
    for pos in 0..window {
        let offset = window - 1 - pos;
        let Some(step) = end_step.checked_sub(offset) else { continue };
        seg.rtg[pos] = traj.rtg[step];
        seg.states[pos] = traj.states[step];
        seg.actions[pos] = traj.actions[step];
        seg.prev_actions[pos] = if step > 0 { traj.actions[step - 1] } else { 0.0 };
        seg.timesteps[pos] = traj.timesteps[step];
        seg.valid[pos] = true;
        seg.target_actions[pos] = traj.actions[step];
        seg.target_rtg[pos] = traj.rtg_next[step];
        seg.valid_len += 1;
    }
    Ok(seg)
}

/// One segment per step of the trajectory.
pub fn build_segments(traj: &Trajectory, window: usize) -> Result<Vec<TrainingSegment>> {
    if window == 0 {
        return Err(Error::Config("window length must be >= 1".into()));
    }
    (0..traj.len()).map(|t| build_segment(traj, t, window)).collect()
}
