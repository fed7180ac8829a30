//! C interface to the autobid core.
//!
//! Every fallible call returns an [`AbStatus`]. On failure the message is kept
//! per thread and can be copied out with [`ab_last_error_message`].
//! Handles are opaque and must be released with their matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use autobid::auction::{compute_score, run_gsp_auction, CampaignConfig, ImpressionOpportunity, ScoreConfig};
use autobid::dataset::{read_dataset, Dataset};
use autobid::loss::{total_penalty_from_totals, PenaltyConfig, PenaltyMode};
use autobid::model::TrainedModel;
use autobid::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Compatibility = 6,
    Numeric = 7,
    Inference = 8,
    Internal = 9,
    Panic = 10,
}

impl From<&Error> for AbStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Domain(_) => AbStatus::Config,
            Error::Io { .. } => AbStatus::Io,
            Error::Parse { .. } | Error::Format(_) => AbStatus::Parse,
            Error::Compatibility(_) => AbStatus::Compatibility,
            Error::NonFinite(_) | Error::Divergence { .. } => AbStatus::Numeric,
            Error::Inference(_) | Error::Policy { .. } => AbStatus::Inference,
            _ => AbStatus::Internal,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbPenaltyMode {
    Literal = 0,
    Clamped = 1,
}

/// Campaign constants for a rollout. Mirrors the core campaign config.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AbCampaign {
    pub budget: f64,
    pub cpa_threshold: f64,
    pub horizon: usize,
    pub impressions_per_step: usize,
    pub value_log_mu: f64,
    pub value_log_sigma: f64,
    pub competition_log_mu: f64,
    pub competition_log_sigma: f64,
    pub seed: u64,
}

impl From<AbCampaign> for CampaignConfig {
    fn from(c: AbCampaign) -> Self {
        CampaignConfig {
            budget: c.budget,
            cpa_threshold: c.cpa_threshold,
            horizon: c.horizon,
            impressions_per_step: c.impressions_per_step,
            value_log_mu: c.value_log_mu,
            value_log_sigma: c.value_log_sigma,
            competition_log_mu: c.competition_log_mu,
            competition_log_sigma: c.competition_log_sigma,
            seed: c.seed,
        }
    }
}

/// Outcome of one simulated campaign.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AbEpisodeSummary {
    pub score: f64,
    pub total_value: f64,
    pub total_cost: f64,
    pub min_penalty: f64,
    pub steps: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AbPenalty {
    pub cpa_t: f64,
    pub bc_t: f64,
    pub p_cpa: f64,
    pub p_bc: f64,
    pub p_total: f64,
}

/// Opaque trained model.
pub struct AbModel {
    inner: TrainedModel,
}

/// Opaque behaviour dataset.
pub struct AbDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), (AbStatus, String)>) -> AbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AbStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside autobid".into());
            AbStatus::Panic
        }
    }
}

fn core(e: Error) -> (AbStatus, String) {
    (AbStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (AbStatus, String) {
    (AbStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (AbStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AbStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Length in bytes of the last error message on this thread, without the NUL.
#[no_mangle]
pub extern "C" fn ab_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len - 1` bytes). Returns the number of bytes written, excluding the NUL.
///
/// # Safety
/// `buf` must be valid for `len` bytes of writes, or null.
#[no_mangle]
pub unsafe extern "C" fn ab_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(len - 1);
        ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Fills `out` with the default campaign constants.
///
/// # Safety
/// `out` must be a valid, writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ab_campaign_default(out: *mut AbCampaign) -> AbStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = CampaignConfig::default();
        *out = AbCampaign {
            budget: d.budget,
            cpa_threshold: d.cpa_threshold,
            horizon: d.horizon,
            impressions_per_step: d.impressions_per_step,
            value_log_mu: d.value_log_mu,
            value_log_sigma: d.value_log_sigma,
            competition_log_mu: d.competition_log_mu,
            competition_log_sigma: d.competition_log_sigma,
            seed: d.seed,
        };
        Ok(())
    })
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ab_model_load(path: *const c_char, out: *mut *mut AbModel) -> AbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let inner = TrainedModel::load(&path).map_err(core)?;
        *out = Box::into_raw(Box::new(AbModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ab_model_load`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn ab_model_free(model: *mut AbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ab_model_num_parameters(model: *const AbModel, out: *mut usize) -> AbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.model.num_parameters();
        Ok(())
    })
}

/// Highest episode return in the training data; rollout targets scale from it.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ab_model_max_return(model: *const AbModel, out: *mut f64) -> AbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.max_return;
        Ok(())
    })
}

/// Runs one campaign with the model bidding, scored against the campaign's
/// CPA constraint with exponent `beta`. If `actions` is non-null, up to
/// `actions_len` per-step actions are copied there.
///
/// # Safety
/// `model` must be a live handle, `summary` writable, and `actions` valid for
/// `actions_len` writes when non-null.
#[no_mangle]
pub unsafe extern "C" fn ab_model_rollout(
    model: *const AbModel,
    campaign: AbCampaign,
    target_rtg: f64,
    beta: f64,
    summary: *mut AbEpisodeSummary,
    actions: *mut f64,
    actions_len: usize,
) -> AbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let summary = summary.as_mut().ok_or_else(|| null("summary"))?;
        let cfg = CampaignConfig::from(campaign);
        let log = m.inner.rollout(&cfg, target_rtg).map_err(core)?;
        let score = compute_score(&log, &ScoreConfig::cpa(cfg.cpa_threshold, beta)).map_err(core)?;
        *summary = AbEpisodeSummary {
            score: score.score,
            total_value: score.total_value,
            total_cost: score.total_cost,
            min_penalty: score.min_penalty,
            steps: log.steps.len(),
        };
        if !actions.is_null() {
            for (i, a) in log.actions().into_iter().take(actions_len).enumerate() {
                *actions.add(i) = a;
            }
        }
        Ok(())
    })
}

/// One second-price auction for a single impression.
///
/// # Safety
/// `won` and `cost` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ab_gsp_auction(bid: f64, value: f64, competing_bid: f64, won: *mut bool, cost: *mut f64) -> AbStatus {
    guard(|| {
        let won = won.as_mut().ok_or_else(|| null("won"))?;
        let cost = cost.as_mut().ok_or_else(|| null("cost"))?;
        let o = run_gsp_auction(bid, &ImpressionOpportunity { value, competing_bid }).map_err(core)?;
        *won = o.won;
        *cost = o.cost;
        Ok(())
    })
}

/// Trajectory penalty from episode totals.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ab_penalty(
    total_cost: f64,
    total_value: f64,
    budget: f64,
    cpa_threshold: f64,
    alpha1: f64,
    alpha2: f64,
    mode: AbPenaltyMode,
    out: *mut AbPenalty,
) -> AbStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = PenaltyConfig {
            alpha1,
            alpha2,
            theta: None,
            mode: match mode {
                AbPenaltyMode::Literal => PenaltyMode::Literal,
                AbPenaltyMode::Clamped => PenaltyMode::Clamped,
            },
        };
        let p = total_penalty_from_totals(total_cost, total_value, budget, cpa_threshold, &cfg).map_err(core)?;
        *out = AbPenalty { cpa_t: p.cpa_t, bc_t: p.bc_t, p_cpa: p.p_cpa, p_bc: p.p_bc, p_total: p.p_total };
        Ok(())
    })
}

/// Reads a dataset file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ab_dataset_read(path: *const c_char, out: *mut *mut AbDataset) -> AbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let inner = read_dataset(&path).map_err(core)?;
        *out = Box::into_raw(Box::new(AbDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`ab_dataset_read`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn ab_dataset_free(ds: *mut AbDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ab_dataset_len(ds: *const AbDataset, out: *mut usize) -> AbStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = ds.inner.len();
        Ok(())
    })
}

/// Total cost, total value and stored penalty of episode `index`.
///
/// # Safety
/// `ds` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ab_dataset_episode(
    ds: *const AbDataset,
    index: usize,
    total_cost: *mut f64,
    total_value: *mut f64,
    penalty: *mut AbPenalty,
) -> AbStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let ep = ds.inner.episodes.get(index).ok_or_else(|| {
            (AbStatus::InvalidArgument, format!("episode index {index} out of range ({} episodes)", ds.inner.len()))
        })?;
        *total_cost.as_mut().ok_or_else(|| null("total_cost"))? = ep.total_cost();
        *total_value.as_mut().ok_or_else(|| null("total_value"))? = ep.total_value();
        let p = &ep.header.penalty;
        *penalty.as_mut().ok_or_else(|| null("penalty"))? =
            AbPenalty { cpa_t: p.cpa_t, bc_t: p.bc_t, p_cpa: p.p_cpa, p_bc: p.p_bc, p_total: p.p_total };
        Ok(())
    })
}
