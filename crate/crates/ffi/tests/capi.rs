use std::ffi::{c_char, CString};
use std::ptr;

use autobid::harness::{self, RunConfig};
use autobid::model::ModelConfig;
use autobid_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; ab_last_error_length() + 1];
    let n = unsafe { ab_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_run(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.campaign.horizon = 6;
    cfg.campaign.impressions_per_step = 20;
    cfg.campaign.budget = 40.0;
    cfg.data.num_episodes = 8;
    cfg.model = ModelConfig { d_h: 8, num_blocks: 1, window: 3, horizon: 6, ..ModelConfig::desk() };
    cfg.batch_size = 8;
    cfg.max_iterations = 5;
    cfg.log_every = 5;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn penalty_matches_table() {
    let mut p = AbPenalty::default();
    let s = unsafe { ab_penalty(4.0, 2.0, 10.0, 1.0, 2.0, 2.0, AbPenaltyMode::Literal, &mut p) };
    assert_eq!(s, AbStatus::Ok);
    assert!((p.p_total - 0.64).abs() < 1e-12);
    let s = unsafe { ab_penalty(4.0, 2.0, 10.0, 1.0, 2.0, 2.0, AbPenaltyMode::Clamped, &mut p) };
    assert_eq!(s, AbStatus::Ok);
    assert_eq!(p.p_total, 1.0);
}

#[test]
fn invalid_penalty_config_reports_message() {
    let mut p = AbPenalty::default();
    let s = unsafe { ab_penalty(1.0, 1.0, 10.0, 1.0, 0.5, 2.0, AbPenaltyMode::Literal, &mut p) };
    assert_eq!(s, AbStatus::Config);
    assert!(!last_error().is_empty());
}

#[test]
fn auction_tie_loses() {
    let (mut won, mut cost) = (true, -1.0);
    assert_eq!(unsafe { ab_gsp_auction(1.0, 2.0, 1.0, &mut won, &mut cost) }, AbStatus::Ok);
    assert!(!won);
    assert_eq!(cost, 0.0);
    assert_eq!(unsafe { ab_gsp_auction(1.5, 2.0, 1.0, &mut won, &mut cost) }, AbStatus::Ok);
    assert!(won);
    assert_eq!(cost, 1.0);
}

#[test]
fn null_pointers_are_rejected() {
    assert_eq!(unsafe { ab_model_load(ptr::null(), &mut ptr::null_mut()) }, AbStatus::NullPointer);
    assert_eq!(unsafe { ab_gsp_auction(1.0, 1.0, 0.5, ptr::null_mut(), ptr::null_mut()) }, AbStatus::NullPointer);
    let mut n = 0usize;
    assert_eq!(unsafe { ab_dataset_len(ptr::null(), &mut n) }, AbStatus::NullPointer);
    unsafe {
        ab_model_free(ptr::null_mut());
        ab_dataset_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_is_io_error() {
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut m: *mut AbModel = ptr::null_mut();
    assert_eq!(unsafe { ab_model_load(path.as_ptr(), &mut m) }, AbStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("model.ckpt"));
}

#[test]
fn dataset_handle_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    harness::cmd_gen_data(&cfg).unwrap();
    let core = autobid::dataset::read_dataset(&cfg.dataset_path()).unwrap();

    let path = CString::new(cfg.dataset_path().to_str().unwrap()).unwrap();
    let mut ds: *mut AbDataset = ptr::null_mut();
    assert_eq!(unsafe { ab_dataset_read(path.as_ptr(), &mut ds) }, AbStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { ab_dataset_len(ds, &mut n) }, AbStatus::Ok);
    assert_eq!(n, core.len());
    for (i, ep) in core.episodes.iter().enumerate() {
        let (mut c, mut v, mut p) = (0.0, 0.0, AbPenalty::default());
        assert_eq!(unsafe { ab_dataset_episode(ds, i, &mut c, &mut v, &mut p) }, AbStatus::Ok);
        assert_eq!(c, ep.total_cost());
        assert_eq!(v, ep.total_value());
        assert_eq!(p.p_total, ep.header.penalty.p_total);
    }
    let (mut c, mut v, mut p) = (0.0, 0.0, AbPenalty::default());
    assert_eq!(unsafe { ab_dataset_episode(ds, n, &mut c, &mut v, &mut p) }, AbStatus::InvalidArgument);
    unsafe { ab_dataset_free(ds) };
}

#[test]
fn model_rollout_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    harness::cmd_gen_data(&cfg).unwrap();
    let trained = harness::cmd_train(&cfg).unwrap().trained;
    let ckpt = dir.path().join("model.ckpt");

    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut m: *mut AbModel = ptr::null_mut();
    assert_eq!(unsafe { ab_model_load(path.as_ptr(), &mut m) }, AbStatus::Ok);
    let (mut params, mut max_return) = (0usize, 0.0);
    assert_eq!(unsafe { ab_model_num_parameters(m, &mut params) }, AbStatus::Ok);
    assert_eq!(unsafe { ab_model_max_return(m, &mut max_return) }, AbStatus::Ok);
    assert_eq!(params, trained.model.num_parameters());
    assert_eq!(max_return, trained.max_return);

    let mut campaign = unsafe {
        let mut c = std::mem::zeroed::<AbCampaign>();
        assert_eq!(ab_campaign_default(&mut c), AbStatus::Ok);
        c
    };
    campaign.horizon = 6;
    campaign.impressions_per_step = 20;
    campaign.budget = 40.0;
    campaign.seed = 99;
    let mut summary = AbEpisodeSummary::default();
    let mut actions = [f64::NAN; 6];
    let s = unsafe { ab_model_rollout(m, campaign, max_return, 2.0, &mut summary, actions.as_mut_ptr(), actions.len()) };
    assert_eq!(s, AbStatus::Ok, "{}", last_error());

    let log = trained.rollout(&campaign.into(), max_return).unwrap();
    let want = autobid::auction::compute_score(&log, &autobid::auction::ScoreConfig::cpa(1.0, 2.0)).unwrap();
    assert_eq!(summary.score, want.score);
    assert_eq!(summary.total_cost, want.total_cost);
    assert_eq!(summary.steps, 6);
    assert_eq!(actions.to_vec(), log.actions());

    campaign.horizon = 7;
    let s = unsafe { ab_model_rollout(m, campaign, max_return, 2.0, &mut summary, ptr::null_mut(), 0) };
    assert_ne!(s, AbStatus::Ok);
    unsafe { ab_model_free(m) };
}

#[test]
fn header_declares_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/autobid.h")).unwrap();
    for sym in ["ab_model_load", "ab_model_rollout", "ab_penalty", "ab_dataset_read", "ab_last_error_message", "AB_STATUS_OK", "typedef struct AbModel AbModel"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"autobid.h\"\nint main(void) { AbPenalty p; return ab_penalty(1, 1, 1, 1, 2, 2, AB_PENALTY_MODE_LITERAL, &p); }\n",
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
}
