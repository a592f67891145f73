use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use scalegrpo::harness::{Checkpoint, ExperimentConfig};
use scalegrpo_ffi::*;

const TINY: &str = r#"{
    "policy": {"schedule": [[1,1],[2,2],[4,4]], "vocab": 8, "d_model": 16, "n_layers": 1, "n_heads": 2, "n_classes": 2},
    "dataset": {"n_classes": 2, "height": 4, "width": 4},
    "grpo": {"group_size": 4, "batch_labels": 2, "minibatch": 8, "iterations": 2}
}"#;

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let cfg = ExperimentConfig::from_json(TINY).unwrap();
    let policy = cfg.build_policy().unwrap();
    let ck = Checkpoint::pretrained(&policy, policy.init_params(1), Vec::new());
    let path = dir.join("tiny.ckpt");
    ck.save(&path).unwrap();
    path
}

fn c(s: &Path) -> CString {
    CString::new(s.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_inspect_sample_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(sg_model_load(c(&path).as_ptr(), &mut model), SgStatus::Ok);
        assert!(sg_last_error().is_null());
        let mut info = SgModelInfo::default();
        assert_eq!(sg_model_info(model, &mut info), SgStatus::Ok);
        assert_eq!((info.n_classes, info.height, info.width, info.vocab), (2, 4, 4, 8));

        let mut a = vec![0f32; 48];
        let mut b = vec![0f32; 48];
        let settings = sg_sampler_default();
        assert_eq!(sg_model_sample(model, 1, settings, a.as_mut_ptr(), a.len()), SgStatus::Ok);
        assert_eq!(sg_model_sample(model, 1, settings, b.as_mut_ptr(), b.len()), SgStatus::Ok);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));

        assert_eq!(sg_model_sample(model, 1, settings, a.as_mut_ptr(), 10), SgStatus::InvalidArgument);
        assert!(last_error().contains("out_len"));
        assert_eq!(sg_model_sample(model, 9, settings, a.as_mut_ptr(), 48), SgStatus::InvalidArgument);

        let copy = dir.path().join("copy.ckpt");
        assert_eq!(sg_model_save(model, c(&copy).as_ptr()), SgStatus::Ok);
        assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
        sg_model_free(model);
        sg_model_free(ptr::null_mut());
    }
}

#[test]
fn null_pointers_and_bad_files_are_reported() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(sg_model_load(ptr::null(), &mut model), SgStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(sg_model_load(missing.as_ptr(), &mut model), SgStatus::Failed);
        assert!(model.is_null());
        let mut info = SgModelInfo::default();
        assert_eq!(sg_model_info(ptr::null(), &mut info), SgStatus::NullPointer);
    }
}

#[test]
fn scalar_helpers_match_the_core() {
    unsafe {
        let ones = [1f32; 12];
        let mut b = 0.0;
        assert_eq!(sg_brightness(ones.as_ptr(), 2, 2, &mut b), SgStatus::Ok);
        assert!((b - 0.9999).abs() < 1e-9);
        let r = [1.0, 0.0, 0.0, 0.0];
        let mut a = [0.0; 4];
        assert_eq!(sg_compute_advantages(r.as_ptr(), 4, a.as_mut_ptr()), SgStatus::Ok);
        assert!((a[0] - 1.7321).abs() < 1e-4 && (a[1] + 0.5774).abs() < 1e-4);
        assert_eq!(sg_compute_advantages(r.as_ptr(), 0, a.as_mut_ptr()), SgStatus::InvalidArgument);
        let v = CStr::from_ptr(sg_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn trainer_steps_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let cfg = CString::new(TINY).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(sg_model_load(c(&path).as_ptr(), &mut model), SgStatus::Ok);
        let mut trainer = ptr::null_mut();
        assert_eq!(sg_trainer_new(model, cfg.as_ptr(), &mut trainer), SgStatus::Ok);
        let mut m = SgIterationMetrics::default();
        for i in 0..2 {
            assert_eq!(sg_trainer_step(trainer, &mut m), SgStatus::Ok);
            assert_eq!(m.iter, i);
            assert!((0.0..=1.0).contains(&m.reward_mean));
        }
        let mut snap = ptr::null_mut();
        assert_eq!(sg_trainer_snapshot(trainer, &mut snap), SgStatus::Ok);
        let mut info = SgModelInfo::default();
        assert_eq!(sg_model_info(snap, &mut info), SgStatus::Ok);
        assert_eq!(info.iteration, 2);

        let bad = CString::new(r#"{"grpo": {"group_size": 1}}"#).unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(sg_trainer_new(model, bad.as_ptr(), &mut other), SgStatus::InvalidArgument);
        assert!(last_error().contains("grpo"));

        sg_trainer_free(trainer);
        sg_model_free(snap);
        sg_model_free(model);
    }
}

#[test]
fn header_declares_the_exported_symbols() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/scalegrpo.h")).unwrap();
    for sym in [
        "sg_last_error",
        "sg_model_load",
        "sg_model_sample",
        "sg_trainer_step",
        "typedef struct SgModel SgModel",
        "SG_STATUS_UNSUPPORTED_VERSION = 5",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
}

/// Compile the C smoke program against the header and static library.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let target = exe.parent().and_then(Path::parent).unwrap();
    let lib = target.join("libscalegrpo_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler is installed");
    assert!(status.success());
    let ck = tiny_checkpoint(dir.path());
    let out = Command::new(&bin).arg(&ck).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("classes=2 size=4x4"), "{text}");
    assert!(text.contains("adv0=1.7321"), "{text}");
}
