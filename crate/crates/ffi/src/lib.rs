//! C ABI over the `scalegrpo` core.
//!
//! Every function returns an [`SgStatus`]; on failure the message is kept per
//! thread and read back with [`sg_last_error`]. Handles are opaque and must
//! be released with their `_free` function. Panics are caught at the boundary
//! and reported as `SG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use scalegrpo::grpo::{train_iteration, GRPOConfig, TrainState};
use scalegrpo::harness::{Checkpoint, ExperimentConfig};
use scalegrpo::policy::Policy;
use scalegrpo::rewards::{brightness, RewardSpec};
use scalegrpo::sampler::{sample_inference, SamplerConfig};
use scalegrpo::{msvq::Image, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    Failed = 1,
    InvalidArgument = 2,
    Numeric = 3,
    RewardUnavailable = 4,
    UnsupportedVersion = 5,
    NullPointer = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SgStatus {
    match err {
        Error::InvalidArgument(_) | Error::Config { .. } | Error::Checkpoint(_) => SgStatus::InvalidArgument,
        Error::Numeric(_) => SgStatus::Numeric,
        Error::RewardUnavailable(_) => SgStatus::RewardUnavailable,
        Error::UnsupportedVersion(_) => SgStatus::UnsupportedVersion,
        Error::InvalidState(_) | Error::Protocol(_) | Error::Io { .. } => SgStatus::Failed,
    }
}

enum Fail {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> SgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            SgStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SgStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A loaded checkpoint.
pub struct SgModel {
    checkpoint: Checkpoint,
    policy: Policy,
}

impl SgModel {
    fn new(checkpoint: Checkpoint) -> Result<Self, Error> {
        let policy = checkpoint.policy()?;
        Ok(SgModel { checkpoint, policy })
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SgModelInfo {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub param_count: usize,
    pub iteration: usize,
}

/// Inference settings. `top_k == 0` and `top_p <= 0` disable those filters.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SgSamplerSettings {
    pub tau: f64,
    pub cfg_scale: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SgIterationMetrics {
    pub iter: usize,
    pub reward_mean: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    pub kl_mean: f64,
    pub clip_frac: f64,
    pub loss: f64,
    pub adv_abs_mean: f64,
    pub wall_ms: u64,
}

#[no_mangle]
pub extern "C" fn sg_sampler_default() -> SgSamplerSettings {
    let d = SamplerConfig::default();
    SgSamplerSettings {
        tau: d.tau,
        cfg_scale: d.cfg_scale,
        top_k: d.top_k.unwrap_or(0),
        top_p: d.top_p.unwrap_or(0.0),
        seed: d.seed,
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_model_load(path: *const c_char, out_model: *mut *mut SgModel) -> SgStatus {
    guard(|| {
        let path = cstr(path, "path")?;
        let slot = out(out_model, "out_model")?;
        let model = SgModel::new(Checkpoint::load(Path::new(path))?)?;
        *slot = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sg_model_save(model: *const SgModel, path: *const c_char) -> SgStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let path = cstr(path, "path")?;
        m.checkpoint.save(Path::new(path))?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_model_free(model: *mut SgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_model_info(model: *const SgModel, info: *mut SgModelInfo) -> SgStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let slot = out(info, "info")?;
        let (height, width) = m.policy.schedule().resolution();
        *slot = SgModelInfo {
            n_classes: m.policy.config().n_classes,
            height,
            width,
            vocab: m.policy.vocab(),
            param_count: m.policy.param_count(),
            iteration: m.checkpoint.iteration,
        };
        Ok(())
    })
}

/// Draw one image of `class_id` into `out_rgb`, row-major RGB in `[0, 1]`.
/// `out_len` must be at least `height * width * 3`.
///
/// # Safety
/// `model` must come from this library; `out_rgb` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sg_model_sample(
    model: *const SgModel,
    class_id: usize,
    settings: SgSamplerSettings,
    out_rgb: *mut f32,
    out_len: usize,
) -> SgStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if out_rgb.is_null() {
            return Err(Fail::Null("out_rgb"));
        }
        let (h, w) = m.policy.schedule().resolution();
        if out_len < h * w * 3 {
            return Err(Error::InvalidArgument(format!("out_len {out_len} < {}", h * w * 3)).into());
        }
        let cfg = SamplerConfig {
            tau: settings.tau,
            cfg_scale: settings.cfg_scale,
            top_k: (settings.top_k > 0).then_some(settings.top_k),
            top_p: (settings.top_p > 0.0).then_some(settings.top_p),
            seed: settings.seed,
        };
        let (_, image) = sample_inference(&m.policy, &m.checkpoint.params, class_id, &cfg)?;
        let dst = std::slice::from_raw_parts_mut(out_rgb, h * w * 3);
        for (d, s) in dst.iter_mut().zip(image.pixels()) {
            *d = *s as f32;
        }
        Ok(())
    })
}

/// Mean Rec. 709 luma of a row-major RGB image.
///
/// # Safety
/// `rgb` must hold `height * width * 3` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_brightness(rgb: *const f32, height: usize, width: usize, out_value: *mut f64) -> SgStatus {
    guard(|| {
        if rgb.is_null() {
            return Err(Fail::Null("rgb"));
        }
        let slot = out(out_value, "out_value")?;
        let px = std::slice::from_raw_parts(rgb, height * width * 3);
        let image = Image::new(height, width, px.iter().map(|&v| v as f64).collect())?;
        *slot = brightness(&image);
        Ok(())
    })
}

/// Group-normalised advantages of `n` rewards.
///
/// # Safety
/// `rewards` and `out_advantages` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_compute_advantages(rewards: *const f64, n: usize, out_advantages: *mut f64) -> SgStatus {
    guard(|| {
        if rewards.is_null() {
            return Err(Fail::Null("rewards"));
        }
        if out_advantages.is_null() {
            return Err(Fail::Null("out_advantages"));
        }
        let r = std::slice::from_raw_parts(rewards, n);
        let a = scalegrpo::grpo::compute_advantages(r)?;
        std::slice::from_raw_parts_mut(out_advantages, n).copy_from_slice(&a);
        Ok(())
    })
}

/// A GRPO run in progress.
pub struct SgTrainer {
    base: Checkpoint,
    policy: Policy,
    state: TrainState,
    grpo: GRPOConfig,
    reward: RewardSpec,
}

/// Start (or resume) GRPO from `model`. `config_json` is an experiment
/// configuration document whose `grpo` and `reward` sections are used; null
/// means all defaults.
///
/// # Safety
/// `model` must come from this library; `config_json` null or NUL-terminated;
/// `out_trainer` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_trainer_new(
    model: *const SgModel,
    config_json: *const c_char,
    out_trainer: *mut *mut SgTrainer,
) -> SgStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let slot = out(out_trainer, "out_trainer")?;
        let cfg = if config_json.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::from_json(cstr(config_json, "config_json")?)?
        };
        cfg.grpo.validate()?;
        cfg.reward.validate()?;
        let trainer = SgTrainer {
            base: m.checkpoint.clone(),
            policy: m.policy.clone(),
            state: m.checkpoint.train_state()?,
            grpo: cfg.grpo,
            reward: cfg.reward,
        };
        *slot = Box::into_raw(Box::new(trainer));
        Ok(())
    })
}

/// Run one iteration. On failure the trainer is unchanged.
///
/// # Safety
/// `trainer` must come from this library; `out_metrics` null or writable.
#[no_mangle]
pub unsafe extern "C" fn sg_trainer_step(trainer: *mut SgTrainer, out_metrics: *mut SgIterationMetrics) -> SgStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or(Fail::Null("trainer"))?;
        let m = train_iteration(&t.policy, &mut t.state, &t.grpo, &t.reward)?;
        if let Some(slot) = out_metrics.as_mut() {
            *slot = SgIterationMetrics {
                iter: m.iter,
                reward_mean: m.reward_mean,
                reward_min: m.reward_min,
                reward_max: m.reward_max,
                kl_mean: m.kl_mean,
                clip_frac: m.clip_frac,
                loss: m.loss,
                adv_abs_mean: m.adv_abs_mean,
                wall_ms: m.wall_ms,
            };
        }
        Ok(())
    })
}

/// Snapshot the current weights, reference and optimiser state as a model.
///
/// # Safety
/// `trainer` must come from this library; `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_trainer_snapshot(trainer: *const SgTrainer, out_model: *mut *mut SgModel) -> SgStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or(Fail::Null("trainer"))?;
        let slot = out(out_model, "out_model")?;
        let model = SgModel::new(t.base.with_state(&t.state))?;
        *slot = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `trainer` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_trainer_free(trainer: *mut SgTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}
