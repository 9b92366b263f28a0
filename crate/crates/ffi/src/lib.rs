//! C ABI for `apnet`.
//!
//! Every fallible function returns an [`ApnetStatus`]. On failure the message
//! is kept per thread and can be read with [`apnet_last_error`]. Models are
//! opaque handles created by [`apnet_model_load`] and released by
//! [`apnet_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use apnet::apconv::{self, ApConvSpec};
use apnet::augment::{apply_policy, Image, PolicySpec};
use apnet::harness::checkpoint;
use apnet::harness::config::ExperimentConfig;
use apnet::harness::model::Network;
use apnet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Internal = 6,
}

/// A trained network loaded from a checkpoint.
pub struct ApnetModel {
    network: Network,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApnetAccount {
    pub params_train: u64,
    pub params_infer: u64,
    /// Inference multiply-accumulates; zero when `has_macs` is false.
    pub macs: u64,
    pub has_macs: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApnetParamCount {
    pub total: u64,
    /// Parameters saved relative to the dense convolution.
    pub delta: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> ApnetStatus {
    match err {
        Error::Io(_) => ApnetStatus::Io,
        Error::Checkpoint(_) | Error::Config(_) | Error::Data(_) => ApnetStatus::Format,
        Error::Shape(_) | Error::ChannelMismatch { .. } => ApnetStatus::Shape,
        Error::NonFinite { .. } => ApnetStatus::Internal,
        _ => ApnetStatus::InvalidArgument,
    }
}

struct Failure(ApnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: ApnetStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ApnetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ApnetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ApnetStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(ApnetStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(ApnetStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .map_or_else(|| fail(ApnetStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return fail(ApnetStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(ApnetStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn image_arg(data: &[f64], channels: usize, height: usize, width: usize) -> Result<Image, Failure> {
    Ok(Image::from_vec(channels, height, width, data.to_vec())?)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next `apnet_*` call on the same thread.
#[no_mangle]
pub extern "C" fn apnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint written by the training harness.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apnet_model_load(path: *const c_char, out: *mut *mut ApnetModel) -> ApnetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let ck = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(ApnetModel { network: ck.network }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`apnet_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn apnet_model_free(model: *mut ApnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn apnet_model_num_classes(model: *const ApnetModel, out: *mut usize) -> ApnetStatus {
    guard(|| {
        let m = model
            .as_ref()
            .map_or_else(|| fail(ApnetStatus::NullPointer, "model is null"), Ok)?;
        *out_arg(out, "out")? = m.network.num_classes();
        Ok(())
    })
}

/// Number of pathways the model was trained with.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn apnet_model_pathways(model: *const ApnetModel, out: *mut usize) -> ApnetStatus {
    guard(|| {
        let m = model
            .as_ref()
            .map_or_else(|| fail(ApnetStatus::NullPointer, "model is null"), Ok)?;
        *out_arg(out, "out")? = m.network.k();
        Ok(())
    })
}

/// Class probabilities for one channel-major image with values in `[0, 1]`.
/// `probs` must hold `probs_len >= num_classes` values.
///
/// # Safety
/// `data` must point to `channels * height * width` values and `probs` to
/// `probs_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn apnet_model_infer(
    model: *const ApnetModel,
    data: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    probs: *mut f64,
    probs_len: usize,
) -> ApnetStatus {
    guard(|| {
        let m = model
            .as_ref()
            .map_or_else(|| fail(ApnetStatus::NullPointer, "model is null"), Ok)?;
        let len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .map_or_else(|| fail(ApnetStatus::InvalidArgument, "image size overflows"), Ok)?;
        let img = image_arg(slice_arg(data, len, "data")?, channels, height, width)?;
        let out = slice_mut_arg(probs, probs_len, "probs")?;
        let p = m.network.infer(&img)?;
        if out.len() < p.len() {
            return fail(
                ApnetStatus::Shape,
                format!("probs holds {} values, need {}", out.len(), p.len()),
            );
        }
        out[..p.len()].copy_from_slice(&p);
        Ok(())
    })
}

/// Parameter and MAC accounting for an experiment config given as TOML text.
///
/// # Safety
/// `config_toml` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn apnet_account_config(
    config_toml: *const c_char,
    height: usize,
    width: usize,
    out: *mut ApnetAccount,
) -> ApnetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::from_toml(str_arg(config_toml, "config_toml")?)?;
        let a = cfg.model()?.account((height, width))?;
        *out = ApnetAccount {
            params_train: a.params_train,
            params_infer: a.params_infer,
            macs: a.macs.unwrap_or(0),
            has_macs: a.macs.is_some(),
        };
        Ok(())
    })
}

/// Parameter count of a pathway convolution with `k` nested widths per side.
///
/// # Safety
/// `pathway_in` and `pathway_out` must each point to `k` values.
#[no_mangle]
pub unsafe extern "C" fn apnet_apconv_param_count(
    pathway_in: *const usize,
    pathway_out: *const usize,
    k: usize,
    kernel_h: usize,
    kernel_w: usize,
    bias: bool,
    out: *mut ApnetParamCount,
) -> ApnetStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = ApConvSpec::new(
            slice_arg(pathway_in, k, "pathway_in")?.to_vec(),
            slice_arg(pathway_out, k, "pathway_out")?.to_vec(),
            (kernel_h, kernel_w),
            1,
            0,
            bias,
        )?;
        let c = apconv::param_count(&spec);
        *out = ApnetParamCount {
            total: c.total,
            delta: c.delta,
        };
        Ok(())
    })
}

/// Applies a policy, given as JSON (`{"kind": "flip"}` or a list of such
/// objects), to a channel-major image. The same seed gives the same output.
///
/// # Safety
/// `data` and `out` must each point to `channels * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn apnet_apply_policy(
    policy_json: *const c_char,
    seed: u64,
    data: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> ApnetStatus {
    guard(|| {
        let policy: PolicySpec = serde_json::from_str(str_arg(policy_json, "policy_json")?)
            .or_else(|e| fail(ApnetStatus::InvalidArgument, format!("policy: {e}")))?;
        let len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .map_or_else(|| fail(ApnetStatus::InvalidArgument, "image size overflows"), Ok)?;
        let img = image_arg(slice_arg(data, len, "data")?, channels, height, width)?;
        let dst = slice_mut_arg(out, len, "out")?;
        let res = apply_policy(&img, &policy, &mut ChaCha8Rng::seed_from_u64(seed))?;
        if res.dims() != img.dims() {
            return fail(ApnetStatus::Shape, "policy changed the image size");
        }
        for (d, s) in dst.iter_mut().zip(res.data().iter()) {
            *d = *s;
        }
        Ok(())
    })
}
