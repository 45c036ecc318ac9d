//! C ABI for loading a frozen base, running adapters, and the accounting helpers.
//!
//! Every fallible call returns an [`AugsegStatus`]; on failure the message is
//! available from [`augseg_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use augseg::adapters::{count_params, AdapterSet, AdapterVariant, SiteDims};
use augseg::config::RunConfig;
use augseg::harness::{Mode, RunRecord};
use augseg::image::{Image, Mask};
use augseg::metrics::{self, AccuracyMatrix, Metric};
use augseg::model::{PromptSet, SegModel, SiteId, SiteKind};
use augseg::{io, pipeline, selector, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugsegStatus {
    Ok = 0,
    Other = 1,
    Validation = 2,
    Invariant = 3,
    Io = 4,
    NullArgument = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A frozen base model.
pub struct AugsegModel {
    inner: SegModel,
}

/// One task's adapter payload.
pub struct AugsegAdapter {
    inner: AdapterSet,
}

/// The record of a finished continual run.
pub struct AugsegRun {
    record: RunRecord,
}

/// AA / FM / FT of one metric. Missing values are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugsegSummary {
    pub aa: f64,
    pub fm: f64,
    pub ft: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugsegParamCount {
    pub trainable_count: u64,
    pub stored_count: u64,
    pub stored_bytes: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(AugsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => AugsegStatus::Validation,
            3 => AugsegStatus::Invariant,
            4 => AugsegStatus::Io,
            _ => AugsegStatus::Other,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AugsegStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AugsegStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AugsegStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            AugsegStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AugsegStatus::Validation, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn augseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn augseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a base checkpoint written by `augseg pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn augseg_model_load(path: *const c_char, out: *mut *mut AugsegModel) -> AugsegStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = io::load_checkpoint(std::path::Path::new(path))?;
        *out = Box::into_raw(Box::new(AugsegModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`augseg_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn augseg_model_free(model: *mut AugsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image side length the model expects.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn augseg_model_image_size(model: *const AugsegModel, out: *mut usize) -> AugsegStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = m.inner.config().image_size;
        Ok(())
    })
}

/// Writes the 64-character weight fingerprint plus a NUL into `buf`.
///
/// # Safety
/// `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn augseg_model_fingerprint(
    model: *const AugsegModel,
    buf: *mut c_char,
    len: usize,
) -> AugsegStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let fp = m.inner.fingerprint();
        if len < fp.len() + 1 {
            return Err(Fail(
                AugsegStatus::BufferTooSmall,
                format!("fingerprint needs {} bytes", fp.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(fp.as_ptr().cast::<c_char>(), buf, fp.len());
        *buf.add(fp.len()) = 0;
        Ok(())
    })
}

/// Loads an adapter file from a run directory's `adapters/`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn augseg_adapter_load(path: *const c_char, out: *mut *mut AugsegAdapter) -> AugsegStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = io::load_adapter(std::path::Path::new(path))?;
        *out = Box::into_raw(Box::new(AugsegAdapter { inner }));
        Ok(())
    })
}

/// # Safety
/// `adapter` must come from [`augseg_adapter_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn augseg_adapter_free(adapter: *mut AugsegAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn augseg_adapter_task_id(adapter: *const AugsegAdapter, out: *mut u32) -> AugsegStatus {
    guard(|| {
        let a = adapter.as_ref().ok_or_else(|| null("adapter"))?;
        *out_arg(out, "out")? = a.inner.task_id;
        Ok(())
    })
}

/// Segments one image.
///
/// `image` is channel-major `3 × S × S` in `[0, 1]`; `prompts` holds
/// `n_prompts` `(row, col)` pairs. `adapter` may be NULL for the bare base.
/// Writes `S × S` bytes (0 or 1) to `mask_out` and the predicted IoU to `iou_out`.
///
/// # Safety
/// Buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn augseg_predict(
    model: *const AugsegModel,
    adapter: *const AugsegAdapter,
    image: *const f64,
    image_len: usize,
    prompts: *const u32,
    n_prompts: usize,
    mask_out: *mut u8,
    mask_len: usize,
    iou_out: *mut f64,
) -> AugsegStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let s = m.config().image_size;
        let img = slice_arg(image, image_len, "image")?;
        let pts = slice_arg(prompts, n_prompts * 2, "prompts")?;
        if mask_out.is_null() {
            return Err(null("mask_out"));
        }
        if mask_len < s * s {
            return Err(Fail(AugsegStatus::BufferTooSmall, format!("mask needs {} bytes", s * s)));
        }
        let image = Image::new(s, s, img.to_vec())?;
        let prompts = PromptSet {
            points: pts.chunks_exact(2).map(|p| (p[0] as usize, p[1] as usize)).collect(),
        };
        let set = adapter.as_ref().map(|a| &a.inner);
        let out = m.predict(&image, &prompts, set)?;
        let mask = Mask::from_logits(s, s, out.logits.data())?;
        let dst = std::slice::from_raw_parts_mut(mask_out, s * s);
        for (d, &b) in dst.iter_mut().zip(&mask.data) {
            *d = u8::from(b);
        }
        if let Some(iou) = iou_out.as_mut() {
            *iou = out.iou;
        }
        Ok(())
    })
}

/// Runs a continual stream and writes the run directory.
///
/// `config_path` may be NULL for defaults; `mode` is `samcl`, `samcl-oracle`
/// or `baseline-lora`. The model must match the config's architecture.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn augseg_run(
    model: *const AugsegModel,
    config_path: *const c_char,
    mode: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut AugsegRun,
) -> AugsegStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(std::path::Path::new(str_arg(config_path, "config_path")?))?
        };
        if m.config() != &cfg.model {
            return Err(Fail(AugsegStatus::Validation, "model does not match the config".into()));
        }
        let mode: Mode = str_arg(mode, "mode")?.parse()?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let out = out_arg(out, "out")?;
        let res = pipeline::run_to_dir(m, &cfg, mode, &dir, 0)?;
        *out = Box::into_raw(Box::new(AugsegRun { record: res.record }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`augseg_run`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn augseg_run_free(run: *mut AugsegRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

fn metric_of(id: u32) -> Result<Metric, Fail> {
    Metric::ALL
        .get(id as usize)
        .copied()
        .ok_or_else(|| Fail(AugsegStatus::Validation, format!("metric id {id} (0 mIoU, 1 mF1, 2 mMAE)")))
}

/// Summary of metric `metric` (0 mIoU, 1 mF1, 2 mMAE).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn augseg_run_summary(run: *const AugsegRun, metric: u32, out: *mut AugsegSummary) -> AugsegStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let s = r.record.summary(metric_of(metric)?);
        *out_arg(out, "out")? = AugsegSummary {
            aa: s.aa.unwrap_or(f64::NAN),
            fm: s.fm.unwrap_or(f64::NAN),
            ft: s.ft.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// AA / FM / FT of a `t × t` row-major accuracy matrix; NaN marks unfilled cells.
///
/// # Safety
/// `cells` must hold `t * t` values.
#[no_mangle]
pub unsafe extern "C" fn augseg_matrix_summary(cells: *const f64, t: usize, out: *mut AugsegSummary) -> AugsegStatus {
    guard(|| {
        let n = t.checked_mul(t).ok_or_else(|| Fail(AugsegStatus::Validation, "t too large".into()))?;
        let v = slice_arg(cells, n, "cells")?;
        let rows = v
            .chunks(t.max(1))
            .take(t)
            .map(|r| r.iter().map(|&x| (!x.is_nan()).then_some(x)).collect())
            .collect();
        let m = AccuracyMatrix::from_rows(rows)?;
        *out_arg(out, "out")? = AugsegSummary {
            aa: metrics::aa(&m)?,
            fm: metrics::fm(&m).unwrap_or(f64::NAN),
            ft: metrics::ft(&m).unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Parameter accounting for `n_sites` sites that share input width `d_in`,
/// with per-site output widths `d_out`.
///
/// # Safety
/// `variant` must be NUL-terminated; `d_out` must hold `n_sites` values.
#[no_mangle]
pub unsafe extern "C" fn augseg_count_params(
    variant: *const c_char,
    rank: usize,
    d_in: usize,
    d_out: *const usize,
    n_sites: usize,
    out: *mut AugsegParamCount,
) -> AugsegStatus {
    guard(|| {
        let v: AdapterVariant = str_arg(variant, "variant")?.parse()?;
        let outs = slice_arg(d_out, n_sites, "d_out")?;
        let sites: Vec<SiteDims> = outs
            .iter()
            .enumerate()
            .map(|(i, &d)| SiteDims {
                site: SiteId {
                    block: i / 3,
                    kind: SiteKind::ALL[i % 3],
                },
                d_in,
                d_out: d,
            })
            .collect();
        let c = count_params(v, &sites, rank)?;
        *out_arg(out, "out")? = AugsegParamCount {
            trainable_count: c.trainable_count as u64,
            stored_count: c.stored_count as u64,
            stored_bytes: c.stored_bytes as u64,
        };
        Ok(())
    })
}

/// Bytes one task's embedding buffer occupies.
#[no_mangle]
pub extern "C" fn augseg_per_task_bytes(cap: usize, dim: usize, float_bytes: usize) -> u64 {
    selector::per_task_bytes(cap, dim, float_bytes) as u64
}
