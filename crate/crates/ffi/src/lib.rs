//! C interface to trained compositional models.
//!
//! Every function returns a [`ComprfStatus`]. On failure the calling
//! thread's message is available from [`comprf_last_error`]. Handles are
//! not thread-safe; share one across threads only with external locking.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use comprf::compositor::RenderMode;
use comprf::config::RunConfig;
use comprf::fields::LatentW;
use comprf::image::quantize;
use comprf::pipeline::sample_part_latents;
use comprf::renderer::SeededRng;
use comprf::workflow::{Model, ModelKind, Pose, Workspace};
use comprf::Error;
use rand::SeedableRng;

/// Largest render side accepted by [`comprf_model_render`].
pub const COMPRF_MAX_SIDE: usize = 1024;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComprfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numeric = 4,
    Io = 5,
    Format = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque loaded model.
pub struct ComprfModel {
    ws: Workspace,
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(ComprfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } | Error::InvalidArgument(_) => ComprfStatus::InvalidArgument,
            Error::Config(_) => ComprfStatus::Config,
            Error::NonFinite { .. } | Error::Divergence { .. } => ComprfStatus::Numeric,
            Error::Io { .. } => ComprfStatus::Io,
            Error::Format { .. } => ComprfStatus::Format,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ComprfStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Fail {
    Fail(ComprfStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ComprfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ComprfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            ComprfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const ComprfModel) -> Result<&'a ComprfModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

impl ComprfModel {
    fn dims(&self) -> (usize, usize) {
        (self.model.parts.len(), self.model.parts[0].latent_dim())
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn comprf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the part models trained in `workdir`. `config` is a TOML path
/// relative to `workdir`, or null for the defaults. `baseline` selects the
/// independently trained parts. On success `*out` owns a handle that must be
/// released with [`comprf_model_free`].
///
/// # Safety
/// `workdir` and a non-null `config` must be NUL-terminated strings; `out`
/// must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn comprf_model_open(workdir: *const c_char, config: *const c_char, baseline: bool, out: *mut *mut ComprfModel) -> ComprfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let root = path_arg(workdir, "workdir")?;
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(&root.join(path_arg(config, "config")?))?
        };
        let ws = Workspace::new(root, cfg)?;
        let kind = if baseline { ModelKind::Baseline } else { ModelKind::Parts };
        let model = ws.load_model(kind)?;
        *out = Box::into_raw(Box::new(ComprfModel { ws, model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`comprf_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn comprf_model_free(model: *mut ComprfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn comprf_model_part_count(model: *const ComprfModel, out: *mut usize) -> ComprfStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.dims().0;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn comprf_model_latent_dim(model: *const ComprfModel, out: *mut usize) -> ComprfStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.dims().1;
        Ok(())
    })
}

/// Copies part `index`'s name, NUL-terminated, into `buf`. `*needed`
/// receives the size including the terminator even when `buf` is too small.
///
/// # Safety
/// `buf` must be valid for `len` bytes (or null with `len` 0) and `needed`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn comprf_model_part_name(model: *const ComprfModel, index: usize, buf: *mut c_char, len: usize, needed: *mut usize) -> ComprfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let part = m.model.parts.get(index).ok_or_else(|| invalid(format!("no part {index}")))?;
        let name = part.name().as_bytes();
        *needed.as_mut().ok_or_else(|| null("needed"))? = name.len() + 1;
        if len < name.len() + 1 {
            return Err(Fail(ComprfStatus::BufferTooSmall, format!("name needs {} bytes", name.len() + 1)));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(name.as_ptr() as *const c_char, buf, name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

/// Samples one latent per part from `seed` into `out` (part-major,
/// `part_count * latent_dim` values). `tied` shares the noise vector across
/// parts.
///
/// # Safety
/// `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn comprf_model_sample_latents(model: *const ComprfModel, seed: u64, tied: bool, out: *mut f64, len: usize) -> ComprfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (p, d) = m.dims();
        if len < p * d {
            return Err(Fail(ComprfStatus::BufferTooSmall, format!("latents need {} values", p * d)));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let ws = sample_part_latents(&m.model.refs(), tied, &mut SeededRng::seed_from_u64(seed))?;
        let dst = std::slice::from_raw_parts_mut(out, p * d);
        for (chunk, w) in dst.chunks_mut(d).zip(&ws) {
            chunk.copy_from_slice(&w.0);
        }
        Ok(())
    })
}

/// Renders `latents` (as written by [`comprf_model_sample_latents`]) at the
/// given pose into `rgb`, `side * side * 3` bytes, row-major. `whiteout` is
/// the part kept in color with the others painted white, or -1 for a plain
/// composite.
///
/// # Safety
/// `latents` must be valid for `latents_len` reads and `rgb` for `rgb_len`
/// writes.
#[no_mangle]
pub unsafe extern "C" fn comprf_model_render(
    model: *const ComprfModel,
    latents: *const f64,
    latents_len: usize,
    azimuth: f64,
    elevation: f64,
    side: usize,
    use_blend: bool,
    whiteout: i32,
    rgb: *mut u8,
    rgb_len: usize,
) -> ComprfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (p, d) = m.dims();
        if latents.is_null() {
            return Err(null("latents"));
        }
        if latents_len != p * d {
            return Err(invalid(format!("expected {} latent values, got {latents_len}", p * d)));
        }
        if side == 0 || side > COMPRF_MAX_SIDE {
            return Err(invalid(format!("side must be in 1..={COMPRF_MAX_SIDE}")));
        }
        if rgb_len < side * side * 3 {
            return Err(Fail(ComprfStatus::BufferTooSmall, format!("image needs {} bytes", side * side * 3)));
        }
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let mode = match whiteout {
            -1 => RenderMode::Composite,
            k if k >= 0 && (k as usize) < p => RenderMode::Whiteout(k as usize),
            k => return Err(invalid(format!("whiteout part {k} out of range"))),
        };
        let src = std::slice::from_raw_parts(latents, latents_len);
        let ws: Vec<LatentW> = src.chunks(d).map(|c| LatentW(c.to_vec())).collect();
        let cam = m.ws.camera(Pose { azimuth, elevation })?.with_resolution(side, side);
        let img = m.model.render(&ws, &cam, m.ws.cfg.render.samples, use_blend, mode)?.image;
        let dst = std::slice::from_raw_parts_mut(rgb, side * side * 3);
        for (o, v) in dst.iter_mut().zip(&img.data) {
            *o = quantize(*v);
        }
        Ok(())
    })
}
