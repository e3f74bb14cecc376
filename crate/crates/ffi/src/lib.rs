//! C ABI over `mpa-codec`: load a model, compress RGB buffers, decompress
//! streams under a task and α. Every call returns an [`MpaStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`mpa_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mpa_codec::autodiff::ParameterStore;
use mpa_codec::entropy::{compress, decompress};
use mpa_codec::model::{Codec, Image, Task};
use mpa_codec::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpaStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Invalid argument, configuration or shape.
    Usage = 2,
    /// Malformed file, container or stream.
    Format = 3,
    /// Numeric failure or violated internal invariant.
    Numeric = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Decoder-side task selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpaTask {
    Mse = 0,
    Cls = 1,
    Seg = 2,
}

impl From<MpaTask> for Task {
    fn from(t: MpaTask) -> Self {
        match t {
            MpaTask::Mse => Task::Mse,
            MpaTask::Cls => Task::Cls,
            MpaTask::Seg => Task::Seg,
        }
    }
}

/// Opaque model handle.
pub struct MpaModel {
    codec: Codec,
    store: ParameterStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MpaStatus {
    match e.exit_code() {
        2 => MpaStatus::Usage,
        3 => MpaStatus::Format,
        _ => MpaStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MpaStatus, String)>) -> MpaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MpaStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MpaStatus::Panic
        }
    }
}

fn lift(e: Error) -> (MpaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MpaStatus, String) {
    (MpaStatus::NullArgument, format!("{what} is null"))
}

fn into_model(store: ParameterStore<f32>) -> Result<*mut MpaModel, Error> {
    let codec = Codec::from_store(&store)?;
    Ok(Box::into_raw(Box::new(MpaModel { codec, store })))
}

fn give_bytes(v: Vec<u8>, out: *mut *mut u8, out_len: *mut usize) {
    let b = v.into_boxed_slice();
    let len = b.len();
    // SAFETY: caller-checked non-null out pointers.
    unsafe {
        *out_len = len;
        *out = Box::into_raw(b) as *mut u8;
    }
}

/// Loads a checkpoint file. On success `*out` owns a handle to release with
/// [`mpa_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mpa_model_load(path: *const c_char, out: *mut *mut MpaModel) -> MpaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (MpaStatus::Usage, "path is not UTF-8".to_string()))?;
        let store = ParameterStore::load(p).map_err(lift)?;
        *out = into_model(store).map_err(lift)?;
        Ok(())
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mpa_model_load_bytes(data: *const u8, len: usize, out: *mut *mut MpaModel) -> MpaStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let store = ParameterStore::read_checkpoint(bytes).map_err(lift)?;
        *out = into_model(store).map_err(lift)?;
        Ok(())
    })
}

/// Releases a handle from [`mpa_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpa_model_free(model: *mut MpaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of quality levels of the model (the upper bound of `q`), or 0
/// for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpa_model_levels(model: *const MpaModel) -> u32 {
    model.as_ref().map_or(0, |m| m.codec.config.levels as u32)
}

/// Compresses an interleaved 8-bit RGB image at quality `q`. The stream is
/// returned in `*out`/`*out_len` and must be released with [`mpa_bytes_free`].
///
/// # Safety
/// `rgb` must point to `width·height·3` bytes; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mpa_encode(
    model: *const MpaModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    q: f64,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> MpaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() || out_len.is_null() {
            return Err(null("out"));
        }
        let n = (width as usize)
            .checked_mul(height as usize)
            .and_then(|v| v.checked_mul(3))
            .ok_or((MpaStatus::Usage, "image extent overflows".to_string()))?;
        let data = std::slice::from_raw_parts(rgb, n).to_vec();
        let img = Image::new(width as usize, height as usize, 3, data).map_err(lift)?;
        let c = compress(&m.codec, &m.store, &img, q).map_err(lift)?;
        give_bytes(c.bytes, out, out_len);
        Ok(())
    })
}

/// Decodes a stream at task orientation `alpha ∈ [0, 1]` towards `task`.
/// The RGB result (`*width·*height·3` bytes) must be released with
/// [`mpa_bytes_free`].
///
/// # Safety
/// `stream` must point to `len` bytes; out pointers must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mpa_decode(
    model: *const MpaModel,
    stream: *const u8,
    len: usize,
    alpha: f64,
    task: MpaTask,
    rgb_out: *mut *mut u8,
    width: *mut u32,
    height: *mut u32,
) -> MpaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if stream.is_null() {
            return Err(null("stream"));
        }
        if rgb_out.is_null() || width.is_null() || height.is_null() {
            return Err(null("out"));
        }
        let bytes = std::slice::from_raw_parts(stream, len);
        let d = decompress(&m.codec, &m.store, bytes, alpha, task.into(), None).map_err(lift)?;
        *width = d.image.width as u32;
        *height = d.image.height as u32;
        let mut n = 0usize;
        give_bytes(d.image.data, rgb_out, &mut n);
        Ok(())
    })
}

/// Releases a buffer returned by [`mpa_encode`] or [`mpa_decode`].
///
/// # Safety
/// `data`/`len` must be exactly a pair returned by this library, or null.
#[no_mangle]
pub unsafe extern "C" fn mpa_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mpa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mpa_codec::model::ModelConfig;
    use mpa_codec::train::init_stage1;

    fn model_bytes() -> Vec<u8> {
        let (_, store) = init_stage1(ModelConfig::tiny(), 3).unwrap();
        let mut v = Vec::new();
        store.write_checkpoint(&mut v).unwrap();
        v
    }

    #[test]
    fn encode_decode_through_the_abi() {
        let ck = model_bytes();
        let mut m = ptr::null_mut();
        unsafe {
            assert_eq!(mpa_model_load_bytes(ck.as_ptr(), ck.len(), &mut m), MpaStatus::Ok);
            assert_eq!(mpa_model_levels(m), 8);
            let (w, h) = (20u32, 18u32);
            let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i * 7 % 251) as u8).collect();
            let (mut s, mut sl) = (ptr::null_mut(), 0usize);
            assert_eq!(mpa_encode(m, rgb.as_ptr(), w, h, 4.0, &mut s, &mut sl), MpaStatus::Ok);
            assert!(sl > 0);
            let (mut out, mut ow, mut oh) = (ptr::null_mut(), 0u32, 0u32);
            assert_eq!(mpa_decode(m, s, sl, 0.0, MpaTask::Mse, &mut out, &mut ow, &mut oh), MpaStatus::Ok);
            assert_eq!((ow, oh), (w, h));
            mpa_bytes_free(out, (ow * oh * 3) as usize);
            mpa_bytes_free(s, sl);
            mpa_model_free(m);
        }
    }

    #[test]
    fn errors_map_to_status_codes() {
        let ck = model_bytes();
        let mut m = ptr::null_mut();
        unsafe {
            assert_eq!(mpa_model_load_bytes(ptr::null(), 0, &mut m), MpaStatus::NullArgument);
            assert!(!mpa_last_error().is_null());
            assert_eq!(mpa_model_load_bytes(b"nope".as_ptr(), 4, &mut m), MpaStatus::Format);
            assert_eq!(mpa_model_load_bytes(ck.as_ptr(), ck.len(), &mut m), MpaStatus::Ok);
            assert!(mpa_last_error().is_null());
            let junk = [1u8, 2, 3];
            let (mut out, mut w, mut h) = (ptr::null_mut(), 0u32, 0u32);
            assert_eq!(mpa_decode(m, junk.as_ptr(), 3, 0.0, MpaTask::Mse, &mut out, &mut w, &mut h), MpaStatus::Format);
            let msg = CStr::from_ptr(mpa_last_error()).to_str().unwrap();
            assert!(msg.contains("format"), "{msg}");
            let rgb = [0u8; 12];
            let (mut s, mut sl) = (ptr::null_mut(), 0usize);
            assert_eq!(mpa_encode(m, rgb.as_ptr(), 2, 2, 9.5, &mut s, &mut sl), MpaStatus::Usage);
            mpa_model_free(m);
        }
    }
}
