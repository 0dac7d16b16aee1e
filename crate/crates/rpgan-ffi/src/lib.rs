//! C ABI over checkpointed generators and inverters. Handles are opaque;
//! every fallible call returns an [`RpganStatus`] and records a thread-local
//! message retrievable via [`rpgan_last_error_message`].

use rpgan::checkpoint::{load_checkpoint, load_inverter};
use rpgan::generator::{Generator, Route};
use rpgan::lifecycle::{invert, Inverter};
use rpgan::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpganStatus {
    Ok = 0,
    NullArgument = 1,
    Utf8 = 2,
    Io = 3,
    Format = 4,
    Contract = 5,
    BufferTooSmall = 6,
}

/// Opaque generator handle.
pub struct RpganGenerator {
    gen: Generator<f32>,
}

/// Opaque inverter handle.
pub struct RpganInverter {
    inv: Inverter<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> RpganStatus {
    match err {
        Error::Io { .. } => RpganStatus::Io,
        Error::Format(_) => RpganStatus::Format,
        _ => RpganStatus::Contract,
    }
}

/// Message describing the most recent error on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rpgan_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, RpganStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(RpganStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(RpganStatus::Utf8)
        }
    }
}

/// Loads the generator from a checkpoint file into a fresh handle.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn rpgan_generator_load(
    path: *const c_char,
    out: *mut *mut RpganGenerator,
) -> RpganStatus {
    if out.is_null() {
        set_error("null output handle");
        return RpganStatus::NullArgument;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_checkpoint(&path) {
        Ok(bundle) => {
            let handle = Box::new(RpganGenerator {
                gen: bundle.generator,
            });
            *out = Box::into_raw(handle);
            RpganStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Releases a generator handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from [`rpgan_generator_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rpgan_generator_free(handle: *mut RpganGenerator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of buckets, or 0 on a null handle.
///
/// # Safety
/// `handle` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn rpgan_generator_bucket_count(handle: *const RpganGenerator) -> u32 {
    handle.as_ref().map_or(0, |h| h.gen.buckets.len() as u32)
}

/// Instances in one bucket, or 0 when out of range.
///
/// # Safety
/// `handle` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn rpgan_generator_instance_count(
    handle: *const RpganGenerator,
    bucket: u32,
) -> u32 {
    handle.as_ref().map_or(0, |h| {
        h.gen
            .buckets
            .get(bucket as usize)
            .map_or(0, |b| b.len() as u32)
    })
}

/// Scalar count of one generated sample, or 0 on a null/invalid handle.
///
/// # Safety
/// `handle` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn rpgan_generator_output_len(handle: *const RpganGenerator) -> usize {
    handle.as_ref().map_or(0, |h| {
        h.gen
            .output_sample_shape()
            .map_or(0, |s| s.iter().product())
    })
}

/// Exact route count as a decimal string. Fails with `BufferTooSmall` when
/// `cap` cannot hold the digits plus the terminator.
///
/// # Safety
/// `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rpgan_generator_latent_cardinality(
    handle: *const RpganGenerator,
    buf: *mut c_char,
    cap: usize,
) -> RpganStatus {
    let Some(h) = handle.as_ref() else {
        set_error("null generator handle");
        return RpganStatus::NullArgument;
    };
    if buf.is_null() {
        set_error("null output buffer");
        return RpganStatus::NullArgument;
    }
    let digits = h.gen.latent_cardinality().to_string();
    if digits.len() + 1 > cap {
        set_error(&format!(
            "cardinality needs {} bytes, buffer holds {cap}",
            digits.len() + 1
        ));
        return RpganStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(digits.as_ptr(), buf as *mut u8, digits.len());
    *buf.add(digits.len()) = 0;
    RpganStatus::Ok
}

/// Draws a uniform route from a 64-bit seed. `indices` receives one 0-based
/// instance index per bucket.
///
/// # Safety
/// `indices` must point to `len` writable u32 slots.
#[no_mangle]
pub unsafe extern "C" fn rpgan_generator_sample_route(
    handle: *const RpganGenerator,
    seed: u64,
    indices: *mut u32,
    len: usize,
) -> RpganStatus {
    let Some(h) = handle.as_ref() else {
        set_error("null generator handle");
        return RpganStatus::NullArgument;
    };
    if indices.is_null() {
        set_error("null index buffer");
        return RpganStatus::NullArgument;
    }
    let n = h.gen.buckets.len();
    if len < n {
        set_error(&format!("route needs {n} slots, buffer holds {len}"));
        return RpganStatus::BufferTooSmall;
    }
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let route = h.gen.sample_route(&mut rng);
    for (i, &idx) in route.0.iter().enumerate() {
        *indices.add(i) = idx as u32;
    }
    RpganStatus::Ok
}

/// Runs the generator along the given route. `out` receives
/// [`rpgan_generator_output_len`] f32 values in row-major order.
///
/// # Safety
/// `indices` must hold `n_indices` readable u32 values and `out` must hold
/// `out_len` writable f32 slots.
#[no_mangle]
pub unsafe extern "C" fn rpgan_generator_forward(
    handle: *const RpganGenerator,
    indices: *const u32,
    n_indices: usize,
    out: *mut f32,
    out_len: usize,
) -> RpganStatus {
    let Some(h) = handle.as_ref() else {
        set_error("null generator handle");
        return RpganStatus::NullArgument;
    };
    if indices.is_null() || out.is_null() {
        set_error("null buffer");
        return RpganStatus::NullArgument;
    }
    let route = Route(
        std::slice::from_raw_parts(indices, n_indices)
            .iter()
            .map(|&i| i as usize)
            .collect(),
    );
    let needed = rpgan_generator_output_len(handle);
    if out_len < needed {
        set_error(&format!(
            "output needs {needed} floats, buffer holds {out_len}"
        ));
        return RpganStatus::BufferTooSmall;
    }
    match h.gen.forward(&route) {
        Ok(t) => {
            std::ptr::copy_nonoverlapping(t.data().as_ptr(), out, t.numel());
            RpganStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Loads an inverter checkpoint into a fresh handle.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn rpgan_inverter_load(
    path: *const c_char,
    out: *mut *mut RpganInverter,
) -> RpganStatus {
    if out.is_null() {
        set_error("null output handle");
        return RpganStatus::NullArgument;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_inverter(&path) {
        Ok(inv) => {
            *out = Box::into_raw(Box::new(RpganInverter { inv }));
            RpganStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Releases an inverter handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from [`rpgan_inverter_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rpgan_inverter_free(handle: *mut RpganInverter) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Predicts the most likely route for an image (row-major f32 values in the
/// generator's output layout). `indices` receives one 0-based index per
/// bucket.
///
/// # Safety
/// `image` must hold `image_len` readable f32 values and `indices` must hold
/// `indices_len` writable u32 slots.
#[no_mangle]
pub unsafe extern "C" fn rpgan_inverter_invert(
    handle: *const RpganInverter,
    image: *const f32,
    image_len: usize,
    indices: *mut u32,
    indices_len: usize,
) -> RpganStatus {
    let Some(h) = handle.as_ref() else {
        set_error("null inverter handle");
        return RpganStatus::NullArgument;
    };
    if image.is_null() || indices.is_null() {
        set_error("null buffer");
        return RpganStatus::NullArgument;
    }
    let n = h.inv.classifiers.len();
    if indices_len < n {
        set_error(&format!(
            "route needs {n} slots, buffer holds {indices_len}"
        ));
        return RpganStatus::BufferTooSmall;
    }
    let data = std::slice::from_raw_parts(image, image_len).to_vec();
    let tensor = match rpgan::Tensor::new(vec![image_len], data) {
        Ok(t) => t,
        Err(e) => {
            set_error(&e.to_string());
            return RpganStatus::Contract;
        }
    };
    match invert(&h.inv, &tensor) {
        Ok(route) => {
            for (i, &idx) in route.0.iter().enumerate() {
                *indices.add(i) = idx as u32;
            }
            RpganStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}
