//! C ABI over the segmentation pipeline: load a trained checkpoint behind an
//! opaque handle and segment normalized depth images into per-instance masks.
//! All functions are panic-safe; failures return a status code and store a
//! message retrievable through [`insegan_last_error`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, size_t};
use ndarray::Array2;

use insegan::inference::{clean_mask, segment};
use insegan::training::{load_checkpoint, Trainer};

/// Result codes for every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InseganStatus {
    InseganOk = 0,
    /// A required pointer argument was null.
    InseganNullArgument = 1,
    /// An argument had the wrong size or an invalid value.
    InseganInvalidArgument = 2,
    /// The checkpoint could not be read or parsed.
    InseganBadCheckpoint = 3,
    /// An internal failure; see `insegan_last_error`.
    InseganInternal = 4,
}

use InseganStatus::*;

/// Opaque handle to a loaded model (generator + encoder weights).
pub struct InseganModel {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn guard<F: FnOnce() -> InseganStatus>(f: F) -> InseganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            InseganInternal
        }
    }
}

/// Copies the most recent error message for this thread into `buf` (always
/// NUL-terminated, truncated to `cap`). Returns the full message length in
/// bytes, excluding the terminator; call with `cap == 0` to query the size.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn insegan_last_error(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a trained checkpoint file and returns a model handle through `out`.
/// The handle must be released with [`insegan_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be a valid
/// pointer to a model-handle slot.
#[no_mangle]
pub unsafe extern "C" fn insegan_model_load(
    path: *const c_char,
    out: *mut *mut InseganModel,
) -> InseganStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            set_error("path and out must be non-null");
            return InseganNullArgument;
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return InseganInvalidArgument;
            }
        };
        match load_checkpoint(Path::new(path)) {
            Ok(trainer) => {
                *out = Box::into_raw(Box::new(InseganModel { trainer }));
                InseganOk
            }
            Err(e) => {
                set_error(&e.to_string());
                InseganBadCheckpoint
            }
        }
    })
}

/// Releases a model handle. A null handle is a no-op.
///
/// # Safety
/// `model` must be a handle from [`insegan_model_load`], released only once.
#[no_mangle]
pub unsafe extern "C" fn insegan_model_free(model: *mut InseganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square depth images the model consumes and of the masks
/// it emits. Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from [`insegan_model_load`].
#[no_mangle]
pub unsafe extern "C" fn insegan_model_image_size(model: *const InseganModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).trainer.cfg.net.image_size() as u32
}

/// Number of object instances the model separates. Returns 0 for a null
/// handle.
///
/// # Safety
/// `model` must be null or a live handle from [`insegan_model_load`].
#[no_mangle]
pub unsafe extern "C" fn insegan_model_instance_count(model: *const InseganModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).trainer.cfg.net.n_instances as u32
}

/// Segments one normalized depth image (row-major `side * side` floats) into
/// a per-pixel label mask: 0 is background, labels `1..=instance_count`
/// identify instances. Pixels whose reconstructed depth is at or below `tau`
/// become background; connected components smaller than `min_area` pixels are
/// suppressed (pass 0 to keep everything).
///
/// # Safety
/// `depth` must point to `depth_len` readable floats and `mask_out` to
/// `mask_len` writable bytes; both lengths must equal `side * side`.
#[no_mangle]
pub unsafe extern "C" fn insegan_segment(
    model: *const InseganModel,
    depth: *const f32,
    depth_len: size_t,
    tau: f32,
    min_area: size_t,
    mask_out: *mut u8,
    mask_len: size_t,
) -> InseganStatus {
    guard(|| {
        if model.is_null() || depth.is_null() || mask_out.is_null() {
            set_error("model, depth, and mask_out must be non-null");
            return InseganNullArgument;
        }
        let trainer = &(*model).trainer;
        let side = trainer.cfg.net.image_size();
        if depth_len != side * side || mask_len != side * side {
            set_error(&format!(
                "expected {} pixels for a {side}x{side} image, got depth_len {depth_len}, mask_len {mask_len}",
                side * side
            ));
            return InseganInvalidArgument;
        }
        if !tau.is_finite() {
            set_error("tau must be finite");
            return InseganInvalidArgument;
        }
        let input = std::slice::from_raw_parts(depth, depth_len);
        let x = Array2::from_shape_vec((side, side), input.to_vec()).unwrap();
        match segment(&x, &trainer.gen, &trainer.enc, tau) {
            Ok(result) => {
                let mask = clean_mask(result.mask.view(), min_area);
                let out = std::slice::from_raw_parts_mut(mask_out, mask_len);
                out.copy_from_slice(mask.as_slice().unwrap());
                InseganOk
            }
            Err(e) => {
                set_error(&e.to_string());
                InseganInternal
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use insegan::nets::NetConfig;
    use insegan::training::{save_checkpoint, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
        let mut cfg = TrainConfig::default();
        cfg.net = NetConfig::narrow(2);
        let trainer = Trainer::new(cfg);
        let path = dir.join("model.ckpt");
        save_checkpoint(&trainer, &path).unwrap();
        path
    }

    #[test]
    fn load_segment_free_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_checkpoint(dir.path());
        let cpath = CString::new(path.to_str().unwrap()).unwrap();

        let mut model: *mut InseganModel = std::ptr::null_mut();
        let status = unsafe { insegan_model_load(cpath.as_ptr(), &mut model) };
        assert_eq!(status, InseganOk);
        assert!(!model.is_null());
        assert_eq!(unsafe { insegan_model_image_size(model) }, 64);
        assert_eq!(unsafe { insegan_model_instance_count(model) }, 2);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let depth: Vec<f32> = (0..64 * 64).map(|_| normal.sample(&mut rng)).collect();
        let mut mask = vec![0xffu8; 64 * 64];
        let status = unsafe {
            insegan_segment(model, depth.as_ptr(), depth.len(), 0.0, 8, mask.as_mut_ptr(), mask.len())
        };
        assert_eq!(status, InseganOk);
        assert!(mask.iter().all(|&l| l <= 2));

        unsafe { insegan_model_free(model) };
    }

    #[test]
    fn errors_are_reported_with_messages() {
        let mut model: *mut InseganModel = std::ptr::null_mut();
        let status = unsafe { insegan_model_load(std::ptr::null(), &mut model) };
        assert_eq!(status, InseganNullArgument);

        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        let status = unsafe { insegan_model_load(missing.as_ptr(), &mut model) };
        assert_eq!(status, InseganBadCheckpoint);
        let mut buf = vec![0u8; 256];
        let len = unsafe { insegan_last_error(buf.as_mut_ptr() as *mut c_char, buf.len()) };
        assert!(len > 0);
        let msg = std::str::from_utf8(&buf[..len.min(buf.len() - 1)]).unwrap();
        assert!(!msg.is_empty());

        // wrong buffer sizes are rejected before any work happens
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_checkpoint(dir.path());
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let status = unsafe { insegan_model_load(cpath.as_ptr(), &mut model) };
        assert_eq!(status, InseganOk);
        let depth = vec![0.0f32; 16];
        let mut mask = vec![0u8; 16];
        let status = unsafe {
            insegan_segment(model, depth.as_ptr(), depth.len(), 0.0, 0, mask.as_mut_ptr(), mask.len())
        };
        assert_eq!(status, InseganInvalidArgument);
        unsafe { insegan_model_free(model) };
        unsafe { insegan_model_free(std::ptr::null_mut()) };
    }
}
