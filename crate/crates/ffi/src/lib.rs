// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the `trus` engine.
//!
//! Conventions:
//! - Every fallible function returns a [`TrusStatus`]; results go through
//!   out-pointers that are written only on success.
//! - Tapes, prototypes and registries are opaque handles created by a
//!   `*_read`/`*_open`/`*_build` call and released by the matching `*_free`.
//! - On failure, [`trus_last_error_message`] describes the error. The string
//!   is owned by the library and valid until the next failing call on the
//!   same thread.
//! - Panics never cross the boundary; they surface as `TRUS_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use trus::grid::Cell;
use trus::prototype::{build_prototype, load_prototype, save_prototype};
use trus::registry::{Registration, RegistryStore};
use trus::steering::{apply_steering_in_place, compute_steering_vector};
use trus::tensor::cosine_sim;
use trus::{ActivationTape, IdPrototype, TrusError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrusStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    DegenerateVector = 4,
    InvalidStrength = 5,
    NonUnitDirection = 6,
    NonFiniteValue = 7,
    /// Bad magic, unsupported version, truncated payload or bad header.
    FormatError = 8,
    DuplicateSpeaker = 9,
    EmptyPool = 10,
    /// A required file or sidecar does not exist.
    NotFound = 11,
    IoError = 12,
    ValidationError = 13,
    /// Caller-provided buffer is too small; the required size was reported.
    BufferTooSmall = 14,
    Panic = 15,
}

/// Activation tape handle.
pub struct TrusTape {
    tape: ActivationTape,
    speaker_id: CString,
}

/// Identity prototype handle.
pub struct TrusPrototype {
    proto: IdPrototype,
}

/// Opt-out registry handle bound to one directory.
pub struct TrusRegistry {
    store: RegistryStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &TrusError) -> TrusStatus {
    match err {
        TrusError::ShapeMismatch(_) => TrusStatus::ShapeMismatch,
        TrusError::DegenerateVector(_) | TrusError::DegenerateDirection | TrusError::EmptyMatrix => {
            TrusStatus::DegenerateVector
        }
        TrusError::InvalidStrength(_) => TrusStatus::InvalidStrength,
        TrusError::NonUnitDirection(_) => TrusStatus::NonUnitDirection,
        TrusError::NonFiniteValue(_) => TrusStatus::NonFiniteValue,
        TrusError::BadMagic(_)
        | TrusError::VersionUnsupported(_)
        | TrusError::TruncatedPayload(_)
        | TrusError::InvalidHeader(_) => TrusStatus::FormatError,
        TrusError::DuplicateSpeaker(_) => TrusStatus::DuplicateSpeaker,
        TrusError::EmptyPool => TrusStatus::EmptyPool,
        TrusError::MissingMetadata(_) => TrusStatus::NotFound,
        TrusError::Io(e) | TrusError::SinkFailure(e) if e.kind() == std::io::ErrorKind::NotFound => {
            TrusStatus::NotFound
        }
        TrusError::Io(_) | TrusError::SinkFailure(_) => TrusStatus::IoError,
        TrusError::Config(_) => TrusStatus::InvalidArgument,
        _ => TrusStatus::ValidationError,
    }
}

struct Fail(TrusStatus, String);

impl From<TrusError> for Fail {
    fn from(e: TrusError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TrusStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TrusStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            TrusStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TrusStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TrusStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn tape_handle(tape: ActivationTape) -> Result<*mut TrusTape, Fail> {
    let speaker_id = CString::new(tape.speaker_id())
        .map_err(|_| Fail(TrusStatus::ValidationError, "speaker id contains NUL".into()))?;
    Ok(Box::into_raw(Box::new(TrusTape { tape, speaker_id })))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn trus_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failing call on this thread; empty if none.
#[no_mangle]
pub extern "C" fn trus_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Removes `α (x·s) s` from each of the `rows` frames in `frames`
/// (row-major, `rows × cols`). `s` must be unit-norm with `cols` entries.
#[no_mangle]
pub unsafe extern "C" fn trus_apply_steering(
    frames: *mut f32,
    rows: usize,
    cols: usize,
    direction: *const f32,
    alpha: f64,
) -> TrusStatus {
    guard(|| {
        if frames.is_null() {
            return Err(null("frames"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(TrusStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let s = slice(direction, cols, "direction")?;
        let x = std::slice::from_raw_parts_mut(frames, len);
        apply_steering_in_place(x, s, alpha)?;
        Ok(())
    })
}

/// Writes the unit direction from `prototype` toward `activation` into `out`
/// (all of length `channels`).
#[no_mangle]
pub unsafe extern "C" fn trus_compute_steering_vector(
    activation: *const f32,
    prototype: *const f32,
    channels: usize,
    out: *mut f32,
) -> TrusStatus {
    guard(|| {
        let x = slice(activation, channels, "activation")?;
        let p = slice(prototype, channels, "prototype")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = compute_steering_vector(x, p)?;
        std::slice::from_raw_parts_mut(out, channels).copy_from_slice(&s);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_cosine_similarity(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> TrusStatus {
    guard(|| {
        let v = cosine_sim(slice(a, len, "a")?, slice(b, len, "b")?)?;
        write_out(out, v, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_tape_read(path: *const c_char, out: *mut *mut TrusTape) -> TrusStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let handle = tape_handle(ActivationTape::read_from_path(&path)?)?;
        out.write(handle);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_tape_write(tape: *const TrusTape, path: *const c_char) -> TrusStatus {
    guard(|| {
        let tape = borrow(tape, "tape")?;
        tape.tape.write_to_path(&PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Copies the header dimensions; any out-pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn trus_tape_dims(
    tape: *const TrusTape,
    layers: *mut u32,
    steps: *mut u32,
    channels: *mut u32,
    frames: *mut u32,
) -> TrusStatus {
    guard(|| {
        let h = borrow(tape, "tape")?.tape.header();
        for (out, v) in [
            (layers, u32::from(h.num_layers)),
            (steps, u32::from(h.num_steps)),
            (channels, h.channels),
            (frames, h.frames),
        ] {
            if !out.is_null() {
                out.write(v);
            }
        }
        Ok(())
    })
}

/// Speaker id owned by the tape handle; null if `tape` is null.
#[no_mangle]
pub unsafe extern "C" fn trus_tape_speaker_id(tape: *const TrusTape) -> *const c_char {
    tape.as_ref().map_or(ptr::null(), |t| t.speaker_id.as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn trus_tape_free(tape: *mut TrusTape) {
    if !tape.is_null() {
        drop(Box::from_raw(tape));
    }
}

/// Averages `count` tapes into a new prototype.
#[no_mangle]
pub unsafe extern "C" fn trus_prototype_build(
    tapes: *const *const TrusTape,
    count: usize,
    out: *mut *mut TrusPrototype,
) -> TrusStatus {
    guard(|| {
        if tapes.is_null() && count > 0 {
            return Err(null("tapes"));
        }
        let handles = if count == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(tapes, count)
        };
        let refs = handles
            .iter()
            .map(|&t| borrow(t, "tape").map(|t| &t.tape))
            .collect::<Result<Vec<_>, _>>()?;
        if out.is_null() {
            return Err(null("out"));
        }
        let proto = build_prototype(refs)?;
        out.write(Box::into_raw(Box::new(TrusPrototype { proto })));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_prototype_load(path: *const c_char, out: *mut *mut TrusPrototype) -> TrusStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let proto = load_prototype(&path)?;
        out.write(Box::into_raw(Box::new(TrusPrototype { proto })));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_prototype_save(proto: *const TrusPrototype, path: *const c_char) -> TrusStatus {
    guard(|| {
        let proto = borrow(proto, "prototype")?;
        save_prototype(&proto.proto, &PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_prototype_pool_size(proto: *const TrusPrototype, out: *mut usize) -> TrusStatus {
    guard(|| write_out(out, borrow(proto, "prototype")?.proto.pool_size(), "out"))
}

#[no_mangle]
pub unsafe extern "C" fn trus_prototype_free(proto: *mut TrusPrototype) {
    if !proto.is_null() {
        drop(Box::from_raw(proto));
    }
}

/// Opens the registry in `dir`. With `create` false a missing index is
/// `TRUS_STATUS_NOT_FOUND`; with `create` true an empty registry is made.
#[no_mangle]
pub unsafe extern "C" fn trus_registry_open(
    dir: *const c_char,
    create: bool,
    out: *mut *mut TrusRegistry,
) -> TrusStatus {
    guard(|| {
        let dir = PathBuf::from(c_str(dir, "dir")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let store = if create {
            RegistryStore::open_or_create(&dir)?
        } else {
            RegistryStore::open(&dir)?
        };
        out.write(Box::into_raw(Box::new(TrusRegistry { store })));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_registry_free(registry: *mut TrusRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

#[no_mangle]
pub unsafe extern "C" fn trus_registry_set_match_threshold(registry: *mut TrusRegistry, threshold: f64) -> TrusStatus {
    guard(|| {
        let reg = borrow_mut(registry, "registry")?;
        if !(threshold.is_finite() && threshold <= 1.0) {
            return Err(Fail(TrusStatus::InvalidArgument, format!("threshold {threshold}")));
        }
        reg.store.set_match_threshold(threshold);
        Ok(())
    })
}

/// Registers `speaker_id`. `created` (optional) is set to false when an
/// identical registration already existed.
#[no_mangle]
pub unsafe extern "C" fn trus_registry_register(
    registry: *mut TrusRegistry,
    speaker_id: *const c_char,
    reference: *const TrusTape,
    proto: *const TrusPrototype,
    k: f64,
    alpha: f64,
    created: *mut bool,
) -> TrusStatus {
    guard(|| {
        let reg = borrow_mut(registry, "registry")?;
        let id = c_str(speaker_id, "speaker_id")?;
        let tape = &borrow(reference, "reference")?.tape;
        let proto = &borrow(proto, "prototype")?.proto;
        let outcome = reg.store.register_optout(id, tape, proto, k, alpha)?;
        if !created.is_null() {
            created.write(matches!(outcome, Registration::Created(_)));
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_registry_remove(
    registry: *mut TrusRegistry,
    speaker_id: *const c_char,
    removed: *mut bool,
) -> TrusStatus {
    guard(|| {
        let reg = borrow_mut(registry, "registry")?;
        let existed = reg.store.remove_optout(c_str(speaker_id, "speaker_id")?)?;
        if !removed.is_null() {
            removed.write(existed);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn trus_registry_version(registry: *const TrusRegistry, out: *mut u64) -> TrusStatus {
    guard(|| write_out(out, borrow(registry, "registry")?.store.version(), "out"))
}

#[no_mangle]
pub unsafe extern "C" fn trus_registry_len(registry: *const TrusRegistry, out: *mut usize) -> TrusStatus {
    guard(|| write_out(out, borrow(registry, "registry")?.store.len(), "out"))
}

/// Matches `reference` against the pool. On a match, `*matched` is true
/// and the NUL-terminated speaker id is copied into `id_buf`. `id_len`
/// (optional) receives the id length without the NUL; if `id_buf_len` is
/// too small the call returns `TRUS_STATUS_BUFFER_TOO_SMALL`.
#[no_mangle]
pub unsafe extern "C" fn trus_registry_match(
    registry: *const TrusRegistry,
    reference: *const TrusTape,
    matched: *mut bool,
    id_buf: *mut c_char,
    id_buf_len: usize,
    id_len: *mut usize,
) -> TrusStatus {
    guard(|| {
        let reg = borrow(registry, "registry")?;
        let tape = &borrow(reference, "reference")?.tape;
        let hit = reg.store.match_reference(tape).map(|r| r.speaker_id.clone());
        if matched.is_null() {
            return Err(null("matched"));
        }
        let Some(id) = hit else {
            matched.write(false);
            return Ok(());
        };
        if !id_len.is_null() {
            id_len.write(id.len());
        }
        if id_buf.is_null() || id_buf_len < id.len() + 1 {
            return Err(Fail(
                TrusStatus::BufferTooSmall,
                format!("speaker id needs {} bytes", id.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(id.as_ptr().cast::<c_char>(), id_buf, id.len());
        id_buf.add(id.len()).write(0);
        matched.write(true);
        Ok(())
    })
}

/// Steering data of one record at (`layer`, `step`), both 1-based.
///
/// `masked` tells whether the cell is selected for intervention and
/// `present` whether a direction exists there. When present, the direction
/// is copied to `direction` (length `channels`, may be null to skip).
/// `alpha` receives the stored strength.
#[no_mangle]
pub unsafe extern "C" fn trus_registry_cell_steering(
    registry: *const TrusRegistry,
    speaker_id: *const c_char,
    layer: u32,
    step: u32,
    direction: *mut f32,
    channels: usize,
    masked: *mut bool,
    present: *mut bool,
    alpha: *mut f64,
) -> TrusStatus {
    guard(|| {
        let reg = borrow(registry, "registry")?;
        let id = c_str(speaker_id, "speaker_id")?;
        let record = reg
            .store
            .lookup(id)
            .ok_or_else(|| Fail(TrusStatus::NotFound, format!("speaker '{id}' is not registered")))?;
        let cell = Cell::new(layer as usize, step as usize);
        if !record.steering.shape().contains(cell) {
            return Err(Fail(
                TrusStatus::InvalidArgument,
                format!("cell {cell} outside the grid"),
            ));
        }
        let dir = record.steering.direction(cell);
        if let (Some(s), false) = (dir, direction.is_null()) {
            if channels != s.len() {
                return Err(Fail(
                    TrusStatus::ShapeMismatch,
                    format!("buffer has {channels} channels, record has {}", s.len()),
                ));
            }
            std::slice::from_raw_parts_mut(direction, channels).copy_from_slice(s);
        }
        write_out(masked, record.mask.contains(cell), "masked")?;
        write_out(present, dir.is_some(), "present")?;
        write_out(alpha, record.steering.alpha(), "alpha")
    })
}
