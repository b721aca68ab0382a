//! C ABI over an embedded kernel.
//!
//! Every function returns an `int32_t` status: `IK_OK` (0) or a negative
//! error code from the table shared with the wire protocol. After a failure,
//! `ik_last_error` describes it. A kernel handle is not thread-safe: create,
//! use and free it on one thread. Instance ids are `uint64_t`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use inferlet_core::error::ErrorCode;
use inferlet_core::runtime::{InstanceStatus, Kernel, KernelConfig, OutputKind};

pub const IK_OK: i32 = 0;
pub const IK_ERR_INVALID_ARGUMENT: i32 = -1;
pub const IK_ERR_INVALID_HANDLE: i32 = -2;
pub const IK_ERR_DOUBLE_FREE: i32 = -3;
pub const IK_ERR_INVALID_QUEUE: i32 = -4;
pub const IK_ERR_UNKNOWN_MODEL: i32 = -5;
pub const IK_ERR_POOL_EXHAUSTED: i32 = -6;
pub const IK_ERR_IMMUTABLE_TARGET: i32 = -7;
pub const IK_ERR_RANGE_MISMATCH: i32 = -8;
pub const IK_ERR_LENGTH_MISMATCH: i32 = -9;
pub const IK_ERR_NAME_TAKEN: i32 = -10;
pub const IK_ERR_NAME_NOT_FOUND: i32 = -11;
pub const IK_ERR_UNKNOWN_TOKEN_ID: i32 = -12;
pub const IK_ERR_UNFILLED_EMBED: i32 = -13;
pub const IK_ERR_SLOT_OVERFLOW: i32 = -14;
pub const IK_ERR_MASK_SHAPE_MISMATCH: i32 = -15;
pub const IK_ERR_POSITION_ORDER: i32 = -16;
pub const IK_ERR_MISSING_TRAIT: i32 = -17;
pub const IK_ERR_CLIENT_GONE: i32 = -18;
pub const IK_ERR_DENIED: i32 = -19;
pub const IK_ERR_NETWORK: i32 = -20;
pub const IK_ERR_TIMEOUT: i32 = -21;
pub const IK_ERR_TERMINATED: i32 = -22;
pub const IK_ERR_BUSY: i32 = -23;
pub const IK_ERR_BACKEND: i32 = -24;
pub const IK_ERR_BUFFER_TOO_SMALL: i32 = -25;
pub const IK_ERR_UNKNOWN_PROGRAM: i32 = -26;
pub const IK_ERR_LOAD_FAILURE: i32 = -27;
pub const IK_ERR_NOT_FOUND: i32 = -28;
pub const IK_ERR_INTERNAL: i32 = -99;

pub const IK_STATE_RUNNING: i32 = 0;
pub const IK_STATE_FINISHED: i32 = 1;
pub const IK_STATE_FAILED: i32 = 2;
pub const IK_STATE_TERMINATED: i32 = 3;

/// Length of a program hash written by `ik_upload`, without the NUL.
pub const IK_HASH_LEN: usize = 64;

/// Opaque kernel handle.
pub struct IkKernel {
    kernel: Kernel,
    output: BTreeMap<u64, Vec<u8>>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(code: ErrorCode, msg: impl Into<String>) -> i32 {
    set_error(msg);
    code as i32
}

/// Runs `f`, turning a panic into `IK_ERR_INTERNAL`.
fn guard(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => fail(ErrorCode::Internal, "internal panic"),
    }
}

unsafe fn kernel<'a>(k: *mut IkKernel) -> Option<&'a mut IkKernel> {
    k.as_mut()
}

unsafe fn c_str<'a>(s: *const c_char) -> Result<&'a str, i32> {
    if s.is_null() {
        return Err(fail(ErrorCode::InvalidArgument, "null string"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(ErrorCode::InvalidArgument, "string is not UTF-8"))
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], i32> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(ErrorCode::InvalidArgument, "null buffer"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

impl IkKernel {
    fn drain(&mut self) {
        for o in self.kernel.take_outputs() {
            if let OutputKind::Message(m) = o.kind {
                self.output.entry(o.instance).or_default().extend_from_slice(&m);
            }
        }
    }
}

/// Creates a kernel. `config_toml` may be NULL for defaults; otherwise it
/// uses the server config keys (`kv_pages`, `models`, `policy`, ...).
///
/// # Safety
/// `config_toml` must be NULL or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ik_kernel_new(config_toml: *const c_char, out: *mut *mut IkKernel) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(ErrorCode::InvalidArgument, "null output pointer");
        }
        let config = if config_toml.is_null() {
            KernelConfig::default()
        } else {
            let text = match c_str(config_toml) {
                Ok(t) => t,
                Err(code) => return code,
            };
            match toml::from_str::<KernelConfig>(text) {
                Ok(c) => c,
                Err(e) => return fail(ErrorCode::InvalidArgument, e.to_string()),
            }
        };
        match Kernel::new(config) {
            Ok(kernel) => {
                *out = Box::into_raw(Box::new(IkKernel { kernel, output: BTreeMap::new() }));
                IK_OK
            }
            Err(e) => fail(ErrorCode::InvalidArgument, e.to_string()),
        }
    })
}

/// Frees a kernel and everything it runs. NULL is ignored.
///
/// # Safety
/// `k` must be NULL or a handle from `ik_kernel_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ik_kernel_free(k: *mut IkKernel) {
    if !k.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(k))));
    }
}

/// Stores a module and writes its NUL-terminated hex hash into `hash_out`,
/// which needs room for `IK_HASH_LEN + 1` bytes.
///
/// # Safety
/// `data` must point to `len` readable bytes and `hash_out` to `cap`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ik_upload(k: *mut IkKernel, data: *const u8, len: usize, hash_out: *mut c_char, cap: usize) -> i32 {
    guard(|| {
        let Some(k) = kernel(k) else { return fail(ErrorCode::InvalidArgument, "null kernel") };
        let data = match bytes(data, len) {
            Ok(d) => d,
            Err(code) => return code,
        };
        if hash_out.is_null() || cap < IK_HASH_LEN + 1 {
            return fail(ErrorCode::BufferTooSmall, "hash buffer needs 65 bytes");
        }
        let hash = k.kernel.upload_program(data);
        ptr::copy_nonoverlapping(hash.as_ptr(), hash_out as *mut u8, IK_HASH_LEN);
        *hash_out.add(IK_HASH_LEN) = 0;
        IK_OK
    })
}

/// Launches `program` (built-in name or hash) with `argc` arguments.
///
/// # Safety
/// `program` and each of the `argc` entries of `argv` must be
/// NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ik_launch(
    k: *mut IkKernel,
    program: *const c_char,
    argv: *const *const c_char,
    argc: usize,
    out: *mut u64,
) -> i32 {
    guard(|| {
        let Some(k) = kernel(k) else { return fail(ErrorCode::InvalidArgument, "null kernel") };
        if out.is_null() || (argc > 0 && argv.is_null()) {
            return fail(ErrorCode::InvalidArgument, "null pointer");
        }
        let program = match c_str(program) {
            Ok(p) => p,
            Err(code) => return code,
        };
        let mut args = Vec::with_capacity(argc);
        for i in 0..argc {
            match c_str(*argv.add(i)) {
                Ok(a) => args.push(a.to_string()),
                Err(code) => return code,
            }
        }
        match k.kernel.launch(program, args) {
            Ok(info) => {
                *out = info.instance;
                IK_OK
            }
            Err(e) => fail(e.code(), e.to_string()),
        }
    })
}

/// Delivers a client message to the instance's `receive`.
///
/// # Safety
/// `data` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn ik_send(k: *mut IkKernel, instance: u64, data: *const u8, len: usize) -> i32 {
    guard(|| {
        let Some(k) = kernel(k) else { return fail(ErrorCode::InvalidArgument, "null kernel") };
        let data = match bytes(data, len) {
            Ok(d) => d.to_vec(),
            Err(code) => return code,
        };
        match k.kernel.send_message(instance, data) {
            Ok(()) => IK_OK,
            Err(e) => fail(e.code(), e.to_string()),
        }
    })
}

/// Runs until no instance can make progress without outside input.
///
/// # Safety
/// `k` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ik_run_until_idle(k: *mut IkKernel) -> i32 {
    guard(|| {
        let Some(k) = kernel(k) else { return fail(ErrorCode::InvalidArgument, "null kernel") };
        k.kernel.run_until_idle();
        k.drain();
        IK_OK
    })
}

/// Writes one of the `IK_STATE_*` values.
///
/// # Safety
/// `state` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ik_status(k: *mut IkKernel, instance: u64, state: *mut i32) -> i32 {
    guard(|| {
        let Some(k) = kernel(k) else { return fail(ErrorCode::InvalidArgument, "null kernel") };
        if state.is_null() {
            return fail(ErrorCode::InvalidArgument, "null output pointer");
        }
        let Some(status) = k.kernel.status(instance) else {
            return fail(ErrorCode::NotFound, format!("no instance {instance}"));
        };
        *state = match status {
            InstanceStatus::Running => IK_STATE_RUNNING,
            InstanceStatus::Finished(_) => IK_STATE_FINISHED,
            InstanceStatus::Failed(_) => IK_STATE_FAILED,
            InstanceStatus::Terminated(_) => IK_STATE_TERMINATED,
        };
        IK_OK
    })
}

/// Takes the bytes the instance has sent so far. `*len` receives the
/// number of bytes available; if that exceeds `cap` the call fails with
/// `IK_ERR_BUFFER_TOO_SMALL` and nothing is consumed.
///
/// # Safety
/// `buf` must point to `cap` writable bytes (may be NULL when `cap` is 0);
/// `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ik_read_output(k: *mut IkKernel, instance: u64, buf: *mut u8, cap: usize, len: *mut usize) -> i32 {
    guard(|| {
        let Some(k) = kernel(k) else { return fail(ErrorCode::InvalidArgument, "null kernel") };
        if len.is_null() {
            return fail(ErrorCode::InvalidArgument, "null length pointer");
        }
        k.drain();
        if k.kernel.status(instance).is_none() {
            return fail(ErrorCode::NotFound, format!("no instance {instance}"));
        }
        let pending = k.output.get(&instance).map_or(0, Vec::len);
        *len = pending;
        if pending > cap {
            return fail(ErrorCode::BufferTooSmall, format!("{pending} bytes pending"));
        }
        if let Some(data) = k.output.remove(&instance) {
            if !data.is_empty() {
                if buf.is_null() {
                    return fail(ErrorCode::InvalidArgument, "null buffer");
                }
                ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
            }
        }
        IK_OK
    })
}

/// Terminates a running instance. Terminating an instance that already
/// exited succeeds and changes nothing.
///
/// # Safety
/// `k` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ik_terminate(k: *mut IkKernel, instance: u64) -> i32 {
    guard(|| {
        let Some(k) = kernel(k) else { return fail(ErrorCode::InvalidArgument, "null kernel") };
        if k.kernel.status(instance).is_none() {
            return fail(ErrorCode::NotFound, format!("no instance {instance}"));
        }
        k.kernel.terminate(instance, "client_request");
        k.drain();
        IK_OK
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `cap`. Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ik_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static name of an error code, e.g. "PoolExhausted". Unknown codes give
/// "Unknown".
#[no_mangle]
pub extern "C" fn ik_error_name(code: i32) -> *const c_char {
    let name: &'static CStr = match code {
        IK_OK => c"Ok",
        IK_ERR_INVALID_ARGUMENT => c"InvalidArgument",
        IK_ERR_INVALID_HANDLE => c"InvalidHandle",
        IK_ERR_DOUBLE_FREE => c"DoubleFree",
        IK_ERR_INVALID_QUEUE => c"InvalidQueue",
        IK_ERR_UNKNOWN_MODEL => c"UnknownModel",
        IK_ERR_POOL_EXHAUSTED => c"PoolExhausted",
        IK_ERR_IMMUTABLE_TARGET => c"ImmutableTarget",
        IK_ERR_RANGE_MISMATCH => c"RangeMismatch",
        IK_ERR_LENGTH_MISMATCH => c"LengthMismatch",
        IK_ERR_NAME_TAKEN => c"NameTaken",
        IK_ERR_NAME_NOT_FOUND => c"NameNotFound",
        IK_ERR_UNKNOWN_TOKEN_ID => c"UnknownTokenId",
        IK_ERR_UNFILLED_EMBED => c"UnfilledEmbed",
        IK_ERR_SLOT_OVERFLOW => c"SlotOverflow",
        IK_ERR_MASK_SHAPE_MISMATCH => c"MaskShapeMismatch",
        IK_ERR_POSITION_ORDER => c"PositionOrder",
        IK_ERR_MISSING_TRAIT => c"MissingTrait",
        IK_ERR_CLIENT_GONE => c"ClientGone",
        IK_ERR_DENIED => c"Denied",
        IK_ERR_NETWORK => c"Network",
        IK_ERR_TIMEOUT => c"Timeout",
        IK_ERR_TERMINATED => c"Terminated",
        IK_ERR_BUSY => c"Busy",
        IK_ERR_BACKEND => c"Backend",
        IK_ERR_BUFFER_TOO_SMALL => c"BufferTooSmall",
        IK_ERR_UNKNOWN_PROGRAM => c"UnknownProgram",
        IK_ERR_LOAD_FAILURE => c"LoadFailure",
        IK_ERR_NOT_FOUND => c"NotFound",
        IK_ERR_INTERNAL => c"Internal",
        _ => c"Unknown",
    };
    name.as_ptr()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_match_core_codes() {
        let pairs = [
            (IK_ERR_INVALID_ARGUMENT, ErrorCode::InvalidArgument),
            (IK_ERR_POOL_EXHAUSTED, ErrorCode::PoolExhausted),
            (IK_ERR_MISSING_TRAIT, ErrorCode::MissingTrait),
            (IK_ERR_BUFFER_TOO_SMALL, ErrorCode::BufferTooSmall),
            (IK_ERR_UNKNOWN_PROGRAM, ErrorCode::UnknownProgram),
            (IK_ERR_LOAD_FAILURE, ErrorCode::LoadFailure),
            (IK_ERR_NOT_FOUND, ErrorCode::NotFound),
            (IK_ERR_INTERNAL, ErrorCode::Internal),
        ];
        for (c, e) in pairs {
            assert_eq!(c, e as i32);
        }
        for code in (-28..=0).chain([-99]) {
            let name = unsafe { CStr::from_ptr(ik_error_name(code)) };
            assert_ne!(name.to_str().unwrap(), "Unknown", "code {code}");
        }
    }
}
