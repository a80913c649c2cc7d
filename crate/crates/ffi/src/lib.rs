//! C ABI over a single forest layer.
//!
//! Every fallible call returns an [`FffStatus`]; on failure the message is
//! available from [`fff_last_error`] on the same thread until the next call.
//! Panics are caught at the boundary and reported as `FFF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fastff::forest::{
    forward_masked, forward_sequential, init_forest, mlp_block_sparsity, read_forest, write_forest,
    ForestParams, InitScheme, Variant,
};
use fastff::{Error, Matrix, Params, Rng};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FffVariant {
    /// GELU on each node before the output sum.
    PreGelu = 0,
    /// GELU once on the summed output.
    PostGelu = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FffDims {
    pub trees: u32,
    pub depth: u32,
    pub d_in: u32,
    pub d_out: u32,
    pub variant: FffVariant,
}

/// Opaque layer handle.
pub struct FffLayer {
    params: ForestParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FffStatus {
    match e {
        Error::Shape(_) | Error::StaleCache(_) => FffStatus::Shape,
        Error::NonFinite(_) | Error::Diverged { .. } => FffStatus::NonFinite,
        Error::Io(_) => FffStatus::Io,
        Error::Format(_) => FffStatus::Format,
        Error::InvalidArgument(_) | Error::Empty(_) | Error::Config(_) => FffStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FffStatus, String)>) -> FffStatus {
    set_error(String::new());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FffStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside fastff".into());
            FffStatus::Panic
        }
    }
}

fn lib(e: Error) -> (FffStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FffStatus, String) {
    (FffStatus::NullPointer, format!("{what} is null"))
}

unsafe fn layer_ref<'a>(layer: *const FffLayer) -> Result<&'a FffLayer, (FffStatus, String)> {
    layer.as_ref().ok_or_else(|| null("layer"))
}

unsafe fn path_arg(path: *const c_char) -> Result<String, (FffStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (FffStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn input_matrix(params: &ForestParams, x: *const f64, batch: usize) -> Result<Matrix, (FffStatus, String)> {
    if x.is_null() {
        return Err(null("x"));
    }
    let n = batch
        .checked_mul(params.d_in())
        .ok_or((FffStatus::InvalidArgument, "batch too large".to_string()))?;
    let data = std::slice::from_raw_parts(x, n).to_vec();
    Matrix::from_vec(batch, params.d_in(), data).map_err(lib)
}

/// Creates a layer with scaled Gaussian initialization.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn fff_layer_new(
    trees: u32,
    depth: u32,
    d_in: u32,
    d_out: u32,
    variant: FffVariant,
    seed: u64,
    out: *mut *mut FffLayer,
) -> FffStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = match variant {
            FffVariant::PreGelu => Variant::PreGelu,
            FffVariant::PostGelu => Variant::PostGelu,
        };
        let params = init_forest(
            &mut Rng::new(seed),
            trees as usize,
            depth as usize,
            d_in as usize,
            d_out as usize,
            v,
            InitScheme::Scaled,
        )
        .map_err(lib)?;
        *out = Box::into_raw(Box::new(FffLayer { params }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `layer` must be null or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn fff_layer_free(layer: *mut FffLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Writes the layer's dimensions into `out`.
///
/// # Safety
/// `layer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fff_layer_dims(layer: *const FffLayer, out: *mut FffDims) -> FffStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = &l.params;
        *out = FffDims {
            trees: p.trees() as u32,
            depth: p.depth() as u32,
            d_in: p.d_in() as u32,
            d_out: p.d_out() as u32,
            variant: match p.variant() {
                Variant::PreGelu => FffVariant::PreGelu,
                Variant::PostGelu => FffVariant::PostGelu,
            },
        };
        Ok(())
    })
}

/// Total parameters and parameters touched per input.
///
/// # Safety
/// `layer` must be a live handle; `total` and `active` writable.
#[no_mangle]
pub unsafe extern "C" fn fff_layer_param_count(
    layer: *const FffLayer,
    total: *mut usize,
    active: *mut usize,
) -> FffStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        if total.is_null() || active.is_null() {
            return Err(null("total/active"));
        }
        *total = l.params.num_params();
        *active = l.params.active_param_count();
        Ok(())
    })
}

unsafe fn forward_into(
    layer: *const FffLayer,
    x: *const f64,
    batch: usize,
    y: *mut f64,
    y_len: usize,
    masked: bool,
) -> FffStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        let xm = input_matrix(&l.params, x, batch)?;
        if y.is_null() {
            return Err(null("y"));
        }
        if y_len != batch * l.params.d_out() {
            return Err((
                FffStatus::Shape,
                format!("y holds {y_len} values, expected {}", batch * l.params.d_out()),
            ));
        }
        let (out, _) = if masked {
            forward_masked(&l.params, &xm)
        } else {
            forward_sequential(&l.params, &xm)
        }
        .map_err(lib)?;
        std::slice::from_raw_parts_mut(y, y_len).copy_from_slice(out.data());
        Ok(())
    })
}

/// Sequential forward: `x` is `batch x d_in` row-major, `y` is
/// `batch x d_out` row-major with `y_len == batch * d_out`.
///
/// # Safety
/// `x` must hold `batch * d_in` doubles and `y` `y_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fff_layer_forward(
    layer: *const FffLayer,
    x: *const f64,
    batch: usize,
    y: *mut f64,
    y_len: usize,
) -> FffStatus {
    forward_into(layer, x, batch, y, y_len, false)
}

/// Mask-based forward; same layout and results as [`fff_layer_forward`]
/// up to rounding.
///
/// # Safety
/// As for [`fff_layer_forward`].
#[no_mangle]
pub unsafe extern "C" fn fff_layer_forward_masked(
    layer: *const FffLayer,
    x: *const f64,
    batch: usize,
    y: *mut f64,
    y_len: usize,
) -> FffStatus {
    forward_into(layer, x, batch, y, y_len, true)
}

/// Leaf slot reached in each tree: `leaves[b * trees + p]`, with
/// `leaves_len == batch * trees`.
///
/// # Safety
/// `x` must hold `batch * d_in` doubles and `leaves` `leaves_len` writable u32s.
#[no_mangle]
pub unsafe extern "C" fn fff_layer_route(
    layer: *const FffLayer,
    x: *const f64,
    batch: usize,
    leaves: *mut u32,
    leaves_len: usize,
) -> FffStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        let xm = input_matrix(&l.params, x, batch)?;
        if leaves.is_null() {
            return Err(null("leaves"));
        }
        let trees = l.params.trees();
        if leaves_len != batch * trees {
            return Err((
                FffStatus::Shape,
                format!("leaves holds {leaves_len} values, expected {}", batch * trees),
            ));
        }
        let (_, cache) = forward_sequential(&l.params, &xm).map_err(lib)?;
        let dst = std::slice::from_raw_parts_mut(leaves, leaves_len);
        for b in 0..batch {
            for p in 0..trees {
                dst[b * trees + p] = cache.mask.leaf(b, p) as u32;
            }
        }
        Ok(())
    })
}

/// Saves the layer in the `FFF1` format.
///
/// # Safety
/// `layer` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fff_layer_save(layer: *const FffLayer, path: *const c_char) -> FffStatus {
    guard(|| {
        let l = layer_ref(layer)?;
        let p = path_arg(path)?;
        let f = std::fs::File::create(&p).map_err(|e| (FffStatus::Io, format!("{p}: {e}")))?;
        let mut w = std::io::BufWriter::new(f);
        write_forest(&l.params, &mut w).map_err(lib)?;
        std::io::Write::flush(&mut w).map_err(|e| (FffStatus::Io, format!("{p}: {e}")))
    })
}

/// Loads an `FFF1` file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fff_layer_load(path: *const c_char, out: *mut *mut FffLayer) -> FffStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path)?;
        let f = std::fs::File::open(&p).map_err(|e| (FffStatus::Io, format!("{p}: {e}")))?;
        let params = read_forest(std::io::BufReader::new(f)).map_err(lib)?;
        *out = Box::into_raw(Box::new(FffLayer { params }));
        Ok(())
    })
}

/// Fraction of a tree's nodes skipped per input: `1 − (D+1)/(2^(D+1)−1)`.
/// Returns NaN for depths above 62.
#[no_mangle]
pub extern "C" fn fff_mlp_block_sparsity(depth: u32) -> f64 {
    if depth > 62 {
        return f64::NAN;
    }
    mlp_block_sparsity(depth as usize)
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
