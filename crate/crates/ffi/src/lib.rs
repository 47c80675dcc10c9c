//! C ABI for the ellipsoid calculus, the GP model and the benchmark
//! environments.
//!
//! Objects are passed as opaque handles created by `*_new`/`*_fit` and
//! released with the matching `*_free`. Matrices are dense row-major arrays.
//! Every fallible call returns a [`SafempcStatus`]; on failure the message is
//! available from [`safempc_last_error_message`] until the next failing call
//! on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use safempc::ellipsoid::Ellipsoid;
use safempc::env::{EnvConfig, EnvSpec};
use safempc::gp::{mutual_information, Dataset, GpPosterior, KernelSpec};
use safempc::Error;

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafempcStatus {
    Ok = 0,
    NullPointer = 1,
    DimensionMismatch = 2,
    InvalidInput = 3,
    /// Degenerate shape matrix or operand.
    Degenerate = 4,
    NumericalFailure = 5,
    /// The library panicked; the handle involved should not be used again.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafempcSystem {
    Pendulum = 0,
    CartPole = 1,
}

/// Ellipsoid `{x : (x − c)ᵀ Q⁻¹ (x − c) ≤ 1}`.
pub struct SafempcEllipsoid(Ellipsoid);

/// GP posterior over a vector-valued function.
pub struct SafempcGp(GpPosterior);

/// Benchmark system with its prior model, safety controller and safe set.
pub struct SafempcEnv(EnvSpec);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SafempcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } => SafempcStatus::DimensionMismatch,
            Error::InvalidInput(_) | Error::Config(_) => SafempcStatus::InvalidInput,
            Error::DegenerateShape(_) | Error::DegenerateOperand(_) => SafempcStatus::Degenerate,
            _ => SafempcStatus::NumericalFailure,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> SafempcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SafempcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            SafempcStatus::Panic
        }
    }
}

fn null_check<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(SafempcStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn dim_check(expected: usize, got: usize, what: &str) -> Result<(), Failure> {
    if expected != got {
        return Err(Failure(
            SafempcStatus::DimensionMismatch,
            format!("{what}: expected length {expected}, got {got}"),
        ));
    }
    Ok(())
}

/// # Safety
/// `p` must point to `len` readable values, or be null with `len == 0`.
unsafe fn read_slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    null_check(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must point to `len` writable values.
unsafe fn write_slice(p: *mut f64, values: &[f64], name: &str) -> Result<(), Failure> {
    if values.is_empty() {
        return Ok(());
    }
    null_check(p, name)?;
    std::slice::from_raw_parts_mut(p, values.len()).copy_from_slice(values);
    Ok(())
}

fn row_major(data: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Message of the last failing call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn safempc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an ellipsoid from its center (`n`) and shape matrix (`n×n`).
///
/// # Safety
/// `center` and `shape` must hold `n` and `n*n` values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_new(
    center: *const f64,
    shape: *const f64,
    n: usize,
    out: *mut *mut SafempcEllipsoid,
) -> SafempcStatus {
    guard(|| {
        null_check(out, "out")?;
        let c = read_slice(center, n, "center")?;
        let q = read_slice(shape, n * n, "shape")?;
        let e = Ellipsoid::new(DVector::from_column_slice(c), row_major(q, n, n))?;
        *out = Box::into_raw(Box::new(SafempcEllipsoid(e)));
        Ok(())
    })
}

/// # Safety
/// `e` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_free(e: *mut SafempcEllipsoid) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Dimension of the ellipsoid, or 0 for a null handle.
///
/// # Safety
/// `e` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_dim(e: *const SafempcEllipsoid) -> usize {
    e.as_ref().map_or(0, |e| e.0.dim())
}

/// Copies the center into `out` (`len` must equal the dimension).
///
/// # Safety
/// `e` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_center(
    e: *const SafempcEllipsoid,
    out: *mut f64,
    len: usize,
) -> SafempcStatus {
    guard(|| {
        null_check(e, "ellipsoid")?;
        let e = &(*e).0;
        dim_check(e.dim(), len, "center buffer")?;
        write_slice(out, e.center().as_slice(), "out")
    })
}

/// Copies the row-major shape matrix into `out` (`len` must equal `n*n`).
///
/// # Safety
/// `e` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_shape(
    e: *const SafempcEllipsoid,
    out: *mut f64,
    len: usize,
) -> SafempcStatus {
    guard(|| {
        null_check(e, "ellipsoid")?;
        let e = &(*e).0;
        dim_check(e.dim() * e.dim(), len, "shape buffer")?;
        write_slice(out, &to_row_major(e.shape()), "out")
    })
}

/// Whether `x` lies in the ellipsoid up to `tol` on the quadratic form.
///
/// # Safety
/// `e` must be a live handle, `x` must hold `n` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_contains(
    e: *const SafempcEllipsoid,
    x: *const f64,
    n: usize,
    tol: f64,
    out: *mut bool,
) -> SafempcStatus {
    guard(|| {
        null_check(e, "ellipsoid")?;
        null_check(out, "out")?;
        let e = &(*e).0;
        dim_check(e.dim(), n, "point")?;
        let x = DVector::from_column_slice(read_slice(x, n, "x")?);
        *out = e.contains(&x, tol);
        Ok(())
    })
}

/// Image `A E + b` for a row-major `rows × n` matrix `A` and offset `b`.
///
/// # Safety
/// `e` must be a live handle, `a` and `b` must hold `rows*n` and `rows`
/// values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_affine(
    e: *const SafempcEllipsoid,
    a: *const f64,
    rows: usize,
    b: *const f64,
    out: *mut *mut SafempcEllipsoid,
) -> SafempcStatus {
    guard(|| {
        null_check(e, "ellipsoid")?;
        null_check(out, "out")?;
        let e = &(*e).0;
        let n = e.dim();
        let a = row_major(read_slice(a, rows * n, "a")?, rows, n);
        let b = DVector::from_column_slice(read_slice(b, rows, "b")?);
        let r = e.affine_transform(&a, &b)?;
        *out = Box::into_raw(Box::new(SafempcEllipsoid(r)));
        Ok(())
    })
}

/// Outer approximation of the Minkowski sum with the trace-optimal
/// parameter.
///
/// # Safety
/// `a` and `b` must be live handles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_minkowski_sum(
    a: *const SafempcEllipsoid,
    b: *const SafempcEllipsoid,
    out: *mut *mut SafempcEllipsoid,
) -> SafempcStatus {
    guard(|| {
        null_check(a, "a")?;
        null_check(b, "b")?;
        null_check(out, "out")?;
        let r = (*a).0.minkowski_sum_outer(&(*b).0, None)?;
        *out = Box::into_raw(Box::new(SafempcEllipsoid(r)));
        Ok(())
    })
}

/// `max ‖S (x − c)‖₂` over the ellipsoid for a row-major `rows × n` matrix
/// `S`.
///
/// # Safety
/// `e` must be a live handle, `s` must hold `rows*n` values and `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_ellipsoid_max_scaled_distance(
    e: *const SafempcEllipsoid,
    s: *const f64,
    rows: usize,
    out: *mut f64,
) -> SafempcStatus {
    guard(|| {
        null_check(e, "ellipsoid")?;
        null_check(out, "out")?;
        let e = &(*e).0;
        let n = e.dim();
        let s = row_major(read_slice(s, rows * n, "s")?, rows, n);
        *out = e.max_scaled_distance(&s, None)?;
        Ok(())
    })
}

/// Fits a GP to `n` row-major inputs (`n × input_dim`) and targets
/// (`n × output_dim`). Every output uses the kernel
/// `Σᵢ wᵢ zᵢ z'ᵢ + σ² Matérn₅/₂(z, z'; ℓ)`; a null `linear_weights` drops
/// the linear part and a zero `signal_variance` drops the Matérn part, in
/// which case `lengthscales` may be null.
///
/// # Safety
/// Array arguments must hold the stated number of values (`inputs` and
/// `targets` may be null when `n == 0`); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_gp_fit(
    inputs: *const f64,
    targets: *const f64,
    n: usize,
    input_dim: usize,
    output_dim: usize,
    noise_std: f64,
    beta: f64,
    lengthscales: *const f64,
    signal_variance: f64,
    linear_weights: *const f64,
    out: *mut *mut SafempcGp,
) -> SafempcStatus {
    guard(|| {
        null_check(out, "out")?;
        let xs = read_slice(inputs, n * input_dim, "inputs")?;
        let ys = read_slice(targets, n * output_dim, "targets")?;
        let kernel = match (linear_weights.is_null(), signal_variance == 0.0) {
            (true, true) => {
                return Err(Failure(SafempcStatus::InvalidInput, "kernel has no linear or Matérn part".into()));
            }
            (true, false) => KernelSpec::matern52(
                read_slice(lengthscales, input_dim, "lengthscales")?.to_vec(),
                signal_variance,
            ),
            (false, true) => KernelSpec::linear(read_slice(linear_weights, input_dim, "linear_weights")?.to_vec()),
            (false, false) => KernelSpec::sum(
                read_slice(lengthscales, input_dim, "lengthscales")?.to_vec(),
                signal_variance,
                read_slice(linear_weights, input_dim, "linear_weights")?.to_vec(),
            ),
        };
        let mut data = Dataset::new(input_dim, output_dim, noise_std)?;
        for i in 0..n {
            data.push(
                DVector::from_column_slice(&xs[i * input_dim..(i + 1) * input_dim]),
                DVector::from_column_slice(&ys[i * output_dim..(i + 1) * output_dim]),
            )?;
        }
        let gp = GpPosterior::fit(&data, &vec![kernel; output_dim], beta)?;
        *out = Box::into_raw(Box::new(SafempcGp(gp)));
        Ok(())
    })
}

/// # Safety
/// `gp` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn safempc_gp_free(gp: *mut SafempcGp) {
    if !gp.is_null() {
        drop(Box::from_raw(gp));
    }
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `gp` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn safempc_gp_input_dim(gp: *const SafempcGp) -> usize {
    gp.as_ref().map_or(0, |g| g.0.input_dim())
}

/// Output dimension, or 0 for a null handle.
///
/// # Safety
/// `gp` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn safempc_gp_output_dim(gp: *const SafempcGp) -> usize {
    gp.as_ref().map_or(0, |g| g.0.output_dim())
}

/// Posterior mean and standard deviation at `z` (`d` values). `mean` and
/// `std` receive `p` values each; `std` may be null.
///
/// # Safety
/// `gp` must be a live handle and the buffers must hold the stated number of
/// values.
#[no_mangle]
pub unsafe extern "C" fn safempc_gp_predict(
    gp: *const SafempcGp,
    z: *const f64,
    d: usize,
    mean: *mut f64,
    std: *mut f64,
    p: usize,
) -> SafempcStatus {
    guard(|| {
        null_check(gp, "gp")?;
        let gp = &(*gp).0;
        dim_check(gp.input_dim(), d, "query point")?;
        dim_check(gp.output_dim(), p, "output buffers")?;
        let z = DVector::from_column_slice(read_slice(z, d, "z")?);
        let pred = gp.predict(&z)?;
        write_slice(mean, pred.mean.as_slice(), "mean")?;
        if !std.is_null() {
            write_slice(std, pred.std.as_slice(), "std")?;
        }
        Ok(())
    })
}

/// Mutual information between the training observations and the function.
///
/// # Safety
/// `gp` must be a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_gp_mutual_information(gp: *const SafempcGp, out: *mut f64) -> SafempcStatus {
    guard(|| {
        null_check(gp, "gp")?;
        null_check(out, "out")?;
        let gp = &(*gp).0;
        *out = mutual_information(gp.kernels(), gp.training_inputs(), gp.noise_std())?;
        Ok(())
    })
}

/// Builds a benchmark system, given as a [`SafempcSystem`] value, with its
/// default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_env_new(system: i32, out: *mut *mut SafempcEnv) -> SafempcStatus {
    guard(|| {
        null_check(out, "out")?;
        let cfg = match system {
            s if s == SafempcSystem::Pendulum as i32 => EnvConfig::pendulum(),
            s if s == SafempcSystem::CartPole as i32 => EnvConfig::cart_pole(),
            s => {
                return Err(Failure(SafempcStatus::InvalidInput, format!("unknown system {s}")));
            }
        };
        let spec = EnvSpec::from_config(&cfg)?;
        *out = Box::into_raw(Box::new(SafempcEnv(spec)));
        Ok(())
    })
}

/// # Safety
/// `env` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn safempc_env_free(env: *mut SafempcEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn safempc_env_state_dim(env: *const SafempcEnv) -> usize {
    env.as_ref().map_or(0, |e| e.0.state_dim())
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn safempc_env_input_dim(env: *const SafempcEnv) -> usize {
    env.as_ref().map_or(0, |e| e.0.input_dim())
}

/// One step of the true dynamics from `x` under `u`; `next` receives the
/// state.
///
/// # Safety
/// `env` must be a live handle; `x`, `u` and `next` must hold the state,
/// input and state dimension respectively.
#[no_mangle]
pub unsafe extern "C" fn safempc_env_step(
    env: *const SafempcEnv,
    x: *const f64,
    u: *const f64,
    next: *mut f64,
) -> SafempcStatus {
    guard(|| {
        null_check(env, "env")?;
        let spec = &(*env).0;
        let x = DVector::from_column_slice(read_slice(x, spec.state_dim(), "x")?);
        let u = DVector::from_column_slice(read_slice(u, spec.input_dim(), "u")?);
        write_slice(next, spec.step(&x, &u)?.as_slice(), "next")
    })
}

/// Input of the safety controller at `x`.
///
/// # Safety
/// `env` must be a live handle; `x` and `u` must hold the state and input
/// dimension respectively.
#[no_mangle]
pub unsafe extern "C" fn safempc_env_safety_input(
    env: *const SafempcEnv,
    x: *const f64,
    u: *mut f64,
) -> SafempcStatus {
    guard(|| {
        null_check(env, "env")?;
        let spec = &(*env).0;
        let x = DVector::from_column_slice(read_slice(x, spec.state_dim(), "x")?);
        write_slice(u, spec.safety.eval(&x).as_slice(), "u")
    })
}

/// Whether `x` lies in the safe set.
///
/// # Safety
/// `env` must be a live handle, `x` must hold the state dimension and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn safempc_env_in_safe_set(
    env: *const SafempcEnv,
    x: *const f64,
    out: *mut bool,
) -> SafempcStatus {
    guard(|| {
        null_check(env, "env")?;
        null_check(out, "out")?;
        let spec = &(*env).0;
        let x = DVector::from_column_slice(read_slice(x, spec.state_dim(), "x")?);
        *out = spec.constraints.safe().contains(&x, 1e-9);
        Ok(())
    })
}
