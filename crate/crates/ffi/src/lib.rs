//! C ABI for qdiff.
//!
//! Every fallible function returns a [`QdiffStatus`]; on failure the message
//! is available from [`qdiff_last_error_message`] on the same thread until the
//! next failing call. Models are opaque handles created by
//! [`qdiff_model_load`] and released with [`qdiff_model_free`]. A handle may
//! be used from one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use qdiff::diffusion::{sample, ModelSet, NoiseSchedule, PrecisionPolicy, SampleOptions, ScheduleConfig};
use qdiff::eval::{frechet_distance, FrechetStats};
use qdiff::kernels::{groupnorm_channel_parallel, GroupNormSpec, WorkerPool};
use qdiff::numerics::{bf16_round_f32, PrecisionFormat};
use qdiff::tensor::Tensor;
use qdiff::unet::{load_checkpoint, InferenceModel};
use qdiff::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Checkpoint = 5,
    Io = 6,
    Numerical = 7,
    MissingQuantParams = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QdiffFormat {
    Fp32 = 0,
    Bf16 = 1,
    Int8 = 2,
}

impl From<QdiffFormat> for PrecisionFormat {
    fn from(f: QdiffFormat) -> Self {
        match f {
            QdiffFormat::Fp32 => PrecisionFormat::Fp32,
            QdiffFormat::Bf16 => PrecisionFormat::Bf16,
            QdiffFormat::Int8 => PrecisionFormat::Int8,
        }
    }
}

impl From<PrecisionFormat> for QdiffFormat {
    fn from(f: PrecisionFormat) -> Self {
        match f {
            PrecisionFormat::Fp32 => QdiffFormat::Fp32,
            PrecisionFormat::Bf16 => QdiffFormat::Bf16,
            PrecisionFormat::Int8 => QdiffFormat::Int8,
        }
    }
}

/// Teacher (FP32/BF16 steps), optional INT8 student, and the noise schedule.
pub struct QdiffModel {
    models: ModelSet,
    schedule: NoiseSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn status_of(e: &Error) -> QdiffStatus {
    match e {
        Error::Shape { .. } => QdiffStatus::Shape,
        Error::InvalidArgument(_) => QdiffStatus::InvalidArgument,
        Error::Numerical(_) => QdiffStatus::Numerical,
        Error::MissingQuantParams { .. } => QdiffStatus::MissingQuantParams,
        Error::Config(_) | Error::Json(_) => QdiffStatus::Config,
        Error::Checkpoint { .. } => QdiffStatus::Checkpoint,
        Error::Io { .. } => QdiffStatus::Io,
        _ => QdiffStatus::Internal,
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `body`, converting errors and panics into a status plus message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> QdiffStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => QdiffStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("{what} must not be NULL"));
            QdiffStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal error: {msg}"));
            QdiffStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must be NULL or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(std::slice::from_raw_parts(non_null(p, what)?, len))
}

/// # Safety
/// `p` must be NULL or point to `len` writable values.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be NULL or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    let s = CStr::from_ptr(non_null(p, what)?);
    let s = s.to_str().map_err(|_| Error::InvalidArgument(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn pool(threads: usize) -> Result<WorkerPool, Error> {
    if threads == 0 {
        Ok(WorkerPool::with_available_parallelism())
    } else {
        WorkerPool::new(threads)
    }
}

/// Message of the last failure on this thread, or an empty string. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn qdiff_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a teacher checkpoint and, if `student_path` is not NULL, an INT8
/// student. `threads == 0` uses every logical core. The default noise
/// schedule is used for sampling.
///
/// # Safety
/// Path arguments must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qdiff_model_load(
    teacher_path: *const c_char,
    student_path: *const c_char,
    threads: usize,
    out: *mut *mut QdiffModel,
) -> QdiffStatus {
    guard(|| {
        non_null(out, "out")?;
        let teacher = path_arg(teacher_path, "teacher_path")?;
        let student = if student_path.is_null() { None } else { Some(path_arg(student_path, "student_path")?) };
        let pool = pool(threads)?;
        let full = InferenceModel::new(load_checkpoint(&teacher)?, pool.clone())?;
        let quantized = match student {
            Some(p) => Some(InferenceModel::new(load_checkpoint(&p)?, pool)?),
            None => None,
        };
        let schedule = NoiseSchedule::new(&ScheduleConfig::default())?;
        let handle = Box::new(QdiffModel { models: ModelSet { full, quantized }, schedule });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Releases a handle from [`qdiff_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a live handle, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn qdiff_model_free(model: *mut QdiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the `[C, H, W]` image shape the model generates.
///
/// # Safety
/// `model` must be a live handle; `out` must point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn qdiff_model_image_shape(model: *const QdiffModel, out: *mut usize) -> QdiffStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let dst = slice_mut(out, 3, "out")?;
        let c = m.models.full.model().config();
        dst.copy_from_slice(&[c.in_channels, c.image_size, c.image_size]);
        Ok(())
    })
}

/// Generates `count` images over `steps` denoising steps, running the first
/// and last `boundary` steps in `high` and the rest in `low`. Writes
/// `count * C * H * W` values to `out` (`out_len` must match).
///
/// # Safety
/// `model` must be a live handle; `out` must point to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn qdiff_sample(
    model: *const QdiffModel,
    steps: usize,
    boundary: usize,
    high: QdiffFormat,
    low: QdiffFormat,
    count: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> QdiffStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let c = m.models.full.model().config();
        let image = [c.in_channels, c.image_size, c.image_size];
        let want = count * image.iter().product::<usize>();
        if out_len != want {
            return Err(Error::InvalidArgument(format!(
                "out_len is {out_len}, but {count} images of {image:?} need {want}"
            ))
            .into());
        }
        let dst = slice_mut(out, out_len, "out")?;
        let policy = PrecisionPolicy::new(steps, boundary, high.into(), low.into())?;
        let result = sample(&m.models, &policy, &m.schedule, image, count, seed, &SampleOptions::default())?;
        dst.copy_from_slice(result.images.data());
        Ok(())
    })
}

/// Format used at loop step `i` (0 = noisiest) of an `n`-step run.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qdiff_precision_for_step(
    n: usize,
    k: usize,
    i: usize,
    high: QdiffFormat,
    low: QdiffFormat,
    out: *mut QdiffFormat,
) -> QdiffStatus {
    guard(|| {
        non_null(out, "out")?;
        let policy = PrecisionPolicy::new(n, k, high.into(), low.into())?;
        *out = policy.precision_for_step(i)?.into();
        Ok(())
    })
}

/// Channel-parallel GroupNorm of an `[n, c, h, w]` tensor. `gamma` and
/// `beta` may be NULL (identity affine); otherwise they hold `c` values.
///
/// # Safety
/// `x` and `out` must point to `n*c*h*w` floats; non-NULL `gamma`/`beta` to `c`.
#[no_mangle]
pub unsafe extern "C" fn qdiff_groupnorm(
    x: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
    eps: f32,
    gamma: *const f32,
    beta: *const f32,
    threads: usize,
    out: *mut f32,
) -> QdiffStatus {
    guard(|| {
        let len = n * c * h * w;
        let src = slice(x, len, "x")?;
        let dst = slice_mut(out, len, "out")?;
        let gamma = if gamma.is_null() { vec![1.0; c] } else { slice(gamma, c, "gamma")?.to_vec() };
        let beta = if beta.is_null() { vec![0.0; c] } else { slice(beta, c, "beta")?.to_vec() };
        let spec = GroupNormSpec::new(c, groups, eps, gamma, beta)?;
        let input = Tensor::new(vec![n, c, h, w], src.to_vec())?;
        let y = groupnorm_channel_parallel(&input, &spec, &pool(threads)?)?;
        dst.copy_from_slice(y.data());
        Ok(())
    })
}

/// Fréchet distance between two Gaussians given means (`dim`) and row-major
/// covariances (`dim * dim`).
///
/// # Safety
/// Means must point to `dim` doubles, covariances to `dim*dim`; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qdiff_frechet_distance(
    mean_a: *const f64,
    cov_a: *const f64,
    mean_b: *const f64,
    cov_b: *const f64,
    dim: usize,
    out: *mut f64,
) -> QdiffStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 {
            return Err(Error::InvalidArgument("dim must be >= 1".into()).into());
        }
        let stats = |m: *const f64, c: *const f64, wm, wc| -> Result<FrechetStats, Failure> {
            Ok(FrechetStats::new(slice(m, dim, wm)?.to_vec(), slice(c, dim * dim, wc)?.to_vec(), 0)?)
        };
        let a = stats(mean_a, cov_a, "mean_a", "cov_a")?;
        let b = stats(mean_b, cov_b, "mean_b", "cov_b")?;
        *out = frechet_distance(&a, &b)?;
        Ok(())
    })
}

/// Rounds `len` floats to the nearest bfloat16 (ties to even). `input` and
/// `out` may be the same buffer.
///
/// # Safety
/// Both pointers must cover `len` floats.
#[no_mangle]
pub unsafe extern "C" fn qdiff_bf16_round(input: *const f32, out: *mut f32, len: usize) -> QdiffStatus {
    guard(|| {
        if len == 0 {
            return Ok(());
        }
        non_null(input, "input")?;
        non_null(out, "out")?;
        for i in 0..len {
            *out.add(i) = bf16_round_f32(*input.add(i));
        }
        Ok(())
    })
}
