//! C interface to `negmine`.
//!
//! Every fallible function returns an [`NmStatus`] code; on failure the
//! message is kept per thread and read with [`nm_last_error_message`].
//! Worlds are opaque [`NmWorld`] handles released with [`nm_world_free`].
//! Panics never cross the boundary; they surface as `NM_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use negmine::batcher::quantile_select;
use negmine::config::RunConfig;
use negmine::evalbench::fn_probability;
use negmine::synthworld::{generate_universe, relation_stats, SemanticUniverse, WorldConfig};
use negmine::trainloop::{run_training, RunOptions};
use negmine::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmStatus {
    NmOk = 0,
    /// A required pointer was null or a string was not UTF-8.
    NmErrArgument = 1,
    NmErrConfig = 2,
    NmErrIo = 3,
    NmErrFormat = 4,
    NmErrDomain = 5,
    NmErrDegenerate = 6,
    NmErrState = 7,
    NmErrNumerical = 8,
    /// Any other library error.
    NmErrOther = 9,
    NmErrPanic = 10,
}

/// Generation parameters for [`nm_world_generate`]. Fill with
/// [`nm_world_config_default`] before changing fields.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct NmWorldConfig {
    pub n_concepts: usize,
    pub n_images: usize,
    pub n_texts: usize,
    pub n_eval_images: usize,
    pub d_latent: usize,
    pub d_img: usize,
    pub k_text: usize,
    pub vocab: usize,
    pub noise: f64,
    pub max_concepts_per_image: usize,
}

impl From<&WorldConfig> for NmWorldConfig {
    fn from(c: &WorldConfig) -> Self {
        NmWorldConfig {
            n_concepts: c.n_concepts,
            n_images: c.n_images,
            n_texts: c.n_texts,
            n_eval_images: c.n_eval_images,
            d_latent: c.d_latent,
            d_img: c.d_img,
            k_text: c.k_text,
            vocab: c.vocab,
            noise: c.noise,
            max_concepts_per_image: c.max_concepts_per_image,
        }
    }
}

impl From<&NmWorldConfig> for WorldConfig {
    fn from(c: &NmWorldConfig) -> Self {
        WorldConfig {
            n_concepts: c.n_concepts,
            n_images: c.n_images,
            n_texts: c.n_texts,
            n_eval_images: c.n_eval_images,
            d_latent: c.d_latent,
            d_img: c.d_img,
            k_text: c.k_text,
            vocab: c.vocab,
            noise: c.noise,
            max_concepts_per_image: c.max_concepts_per_image,
        }
    }
}

/// Compatibility-relation counts of a world.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct NmRelationStats {
    pub n_images: usize,
    pub n_texts: usize,
    /// Compatible (image, text) pairs.
    pub relation: usize,
    /// Labeled positive pairs.
    pub positives: usize,
    pub rho: f64,
    pub kappa: f64,
    /// Probability that a uniformly drawn non-positive pair is compatible.
    pub fn_probability: f64,
}

/// Opaque world handle.
pub struct NmWorld {
    inner: SemanticUniverse,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> NmStatus {
    match e {
        Error::Config(_) => NmStatus::NmErrConfig,
        Error::Io { .. } => NmStatus::NmErrIo,
        Error::Format { .. } => NmStatus::NmErrFormat,
        Error::Domain(_) | Error::Lookup { .. } => NmStatus::NmErrDomain,
        Error::DegenerateUniverse(_) | Error::DegenerateSpace(_) => NmStatus::NmErrDegenerate,
        Error::StateCorruption(_) => NmStatus::NmErrState,
        Error::Numerical { .. } => NmStatus::NmErrNumerical,
        _ => NmStatus::NmErrOther,
    }
}

struct ArgError(&'static str);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<ArgError> for Failure {
    fn from(e: ArgError) -> Self {
        Failure::Arg(e.0)
    }
}

enum Failure {
    Arg(&'static str),
    Lib(Error),
}

/// Runs `f`, converting errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NmStatus::NmOk
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            NmStatus::NmErrArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            NmStatus::NmErrPanic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, ArgError> {
    if p.is_null() {
        return Err(ArgError(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| ArgError("string argument is not UTF-8"))
}

unsafe fn world_arg<'a>(w: *const NmWorld) -> Result<&'a SemanticUniverse, ArgError> {
    w.as_ref().map(|w| &w.inner).ok_or(ArgError("world handle is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn nm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the default world configuration to `out`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `NmWorldConfig`.
#[no_mangle]
pub unsafe extern "C" fn nm_world_config_default(out: *mut NmWorldConfig) -> NmStatus {
    guard(|| {
        let out = out.as_mut().ok_or(ArgError("out is null"))?;
        *out = NmWorldConfig::from(&WorldConfig::default());
        Ok(())
    })
}

/// Generates a world. `cfg` may be null for the defaults. On success `*out`
/// owns a handle to release with [`nm_world_free`].
///
/// # Safety
/// `cfg` must be null or valid; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nm_world_generate(cfg: *const NmWorldConfig, seed: u64, out: *mut *mut NmWorld) -> NmStatus {
    guard(|| {
        let out = out.as_mut().ok_or(ArgError("out is null"))?;
        let wc = cfg.as_ref().map(WorldConfig::from).unwrap_or_default();
        let inner = generate_universe(&wc, seed)?;
        *out = Box::into_raw(Box::new(NmWorld { inner }));
        Ok(())
    })
}

/// Loads a world saved as JSON lines.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nm_world_read(path: *const c_char, out: *mut *mut NmWorld) -> NmStatus {
    guard(|| {
        let out = out.as_mut().ok_or(ArgError("out is null"))?;
        let path = str_arg(path, "path is null")?;
        let inner = SemanticUniverse::read_jsonl(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(NmWorld { inner }));
        Ok(())
    })
}

/// Saves a world as JSON lines.
///
/// # Safety
/// `world` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nm_world_write(world: *const NmWorld, path: *const c_char) -> NmStatus {
    guard(|| {
        let w = world_arg(world)?;
        let path = str_arg(path, "path is null")?;
        w.write_jsonl(&PathBuf::from(path))?;
        Ok(())
    })
}

/// Releases a world handle. Null is ignored.
///
/// # Safety
/// `world` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nm_world_free(world: *mut NmWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Relation statistics over every image and text of the world.
///
/// # Safety
/// `world` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nm_world_relation_stats(world: *const NmWorld, out: *mut NmRelationStats) -> NmStatus {
    guard(|| {
        let w = world_arg(world)?;
        let out = out.as_mut().ok_or(ArgError("out is null"))?;
        let s = relation_stats(w)?;
        *out = NmRelationStats {
            n_images: s.n_images,
            n_texts: s.n_texts,
            relation: s.relation,
            positives: s.positives,
            rho: s.rho,
            kappa: s.kappa,
            fn_probability: fn_probability(s.rho, s.kappa)?,
        };
        Ok(())
    })
}

/// Copies the world's hex SHA-256 (64 characters plus NUL) into `buf`.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nm_world_hash(world: *const NmWorld, buf: *mut c_char, len: usize) -> NmStatus {
    guard(|| {
        let w = world_arg(world)?;
        if buf.is_null() {
            return Err(ArgError("buf is null").into());
        }
        let h = w.content_hash()?;
        if len < h.len() + 1 {
            return Err(ArgError("buffer shorter than 65 bytes").into());
        }
        std::ptr::copy_nonoverlapping(h.as_ptr().cast(), buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// Probability that a uniform non-positive pair is a false negative, given
/// relation density `rho` and positive fraction `kappa`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nm_fn_probability(rho: f64, kappa: f64, out: *mut f64) -> NmStatus {
    guard(|| {
        let out = out.as_mut().ok_or(ArgError("out is null"))?;
        *out = fn_probability(rho, kappa)?;
        Ok(())
    })
}

/// Among the candidates `unselected[0..m]` (indices into `row[0..n]`),
/// returns in `*out` the one at nearest rank `q` by ascending value.
///
/// # Safety
/// `row` must hold `n` doubles, `unselected` `m` indices, `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn nm_quantile_select(
    row: *const f64,
    n: usize,
    unselected: *const usize,
    m: usize,
    q: f64,
    out: *mut usize,
) -> NmStatus {
    guard(|| {
        let out = out.as_mut().ok_or(ArgError("out is null"))?;
        if (row.is_null() && n > 0) || (unselected.is_null() && m > 0) {
            return Err(ArgError("array pointer is null").into());
        }
        let row = if n == 0 { &[][..] } else { std::slice::from_raw_parts(row, n) };
        let cand = if m == 0 { &[][..] } else { std::slice::from_raw_parts(unselected, m) };
        if let Some(&bad) = cand.iter().find(|&&j| j >= n) {
            return Err(Error::Lookup { index: bad, len: n }.into());
        }
        *out = quantile_select(row, cand, q)?;
        Ok(())
    })
}

/// Trains on `world` and writes the run directory `out_dir`. `config_toml`
/// is a TOML document in the CLI's format, or null for the defaults.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings (or null where allowed).
#[no_mangle]
pub unsafe extern "C" fn nm_train(world: *const NmWorld, config_toml: *const c_char, out_dir: *const c_char) -> NmStatus {
    guard(|| {
        let w = world_arg(world)?;
        let out_dir = str_arg(out_dir, "out_dir is null")?;
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml_str(str_arg(config_toml, "config is null")?)?
        };
        run_training(&cfg, w, &PathBuf::from(out_dir), &RunOptions::default())?;
        Ok(())
    })
}
