//! C ABI over latent-design.
//!
//! Every fallible function returns an [`LdStatus`] and writes results through
//! out-pointers. On failure, [`ld_last_error`] describes the most recent error
//! on the calling thread. Handles are opaque and must be released with their
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use latent_design::latentopt::{self, EnergyCoeffs, EnergyModel, EnergyReport, OptConfig};
use latent_design::pipeline::{DataManifest, ModelBundle};
use latent_design::predictors::LatentChemical;
use latent_design::sitegraph::{Atom, ProteinSiteGraph, SiteSignature};
use latent_design::synthbench::{SynthWorld, WorldConfig};
use latent_design::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Parse = 5,
    Checkpoint = 6,
    Dimension = 7,
    Numeric = 8,
    Data = 9,
    Panic = 10,
}

/// A synthetic world with its planted archetypes and oracle.
pub struct LdWorld(SynthWorld);

/// The trained GCN and prediction heads loaded from a checkpoint directory.
pub struct LdModels(ModelBundle);

/// Energy weights; see [`ld_coeffs_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdCoeffs {
    /// Weights of `p_B` and `g_h(dsx)`.
    pub alpha: [f64; 2],
    /// Weights of `g_q(logP)`, QED, SAS and toxicity.
    pub gamma: [f64; 4],
    pub dsx_floor: f64,
    pub logp_window: [f64; 2],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdOptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LdEnergyReport {
    pub total: f64,
    pub p_b: f64,
    pub dsx_hat: f64,
    pub log_p: f64,
    pub qed: f64,
    pub sas: f64,
    pub tox: f64,
}

impl From<&EnergyReport> for LdEnergyReport {
    fn from(r: &EnergyReport) -> Self {
        LdEnergyReport {
            total: r.total,
            p_b: r.p_b,
            dsx_hat: r.dsx_hat,
            log_p: r.log_p,
            qed: r.qed,
            sas: r.sas,
            tox: r.tox,
        }
    }
}

impl From<LdCoeffs> for EnergyCoeffs {
    fn from(c: LdCoeffs) -> Self {
        EnergyCoeffs {
            alpha: c.alpha,
            gamma: c.gamma,
            dsx_floor: c.dsx_floor,
            logp_window: c.logp_window,
        }
    }
}

struct Failure(LdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Usage(_) | Error::Config(_) | Error::Index { .. } | Error::BatchSize { .. } => {
                LdStatus::InvalidArgument
            }
            Error::Io { .. } | Error::MissingFile(_) => LdStatus::Io,
            Error::Parse { .. } => LdStatus::Parse,
            Error::Checkpoint { .. } => LdStatus::Checkpoint,
            Error::Dimension { .. } => LdStatus::Dimension,
            Error::Numeric { .. } | Error::Divergence { .. } | Error::NonFiniteEnergy { .. } => {
                LdStatus::Numeric
            }
            Error::Data(_) => LdStatus::Data,
        };
        Failure(status, format!("{}: {e}", e.kind()))
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LdStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            LdStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(LdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a>(
    ptr: *mut f64,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [f64], Failure> {
    if len < need {
        return Err(Failure(
            LdStatus::BufferTooSmall,
            format!("{what} holds {len} values, need {need}"),
        ));
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn reference<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

unsafe fn path<'a>(ptr: *const c_char) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(Path::new)
        .map_err(|e| Failure(LdStatus::InvalidArgument, format!("path is not UTF-8: {e}")))
}

unsafe fn coeffs(ptr: *const LdCoeffs) -> Result<EnergyCoeffs, Failure> {
    let c = match ptr.as_ref() {
        Some(c) => EnergyCoeffs::from(*c),
        None => EnergyCoeffs::default(),
    };
    c.validate()?;
    Ok(c)
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ld_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn ld_status_name(status: LdStatus) -> *const c_char {
    let s: &'static CStr = match status {
        LdStatus::Ok => c"ok",
        LdStatus::NullPointer => c"null-pointer",
        LdStatus::InvalidArgument => c"invalid-argument",
        LdStatus::BufferTooSmall => c"buffer-too-small",
        LdStatus::Io => c"io",
        LdStatus::Parse => c"parse",
        LdStatus::Checkpoint => c"checkpoint",
        LdStatus::Dimension => c"dimension",
        LdStatus::Numeric => c"numeric",
        LdStatus::Data => c"data",
        LdStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// `max(−250, x)`.
#[no_mangle]
pub extern "C" fn ld_g_h(x: f64) -> f64 {
    latentopt::g_h(x)
}

/// The logP window, 1 at 2.5 and 0 at 0 and 5.
#[no_mangle]
pub extern "C" fn ld_g_q(x: f64) -> f64 {
    latentopt::g_q(x)
}

#[no_mangle]
pub extern "C" fn ld_coeffs_default() -> LdCoeffs {
    let c = EnergyCoeffs::default();
    LdCoeffs {
        alpha: c.alpha,
        gamma: c.gamma,
        dsx_floor: c.dsx_floor,
        logp_window: c.logp_window,
    }
}

#[no_mangle]
pub extern "C" fn ld_opt_config_default() -> LdOptConfig {
    let c = OptConfig::default();
    LdOptConfig {
        steps: c.steps,
        learning_rate: c.learning_rate,
        seed: c.seed,
    }
}

/// Builds a world from default settings and `seed`.
///
/// # Safety
/// `out` must be a valid pointer to write a handle to.
#[no_mangle]
pub unsafe extern "C" fn ld_world_new(seed: u64, out: *mut *mut LdWorld) -> LdStatus {
    guard(|| {
        let world = SynthWorld::new(WorldConfig {
            seed,
            ..WorldConfig::default()
        })?;
        write(out, Box::into_raw(Box::new(LdWorld(world))), "out")
    })
}

/// Rebuilds the world recorded in a `world.json` manifest.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ld_world_load(path_: *const c_char, out: *mut *mut LdWorld) -> LdStatus {
    guard(|| {
        let p = path(path_)?;
        let text = std::fs::read_to_string(p)
            .map_err(|e| Failure(LdStatus::Io, format!("{}: {e}", p.display())))?;
        let manifest: DataManifest = serde_json::from_str(&text)
            .map_err(|e| Failure(LdStatus::Parse, format!("{}: {e}", p.display())))?;
        let world = SynthWorld::new(manifest.world.config)?;
        write(out, Box::into_raw(Box::new(LdWorld(world))), "out")
    })
}

/// # Safety
/// `world` must be null or a handle from `ld_world_new`/`ld_world_load`
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn ld_world_free(world: *mut LdWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Latent width, or 0 for a null handle.
///
/// # Safety
/// `world` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ld_world_latent_dim(world: *const LdWorld) -> usize {
    world.as_ref().map_or(0, |w| w.0.config().latent_dim)
}

/// Number of archetypes, or 0 for a null handle.
///
/// # Safety
/// `world` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ld_world_archetype_count(world: *const LdWorld) -> usize {
    world.as_ref().map_or(0, |w| w.0.archetype_count())
}

/// Writes the planted binder of archetype `k` into `out[0..latent_dim]`.
///
/// # Safety
/// `world` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ld_world_center(
    world: *const LdWorld,
    k: usize,
    out: *mut f64,
    out_len: usize,
) -> LdStatus {
    guard(|| {
        let w = reference(world, "world")?;
        let center = w.0.center(k)?;
        out_slice(out, out_len, center.dim(), "out")?[..center.dim()]
            .copy_from_slice(center.values());
        Ok(())
    })
}

/// Noiseless oracle score of `c` against archetype `k`.
///
/// # Safety
/// `world` must be a live handle, `c` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ld_world_oracle_dsx(
    world: *const LdWorld,
    c: *const f64,
    len: usize,
    k: usize,
    out: *mut f64,
) -> LdStatus {
    guard(|| {
        let w = reference(world, "world")?;
        let c = LatentChemical(slice(c, len, "c")?.to_vec());
        write(out, w.0.oracle_dsx_noiseless(&c, k)?, "out")
    })
}

/// Loads the five checkpoints written by `latent-design train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ld_models_load(dir: *const c_char, out: *mut *mut LdModels) -> LdStatus {
    guard(|| {
        let bundle = ModelBundle::load(path(dir)?)?;
        write(out, Box::into_raw(Box::new(LdModels(bundle))), "out")
    })
}

/// # Safety
/// `models` must be null or a live handle from `ld_models_load`.
#[no_mangle]
pub unsafe extern "C" fn ld_models_free(models: *mut LdModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Latent width, or 0 for a null handle.
///
/// # Safety
/// `models` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ld_models_latent_dim(models: *const LdModels) -> usize {
    models.as_ref().map_or(0, |m| m.0.heads.latent_dim())
}

/// Site signature width, or 0 for a null handle.
///
/// # Safety
/// `models` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ld_models_signature_dim(models: *const LdModels) -> usize {
    models
        .as_ref()
        .map_or(0, |m| m.0.heads.affinity.signature_dim())
}

/// Site signature of a binding site with `n_atoms` atoms.
///
/// `elements` and `residues` hold one vocabulary index per atom and
/// `positions` holds `3 * n_atoms` coordinates in Å.
///
/// # Safety
/// `models` must be a live handle; the arrays must have the sizes above and
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ld_models_site_signature(
    models: *const LdModels,
    n_atoms: usize,
    elements: *const u32,
    residues: *const u32,
    positions: *const f64,
    out: *mut f64,
    out_len: usize,
) -> LdStatus {
    guard(|| {
        let m = reference(models, "models")?;
        let el = slice(elements, n_atoms, "elements")?;
        let re = slice(residues, n_atoms, "residues")?;
        let xyz = slice(positions, 3 * n_atoms, "positions")?;
        let atoms = (0..n_atoms)
            .map(|i| Atom {
                element: el[i] as usize,
                residue: re[i] as usize,
                position: [xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]],
            })
            .collect();
        let graph = ProteinSiteGraph::new("ffi", atoms)?;
        let sig = m.0.gcn.signature(&graph)?;
        out_slice(out, out_len, sig.len(), "out")?[..sig.len()].copy_from_slice(sig.values());
        Ok(())
    })
}

/// Predicted binding probability and DSX for a ligand and site signature.
///
/// # Safety
/// `models` must be a live handle; `c` and `p` must hold `c_len` and
/// `p_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ld_models_predict_affinity(
    models: *const LdModels,
    c: *const f64,
    c_len: usize,
    p: *const f64,
    p_len: usize,
    out_p_b: *mut f64,
    out_dsx: *mut f64,
) -> LdStatus {
    guard(|| {
        let m = reference(models, "models")?;
        let c = LatentChemical(slice(c, c_len, "c")?.to_vec());
        let p = SiteSignature(slice(p, p_len, "p")?.to_vec());
        let (p_b, dsx) = m.0.heads.affinity.predict(&c, &p)?;
        write(out_p_b, p_b, "out_p_b")?;
        write(out_dsx, dsx, "out_dsx")
    })
}

/// Design energy of `c` for site `p`. A null `coeffs` uses the defaults.
///
/// # Safety
/// `models` must be a live handle; `c` and `p` must hold `c_len` and
/// `p_len` doubles; `coeffs` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ld_models_energy(
    models: *const LdModels,
    c: *const f64,
    c_len: usize,
    p: *const f64,
    p_len: usize,
    coeffs_: *const LdCoeffs,
    out: *mut LdEnergyReport,
) -> LdStatus {
    guard(|| {
        let m = reference(models, "models")?;
        let c = LatentChemical(slice(c, c_len, "c")?.to_vec());
        let p = SiteSignature(slice(p, p_len, "p")?.to_vec());
        let report = latentopt::energy(&c, &p, &m.0.heads, &coeffs(coeffs_)?)?;
        write(out, LdEnergyReport::from(&report), "out")
    })
}

/// Optimizes a ligand for site `p` from the direct-mapper start and writes
/// the final point to `out_c`.
///
/// When the energy turns non-finite the call returns `LD_STATUS_NUMERIC`
/// and `out_c` holds the last point with a finite energy, if any.
///
/// # Safety
/// `models` must be a live handle; `p` must hold `p_len` doubles; `coeffs`
/// and `config` must be null or valid; `out_c` must hold `out_len` doubles
/// and `out_report` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ld_models_optimize(
    models: *const LdModels,
    p: *const f64,
    p_len: usize,
    coeffs_: *const LdCoeffs,
    config: *const LdOptConfig,
    out_c: *mut f64,
    out_len: usize,
    out_report: *mut LdEnergyReport,
) -> LdStatus {
    guard(|| {
        let m = reference(models, "models")?;
        let p = SiteSignature(slice(p, p_len, "p")?.to_vec());
        let coeffs = coeffs(coeffs_)?;
        let dim = m.0.heads.latent_dim();
        let out = out_slice(out_c, out_len, dim, "out_c")?;
        let c = config
            .as_ref()
            .copied()
            .unwrap_or_else(|| ld_opt_config_default());
        let cfg = OptConfig {
            steps: c.steps,
            learning_rate: c.learning_rate,
            seed: c.seed,
            stride: c.steps.max(1),
        };
        match latentopt::latent_opt(&p, &m.0.heads, &coeffs, &cfg) {
            Ok(o) => {
                out[..dim].copy_from_slice(o.final_point.values());
                if !out_report.is_null() {
                    out_report.write(LdEnergyReport::from(&o.final_report));
                }
                Ok(())
            }
            Err(e) => {
                if let Error::NonFiniteEnergy { last_finite, .. } = &e {
                    if last_finite.len() == dim {
                        out[..dim].copy_from_slice(last_finite);
                    }
                }
                Err(e.into())
            }
        }
    })
}
