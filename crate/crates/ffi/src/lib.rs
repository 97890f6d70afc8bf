//! C ABI over the sparse-verify engine.
//!
//! Every fallible call returns an [`SvStatus`]. On failure the message is kept
//! in a thread-local slot readable through [`sv_last_error`]. Handles are
//! opaque and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use sparse_verify::cost::{estimate_latency, CostCoeffs, StepAccounting};
use sparse_verify::engine::{
    decode_autoregressive, decode_speculative, Engine, GuardMode, SpecOptions, TimeBase,
};
use sparse_verify::fusion::{parse_schedule, resolve_layer_roles, LayerRole};
use sparse_verify::grouped::merged_schedule;
use sparse_verify::model::ToyModelSpec;
use sparse_verify::nsa::SelectedIndexSet;
use sparse_verify::planner::{
    bucket_of, preselect, refine_step, GuardConfig, PrecisionClass, ProfileTable, RefinerState,
    StepMetrics, StrategyTuple,
};
use sparse_verify::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    ContextOverflow = 4,
    MissingProfileEntry = 5,
    LayerCoverage = 6,
    Io = 7,
    Parse = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvPrecisionClass {
    Strict = 0,
    ReuseOnly = 1,
    ApproxOnly = 2,
    ApproxReuse = 3,
}

impl From<SvPrecisionClass> for PrecisionClass {
    fn from(c: SvPrecisionClass) -> Self {
        match c {
            SvPrecisionClass::Strict => PrecisionClass::Strict,
            SvPrecisionClass::ReuseOnly => PrecisionClass::ReuseOnly,
            SvPrecisionClass::ApproxOnly => PrecisionClass::ApproxOnly,
            SvPrecisionClass::ApproxReuse => PrecisionClass::ApproxReuse,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvModelSize {
    Small = 0,
    Default = 1,
}

/// Cost model coefficients, in the order of the accounting fields.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SvCostCoeffs {
    pub c_block: f64,
    pub c_index: f64,
    pub c_launch: f64,
    pub c_window: f64,
    pub c_base: f64,
}

/// Aggregated per-step accounting.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SvStepAccounting {
    pub unique_loads: usize,
    pub requested_loads: usize,
    pub index_constructions: usize,
    pub launches: usize,
    pub window_tokens: usize,
}

/// Summary of a speculative decode.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SvDecodeStats {
    pub steps: usize,
    pub total_accepted: usize,
    pub total_latency: f64,
    pub mean_accepted: f64,
    pub refinement_events: usize,
}

/// Target model plus its truncated draft.
pub struct SvEngine {
    inner: Engine,
}

pub struct SvProfile {
    inner: ProfileTable,
}

pub struct SvRefiner {
    state: RefinerState,
    bucket: usize,
    class: PrecisionClass,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SvStatus {
    match e {
        Error::Config(_) => SvStatus::Config,
        Error::ContextOverflow { .. } => SvStatus::ContextOverflow,
        Error::MissingProfileEntry { .. } => SvStatus::MissingProfileEntry,
        Error::LayerCoverage { .. } => SvStatus::LayerCoverage,
        Error::Io(_) => SvStatus::Io,
        Error::Json(_) | Error::Csv(_) => SvStatus::Parse,
    }
}

fn fail(status: SvStatus, msg: impl Into<String>) -> SvStatus {
    set_error(msg.into());
    status
}

/// Run `f`, converting errors and panics into status codes.
fn guarded(f: impl FnOnce() -> Result<(), SvStatus>) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SvStatus::Panic, "panic inside the engine"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, SvStatus>;
}

impl<T> OrStatus<T> for sparse_verify::Result<T> {
    fn or_status(self) -> Result<T, SvStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), SvStatus> {
    if p.is_null() {
        Err(fail(SvStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, SvStatus> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SvStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], SvStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize, len: *mut usize) -> Result<(), SvStatus> {
    non_null(len, "out_len")?;
    *len = src.len();
    if src.len() > cap {
        return Err(fail(
            SvStatus::BufferTooSmall,
            format!("need {} slots, got {cap}", src.len()),
        ));
    }
    if !src.is_empty() {
        non_null(dst, "output buffer")?;
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), SvStatus> {
    let bytes = s.as_bytes();
    non_null(needed, "out_needed")?;
    *needed = bytes.len() + 1;
    if bytes.len() + 1 > cap {
        return Err(fail(SvStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1)));
    }
    non_null(buf, "output buffer")?;
    ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Build a seeded target model and a draft made of its first `draft_depth` layers.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sv_engine_new(
    size: SvModelSize,
    seed: u64,
    draft_depth: usize,
    out: *mut *mut SvEngine,
) -> SvStatus {
    guarded(|| {
        non_null(out, "out")?;
        let spec = match size {
            SvModelSize::Small => ToyModelSpec::small(seed),
            SvModelSize::Default => ToyModelSpec::target(seed),
        };
        let inner = Engine::truncated(spec, draft_depth).or_status()?;
        *out = Box::into_raw(Box::new(SvEngine { inner }));
        Ok(())
    })
}

/// # Safety
/// `engine` must come from [`sv_engine_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_engine_free(engine: *mut SvEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// # Safety
/// `engine` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sv_engine_layers(engine: *const SvEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.target.n_layers())
}

/// Greedy autoregressive decode of `steps` tokens.
///
/// # Safety
/// `prompt` holds `prompt_len` tokens; `out_tokens` has room for `out_cap`.
#[no_mangle]
pub unsafe extern "C" fn sv_decode_autoregressive(
    engine: *const SvEngine,
    prompt: *const u32,
    prompt_len: usize,
    steps: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> SvStatus {
    guarded(|| {
        non_null(engine, "engine")?;
        let prompt = input(prompt, prompt_len, "prompt")?;
        let toks = decode_autoregressive(&(*engine).inner.target, prompt, steps).or_status()?;
        copy_out(&toks, out_tokens, out_cap, out_len)
    })
}

/// Speculative decode of `steps` tokens.
///
/// The strategy comes from `strategy` (`D,k,T,C,M`, with `schedule` as a
/// comma list, `none` or `alt`) or, when `strategy` is null, from `profile`.
/// `refine` enables runtime refinement and needs a profile. Latency uses the
/// default cost model. `stats` may be null.
///
/// # Safety
/// Pointers must be valid for the given lengths; string arguments are
/// NUL-terminated or null.
#[no_mangle]
pub unsafe extern "C" fn sv_decode_speculative(
    engine: *const SvEngine,
    prompt: *const u32,
    prompt_len: usize,
    steps: usize,
    class: SvPrecisionClass,
    strategy: *const c_char,
    schedule: *const c_char,
    profile: *const SvProfile,
    refine: bool,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
    stats: *mut SvDecodeStats,
) -> SvStatus {
    guarded(|| {
        non_null(engine, "engine")?;
        let engine = &(*engine).inner;
        let prompt = input(prompt, prompt_len, "prompt")?;
        let class = PrecisionClass::from(class);
        let table = profile.as_ref().map(|p| &p.inner);
        let strategy = if strategy.is_null() {
            None
        } else {
            let sched = if schedule.is_null() { "none" } else { c_str(schedule, "schedule")? };
            let sched = parse_schedule(sched, engine.target.n_layers()).or_status()?;
            Some(StrategyTuple::parse(c_str(strategy, "strategy")?, sched).or_status()?)
        };
        if strategy.is_none() && table.is_none() {
            return Err(fail(SvStatus::InvalidArgument, "need a strategy or a profile"));
        }
        let opts = SpecOptions {
            steps,
            class,
            strategy,
            profile: table,
            guard: if refine { GuardMode::Active } else { GuardMode::Off },
            guard_cfg: GuardConfig::default(),
            tree_budget: None,
            time_base: TimeBase::Modeled(CostCoeffs::default()),
            compare_strict: false,
        };
        let out = decode_speculative(engine, prompt, &opts).or_status()?;
        copy_out(&out.tokens, out_tokens, out_cap, out_len)?;
        if let Some(s) = stats.as_mut() {
            *s = SvDecodeStats {
                steps: out.steps.len(),
                total_accepted: out.total_accepted(),
                total_latency: out.total_latency(),
                mean_accepted: out.mean_accepted(),
                refinement_events: out.events.iter().filter(|e| e.kind == "switch").count(),
            };
        }
        Ok(())
    })
}

/// Load a profile table from its JSON text.
///
/// # Safety
/// `json` is NUL-terminated; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn sv_profile_from_json(json: *const c_char, out: *mut *mut SvProfile) -> SvStatus {
    guarded(|| {
        non_null(out, "out")?;
        let inner = ProfileTable::from_json(c_str(json, "json")?).or_status()?;
        *out = Box::into_raw(Box::new(SvProfile { inner }));
        Ok(())
    })
}

/// # Safety
/// `profile` must come from [`sv_profile_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_profile_free(profile: *mut SvProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Rank-1 strategy for a context length and class, written as its label.
///
/// # Safety
/// `buf` has room for `cap` bytes; `out_needed` and `out_expected_a` are valid
/// (the latter may be null).
#[no_mangle]
pub unsafe extern "C" fn sv_preselect(
    profile: *const SvProfile,
    context_len: usize,
    class: SvPrecisionClass,
    buf: *mut c_char,
    cap: usize,
    out_needed: *mut usize,
    out_expected_a: *mut f64,
) -> SvStatus {
    guarded(|| {
        non_null(profile, "profile")?;
        let (s, a) = preselect(&(*profile).inner, bucket_of(context_len), class.into()).or_status()?;
        if let Some(o) = out_expected_a.as_mut() {
            *o = a;
        }
        write_str(&s.label(), buf, cap, out_needed)
    })
}

/// Start a refinement guard at the rank-1 strategy with default parameters.
///
/// # Safety
/// `profile` is live; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn sv_refiner_new(
    profile: *const SvProfile,
    context_len: usize,
    class: SvPrecisionClass,
    out: *mut *mut SvRefiner,
) -> SvStatus {
    guarded(|| {
        non_null(profile, "profile")?;
        non_null(out, "out")?;
        let bucket = bucket_of(context_len);
        let class = PrecisionClass::from(class);
        let (s, a) = preselect(&(*profile).inner, bucket, class).or_status()?;
        let state = RefinerState::new(GuardConfig::default(), s, a);
        *out = Box::into_raw(Box::new(SvRefiner { state, bucket, class }));
        Ok(())
    })
}

/// # Safety
/// `refiner` must come from [`sv_refiner_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_refiner_free(refiner: *mut SvRefiner) {
    if !refiner.is_null() {
        drop(Box::from_raw(refiner));
    }
}

/// Feed one step (1-based `step`). `out_changed` is set when the active
/// strategy changed.
///
/// # Safety
/// Handles are live; `out_changed` is valid or null.
#[no_mangle]
pub unsafe extern "C" fn sv_refiner_step(
    refiner: *mut SvRefiner,
    profile: *const SvProfile,
    accepted: usize,
    latency: f64,
    step: usize,
    out_changed: *mut bool,
) -> SvStatus {
    guarded(|| {
        non_null(refiner, "refiner")?;
        non_null(profile, "profile")?;
        let r = &mut *refiner;
        let m = StepMetrics { accepted, latency };
        let changed = refine_step(&mut r.state, &m, &(*profile).inner, r.bucket, r.class, step).or_status()?;
        if let Some(o) = out_changed.as_mut() {
            *o = changed.is_some();
        }
        Ok(())
    })
}

/// Number of strategy switches so far.
///
/// # Safety
/// `refiner` is a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sv_refiner_events(refiner: *const SvRefiner) -> usize {
    refiner.as_ref().map_or(0, |r| r.state.refinement_events())
}

/// Label of the active strategy.
///
/// # Safety
/// `buf` has room for `cap` bytes; `out_needed` is valid.
#[no_mangle]
pub unsafe extern "C" fn sv_refiner_active(
    refiner: *const SvRefiner,
    buf: *mut c_char,
    cap: usize,
    out_needed: *mut usize,
) -> SvStatus {
    guarded(|| {
        non_null(refiner, "refiner")?;
        write_str(&(*refiner).state.active.label(), buf, cap, out_needed)
    })
}

/// Resolve a reuse set into per-layer roles. `out_sources[l]` is -1 for a
/// refresh layer, else the refresh layer whose indices layer `l` inherits.
///
/// # Safety
/// `reuse` holds `reuse_len` ids; `out_sources` holds `n_layers` slots.
#[no_mangle]
pub unsafe extern "C" fn sv_resolve_layer_roles(
    n_layers: usize,
    reuse: *const usize,
    reuse_len: usize,
    out_sources: *mut i64,
) -> SvStatus {
    guarded(|| {
        let reuse = input(reuse, reuse_len, "reuse")?;
        let plan = resolve_layer_roles(reuse, n_layers).or_status()?;
        non_null(out_sources, "out_sources")?;
        let out = slice::from_raw_parts_mut(out_sources, n_layers);
        for (o, r) in out.iter_mut().zip(&plan.roles) {
            *o = match r {
                LayerRole::Refresh => -1,
                LayerRole::Reuse { source } => *source as i64,
            };
        }
        Ok(())
    })
}

/// Merge the block sets of a query group. `blocks` concatenates the sets,
/// `set_lens[i]` is the length of set `i`. Writes the unique block ids and
/// the requested load count.
///
/// # Safety
/// Pointers are valid for their lengths.
#[no_mangle]
pub unsafe extern "C" fn sv_merged_schedule(
    blocks: *const u32,
    set_lens: *const usize,
    n_sets: usize,
    out_unique: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
    out_requested: *mut usize,
) -> SvStatus {
    guarded(|| {
        let lens = input(set_lens, n_sets, "set_lens")?;
        let total: usize = lens.iter().sum();
        let blocks = input(blocks, total, "blocks")?;
        let mut sets = Vec::with_capacity(n_sets);
        let mut at = 0;
        for (i, &n) in lens.iter().enumerate() {
            let mut idx = blocks[at..at + n].to_vec();
            idx.sort_unstable();
            idx.dedup();
            sets.push(SelectedIndexSet::new(i, 0, idx, Vec::new()));
            at += n;
        }
        let refs: Vec<&SelectedIndexSet> = sets.iter().collect();
        let m = merged_schedule(&refs);
        if let Some(r) = out_requested.as_mut() {
            *r = m.requested();
        }
        copy_out(&m.unique_blocks, out_unique, out_cap, out_len)
    })
}

/// Modeled latency of one verification step. Null `coeffs` uses the defaults.
///
/// # Safety
/// `acc` and `out` are valid; `coeffs` is valid or null.
#[no_mangle]
pub unsafe extern "C" fn sv_estimate_latency(
    acc: *const SvStepAccounting,
    coeffs: *const SvCostCoeffs,
    out: *mut f64,
) -> SvStatus {
    guarded(|| {
        non_null(acc, "acc")?;
        non_null(out, "out")?;
        let a = &*acc;
        let acc = StepAccounting {
            unique_loads: a.unique_loads,
            requested_loads: a.requested_loads,
            index_constructions: a.index_constructions,
            launches: a.launches,
            window_tokens: a.window_tokens,
        };
        let c = match coeffs.as_ref() {
            None => CostCoeffs::default(),
            Some(c) => CostCoeffs {
                c_block: c.c_block,
                c_index: c.c_index,
                c_launch: c.c_launch,
                c_window: c.c_window,
                c_base: c.c_base,
            },
        };
        c.validate().or_status()?;
        *out = estimate_latency(&acc, &c);
        Ok(())
    })
}
