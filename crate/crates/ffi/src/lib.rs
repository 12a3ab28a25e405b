//! C ABI over `mcb-core`.
//!
//! A session owns a learner, optional debiasing accumulators and its own RNG.
//! The caller drives it one round at a time: `mcb_session_decide` draws an
//! action for a request, `mcb_session_observe` feeds back the reward.
//! Every function returns an `McbStatus`; on failure the message is available
//! from `mcb_last_error_message` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mcb_core::io::Checkpoint;
use mcb_core::schedule::{epsilon_at, propensities, sample_action};
use mcb_core::{
    BanditConfig, Cell, DebiasState, Error, ErrorKind, FormMode, InferenceContext, LearnerState,
    LinearForm, LinearTerm, Mat, PropensityVector, StepRecord,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    /// The linear form has zero standard error; the estimate is still written.
    IllPosed = 6,
    /// `observe` without a pending `decide`, or `decide` twice.
    BadState = 7,
    Panic = 8,
}

/// Outcome of `mcb_session_decide`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct McbDecision {
    /// Step index this decision belongs to (1-based).
    pub t: usize,
    pub action: usize,
    /// Propensity of `action` under the policy.
    pub propensity: f64,
    pub greedy_arm: usize,
}

/// Flat view of an inference report.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct McbInference {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z_stat: f64,
    pub p_value: f64,
    pub p_value_greater: f64,
    pub p_value_less: f64,
}

struct Pending {
    t: usize,
    x: Cell,
    pv: PropensityVector,
    action: usize,
}

/// Opaque learner session.
pub struct McbSession {
    learner: LearnerState,
    debias: Option<DebiasState>,
    rng: ChaCha8Rng,
    pending: Option<Pending>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionSpec {
    config: BanditConfig,
    #[serde(default = "yes")]
    debias: bool,
}

fn yes() -> bool {
    true
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(McbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::IllPosed { .. } => McbStatus::IllPosed,
            _ => match e.kind() {
                ErrorKind::Config => McbStatus::Config,
                ErrorKind::Data => McbStatus::Data,
                ErrorKind::Numerical => McbStatus::Numerical,
            },
        };
        Fail(status, e.to_string())
    }
}

fn fail<T>(status: McbStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> McbStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            McbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(McbStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(McbStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn session_mut<'a>(s: *mut McbSession) -> Result<&'a mut McbSession, Fail> {
    s.as_mut()
        .map_or_else(|| fail(McbStatus::NullPointer, "session is null"), Ok)
}

unsafe fn session_ref<'a>(s: *const McbSession) -> Result<&'a McbSession, Fail> {
    s.as_ref()
        .map_or_else(|| fail(McbStatus::NullPointer, "session is null"), Ok)
}

fn check_out<T>(p: *mut T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        return fail(McbStatus::NullPointer, format!("{name} is null"));
    }
    Ok(())
}

fn session_rng(config: &BanditConfig, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(t as u64);
    rng
}

/// Last error message on this thread, or null. Valid until the next call
/// into this library from the same thread.
#[no_mangle]
pub extern "C" fn mcb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Creates a session.
///
/// `spec_json` is `{"config": {...}, "debias": true}` where `config` holds
/// d1, d2, rank, arms, horizon, phase1_len, gamma, epsilon, c2, eta, seed.
/// `init` holds `arms` row-major `d1 x d2` initial estimates back to back
/// (`init_len = arms * d1 * d2`).
///
/// # Safety
/// `spec_json` must be a NUL-terminated string, `init` must point to
/// `init_len` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_new(
    spec_json: *const c_char,
    init: *const f64,
    init_len: usize,
    out: *mut *mut McbSession,
) -> McbStatus {
    guard(|| {
        check_out(out, "out")?;
        let text = str_arg(spec_json, "spec_json")?;
        let spec: SessionSpec = serde_json::from_str(text)
            .or_else(|e| fail(McbStatus::Config, format!("session spec: {e}")))?;
        let c = &spec.config;
        c.validate()?;
        let cell_count = c.d1 * c.d2;
        if init.is_null() {
            return fail(McbStatus::NullPointer, "init is null");
        }
        if init_len != c.arms * cell_count {
            return fail(
                McbStatus::InvalidArgument,
                format!("init_len {init_len}, expected arms*d1*d2 = {}", c.arms * cell_count),
            );
        }
        let data = std::slice::from_raw_parts(init, init_len);
        let mats: Vec<Mat> = data
            .chunks(cell_count)
            .map(|chunk| Mat::from_row_slice(c.d1, c.d2, chunk))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return fail(McbStatus::Data, "init contains non-finite values");
        }
        let learner = LearnerState::init_from_matrices(&mats, spec.config.clone())?;
        let debias = spec.debias.then(|| DebiasState::for_config(&spec.config));
        let session = McbSession {
            rng: session_rng(&spec.config, 0),
            learner,
            debias,
            pending: None,
        };
        *out = Box::into_raw(Box::new(session));
        Ok(())
    })
}

/// Restores a session from a checkpoint file written by `mcb_session_save`
/// or the `mcb` tool. The RNG restarts from a stream keyed by the step count.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_load(path: *const c_char, out: *mut *mut McbSession) -> McbStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = str_arg(path, "path")?;
        let cp = Checkpoint::load(Path::new(path))?;
        let session = McbSession {
            rng: session_rng(&cp.learner.config, cp.learner.t),
            learner: cp.learner,
            debias: cp.debias,
            pending: None,
        };
        *out = Box::into_raw(Box::new(session));
        Ok(())
    })
}

/// Writes the learner and debiasing state as a JSON checkpoint.
///
/// # Safety
/// `session` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_save(session: *const McbSession, path: *const c_char) -> McbStatus {
    guard(|| {
        let s = session_ref(session)?;
        let path = str_arg(path, "path")?;
        Checkpoint::new(s.learner.clone(), s.debias.clone()).save(Path::new(path))?;
        Ok(())
    })
}

/// Frees a session. Null is ignored.
///
/// # Safety
/// `session` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_free(session: *mut McbSession) {
    if !session.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(session))));
    }
}

/// Number of completed steps.
///
/// # Safety
/// `session` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_step(session: *const McbSession, out: *mut usize) -> McbStatus {
    guard(|| {
        let s = session_ref(session)?;
        check_out(out, "out")?;
        *out = s.learner.t;
        Ok(())
    })
}

/// Draws an ε-greedy action for request `(row, col)` (0-based).
///
/// # Safety
/// `session` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_decide(
    session: *mut McbSession,
    row: usize,
    col: usize,
    out: *mut McbDecision,
) -> McbStatus {
    guard(|| {
        let s = session_mut(session)?;
        check_out(out, "out")?;
        if s.pending.is_some() {
            return fail(McbStatus::BadState, "a decision is already awaiting its reward");
        }
        let c = &s.learner.config;
        if row >= c.d1 || col >= c.d2 {
            return fail(
                McbStatus::InvalidArgument,
                format!("request ({row}, {col}) outside {}x{}", c.d1, c.d2),
            );
        }
        let t = s.learner.t + 1;
        let eps = epsilon_at(c, t)?;
        let x = Cell::new(row, col);
        let pv = propensities(&s.learner.arms, x, eps);
        let action = sample_action(&pv, &mut s.rng);
        *out = McbDecision {
            t,
            action,
            propensity: pv.probs[action],
            greedy_arm: pv.greedy_arm,
        };
        s.pending = Some(Pending { t, x, pv, action });
        Ok(())
    })
}

/// Feeds back the reward of the pending decision and updates the learner.
///
/// # Safety
/// `session` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_observe(session: *mut McbSession, reward: f64) -> McbStatus {
    guard(|| {
        let s = session_mut(session)?;
        if !reward.is_finite() {
            return fail(McbStatus::Data, "reward is not finite");
        }
        let Some(p) = s.pending.take() else {
            return fail(McbStatus::BadState, "no pending decision");
        };
        let rec = StepRecord {
            t: p.t,
            x: p.x,
            propensities: p.pv,
            action: p.action,
            reward,
            phase: s.learner.config.phase(p.t),
        };
        if let Some(db) = s.debias.as_mut() {
            if rec.t > db.t0() {
                db.accumulate(&s.learner, &rec)?;
            }
        }
        s.learner.sgd_step(&rec)?;
        Ok(())
    })
}

/// Current estimate of arm `arm` at `(row, col)`.
///
/// # Safety
/// `session` must come from this library; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_predict(
    session: *const McbSession,
    arm: usize,
    row: usize,
    col: usize,
    out: *mut f64,
) -> McbStatus {
    guard(|| {
        let s = session_ref(session)?;
        check_out(out, "out")?;
        let c = &s.learner.config;
        if arm >= c.arms || row >= c.d1 || col >= c.d2 {
            return fail(
                McbStatus::InvalidArgument,
                format!("arm {arm} at ({row}, {col}) out of range"),
            );
        }
        *out = s.learner.predict(arm, Cell::new(row, col));
        Ok(())
    })
}

/// Debiased inference for `Q = Σ coefs[k]·e_{rows[k]} e_{cols[k]}ᵀ` on arm
/// `arm`, or on `arm − other_arm` when `other_arm >= 0`. On `ILL_POSED` the
/// estimate is written and the remaining fields are zero.
///
/// # Safety
/// `rows`, `cols`, `coefs` must each point to `n_terms` elements; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mcb_session_infer(
    session: *const McbSession,
    rows: *const usize,
    cols: *const usize,
    coefs: *const f64,
    n_terms: usize,
    arm: usize,
    other_arm: i64,
    alpha: f64,
    out: *mut McbInference,
) -> McbStatus {
    guard(|| {
        let s = session_ref(session)?;
        check_out(out, "out")?;
        if rows.is_null() || cols.is_null() || coefs.is_null() {
            return fail(McbStatus::NullPointer, "term arrays must not be null");
        }
        let db = s
            .debias
            .as_ref()
            .map_or_else(|| fail(McbStatus::BadState, "session was created without debiasing"), Ok)?;
        let rows = std::slice::from_raw_parts(rows, n_terms);
        let cols = std::slice::from_raw_parts(cols, n_terms);
        let coefs = std::slice::from_raw_parts(coefs, n_terms);
        let terms = (0..n_terms)
            .map(|k| LinearTerm {
                row: rows[k],
                col: cols[k],
                coef: coefs[k],
            })
            .collect();
        let q = LinearForm::new(terms)?;
        let mode = if other_arm < 0 {
            FormMode::Single { arm }
        } else {
            FormMode::Difference {
                g: arm,
                h: other_arm as usize,
            }
        };
        let ctx = InferenceContext::new(db, &s.learner.arms, &s.learner.config)?;
        match ctx.infer(&q, mode, alpha) {
            Ok(r) => {
                *out = McbInference {
                    estimate: r.estimate,
                    std_error: r.std_error,
                    ci_low: r.ci_low,
                    ci_high: r.ci_high,
                    z_stat: r.z_stat,
                    p_value: r.p_value,
                    p_value_greater: r.p_value_greater,
                    p_value_less: r.p_value_less,
                };
                Ok(())
            }
            Err(Error::IllPosed { estimate }) => {
                *out = McbInference {
                    estimate,
                    ..Default::default()
                };
                Err(Error::IllPosed { estimate }.into())
            }
            Err(e) => Err(e.into()),
        }
    })
}
