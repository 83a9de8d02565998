//! C ABI over `idmlab`.
//!
//! Every function returns an [`IdmlabStatus`]; on failure the message is
//! available from [`idmlab_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_load` and released with `*_free`.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use idmlab::datasets::{State, Transition};
use idmlab::gridworld::{generate_maze, make_open_grid, solve_expert, Action, ExpertPolicy, Grid, PosState, N_ACTIONS};
use idmlab::harness::{oracle_accuracy, run_experiment, write_outputs, ExperimentConfig, ExperimentKind, RunOptions};
use idmlab::models::{analytic_idm_pos, Model, Role};
use idmlab::{datasets::StateFormat, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdmlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DomainError = 3,
    IoError = 4,
    ParseError = 5,
    VerificationFailed = 6,
    Panic = 7,
}

/// A grid together with its expert.
pub struct IdmlabGrid {
    grid: Grid,
    expert: ExpertPolicy,
}

/// A trained or analytic classifier.
pub struct IdmlabModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> IdmlabStatus {
    match e {
        Error::Io { .. } => IdmlabStatus::IoError,
        Error::Parse { .. } | Error::Csv(_) | Error::Config(_) => IdmlabStatus::ParseError,
        Error::Verification(_) => IdmlabStatus::VerificationFailed,
        Error::Parameter(_) | Error::InvalidArch(_) | Error::Unsupported(_) | Error::Dimension { .. } | Error::Index { .. } => {
            IdmlabStatus::InvalidArgument
        }
        _ => IdmlabStatus::DomainError,
    }
}

struct Fail(IdmlabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IdmlabStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IdmlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IdmlabStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IdmlabStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(IdmlabStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn grid_ref<'a>(g: *const IdmlabGrid) -> Result<&'a IdmlabGrid, Fail> {
    g.as_ref().ok_or_else(|| null("grid"))
}

unsafe fn model_ref<'a>(m: *const IdmlabModel) -> Result<&'a IdmlabModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn idmlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn idmlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn idmlab_status_name(status: IdmlabStatus) -> *const c_char {
    let s: &'static str = match status {
        IdmlabStatus::Ok => "ok\0",
        IdmlabStatus::NullPointer => "null pointer\0",
        IdmlabStatus::InvalidArgument => "invalid argument\0",
        IdmlabStatus::DomainError => "domain error\0",
        IdmlabStatus::IoError => "i/o error\0",
        IdmlabStatus::ParseError => "parse error\0",
        IdmlabStatus::VerificationFailed => "verification failed\0",
        IdmlabStatus::Panic => "panic\0",
    };
    s.as_ptr().cast()
}

/// Seeded maze of side `size` with its shortest-path expert.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn idmlab_maze_new(size: usize, seed: u64, out_grid: *mut *mut IdmlabGrid) -> IdmlabStatus {
    guard(|| {
        let slot = out(out_grid, "out_grid")?;
        let grid = generate_maze(size, seed)?;
        let expert = solve_expert(&grid);
        *slot = Box::into_raw(Box::new(IdmlabGrid { grid, expert }));
        Ok(())
    })
}

/// Open `n`×`n` grid with the right-or-down expert.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn idmlab_open_grid_new(n: usize, p_right: f64, out_grid: *mut *mut IdmlabGrid) -> IdmlabStatus {
    guard(|| {
        let slot = out(out_grid, "out_grid")?;
        let grid = make_open_grid(n)?;
        let expert = ExpertPolicy::stochastic_diagonal(p_right)?;
        *slot = Box::into_raw(Box::new(IdmlabGrid { grid, expert }));
        Ok(())
    })
}

/// # Safety
/// `grid` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn idmlab_grid_free(grid: *mut IdmlabGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_grid_size(grid: *const IdmlabGrid, width: *mut usize, height: *mut usize) -> IdmlabStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        *out(width, "width")? = g.grid.width();
        *out(height, "height")? = g.grid.height();
        Ok(())
    })
}

/// Start and goal cells.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_grid_endpoints(grid: *const IdmlabGrid, start_xy: *mut i32, goal_xy: *mut i32) -> IdmlabStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        if start_xy.is_null() || goal_xy.is_null() {
            return Err(null("endpoint buffer"));
        }
        let (s, t) = (g.grid.start(), g.grid.goal());
        std::slice::from_raw_parts_mut(start_xy, 2).copy_from_slice(&[s.x, s.y]);
        std::slice::from_raw_parts_mut(goal_xy, 2).copy_from_slice(&[t.x, t.y]);
        Ok(())
    })
}

fn action_arg(a: u32) -> Result<Action, Fail> {
    Action::from_index(a as usize).ok_or_else(|| Fail(IdmlabStatus::InvalidArgument, format!("action {a} outside 0..4")))
}

/// Applies action `a` (0 right, 1 left, 2 up, 3 down) at `(x, y)`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_grid_step(
    grid: *const IdmlabGrid,
    x: i32,
    y: i32,
    action: u32,
    out_x: *mut i32,
    out_y: *mut i32,
) -> IdmlabStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        let n = g.grid.step(PosState::new(x, y), action_arg(action)?)?;
        *out(out_x, "out_x")? = n.x;
        *out(out_y, "out_y")? = n.y;
        Ok(())
    })
}

/// Expert action distribution at `(x, y)` into `probs[4]`.
///
/// # Safety
/// `probs` must hold 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn idmlab_grid_expert_probs(grid: *const IdmlabGrid, x: i32, y: i32, probs: *mut f64) -> IdmlabStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let s = PosState::new(x, y);
        let p = g
            .expert
            .distribution(&g.grid, s)
            .ok_or_else(|| Fail(IdmlabStatus::DomainError, format!("expert undefined at {s}")))?;
        std::slice::from_raw_parts_mut(probs, N_ACTIONS).copy_from_slice(&p);
        Ok(())
    })
}

/// Text map of the grid. Writes at most `len` bytes including the NUL and
/// always stores the required size in `needed`.
///
/// # Safety
/// `buf` must hold `len` bytes or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn idmlab_grid_to_text(grid: *const IdmlabGrid, buf: *mut c_char, len: usize, needed: *mut usize) -> IdmlabStatus {
    guard(|| {
        let g = grid_ref(grid)?;
        let text = g.grid.to_text();
        *out(needed, "needed")? = text.len() + 1;
        if len == 0 {
            return Ok(());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let n = text.len().min(len - 1);
        let dst = std::slice::from_raw_parts_mut(buf.cast::<u8>(), len);
        dst[..n].copy_from_slice(&text.as_bytes()[..n]);
        dst[n] = 0;
        Ok(())
    })
}

/// LC inverse dynamics model with logits `W(s' − s)/τ`.
///
/// # Safety
/// `out_model` must be valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_model_analytic_pos(temperature: f64, out_model: *mut *mut IdmlabModel) -> IdmlabStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let model = analytic_idm_pos(temperature)?;
        *slot = Box::into_raw(Box::new(IdmlabModel { model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_model` valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_model_load(path: *const c_char, out_model: *mut *mut IdmlabModel) -> IdmlabStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let model = Model::load(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(IdmlabModel { model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn idmlab_model_save(model: *const IdmlabModel, path: *const c_char) -> IdmlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        m.model.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn idmlab_model_free(model: *mut IdmlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Whether the model reads `(s, s')` pairs.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_model_is_idm(model: *const IdmlabModel, is_idm: *mut bool) -> IdmlabStatus {
    guard(|| {
        *out(is_idm, "is_idm")? = model_ref(model)?.model.spec().role == Role::Idm;
        Ok(())
    })
}

/// Action probabilities for `n` pos-format records. `states` and
/// `next_states` hold `2n` ints as `x, y` pairs; `next_states` may be null
/// for policies. `goals` (`2n` ints) is required only by goal-conditioned
/// models. Writes `4n` doubles into `probs`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn idmlab_model_predict_pos(
    model: *const IdmlabModel,
    states: *const i32,
    next_states: *const i32,
    goals: *const i32,
    n: usize,
    probs: *mut f64,
) -> IdmlabStatus {
    guard(|| {
        let m = &model_ref(model)?.model;
        if m.spec().format != StateFormat::Pos {
            return Err(Fail(IdmlabStatus::InvalidArgument, "model does not take pos inputs".into()));
        }
        if n == 0 {
            return Ok(());
        }
        if states.is_null() || probs.is_null() {
            return Err(null("states or probs"));
        }
        if m.spec().role == Role::Idm && next_states.is_null() {
            return Err(null("next_states"));
        }
        if m.spec().goal_conditioned && goals.is_null() {
            return Err(null("goals"));
        }
        let pair = |p: *const i32, i: usize| PosState::new(*p.add(2 * i), *p.add(2 * i + 1));
        let records: Vec<Transition> = (0..n)
            .map(|i| {
                let s = pair(states, i);
                let s_next = if next_states.is_null() { s } else { pair(next_states, i) };
                Transition {
                    s: State::Pos(s),
                    a: None,
                    s_next: State::Pos(s_next),
                    goal: (!goals.is_null()).then(|| pair(goals, i)),
                }
            })
            .collect();
        let p = m.predict(&records)?;
        let dst = std::slice::from_raw_parts_mut(probs, N_ACTIONS * n);
        for (chunk, row) in dst.chunks_mut(N_ACTIONS).zip(p) {
            chunk.copy_from_slice(&row);
        }
        Ok(())
    })
}

/// Analytic-IDM argmax accuracy (pos and image) on one seeded maze.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_oracle(size: usize, seed: u64, pos_accuracy: *mut f64, img_accuracy: *mut f64) -> IdmlabStatus {
    guard(|| {
        let pos = out(pos_accuracy, "pos_accuracy")?;
        let img = out(img_accuracy, "img_accuracy")?;
        let line = oracle_accuracy(size, &[seed])?.remove(0);
        *pos = line.pos_accuracy;
        *img = line.img_accuracy;
        Ok(())
    })
}

/// Runs the tabular identity suite; `failures` receives the failed trials.
///
/// # Safety
/// `failures` must be valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_verify(trials: usize, seed: u64, failures: *mut usize) -> IdmlabStatus {
    guard(|| {
        let slot = out(failures, "failures")?;
        let mut cfg = ExperimentConfig::new(ExperimentKind::VerifyTabular, Vec::new(), vec![seed]);
        cfg.verify.trials = trials;
        let run = run_experiment(&cfg, &RunOptions::default())?;
        *slot = run
            .rows
            .iter()
            .filter(|r| r.metric == "passed" && r.value == 0.0)
            .count();
        Ok(())
    })
}

/// Runs a TOML experiment config and writes its CSVs to `out_dir`, or to
/// the config's own output directory when `out_dir` is null.
///
/// # Safety
/// Strings must be NUL-terminated; `rows` valid.
#[no_mangle]
pub unsafe extern "C" fn idmlab_run_config(
    config_path: *const c_char,
    out_dir: *const c_char,
    jobs: usize,
    seed_offset: u64,
    rows: *mut usize,
) -> IdmlabStatus {
    guard(|| {
        let slot = out(rows, "rows")?;
        let cfg = ExperimentConfig::load(&path_arg(config_path, "config_path")?)?;
        let dir = if out_dir.is_null() {
            cfg.output_dir.clone()
        } else {
            path_arg(out_dir, "out_dir")?
        };
        let run = run_experiment(&cfg, &RunOptions { jobs, seed_offset })?;
        write_outputs(&run, &dir)?;
        *slot = run.rows.len();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(idmlab_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn maze_round_trip() {
        let mut g = ptr::null_mut();
        assert_eq!(unsafe { idmlab_maze_new(10, 0, &mut g) }, IdmlabStatus::Ok);
        let (mut w, mut h) = (0, 0);
        assert_eq!(unsafe { idmlab_grid_size(g, &mut w, &mut h) }, IdmlabStatus::Ok);
        assert_eq!((w, h), (10, 10));
        let mut needed = 0;
        assert_eq!(unsafe { idmlab_grid_to_text(g, ptr::null_mut(), 0, &mut needed) }, IdmlabStatus::Ok);
        let mut buf = vec![0 as c_char; needed];
        assert_eq!(unsafe { idmlab_grid_to_text(g, buf.as_mut_ptr(), needed, &mut needed) }, IdmlabStatus::Ok);
        let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert!(text.contains('S') && text.contains('G'));
        unsafe { idmlab_grid_free(g) };
    }

    #[test]
    fn errors_carry_messages() {
        let mut g = ptr::null_mut();
        let status = unsafe { idmlab_maze_new(1, 0, &mut g) };
        assert_ne!(status, IdmlabStatus::Ok);
        assert!(!last_error().is_empty());
        assert_eq!(unsafe { idmlab_grid_size(ptr::null(), ptr::null_mut(), ptr::null_mut()) }, IdmlabStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { idmlab_model_analytic_pos(-1.0, &mut m) }, IdmlabStatus::InvalidArgument);
    }

    #[test]
    fn analytic_model_predicts_moves() {
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { idmlab_model_analytic_pos(0.01, &mut m) }, IdmlabStatus::Ok);
        let s = [3, 3, 3, 3];
        let n = [4, 3, 3, 2];
        let mut p = [0.0; 8];
        let st = unsafe { idmlab_model_predict_pos(m, s.as_ptr(), n.as_ptr(), ptr::null(), 2, p.as_mut_ptr()) };
        assert_eq!(st, IdmlabStatus::Ok);
        assert!(p[0] > 0.99 && p[4 + 3] > 0.99);
        unsafe { idmlab_model_free(m) };
    }

    #[test]
    fn verify_passes() {
        let mut failures = usize::MAX;
        assert_eq!(unsafe { idmlab_verify(10, 0, &mut failures) }, IdmlabStatus::Ok);
        assert_eq!(failures, 0);
    }
}
