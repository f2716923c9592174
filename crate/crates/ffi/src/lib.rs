//! C ABI over the planner: opaque handles, status codes and a thread-local
//! last-error message.
//!
//! Every function returns a [`WbStatus`]; outputs go through caller-owned
//! pointers. Handles are created by `*_new`/`*_load` and released with the
//! matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use wbplan::bayes_dsac::{bayes_fuse_raw, ValueDistribution};
use wbplan::bench::{procedural_scene, PlannerMode};
use wbplan::kinematics::{whole_body_jacobian, Configuration, RobotModel, Twist};
use wbplan::perception::{ClearanceSet, Scene};
use wbplan::qp_controller::{control_step, ControllerConfig, QpStatus};
use wbplan::sim::{EnvSetup, RobotEnv};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Unreadable or malformed input file.
    Config = 3,
    Runtime = 4,
    Panic = 5,
}

/// Solver outcome reported by [`wbplan_control_step`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WbQpStatus {
    Optimal = 0,
    MaxIterations = 1,
    Infeasible = 2,
}

pub struct WbModel(RobotModel);

pub struct WbController(ControllerConfig);

pub struct WbEnv {
    env: RobotEnv,
    obs_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: WbStatus, msg: impl Into<String>) -> WbStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> WbStatus) -> WbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(WbStatus::Panic, msg)
        }
    }
}

fn from_error(e: wbplan::Error) -> WbStatus {
    let status = if e.is_config() { WbStatus::Config } else { WbStatus::Runtime };
    fail(status, e.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, WbStatus> {
    if p.is_null() {
        return Err(fail(WbStatus::NullPointer, "path is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(WbStatus::InvalidArgument, "path is not UTF-8")),
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], WbStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(WbStatus::NullPointer, "input array is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize) -> Result<&'a mut [f64], WbStatus> {
    if p.is_null() {
        return Err(fail(WbStatus::NullPointer, "output array is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

fn configuration(model: &RobotModel, q: &[f64]) -> Result<Configuration, WbStatus> {
    if q.len() != model.dof() + 1 {
        return Err(fail(
            WbStatus::InvalidArgument,
            format!("configuration needs {} values (x, y, theta, arm)", model.dof() + 1),
        ));
    }
    Ok(Configuration::new(q[0], q[1], q[2], q[3..].to_vec()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wbplan_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Built-in mobile manipulator model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wbplan_model_new_default(out: *mut *mut WbModel) -> WbStatus {
    guard(|| {
        if out.is_null() {
            return fail(WbStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(WbModel(RobotModel::default())));
        WbStatus::Ok
    })
}

/// Loads a robot model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wbplan_model_load(path: *const c_char, out: *mut *mut WbModel) -> WbStatus {
    guard(|| {
        let path = tri!(path_arg(path));
        if out.is_null() {
            return fail(WbStatus::NullPointer, "out is null");
        }
        match RobotModel::load(&path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(WbModel(m)));
                WbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `model` must come from a `wbplan_model_*` constructor, or be null.
#[no_mangle]
pub unsafe extern "C" fn wbplan_model_free(model: *mut WbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of joint velocities (base ω, base v, arm joints).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wbplan_model_dof(model: *const WbModel, out: *mut usize) -> WbStatus {
    if model.is_null() || out.is_null() {
        return fail(WbStatus::NullPointer, "null argument");
    }
    *out = (*model).0.dof();
    WbStatus::Ok
}

/// Whole-body Jacobian, row-major `6 × dof`. `q` is `(x, y, theta, arm…)`
/// with `dof + 1` entries.
///
/// # Safety
/// Arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn wbplan_jacobian(
    model: *const WbModel,
    q: *const f64,
    q_len: usize,
    out: *mut f64,
    out_len: usize,
) -> WbStatus {
    guard(|| {
        if model.is_null() {
            return fail(WbStatus::NullPointer, "model is null");
        }
        let m = &(*model).0;
        let q = tri!(configuration(m, tri!(slice(q, q_len))));
        if out_len != 6 * m.dof() {
            return fail(WbStatus::InvalidArgument, format!("output needs {} entries", 6 * m.dof()));
        }
        let out = tri!(slice_mut(out, out_len));
        let j = whole_body_jacobian(m, &q);
        for r in 0..6 {
            for c in 0..m.dof() {
                out[r * m.dof() + c] = j[(r, c)];
            }
        }
        WbStatus::Ok
    })
}

/// Controller with default settings.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wbplan_controller_new_default(out: *mut *mut WbController) -> WbStatus {
    guard(|| {
        if out.is_null() {
            return fail(WbStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(WbController(ControllerConfig::default())));
        WbStatus::Ok
    })
}

/// # Safety
/// `ctrl` must come from a `wbplan_controller_*` constructor, or be null.
#[no_mangle]
pub unsafe extern "C" fn wbplan_controller_free(ctrl: *mut WbController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// One control tick. `distances` holds `rows` clearances and `gradients`
/// their row-major `rows × dof` gradients. Writes `dof` joint velocities to
/// `qdot_out` and the solver outcome to `qp_status`.
///
/// # Safety
/// Arrays must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn wbplan_control_step(
    ctrl: *const WbController,
    model: *const WbModel,
    q: *const f64,
    q_len: usize,
    twist: *const f64,
    distances: *const f64,
    gradients: *const f64,
    rows: usize,
    dev_norm: f64,
    qdot_out: *mut f64,
    qp_status: *mut WbQpStatus,
) -> WbStatus {
    guard(|| {
        if ctrl.is_null() || model.is_null() || qp_status.is_null() {
            return fail(WbStatus::NullPointer, "null argument");
        }
        let (cfg, m) = (&(*ctrl).0, &(*model).0);
        let n = m.dof();
        let q = tri!(configuration(m, tri!(slice(q, q_len))));
        let twist = Twist::from_slice(tri!(slice(twist, 6)));
        let d = tri!(slice(distances, rows));
        let g = tri!(slice(gradients, rows * n));
        if !(dev_norm >= 0.0) {
            return fail(WbStatus::InvalidArgument, "dev_norm must be non-negative");
        }
        let clear = ClearanceSet {
            distances: DVector::from_column_slice(d),
            gradients: DMatrix::from_row_slice(rows, n, g),
        };
        let out = control_step(cfg, m, &q, &twist, &clear, dev_norm);
        tri!(slice_mut(qdot_out, n)).copy_from_slice(out.qdot.0.as_slice());
        *qp_status = match out.status {
            QpStatus::Optimal => WbQpStatus::Optimal,
            QpStatus::MaxIterations => WbQpStatus::MaxIterations,
            QpStatus::Infeasible => WbQpStatus::Infeasible,
        };
        WbStatus::Ok
    })
}

/// Precision-weighted fusion of two Gaussian value estimates.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn wbplan_bayes_fuse(m1: f64, s1: f64, m2: f64, s2: f64, mean: *mut f64, std: *mut f64) -> WbStatus {
    if mean.is_null() || std.is_null() {
        return fail(WbStatus::NullPointer, "null output");
    }
    if !(s1 > 0.0 && s2 > 0.0) {
        return fail(WbStatus::InvalidArgument, "standard deviations must be positive");
    }
    let f = bayes_fuse_raw(ValueDistribution::new(m1, s1), ValueDistribution::new(m2, s2));
    *mean = f.mean;
    *std = f.std;
    WbStatus::Ok
}

/// Servo-driven environment on a scene file, or on procedural scene
/// `scene_index` when `scene_path` is null. `mode` is a planner mode name.
///
/// # Safety
/// Strings must be NUL-terminated or null; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wbplan_env_new(
    scene_path: *const c_char,
    scene_index: usize,
    mode: *const c_char,
    out: *mut *mut WbEnv,
) -> WbStatus {
    guard(|| {
        if out.is_null() || mode.is_null() {
            return fail(WbStatus::NullPointer, "null argument");
        }
        let Ok(mode) = CStr::from_ptr(mode).to_str() else {
            return fail(WbStatus::InvalidArgument, "mode is not UTF-8");
        };
        let mode: PlannerMode = match mode.parse() {
            Ok(m) => m,
            Err(e) => return fail(WbStatus::InvalidArgument, e),
        };
        let scene = if scene_path.is_null() {
            procedural_scene(scene_index, 0)
        } else {
            match Scene::load(&tri!(path_arg(scene_path))) {
                Ok(s) => s,
                Err(e) => return from_error(e),
            }
        };
        let env = RobotEnv::new(mode.setup(&EnvSetup::default()), scene);
        *out = Box::into_raw(Box::new(WbEnv { env, obs_len: 0 }));
        WbStatus::Ok
    })
}

/// # Safety
/// `env` must come from [`wbplan_env_new`], or be null.
#[no_mangle]
pub unsafe extern "C" fn wbplan_env_free(env: *mut WbEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Action length the environment expects.
///
/// # Safety
/// `env` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wbplan_env_action_dim(env: *const WbEnv, out: *mut usize) -> WbStatus {
    if env.is_null() || out.is_null() {
        return fail(WbStatus::NullPointer, "null argument");
    }
    let e = &(*env).env;
    *out = RobotEnv::action_dim_for(e.setup.mode, &e.setup.model);
    WbStatus::Ok
}

/// Starts a seeded episode; `obs_len` receives the state-vector length.
///
/// # Safety
/// `env` and `obs_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wbplan_env_reset(env: *mut WbEnv, seed: u64, obs_len: *mut usize) -> WbStatus {
    guard(|| {
        if env.is_null() || obs_len.is_null() {
            return fail(WbStatus::NullPointer, "null argument");
        }
        let w = &mut *env;
        match w.env.reset_episode(seed) {
            Ok(obs) => {
                w.obs_len = obs.to_vec().state.len();
                *obs_len = w.obs_len;
                WbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Position-servo twist toward the goal, 6 entries.
///
/// # Safety
/// `env` must be reset and `out` must hold 6 entries.
#[no_mangle]
pub unsafe extern "C" fn wbplan_env_servo_action(env: *const WbEnv, out: *mut f64) -> WbStatus {
    guard(|| {
        if env.is_null() {
            return fail(WbStatus::NullPointer, "env is null");
        }
        if (*env).obs_len == 0 {
            return fail(WbStatus::Runtime, "environment was not reset");
        }
        let t = (*env).env.servo_twist().to_array();
        tri!(slice_mut(out, 6)).copy_from_slice(&t);
        WbStatus::Ok
    })
}

/// Advances one tick. `done` is set to 1 on success, collision or horizon.
///
/// # Safety
/// Arrays must hold the stated number of elements; `env` must be reset.
#[no_mangle]
pub unsafe extern "C" fn wbplan_env_step(
    env: *mut WbEnv,
    action: *const f64,
    action_len: usize,
    reward: *mut f64,
    done: *mut i32,
    success: *mut i32,
) -> WbStatus {
    guard(|| {
        if env.is_null() || reward.is_null() || done.is_null() || success.is_null() {
            return fail(WbStatus::NullPointer, "null argument");
        }
        if (*env).obs_len == 0 {
            return fail(WbStatus::Runtime, "environment was not reset");
        }
        let e = &mut (*env).env;
        let dim = RobotEnv::action_dim_for(e.setup.mode, &e.setup.model);
        if action_len != dim {
            return fail(WbStatus::InvalidArgument, format!("action needs {dim} entries"));
        }
        let a = tri!(slice(action, action_len));
        let r = e.step_episode(a);
        *reward = r.reward;
        *done = r.done as i32;
        *success = r.info.success as i32;
        WbStatus::Ok
    })
}

/// Current state vector (proprioception and goal offset).
///
/// # Safety
/// `out` must hold `len` entries, with `len` as reported by reset.
#[no_mangle]
pub unsafe extern "C" fn wbplan_env_state(env: *const WbEnv, out: *mut f64, len: usize) -> WbStatus {
    guard(|| {
        if env.is_null() {
            return fail(WbStatus::NullPointer, "env is null");
        }
        let w = &*env;
        if len != w.obs_len || w.obs_len == 0 {
            return fail(WbStatus::InvalidArgument, format!("state has {} entries", w.obs_len));
        }
        let state = w.env.observation().to_vec().state;
        for (o, s) in tri!(slice_mut(out, len)).iter_mut().zip(state) {
            *o = s as f64;
        }
        WbStatus::Ok
    })
}
