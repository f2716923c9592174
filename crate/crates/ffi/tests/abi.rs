use std::ffi::{c_char, CString};
use std::ptr;

use wbplan_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { wbplan_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|c| *c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn model() -> *mut WbModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { wbplan_model_new_default(&mut m) }, WbStatus::Ok);
    m
}

#[test]
fn jacobian_matches_core() {
    let m = model();
    let mut dof = 0;
    assert_eq!(unsafe { wbplan_model_dof(m, &mut dof) }, WbStatus::Ok);
    assert_eq!(dof, 9);
    let q = [0.5, -0.2, 0.3, 0.1, -0.6, 0.0, -2.2, 0.0, 1.8, 0.785];
    let mut out = vec![0.0; 6 * dof];
    let s = unsafe { wbplan_jacobian(m, q.as_ptr(), q.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, WbStatus::Ok);
    let model = wbplan::kinematics::RobotModel::default();
    let cq = wbplan::kinematics::Configuration::new(q[0], q[1], q[2], q[3..].to_vec());
    let j = wbplan::kinematics::whole_body_jacobian(&model, &cq);
    for r in 0..6 {
        for c in 0..dof {
            assert_eq!(out[r * dof + c], j[(r, c)]);
        }
    }
    unsafe { wbplan_model_free(m) };
}

#[test]
fn wrong_lengths_and_nulls_are_reported() {
    let m = model();
    let q = [0.0; 4];
    let mut out = [0.0; 54];
    let s = unsafe { wbplan_jacobian(m, q.as_ptr(), q.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, WbStatus::InvalidArgument);
    assert!(last_error().contains("10 values"), "{}", last_error());
    let s = unsafe { wbplan_jacobian(ptr::null(), q.as_ptr(), q.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, WbStatus::NullPointer);
    unsafe { wbplan_model_free(m) };
    unsafe { wbplan_model_free(ptr::null_mut()) };
}

#[test]
fn missing_model_file_is_a_config_error() {
    let path = CString::new("/nonexistent/robot.toml").unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { wbplan_model_load(path.as_ptr(), &mut m) };
    assert_eq!(s, WbStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent/robot.toml"));
}

#[test]
fn control_step_tracks_a_free_space_twist() {
    let m = model();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { wbplan_controller_new_default(&mut c) }, WbStatus::Ok);
    let q = [0.0, 0.0, 0.0, 0.0, -0.6, 0.0, -2.2, 0.0, 1.8, 0.785];
    let twist = [0.05, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut qdot = [0.0; 9];
    let mut st = WbQpStatus::Infeasible;
    let s = unsafe {
        wbplan_control_step(c, m, q.as_ptr(), q.len(), twist.as_ptr(), ptr::null(), ptr::null(), 0, 1.0, qdot.as_mut_ptr(), &mut st)
    };
    assert_eq!(s, WbStatus::Ok);
    assert_eq!(st, WbQpStatus::Optimal);
    let mut jac = [0.0; 54];
    unsafe { wbplan_jacobian(m, q.as_ptr(), q.len(), jac.as_mut_ptr(), 54) };
    for r in 0..6 {
        let v: f64 = (0..9).map(|k| jac[r * 9 + k] * qdot[k]).sum();
        assert!((v - twist[r]).abs() < 1e-3, "row {r}: {v}");
    }
    unsafe {
        wbplan_controller_free(c);
        wbplan_model_free(m);
    }
}

#[test]
fn fusion() {
    let (mut m, mut s) = (0.0, 0.0);
    assert_eq!(unsafe { wbplan_bayes_fuse(1.0, 1.0, 3.0, 1.0, &mut m, &mut s) }, WbStatus::Ok);
    assert_eq!(m, 2.0);
    assert!((s * s - 0.5).abs() < 1e-15);
    assert_eq!(unsafe { wbplan_bayes_fuse(1.0, 0.0, 3.0, 1.0, &mut m, &mut s) }, WbStatus::InvalidArgument);
}

#[test]
fn servo_episode_through_the_abi() {
    let mode = CString::new("HRA").unwrap();
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { wbplan_env_new(ptr::null(), 0, mode.as_ptr(), &mut env) }, WbStatus::Ok);
    let mut a = [0.0; 6];
    let (mut r, mut done, mut ok) = (0.0, 0, 0);
    // Stepping before reset is an error, not a crash.
    let s = unsafe { wbplan_env_step(env, a.as_ptr(), 6, &mut r, &mut done, &mut ok) };
    assert_eq!(s, WbStatus::Runtime);
    let mut dim = 0;
    unsafe { wbplan_env_action_dim(env, &mut dim) };
    assert_eq!(dim, 6);
    let mut len = 0;
    assert_eq!(unsafe { wbplan_env_reset(env, 4, &mut len) }, WbStatus::Ok);
    let mut state = vec![0.0; len];
    assert_eq!(unsafe { wbplan_env_state(env, state.as_mut_ptr(), len) }, WbStatus::Ok);
    for _ in 0..50 {
        assert_eq!(unsafe { wbplan_env_servo_action(env, a.as_mut_ptr()) }, WbStatus::Ok);
        assert_eq!(unsafe { wbplan_env_step(env, a.as_ptr(), 6, &mut r, &mut done, &mut ok) }, WbStatus::Ok);
        assert!(r.is_finite());
        if done != 0 {
            break;
        }
    }
    let bad = CString::new("NOPE").unwrap();
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { wbplan_env_new(ptr::null(), 0, bad.as_ptr(), &mut other) }, WbStatus::InvalidArgument);
    unsafe { wbplan_env_free(env) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/wbplan.h")).unwrap();
    for f in [
        "wbplan_last_error",
        "wbplan_model_new_default",
        "wbplan_model_load",
        "wbplan_model_free",
        "wbplan_jacobian",
        "wbplan_control_step",
        "wbplan_bayes_fuse",
        "wbplan_env_new",
        "wbplan_env_reset",
        "wbplan_env_step",
        "wbplan_env_free",
        "WB_STATUS_OK",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
