use std::f64::consts::PI;

use nalgebra::{DVector, Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use proptest::prelude::*;

use wbplan::bayes_dsac::{bayes_fuse_raw, ValueDistribution};
use wbplan::bench::procedural_scene;
use wbplan::config::RunConfig;
use wbplan::kinematics::{base_to_ee_angle, manipulability, whole_body_jacobian, BodyParent, Configuration, RobotModel, Twist};
use wbplan::perception::{link_clearances, ClearanceSet, PointCloud};
use wbplan::qp_controller::{control_step, ControllerConfig, QpStatus};
use wbplan::sim::{EnvSetup, RobotEnv};

/// Integration tests have no `src/` next to them, so regressions are not
/// persisted to disk.
fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(n)
    }
}

fn model() -> RobotModel {
    RobotModel::default()
}

/// Arm angles as fractions of each joint's range.
fn configuration(model: &RobotModel, base: (f64, f64, f64), fractions: &[f64]) -> Configuration {
    let arm = model
        .joints
        .iter()
        .zip(fractions)
        .map(|(j, f)| j.lower() + 0.05 + f * (j.upper() - j.lower() - 0.1))
        .collect();
    Configuration::new(base.0, base.1, base.2, arm)
}

/// Planar rigid motion of the world: yaw `phi` then a shift.
fn moved(q: &Configuration, phi: f64, shift: (f64, f64)) -> (Configuration, Isometry3<f64>) {
    let iso = Isometry3::from_parts(Translation3::new(shift.0, shift.1, 0.0), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), phi));
    let p = iso * nalgebra::Point3::new(q.base.x, q.base.y, 0.0);
    (Configuration::new(p.x, p.y, q.base.theta + phi, q.arm.clone()), iso)
}

fn base_strategy() -> impl Strategy<Value = (f64, f64, f64)> {
    (-3.0..3.0f64, -3.0..3.0f64, -PI..PI)
}

fn fractions() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, 7)
}

fn cloud_around(q: &Configuration, offsets: &[(f64, f64, f64)]) -> PointCloud {
    PointCloud {
        points: offsets.iter().map(|(x, y, z)| Vector3::new(q.base.x + x, q.base.y + y, 0.6 + z)).collect(),
    }
}

fn offsets() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-1.2..1.2f64, -1.2..1.2f64, -0.6..0.8f64), 1..40)
}

proptest! {
    #![proptest_config(cases(200))]

    #[test]
    fn fusion_algebra(m1 in -1e3..1e3f64, m2 in -1e3..1e3f64, l1 in -6.9..6.9f64, l2 in -6.9..6.9f64) {
        let (s1, s2) = (l1.exp(), l2.exp());
        let f = bayes_fuse_raw(ValueDistribution::new(m1, s1), ValueDistribution::new(m2, s2));
        let g = bayes_fuse_raw(ValueDistribution::new(m2, s2), ValueDistribution::new(m1, s1));
        let prec = 1.0 / (s1 * s1) + 1.0 / (s2 * s2);
        prop_assert!((1.0 / (f.std * f.std) / prec - 1.0).abs() <= 1e-12);
        prop_assert!(f.mean >= m1.min(m2) && f.mean <= m1.max(m2));
        prop_assert!(f.std <= s1.min(s2));
        prop_assert!((f.mean - g.mean).abs() <= 1e-12 * m1.abs().max(m2.abs()).max(1.0));
        prop_assert!((f.std - g.std).abs() <= 1e-12 * f.std);
    }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn jacobian_is_frame_covariant(base in base_strategy(), fr in fractions(), phi in -PI..PI, sx in -2.0..2.0f64, sy in -2.0..2.0f64) {
        let m = model();
        let q = configuration(&m, base, &fr);
        let (q2, iso) = moved(&q, phi, (sx, sy));
        let (j, j2) = (whole_body_jacobian(&m, &q), whole_body_jacobian(&m, &q2));
        let r: Matrix3<f64> = *iso.rotation.to_rotation_matrix().matrix();
        for c in 0..m.dof() {
            let lin = r * j.fixed_view::<3, 1>(0, c);
            let ang = r * j.fixed_view::<3, 1>(3, c);
            for k in 0..3 {
                prop_assert!((j2[(k, c)] - lin[k]).abs() <= 1e-10);
                prop_assert!((j2[(3 + k, c)] - ang[k]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn heading_and_manipulability_ignore_world_motion(base in base_strategy(), fr in fractions(), phi in -PI..PI, sx in -2.0..2.0f64, sy in -2.0..2.0f64) {
        let m = model();
        let q = configuration(&m, base, &fr);
        let (q2, _) = moved(&q, phi, (sx, sy));
        let d = (base_to_ee_angle(&m, &q) - base_to_ee_angle(&m, &q2)).abs();
        prop_assert!(d.min(2.0 * PI - d) <= 1e-9);
        let (a, b) = (manipulability(&m, &q.arm), manipulability(&m, &q2.arm));
        prop_assert_eq!(a.value, b.value);
    }

    #[test]
    fn clearance_is_rigid_motion_invariant(base in base_strategy(), fr in fractions(), pts in offsets(), phi in -PI..PI, sx in -2.0..2.0f64, sy in -2.0..2.0f64) {
        let m = model();
        let q = configuration(&m, base, &fr);
        let cloud = cloud_around(&q, &pts);
        let (q2, iso) = moved(&q, phi, (sx, sy));
        let cloud2 = PointCloud { points: cloud.points.iter().map(|p| (iso * nalgebra::Point3::from(*p)).coords).collect() };
        let (a, b) = (link_clearances(&m, &q, &cloud, 10.0), link_clearances(&m, &q2, &cloud2, 10.0));
        for k in 0..a.distances.len() {
            prop_assert!((a.distances[k] - b.distances[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn clearance_is_lipschitz_and_min_monotone(base in base_strategy(), fr in fractions(), pts in offsets(), idx in any::<prop::sample::Index>(), dir in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), eps in 1e-4..0.3f64, extra in offsets()) {
        let m = model();
        let q = configuration(&m, base, &fr);
        let cloud = cloud_around(&q, &pts);
        let before = link_clearances(&m, &q, &cloud, 10.0);

        let d = Vector3::new(dir.0, dir.1, dir.2);
        prop_assume!(d.norm() > 1e-3);
        let mut shifted = cloud.clone();
        let i = idx.index(shifted.points.len());
        shifted.points[i] += d.normalize() * eps;
        let after = link_clearances(&m, &q, &shifted, 10.0);
        for k in 0..before.distances.len() {
            prop_assert!((after.distances[k] - before.distances[k]).abs() <= eps + 1e-12);
        }

        let mut grown = cloud.clone();
        grown.points.extend(cloud_around(&q, &extra).points);
        let more = link_clearances(&m, &q, &grown, 10.0);
        for k in 0..before.distances.len() {
            prop_assert!(more.distances[k] <= before.distances[k]);
        }
    }

    #[test]
    fn distal_joints_have_zero_gradient(base in base_strategy(), fr in fractions(), pts in offsets()) {
        let m = model();
        let q = configuration(&m, base, &fr);
        let set = link_clearances(&m, &q, &cloud_around(&q, &pts), 10.0);
        for (k, body) in m.bodies.iter().enumerate() {
            prop_assert!(set.gradients.row(k).iter().all(|g| g.is_finite()));
            let first_distal = match body.parent_link() {
                BodyParent::Base => 0,
                BodyParent::Joint(j) => j + 1,
            };
            for j in first_distal..m.arm_dof() {
                prop_assert_eq!(set.gradients[(k, 2 + j)], 0.0);
            }
        }
    }

    #[test]
    fn heavier_slack_weights_never_grow_slack(
        base in base_strategy(), fr in fractions(),
        twist in prop::collection::vec(-1.0..1.0f64, 6),
        clear in prop::collection::vec((0.11..0.6f64, prop::collection::vec(-1.0..1.0f64, 9)), 0..6),
        dev in 0.02..4.0f64,
    ) {
        let m = model();
        let q = configuration(&m, base, &fr);
        let rows = clear.len();
        let set = ClearanceSet {
            distances: DVector::from_iterator(rows, clear.iter().map(|c| c.0)),
            gradients: nalgebra::DMatrix::from_fn(rows, 9, |r, c| clear[r].1[c]),
        };
        let cfg = ControllerConfig::default();
        let mut heavy = cfg.clone();
        heavy.slack_weights.iter_mut().for_each(|w| *w *= 10.0);
        let t = Twist::from_slice(&twist);
        let a = control_step(&cfg, &m, &q, &t, &set, dev);
        let b = control_step(&heavy, &m, &q, &t, &set, dev);
        prop_assume!(a.status == QpStatus::Optimal && b.status == QpStatus::Optimal);
        let norm = |s: &[f64; 6]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm(&b.slack) <= norm(&a.slack) + 1e-6, "{} > {}", norm(&b.slack), norm(&a.slack));
        prop_assert!(b.qdot.within_limits(&m, 0.0));
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn episode_steps_keep_reward_and_state_invariants(
        scene in 0usize..4, seed in 0u64..1000,
        actions in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 6), 40),
    ) {
        let setup = EnvSetup::default();
        let w = setup.reward.clone();
        let m = setup.model.clone();
        let mut env = RobotEnv::new(setup, procedural_scene(scene, 3));
        env.reset_episode(seed).unwrap();
        for a in &actions {
            let r = env.step_episode(a);
            let p = &r.info.parts;
            prop_assert_eq!(r.reward, p.total(&w));
            prop_assert!(p.dev <= 0.0 && p.follow <= 0.0 && p.time < 0.0);
            prop_assert!(r.reward <= 0.0 || r.info.success);
            prop_assert!(!(r.info.success && r.info.collision));
            let q = env.configuration();
            prop_assert!(q.base.theta > -PI && q.base.theta <= PI);
            for (v, j) in q.arm.iter().zip(&m.joints) {
                prop_assert!(*v >= j.lower() && *v <= j.upper());
            }
            if r.done {
                break;
            }
        }
    }

    #[test]
    fn echoed_config_parses_back(seed in 0..=i64::MAX as u64, psi in 0.01..0.5f64, gamma in 0.5..0.999f64) {
        let cfg = RunConfig::from_overrides(&[
            format!("seed={seed}"),
            format!("controller.psi={psi:?}"),
            format!("training.gamma={gamma:?}"),
        ]).unwrap();
        let text = cfg.to_toml();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, &text).unwrap();
        prop_assert_eq!(RunConfig::load(&path, &[]).unwrap(), cfg);
    }
}

#[test]
fn seeds_beyond_toml_integers_are_rejected() {
    let e = RunConfig::from_overrides(&[format!("seed={}", u64::MAX)]).unwrap_err();
    assert!(e.to_string().contains("seed"), "{e}");
}
