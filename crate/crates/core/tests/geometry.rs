use nalgebra::Matrix3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdpm::geometry::*;
use vdpm::Error;

fn random_rigid(rng: &mut impl Rng) -> Rigid {
    let q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
    let t = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
    Rigid::new(q, t)
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0))).collect()
}

/// Rotation matrix from a unit quaternion, written out by hand.
fn quat_matrix([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn assert_close(a: &Vec3, b: &Vec3, tol: f64) {
    assert!((a - b).norm() <= tol, "{a:?} vs {b:?}");
}

#[test]
fn quaternion_is_unit_and_canonical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let r = random_rigid(&mut rng);
        let q = r.quat();
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(q[0] >= 0.0);
    }
    let r = Rigid::new([-1.0, 0.0, 0.0, 0.0], Vec3::zeros());
    assert_eq!(r.quat(), [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn apply_matches_hand_written_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let r = random_rigid(&mut rng);
        let m = quat_matrix(r.quat());
        for p in random_points(&mut rng, 10) {
            assert_close(&r.apply(&p), &(m * p + r.translation), 1e-12);
        }
    }
}

#[test]
fn compose_with_identity_and_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_rigid(&mut rng);
    let id = Rigid::identity();
    let c = id.compose(&t);
    assert!((c.translation - t.translation).norm() < 1e-15);
    assert!(c.angle_to(&t) < 1e-12);
    let back = t.compose(&t.inverse());
    assert!(back.translation.norm() < 1e-9 && back.angle_to(&id) < 1e-7);
}

#[test]
fn compose_equals_sequential_application() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (random_rigid(&mut rng), random_rigid(&mut rng));
    let ab = a.compose(&b);
    for p in random_points(&mut rng, 100) {
        assert_close(&ab.apply(&p), &a.apply(&b.apply(&p)), 1e-9);
    }
}

#[test]
fn inverse_composition_fixes_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let t = random_rigid(&mut rng);
        let id = t.inverse().compose(&t);
        for p in random_points(&mut rng, 5) {
            assert_close(&transform_points(&id, &[p])[0], &p, 1e-9);
        }
    }
}

#[test]
fn transform_points_examples() {
    let p = vec![Vec3::new(1.0, -2.0, 0.5), Vec3::zeros()];
    assert_eq!(transform_points(&Rigid::identity(), &p), p);
    let shift = Rigid::translation(Vec3::new(1.0, 2.0, 3.0));
    assert_eq!(transform_points(&shift, &[Vec3::zeros()])[0], Vec3::new(1.0, 2.0, 3.0));
    let s = Similarity::new(
        2.0,
        Rigid::from_axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2, Vec3::zeros()),
    )
    .unwrap();
    assert_close(&transform_points(&s, &[Vec3::x()])[0], &Vec3::new(0.0, 2.0, 0.0), 1e-12);
}

#[test]
fn similarity_inverse_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let s = Similarity::new(rng.random_range(0.1..5.0), random_rigid(&mut rng)).unwrap();
        let inv = s.inverse();
        for p in random_points(&mut rng, 5) {
            assert_close(&inv.apply(&s.apply(&p)), &p, 1e-9);
            assert_close(&s.compose(&inv).apply(&p), &p, 1e-9);
        }
    }
    assert!(Similarity::new(0.0, Rigid::identity()).is_err());
    assert!(Similarity::new(-1.0, Rigid::identity()).is_err());
}

#[test]
fn intrinsics_validation() {
    assert!(Intrinsics::new(10.0, 10.0, 16.0, 16.0, 32, 32).is_ok());
    assert!(Intrinsics::new(0.0, 10.0, 16.0, 16.0, 32, 32).is_err());
    assert!(Intrinsics::new(10.0, 10.0, 32.0, 16.0, 32, 32).is_err());
    assert!(Intrinsics::new(10.0, 10.0, 16.0, -1.0, 32, 32).is_err());
    let k = Intrinsics::from_vertical_fov(1.0, 32, 32).unwrap();
    assert!((k.vertical_fov() - 1.0).abs() < 1e-12);
}

#[test]
fn project_axis_point_and_degenerate_depth() {
    let k = Intrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32).unwrap();
    let pose = Rigid::identity();
    let pr = project(&k, &pose, &[Vec3::new(0.0, 0.0, 2.5), Vec3::new(1.0, 1.0, 0.0)]);
    assert!(pr[0].valid && pr[0].u == 16.0 && pr[0].v == 16.0 && pr[0].depth == 2.5);
    assert!(!pr[1].valid);
    assert!(!project_point(&k, &pose, &Vec3::new(0.0, 0.0, NEAR_PLANE)).valid);
}

#[test]
fn project_unproject_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = Intrinsics::new(28.0, 31.0, 15.5, 16.0, 32, 32).unwrap();
    for _ in 0..20 {
        let pose = random_rigid(&mut rng);
        let depth: Vec<f64> = (0..32 * 32)
            .map(|i| if i % 7 == 0 { 0.0 } else { rng.random_range(0.5..10.0) })
            .collect();
        let dm = DepthMap::new(32, 32, depth.clone()).unwrap();
        let map = unproject(&k, &pose, &dm);
        for (idx, p) in map.points.iter().enumerate() {
            assert_eq!(map.valid[idx], idx % 7 != 0);
            if !map.valid[idx] {
                continue;
            }
            let pr = project_point(&k, &pose, p);
            let (x, y) = ((idx % 32) as f64, (idx / 32) as f64);
            assert!((pr.u - x).abs() < 1e-6 && (pr.v - y).abs() < 1e-6);
            assert!((pr.depth - depth[idx]).abs() < 1e-6);
        }
    }
}

#[test]
fn unproject_center_pixel() {
    let k = Intrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32).unwrap();
    let mut depth = vec![0.0; 32 * 32];
    depth[16 * 32 + 16] = 3.0;
    let map = unproject(&k, &Rigid::identity(), &DepthMap::new(32, 32, depth).unwrap());
    assert_eq!(map.valid_count(), 1);
    assert_eq!(map.points[16 * 32 + 16], Vec3::new(0.0, 0.0, 3.0));
}

#[test]
fn umeyama_identity_and_known_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let src = random_points(&mut rng, 50);
    let id = umeyama_align(&src, &src, true).unwrap();
    assert!((id.scale - 1.0).abs() < 1e-9);
    assert!(id.rigid.translation.norm() < 1e-9 && id.rigid.angle_to(&Rigid::identity()) < 1e-7);

    for _ in 0..50 {
        let truth = Similarity::new(rng.random_range(0.2..4.0), random_rigid(&mut rng)).unwrap();
        let src = random_points(&mut rng, 20);
        let dst = transform_points(&truth, &src);
        let est = umeyama_align(&src, &dst, true).unwrap();
        assert!((est.scale - truth.scale).abs() < 1e-6);
        assert!((est.rigid.translation - truth.rigid.translation).norm() < 1e-6);
        assert!(est.rigid.angle_to(&truth.rigid) < 1e-6);
        let residual: f64 = src
            .iter()
            .zip(&dst)
            .map(|(s, d)| (est.apply(s) - d).norm())
            .fold(0.0, f64::max);
        assert!(residual < 1e-6);
    }
}

#[test]
fn umeyama_without_scale_keeps_unit_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth = Similarity::new(2.0, random_rigid(&mut rng)).unwrap();
    let src = random_points(&mut rng, 20);
    let dst = transform_points(&truth, &src);
    assert_eq!(umeyama_align(&src, &dst, false).unwrap().scale, 1.0);
}

#[test]
fn umeyama_rejects_degenerate_input() {
    let two = [Vec3::zeros(), Vec3::x()];
    assert!(matches!(umeyama_align(&two, &two, true), Err(Error::AlignmentDegenerate(_))));
    let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
    assert!(matches!(umeyama_align(&line, &line, true), Err(Error::AlignmentDegenerate(_))));
}

#[test]
fn umeyama_never_returns_a_reflection() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let src = random_points(&mut rng, 8);
        // Mirror the cloud and add noise: the best orthogonal fit is a reflection.
        let dst: Vec<Vec3> = src
            .iter()
            .map(|p| Vec3::new(-p.x, p.y, p.z) + Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1)))
            .collect();
        let s = umeyama_align(&src, &dst, true).unwrap();
        assert!((s.rigid.matrix().determinant() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn look_at_points_camera_at_target() {
    let eye = Vec3::new(0.3, -0.2, -1.0);
    let target = Vec3::new(0.1, 0.4, 3.0);
    let pose = Rigid::look_at(eye, target, Vec3::y());
    let q = pose.apply(&target);
    assert!(q.x.abs() < 1e-12 && q.y.abs() < 1e-12 && q.z > 0.0);
    assert!((pose.center() - eye).norm() < 1e-12);
}

proptest! {
    #[test]
    fn stored_pose_round_trips_bit_exactly(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, t in -5.0f64..5.0) {
        prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
        let r = Rigid::new([w, x, y, z], Vec3::new(t, -t, 0.5 * t));
        let json = serde_json::to_string(&r).unwrap();
        let back: Rigid = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, r);
    }
}
