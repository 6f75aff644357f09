use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdpm::align::{
    build_windows, load_depth, load_windows_dir, optimize, overlap_residual, read_tum, save_depth,
    write_tum, AlignOptions, WindowPrediction,
};
use vdpm::error::Error;
use vdpm::eval::{pose_metrics, OraclePredictor, Predictor};
use vdpm::geometry::{Rigid, Similarity, Vec3};
use vdpm::scenegen::{GeneratorConfig, Sequence};

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        width: 16,
        height: 16,
        background_points: 600,
        points_per_object: [100, 200],
        ..GeneratorConfig::default()
    }
}

/// Oracle windows, each in the frame of its own first camera.
fn oracle_windows(seq: &Sequence, ranges: &[(usize, usize)]) -> Vec<WindowPrediction> {
    ranges
        .iter()
        .map(|&(a, b)| {
            let frames: Vec<usize> = (a..b).collect();
            let snippet = seq.snippet(&frames).unwrap();
            let p = OraclePredictor.predict(&snippet, 0).unwrap();
            WindowPrediction::from_prediction(&p, a, snippet.timestamps.clone()).unwrap()
        })
        .collect()
}

/// Oracle windows cut from one prediction, so all share the frame of camera `first`.
fn shared_windows(seq: &Sequence, first: usize, ranges: &[(usize, usize)]) -> Vec<WindowPrediction> {
    let end = ranges.iter().map(|r| r.1).max().unwrap();
    let frames: Vec<usize> = (first..end).collect();
    let snippet = seq.snippet(&frames).unwrap();
    let full = WindowPrediction::from_prediction(&OraclePredictor.predict(&snippet, 0).unwrap(), first, snippet.timestamps.clone()).unwrap();
    ranges
        .iter()
        .map(|&(a, b)| {
            let (la, lb) = (a - first, b - first);
            WindowPrediction::new(
                a,
                full.timestamps[la..lb].to_vec(),
                full.points[la..lb].to_vec(),
                full.cameras[la..lb].to_vec(),
            )
            .unwrap()
        })
        .collect()
}

fn gt_trajectory(seq: &Sequence, len: usize) -> Vec<Rigid> {
    let frames: Vec<usize> = (0..len).collect();
    let s = seq.snippet(&frames).unwrap();
    let inv0 = s.cameras[0].pose.inverse();
    s.cameras.iter().map(|c| c.pose.compose(&inv0)).collect()
}

fn perturbation() -> Similarity {
    let rot = UnitQuaternion::from_scaled_axis(Vec3::new(0.2, -0.4, 0.25));
    Similarity::new(1.7, Rigid::from_rotation(rot, Vec3::new(0.4, -0.3, 1.1))).unwrap()
}

fn add_noise(w: &WindowPrediction, std: f64, seed: u64) -> WindowPrediction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = w.clone();
    for m in out.points.iter_mut() {
        for k in 0..m.len() {
            m.points[k] += Vec3::new(rng.random_range(-std..std), rng.random_range(-std..std), rng.random_range(-std..std));
            m.confidence[k] = rng.random_range(1.0..3.0);
        }
    }
    out
}

#[test]
fn window_enumeration() {
    assert_eq!(build_windows(10, 5, 2).unwrap(), vec![(0, 5), (2, 7), (4, 9), (5, 10)]);
    assert_eq!(build_windows(10, 10, 3).unwrap(), vec![(0, 10)]);
    assert_eq!(build_windows(9, 5, 2).unwrap(), vec![(0, 5), (2, 7), (4, 9)]);
    assert!(matches!(build_windows(10, 5, 5), Err(Error::NoOverlap(_))));
    assert!(build_windows(4, 5, 2).is_err());
    assert!(build_windows(10, 1, 1).is_err());
    for (l, w, s) in [(23, 7, 3), (40, 8, 5), (12, 2, 1)] {
        let r = build_windows(l, w, s).unwrap();
        assert_eq!(r.last().unwrap().1, l);
        assert!(r.windows(2).all(|p| p[1].0 < p[0].1 && p[1].0 > p[0].0));
    }
}

#[test]
fn residual_identities() {
    let seq = Sequence::generate(21, &small_generator()).unwrap();
    let w = shared_windows(&seq, 0, &[(0, 6), (3, 9)]);
    let opts = AlignOptions::default();
    let id = Similarity::identity();
    assert_eq!(overlap_residual(&w[0], &w[0], &id, &id, &opts).unwrap(), 0.0);
    assert!(overlap_residual(&w[0], &w[1], &id, &id, &opts).unwrap() < 1e-20);

    let g = perturbation();
    let moved = w[1].transformed(&g);
    assert!(overlap_residual(&w[0], &moved, &id, &id, &opts).unwrap() > 1e-3);
    assert!(overlap_residual(&w[0], &moved, &id, &g.inverse(), &opts).unwrap() < 1e-20);

    let noisy = add_noise(&moved, 0.05, 3);
    let s = Similarity::new(0.8, Rigid::translation(Vec3::new(0.1, 0.0, 0.0))).unwrap();
    let ab = overlap_residual(&w[0], &noisy, &s, &g.inverse(), &opts).unwrap();
    let ba = overlap_residual(&noisy, &w[0], &g.inverse(), &s, &opts).unwrap();
    assert!((ab - ba).abs() <= 1e-15 * ab.abs().max(1.0));

    let apart = shared_windows(&seq, 0, &[(0, 3), (4, 8)]);
    assert!(matches!(overlap_residual(&apart[0], &apart[1], &id, &id, &opts), Err(Error::Contract(_))));
    assert!(matches!(optimize(&apart, &opts), Err(Error::NoOverlap(_))));
}

#[test]
fn single_window_passes_through() {
    let seq = Sequence::generate(22, &small_generator()).unwrap();
    let w = oracle_windows(&seq, &[(2, 7)]);
    let r = optimize(&w, &AlignOptions::default()).unwrap();
    assert_eq!(r.transforms, vec![Similarity::identity()]);
    for (a, b) in r.trajectory.iter().zip(&w[0].cameras) {
        assert!(a.angle_to(b) < 1e-12 && (a.translation - b.translation).norm() < 1e-12);
    }
    assert_eq!(r.points.len(), 5);
    for (m, src) in r.points.iter().zip(&w[0].points) {
        assert_eq!(m.valid, src.valid);
        for (k, _) in src.valid_points() {
            assert!((m.points[k] - src.points[k]).norm() < 1e-12);
        }
    }
    assert_eq!(r.residual, 0.0);
}

#[test]
fn recovers_known_similarity_between_two_windows() {
    let seq = Sequence::generate(23, &small_generator()).unwrap();
    let w = shared_windows(&seq, 0, &[(0, 6), (3, 10)]);
    let g = perturbation();
    let inputs = vec![w[0].clone(), w[1].transformed(&g)];
    let r = optimize(&inputs, &AlignOptions::default()).unwrap();
    let want = g.inverse();
    let got = r.transforms[1];
    assert!(got.rigid.angle_to(&want.rigid) < 1e-3);
    assert!((got.scale / want.scale - 1.0).abs() < 1e-3);
    assert!((got.rigid.translation - want.rigid.translation).norm() < 1e-3);
    assert!(r.history.windows(2).all(|h| h[1] <= h[0]));
}

#[test]
fn five_noiseless_windows_fuse_to_ground_truth_trajectory() {
    let seq = Sequence::generate(24, &small_generator()).unwrap();
    let ranges = build_windows(16, 6, 3).unwrap();
    assert_eq!(ranges.len(), 5);
    let w = oracle_windows(&seq, &ranges);
    let r = optimize(&w, &AlignOptions::default()).unwrap();
    assert!(r.history[0] < 1e-8, "chained residual {}", r.history[0]);
    assert!(r.history.windows(2).all(|h| h[1] <= h[0]));
    let gt = gt_trajectory(&seq, 16);
    assert_eq!(r.trajectory.len(), 16);
    let m = pose_metrics(&r.trajectory, &gt).unwrap();
    assert!(m.ate < 1e-4, "{m:?}");
    for (k, s) in r.transforms.iter().enumerate() {
        assert!((s.scale - 1.0).abs() < 1e-5, "window {k} scale {}", s.scale);
    }
    for d in &r.depth {
        assert!(d.valid.iter().any(|&v| v));
    }
}

#[test]
fn common_similarity_of_inputs_moves_result_by_that_similarity() {
    let seq = Sequence::generate(25, &small_generator()).unwrap();
    let w = oracle_windows(&seq, &build_windows(12, 5, 3).unwrap());
    let g = perturbation();
    let moved: Vec<WindowPrediction> = w.iter().map(|x| x.transformed(&g)).collect();
    let opts = AlignOptions::default();
    let a = optimize(&w, &opts).unwrap();
    let b = optimize(&moved, &opts).unwrap();
    assert!(pose_metrics(&b.trajectory, &a.trajectory).unwrap().ate < 1e-6);
}

#[test]
fn descent_lowers_residual_of_noisy_windows() {
    let seq = Sequence::generate(26, &small_generator()).unwrap();
    let ranges = build_windows(12, 5, 2).unwrap();
    let w: Vec<WindowPrediction> = oracle_windows(&seq, &ranges)
        .iter()
        .enumerate()
        .map(|(k, x)| add_noise(x, 0.08, k as u64))
        .collect();
    let r = optimize(&w, &AlignOptions::default()).unwrap();
    assert!(r.history.len() > 2, "{:?}", r.history);
    assert!(r.history.windows(2).all(|h| h[1] <= h[0]));
    assert!(r.residual < r.history[0]);
    assert!(r.residual.is_finite());
    assert!(r.transforms.iter().all(|s| s.scale > 0.0));

    let refined = optimize(
        &w,
        &AlignOptions {
            refine_depth_scale: true,
            ..AlignOptions::default()
        },
    )
    .unwrap();
    assert!(refined.history.windows(2).all(|h| h[1] <= h[0]));
    assert!(refined.depth_scales[0].iter().all(|&d| d == 1.0));
}

#[test]
fn window_files_round_trip() {
    let seq = Sequence::generate(27, &small_generator()).unwrap();
    let w = oracle_windows(&seq, &[(3, 8), (0, 5)]);
    let w0 = add_noise(&w[0], 0.01, 1);
    let dir = tempfile::tempdir().unwrap();
    w0.save(&dir.path().join("b.vdpw")).unwrap();
    w[1].save(&dir.path().join("a.vdpw")).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let back = WindowPrediction::load(&dir.path().join("b.vdpw")).unwrap();
    assert_eq!(back, w0);
    let all = load_windows_dir(dir.path()).unwrap();
    assert_eq!(all.iter().map(|x| x.start).collect::<Vec<_>>(), vec![0, 3]);

    let bad = dir.path().join("bad.vdpw");
    std::fs::write(&bad, b"VDPSxxxx").unwrap();
    assert!(matches!(WindowPrediction::load(&bad), Err(Error::Format { .. })));
    let empty = tempfile::tempdir().unwrap();
    assert!(load_windows_dir(empty.path()).is_err());
}

#[test]
fn trajectory_and_depth_outputs_round_trip() {
    let seq = Sequence::generate(28, &small_generator()).unwrap();
    let w = oracle_windows(&seq, &[(0, 5), (3, 8)]);
    let r = optimize(&w, &AlignOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path()).unwrap();
    let (ts, poses) = read_tum(&dir.path().join("trajectory.txt")).unwrap();
    assert_eq!(ts.len(), 8);
    for (a, b) in poses.iter().zip(&r.trajectory) {
        assert!(a.angle_to(b) < 1e-7 && (a.translation - b.translation).norm() < 1e-7);
    }
    let (dts, depth) = load_depth(&dir.path().join("depth.vdpd")).unwrap();
    assert_eq!(dts, r.timestamps);
    assert_eq!(depth, r.depth);
    assert!(dir.path().join("transforms.json").exists());

    let p = dir.path().join("x.txt");
    write_tum(&p, &[0.5], &[Rigid::translation(Vec3::new(1.0, 2.0, 3.0))]).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let fields: Vec<f64> = text.split_whitespace().map(|x| x.parse().unwrap()).collect();
    assert_eq!(fields.len(), 8);
    assert_eq!(&fields[1..4], &[-1.0, -2.0, -3.0]);
    assert_eq!(fields[7], 1.0);
    assert!(save_depth(&p, &[0.0, 1.0], &r.depth[..1]).is_err());
}
