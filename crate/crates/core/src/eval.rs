//! Evaluation protocols: 2-view and tracking end-point error, video depth
//! metrics, camera trajectory metrics and the variant ablation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{build_windows, optimize, AlignOptions, WindowPrediction};
use crate::dpm::PointMap;
use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, DepthMap, Rigid, Similarity, Vec3};
use crate::loss::{relative_poses, PoseTarget};
use crate::loss::LossConfig;
use crate::model::{Model, ModelConfig, ModelInput, Prediction, Variant};
use crate::par;
use crate::scenegen::{gt_pointmap, GeneratorConfig, Sequence, Snippet};
use crate::train::{train_loop, TrainConfig, TrainOptions};

const TWO_VIEW_STREAM: u64 = 0x2000;
const TRACK_STREAM: u64 = 0x3000;
const DEPTH_POSE_STREAM: u64 = 0x5000;

/// End-point error after scaling each map to unit mean norm over the pixels
/// valid in both.
pub fn epe(pred: &PointMap, gt: &PointMap) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::RepresentationMismatch(format!(
            "epe of {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let joint: Vec<usize> = (0..gt.len()).filter(|&k| pred.valid[k] && gt.valid[k]).collect();
    if joint.is_empty() {
        return Err(Error::UndefinedMetric("no jointly valid pixels".into()));
    }
    let n = joint.len() as f64;
    let sp = joint.iter().map(|&k| pred.points[k].norm()).sum::<f64>() / n;
    let sg = joint.iter().map(|&k| gt.points[k].norm()).sum::<f64>() / n;
    if !(sp > 0.0) || !(sg > 0.0) {
        return Err(Error::UndefinedMetric("zero mean norm".into()));
    }
    Ok(joint
        .iter()
        .map(|&k| (pred.points[k] / sp - gt.points[k] / sg).norm())
        .sum::<f64>()
        / n)
}

/// One network evaluation: `𝒫`, `𝒬` at reference index `reference`, and
/// cameras relative to the anchor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmPrediction {
    pub reference: usize,
    pub time_variant: Vec<PointMap>,
    pub time_invariant: Vec<PointMap>,
    pub cameras: Vec<PoseTarget>,
}

impl DpmPrediction {
    fn from_model(p: &Prediction) -> Self {
        let poses = p.camera.poses();
        let fovs = p.camera.fovs();
        Self {
            reference: p.reference,
            time_variant: p.time_variant(),
            time_invariant: p.time_invariant(),
            cameras: poses
                .iter()
                .zip(fovs)
                .map(|(r, fov)| PoseTarget {
                    translation: r.translation,
                    quat: r.quat(),
                    fov,
                })
                .collect(),
        }
    }
}

/// Anything that maps a snippet to dynamic point maps.
pub trait Predictor: Sync {
    fn predict(&self, snippet: &Snippet, j: usize) -> Result<DpmPrediction>;

    /// `𝒬` for every listed reference index.
    fn predict_times(&self, snippet: &Snippet, js: &[usize]) -> Result<Vec<Vec<PointMap>>> {
        js.iter()
            .map(|&j| Ok(self.predict(snippet, j)?.time_invariant))
            .collect()
    }
}

impl Predictor for Model {
    fn predict(&self, snippet: &Snippet, j: usize) -> Result<DpmPrediction> {
        let input = ModelInput::from_snippet(snippet)?;
        Ok(DpmPrediction::from_model(&self.full_forward(&input, j)?.0))
    }

    /// One backbone pass, then one decoder pass per reference index.
    fn predict_times(&self, snippet: &Snippet, js: &[usize]) -> Result<Vec<Vec<PointMap>>> {
        let input = ModelInput::from_snippet(snippet)?;
        let (_, cache) = self.full_forward(&input, 0)?;
        js.iter()
            .map(|&j| Ok(self.decode_at_time(&cache, j)?.time_invariant()))
            .collect()
    }
}

/// Returns ground truth, regenerated from the snippet's source scene.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, snippet: &Snippet, j: usize) -> Result<DpmPrediction> {
        let seq = Sequence::of_snippet(snippet)?;
        let n = snippet.len();
        let q = (0..n)
            .map(|i| gt_pointmap(&seq.scene, snippet, i, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(DpmPrediction {
            reference: j,
            time_variant: snippet.gt_time_variant.clone(),
            time_invariant: q,
            cameras: relative_poses(&snippet.cameras, crate::loss::camera_anchor(n)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpeEntry {
    pub source: usize,
    pub time: usize,
    pub epe: f64,
}

impl EpeEntry {
    pub fn label(&self) -> String {
        format!("P_{}(t_{})", self.source, self.time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpeReport {
    pub margin: usize,
    pub snippets: usize,
    /// `P_0(t_0)`, `P_0(t_1)`, `P_1(t_0)`, `P_1(t_1)`.
    pub entries: Vec<EpeEntry>,
}

impl EpeReport {
    pub fn get(&self, source: usize, time: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.source == source && e.time == time)
            .map(|e| e.epe)
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().map(|e| e.epe).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let headers: Vec<String> = self.entries.iter().map(EpeEntry::label).collect();
        let values: Vec<String> = self.entries.iter().map(|e| format!("{:.4}", e.epe)).collect();
        table(
            &[&["margin".to_string()][..], &headers].concat(),
            &[[&[self.margin.to_string()][..], &values].concat()],
        )
    }
}

/// Aligned plain-text table.
pub fn table(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(headers);
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    for row in rows {
        out.push('\n');
        out.push_str(&line(row));
    }
    out.push('\n');
    out
}

fn trial_rng(seed: u64, stream: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + trial as u64);
    rng
}

/// The scene and frame indices of one evaluation trial: `frames` frames,
/// `spacing` apart, at a random start.
pub fn trial_snippet(
    gen: &GeneratorConfig,
    seed: u64,
    stream: u64,
    trial: usize,
    frames: usize,
    spacing: usize,
) -> Result<(Sequence, Snippet)> {
    let span = (frames - 1) * spacing + 1;
    if span > gen.max_frames {
        return Err(Error::Config(format!(
            "{frames} frames spaced {spacing} need {span} of {} sequence frames",
            gen.max_frames
        )));
    }
    let mut rng = trial_rng(seed, stream, trial);
    let seq = Sequence::generate(rng.random(), gen)?;
    let start = rng.random_range(0..=gen.max_frames - span);
    let idx: Vec<usize> = (0..frames).map(|k| start + k * spacing).collect();
    let snippet = seq.snippet(&idx)?;
    Ok((seq, snippet))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Two views `margin` frames apart; the four maps `P_a(t_b)`, scored per
/// trial and averaged.
pub fn two_view_protocol(
    predictor: &dyn Predictor,
    gen: &GeneratorConfig,
    margin: usize,
    trials: usize,
    seed: u64,
) -> Result<EpeReport> {
    if trials == 0 || margin == 0 {
        return Err(Error::InvalidCount("two-view protocol needs trials and margin > 0".into()));
    }
    let per_trial = par::map_range(trials, |k| -> Result<[f64; 4]> {
        let (seq, snippet) = trial_snippet(gen, seed, TWO_VIEW_STREAM, k, 2, margin)?;
        let at0 = predictor.predict(&snippet, 0)?;
        let at1 = predictor.predict(&snippet, 1)?;
        let gt = |i, j| gt_pointmap(&seq.scene, &snippet, i, j);
        Ok([
            epe(&at0.time_variant[0], &snippet.gt_time_variant[0])?,
            epe(&at1.time_invariant[0], &gt(0, 1)?)?,
            epe(&at0.time_invariant[1], &gt(1, 0)?)?,
            epe(&at1.time_variant[1], &snippet.gt_time_variant[1])?,
        ])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let keys = [(0, 0), (0, 1), (1, 0), (1, 1)];
    Ok(EpeReport {
        margin,
        snippets: trials,
        entries: keys
            .iter()
            .enumerate()
            .map(|(c, &(source, time))| EpeEntry {
                source,
                time,
                epe: mean(per_trial.iter().map(|t| t[c])),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub frames: usize,
    pub spacing: usize,
    pub snippets: usize,
    /// Mean EPE of `P_0(t_j)` over trials, per `j`.
    pub per_time: Vec<f64>,
    pub epe: f64,
    /// Distinct maps decoded per snippet.
    pub distinct_maps: usize,
}

impl TrackingReport {
    pub fn to_table(&self) -> String {
        let mut headers = vec!["frames".to_string(), "spacing".into(), "EPE".into()];
        let mut row = vec![
            self.frames.to_string(),
            self.spacing.to_string(),
            format!("{:.4}", self.epe),
        ];
        for (j, e) in self.per_time.iter().enumerate() {
            headers.push(format!("P_0(t_{j})"));
            row.push(format!("{e:.4}"));
        }
        table(&headers, &[row])
    }
}

/// One backbone pass per snippet, then `P_0(t_j)` decoded for every `j`.
pub fn tracking_protocol(
    predictor: &dyn Predictor,
    gen: &GeneratorConfig,
    frames: usize,
    spacing: usize,
    trials: usize,
    seed: u64,
) -> Result<TrackingReport> {
    if trials == 0 || frames == 0 || spacing == 0 {
        return Err(Error::InvalidCount("tracking protocol needs trials, frames, spacing > 0".into()));
    }
    let js: Vec<usize> = (0..frames).collect();
    let per_trial = par::map_range(trials, |k| -> Result<Vec<f64>> {
        let (seq, snippet) = trial_snippet(gen, seed, TRACK_STREAM, k, frames, spacing)?;
        let decoded = predictor.predict_times(&snippet, &js)?;
        js.iter()
            .map(|&j| epe(&decoded[j][0], &gt_pointmap(&seq.scene, &snippet, 0, j)?))
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let per_time: Vec<f64> = (0..frames).map(|j| mean(per_trial.iter().map(|t| t[j]))).collect();
    Ok(TrackingReport {
        frames,
        spacing,
        snippets: trials,
        epe: mean(per_time.iter().copied()),
        per_time,
        distinct_maps: 2 * frames - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_1_25: f64,
    /// Median scale applied to the prediction.
    pub scale: f64,
}

/// Depth `z` of each valid point in the camera `cam_from_ref`.
pub fn depth_from_pointmap(map: &PointMap, cam_from_ref: &Rigid) -> DepthMap {
    let mut depth = vec![0.0; map.len()];
    let mut valid = vec![false; map.len()];
    for (k, p) in map.valid_points() {
        let z = cam_from_ref.apply(p).z;
        if z > 0.0 && z.is_finite() {
            depth[k] = z;
            valid[k] = true;
        }
    }
    DepthMap {
        width: map.width,
        height: map.height,
        depth,
        valid,
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// AbsRel and `δ < 1.25` after one median scale over the whole sequence.
pub fn depth_metrics(pred: &[DepthMap], gt: &[DepthMap]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("{} vs {} depth maps", pred.len(), gt.len())));
    }
    let mut pairs = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        if p.depth.len() != g.depth.len() {
            return Err(Error::RepresentationMismatch("depth map sizes differ".into()));
        }
        for k in 0..g.depth.len() {
            if p.valid[k] && g.valid[k] && p.depth[k] > 0.0 && g.depth[k] > 0.0 {
                pairs.push((p.depth[k], g.depth[k]));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no valid depth pixels".into()));
    }
    let mut ratios: Vec<f64> = pairs.iter().map(|(p, g)| g / p).collect();
    let s = median(&mut ratios);
    let n = pairs.len() as f64;
    let abs_rel = pairs.iter().map(|(p, g)| (s * p - g).abs() / g).sum::<f64>() / n;
    let inliers = pairs
        .iter()
        .filter(|(p, g)| (s * p / g).max(g / (s * p)) < 1.25)
        .count();
    Ok(DepthMetrics {
        abs_rel,
        delta_1_25: inliers as f64 / n,
        scale: s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub ate: f64,
    pub rpe_trans: f64,
    /// Degrees.
    pub rpe_rot: f64,
}

/// World-to-camera pose after a similarity change of world coordinates.
pub fn transform_pose(pose: &Rigid, s: &Similarity) -> Rigid {
    let center = s.apply(&pose.center());
    let rot = pose.rotation() * s.rigid.rotation().inverse();
    Rigid::from_rotation(rot, -(rot * center))
}

/// Similarity mapping `src` onto `dst`; sets with fewer than 3 points or all
/// on one line are aligned along their principal direction.
pub fn align_points(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity> {
    match umeyama_align(src, dst, true) {
        Ok(s) => Ok(s),
        Err(Error::AlignmentDegenerate(_)) => align_collinear(src, dst),
        Err(e) => Err(e),
    }
}

fn align_collinear(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity> {
    let n = src.len().max(1) as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let spread = |pts: &[Vec3], m: &Vec3| {
        (pts.iter().map(|p| (p - m).norm_squared()).sum::<f64>() / n).sqrt()
    };
    let (ss, sd) = (spread(src, &ms), spread(dst, &md));
    if ss == 0.0 || sd == 0.0 {
        return Ok(Similarity::from(Rigid::translation(md - ms)));
    }
    let far = (0..src.len())
        .max_by(|&a, &b| (src[a] - ms).norm().total_cmp(&(src[b] - ms).norm()))
        .unwrap_or(0);
    let (vs, vd) = (src[far] - ms, dst[far] - md);
    let cross = vs.cross(&vd);
    let angle = cross.norm().atan2(vs.dot(&vd));
    let rot = if cross.norm() > 0.0 {
        nalgebra::UnitQuaternion::from_scaled_axis(cross.normalize() * angle)
    } else if angle > 0.0 {
        nalgebra::UnitQuaternion::from_axis_angle(&any_perpendicular(&vs), std::f64::consts::PI)
    } else {
        nalgebra::UnitQuaternion::identity()
    };
    let scale = sd / ss;
    let t = md - scale * (rot * ms);
    Similarity::new(scale, Rigid::from_rotation(rot, t))
}

fn any_perpendicular(v: &Vec3) -> nalgebra::Unit<Vec3> {
    let a = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    nalgebra::Unit::new_normalize(v.cross(&a))
}

/// ATE after similarity alignment of camera centers, and RMS consecutive-frame
/// relative pose errors. Poses are world-to-camera.
pub fn pose_metrics(pred: &[Rigid], gt: &[Rigid]) -> Result<PoseMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("{} predicted vs {} gt poses", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Contract("pose metrics need at least 2 poses".into()));
    }
    let pc: Vec<Vec3> = pred.iter().map(Rigid::center).collect();
    let gc: Vec<Vec3> = gt.iter().map(Rigid::center).collect();
    let s = align_points(&pc, &gc)?;
    let n = pred.len() as f64;
    let ate = (pc
        .iter()
        .zip(&gc)
        .map(|(p, g)| (s.apply(p) - g).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    let (mut st, mut sr) = (0.0, 0.0);
    for k in 0..pred.len() - 1 {
        // motion from camera k+1 to camera k
        let rp = pred[k].compose(&pred[k + 1].inverse());
        let rg = gt[k].compose(&gt[k + 1].inverse());
        let e = rg.inverse().compose(&rp);
        st += e.translation.norm_squared();
        sr += e.angle_to(&Rigid::identity()).powi(2);
    }
    let m = (pred.len() - 1) as f64;
    Ok(PoseMetrics {
        ate,
        rpe_trans: (st / m).sqrt(),
        rpe_rot: (sr / m).sqrt().to_degrees(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthPoseOptions {
    pub seq_len: usize,
    pub window: usize,
    pub stride: usize,
    pub trials: usize,
    pub seed: u64,
    pub align: AlignOptions,
}

impl Default for DepthPoseOptions {
    fn default() -> Self {
        Self {
            seq_len: 16,
            window: 5,
            stride: 3,
            trials: 8,
            seed: 0,
            align: AlignOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPoseReport {
    pub seq_len: usize,
    pub window: usize,
    pub stride: usize,
    pub sequences: usize,
    pub depth: DepthMetrics,
    pub pose: PoseMetrics,
    /// Mean final alignment residual.
    pub residual: f64,
}

impl DepthPoseReport {
    pub fn to_table(&self) -> String {
        let headers: Vec<String> = ["frames", "window", "stride", "Abs Rel", "δ<1.25", "ATE", "RPE trans", "RPE rot"]
            .iter()
            .map(|h| h.to_string())
            .collect();
        let row = vec![
            self.seq_len.to_string(),
            self.window.to_string(),
            self.stride.to_string(),
            format!("{:.4}", self.depth.abs_rel),
            format!("{:.4}", self.depth.delta_1_25),
            format!("{:.4}", self.pose.ate),
            format!("{:.4}", self.pose.rpe_trans),
            format!("{:.4}", self.pose.rpe_rot),
        ];
        table(&headers, &[row])
    }
}

/// Ground-truth per-frame depth and world-to-camera poses with the first
/// camera as world frame.
pub fn gt_depth_and_poses(snippet: &Snippet) -> (Vec<DepthMap>, Vec<Rigid>) {
    let first = snippet.cameras[0].pose.inverse();
    let poses: Vec<Rigid> = snippet.cameras.iter().map(|c| c.pose.compose(&first)).collect();
    let depth = snippet
        .gt_time_variant
        .iter()
        .zip(&poses)
        .map(|(m, p)| depth_from_pointmap(m, p))
        .collect();
    (depth, poses)
}

/// Sliding windows over a long sequence, fused by alignment, scored for
/// depth and camera trajectory.
///
/// The predicted trajectory is brought into the ground-truth frame by the
/// similarity found for ATE before the relative errors are taken, so all
/// three pose errors are in scene units.
pub fn depth_pose_protocol(
    predictor: &dyn Predictor,
    gen: &GeneratorConfig,
    opts: &DepthPoseOptions,
) -> Result<DepthPoseReport> {
    if opts.trials == 0 {
        return Err(Error::InvalidCount("depth/pose protocol needs trials > 0".into()));
    }
    opts.align.validate()?;
    let ranges = build_windows(opts.seq_len, opts.window, opts.stride)?;
    let per_trial = par::map_range(opts.trials, |k| -> Result<(DepthMetrics, PoseMetrics, f64)> {
        let (seq, snippet) = trial_snippet(gen, opts.seed, DEPTH_POSE_STREAM, k, opts.seq_len, 1)?;
        let frames = &snippet.source.as_ref().expect("generated snippet").frames;
        let windows = ranges
            .iter()
            .map(|&(a, b)| {
                let sub = seq.snippet(&frames[a..b])?;
                WindowPrediction::from_prediction(&predictor.predict(&sub, 0)?, a, sub.timestamps.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = optimize(&windows, &opts.align)?;
        let (gt_depth, gt_poses) = gt_depth_and_poses(&snippet);
        let depth = depth_metrics(&fused.depth, &gt_depth)?;
        let pc: Vec<Vec3> = fused.trajectory.iter().map(Rigid::center).collect();
        let gc: Vec<Vec3> = gt_poses.iter().map(Rigid::center).collect();
        let s = align_points(&pc, &gc)?;
        let aligned: Vec<Rigid> = fused.trajectory.iter().map(|p| transform_pose(p, &s)).collect();
        let pose = pose_metrics(&aligned, &gt_poses)?;
        Ok((depth, pose, fused.residual))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(DepthPoseReport {
        seq_len: opts.seq_len,
        window: opts.window,
        stride: opts.stride,
        sequences: opts.trials,
        depth: DepthMetrics {
            abs_rel: mean(per_trial.iter().map(|t| t.0.abs_rel)),
            delta_1_25: mean(per_trial.iter().map(|t| t.0.delta_1_25)),
            scale: mean(per_trial.iter().map(|t| t.0.scale)),
        },
        pose: PoseMetrics {
            ate: mean(per_trial.iter().map(|t| t.1.ate)),
            rpe_trans: mean(per_trial.iter().map(|t| t.1.rpe_trans)),
            rpe_rot: mean(per_trial.iter().map(|t| t.1.rpe_rot)),
        },
        residual: mean(per_trial.iter().map(|t| t.2)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub p0_t1: f64,
    pub p1_t0: f64,
    pub final_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: usize,
    pub margin: usize,
    pub snippets: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let headers: Vec<String> = ["variant", "P_0(t_1)", "P_1(t_0)"].iter().map(|h| h.to_string()).collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.variant.label().to_string(), format!("{:.4}", r.p0_t1), format!("{:.4}", r.p1_t0)])
            .collect();
        table(&headers, &rows)
    }

    /// Variant labels from best to worst mean of the two columns.
    pub fn ordering(&self) -> Vec<&'static str> {
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| (a.p0_t1 + a.p1_t0).total_cmp(&(b.p0_t1 + b.p1_t0)));
        rows.iter().map(|r| r.variant.label()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationOptions {
    pub variants: Vec<Variant>,
    pub steps: usize,
    pub margin: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            steps: 500,
            margin: 8,
            trials: 50,
            seed: 0,
        }
    }
}

/// Trains every variant with the same seed and budget, then scores the two
/// cross-time maps of the 2-view protocol.
pub fn ablation_harness(
    base: &ModelConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    gen: &GeneratorConfig,
    opts: &AblationOptions,
    out_dir: &Path,
) -> Result<AblationReport> {
    if opts.variants.is_empty() {
        return Err(Error::EmptySet("no ablation variants".into()));
    }
    let mut cfg = train.clone();
    cfg.total_steps = opts.steps;
    cfg.seed = opts.seed;
    cfg.warmup_steps = cfg.warmup_steps.min(opts.steps / 5);
    cfg.eval_every = cfg.eval_every.min(opts.steps);
    cfg.checkpoint_every = cfg.checkpoint_every.min(opts.steps);
    let mut rows = Vec::new();
    for &variant in &opts.variants {
        let model = Model::new(variant.apply(base), opts.seed)?;
        let run = TrainOptions::new(out_dir.join(variant.slug()));
        let rep = train_loop(model, &cfg, loss, gen, &run)?;
        let r = two_view_protocol(&rep.model, gen, opts.margin, opts.trials, opts.seed)?;
        rows.push(AblationRow {
            variant,
            p0_t1: r.get(0, 1).unwrap_or(f64::NAN),
            p1_t0: r.get(1, 0).unwrap_or(f64::NAN),
            final_val_loss: rep.records.iter().rev().find_map(|r| r.val_loss),
        });
    }
    Ok(AblationReport {
        steps: opts.steps,
        margin: opts.margin,
        snippets: opts.trials,
        rows,
    })
}
