//! Confidence-calibrated point map loss, pose regression loss and the
//! per-snippet training targets.

use serde::{Deserialize, Serialize};
use vdpm_tensor::{Float, Tensor, Var};

use crate::dpm::{mean_valid_norm, PointMap};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::model::{CameraOutput, Forward};
use crate::scenegen::{gt_pointmap, Camera, SceneSpec, Snippet};

/// Added under the square root of point distances so the gradient stays
/// finite at zero error.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the `-log c` confidence regularizer.
    pub alpha: f64,
    pub pose_weight: f64,
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            pose_weight: 1.0,
            huber_delta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.huber_delta > 0.0) || !(self.pose_weight >= 0.0) {
            return Err(Error::Config("huber_delta must be > 0 and pose_weight >= 0".into()));
        }
        Ok(())
    }
}

/// Camera parameters as regressed by the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTarget {
    pub translation: Vec3,
    /// `(w, x, y, z)`, unit norm.
    pub quat: [f64; 4],
    /// Vertical field of view in radians.
    pub fov: f64,
}

/// Frame whose camera is the pose-regression reference.
pub fn camera_anchor(n: usize) -> usize {
    n.saturating_sub(1) / 2
}

/// Poses of every camera relative to camera `anchor` (which gets the identity).
pub fn relative_poses(cameras: &[Camera], anchor: usize) -> Vec<PoseTarget> {
    let inv = cameras[anchor].pose.inverse();
    cameras
        .iter()
        .map(|c| {
            let rel = c.pose.compose(&inv);
            PoseTarget {
                translation: rel.translation,
                quat: rel.quat(),
                fov: c.intrinsics.vertical_fov(),
            }
        })
        .collect()
}

/// Normalized supervision for one snippet and reference index `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetTarget {
    pub reference: usize,
    /// `P_i(t_i)`, divided by `scale`.
    pub time_variant: Vec<PointMap>,
    /// `P_i(t_j)`, divided by `scale`; maps may be entirely invalid when unannotated.
    pub time_invariant: Vec<PointMap>,
    /// Relative to [`camera_anchor`], translations divided by `scale`.
    pub poses: Vec<PoseTarget>,
    /// Mean valid-point norm of the raw `𝒫` targets.
    pub scale: f64,
}

impl SnippetTarget {
    /// Normalizes raw targets by the mean valid-point norm of `time_variant`.
    pub fn new(
        time_variant: Vec<PointMap>,
        time_invariant: Option<Vec<PointMap>>,
        cameras: &[Camera],
        reference: usize,
    ) -> Result<Self> {
        let n = time_variant.len();
        if n == 0 || cameras.len() != n || reference >= n {
            return Err(Error::Contract(format!(
                "{n} maps, {} cameras, reference {reference}",
                cameras.len()
            )));
        }
        let (w, h) = (time_variant[0].width, time_variant[0].height);
        let time_invariant = time_invariant.unwrap_or_else(|| {
            (0..n)
                .map(|i| PointMap::empty(w, h).with_indices(i, reference))
                .collect()
        });
        if time_invariant.len() != n {
            return Err(Error::Contract("time-invariant target count".into()));
        }
        let scale = mean_valid_norm(&time_variant)?;
        let inv = 1.0 / scale;
        let mut poses = relative_poses(cameras, camera_anchor(n));
        for p in &mut poses {
            p.translation *= inv;
        }
        Ok(Self {
            reference,
            time_variant: time_variant.iter().map(|m| m.scaled(inv)).collect(),
            time_invariant: time_invariant.iter().map(|m| m.scaled(inv)).collect(),
            poses,
            scale,
        })
    }

    /// Full `𝒫` and `𝒬` supervision from the generating scene.
    pub fn from_scene(scene: &SceneSpec, snippet: &Snippet, reference: usize) -> Result<Self> {
        let q = (0..snippet.len())
            .map(|i| gt_pointmap(scene, snippet, i, reference))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            snippet.gt_time_variant.clone(),
            Some(q),
            &snippet.cameras,
            reference,
        )
    }

    pub fn frames(&self) -> usize {
        self.time_variant.len()
    }
}

fn check_pair(pred: &PointMap, gt: &PointMap) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::RepresentationMismatch(format!(
            "prediction {}x{} vs target {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

/// Mean over pixels valid in both maps of `c·‖pred − gt‖ − α·log c`, using the
/// prediction's confidence; `None` when no pixel is valid.
pub fn conf_pointmap_loss(pred: &PointMap, gt: &PointMap, alpha: f64) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..gt.len() {
        if gt.valid[k] && pred.valid[k] {
            let c = pred.confidence[k];
            total += c * (pred.points[k] - gt.points[k]).norm() - alpha * c.ln();
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Flips `q` onto the hemisphere of `reference`.
pub fn canonical_quat(q: [f64; 4], reference: [f64; 4]) -> [f64; 4] {
    let dot: f64 = q.iter().zip(&reference).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        q.map(|x| -x)
    } else {
        q
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Sum over frames of Huber penalties on translation, sign-canonicalized
/// quaternion and field-of-view residuals.
pub fn pose_loss(pred: &[PoseTarget], gt: &[PoseTarget], delta: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("{} predicted vs {} target poses", pred.len(), gt.len())));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let gq = canonical_quat(g.quat, p.quat);
        total += (0..3).map(|k| huber(p.translation[k] - g.translation[k], delta)).sum::<f64>();
        total += (0..4).map(|k| huber(p.quat[k] - gq[k], delta)).sum::<f64>();
        total += huber(p.fov - g.fov, delta);
    }
    Ok(total)
}

/// Mean of per-example losses.
pub fn batch_loss(example_losses: &[f64]) -> Result<f64> {
    if example_losses.is_empty() {
        return Err(Error::EmptySet("empty batch".into()));
    }
    Ok(example_losses.iter().sum::<f64>() / example_losses.len() as f64)
}

/// Targets and per-pixel weights for a stack of maps.
pub struct MapBatch<T: Float> {
    /// `[N, H, W, 3]`.
    pub points: Tensor<T>,
    /// `[N, H, W]`; zero on invalid pixels and excluded maps.
    pub weight: Tensor<T>,
    /// Included maps without a single valid pixel.
    pub empty_maps: usize,
}

impl<T: Float> MapBatch<T> {
    /// Each included map gets total weight `1 / denom`, spread evenly over its
    /// valid pixels; `exclude` drops one map.
    pub fn new(maps: &[PointMap], exclude: Option<usize>, denom: f64) -> Self {
        let n = maps.len();
        let (w, h) = (maps[0].width, maps[0].height);
        let hw = w * h;
        let mut points = Vec::with_capacity(n * hw * 3);
        let mut weight = vec![T::zero(); n * hw];
        let mut empty_maps = 0;
        for (i, m) in maps.iter().enumerate() {
            points.extend(m.points.iter().flat_map(|p| [p.x, p.y, p.z]).map(T::from_f64));
            if exclude == Some(i) {
                continue;
            }
            let count = m.valid_count();
            if count == 0 {
                empty_maps += 1;
                continue;
            }
            let wi = T::from_f64(1.0 / (count as f64 * denom));
            for (k, &v) in m.valid.iter().enumerate() {
                if v {
                    weight[i * hw + k] = wi;
                }
            }
        }
        Self {
            points: Tensor::new([n, h, w, 3], points).expect("map batch shape"),
            weight: Tensor::new([n, h, w], weight).expect("map batch shape"),
            empty_maps,
        }
    }
}

/// `Σ weight · (c·‖points − target‖ − α·log c)`.
pub fn pointmap_term<'t, T: Float>(
    points: Var<'t, T>,
    conf: Var<'t, T>,
    target: &MapBatch<T>,
    alpha: f64,
) -> Result<Var<'t, T>> {
    let tape = points.tape();
    let diff = points.sub(tape.constant(target.points.clone()))?;
    let dist = diff.mul(diff)?.sum(3)?.add_scalar(T::from_f64(DIST_EPS)).sqrt();
    let per_pixel = conf.mul(dist)?.sub(conf.log().scale(T::from_f64(alpha)))?;
    Ok(per_pixel.mul(tape.constant(target.weight.clone()))?.sum_all())
}

/// Tape version of [`pose_loss`].
pub fn pose_term<'t, T: Float>(
    cam: &CameraOutput<'t, T>,
    targets: &[PoseTarget],
    delta: f64,
) -> Result<Var<'t, T>> {
    let tape = cam.translation.tape();
    let n = targets.len();
    if cam.fov.shape() != [n] {
        return Err(Error::Contract(format!(
            "{:?} predicted poses vs {n} targets",
            cam.fov.shape()
        )));
    }
    let pq = cam.quat.value();
    let mut t = Vec::with_capacity(3 * n);
    let mut q = Vec::with_capacity(4 * n);
    let mut f = Vec::with_capacity(n);
    for (i, g) in targets.iter().enumerate() {
        let pi = &pq.data()[4 * i..4 * i + 4];
        let reference = [pi[0], pi[1], pi[2], pi[3]].map(|x| x.as_f64());
        t.extend([g.translation.x, g.translation.y, g.translation.z].map(T::from_f64));
        q.extend(canonical_quat(g.quat, reference).map(T::from_f64));
        f.push(T::from_f64(g.fov));
    }
    let d = T::from_f64(delta);
    let c = |shape: Vec<usize>, v: Vec<T>| tape.constant(Tensor::new(shape, v).expect("pose target shape"));
    let lt = cam.translation.sub(c(vec![n, 3], t))?.huber(d).sum_all();
    let lq = cam.quat.sub(c(vec![n, 4], q))?.huber(d).sum_all();
    let lf = cam.fov.sub(c(vec![n], f))?.huber(d).sum_all();
    Ok(lt.add(lq)?.add(lf)?)
}

pub struct SnippetLoss<'t, T: Float> {
    pub total: Var<'t, T>,
    pub maps: Var<'t, T>,
    pub pose: Var<'t, T>,
    /// Distinct maps that had no valid target pixel and contributed 0.
    pub empty_maps: usize,
}

/// Mean conf loss over the `2N − 1` distinct maps plus the weighted pose loss,
/// for one example.
pub fn snippet_loss<'t, T: Float>(
    out: &Forward<'t, T>,
    target: &SnippetTarget,
    cfg: &LossConfig,
) -> Result<SnippetLoss<'t, T>> {
    let n = target.frames();
    let denom = (2 * n - 1) as f64;
    let p = MapBatch::<T>::new(&target.time_variant, None, denom);
    let q = MapBatch::<T>::new(&target.time_invariant, Some(target.reference), denom);
    let tv = &out.main.time_variant;
    let ti = &out.time_invariant;
    let maps = pointmap_term(tv.points, tv.conf, &p, cfg.alpha)?.add(pointmap_term(
        ti.points,
        ti.conf,
        &q,
        cfg.alpha,
    )?)?;
    let pose = pose_term(&out.main.camera, &target.poses, cfg.huber_delta)?;
    let total = maps.add(pose.scale(T::from_f64(cfg.pose_weight)))?;
    Ok(SnippetLoss {
        total,
        maps,
        pose,
        empty_maps: p.empty_maps + q.empty_maps,
    })
}
