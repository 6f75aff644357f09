//! Synthetic dynamic scenes of rigid bodies in a static room, rendered by
//! point splatting with exact per-pixel ground truth.

use std::path::Path;

use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpm::PointMap;
use crate::error::{Error, Result};
use crate::format;
use crate::geometry::{project_point, Intrinsics, Rigid, Vec3};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Constant,
    Linear,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    pub vertical_fov_deg: f64,
    /// Inclusive range.
    pub objects: [usize; 2],
    /// Inclusive range.
    pub points_per_object: [usize; 2],
    pub object_radius: [f64; 2],
    pub background_points: usize,
    pub motions: Vec<MotionKind>,
    /// Maximum object speed, scene units per time unit.
    pub max_speed: f64,
    /// Maximum object angular speed, radians per time unit.
    pub max_spin: f64,
    pub camera_speed: f64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// Object trajectories stay inside this box, which must lie within the bounds.
    pub object_min: [f64; 3],
    pub object_max: [f64; 3],
    /// Time between consecutive frames.
    pub frame_dt: f64,
    /// Trajectories stay inside the bounds for frames `0..max_frames`.
    pub max_frames: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            vertical_fov_deg: 55.0,
            objects: [1, 3],
            points_per_object: [200, 800],
            object_radius: [0.35, 0.6],
            background_points: 2000,
            motions: vec![MotionKind::Constant, MotionKind::Linear, MotionKind::Sinusoidal],
            max_speed: 0.6,
            max_spin: 0.8,
            camera_speed: 0.3,
            bounds_min: [-3.0, -3.2, 1.5],
            bounds_max: [3.0, 1.2, 5.0],
            object_min: [-1.6, -1.4, 2.0],
            object_max: [1.6, 1.2, 4.2],
            frame_dt: 0.1,
            max_frames: 40,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.width == 0 || self.height == 0 {
            return err("empty image size");
        }
        if self.objects[0] > self.objects[1] {
            return err("empty object count range");
        }
        if self.points_per_object[0] == 0 || self.points_per_object[0] > self.points_per_object[1] {
            return err("empty points-per-object range");
        }
        if !(self.object_radius[0] > 0.0 && self.object_radius[0] <= self.object_radius[1]) {
            return err("empty object radius range");
        }
        if self.motions.is_empty() {
            return err("no motion families");
        }
        if self.max_frames == 0 || !(self.frame_dt > 0.0) {
            return err("empty time span");
        }
        if !(self.vertical_fov_deg > 0.0 && self.vertical_fov_deg < 180.0) {
            return err("field of view out of range");
        }
        for a in 0..3 {
            if self.object_min[a] < self.bounds_min[a] || self.object_max[a] > self.bounds_max[a] {
                return err("object region outside the bounds");
            }
            let room = self.object_max[a] - self.object_min[a];
            if !(room > 2.0 * self.object_radius[1]) {
                return err("object region too small for the largest object");
            }
        }
        if self.max_speed < 0.0 || self.max_spin < 0.0 || self.camera_speed < 0.0 {
            return err("negative speed");
        }
        Ok(())
    }

    /// Same generator with every object at rest.
    pub fn static_variant(&self) -> Self {
        Self {
            motions: vec![MotionKind::Constant],
            ..self.clone()
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_vertical_fov(self.vertical_fov_deg.to_radians(), self.width, self.height)
    }

    pub fn span(&self) -> f64 {
        self.max_frames.saturating_sub(1) as f64 * self.frame_dt
    }

    fn lo(&self) -> Vec3 {
        self.bounds_min.into()
    }

    fn hi(&self) -> Vec3 {
        self.bounds_max.into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    Constant,
    Linear { velocity: Vec3 },
    Sinusoidal { amplitude: Vec3, omega: f64, phase: f64 },
}

/// Body-to-world pose as a function of absolute time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub origin: Vec3,
    pub orientation: Rigid,
    pub motion: Motion,
    pub spin_axis: Vec3,
    /// Radians per time unit.
    pub spin_rate: f64,
}

impl Trajectory {
    pub fn fixed(origin: Vec3) -> Self {
        Self {
            origin,
            orientation: Rigid::identity(),
            motion: Motion::Constant,
            spin_axis: Vec3::z(),
            spin_rate: 0.0,
        }
    }

    pub fn linear(origin: Vec3, velocity: Vec3) -> Self {
        Self {
            motion: Motion::Linear { velocity },
            ..Self::fixed(origin)
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self.motion, Motion::Constant) && self.spin_rate == 0.0
    }

    pub fn position(&self, t: f64) -> Vec3 {
        match &self.motion {
            Motion::Constant => self.origin,
            Motion::Linear { velocity } => self.origin + velocity * t,
            Motion::Sinusoidal {
                amplitude,
                omega,
                phase,
            } => self.origin + amplitude * (omega * t + phase).sin(),
        }
    }

    pub fn pose(&self, t: f64) -> Rigid {
        let base = self.orientation.rotation();
        let rot = if self.spin_rate == 0.0 {
            base
        } else {
            UnitQuaternion::from_axis_angle(&Unit::new_normalize(self.spin_axis), self.spin_rate * t) * base
        };
        Rigid::from_rotation(rot, self.position(t))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub points: Vec<Vec3>,
    pub albedo: Vec<[f32; 3]>,
}

impl Surface {
    pub fn push(&mut self, p: Vec3, albedo: [f32; 3]) {
        self.points.push(p);
        self.albedo.push(albedo);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Points in the body frame.
    pub surface: Surface,
    pub trajectory: Trajectory,
}

/// Surface ids number the background points first, then each object's
/// points in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Surface,
    pub objects: Vec<SceneObject>,
    pub static_flag: bool,
}

impl SceneSpec {
    pub fn new(background: Surface, objects: Vec<SceneObject>) -> Self {
        let static_flag = objects.iter().all(|o| o.trajectory.is_static());
        Self {
            background,
            objects,
            static_flag,
        }
    }

    pub fn point_count(&self) -> usize {
        self.background.len() + self.objects.iter().map(|o| o.surface.len()).sum::<usize>()
    }

    /// Object index (None for background) and local index of a surface id.
    fn locate(&self, id: usize) -> Option<(Option<usize>, usize)> {
        if id < self.background.len() {
            return Some((None, id));
        }
        let mut rest = id - self.background.len();
        for (k, o) in self.objects.iter().enumerate() {
            if rest < o.surface.len() {
                return Some((Some(k), rest));
            }
            rest -= o.surface.len();
        }
        None
    }

    pub fn position(&self, id: usize, t: f64) -> Option<Vec3> {
        match self.locate(id)? {
            (None, i) => Some(self.background.points[i]),
            (Some(k), i) => {
                let o = &self.objects[k];
                Some(o.trajectory.pose(t).apply(&o.surface.points[i]))
            }
        }
    }

    /// World positions and albedo of every surface point at time `t`, in id order.
    pub fn points_at(&self, t: f64) -> Vec<(Vec3, [f32; 3])> {
        let mut out = Vec::with_capacity(self.point_count());
        out.extend(self.background.points.iter().copied().zip(self.background.albedo.iter().copied()));
        for o in &self.objects {
            let pose = o.trajectory.pose(t);
            out.extend(
                o.surface
                    .points
                    .iter()
                    .map(|p| pose.apply(p))
                    .zip(o.surface.albedo.iter().copied()),
            );
        }
        out
    }
}

/// World-to-camera pose of a camera moving at constant velocity while
/// looking at a moving target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub intrinsics: Intrinsics,
    pub eye: Vec3,
    pub eye_velocity: Vec3,
    pub target: Vec3,
    pub target_velocity: Vec3,
}

impl CameraPath {
    pub fn fixed(intrinsics: Intrinsics, eye: Vec3, target: Vec3) -> Self {
        Self {
            intrinsics,
            eye,
            eye_velocity: Vec3::zeros(),
            target,
            target_velocity: Vec3::zeros(),
        }
    }

    pub fn pose(&self, t: f64) -> Rigid {
        Rigid::look_at(
            self.eye + self.eye_velocity * t,
            self.target + self.target_velocity * t,
            Vec3::y(),
        )
    }
}

/// Smooth colour field over world positions: nearby background points get
/// similar colours.
pub fn background_albedo(p: &Vec3) -> [f32; 3] {
    let c = |a: f64, b: f64, c: f64, d: f64| (0.5 + 0.42 * (a * p.x + b * p.y + c * p.z + d).sin()) as f32;
    [
        c(0.9, 0.35, 0.2, 0.3),
        c(-0.3, 1.1, 0.45, 1.7),
        c(0.25, -0.2, 1.05, 4.1),
    ]
}

fn uniform3(rng: &mut ChaCha8Rng, lo: &Vec3, hi: &Vec3) -> Vec3 {
    Vec3::from_fn(|a, _| if lo[a] < hi[a] { rng.random_range(lo[a]..hi[a]) } else { lo[a] })
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Points on a jittered grid over an axis-aligned rectangle.
fn jittered_rect(
    rng: &mut ChaCha8Rng,
    count: usize,
    origin: Vec3,
    du: Vec3,
    dv: Vec3,
    out: &mut Surface,
) {
    if count == 0 {
        return;
    }
    let aspect = du.norm() / dv.norm();
    let nu = ((count as f64 * aspect).sqrt().round() as usize).max(1);
    let nv = count.div_ceil(nu);
    let mut cells: Vec<(usize, usize)> = (0..nv).flat_map(|v| (0..nu).map(move |u| (u, v))).collect();
    // Drop random cells until exactly `count` remain.
    while cells.len() > count {
        let k = rng.random_range(0..cells.len());
        cells.swap_remove(k);
    }
    cells.sort_unstable_by_key(|&(u, v)| (v, u));
    for (u, v) in cells {
        let a = (u as f64 + rng.random_range(0.1..0.9)) / nu as f64;
        let b = (v as f64 + rng.random_range(0.1..0.9)) / nv as f64;
        let p = origin + du * a + dv * b;
        out.push(p, background_albedo(&p));
    }
}

/// Back wall and floor of the room, split proportionally to their area.
fn sample_background(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Surface {
    let (lo, hi) = (cfg.lo(), cfg.hi());
    let wall_o = Vec3::new(lo.x, lo.y, hi.z);
    let wall_u = Vec3::new(hi.x - lo.x, 0.0, 0.0);
    let wall_v = Vec3::new(0.0, hi.y - lo.y, 0.0);
    let floor_o = Vec3::new(lo.x, hi.y, lo.z);
    let floor_v = Vec3::new(0.0, 0.0, hi.z - lo.z);
    let (wall_area, floor_area) = (wall_u.norm() * wall_v.norm(), wall_u.norm() * floor_v.norm());
    let n_wall = (cfg.background_points as f64 * wall_area / (wall_area + floor_area)).round() as usize;
    let mut bg = Surface::default();
    jittered_rect(rng, n_wall, wall_o, wall_u, wall_v, &mut bg);
    jittered_rect(rng, cfg.background_points - n_wall, floor_o, wall_u, floor_v, &mut bg);
    bg
}

fn sample_object(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> SceneObject {
    let radius = rng.random_range(cfg.object_radius[0]..=cfg.object_radius[1]);
    let count = rng.random_range(cfg.points_per_object[0]..=cfg.points_per_object[1]);
    let base = [0; 3].map(|_| rng.random_range(0.1f32..0.95));
    let cube = rng.random_bool(0.5);
    let mut surface = Surface::default();
    for _ in 0..count {
        let dir = unit_vector(rng);
        let p = if cube {
            let m = dir.abs().max();
            dir * (radius / 3f64.sqrt() / m)
        } else {
            dir * radius
        };
        // Mild shading so the body's orientation is visible.
        let shade = (0.85 + 0.15 * dir.z) as f32;
        surface.push(p, base.map(|c| (c * shade).clamp(0.0, 1.0)));
    }

    // Every surface point stays within `radius` of the trajectory position.
    let margin = Vec3::repeat(radius);
    let (lo, hi) = (Vec3::from(cfg.object_min) + margin, Vec3::from(cfg.object_max) - margin);
    let span = cfg.span();
    let kind = cfg.motions[rng.random_range(0..cfg.motions.len())];
    let (origin, motion) = match kind {
        MotionKind::Constant => (uniform3(rng, &lo, &hi), Motion::Constant),
        MotionKind::Linear => {
            let start = uniform3(rng, &lo, &hi);
            let speed = rng.random_range(0.0..=cfg.max_speed);
            let mut velocity = unit_vector(rng) * speed;
            // Shorten the velocity until the end point is inside the box.
            for _ in 0..60 {
                let end = start + velocity * span;
                if (0..3).all(|a| end[a] >= lo[a] && end[a] <= hi[a]) {
                    break;
                }
                velocity *= 0.8;
            }
            let end = start + velocity * span;
            if !(0..3).all(|a| end[a] >= lo[a] && end[a] <= hi[a]) {
                velocity = Vec3::zeros();
            }
            (start, Motion::Linear { velocity })
        }
        MotionKind::Sinusoidal => {
            let omega = rng.random_range(1.0..4.0);
            let amp_max = (cfg.max_speed / omega).min(0.5 * (hi - lo).min());
            let amplitude = Vec3::from_fn(|_, _| rng.random_range(-amp_max..=amp_max));
            let (alo, ahi) = (lo + amplitude.abs(), hi - amplitude.abs());
            (
                uniform3(rng, &alo, &ahi),
                Motion::Sinusoidal {
                    amplitude,
                    omega,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                },
            )
        }
    };
    let spin_rate = if kind == MotionKind::Constant {
        0.0
    } else {
        rng.random_range(-cfg.max_spin..=cfg.max_spin)
    };
    let orientation = Rigid::new([0; 4].map(|_| rng.random_range(-1.0..1.0)), Vec3::zeros());
    SceneObject {
        surface,
        trajectory: Trajectory {
            origin,
            orientation,
            motion,
            spin_axis: unit_vector(rng),
            spin_rate,
        },
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sample_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 1);
    let background = sample_background(&mut rng, cfg);
    let n = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
    let objects = (0..n).map(|_| sample_object(&mut rng, cfg)).collect();
    Ok(SceneSpec::new(background, objects))
}

pub fn sample_camera_path(seed: u64, cfg: &GeneratorConfig) -> Result<CameraPath> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 2);
    let (lo, hi) = (cfg.lo(), cfg.hi());
    let centre = (lo + hi) / 2.0;
    let eye = Vec3::new(
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.1),
        lo.z - rng.random_range(1.2..1.8),
    );
    let target = Vec3::new(
        centre.x + rng.random_range(-0.4..0.4),
        centre.y + rng.random_range(-0.2..0.2),
        centre.z + rng.random_range(-0.4..0.4),
    );
    let eye_velocity = unit_vector(&mut rng) * rng.random_range(0.0..=cfg.camera_speed);
    let target_velocity = unit_vector(&mut rng) * rng.random_range(0.0..=cfg.camera_speed);
    Ok(CameraPath {
        intrinsics: cfg.intrinsics()?,
        eye,
        eye_velocity,
        target,
        target_velocity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World to camera.
    pub pose: Rigid,
}

/// How a snippet was produced, so that its scene can be regenerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetSource {
    pub generator: GeneratorConfig,
    pub frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub width: usize,
    pub height: usize,
    pub timestamps: Vec<f64>,
    pub cameras: Vec<Camera>,
    /// Per frame, `CHANNELS × height × width`, row-major.
    pub images: Vec<Vec<f32>>,
    /// `P_i(t_i)` in the frame of camera 0.
    pub gt_time_variant: Vec<PointMap>,
    /// Per frame and pixel, the surface point seen there, or -1.
    pub surface_ids: Vec<Vec<i32>>,
    pub seed: u64,
    pub source: Option<SnippetSource>,
}

impl Snippet {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Frames `idx` of this snippet as a new snippet; point maps stay in the
    /// frame of the new first camera.
    pub fn subset(&self, idx: &[usize], scene: &SceneSpec) -> Result<Snippet> {
        let ts: Vec<f64> = idx.iter().map(|&i| self.timestamps[i]).collect();
        let path_poses: Vec<Camera> = idx.iter().map(|&i| self.cameras[i]).collect();
        let mut out = render_with_cameras(scene, &path_poses, &ts)?;
        out.seed = self.seed;
        out.source = self.source.as_ref().map(|s| SnippetSource {
            generator: s.generator.clone(),
            frames: idx.iter().map(|&i| s.frames[i]).collect(),
        });
        Ok(out)
    }
}

/// Maps camera-0-frame positions through `f32` so stored maps are exact.
fn store(p: Vec3) -> Vec3 {
    p.map(|x| x as f32 as f64)
}

pub fn render_snippet(scene: &SceneSpec, path: &CameraPath, timestamps: &[f64]) -> Result<Snippet> {
    let cams: Vec<Camera> = timestamps
        .iter()
        .map(|&t| Camera {
            intrinsics: path.intrinsics,
            pose: path.pose(t),
        })
        .collect();
    render_with_cameras(scene, &cams, timestamps)
}

fn render_with_cameras(scene: &SceneSpec, cams: &[Camera], timestamps: &[f64]) -> Result<Snippet> {
    if timestamps.is_empty() || cams.len() != timestamps.len() {
        return Err(Error::Contract("render needs one camera per timestamp".into()));
    }
    let k = cams[0].intrinsics;
    k.validate()?;
    let (w, h) = (k.width, k.height);
    let cam0 = cams[0].pose;
    let mut images = Vec::new();
    let mut maps = Vec::new();
    let mut ids = Vec::new();
    for (i, (&t, cam)) in timestamps.iter().zip(cams).enumerate() {
        let pts = scene.points_at(t);
        let mut zbuf = vec![f64::INFINITY; w * h];
        let mut winner = vec![-1i32; w * h];
        let mut pos = vec![Vec3::zeros(); w * h];
        let mut col = vec![[0f32; 3]; w * h];
        for (s, (p, a)) in pts.iter().enumerate() {
            let pr = project_point(&cam.intrinsics, &cam.pose, p);
            if let Some(pix) = pr.pixel(&cam.intrinsics) {
                if pr.depth < zbuf[pix] {
                    zbuf[pix] = pr.depth;
                    winner[pix] = s as i32;
                    pos[pix] = *p;
                    col[pix] = *a;
                }
            }
        }
        let mut img = vec![0f32; CHANNELS * w * h];
        let mut map = PointMap::empty(w, h).with_indices(i, i);
        for pix in 0..w * h {
            if winner[pix] >= 0 {
                for c in 0..CHANNELS {
                    img[c * w * h + pix] = col[pix][c];
                }
                map.points[pix] = store(cam0.apply(&pos[pix]));
                map.valid[pix] = true;
            }
        }
        images.push(img);
        maps.push(map);
        ids.push(winner);
    }
    Ok(Snippet {
        width: w,
        height: h,
        timestamps: timestamps.to_vec(),
        cameras: cams.to_vec(),
        images,
        gt_time_variant: maps,
        surface_ids: ids,
        seed: 0,
        source: None,
    })
}

/// `P_i(t_j)`: the points seen by frame `i`, placed where they are at time
/// `t_j`, in the frame of camera 0.
pub fn gt_pointmap(scene: &SceneSpec, snippet: &Snippet, i: usize, j: usize) -> Result<PointMap> {
    let n = snippet.len();
    if i >= n || j >= n {
        return Err(Error::Contract(format!("frame ({i}, {j}) of a {n}-frame snippet")));
    }
    let t = snippet.timestamps[j];
    let cam0 = snippet.cameras[0].pose;
    let mut map = PointMap::empty(snippet.width, snippet.height).with_indices(i, j);
    for (pix, &s) in snippet.surface_ids[i].iter().enumerate() {
        if s < 0 {
            continue;
        }
        let p = scene
            .position(s as usize, t)
            .ok_or_else(|| Error::Contract(format!("surface id {s} not in scene")))?;
        map.points[pix] = store(cam0.apply(&p));
        map.valid[pix] = true;
    }
    Ok(map)
}

/// Pixel pairs of frames `i` and `i2` that see the same surface point.
pub fn gt_correspondences(snippet: &Snippet, i: usize, i2: usize) -> Vec<(usize, usize)> {
    let mut by_id = std::collections::HashMap::new();
    for (v, &s) in snippet.surface_ids[i2].iter().enumerate() {
        if s >= 0 {
            by_id.insert(s, v);
        }
    }
    snippet.surface_ids[i]
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= 0)
        .filter_map(|(u, s)| by_id.get(s).map(|&v| (u, v)))
        .collect()
}

/// A scene and camera path drawn from one seed, from which snippets at any
/// frame indices can be rendered.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub seed: u64,
    pub config: GeneratorConfig,
    pub scene: SceneSpec,
    pub path: CameraPath,
}

impl Sequence {
    pub fn generate(seed: u64, config: &GeneratorConfig) -> Result<Self> {
        Ok(Self {
            seed,
            config: config.clone(),
            scene: sample_scene(seed, config)?,
            path: sample_camera_path(seed, config)?,
        })
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 * self.config.frame_dt
    }

    pub fn snippet(&self, frames: &[usize]) -> Result<Snippet> {
        let ts: Vec<f64> = frames.iter().map(|&f| self.timestamp(f)).collect();
        let mut s = render_snippet(&self.scene, &self.path, &ts)?;
        s.seed = self.seed;
        s.source = Some(SnippetSource {
            generator: self.config.clone(),
            frames: frames.to_vec(),
        });
        Ok(s)
    }

    /// Rebuilds the sequence a generated snippet came from.
    pub fn of_snippet(snippet: &Snippet) -> Result<Self> {
        let src = snippet
            .source
            .as_ref()
            .ok_or_else(|| Error::Contract("snippet has no generator source".into()))?;
        Self::generate(snippet.seed, &src.generator)
    }
}

const SNIPPET_MAGIC: &[u8; 4] = b"VDPS";
const SNIPPET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnippetHeader {
    width: usize,
    height: usize,
    channels: usize,
    frames: usize,
    timestamps: Vec<f64>,
    cameras: Vec<Camera>,
    seed: u64,
    source: Option<SnippetSource>,
}

impl Snippet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SnippetHeader {
            width: self.width,
            height: self.height,
            channels: CHANNELS,
            frames: self.len(),
            timestamps: self.timestamps.clone(),
            cameras: self.cameras.clone(),
            seed: self.seed,
            source: self.source.clone(),
        };
        let mut w = format::encode(SNIPPET_MAGIC, SNIPPET_VERSION, &header)?;
        for img in &self.images {
            w.f32s(img.iter().copied());
        }
        for m in &self.gt_time_variant {
            w.f32s(m.points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]));
        }
        for m in &self.gt_time_variant {
            w.bools(m.valid.iter().copied());
        }
        for ids in &self.surface_ids {
            w.i32s(ids.iter().copied());
        }
        format::write(path, w)
    }

    pub fn load(path: &Path) -> Result<Snippet> {
        let data = format::read_bytes(path)?;
        let (h, mut r): (SnippetHeader, _) = format::decode(&data, path, SNIPPET_MAGIC, SNIPPET_VERSION)?;
        if h.channels != CHANNELS || h.timestamps.len() != h.frames || h.cameras.len() != h.frames {
            return Err(r.error("inconsistent header"));
        }
        let px = h.width * h.height;
        let mut images = Vec::with_capacity(h.frames);
        for _ in 0..h.frames {
            images.push(r.f32s(CHANNELS * px)?);
        }
        let mut maps = Vec::with_capacity(h.frames);
        for i in 0..h.frames {
            let raw = r.f32s(3 * px)?;
            let mut m = PointMap::empty(h.width, h.height).with_indices(i, i);
            for (p, c) in m.points.iter_mut().zip(raw.chunks_exact(3)) {
                *p = Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64);
            }
            maps.push(m);
        }
        for m in maps.iter_mut() {
            m.valid = r.bools(px)?;
        }
        let mut ids = Vec::with_capacity(h.frames);
        for _ in 0..h.frames {
            ids.push(r.i32s(px)?);
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Snippet {
            width: h.width,
            height: h.height,
            timestamps: h.timestamps,
            cameras: h.cameras,
            images,
            gt_time_variant: maps,
            surface_ids: ids,
            seed: h.seed,
            source: h.source,
        })
    }
}
