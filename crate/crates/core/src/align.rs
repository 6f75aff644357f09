//! Sliding-window fusion: per-window similarity transforms fitted so that the
//! point maps and cameras of overlapping windows agree on their shared frames.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vdpm_tensor::{Tape, Tensor, Var};

use crate::dpm::PointMap;
use crate::error::{Error, Result};
use crate::eval::{align_points, transform_pose, DpmPrediction};
use crate::format;
use crate::geometry::{DepthMap, Rigid, Similarity, Vec3};
use crate::loss::huber;
use crate::model::Weights;
use crate::par;
use crate::train::{adamw_step, AdamW, AdamWParams, Grads};

const DIST_EPS: f64 = 1e-12;
const QUAT_EPS: f64 = 1e-12;

/// Frame ranges `[start, end)` of length `window`, `stride` apart, the last
/// one clamped to end at `len`.
pub fn build_windows(len: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if window < 2 || window > len {
        return Err(Error::InvalidCount(format!("window {window} for sequence of {len} frames")));
    }
    if stride == 0 {
        return Err(Error::InvalidCount("stride must be >= 1".into()));
    }
    if stride >= window {
        return Err(Error::NoOverlap(format!("stride {stride} >= window {window}")));
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        out.push((start, start + window));
        if start + window >= len {
            return Ok(out);
        }
        start = (start + stride).min(len - window);
    }
}

/// Network output for frames `[start, end)`: time-variant point maps and
/// world-to-camera poses, both in the coordinates of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub start: usize,
    pub end: usize,
    pub timestamps: Vec<f64>,
    pub points: Vec<PointMap>,
    pub cameras: Vec<Rigid>,
}

impl WindowPrediction {
    pub fn new(start: usize, timestamps: Vec<f64>, points: Vec<PointMap>, cameras: Vec<Rigid>) -> Result<Self> {
        let w = Self {
            start,
            end: start + points.len(),
            timestamps,
            points,
            cameras,
        };
        w.check()?;
        Ok(w)
    }

    /// Uses `𝒫` and re-expresses the anchor-relative cameras in the frame of
    /// the window's first camera, where the point maps live.
    pub fn from_prediction(p: &DpmPrediction, start: usize, timestamps: Vec<f64>) -> Result<Self> {
        let rel: Vec<Rigid> = p
            .cameras
            .iter()
            .map(|c| Rigid::new(c.quat, c.translation))
            .collect();
        let first = rel
            .first()
            .ok_or_else(|| Error::EmptySet("prediction without cameras".into()))?
            .inverse();
        let cameras = rel.iter().map(|r| r.compose(&first)).collect();
        Self::new(start, timestamps, p.time_variant.clone(), cameras)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn width(&self) -> usize {
        self.points[0].width
    }

    pub fn height(&self) -> usize {
        self.points[0].height
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.len();
        if self.end < self.start + 2 {
            return Err(Error::InvalidCount(format!("window [{}, {}) shorter than 2", self.start, self.end)));
        }
        if self.points.len() != n || self.cameras.len() != n || self.timestamps.len() != n {
            return Err(Error::Contract(format!(
                "window [{}, {}) has {} maps, {} cameras, {} timestamps",
                self.start,
                self.end,
                self.points.len(),
                self.cameras.len(),
                self.timestamps.len()
            )));
        }
        for m in &self.points {
            m.check()?;
            if m.width != self.points[0].width || m.height != self.points[0].height {
                return Err(Error::RepresentationMismatch("window maps differ in size".into()));
            }
        }
        Ok(())
    }

    /// The same window with its coordinates changed by `s`.
    pub fn transformed(&self, s: &Similarity) -> Self {
        Self {
            points: self.points.iter().map(|m| m.transformed(s)).collect(),
            cameras: self.cameras.iter().map(|c| transform_pose(c, s)).collect(),
            ..self.clone()
        }
    }

    fn local(&self, frame: usize) -> usize {
        frame - self.start
    }
}

const WINDOW_MAGIC: &[u8; 4] = b"VDPW";
const WINDOW_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowHeader {
    start: usize,
    end: usize,
    width: usize,
    height: usize,
    timestamps: Vec<f64>,
    cameras: Vec<Rigid>,
    /// (source frame, time index, viewpoint index) per map.
    indices: Vec<[usize; 3]>,
}

impl WindowPrediction {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check()?;
        let header = WindowHeader {
            start: self.start,
            end: self.end,
            width: self.width(),
            height: self.height(),
            timestamps: self.timestamps.clone(),
            cameras: self.cameras.clone(),
            indices: self
                .points
                .iter()
                .map(|m| [m.source_frame, m.time_index, m.viewpoint_index])
                .collect(),
        };
        let mut w = format::encode(WINDOW_MAGIC, WINDOW_VERSION, &header)?;
        for m in &self.points {
            w.f64s(m.points.iter().flat_map(|p| [p.x, p.y, p.z]));
            w.f64s(m.confidence.iter().copied());
            w.bools(m.valid.iter().copied());
        }
        format::write(path, w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = format::read_bytes(path)?;
        let (h, mut r): (WindowHeader, _) = format::decode(&data, path, WINDOW_MAGIC, WINDOW_VERSION)?;
        let n = h.end.checked_sub(h.start).ok_or_else(|| r.error("end before start"))?;
        if h.timestamps.len() != n || h.cameras.len() != n || h.indices.len() != n {
            return Err(r.error("inconsistent header"));
        }
        let px = h.width * h.height;
        let mut points = Vec::with_capacity(n);
        for k in 0..n {
            let [source, time, view] = h.indices[k];
            let mut m = PointMap::empty(h.width, h.height).with_indices(source, time);
            m.viewpoint_index = view;
            let raw = r.f64s(3 * px)?;
            for (p, c) in m.points.iter_mut().zip(raw.chunks_exact(3)) {
                *p = Vec3::new(c[0], c[1], c[2]);
            }
            m.confidence = r.f64s(px)?;
            m.valid = r.bools(px)?;
            points.push(m);
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes"));
        }
        Self::new(h.start, h.timestamps, points, h.cameras).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Every `*.vdpw` file of `dir`, ordered by start frame.
pub fn load_windows_dir(dir: &Path) -> Result<Vec<WindowPrediction>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "vdpw") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut windows = paths.iter().map(|p| WindowPrediction::load(p)).collect::<Result<Vec<_>>>()?;
    if windows.is_empty() {
        return Err(Error::EmptySet(format!("no .vdpw files in {}", dir.display())));
    }
    windows.sort_by_key(|w| (w.start, w.end));
    Ok(windows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignOptions {
    pub iterations: usize,
    pub lr: f64,
    pub huber_delta: f64,
    /// Weight of the camera-center term relative to the point term.
    pub camera_weight: f64,
    /// Stop once an accepted step improves the residual by less than this.
    pub tolerance: f64,
    /// Consecutive rejected steps before giving up.
    pub max_rejections: usize,
    /// Fit one extra depth scale per frame and window.
    pub refine_depth_scale: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 1e-3,
            huber_delta: 0.05,
            camera_weight: 1.0,
            tolerance: 1e-8,
            max_rejections: 12,
            refine_depth_scale: false,
        }
    }
}

impl AlignOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.huber_delta > 0.0) || self.camera_weight < 0.0 || self.tolerance < 0.0 {
            return Err(Error::Config(
                "lr and huber_delta must be > 0, camera_weight and tolerance >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Shared frames and jointly valid pixels of two windows.
#[derive(Debug, Clone)]
struct Overlap {
    a: usize,
    b: usize,
    /// Per shared frame: local indices in `a` and `b`, then `(pa, pb, weight)`.
    frames: Vec<SharedFrame>,
    weight_sum: f64,
}

#[derive(Debug, Clone)]
struct SharedFrame {
    la: usize,
    lb: usize,
    pa: Vec<Vec3>,
    pb: Vec<Vec3>,
    weight: Vec<f64>,
    ca: Vec3,
    cb: Vec3,
}

fn overlap(wins: &[WindowPrediction], a: usize, b: usize) -> Option<Overlap> {
    let (wa, wb) = (&wins[a], &wins[b]);
    let lo = wa.start.max(wb.start);
    let hi = wa.end.min(wb.end);
    if lo >= hi {
        return None;
    }
    let mut frames = Vec::new();
    let mut weight_sum = 0.0;
    for f in lo..hi {
        let (la, lb) = (wa.local(f), wb.local(f));
        let (ma, mb) = (&wa.points[la], &wb.points[lb]);
        let mut sf = SharedFrame {
            la,
            lb,
            pa: Vec::new(),
            pb: Vec::new(),
            weight: Vec::new(),
            ca: wa.cameras[la].center(),
            cb: wb.cameras[lb].center(),
        };
        for k in 0..ma.len().min(mb.len()) {
            if ma.valid[k] && mb.valid[k] {
                let w = (ma.confidence[k] * mb.confidence[k]).sqrt();
                sf.pa.push(ma.points[k]);
                sf.pb.push(mb.points[k]);
                sf.weight.push(w);
                weight_sum += w;
            }
        }
        frames.push(sf);
    }
    Some(Overlap {
        a,
        b,
        frames,
        weight_sum,
    })
}

/// A window's point after its optional per-frame depth scale (about the
/// frame's camera center) and its similarity.
fn place(s: &Similarity, depth_scale: f64, center: &Vec3, p: &Vec3) -> Vec3 {
    s.apply(&(center + depth_scale * (p - center)))
}

fn overlap_value(o: &Overlap, sa: &Similarity, sb: &Similarity, da: &[f64], db: &[f64], opts: &AlignOptions) -> f64 {
    let mut points = 0.0;
    let mut cams = 0.0;
    for f in &o.frames {
        let (dfa, dfb) = (da[f.la], db[f.lb]);
        for ((pa, pb), w) in f.pa.iter().zip(&f.pb).zip(&f.weight) {
            let r = (place(sa, dfa, &f.ca, pa) - place(sb, dfb, &f.cb, pb)).norm();
            points += w * huber(r, opts.huber_delta);
        }
        cams += huber((sa.apply(&f.ca) - sb.apply(&f.cb)).norm(), opts.huber_delta);
    }
    let points = if o.weight_sum > 0.0 { points / o.weight_sum } else { 0.0 };
    points + opts.camera_weight * cams / o.frames.len() as f64
}

/// Confidence-weighted Huber distance between the two windows' placed point
/// maps on their shared frames, plus the same penalty on camera centers.
pub fn overlap_residual(
    wa: &WindowPrediction,
    wb: &WindowPrediction,
    sa: &Similarity,
    sb: &Similarity,
    opts: &AlignOptions,
) -> Result<f64> {
    let wins = [wa.clone(), wb.clone()];
    let o = overlap(&wins, 0, 1).ok_or_else(|| {
        Error::Contract(format!(
            "windows [{}, {}) and [{}, {}) share no frame",
            wa.start, wa.end, wb.start, wb.end
        ))
    })?;
    Ok(overlap_value(&o, sa, sb, &vec![1.0; wa.len()], &vec![1.0; wb.len()], opts))
}

/// Per-window unknowns as tensors: log-scale `[1]`, quaternion `[4]`
/// (`w, x, y, z`), translation `[3]`, and per-frame log depth scales.
fn param_names(w: usize) -> [String; 4] {
    [
        format!("sim.{w}.log_scale"),
        format!("sim.{w}.quat"),
        format!("sim.{w}.translation"),
        format!("sim.{w}.log_depth"),
    ]
}

fn to_params(w: usize, s: &Similarity, log_depth: &[f64], out: &mut Weights<f64>) -> Result<()> {
    let [ls, q, t, d] = param_names(w);
    let quat = s.rigid.quat();
    let tr = s.rigid.translation;
    out.insert(ls, Tensor::new(vec![1], vec![s.scale.ln()])?);
    out.insert(q, Tensor::new(vec![4], quat.to_vec())?);
    out.insert(t, Tensor::new(vec![3], vec![tr.x, tr.y, tr.z])?);
    out.insert(d, Tensor::new(vec![log_depth.len()], log_depth.to_vec())?);
    Ok(())
}

fn from_params(w: usize, p: &Weights<f64>) -> Result<(Similarity, Vec<f64>)> {
    let [ls, q, t, d] = param_names(w);
    let get = |n: &str| {
        p.get(n)
            .ok_or_else(|| Error::Contract(format!("missing alignment parameter {n}")))
    };
    let scale = get(&ls)?.data()[0].exp();
    let q = get(&q)?.data();
    let norm = (q.iter().map(|x| x * x).sum::<f64>() + QUAT_EPS).sqrt();
    let quat = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let t = get(&t)?.data();
    let sim = Similarity::new(scale, Rigid::new(quat, Vec3::new(t[0], t[1], t[2])))?;
    let depth = get(&d)?.data().iter().map(|x| x.exp()).collect();
    Ok((sim, depth))
}

/// The tape-side form of one window's transform.
struct SimVars<'t> {
    scale: Var<'t, f64>,
    rot_t: Var<'t, f64>,
    translation: Var<'t, f64>,
    depth: Var<'t, f64>,
}

fn points_tensor(pts: &[Vec3]) -> Result<Tensor<f64>> {
    Ok(Tensor::new(vec![pts.len(), 3], pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect())?)
}

fn vec_tensor(p: &Vec3) -> Result<Tensor<f64>> {
    Ok(Tensor::new(vec![3], vec![p.x, p.y, p.z])?)
}

fn place_vars<'t>(tape: &'t Tape<f64>, s: &SimVars<'t>, local: usize, center: &Vec3, pts: &[Vec3]) -> Result<Var<'t, f64>> {
    let c = tape.constant(vec_tensor(center)?);
    let x = tape.constant(points_tensor(pts)?);
    let d = s.depth.slice(0, local, local + 1)?.reshape(&[])?;
    let x = x.sub(c)?.mul(d)?.add(c)?;
    Ok(x.matmul(s.rot_t)?.mul(s.scale)?.add(s.translation)?)
}

fn huber_dist<'t>(a: Var<'t, f64>, b: Var<'t, f64>, delta: f64) -> Result<Var<'t, f64>> {
    let d = a.sub(b)?;
    let axis = d.shape().len() - 1;
    Ok(d.mul(d)?.sum(axis)?.add_scalar(DIST_EPS).sqrt().huber(delta))
}

trait MatmulVec<'t> {
    fn matmul_vec(self, m: Var<'t, f64>) -> Result<Var<'t, f64>>;
}

impl<'t> MatmulVec<'t> for Var<'t, f64> {
    /// Row vector `[3]` times `[3, 3]`.
    fn matmul_vec(self, m: Var<'t, f64>) -> Result<Var<'t, f64>> {
        Ok(self.reshape(&[1, 3])?.matmul(m)?.reshape(&[3])?)
    }
}

/// Windows fused into one trajectory and one depth map per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedResult {
    /// Window coordinates to fused coordinates, `transforms[0]` the identity.
    pub transforms: Vec<Similarity>,
    /// Per window and local frame; all ones unless depth scales were refined.
    pub depth_scales: Vec<Vec<f64>>,
    pub timestamps: Vec<f64>,
    /// World-to-camera per frame.
    pub trajectory: Vec<Rigid>,
    /// Depth in each frame's own camera.
    pub depth: Vec<DepthMap>,
    /// Point maps in fused coordinates.
    pub points: Vec<PointMap>,
    pub residual: f64,
    /// Total residual after initialization and after each accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// Fits one similarity per window (the first fixed to the identity) to the
/// overlap residual: chained closed-form alignment, then Adam descent with
/// step rejection.
pub fn optimize(windows: &[WindowPrediction], opts: &AlignOptions) -> Result<FusedResult> {
    opts.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptySet("no windows".into()));
    }
    for w in windows {
        w.check()?;
        if w.width() != windows[0].width() || w.height() != windows[0].height() {
            return Err(Error::RepresentationMismatch("windows differ in image size".into()));
        }
    }
    for k in 1..windows.len() {
        let (a, b) = (&windows[k - 1], &windows[k]);
        if b.start >= a.end || b.end <= a.start {
            return Err(Error::NoOverlap(format!(
                "windows [{}, {}) and [{}, {}) share no frame",
                a.start, a.end, b.start, b.end
            )));
        }
    }
    let n = windows.len();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if let Some(o) = overlap(windows, a, b) {
                pairs.push(o);
            }
        }
    }

    let mut sims = vec![Similarity::identity(); n];
    for k in 1..n {
        let o = overlap(windows, k - 1, k).expect("consecutive windows overlap");
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for f in &o.frames {
            src.extend(f.pb.iter().copied());
            dst.extend(f.pa.iter().map(|p| sims[k - 1].apply(p)));
            src.push(f.cb);
            dst.push(sims[k - 1].apply(&f.ca));
        }
        sims[k] = align_points(&src, &dst)?;
    }

    let mut params = Weights::new();
    for (w, s) in sims.iter().enumerate() {
        to_params(w, s, &vec![0.0; windows[w].len()], &mut params)?;
    }
    let total = |p: &Weights<f64>| -> Result<f64> {
        let decoded = (0..n).map(|w| from_params(w, p)).collect::<Result<Vec<_>>>()?;
        let terms = par::map(&pairs, |_, o| {
            let (sa, da) = &decoded[o.a];
            let (sb, db) = &decoded[o.b];
            overlap_value(o, sa, sb, da, db, opts)
        });
        Ok(terms.iter().sum())
    };

    let mut current = total(&params)?;
    let mut history = vec![current];
    let mut opt = AdamW::<f64>::new(AdamWParams {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-12,
        weight_decay: 0.0,
    });
    let mut lr = opts.lr;
    let mut rejections = 0;
    let mut iterations = 0;
    while iterations < opts.iterations && n > 1 && current >= opts.tolerance {
        iterations += 1;
        let grads = gradients(&pairs, &params, opts)?;
        let mut trial = params.clone();
        adamw_step(&mut trial, &grads, lr, &mut opt)?;
        let value = total(&trial)?;
        if value.is_finite() && value <= current {
            let improvement = current - value;
            params = trial;
            current = value;
            history.push(current);
            rejections = 0;
            if improvement < opts.tolerance {
                break;
            }
        } else {
            lr *= 0.5;
            rejections += 1;
            if rejections >= opts.max_rejections {
                break;
            }
        }
    }

    let decoded = (0..n).map(|w| from_params(w, &params)).collect::<Result<Vec<_>>>()?;
    let (transforms, depth_scales): (Vec<Similarity>, Vec<Vec<f64>>) = decoded.into_iter().unzip();
    fuse(windows, transforms, depth_scales, current, history, iterations)
}

fn gradients(pairs: &[Overlap], params: &Weights<f64>, opts: &AlignOptions) -> Result<Grads<f64>> {
    let per = par::map(pairs, |_, o| overlap_grads_full(o, params, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut grads: Grads<f64> = Grads::new();
    for g in per {
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    Ok(grads)
}

/// Gradients with respect to every trainable parameter, including those
/// consumed through reshape or normalization.
fn overlap_grads_full(o: &Overlap, p: &Weights<f64>, opts: &AlignOptions) -> Result<Grads<f64>> {
    let tape = Tape::new();
    let mut leaves: Vec<(String, usize)> = Vec::new();
    let mut vars = Vec::new();
    for w in [o.a, o.b] {
        let trainable = w != 0;
        let names = param_names(w);
        let mut ids = Vec::new();
        for (k, name) in names.iter().enumerate() {
            let v = p
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing alignment parameter {name}")))?
                .clone();
            let train = trainable && (k < 3 || opts.refine_depth_scale);
            let var = if train { tape.leaf(v) } else { tape.constant(v) };
            if train {
                leaves.push((name.clone(), var.id()));
            }
            ids.push(var);
        }
        vars.push(build_sim(&tape, ids[0], ids[1], ids[2], ids[3])?);
    }
    let total = overlap_tape(&tape, o, &vars[0], &vars[1], opts)?;
    let mut g = tape.backward(total)?;
    let mut out = Grads::new();
    for (name, id) in leaves {
        let shape = p.get(&name).unwrap().shape().to_vec();
        out.insert(name, g.take_id(id).unwrap_or_else(|| Tensor::zeros(shape)));
    }
    Ok(out)
}

fn build_sim<'t>(
    tape: &'t Tape<f64>,
    log_scale: Var<'t, f64>,
    quat: Var<'t, f64>,
    translation: Var<'t, f64>,
    log_depth: Var<'t, f64>,
) -> Result<SimVars<'t>> {
    let q = quat.normalize_last(QUAT_EPS)?;
    let c = |i: usize| q.slice(0, i, i + 1);
    let (qw, qx, qy, qz) = (c(0)?, c(1)?, c(2)?, c(3)?);
    let two = |a: Var<'t, f64>, b: Var<'t, f64>| -> Result<Var<'t, f64>> { Ok(a.mul(b)?.scale(2.0)) };
    let one_minus = |a: Var<'t, f64>, b: Var<'t, f64>| -> Result<Var<'t, f64>> {
        Ok(a.mul(a)?.add(b.mul(b)?)?.scale(-2.0).add_scalar(1.0))
    };
    let r = [
        one_minus(qy, qz)?,
        two(qx, qy)?.sub(two(qw, qz)?)?,
        two(qx, qz)?.add(two(qw, qy)?)?,
        two(qx, qy)?.add(two(qw, qz)?)?,
        one_minus(qx, qz)?,
        two(qy, qz)?.sub(two(qw, qx)?)?,
        two(qx, qz)?.sub(two(qw, qy)?)?,
        two(qy, qz)?.add(two(qw, qx)?)?,
        one_minus(qx, qy)?,
    ];
    Ok(SimVars {
        scale: log_scale.reshape(&[])?.exp(),
        rot_t: tape.concat(&r, 0)?.reshape(&[3, 3])?.transpose(0, 1)?,
        translation,
        depth: log_depth.exp(),
    })
}

fn overlap_tape<'t>(
    tape: &'t Tape<f64>,
    o: &Overlap,
    sa: &SimVars<'t>,
    sb: &SimVars<'t>,
    opts: &AlignOptions,
) -> Result<Var<'t, f64>> {
    let mut total = tape.scalar(0.0);
    let mut cams = Vec::new();
    for f in &o.frames {
        if !f.pa.is_empty() {
            let xa = place_vars(tape, sa, f.la, &f.ca, &f.pa)?;
            let xb = place_vars(tape, sb, f.lb, &f.cb, &f.pb)?;
            let w = Tensor::new(vec![f.weight.len()], f.weight.iter().map(|w| w / o.weight_sum).collect())?;
            total = total.add(huber_dist(xa, xb, opts.huber_delta)?.mul(tape.constant(w))?.sum_all())?;
        }
        let ca = tape.constant(vec_tensor(&f.ca)?).matmul_vec(sa.rot_t)?.mul(sa.scale)?.add(sa.translation)?;
        let cb = tape.constant(vec_tensor(&f.cb)?).matmul_vec(sb.rot_t)?.mul(sb.scale)?.add(sb.translation)?;
        cams.push(huber_dist(ca, cb, opts.huber_delta)?.reshape(&[1])?);
    }
    let cam_term = tape.concat(&cams, 0)?.mean_all().scale(opts.camera_weight);
    Ok(total.add(cam_term)?)
}

fn fuse(
    windows: &[WindowPrediction],
    transforms: Vec<Similarity>,
    depth_scales: Vec<Vec<f64>>,
    residual: f64,
    history: Vec<f64>,
    iterations: usize,
) -> Result<FusedResult> {
    let first = windows.iter().map(|w| w.start).min().unwrap();
    let last = windows.iter().map(|w| w.end).max().unwrap();
    let (width, height) = (windows[0].width(), windows[0].height());
    let px = width * height;
    let mut timestamps = Vec::new();
    let mut trajectory = Vec::new();
    let mut depth = Vec::new();
    let mut points = Vec::new();
    for f in first..last {
        let covering: Vec<usize> = (0..windows.len()).filter(|&w| windows[w].contains(f)).collect();
        if covering.is_empty() {
            return Err(Error::NoOverlap(format!("frame {f} is in no window")));
        }
        timestamps.push(windows[covering[0]].timestamps[windows[covering[0]].local(f)]);

        let poses: Vec<Rigid> = covering
            .iter()
            .map(|&w| transform_pose(&windows[w].cameras[windows[w].local(f)], &transforms[w]))
            .collect();
        trajectory.push(average_pose(&poses));

        let mut d_num = vec![0.0; px];
        let mut p_num = vec![Vec3::zeros(); px];
        let mut den = vec![0.0; px];
        let mut d_den = vec![0.0; px];
        for &w in &covering {
            let win = &windows[w];
            let l = win.local(f);
            let (m, cam, s) = (&win.points[l], &win.cameras[l], &transforms[w]);
            let ds = depth_scales[w][l];
            let center = cam.center();
            for (k, p) in m.valid_points() {
                let c = m.confidence[k];
                p_num[k] += c * place(s, ds, &center, p);
                den[k] += c;
                let z = cam.apply(p).z;
                if z > 0.0 && z.is_finite() {
                    d_num[k] += c * s.scale * ds * z;
                    d_den[k] += c;
                }
            }
        }
        let mut map = PointMap::empty(width, height).with_indices(f, f);
        let mut dm = DepthMap {
            width,
            height,
            depth: vec![0.0; px],
            valid: vec![false; px],
        };
        for k in 0..px {
            if den[k] > 0.0 {
                map.points[k] = p_num[k] / den[k];
                map.valid[k] = true;
                map.confidence[k] = den[k] / covering.len() as f64;
            }
            if d_den[k] > 0.0 {
                dm.depth[k] = d_num[k] / d_den[k];
                dm.valid[k] = true;
            }
        }
        points.push(map);
        depth.push(dm);
    }
    if !residual.is_finite() {
        return Err(Error::Contract(format!("alignment residual {residual}")));
    }
    Ok(FusedResult {
        transforms,
        depth_scales,
        timestamps,
        trajectory,
        depth,
        points,
        residual,
        history,
        iterations,
    })
}

/// Mean camera center and normalized quaternion mean on the hemisphere of
/// the first rotation.
pub fn average_pose(poses: &[Rigid]) -> Rigid {
    if poses.len() == 1 {
        return poses[0];
    }
    let n = poses.len() as f64;
    let center = poses.iter().map(Rigid::center).sum::<Vec3>() / n;
    let q0 = poses[0].quat();
    let mut acc = [0.0; 4];
    for p in poses {
        let q = p.quat();
        let sign = if q.iter().zip(&q0).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for k in 0..4 {
            acc[k] += sign * q[k];
        }
    }
    let rot = Rigid::new(acc, Vec3::zeros()).rotation();
    Rigid::from_rotation(rot, -(rot * center))
}

/// One pose per line, `timestamp tx ty tz qx qy qz qw`, camera to world.
pub fn write_tum(path: &Path, timestamps: &[f64], poses: &[Rigid]) -> Result<()> {
    if timestamps.len() != poses.len() {
        return Err(Error::Contract("timestamps and poses differ in length".into()));
    }
    let mut text = String::new();
    for (t, p) in timestamps.iter().zip(poses) {
        let c2w = p.inverse();
        let q = c2w.quat();
        let tr = c2w.translation;
        writeln!(
            text,
            "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            tr.x, tr.y, tr.z, q[1], q[2], q[3], q[0]
        )
        .unwrap();
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_tum`]: timestamps and world-to-camera poses.
pub fn read_tum(path: &Path) -> Result<(Vec<f64>, Vec<Rigid>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ts = Vec::new();
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if v.len() != 8 {
            return Err(Error::format(path, format!("line {}: expected 8 fields, got {}", i + 1, v.len())));
        }
        ts.push(v[0]);
        poses.push(Rigid::new([v[7], v[4], v[5], v[6]], Vec3::new(v[1], v[2], v[3])).inverse());
    }
    Ok((ts, poses))
}

const DEPTH_MAGIC: &[u8; 4] = b"VDPD";
const DEPTH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthHeader {
    width: usize,
    height: usize,
    timestamps: Vec<f64>,
}

pub fn save_depth(path: &Path, timestamps: &[f64], maps: &[DepthMap]) -> Result<()> {
    let (width, height) = maps.first().map_or((0, 0), |m| (m.width, m.height));
    if timestamps.len() != maps.len() || maps.iter().any(|m| m.width != width || m.height != height) {
        return Err(Error::Contract("depth maps and timestamps do not match".into()));
    }
    let header = DepthHeader {
        width,
        height,
        timestamps: timestamps.to_vec(),
    };
    let mut w = format::encode(DEPTH_MAGIC, DEPTH_VERSION, &header)?;
    for m in maps {
        w.f64s(m.depth.iter().copied());
        w.bools(m.valid.iter().copied());
    }
    format::write(path, w)
}

pub fn load_depth(path: &Path) -> Result<(Vec<f64>, Vec<DepthMap>)> {
    let data = format::read_bytes(path)?;
    let (h, mut r): (DepthHeader, _) = format::decode(&data, path, DEPTH_MAGIC, DEPTH_VERSION)?;
    let px = h.width * h.height;
    let mut maps = Vec::with_capacity(h.timestamps.len());
    for _ in 0..h.timestamps.len() {
        let depth = r.f64s(px)?;
        let valid = r.bools(px)?;
        maps.push(DepthMap {
            width: h.width,
            height: h.height,
            depth,
            valid,
        });
    }
    if !r.at_end() {
        return Err(r.error("trailing bytes"));
    }
    Ok((h.timestamps, maps))
}

#[derive(Serialize)]
struct TransformsDoc<'a> {
    transforms: &'a [Similarity],
    depth_scales: &'a [Vec<f64>],
    residual: f64,
    history: &'a [f64],
    iterations: usize,
}

impl FusedResult {
    /// Writes `trajectory.txt`, `depth.vdpd` and `transforms.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tum(&dir.join("trajectory.txt"), &self.timestamps, &self.trajectory)?;
        save_depth(&dir.join("depth.vdpd"), &self.timestamps, &self.depth)?;
        let doc = TransformsDoc {
            transforms: &self.transforms,
            depth_scales: &self.depth_scales,
            residual: self.residual,
            history: &self.history,
            iterations: self.iterations,
        };
        let json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Contract(e.to_string()))?;
        let path = dir.join("transforms.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
