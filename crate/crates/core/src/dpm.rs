//! Dynamic point maps: per-pixel 3D points of a source frame, placed where they
//! are at a given time and expressed in the frame of a common viewpoint.

use crate::error::{Error, Result};
use crate::geometry::{Transform, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width * height` entries.
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
    pub confidence: Vec<f64>,
    /// Frame whose pixels the points belong to.
    pub source_frame: usize,
    /// Index of the timestamp at which the points are placed.
    pub time_index: usize,
    /// Index of the viewpoint the points are expressed in.
    pub viewpoint_index: usize,
}

impl PointMap {
    /// All-invalid map with unit confidence.
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            points: vec![Vec3::zeros(); n],
            valid: vec![false; n],
            confidence: vec![1.0; n],
            source_frame: 0,
            time_index: 0,
            viewpoint_index: 0,
        }
    }

    pub fn with_indices(mut self, source_frame: usize, time_index: usize) -> Self {
        self.source_frame = source_frame;
        self.time_index = time_index;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_points(&self) -> impl Iterator<Item = (usize, &Vec3)> + '_ {
        self.points
            .iter()
            .enumerate()
            .filter(|(i, _)| self.valid[*i])
    }

    pub fn check(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.points.len() != n || self.valid.len() != n || self.confidence.len() != n {
            return Err(Error::Contract(format!(
                "point map buffers do not match {}x{}",
                self.width, self.height
            )));
        }
        if let Some(i) = (0..n).find(|&i| self.valid[i] && !(self.confidence[i] > 0.0)) {
            return Err(Error::Contract(format!(
                "non-positive confidence {} at valid pixel {i}",
                self.confidence[i]
            )));
        }
        Ok(())
    }

    /// Applies `t` to every point, keeping validity and confidence.
    pub fn transformed<T: Transform>(&self, t: &T) -> PointMap {
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            *p = t.transform(p);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> PointMap {
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            *p *= s;
        }
        out
    }
}

/// Per-pixel displacement between two maps of the same source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlow {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<Vec3>,
    pub valid: Vec<bool>,
}

fn same_grid(a: &PointMap, b: &PointMap) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::RepresentationMismatch(format!(
            "grids {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.viewpoint_index != b.viewpoint_index {
        return Err(Error::RepresentationMismatch(format!(
            "viewpoints {} and {}",
            a.viewpoint_index, b.viewpoint_index
        )));
    }
    Ok(())
}

pub fn scene_flow(a: &PointMap, b: &PointMap) -> Result<SceneFlow> {
    same_grid(a, b)?;
    if a.source_frame != b.source_frame {
        return Err(Error::RepresentationMismatch(format!(
            "scene flow between source frames {} and {}",
            a.source_frame, b.source_frame
        )));
    }
    let valid: Vec<bool> = a.valid.iter().zip(&b.valid).map(|(x, y)| *x && *y).collect();
    let flow = a
        .points
        .iter()
        .zip(&b.points)
        .zip(&valid)
        .map(|((p, q), &v)| if v { q - p } else { Vec3::zeros() })
        .collect();
    Ok(SceneFlow {
        width: a.width,
        height: a.height,
        flow,
        valid,
    })
}

/// Pixel pairs `(u, v)` whose points coincide within `eps`. Each valid `u`
/// is matched to its nearest valid `v`; ties go to the first `v` in
/// row-major order.
pub fn correspond(a: &PointMap, b: &PointMap, eps: f64) -> Result<Vec<(usize, usize)>> {
    if a.time_index != b.time_index {
        return Err(Error::RepresentationMismatch(format!(
            "correspondence between time indices {} and {}",
            a.time_index, b.time_index
        )));
    }
    if a.viewpoint_index != b.viewpoint_index {
        return Err(Error::RepresentationMismatch(format!(
            "viewpoints {} and {}",
            a.viewpoint_index, b.viewpoint_index
        )));
    }
    let targets: Vec<(usize, &Vec3)> = b.valid_points().collect();
    let mut pairs = Vec::new();
    for (u, p) in a.valid_points() {
        let mut best: Option<(usize, f64)> = None;
        for &(v, q) in &targets {
            let d = (p - q).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((v, d));
            }
        }
        if let Some((v, d)) = best {
            if d <= eps {
                pairs.push((u, v));
            }
        }
    }
    Ok(pairs)
}

/// Mean norm of the valid points across all maps.
pub fn mean_valid_norm<'a>(maps: impl IntoIterator<Item = &'a PointMap>) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for m in maps {
        for (_, p) in m.valid_points() {
            sum += p.norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySet("no valid points".into()));
    }
    let scale = sum / count as f64;
    if !(scale > 0.0) {
        return Err(Error::DegenerateScale("all valid points at the origin".into()));
    }
    Ok(scale)
}

/// Divides every point by the joint mean valid-point norm; returns that scale.
pub fn normalize_unit_mean_dist(maps: &[PointMap]) -> Result<(Vec<PointMap>, f64)> {
    let scale = mean_valid_norm(maps)?;
    let inv = 1.0 / scale;
    Ok((maps.iter().map(|m| m.scaled(inv)).collect(), scale))
}

/// Number of distinct maps in a `(𝒫, 𝒬)` pair for `n` frames.
pub fn count_distinct_maps(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidCount("zero frames".into()));
    }
    Ok(2 * n - 1)
}

/// Time-variant maps `P_i(t_i)` and time-invariant maps `P_i(t_j)` for one snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmSet {
    pub timestamps: Vec<f64>,
    pub reference: usize,
    pub time_variant: Vec<PointMap>,
    pub time_invariant: Vec<PointMap>,
}

impl DpmSet {
    pub fn new(
        timestamps: Vec<f64>,
        reference: usize,
        time_variant: Vec<PointMap>,
        time_invariant: Vec<PointMap>,
    ) -> Result<Self> {
        let n = timestamps.len();
        if n == 0 || time_variant.len() != n || time_invariant.len() != n || reference >= n {
            return Err(Error::Contract(format!(
                "dpm set with {n} timestamps, {} + {} maps, reference {reference}",
                time_variant.len(),
                time_invariant.len()
            )));
        }
        for (i, (p, q)) in time_variant.iter().zip(&time_invariant).enumerate() {
            p.check()?;
            q.check()?;
            if p.viewpoint_index != 0 || q.viewpoint_index != 0 {
                return Err(Error::RepresentationMismatch("maps must use viewpoint 0".into()));
            }
            if p.source_frame != i || q.source_frame != i || p.time_index != i {
                return Err(Error::RepresentationMismatch(format!("map {i} has wrong indices")));
            }
            if q.time_index != reference {
                return Err(Error::RepresentationMismatch(format!(
                    "time-invariant map {i} at time {} instead of {reference}",
                    q.time_index
                )));
            }
        }
        Ok(Self {
            timestamps,
            reference,
            time_variant,
            time_invariant,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// The distinct maps: all of 𝒫 followed by 𝒬 without its reference entry.
    pub fn distinct_maps(&self) -> Vec<&PointMap> {
        self.time_variant
            .iter()
            .chain(
                self.time_invariant
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != self.reference)
                    .map(|(_, m)| m),
            )
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub confidence: Vec<f64>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Union of the valid points of 𝒬: the whole scene at the reference time.
pub fn fuse_at_reference_time(set: &DpmSet) -> PointCloud {
    let mut cloud = PointCloud::default();
    for m in &set.time_invariant {
        for (i, p) in m.valid_points() {
            cloud.points.push(*p);
            cloud.confidence.push(m.confidence[i]);
        }
    }
    cloud
}
