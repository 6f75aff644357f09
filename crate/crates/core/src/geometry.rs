//! Rigid and similarity transforms, the pinhole camera and point-set alignment.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::dpm::PointMap;
use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Points with camera depth at or below this are not projectable.
pub const NEAR_PLANE: f64 = 1e-4;

/// Rotation followed by translation: `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RigidRepr", into = "RigidRepr")]
pub struct Rigid {
    rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct RigidRepr {
    quat: [f64; 4],
    translation: [f64; 3],
}

impl From<Rigid> for RigidRepr {
    fn from(r: Rigid) -> Self {
        Self {
            quat: r.quat(),
            translation: r.translation.into(),
        }
    }
}

impl From<RigidRepr> for Rigid {
    fn from(r: RigidRepr) -> Self {
        Rigid::from_stored(r.quat, r.translation.into())
    }
}

fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::new_normalize(q);
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Default for Rigid {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// `quat` is `(w, x, y, z)`; it is normalized and moved to the `w ≥ 0` hemisphere.
    pub fn new(quat: [f64; 4], translation: Vec3) -> Self {
        let [w, x, y, z] = quat;
        Self {
            rotation: canonical(Quaternion::new(w, x, y, z)),
            translation,
        }
    }

    /// Like [`Rigid::new`], but keeps an already canonical unit quaternion
    /// bit-for-bit so stored poses round-trip exactly.
    pub fn from_stored(quat: [f64; 4], translation: Vec3) -> Self {
        let [w, x, y, z] = quat;
        let q = Quaternion::new(w, x, y, z);
        if w >= 0.0 && (q.norm() - 1.0).abs() < 1e-12 {
            Self {
                rotation: UnitQuaternion::new_unchecked(q),
                translation,
            }
        } else {
            Self::new(quat, translation)
        }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: canonical(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_matrix(r: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        Self::from_rotation(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::from_rotation(rot, translation)
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    /// `(w, x, y, z)` with `w ≥ 0`.
    pub fn quat(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid::from_rotation(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Rigid {
        let inv = self.rotation.inverse();
        Rigid::from_rotation(inv, -(inv * self.translation))
    }

    /// Camera center of a world-to-camera pose.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Rotation angle of `self⁻¹ ∘ other`, in radians.
    pub fn angle_to(&self, other: &Rigid) -> f64 {
        let q = self.rotation.inverse() * other.rotation;
        2.0 * q.imag().norm().atan2(q.scalar().abs())
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`, with
    /// `+y` pointing down in the image.
    pub fn look_at(eye: Vec3, target: Vec3, down: Vec3) -> Rigid {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Rigid::from_matrix(&r, -(r * eye))
    }
}

/// `p ↦ s·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rigid: Rigid,
}

impl Default for Similarity {
    fn default() -> Self {
        Self::identity()
    }
}

impl From<Rigid> for Similarity {
    fn from(rigid: Rigid) -> Self {
        Self { scale: 1.0, rigid }
    }
}

impl Similarity {
    pub fn identity() -> Self {
        Rigid::identity().into()
    }

    pub fn new(scale: f64, rigid: Rigid) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::DegenerateScale(format!("similarity scale {scale}")));
        }
        Ok(Self { scale, rigid })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rigid.rotation * p) + self.rigid.translation
    }

    pub fn compose(&self, other: &Similarity) -> Similarity {
        let r = self.rigid.rotation;
        Similarity {
            scale: self.scale * other.scale,
            rigid: Rigid::from_rotation(
                r * other.rigid.rotation,
                self.scale * (r * other.rigid.translation) + self.rigid.translation,
            ),
        }
    }

    pub fn inverse(&self) -> Similarity {
        let inv = self.rigid.rotation.inverse();
        Similarity {
            scale: 1.0 / self.scale,
            rigid: Rigid::from_rotation(inv, -(inv * self.rigid.translation) / self.scale),
        }
    }
}

/// Anything that maps points; implemented by [`Rigid`] and [`Similarity`].
pub trait Transform {
    fn transform(&self, p: &Vec3) -> Vec3;
}

impl Transform for Rigid {
    fn transform(&self, p: &Vec3) -> Vec3 {
        self.apply(p)
    }
}

impl Transform for Similarity {
    fn transform(&self, p: &Vec3) -> Vec3 {
        self.apply(p)
    }
}

pub fn transform_points<T: Transform>(t: &T, pts: &[Vec3]) -> Vec<Vec3> {
    pts.iter().map(|p| t.transform(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels with the principal point at `(width/2, height/2)`.
    pub fn from_vertical_fov(fov: f64, width: usize, height: usize) -> Result<Self> {
        let f = height as f64 / 2.0 / (fov / 2.0).tan();
        Self::new(f, f, (width / 2) as f64, (height / 2) as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn vertical_fov(&self) -> f64 {
        2.0 * (self.height as f64 / 2.0 / self.fy).atan()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Projection {
    /// Row-major pixel index of the nearest pixel center, if inside the image.
    pub fn pixel(&self, cam: &Intrinsics) -> Option<usize> {
        if !self.valid {
            return None;
        }
        let (x, y) = (self.u.round(), self.v.round());
        if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
            return None;
        }
        Some(y as usize * cam.width + x as usize)
    }
}

pub fn project_point(cam: &Intrinsics, pose: &Rigid, p: &Vec3) -> Projection {
    let q = pose.apply(p);
    if q.z <= NEAR_PLANE {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth: q.z,
            valid: false,
        };
    }
    Projection {
        u: cam.fx * q.x / q.z + cam.cx,
        v: cam.fy * q.y / q.z + cam.cy,
        depth: q.z,
        valid: true,
    }
}

pub fn project(cam: &Intrinsics, pose: &Rigid, pts: &[Vec3]) -> Vec<Projection> {
    pts.iter().map(|p| project_point(cam, pose, p)).collect()
}

/// Per-pixel depth along the optical axis; pixel centers sit at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::Contract(format!(
                "depth map of {} values for {width}x{height}",
                depth.len()
            )));
        }
        let valid = depth.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }
}

/// Lifts every positive-depth pixel to world coordinates; other pixels are invalid.
pub fn unproject(cam: &Intrinsics, pose: &Rigid, depth: &DepthMap) -> PointMap {
    let inv = pose.inverse();
    let mut map = PointMap::empty(depth.width, depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let idx = y * depth.width + x;
            let d = depth.depth[idx];
            if !(depth.valid[idx] && d > 0.0) {
                continue;
            }
            let ray = Vec3::new((x as f64 - cam.cx) / cam.fx, (y as f64 - cam.cy) / cam.fy, 1.0);
            map.points[idx] = inv.apply(&(ray * d));
            map.valid[idx] = true;
        }
    }
    map
}

/// Least-squares similarity (or rigid, without scale) mapping `src` onto `dst`.
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::Contract(format!(
            "umeyama: {} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::AlignmentDegenerate(format!("{n} correspondences, need 3")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vec3>() * inv_n;
    let mu_d = dst.iter().sum::<Vec3>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Singular values come sorted in decreasing order.
    let sv = svd.singular_values;
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] || var_s <= 0.0 {
        return Err(Error::AlignmentDegenerate("rank-deficient covariance".into()));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let r = u * s * v_t;
    let scale = if with_scale {
        (d * s).trace() / var_s
    } else {
        1.0
    };
    let t = mu_d - scale * (r * mu_s);
    Similarity::new(scale, Rigid::from_matrix(&r, t))
}
