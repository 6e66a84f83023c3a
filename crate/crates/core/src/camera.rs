//! Pinhole camera model and rigid transforms.
//!
//! Pixel convention: `u` is the column (rightward), `v` the row (downward),
//! pixel centres sit on integer coordinates. Camera frame: `x` right, `y` down,
//! `z` forward; depth is the `z` coordinate.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Points closer than this to the camera plane are treated as behind the camera.
pub const MIN_Z: f64 = 1e-6;

/// Pinhole intrinsics (zero skew).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// A pixel in homogeneous coordinates with `w = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Domain(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Domain("principal point must be finite".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ p`: the viewing ray through `p` scaled to unit depth.
    #[inline]
    pub fn ray(&self, p: Pixel) -> Point3 {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// `d · K⁻¹ p`.
    pub fn backproject(&self, p: Pixel, depth: f64) -> Result<Point3> {
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("depth {depth} is not positive")));
        }
        Ok(self.ray(p) * depth)
    }

    /// Perspective projection; `None` flags a point behind the camera.
    #[inline]
    pub fn project(&self, p: &Point3) -> Option<Pixel> {
        if p.z > MIN_Z {
            Some(Pixel::new(
                self.fx * p.x / p.z + self.cx,
                self.fy * p.y / p.z + self.cy,
            ))
        } else {
            None
        }
    }

    /// Maps a target pixel with depth into the source view: `K T D(p) K⁻¹ p`.
    pub fn project_pixel(&self, pose: &Pose, p: Pixel, depth: f64) -> Result<Option<Pixel>> {
        let x = self.backproject(p, depth)?;
        Ok(self.project(&pose.transform(&x)))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let vals = text
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Domain(format!("intrinsics: {e}")))?;
        match vals.as_slice() {
            [fx, fy, cx, cy] => Self::new(*fx, *fy, *cx, *cy),
            _ => Err(Error::Domain(format!(
                "intrinsics need 4 values \"fx fy cx cy\", got {}",
                vals.len()
            ))),
        }
    }
}

impl fmt::Display for Intrinsics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.fx, self.fy, self.cx, self.cy)
    }
}

/// Rigid transform `x ↦ R x + t`.
///
/// The six-vector parametrization is `[ω; t]` with `R = exp([ω]×)` (axis-angle)
/// and the translation taken as is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

#[inline]
pub(crate) fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// `sin θ / θ`, `(1 − cos θ)/θ²` and their derivatives divided by `θ`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-3 {
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let da = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0;
        let db = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0;
        (a, b, da, db)
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / t2;
        let da = (theta * c - s) / (t2 * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, da, db)
    }
}

/// Axis-angle to rotation matrix.
pub fn rotation_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = rodrigues_coeffs(w.norm());
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Derivatives `∂R/∂ω_i` of [`rotation_exp`].
pub fn rotation_exp_derivatives(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (a, b, da, db) = rodrigues_coeffs(w.norm());
    let k = skew(w);
    let k2 = k * k;
    std::array::from_fn(|i| {
        let ei = skew(&Vector3::ith(i, 1.0));
        k * (da * w[i]) + ei * a + k2 * (db * w[i]) + (ei * k + k * ei) * b
    })
}

/// Rotation matrix to axis-angle; fails close to a half turn.
pub fn rotation_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let axis2 = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = 0.5 * axis2.norm();
    let theta = sin.atan2(cos);
    if theta >= std::f64::consts::PI - 1e-6 {
        return Err(Error::Domain(format!(
            "rotation angle {theta} too close to π for a unique logarithm"
        )));
    }
    let scale = if theta < 1e-4 {
        0.5 * (1.0 + theta * theta / 6.0)
    } else {
        theta / (2.0 * theta.sin())
    };
    Ok(axis2 * scale)
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        let det = r.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 || !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::Domain(format!(
                "rotation is not a proper orthonormal matrix (|RᵀR−I|={ortho:e}, det={det})"
            )));
        }
        Ok(())
    }

    pub fn exp6(xi: &Vector6<f64>) -> Self {
        let w = Vector3::new(xi[0], xi[1], xi[2]);
        Self {
            rotation: rotation_exp(&w),
            translation: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn log6(&self) -> Result<Vector6<f64>> {
        let w = rotation_log(&self.rotation)?;
        let t = self.translation;
        Ok(Vector6::new(w.x, w.y, w.z, t.x, t.y, t.z))
    }

    /// Derivatives of the homogeneous matrix of `exp6(xi)` w.r.t. each component.
    pub fn exp6_derivatives(xi: &Vector6<f64>) -> [Matrix4<f64>; 6] {
        let w = Vector3::new(xi[0], xi[1], xi[2]);
        let dr = rotation_exp_derivatives(&w);
        std::array::from_fn(|i| {
            let mut m = Matrix4::zeros();
            if i < 3 {
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(&dr[i]);
            } else {
                m[(i - 3, 3)] = 1.0;
            }
            m
        })
    }

    /// Exactly the identity transform (no tolerance).
    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let axis2 = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (0.5 * axis2.norm()).atan2(((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the upper 3×4 block of a homogeneous matrix.
    pub fn from_matrix_unchecked(m: &Matrix4<f64>) -> Pose {
        Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Parses one KITTI odometry line: 12 numbers, row-major `[R | t]`.
    pub fn parse_kitti(line: &str) -> Result<Pose> {
        let vals = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Domain(format!("pose: {e}")))?;
        if vals.len() != 12 {
            return Err(Error::Domain(format!(
                "pose line needs 12 values, got {}",
                vals.len()
            )));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        let pose = Pose {
            rotation,
            translation,
        };
        // KITTI files carry ~1e-9 rounding; re-orthonormalize before validating.
        let pose = pose.orthonormalized();
        pose.validate()?;
        Ok(pose)
    }

    pub fn to_kitti(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        let vals = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ];
        vals.iter()
            .map(|v| format!("{v:.12e}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Projects the rotation onto SO(3) via SVD when it is nearly orthonormal.
    fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => {
                let mut r = u * vt;
                if r.determinant() < 0.0 {
                    let mut u = u;
                    u.column_mut(2).neg_mut();
                    r = u * vt;
                }
                if (r - self.rotation).amax() < 1e-4 {
                    return Pose {
                        rotation: r,
                        translation: self.translation,
                    };
                }
                *self
            }
            _ => *self,
        }
    }
}

pub fn parse_kitti_poses(text: &str) -> Result<Vec<Pose>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| Pose::parse_kitti(l).map_err(|e| Error::Domain(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn format_kitti_poses(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        s.push_str(&p.to_kitti());
        s.push('\n');
    }
    s
}
