//! Validated camera objects, Plücker ray volumes, trajectory normalization,
//! Euler-angle pose targets, and pose error scoring.
//!
//! Extrinsics are stored world-to-camera throughout (the trajectory-file
//! convention); the Plücker computation inverts to camera-to-world
//! internally.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::tensorio::{Tensor, TrajectoryFile};

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("frame {frame}: rotation drift {drift:.3e} exceeds 1e-3")]
    RotationDrift { frame: usize, drift: f64 },
    #[error("frame {frame}: improper rotation (det = {det:.3})")]
    Reflection { frame: usize, det: f64 },
    #[error("frame {frame}: intrinsics out of range ({reason})")]
    BadIntrinsics { frame: usize, reason: String },
    #[error("trajectory lengths differ ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("frame {frame}: |cos(yaw)| < 1e-6, Euler decomposition degenerate")]
    GimbalLock { frame: usize },
    #[error("trajectory has no frames")]
    Empty,
}

/// Pinhole intrinsics normalized by image dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, String> {
        if !(fx > 0.0) || !(fy > 0.0) {
            return Err(format!("focal lengths must be positive (fx={fx}, fy={fy})"));
        }
        if !(cx > 0.0 && cx < 1.0 && cy > 0.0 && cy < 1.0) {
            return Err(format!("principal point must lie in (0,1) (cx={cx}, cy={cy})"));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

pub const ORTHONORMALITY_TOL: f64 = 1e-5;

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, String> {
        let drift = orthonormality_residual(&rotation);
        if drift > ORTHONORMALITY_TOL {
            return Err(format!("rotation not orthonormal (residual {drift:.3e})"));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(format!("rotation determinant {det} != +1"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates (-R^T t).
    pub fn camera_center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }
}

/// Frobenius norm of R^T R - I.
pub fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub frames: Vec<CameraFrame>,
}

impl CameraTrajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-pixel 6D ray embedding over F x H x W: (d_x, d_y, d_z, m_x, m_y, m_z)
/// with unit direction d and moment m = o x d.
#[derive(Debug, Clone)]
pub struct PluckerVolume {
    pub values: Tensor,
}

impl PluckerVolume {
    pub fn frames(&self) -> usize {
        self.values.dims()[0]
    }
    pub fn height(&self) -> usize {
        self.values.dims()[1]
    }
    pub fn width(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn at(&self, f: usize, v: usize, u: usize) -> [f32; 6] {
        let off = self.values.offset(&[f, v, u, 0]);
        self.values.data()[off..off + 6].try_into().unwrap()
    }
}

/// Per-frame (pitch, yaw, roll, t_x, t_y, t_z) relative to frame 0.
/// Angles follow the fixed decomposition R = R_z(roll) R_y(yaw) R_x(pitch).
#[derive(Debug, Clone, PartialEq)]
pub struct EulerPoseTargets {
    pub rows: Vec<[f64; 6]>,
}

impl EulerPoseTargets {
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f32> = self
            .rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| v as f32))
            .collect();
        Tensor::new(vec![self.rows.len(), 6], data).unwrap()
    }
}

/// Nearest orthonormal matrix by Higham's iteration X <- (X + X^-T)/2.
/// Converges quadratically to the orthogonal polar factor.
fn nearest_orthonormal(r: &Matrix3<f64>) -> Matrix3<f64> {
    let mut x = *r;
    for _ in 0..32 {
        let inv_t = match x.try_inverse() {
            Some(inv) => inv.transpose(),
            None => return x,
        };
        x = (x + inv_t) * 0.5;
        if orthonormality_residual(&x) < 1e-12 {
            break;
        }
    }
    x
}

/// Converts raw trajectory records into validated cameras. Rotations with
/// orthonormality drift <= 1e-3 are repaired by nearest-orthonormal
/// projection; larger drift, reflections, and out-of-range intrinsics are
/// hard errors.
pub fn build_trajectory(raw: &TrajectoryFile) -> Result<CameraTrajectory, CameraError> {
    if raw.frames.is_empty() {
        return Err(CameraError::Empty);
    }
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (idx, rec) in raw.frames.iter().enumerate() {
        let [fx, fy, cx, cy] = rec.intrinsics;
        let intrinsics = Intrinsics::new(fx, fy, cx, cy)
            .map_err(|reason| CameraError::BadIntrinsics { frame: idx, reason })?;
        let e = &rec.extrinsic;
        let rotation = Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]);
        let translation = Vector3::new(e[3], e[7], e[11]);
        let drift = orthonormality_residual(&rotation);
        if drift > 1e-3 {
            return Err(CameraError::RotationDrift { frame: idx, drift });
        }
        let rotation = if drift > 0.0 {
            nearest_orthonormal(&rotation)
        } else {
            rotation
        };
        let det = rotation.determinant();
        if det < 0.0 {
            return Err(CameraError::Reflection { frame: idx, det });
        }
        frames.push(CameraFrame {
            intrinsics,
            extrinsics: Extrinsics { rotation, translation },
        });
    }
    Ok(CameraTrajectory { frames })
}

/// Re-expresses every pose relative to frame 0: frame f becomes C_f C_0^-1
/// in the world-to-camera convention, so frame 0 is identity/zero.
/// Idempotent and invariant to global rigid world transforms.
pub fn normalize_to_first(traj: &CameraTrajectory) -> CameraTrajectory {
    let first = &traj.frames[0].extrinsics;
    let r0t = first.rotation.transpose();
    let t0 = first.translation;
    let frames = traj
        .frames
        .iter()
        .map(|f| {
            let r = f.extrinsics.rotation * r0t;
            let t = f.extrinsics.translation - r * t0;
            CameraFrame {
                intrinsics: f.intrinsics,
                extrinsics: Extrinsics { rotation: r, translation: t },
            }
        })
        .collect();
    CameraTrajectory { frames }
}

/// Computes the Plücker volume [F, H, W, 6] for pixel-center rays
/// ((u + 0.5)/W, (v + 0.5)/H). Directions are unit camera-to-world rays and
/// moments are o x d for the camera center o.
pub fn plucker_volume(traj: &CameraTrajectory, height: usize, width: usize) -> PluckerVolume {
    assert!(height >= 1 && width >= 1, "H, W must be >= 1");
    let f = traj.len();
    let mut data = vec![0.0f32; f * height * width * 6];
    let frame_len = height * width * 6;
    data.par_chunks_mut(frame_len)
        .zip(traj.frames.par_iter())
        .for_each(|(chunk, frame)| {
            let k = &frame.intrinsics;
            let r_t = frame.extrinsics.rotation.transpose();
            let center = frame.extrinsics.camera_center();
            for v in 0..height {
                for u in 0..width {
                    let xn = (u as f64 + 0.5) / width as f64;
                    let yn = (v as f64 + 0.5) / height as f64;
                    let dir_cam = Vector3::new((xn - k.cx) / k.fx, (yn - k.cy) / k.fy, 1.0);
                    let dir = (r_t * dir_cam).normalize();
                    let moment = center.cross(&dir);
                    let off = (v * width + u) * 6;
                    chunk[off] = dir.x as f32;
                    chunk[off + 1] = dir.y as f32;
                    chunk[off + 2] = dir.z as f32;
                    chunk[off + 3] = moment.x as f32;
                    chunk[off + 4] = moment.y as f32;
                    chunk[off + 5] = moment.z as f32;
                }
            }
        });
    PluckerVolume {
        values: Tensor::new(vec![f, height, width, 6], data).unwrap(),
    }
}

/// Recomposes R = R_z(roll) R_y(yaw) R_x(pitch).
pub fn rotation_from_euler(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    let (sa, ca) = pitch.sin_cos();
    let (sb, cb) = yaw.sin_cos();
    let (sc, cc) = roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Matrix3::new(cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Per-frame Tait-Bryan angles (R = R_z R_y R_x) plus relative translation,
/// all relative to frame 0 (normalization applied internally).
pub fn euler_targets(traj: &CameraTrajectory) -> Result<EulerPoseTargets, CameraError> {
    let norm = normalize_to_first(traj);
    let mut rows = Vec::with_capacity(norm.len());
    for (idx, frame) in norm.frames.iter().enumerate() {
        let r = &frame.extrinsics.rotation;
        let yaw = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        if yaw.cos().abs() < 1e-6 {
            return Err(CameraError::GimbalLock { frame: idx });
        }
        let pitch = r[(2, 1)].atan2(r[(2, 2)]);
        let roll = r[(1, 0)].atan2(r[(0, 0)]);
        let t = frame.extrinsics.translation;
        rows.push([pitch, yaw, roll, t.x, t.y, t.z]);
    }
    Ok(EulerPoseTargets { rows })
}

/// Builds a world-to-camera trajectory back from Euler rows (the inverse of
/// `euler_targets` away from gimbal lock). Intrinsics are filled with a
/// fixed placeholder since pose errors never read them.
pub fn trajectory_from_euler_rows(rows: &[[f64; 6]]) -> CameraTrajectory {
    let intrinsics = Intrinsics::new(1.0, 1.0, 0.5, 0.5).unwrap();
    let frames = rows
        .iter()
        .map(|row| CameraFrame {
            intrinsics,
            extrinsics: Extrinsics {
                rotation: rotation_from_euler(row[0], row[1], row[2]),
                translation: Vector3::new(row[3], row[4], row[5]),
            },
        })
        .collect();
    CameraTrajectory { frames }
}

/// Mean per-frame geodesic rotation distance in radians:
/// mean_f arccos(clamp((trace(R_a R_b^T) - 1)/2, -1, 1)).
/// Both trajectories are expected to be normalized to their first frame.
pub fn rotation_error(a: &CameraTrajectory, b: &CameraTrajectory) -> Result<f64, CameraError> {
    if a.len() != b.len() {
        return Err(CameraError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let mut sum = 0.0;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        let m = fa.extrinsics.rotation * fb.extrinsics.rotation.transpose();
        let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        sum += cos.acos();
    }
    Ok(sum / a.len() as f64)
}

/// Mean per-frame L2 distance between translation sequences after each is
/// scaled so its maximum norm is 1 (scaling skipped when all norms < 1e-8).
/// Both trajectories are expected to be normalized to their first frame.
pub fn translation_error(a: &CameraTrajectory, b: &CameraTrajectory) -> Result<f64, CameraError> {
    if a.len() != b.len() {
        return Err(CameraError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let scaled = |traj: &CameraTrajectory| -> Vec<Vector3<f64>> {
        let ts: Vec<Vector3<f64>> = traj.frames.iter().map(|f| f.extrinsics.translation).collect();
        let max = ts.iter().map(|t| t.norm()).fold(0.0, f64::max);
        if max < 1e-8 {
            ts
        } else {
            ts.into_iter().map(|t| t / max).collect()
        }
    };
    let ta = scaled(a);
    let tb = scaled(b);
    let sum: f64 = ta.iter().zip(&tb).map(|(x, y)| (x - y).norm()).sum();
    Ok(sum / a.len() as f64)
}

/// Geodesic angle between two rotations via unit quaternions
/// (2 acos |q_a . q_b|). Exposed for cross-checks.
pub fn quaternion_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let qa = UnitQuaternion::from_matrix(a);
    let qb = UnitQuaternion::from_matrix(b);
    let dot = qa.coords.dot(&qb.coords).abs().clamp(-1.0, 1.0);
    2.0 * dot.acos()
}
