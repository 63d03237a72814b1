//! Camera geometry: intrinsics, pinhole projection, grid keypoint
//! parameterization, and rigid transforms.
//!
//! Conventions used across the crate:
//!
//! * A relative pose maps coordinates of the first camera frame into the
//!   second: `x' = R * x + t`, with `t` in meters.
//! * Pixel coordinates `(u, v)` have `u` along image width and `v` along
//!   height; the principal point is `(cx, cy)`.
//! * Keypoints live on a coarse cell grid. A cell `(i, j)` together with an
//!   offset in `[0, 1]^2` selects the sub-pixel position
//!   `u = factor * (offset_u + i)`, `v = factor * (offset_v + j)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Pinhole intrinsics with the image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.width, self.height];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Domain(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::Domain("image dimensions must be positive".into()));
        }
        Ok(())
    }

    /// True when `(u, v)` lies inside the image rectangle.
    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u >= 0.0 && p.u <= self.width && p.v >= 0.0 && p.v <= self.height
    }
}

/// A continuous pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v }
    }
}

/// A 3D point in a camera frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CameraPoint3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        CameraPoint3D { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        CameraPoint3D { x: v.x, y: v.y, z: v.z }
    }
}

/// Index of a grid cell: `i` along width, `j` along height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub i: usize,
    pub j: usize,
}

/// Sub-pixel keypoint position for a cell plus an offset in `[0, 1]^2`.
pub fn grid_to_pixel(cell: GridCell, offset: [f64; 2], factor: f64) -> Result<PixelPoint> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Domain(format!("grid factor must be positive, got {factor}")));
    }
    for (axis, o) in ["u", "v"].iter().zip(offset) {
        if !(0.0..=1.0).contains(&o) || !o.is_finite() {
            return Err(Error::Domain(format!("{axis}-offset {o} outside [0, 1]")));
        }
    }
    Ok(PixelPoint {
        u: factor * (offset[0] + cell.i as f64),
        v: factor * (offset[1] + cell.j as f64),
    })
}

/// Backproject pixel `u` at depth `z` into the camera frame.
///
/// Returns `((u - cx) / fx * z, (v - cy) / fy * z, z)`. The depth must be
/// positive and finite.
pub fn backproject(k: &Intrinsics, u: PixelPoint, z: f64) -> Result<CameraPoint3D> {
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::Domain(format!("depth must be positive and finite, got {z}")));
    }
    if !u.u.is_finite() || !u.v.is_finite() {
        return Err(Error::NonFinite("pixel coordinates".into()));
    }
    Ok(CameraPoint3D {
        x: (u.u - k.cx) / k.fx * z,
        y: (u.v - k.cy) / k.fy * z,
        z,
    })
}

/// Project a camera-frame point to pixels. The point must be strictly in
/// front of the camera.
pub fn project(k: &Intrinsics, p: &CameraPoint3D) -> Result<PixelPoint> {
    if !(p.z.is_finite() && p.z > 0.0) {
        return Err(Error::Domain(format!("cannot project point at depth {}", p.z)));
    }
    Ok(PixelPoint {
        u: p.x / p.z * k.fx + k.cx,
        v: p.y / p.z * k.fy + k.cy,
    })
}

/// Tolerance for the orthonormality check in [`Pose::new`]. Poses produced
/// by the solvers are orthonormal to machine precision; the looser guard
/// here only rejects clearly invalid input (e.g. hand-written files).
pub const POSE_ORTHONORMALITY_TOL: f64 = 1e-7;

/// A rigid transform `x' = R * x + t`.
///
/// `R` is kept as an orthonormal matrix with `det(R) = +1`; construction
/// validates this. Composition and inversion stay within 1e-9 of the
/// manifold, so renormalization is only ever needed at I/O boundaries
/// (see [`Pose::renormalized`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().any(|v| !v.is_finite()) || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose".into()));
        }
        let gram = rotation.transpose() * rotation;
        let drift = (gram - Matrix3::identity()).norm();
        if drift > POSE_ORTHONORMALITY_TOL {
            return Err(Error::Domain(format!(
                "rotation is not orthonormal (|R^T R - I| = {drift:.3e})"
            )));
        }
        if rotation.determinant() < 0.0 {
            return Err(Error::Domain("rotation has negative determinant".into()));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Apply the transform: `R * x + t`.
    pub fn transform(&self, p: &CameraPoint3D) -> CameraPoint3D {
        CameraPoint3D::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    pub fn transform_vec(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v + self.translation
    }

    /// The inverse transform `(R^T, -R^T t)`.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotation angle of `R` in degrees, in `[0, 180]`.
    pub fn rotation_angle_deg(&self) -> f64 {
        rotation_angle_deg(&self.rotation)
    }

    /// Project the rotation back onto SO(3) (nearest rotation in Frobenius
    /// norm). Only used after parsing external data.
    pub fn renormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd of 3x3 always yields u");
        let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Pose { rotation: r, translation: self.translation }
    }
}

/// Angle of a rotation matrix in degrees.
///
/// Uses `atan2(|skew(R)|, (trace - 1) / 2)` rather than a bare `acos`: the
/// arc-cosine form loses half the available precision near zero (its noise
/// floor is `sqrt(2 eps)`, about 1e-6 degrees), while this form resolves
/// micro-degree rotations exactly. At a half turn the skew part vanishes and
/// `atan2(0, -1)` still returns 180 degrees.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let c = (r.trace() - 1.0) / 2.0;
    let s = 0.5
        * ((r[(2, 1)] - r[(1, 2)]).powi(2)
            + (r[(0, 2)] - r[(2, 0)]).powi(2)
            + (r[(1, 0)] - r[(0, 1)]).powi(2))
        .sqrt();
    s.atan2(c).to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    fn identity_k() -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0, 100.0, 100.0).unwrap()
    }

    #[test]
    fn backproject_identity_intrinsics() {
        let k = identity_k();
        let p = backproject(&k, PixelPoint::new(2.0, 3.0), 2.0).unwrap();
        assert_eq!(p, CameraPoint3D::new(4.0, 6.0, 2.0));
    }

    #[test]
    fn principal_point_backprojects_onto_optical_axis() {
        let k = Intrinsics::new(500.0, 480.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let p = backproject(&k, PixelPoint::new(320.0, 240.0), 3.5).unwrap();
        assert_eq!(p, CameraPoint3D::new(0.0, 0.0, 3.5));
    }

    #[test]
    fn backproject_rejects_bad_depth() {
        let k = identity_k();
        assert!(backproject(&k, PixelPoint::new(0.0, 0.0), 0.0).is_err());
        assert!(backproject(&k, PixelPoint::new(0.0, 0.0), -1.0).is_err());
        assert!(backproject(&k, PixelPoint::new(0.0, 0.0), f64::NAN).is_err());
    }

    #[test]
    fn project_inverts_backproject() {
        let k = Intrinsics::new(520.0, 510.0, 315.0, 242.0, 640.0, 480.0).unwrap();
        for (u, v, z) in [(12.5, 433.0, 0.3), (320.0, 240.0, 2.0), (601.25, 17.75, 8.5)] {
            let p = backproject(&k, PixelPoint::new(u, v), z).unwrap();
            let back = project(&k, &p).unwrap();
            assert_relative_eq!(back.u, u, max_relative = 1e-12, epsilon = 1e-9);
            assert_relative_eq!(back.v, v, max_relative = 1e-12, epsilon = 1e-9);
        }
    }

    #[test]
    fn grid_to_pixel_places_cell_offsets() {
        let p = grid_to_pixel(GridCell { i: 3, j: 2 }, [0.25, 0.75], 14.0).unwrap();
        assert_eq!(p, PixelPoint::new(45.5, 38.5));
        // Offset 0 sits on the cell's corner, offset 1 on the next corner.
        let lo = grid_to_pixel(GridCell { i: 0, j: 0 }, [0.0, 0.0], 14.0).unwrap();
        let hi = grid_to_pixel(GridCell { i: 7, j: 7 }, [1.0, 1.0], 14.0).unwrap();
        assert_eq!(lo, PixelPoint::new(0.0, 0.0));
        assert_eq!(hi, PixelPoint::new(112.0, 112.0));
    }

    #[test]
    fn grid_to_pixel_rejects_offsets_outside_unit_square() {
        assert!(grid_to_pixel(GridCell { i: 0, j: 0 }, [-0.1, 0.5], 14.0).is_err());
        assert!(grid_to_pixel(GridCell { i: 0, j: 0 }, [0.5, 1.1], 14.0).is_err());
    }

    #[test]
    fn pose_construction_validates_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 2.0;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        // A reflection is orthonormal but not a rotation.
        let mut refl = Matrix3::identity();
        refl[(2, 2)] = -1.0;
        assert!(Pose::new(refl, Vector3::zeros()).is_err());
    }

    #[test]
    fn transform_then_inverse_is_identity() {
        let r = Rotation3::from_euler_angles(0.3, -0.2, 0.9).into_inner();
        let h = Pose::new(r, Vector3::new(0.5, -1.0, 2.0)).unwrap();
        let p = CameraPoint3D::new(0.7, -0.3, 4.0);
        let q = h.inverse().transform(&h.transform(&p));
        assert_relative_eq!(q.x, p.x, epsilon = 1e-12);
        assert_relative_eq!(q.y, p.y, epsilon = 1e-12);
        assert_relative_eq!(q.z, p.z, epsilon = 1e-12);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let a = Pose::new(
            Rotation3::from_euler_angles(0.1, 0.2, -0.4).into_inner(),
            Vector3::new(1.0, 0.0, -0.5),
        )
        .unwrap();
        let b = Pose::new(
            Rotation3::from_euler_angles(-0.7, 0.05, 0.3).into_inner(),
            Vector3::new(0.0, 2.0, 0.25),
        )
        .unwrap();
        let p = CameraPoint3D::new(-0.2, 0.9, 3.0);
        let via_compose = a.compose(&b).transform(&p);
        let sequential = a.transform(&b.transform(&p));
        assert_relative_eq!(via_compose.x, sequential.x, epsilon = 1e-12);
        assert_relative_eq!(via_compose.y, sequential.y, epsilon = 1e-12);
        assert_relative_eq!(via_compose.z, sequential.z, epsilon = 1e-12);
    }

    #[test]
    fn compose_and_inverse_stay_on_manifold() {
        // Long chains must not drift off SO(3) by more than 1e-9.
        let mut h = Pose::identity();
        let step = Pose::new(
            Rotation3::from_euler_angles(0.02, -0.03, 0.05).into_inner(),
            Vector3::new(0.01, 0.02, -0.03),
        )
        .unwrap();
        for _ in 0..1000 {
            h = h.compose(&step);
        }
        let gram = h.rotation().transpose() * h.rotation();
        assert!((gram - Matrix3::identity()).norm() < 1e-9);
        let round_trip = h.compose(&h.inverse());
        assert!((round_trip.rotation() - Matrix3::identity()).norm() < 1e-9);
        assert!(round_trip.translation().norm() < 1e-9);
    }

    #[test]
    fn rotation_angle_handles_half_turn() {
        let r = Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI).into_inner();
        assert_relative_eq!(rotation_angle_deg(&r), 180.0, epsilon = 1e-9);
        assert_relative_eq!(rotation_angle_deg(&Matrix3::identity()), 0.0, epsilon = 1e-12);
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.25_f64).into_inner();
        assert_relative_eq!(rotation_angle_deg(&r), 0.25_f64.to_degrees(), epsilon = 1e-9);
    }
}
