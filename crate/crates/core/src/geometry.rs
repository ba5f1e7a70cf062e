//! Yaw/pitch gaze angles, unit gaze vectors and the angular error metric.
//!
//! Vector convention: x to the right, y up, z forward, so that
//! `(yaw, pitch) = (0, 0)` looks straight ahead along +z.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// A gaze direction or an additive gaze offset, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GazeAngle {
    pub yaw: f64,
    pub pitch: f64,
}

/// Largest absolute yaw or pitch accepted for a labelled sample.
pub const MAX_ABS_ANGLE_DEG: f64 = 90.0;

impl GazeAngle {
    pub const ZERO: GazeAngle = GazeAngle { yaw: 0.0, pitch: 0.0 };

    pub const fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }

    /// Checks the invariants for an angle accepted by the pipeline.
    pub fn validated(self) -> Result<Self> {
        if !self.yaw.is_finite() || !self.pitch.is_finite() {
            return Err(Error::InvalidDataset(format!(
                "non-finite gaze angle ({}, {})",
                self.yaw, self.pitch
            )));
        }
        if self.yaw.abs() > MAX_ABS_ANGLE_DEG || self.pitch.abs() > MAX_ABS_ANGLE_DEG {
            return Err(Error::OutOfRange {
                yaw: self.yaw,
                pitch: self.pitch,
            });
        }
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.yaw.is_finite() && self.pitch.is_finite()
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.yaw, self.pitch]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }

    pub fn l1_norm(&self) -> f64 {
        self.yaw.abs() + self.pitch.abs()
    }

    pub fn norm_squared(&self) -> f64 {
        self.yaw * self.yaw + self.pitch * self.pitch
    }
}

impl fmt::Display for GazeAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.yaw, self.pitch)
    }
}

impl Add for GazeAngle {
    type Output = GazeAngle;
    fn add(self, rhs: GazeAngle) -> GazeAngle {
        GazeAngle::new(self.yaw + rhs.yaw, self.pitch + rhs.pitch)
    }
}

impl AddAssign for GazeAngle {
    fn add_assign(&mut self, rhs: GazeAngle) {
        self.yaw += rhs.yaw;
        self.pitch += rhs.pitch;
    }
}

impl Sub for GazeAngle {
    type Output = GazeAngle;
    fn sub(self, rhs: GazeAngle) -> GazeAngle {
        GazeAngle::new(self.yaw - rhs.yaw, self.pitch - rhs.pitch)
    }
}

impl SubAssign for GazeAngle {
    fn sub_assign(&mut self, rhs: GazeAngle) {
        self.yaw -= rhs.yaw;
        self.pitch -= rhs.pitch;
    }
}

impl Neg for GazeAngle {
    type Output = GazeAngle;
    fn neg(self) -> GazeAngle {
        GazeAngle::new(-self.yaw, -self.pitch)
    }
}

impl Mul<f64> for GazeAngle {
    type Output = GazeAngle;
    fn mul(self, k: f64) -> GazeAngle {
        GazeAngle::new(self.yaw * k, self.pitch * k)
    }
}

impl Div<f64> for GazeAngle {
    type Output = GazeAngle;
    fn div(self, k: f64) -> GazeAngle {
        GazeAngle::new(self.yaw / k, self.pitch / k)
    }
}

impl std::iter::Sum for GazeAngle {
    fn sum<I: Iterator<Item = GazeAngle>>(iter: I) -> GazeAngle {
        iter.fold(GazeAngle::ZERO, |acc, a| acc + a)
    }
}

/// Unit gaze vector `(cos p sin y, sin p, cos p cos y)`.
pub fn to_unit_vector(a: GazeAngle) -> [f64; 3] {
    let (sy, cy) = a.yaw.to_radians().sin_cos();
    let (sp, cp) = a.pitch.to_radians().sin_cos();
    [cp * sy, sp, cp * cy]
}

/// Angle in degrees between the two gaze directions.
///
/// Evaluated as `atan2(|u x v|, u . v)`, which equals the clamped arccos of
/// the dot product but keeps full precision for nearly parallel vectors.
pub fn angular_error(a: GazeAngle, b: GazeAngle) -> f64 {
    angle_between(&to_unit_vector(a), &to_unit_vector(b))
}

/// Angle in degrees between two unit vectors, as in [`angular_error`].
pub fn angle_between(u: &[f64; 3], v: &[f64; 3]) -> f64 {
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    cross.atan2(dot).to_degrees()
}

/// Horizontal mirror: yaw changes sign, pitch is kept.
pub fn flip_gaze(a: GazeAngle) -> GazeAngle {
    GazeAngle::new(-a.yaw, a.pitch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn unit_vector_examples() {
        let v = to_unit_vector(GazeAngle::new(0.0, 0.0));
        assert_abs_diff_eq!(v[0], 0.0);
        assert_abs_diff_eq!(v[1], 0.0);
        assert_abs_diff_eq!(v[2], 1.0);

        let v = to_unit_vector(GazeAngle::new(90.0, 0.0));
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], 0.0, epsilon = 1e-15);

        // direct trigonometric evaluation
        let v = to_unit_vector(GazeAngle::new(10.0, 10.0));
        assert_abs_diff_eq!(v[0], 0.1710, epsilon = 1e-4);
        assert_abs_diff_eq!(v[1], 0.1736, epsilon = 1e-4);
        assert_abs_diff_eq!(v[2], 0.9698, epsilon = 1e-4);
    }

    #[test]
    fn angular_error_examples() {
        let a = GazeAngle::new(5.0, -3.0);
        assert_eq!(angular_error(a, a), 0.0);
        assert_abs_diff_eq!(
            angular_error(GazeAngle::new(10.0, 0.0), GazeAngle::ZERO),
            10.0,
            epsilon = 1e-12
        );
        // dot-product oracle: acos(v(10,10) . (0,0,1)) = 14.10604...
        assert_abs_diff_eq!(
            angular_error(GazeAngle::new(10.0, 10.0), GazeAngle::ZERO),
            14.106,
            epsilon = 0.01
        );
    }

    #[test]
    fn flip_examples() {
        assert_eq!(flip_gaze(GazeAngle::new(4.0, -2.0)), GazeAngle::new(-4.0, -2.0));
        assert_eq!(flip_gaze(GazeAngle::new(0.0, 7.0)), GazeAngle::new(0.0, 7.0));
        let a = GazeAngle::new(-5.4, 3.9);
        assert_eq!(flip_gaze(flip_gaze(a)), a);
    }

    #[test]
    fn validation_rejects_bad_angles() {
        assert!(GazeAngle::new(f64::NAN, 0.0).validated().is_err());
        assert!(GazeAngle::new(91.0, 0.0).validated().is_err());
        assert!(GazeAngle::new(-90.0, 90.0).validated().is_ok());
    }

    fn angle() -> impl Strategy<Value = GazeAngle> {
        (-90.0f64..=90.0, -90.0f64..=90.0).prop_map(|(y, p)| GazeAngle::new(y, p))
    }

    proptest! {
        #[test]
        fn unit_vector_has_unit_norm(a in angle()) {
            let v = to_unit_vector(a);
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn angular_error_symmetric_nonnegative(a in angle(), b in angle()) {
            let e1 = angular_error(a, b);
            let e2 = angular_error(b, a);
            prop_assert!(e1 >= 0.0);
            prop_assert_eq!(e1, e2);
        }

        #[test]
        fn pure_yaw_error_is_exact(y in -90.0f64..=90.0) {
            let e = angular_error(GazeAngle::new(y, 0.0), GazeAngle::ZERO);
            prop_assert!((e - y.abs()).abs() <= 1e-9 * (1.0 + y.abs()));
        }

        #[test]
        fn flip_preserves_error(a in angle(), b in angle()) {
            let e = angular_error(a, b);
            let ef = angular_error(flip_gaze(a), flip_gaze(b));
            prop_assert!((e - ef).abs() <= 1e-12);
        }
    }
}
