//! Pinhole cameras.

use super::kinematics::{mat_mul, mat_vec, norm, sub, transpose, Mat3, Vec3, IDENTITY};
use crate::error::{Error, Result};

/// Pinhole camera with `x_cam = R · x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    /// Camera at the world origin looking down +z.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    /// Places the camera at `eye` with its optical axis through `target`.
    /// Image rows follow `-up`.
    pub fn looking_at(mut self, eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let unit = |v: Vec3| -> Result<Vec3> {
            let n = norm(&v);
            if n < 1e-12 {
                return Err(Error::Domain("degenerate camera orientation".into()));
            }
            Ok(v.map(|x| x / n))
        };
        let cross = |a: Vec3, b: Vec3| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let z = unit(sub(&target, &eye))?;
        let x = unit(cross(z, up))?;
        let y = cross(z, x);
        self.rotation = [x, y, z];
        self.translation = mat_vec(&self.rotation, &eye).map(|v| -v);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Domain(format!(
                "focal lengths must be positive, got {} and {}",
                self.fx, self.fy
            )));
        }
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let dev: f64 = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rtr[i][j] - IDENTITY[i][j]).powi(2))
            .sum::<f64>()
            .sqrt();
        if dev >= 1e-6 || (self.determinant() - 1.0).abs() >= 1e-6 {
            return Err(Error::Domain("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, world);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn to_world(&self, cam: &Vec3) -> Vec3 {
        mat_vec(&transpose(&self.rotation), &sub(cam, &self.translation))
    }

    /// Pixel coordinates of a point given in camera coordinates.
    pub fn project_camera(&self, p: &Vec3) -> Result<[f64; 2]> {
        if !(p[2] > 0.0) {
            return Err(Error::Projection(format!(
                "point {p:?} has non-positive depth"
            )));
        }
        Ok([
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ])
    }

    pub fn project_point(&self, world: &Vec3) -> Result<[f64; 2]> {
        self.project_camera(&self.to_camera(world))
    }

    /// Projects world points, failing if any lies behind the camera.
    pub fn project(&self, points: &[Vec3]) -> Result<Vec<[f64; 2]>> {
        points.iter().map(|p| self.project_point(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::kinematics::euler;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = Camera::new(64.0, 60.0, 16.0, 15.5);
        assert_eq!(cam.project_point(&[0.0, 0.0, 3.0]).unwrap(), [16.0, 15.5]);
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let cam = Camera::new(50.0, 50.0, 10.0, 10.0);
        let a = cam.project_point(&[1.0, -2.0, 4.0]).unwrap();
        let b = cam.project_point(&[1.0, -2.0, 8.0]).unwrap();
        assert!(((b[0] - 10.0) * 2.0 - (a[0] - 10.0)).abs() < 1e-12);
        assert!(((b[1] - 10.0) * 2.0 - (a[1] - 10.0)).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_projection_error() {
        let cam = Camera::new(1.0, 1.0, 0.0, 0.0);
        assert!(matches!(cam.project_point(&[0.0, 0.0, 0.0]), Err(Error::Projection(_))));
        assert!(matches!(cam.project_point(&[1.0, 0.0, -2.0]), Err(Error::Projection(_))));
    }

    #[test]
    fn matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut cam = Camera::new(
                rng.random_range(10.0..100.0),
                rng.random_range(10.0..100.0),
                rng.random_range(0.0..64.0),
                rng.random_range(0.0..64.0),
            );
            cam.rotation = euler(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            cam.translation = [0.0, 0.0, 20.0];
            cam.validate().unwrap();
            let p: Vec3 = [0, 1, 2].map(|_| rng.random_range(-2.0..2.0));
            let got = cam.project_point(&p).unwrap();
            let r = cam.rotation;
            let mut c = [0.0; 3];
            for i in 0..3 {
                c[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + cam.translation[i];
            }
            let want = [cam.fx * c[0] / c[2] + cam.cx, cam.fy * c[1] / c[2] + cam.cy];
            assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn look_at_is_a_rotation_and_centers_target() {
        let cam = Camera::new(64.0, 64.0, 16.0, 16.0)
            .looking_at([3.0, 0.5, -5.0], [0.0, -1.0, 0.0], [0.0, 1.0, 0.0])
            .unwrap();
        cam.validate().unwrap();
        let px = cam.project_point(&[0.0, -1.0, 0.0]).unwrap();
        assert!((px[0] - 16.0).abs() < 1e-9 && (px[1] - 16.0).abs() < 1e-9);
        let w = [0.3, 0.2, 0.1];
        let back = cam.to_world(&cam.to_camera(&w));
        assert!(norm(&sub(&back, &w)) < 1e-12);
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotations() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0).validate().is_err());
        let mut cam = Camera::new(1.0, 1.0, 0.0, 0.0);
        cam.rotation[0][0] = -1.0;
        assert!(cam.validate().is_err());
    }
}
